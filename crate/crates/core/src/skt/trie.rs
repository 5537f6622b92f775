use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::ItemId;
use crate::skt::table::{lcp, ItemKind, SidTable};

#[derive(Clone, Debug, Default)]
pub struct TrieNode {
    pub children: BTreeMap<u32, usize>,
    /// Set on the node reached by a complete SID followed by EOS.
    pub item: Option<ItemId>,
    pub depth: usize,
    pub heads_below: usize,
    pub tails_below: usize,
}

/// Prefix tree over EOS-terminated SIDs, used for constrained decoding.
#[derive(Clone, Debug)]
pub struct Trie {
    pub nodes: Vec<TrieNode>,
    pub eos: u32,
}

pub const ROOT: usize = 0;

impl Trie {
    pub fn build(table: &SidTable) -> Self {
        let eos = table.layout.eos;
        let mut nodes = vec![TrieNode::default()];
        for (item, sid) in table.iter() {
            let mut cur = ROOT;
            let path = sid.with_eos(eos);
            for &t in &path {
                match sid.kind {
                    ItemKind::Head => nodes[cur].heads_below += 1,
                    ItemKind::Tail => nodes[cur].tails_below += 1,
                }
                let next = match nodes[cur].children.get(&t) {
                    Some(&n) => n,
                    None => {
                        let depth = nodes[cur].depth + 1;
                        nodes.push(TrieNode {
                            depth,
                            ..TrieNode::default()
                        });
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(t, n);
                        n
                    }
                };
                cur = next;
            }
            match sid.kind {
                ItemKind::Head => nodes[cur].heads_below += 1,
                ItemKind::Tail => nodes[cur].tails_below += 1,
            }
            nodes[cur].item = Some(item);
        }
        Self { nodes, eos }
    }

    pub fn child(&self, node: usize, token: u32) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn node(&self, prefix: &[u32]) -> Option<usize> {
        prefix.iter().try_fold(ROOT, |n, &t| self.child(n, t))
    }

    /// Tokens that extend `prefix` toward some item, ascending.
    pub fn allowed(&self, prefix: &[u32]) -> Vec<u32> {
        self.node(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.item.is_some()).count()
    }

    /// Number of nodes with two or more children, keyed by the 1-based
    /// decoding step at which the branching choice is made.
    pub fn branching_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for n in &self.nodes {
            if n.children.len() >= 2 {
                *h.entry(n.depth + 1).or_insert(0) += 1;
            }
        }
        h
    }
}

/// For every tail item, the 1-based step at which it leaves the head item
/// sharing its longest prefix (EOS included on both sides).
pub fn head_divergence_steps(table: &SidTable) -> BTreeMap<ItemId, usize> {
    let eos = table.layout.eos;
    let heads: Vec<Vec<u32>> = table
        .items_of_kind(ItemKind::Head)
        .map(|(_, s)| s.with_eos(eos))
        .collect();
    table
        .items_of_kind(ItemKind::Tail)
        .map(|(item, s)| {
            let path = s.with_eos(eos);
            let best = heads.iter().map(|h| lcp(&path, h)).max().unwrap_or(0);
            (item, best + 1)
        })
        .collect()
}

pub fn divergence_histogram(table: &SidTable) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for step in head_divergence_steps(table).into_values() {
        *h.entry(step).or_insert(0) += 1;
    }
    h
}

/// Number of decoding steps at which a head-item path competes with the
/// given tail item's path.
///
/// A head item `h` competes at the step where its EOS-terminated SID leaves
/// the tail's, i.e. at position `lcp(tail, h)`. Steps covered by a complete
/// head SID that the tail inherits as a prefix are not competitions: the tail
/// rides that head's path there, so the choice is head versus head. The
/// count is over distinct positions.
pub fn competition_steps(table: &SidTable, item: ItemId) -> Option<usize> {
    let eos = table.layout.eos;
    let sid = table.get(item)?;
    let path = sid.with_eos(eos);
    let heads: Vec<&[u32]> = table
        .items_of_kind(ItemKind::Head)
        .filter(|(h, _)| *h != item)
        .map(|(_, s)| s.tokens.as_slice())
        .collect();
    let inherited = heads
        .iter()
        .filter(|h| h.len() < path.len() && path.starts_with(h))
        .map(|h| h.len())
        .max()
        .unwrap_or(0);
    let mut positions: Vec<usize> = heads
        .iter()
        .map(|h| {
            let mut hp = h.to_vec();
            hp.push(eos);
            lcp(&path, &hp)
        })
        .filter(|&p| p >= inherited && p < path.len())
        .collect();
    positions.sort_unstable();
    positions.dedup();
    Some(positions.len())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrieStats {
    pub nodes: usize,
    pub leaves: usize,
    pub max_depth: usize,
    pub branching_histogram: BTreeMap<usize, usize>,
    pub tail_divergence_histogram: BTreeMap<usize, usize>,
    pub tail_competition_histogram: BTreeMap<usize, usize>,
    pub collisions: usize,
}

pub fn trie_stats(table: &SidTable, trie: &Trie) -> TrieStats {
    let mut comp = BTreeMap::new();
    for (item, _) in table.items_of_kind(ItemKind::Tail) {
        if let Some(z) = competition_steps(table, item) {
            *comp.entry(z).or_insert(0) += 1;
        }
    }
    TrieStats {
        nodes: trie.nodes.len(),
        leaves: trie.num_leaves(),
        max_depth: trie.max_depth(),
        branching_histogram: trie.branching_histogram(),
        tail_divergence_histogram: divergence_histogram(table),
        tail_competition_histogram: comp,
        collisions: table.collisions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skt::layout::VocabLayout;
    use crate::skt::table::SemanticId;

    fn table(entries: &[(u32, &[u32], ItemKind)], layout: VocabLayout) -> SidTable {
        let e = entries
            .iter()
            .map(|(i, t, k)| {
                (
                    ItemId(*i),
                    SemanticId {
                        tokens: t.to_vec(),
                        kind: *k,
                    },
                )
            })
            .collect();
        SidTable::new(layout, e, 0).unwrap()
    }

    #[test]
    fn single_head_has_eos_leaf_at_depth_lh_plus_one() {
        let layout = VocabLayout::skt(2, 4, 1, 4, 1);
        let t = table(&[(0, &[1, 5], ItemKind::Head)], layout.clone());
        let trie = Trie::build(&t);
        assert_eq!(trie.max_depth(), 3);
        assert_eq!(trie.allowed(&[1, 5]), vec![layout.eos]);
        let leaf = trie.node(&[1, 5, layout.eos]).unwrap();
        assert_eq!(trie.nodes[leaf].item, Some(ItemId(0)));
    }

    #[test]
    fn inherited_tail_branches_against_eos() {
        let layout = VocabLayout::skt(2, 4, 1, 4, 1);
        let t = table(
            &[(0, &[1, 5], ItemKind::Head), (1, &[1, 5, 9], ItemKind::Tail)],
            layout.clone(),
        );
        let trie = Trie::build(&t);
        assert_eq!(trie.allowed(&[1, 5]), vec![9, layout.eos]);
        assert_eq!(competition_steps(&t, ItemId(1)), Some(1));
        assert_eq!(head_divergence_steps(&t)[&ItemId(1)], 3);
    }

    #[test]
    fn undifferentiated_tail_competes_at_several_steps() {
        let layout = VocabLayout::rqk(3, 4, 1);
        let t = table(
            &[
                (0, &[0, 4, 8], ItemKind::Head),
                (1, &[1, 4, 8], ItemKind::Head),
                (2, &[0, 5, 8], ItemKind::Head),
                (3, &[0, 4, 9], ItemKind::Tail),
            ],
            layout,
        );
        // diverges from item 1 at step 1, item 2 at step 2, item 0 at step 3
        assert_eq!(competition_steps(&t, ItemId(3)), Some(3));
    }
}
