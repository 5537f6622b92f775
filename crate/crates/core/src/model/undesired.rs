use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{HeadTailSplit, ItemId};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::quantize::RepTable;
use crate::scalar::Scalar;
use crate::skt::{lcp, SidTable};

/// Candidate-set sizes of the two selection stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UndesiredConfig {
    /// Rough stage: nearest heads by cosine.
    pub k_a: usize,
    /// Fine stage: heads kept after ranking by shortest shared prefix.
    pub k_b: usize,
}

impl Default for UndesiredConfig {
    fn default() -> Self {
        Self { k_a: 200, k_b: 5 }
    }
}

/// Two-stage selection of head items that a tail item's generation should
/// move away from.
///
/// Stage 1 keeps the `k_a` heads closest to the tail by cosine; stage 2
/// keeps the `k_b` of those with the shortest common SID prefix. Ties in
/// both stages go to the lower item ID. Heads with a zero representation
/// are never selected.
pub fn build_undesired<T: Scalar>(
    tail: ItemId,
    reps: &RepTable<T>,
    heads: &[ItemId],
    table: &SidTable,
    cfg: UndesiredConfig,
) -> Result<Vec<ItemId>> {
    if cfg.k_b == 0 || cfg.k_a < cfg.k_b {
        return Err(Error::Argument(format!(
            "need k_a >= k_b >= 1, got k_a={} k_b={}",
            cfg.k_a, cfg.k_b
        )));
    }
    let x = reps.get(&tail).ok_or(Error::MissingItem(tail))?;
    let tail_sid = &table.sid(tail)?.tokens;
    let mut rough: Vec<(T, ItemId)> = Vec::with_capacity(heads.len());
    for &h in heads {
        let v = reps.get(&h).ok_or(Error::MissingItem(h))?;
        if let Some(c) = cosine(x, v) {
            rough.push((c, h));
        }
    }
    rough.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    rough.truncate(cfg.k_a);
    let mut fine: Vec<(usize, ItemId)> = rough
        .iter()
        .map(|&(_, h)| Ok((lcp(&table.sid(h)?.tokens, tail_sid), h)))
        .collect::<Result<_>>()?;
    fine.sort();
    fine.truncate(cfg.k_b);
    if fine.len() < cfg.k_b {
        log::warn!(
            "tail item {} has only {} undesired candidates (wanted {})",
            tail.0,
            fine.len(),
            cfg.k_b
        );
    }
    Ok(fine.into_iter().map(|(_, h)| h).collect())
}

/// Precomputed undesired heads for every tail item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UndesiredCollection {
    pub config: Option<UndesiredConfig>,
    pub by_tail: BTreeMap<ItemId, Vec<ItemId>>,
}

impl UndesiredCollection {
    pub fn build<T: Scalar>(
        reps: &RepTable<T>,
        split: &HeadTailSplit,
        table: &SidTable,
        cfg: UndesiredConfig,
    ) -> Result<Self> {
        let heads: Vec<ItemId> = split.head.iter().copied().filter(|h| table.get(*h).is_some()).collect();
        let tails: Vec<ItemId> = split.tail.iter().copied().filter(|t| table.get(*t).is_some()).collect();
        let lists = tails
            .par_iter()
            .map(|&t| Ok((t, build_undesired(t, reps, &heads, table, cfg)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: Some(cfg),
            by_tail: lists.into_iter().collect(),
        })
    }

    pub fn get(&self, tail: ItemId) -> &[ItemId] {
        self.by_tail.get(&tail).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.by_tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tail.is_empty()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skt::{ItemKind, SemanticId, VocabLayout};

    fn sid(tokens: &[u32], kind: ItemKind) -> SemanticId {
        SemanticId {
            tokens: tokens.to_vec(),
            kind,
        }
    }

    #[test]
    fn two_stage_rule_picks_low_lcp_within_rough_set() {
        let layout = VocabLayout::rqk(4, 8, 0);
        let t = |l: usize, c: usize| layout.token(l, c).unwrap();
        let tail = ItemId(9);
        let entries: BTreeMap<ItemId, SemanticId> = [
            (ItemId(1), sid(&[t(0, 1), t(1, 1), t(2, 1), t(3, 1)], ItemKind::Head)),
            (ItemId(2), sid(&[t(0, 2), t(1, 1), t(2, 1), t(3, 1)], ItemKind::Head)),
            (ItemId(3), sid(&[t(0, 3), t(1, 1), t(2, 1), t(3, 1)], ItemKind::Head)),
            (tail, sid(&[t(0, 1), t(1, 1), t(2, 1), t(3, 2)], ItemKind::Tail)),
        ]
        .into_iter()
        .collect();
        let table = SidTable::new(layout, entries, 0).unwrap();
        let mut reps: RepTable<f64> = BTreeMap::new();
        reps.insert(tail, vec![1.0, 0.0]);
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        reps.insert(ItemId(1), at(0.9));
        reps.insert(ItemId(2), at(0.8));
        reps.insert(ItemId(3), at(0.1));
        let heads = [ItemId(1), ItemId(2), ItemId(3)];
        let got = build_undesired(tail, &reps, &heads, &table, UndesiredConfig { k_a: 2, k_b: 1 }).unwrap();
        assert_eq!(got, vec![ItemId(2)]);
    }

    #[test]
    fn rejects_bad_sizes() {
        let layout = VocabLayout::rqk(1, 2, 0);
        let table = SidTable::new(layout, BTreeMap::new(), 0).unwrap();
        let reps: RepTable<f64> = BTreeMap::new();
        assert!(build_undesired(ItemId(0), &reps, &[], &table, UndesiredConfig { k_a: 1, k_b: 2 }).is_err());
    }
}
