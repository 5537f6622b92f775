use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{HeadTailSplit, ItemId, Popularity};
use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::quantize::{encode_residual, reconstruct, train_codebooks, Codebook, KMeansConfig, RepTable};
use crate::scalar::Scalar;
use crate::skt::layout::VocabLayout;
use crate::skt::table::{dedup_sids, ItemKind, SemanticId, SidTable};

/// Lengths and codebook sizes shared by the tokenizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub l_head: usize,
    pub l_tail: usize,
    pub n_head: usize,
    pub n_tail: usize,
    pub iters: usize,
    pub dedup_capacity: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            l_head: 4,
            l_tail: 2,
            n_head: 256,
            n_tail: 256,
            iters: 25,
            dedup_capacity: 64,
            seed: 0,
        }
    }
}

/// Output of a tokenizer run.
#[derive(Clone, Debug)]
pub struct Tokenization<T> {
    pub table: SidTable,
    pub head_books: Vec<Codebook<T>>,
    pub tail_books: Vec<Codebook<T>>,
    /// Skeleton head of each tail item (SKT only).
    pub skeleton: BTreeMap<ItemId, ItemId>,
}

fn rep<'a, T>(reps: &'a RepTable<T>, item: ItemId) -> Result<&'a [T]> {
    reps.get(&item).map(Vec::as_slice).ok_or(Error::MissingItem(item))
}

/// Head item with the highest cosine similarity to `x`; ties by ascending ID.
pub fn nearest_head<T: Scalar>(x: &[T], heads: &[(ItemId, &[T])]) -> Result<ItemId> {
    if norm(x) == T::zero() {
        return Err(Error::ZeroNorm("query vector".into()));
    }
    let mut best: Option<(T, ItemId)> = None;
    for &(id, v) in heads {
        let Some(c) = cosine(x, v) else { continue };
        let better = match best {
            None => true,
            Some((b, bid)) => c > b || (c == b && id < bid),
        };
        if better {
            best = Some((c, id));
        }
    }
    best.map(|(_, id)| id)
        .ok_or_else(|| Error::ZeroNorm("every head vector".into()))
}

fn to_tokens(codes: &[usize], layout: &VocabLayout, first_level: usize) -> Result<Vec<u32>> {
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| layout.token(first_level + i, c))
        .collect()
}

/// Encodes each head item through the head codebooks. Returns the raw codes
/// and the pre-dedup SIDs.
pub fn assign_head_sids<T: Scalar>(
    heads: &[(ItemId, &[T])],
    codebooks: &[Codebook<T>],
    layout: &VocabLayout,
    first_level: usize,
) -> Result<BTreeMap<ItemId, (Vec<usize>, SemanticId)>> {
    heads
        .iter()
        .map(|&(item, x)| {
            let code = encode_residual(x, codebooks, None);
            let tokens = to_tokens(&code.codes, layout, first_level)?;
            Ok((
                item,
                (
                    code.codes,
                    SemanticId {
                        tokens,
                        kind: ItemKind::Head,
                    },
                ),
            ))
        })
        .collect()
}

/// The residual a tail item starts from: its vector minus the quantized
/// reconstruction of its skeleton head.
pub fn tail_start_residual<T: Scalar>(
    x: &[T],
    head_codes: &[usize],
    head_books: &[Codebook<T>],
) -> Vec<T> {
    let recon = reconstruct(head_codes, head_books);
    x.iter().zip(&recon).map(|(&a, &b)| a - b).collect()
}

/// Tail SID = skeleton head's SID followed by `L^t` suffix tokens encoded
/// from the start residual.
#[allow(clippy::too_many_arguments)]
pub fn assign_tail_sids<T: Scalar>(
    tails: &[(ItemId, &[T])],
    heads: &[(ItemId, &[T])],
    head_sids: &BTreeMap<ItemId, SemanticId>,
    head_codes: &BTreeMap<ItemId, Vec<usize>>,
    head_books: &[Codebook<T>],
    tail_books: &[Codebook<T>],
    layout: &VocabLayout,
    first_tail_level: usize,
) -> Result<BTreeMap<ItemId, (ItemId, SemanticId)>> {
    let mut out = BTreeMap::new();
    for &(item, x) in tails {
        let h = nearest_head(x, heads)?;
        let start = tail_start_residual(x, &head_codes[&h], head_books);
        let code = encode_residual(x, tail_books, Some(&start));
        let mut tokens = head_sids[&h].tokens.clone();
        tokens.extend(to_tokens(&code.codes, layout, first_tail_level)?);
        out.insert(
            item,
            (
                h,
                SemanticId {
                    tokens,
                    kind: ItemKind::Tail,
                },
            ),
        );
    }
    Ok(out)
}

fn collect<'a, T>(
    reps: &'a RepTable<T>,
    items: impl Iterator<Item = &'a ItemId>,
) -> Result<Vec<(ItemId, &'a [T])>> {
    items.map(|&i| Ok((i, rep(reps, i)?))).collect()
}

/// Skeleton-founded tokenization.
///
/// Head items are quantized with their own `L^h`-level stack and
/// deduplicated first, so the skeleton is final before tails inherit it.
/// Each tail item copies the full SID of its nearest head (by cosine) and
/// appends `L^t` tokens from a stack trained on the tail start residuals.
pub fn skt_tokenize<T: Scalar>(
    reps: &RepTable<T>,
    split: &HeadTailSplit,
    popularity: &Popularity,
    cfg: &TokenizerConfig,
) -> Result<Tokenization<T>> {
    if split.head.is_empty() {
        return Err(Error::Argument("head set is empty".into()));
    }
    let layout = VocabLayout::skt(
        cfg.l_head,
        cfg.n_head as u32,
        cfg.l_tail,
        cfg.n_tail as u32,
        cfg.dedup_capacity as u32,
    );
    let heads = collect(reps, split.head.iter())?;
    let tails = collect(reps, split.tail.iter())?;

    let head_vecs: Vec<Vec<T>> = heads.iter().map(|(_, v)| v.to_vec()).collect();
    let head_books = train_codebooks(
        &head_vecs,
        &KMeansConfig {
            levels: cfg.l_head,
            centroids: cfg.n_head,
            iters: cfg.iters,
            seed: cfg.seed,
        },
    )?;
    let assigned = assign_head_sids(&heads, &head_books, &layout, 0)?;
    let head_codes: BTreeMap<ItemId, Vec<usize>> =
        assigned.iter().map(|(&i, (c, _))| (i, c.clone())).collect();
    let raw_heads = assigned.into_iter().map(|(i, (_, s))| (i, s)).collect();
    let (head_sids, head_collisions) = dedup_sids(raw_heads, popularity, &layout)?;

    let mut tail_books = Vec::new();
    let mut skeleton = BTreeMap::new();
    let mut entries = head_sids.clone();
    let mut tail_collisions = 0;
    if !tails.is_empty() && cfg.l_tail > 0 {
        let mut starts = Vec::with_capacity(tails.len());
        for &(_, x) in &tails {
            let h = nearest_head(x, &heads)?;
            starts.push(tail_start_residual(x, &head_codes[&h], &head_books));
        }
        tail_books = train_codebooks(
            &starts,
            &KMeansConfig {
                levels: cfg.l_tail,
                centroids: cfg.n_tail,
                iters: cfg.iters,
                seed: cfg.seed.wrapping_add(1),
            },
        )?;
        let assigned = assign_tail_sids(
            &tails,
            &heads,
            &head_sids,
            &head_codes,
            &head_books,
            &tail_books,
            &layout,
            cfg.l_head,
        )?;
        let mut raw_tails = BTreeMap::new();
        for (item, (h, sid)) in assigned {
            skeleton.insert(item, h);
            raw_tails.insert(item, sid);
        }
        let (tail_sids, n) = dedup_sids(raw_tails, popularity, &layout)?;
        tail_collisions = n;
        entries.extend(tail_sids);
    }
    let table = SidTable::new(layout, entries, head_collisions + tail_collisions)?;
    Ok(Tokenization {
        table,
        head_books,
        tail_books,
        skeleton,
    })
}

/// Undifferentiated RQ-KMeans tokenization: one stack of `l` levels over
/// every item, then dedup.
pub fn baseline_rqk<T: Scalar>(
    reps: &RepTable<T>,
    split: &HeadTailSplit,
    popularity: &Popularity,
    l: usize,
    cfg: &TokenizerConfig,
) -> Result<Tokenization<T>> {
    let layout = VocabLayout::rqk(l, cfg.n_head as u32, cfg.dedup_capacity as u32);
    let all = collect(reps, reps.keys())?;
    let vecs: Vec<Vec<T>> = all.iter().map(|(_, v)| v.to_vec()).collect();
    let books = train_codebooks(
        &vecs,
        &KMeansConfig {
            levels: l,
            centroids: cfg.n_head,
            iters: cfg.iters,
            seed: cfg.seed,
        },
    )?;
    let mut raw = BTreeMap::new();
    for &(item, x) in &all {
        let code = encode_residual(x, &books, None);
        let kind = if split.is_head(item) {
            ItemKind::Head
        } else {
            ItemKind::Tail
        };
        raw.insert(
            item,
            SemanticId {
                tokens: to_tokens(&code.codes, &layout, 0)?,
                kind,
            },
        );
    }
    let (entries, collisions) = dedup_sids(raw, popularity, &layout)?;
    Ok(Tokenization {
        table: SidTable::new(layout, entries, collisions)?,
        head_books: books,
        tail_books: Vec::new(),
        skeleton: BTreeMap::new(),
    })
}

/// Head items get `l_head`-token SIDs and tail items independently get
/// `l_tail_total`-token SIDs from their own stack; nothing is inherited.
pub fn baseline_rqk_split<T: Scalar>(
    reps: &RepTable<T>,
    split: &HeadTailSplit,
    popularity: &Popularity,
    l_head: usize,
    l_tail_total: usize,
    cfg: &TokenizerConfig,
) -> Result<Tokenization<T>> {
    if l_tail_total <= l_head {
        return Err(Error::Argument(format!(
            "tail length {l_tail_total} must exceed head length {l_head}"
        )));
    }
    let layout = VocabLayout::rqk_split(
        l_head,
        l_tail_total,
        cfg.n_head as u32,
        cfg.dedup_capacity as u32,
    );
    let heads = collect(reps, split.head.iter())?;
    let tails = collect(reps, split.tail.iter())?;
    let mut raw = BTreeMap::new();
    let mut books = [Vec::new(), Vec::new()];
    for (slot, (group, levels, first, kind, seed)) in [
        (&heads, l_head, 0, ItemKind::Head, cfg.seed),
        (&tails, l_tail_total, l_head, ItemKind::Tail, cfg.seed.wrapping_add(1)),
    ]
    .into_iter()
    .enumerate()
    {
        if group.is_empty() {
            continue;
        }
        let vecs: Vec<Vec<T>> = group.iter().map(|(_, v)| v.to_vec()).collect();
        let b = train_codebooks(
            &vecs,
            &KMeansConfig {
                levels,
                centroids: cfg.n_head,
                iters: cfg.iters,
                seed,
            },
        )?;
        for &(item, x) in group {
            let code = encode_residual(x, &b, None);
            raw.insert(
                item,
                SemanticId {
                    tokens: to_tokens(&code.codes, &layout, first)?,
                    kind,
                },
            );
        }
        books[slot] = b;
    }
    let (entries, collisions) = dedup_sids(raw, popularity, &layout)?;
    let [head_books, tail_books] = books;
    Ok(Tokenization {
        table: SidTable::new(layout, entries, collisions)?,
        head_books,
        tail_books,
        skeleton: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_head_cases() {
        let a = [1.0f64, 0.0];
        let b = [0.0f64, 1.0];
        let heads: Vec<(ItemId, &[f64])> = vec![(ItemId(5), &a), (ItemId(2), &b)];
        assert_eq!(nearest_head(&[0.0, 3.0], &heads).unwrap(), ItemId(2));
        assert_eq!(nearest_head(&[2.0, 0.0], &heads).unwrap(), ItemId(5));
        // equal cosine -> lowest ID
        assert_eq!(nearest_head(&[1.0, 1.0], &heads).unwrap(), ItemId(2));
        assert!(matches!(
            nearest_head(&[0.0, 0.0], &heads),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn single_head_forced_assignment() {
        let layout = VocabLayout::skt(1, 1, 1, 1, 1);
        let v = [0.5f64, 0.5];
        let books = vec![Codebook {
            centroids: vec![vec![0.1, 0.1]],
        }];
        let out = assign_head_sids(&[(ItemId(0), &v[..])], &books, &layout, 0).unwrap();
        assert_eq!(out[&ItemId(0)].1.tokens, vec![layout.levels[0].offset]);
    }

    #[test]
    fn zero_start_residual_picks_zero_centroid() {
        let layout = VocabLayout::skt(1, 2, 1, 4, 1);
        let head_books = vec![Codebook {
            centroids: vec![vec![1.0f64, 0.0], vec![0.0, 1.0]],
        }];
        let mut tail_centroids = vec![vec![0.5f64, 0.5]; 4];
        tail_centroids[3] = vec![0.0, 0.0];
        let tail_books = vec![Codebook {
            centroids: tail_centroids,
        }];
        let hv = [1.0f64, 0.0];
        let heads: Vec<(ItemId, &[f64])> = vec![(ItemId(0), &hv)];
        let head_sids: BTreeMap<_, _> = [(
            ItemId(0),
            SemanticId {
                tokens: vec![0],
                kind: ItemKind::Head,
            },
        )]
        .into_iter()
        .collect();
        let head_codes: BTreeMap<_, _> = [(ItemId(0), vec![0])].into_iter().collect();
        // tail vector equals the head reconstruction exactly
        let tv = [1.0f64, 0.0];
        let out = assign_tail_sids(
            &[(ItemId(1), &tv[..])],
            &heads,
            &head_sids,
            &head_codes,
            &head_books,
            &tail_books,
            &layout,
            1,
        )
        .unwrap();
        let (h, sid) = &out[&ItemId(1)];
        assert_eq!(*h, ItemId(0));
        assert_eq!(sid.tokens, vec![0, layout.levels[1].offset + 3]);
    }
}
