use std::cmp::Ordering;

use rayon::prelude::*;

use crate::corpus::{ItemId, Popularity};
use crate::linalg::{dot, matvec_add};
use crate::model::loss::{context_base, pooled_history};
use crate::model::params::ModelParams;
use crate::scalar::Scalar;
use crate::skt::{Trie, ROOT};

/// A decoded item with its summed token log-probability (EOS included).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub item: ItemId,
    pub log_prob: f64,
}

struct Beam<T> {
    node: usize,
    depth: usize,
    score: f64,
    pre: Vec<T>,
    tokens: Vec<u32>,
}

/// Trie-constrained beam search over SIDs.
///
/// Scores are raw summed log-probabilities without length normalization.
/// At every step all expansions of the live beams are scored, completed
/// ones are set aside, and the best `beam_width` unfinished ones survive
/// (ties by token sequence). Results are ranked by score, ties by
/// ascending item ID. Returns fewer than `k` items if the beam runs dry.
pub fn beam_decode<T: Scalar>(
    params: &ModelParams<T>,
    history: &[u32],
    trie: &Trie,
    beam_width: usize,
    k: usize,
) -> Vec<Scored> {
    let d = params.dim;
    let base = context_base(params, &pooled_history(params, history));
    let mut live = vec![Beam {
        node: ROOT,
        depth: 0,
        score: 0.0,
        pre: base,
        tokens: Vec::new(),
    }];
    let mut done: Vec<Scored> = Vec::new();
    while !live.is_empty() {
        let mut next: Vec<Beam<T>> = Vec::new();
        for beam in &live {
            let children = &trie.nodes[beam.node].children;
            let x: Vec<T> = beam.pre.iter().map(|v| v.tanh()).collect();
            let logits: Vec<f64> = children.keys().map(|&c| dot(params.output(c), &x).as_f64()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            for ((&tok, &child), &z) in children.iter().zip(&logits) {
                let score = beam.score + (z - lse);
                if tok == trie.eos {
                    if let Some(item) = trie.nodes[child].item {
                        done.push(Scored { item, log_prob: score });
                    }
                    continue;
                }
                let mut pre = beam.pre.clone();
                if beam.depth < params.positions {
                    matvec_add(params.pos(beam.depth), d, params.input(tok), &mut pre);
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                next.push(Beam {
                    node: child,
                    depth: beam.depth + 1,
                    score,
                    pre,
                    tokens,
                });
            }
        }
        next.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        next.truncate(beam_width);
        live = next;
    }
    done.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap_or(Ordering::Equal)
            .then(a.item.cmp(&b.item))
    });
    if done.len() < k {
        log::warn!("beam produced {} of {} requested items", done.len(), k);
    }
    done.truncate(k);
    done
}

/// Top-`k` item lists for many histories, in input order.
pub fn recommend_all<T: Scalar>(
    params: &ModelParams<T>,
    histories: &[Vec<u32>],
    trie: &Trie,
    beam_width: usize,
    k: usize,
) -> Vec<Vec<ItemId>> {
    histories
        .par_iter()
        .map(|h| beam_decode(params, h, trie, beam_width, k).into_iter().map(|s| s.item).collect())
        .collect()
}

/// The `k` most popular items, ties by ascending ID.
pub fn popularity_baseline(popularity: &Popularity, k: usize) -> Vec<ItemId> {
    let mut items: Vec<(u64, ItemId)> = popularity.iter().map(|(&i, &c)| (c, i)).collect();
    items.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    items.into_iter().take(k).map(|(_, i)| i).collect()
}
