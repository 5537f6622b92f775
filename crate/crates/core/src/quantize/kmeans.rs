use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, sq_dist};
use crate::scalar::Scalar;

/// Centroid table for one quantization level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook<T> {
    pub centroids: Vec<Vec<T>>,
}

impl<T: Scalar> Codebook<T> {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid by squared Euclidean distance; lowest index wins ties.
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        (best, best_d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualCode<T> {
    pub codes: Vec<usize>,
    pub final_residual: Vec<T>,
}

/// Greedy residual encoding. `start_residual` replaces the initial residual
/// (which is otherwise `x` itself).
pub fn encode_residual<T: Scalar>(
    x: &[T],
    codebooks: &[Codebook<T>],
    start_residual: Option<&[T]>,
) -> ResidualCode<T> {
    let mut r = start_residual.unwrap_or(x).to_vec();
    let mut codes = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let (c, _) = cb.nearest(&r);
        for (ri, &m) in r.iter_mut().zip(&cb.centroids[c]) {
            *ri = *ri - m;
        }
        codes.push(c);
    }
    ResidualCode {
        codes,
        final_residual: r,
    }
}

/// Sum of the selected centroids.
pub fn reconstruct<T: Scalar>(codes: &[usize], codebooks: &[Codebook<T>]) -> Vec<T> {
    let d = codebooks.first().map_or(0, Codebook::dim);
    let mut out = vec![T::zero(); d];
    for (&c, cb) in codes.iter().zip(codebooks) {
        for (o, &m) in out.iter_mut().zip(&cb.centroids[c]) {
            *o = *o + m;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub levels: usize,
    pub centroids: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            centroids: 256,
            iters: 25,
            seed: 0,
        }
    }
}

/// Serialized codebook stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookFile<T> {
    pub header: CodebookHeader,
    pub levels: Vec<Codebook<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookHeader {
    pub d: usize,
    pub n: usize,
    pub l: usize,
    pub seed: u64,
}

impl<T: Clone> CodebookFile<T> {
    /// Header is read off the levels; `n` is the widest level, `d` is 0 for
    /// an empty stack.
    pub fn new(levels: &[Codebook<T>], seed: u64) -> Self {
        let d = levels
            .iter()
            .find_map(|b| b.centroids.first())
            .map_or(0, |c| c.len());
        let n = levels.iter().map(|b| b.centroids.len()).max().unwrap_or(0);
        Self {
            header: CodebookHeader {
                d,
                n,
                l: levels.len(),
                seed,
            },
            levels: levels.to_vec(),
        }
    }
}

/// RQ-KMeans: level `i` runs Lloyd's algorithm on the residuals left by the
/// levels before it. k-means++ seeding, empty clusters re-seeded from the
/// point farthest from its centroid. `N` is clamped to the number of
/// vectors when there are fewer.
pub fn train_codebooks<T: Scalar>(
    vectors: &[Vec<T>],
    cfg: &KMeansConfig,
) -> Result<Vec<Codebook<T>>> {
    if vectors.is_empty() {
        return Err(Error::Argument("no vectors to quantize".into()));
    }
    if cfg.centroids == 0 {
        return Err(Error::Argument("codebook size must be >= 1".into()));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Argument("vectors differ in dimension".into()));
    }
    let k = if cfg.centroids > vectors.len() {
        log::warn!(
            "codebook size {} clamped to {} vectors",
            cfg.centroids,
            vectors.len()
        );
        vectors.len()
    } else {
        cfg.centroids
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut residuals: Vec<Vec<T>> = vectors.to_vec();
    let mut books = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        let cb = lloyd(&residuals, k, cfg.iters, &mut rng);
        residuals.par_iter_mut().for_each(|r| {
            let (c, _) = cb.nearest(r);
            for (ri, &m) in r.iter_mut().zip(&cb.centroids[c]) {
                *ri = *ri - m;
            }
        });
        books.push(cb);
    }
    Ok(books)
}

fn kmeans_pp<T: Scalar>(points: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[0]).as_f64())
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = dist.len() - 1;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            if dist[chosen] == 0.0 {
                chosen = dist
                    .iter()
                    .rposition(|&w| w > 0.0)
                    .expect("positive total weight");
            }
            chosen
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c).as_f64());
        }
        centroids.push(c);
    }
    centroids
}

fn assign<T: Scalar>(points: &[Vec<T>], cb: &Codebook<T>) -> Vec<(usize, T)> {
    points.par_iter().map(|p| cb.nearest(p)).collect()
}

fn lloyd<T: Scalar>(points: &[Vec<T>], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Codebook<T> {
    let d = points[0].len();
    let mut cb = Codebook {
        centroids: kmeans_pp(points, k, rng),
    };
    let mut assignment = assign(points, &cb);
    for _ in 0..iters {
        let mut sums = vec![vec![T::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(p) {
                *s = *s + x;
            }
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                let n = T::lit(counts[c] as f64);
                cb.centroids[c] = sums[c].iter().map(|&s| s / n).collect();
                continue;
            }
            // re-seed from the farthest remaining point
            let mut far = None;
            for (i, &(_, dist)) in assignment.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                if far.is_none_or(|(_, best)| dist > best) {
                    far = Some((i, dist));
                }
            }
            if let Some((i, _)) = far {
                taken[i] = true;
                cb.centroids[c] = points[i].clone();
            }
        }
        let next = assign(points, &cb);
        let stable = next.iter().zip(&assignment).all(|(a, b)| a.0 == b.0);
        assignment = next;
        if stable {
            break;
        }
    }
    cb
}

/// Mean residual norm before level 0 and after every level, over `vectors`.
pub fn residual_norms_by_level<T: Scalar>(vectors: &[Vec<T>], codebooks: &[Codebook<T>]) -> Vec<f64> {
    let mut out = vec![0.0; codebooks.len() + 1];
    for v in vectors {
        let mut r = v.clone();
        out[0] += norm(&r).as_f64();
        for (lvl, cb) in codebooks.iter().enumerate() {
            let (c, _) = cb.nearest(&r);
            for (ri, &m) in r.iter_mut().zip(&cb.centroids[c]) {
                *ri = *ri - m;
            }
            out[lvl + 1] += norm(&r).as_f64();
        }
    }
    let n = vectors.len().max(1) as f64;
    out.iter().map(|s| s / n).collect()
}
