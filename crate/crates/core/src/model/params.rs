use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;

/// Recommender weights.
///
/// Input embeddings feed the context encoder (history pooling and prefix
/// projections); output embeddings score candidate tokens. The two are
/// untied. `w_pos[j]` projects the token at prefix position `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub vocab: usize,
    pub dim: usize,
    pub positions: usize,
    pub input_emb: Vec<T>,
    pub output_emb: Vec<T>,
    pub w_pos: Vec<T>,
    pub w_hist: Vec<T>,
    pub bias: Vec<T>,
}

pub const BLOCK_NAMES: [&str; 5] = ["input_emb", "output_emb", "w_pos", "w_hist", "bias"];

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(vocab: usize, dim: usize, positions: usize) -> Self {
        Self {
            vocab,
            dim,
            positions,
            input_emb: vec![T::zero(); vocab * dim],
            output_emb: vec![T::zero(); vocab * dim],
            w_pos: vec![T::zero(); positions * dim * dim],
            w_hist: vec![T::zero(); dim * dim],
            bias: vec![T::zero(); dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab, self.dim, self.positions)
    }

    /// Embeddings uniform in `[-0.05, 0.05]`; each matrix is a random
    /// orthonormal basis scaled by `gain`; zero bias.
    pub fn init(vocab: usize, dim: usize, positions: usize, gain: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(vocab, dim, positions);
        for x in p.input_emb.iter_mut().chain(p.output_emb.iter_mut()) {
            *x = T::lit(rng.random_range(-0.05..=0.05));
        }
        for j in 0..positions {
            let m = orthonormal(dim, gain, &mut rng);
            p.w_pos[j * dim * dim..(j + 1) * dim * dim].copy_from_slice(&m);
        }
        p.w_hist = orthonormal(dim, gain, &mut rng);
        p
    }

    pub fn input(&self, token: u32) -> &[T] {
        let t = token as usize;
        &self.input_emb[t * self.dim..(t + 1) * self.dim]
    }

    pub fn output(&self, token: u32) -> &[T] {
        let t = token as usize;
        &self.output_emb[t * self.dim..(t + 1) * self.dim]
    }

    pub fn pos(&self, j: usize) -> &[T] {
        let s = self.dim * self.dim;
        &self.w_pos[j * s..(j + 1) * s]
    }

    pub fn blocks(&self) -> [&[T]; 5] {
        [
            &self.input_emb,
            &self.output_emb,
            &self.w_pos,
            &self.w_hist,
            &self.bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [T]; 5] {
        [
            &mut self.input_emb,
            &mut self.output_emb,
            &mut self.w_pos,
            &mut self.w_hist,
            &mut self.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: T, other: &Self) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for b in self.blocks_mut() {
            for x in b.iter_mut() {
                *x = *x * s;
            }
        }
    }

    pub fn norm_sq(&self) -> T {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

fn orthonormal<T: Scalar>(dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.into_iter()
        .flatten()
        .map(|x| T::lit(x * gain))
        .collect()
}

/// Serialized model with everything needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T, C> {
    pub vocab: usize,
    pub dim: usize,
    pub positions: usize,
    pub seed: u64,
    pub config: C,
    /// Epochs completed.
    pub epoch: usize,
    pub params: ModelParams<T>,
    pub velocity: Option<ModelParams<T>>,
    /// Best-validation parameters so far and the epoch they came from.
    pub best: Option<(usize, f64, ModelParams<T>)>,
}

impl<T: Scalar, C: Serialize + serde::de::DeserializeOwned> Checkpoint<T, C> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
