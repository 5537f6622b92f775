use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::model::decode::recommend_all;
use crate::model::loss::{batch_grad, mean_parts, AllowedSets, LossConfig, LossParts, TokenExample};
use crate::model::params::{Checkpoint, ModelParams};
use crate::scalar::Scalar;
use crate::skt::Trie;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// AUO weight.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability clamp inside the logarithms.
    pub eps: f64,
    pub momentum: f64,
    pub dim: usize,
    /// Most recent history items fed to the encoder.
    pub max_history: usize,
    /// Scale of the orthonormal matrix initialization.
    pub init_gain: f64,
    /// Rescale the batch gradient to this norm when it is larger; 0 disables.
    pub max_grad_norm: f64,
    pub beam_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            eps: 1e-6,
            momentum: 0.9,
            dim: 32,
            max_history: 20,
            init_gain: 0.5,
            max_grad_norm: 5.0,
            beam_width: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad("eps must lie in (0, 0.5)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.dim == 0 || self.beam_width == 0 {
            return bad("batch size, dim and beam width must be positive");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub nll: f64,
    pub auo: f64,
    pub total: f64,
    pub valid_hr10: f64,
}

/// Validation instances: encoder history tokens and the held-out item.
#[derive(Clone, Debug, Default)]
pub struct ValidSet {
    pub histories: Vec<Vec<u32>>,
    pub targets: Vec<ItemId>,
}

/// Shared, read-only state of a training run.
pub struct TrainData<'a> {
    pub examples: &'a [TokenExample],
    pub allowed: &'a AllowedSets,
    pub trie: &'a Trie,
    pub valid: &'a ValidSet,
    pub vocab: usize,
    pub positions: usize,
}

/// What a training hook sees before each optimizer step.
pub struct BatchView<'a, T> {
    pub epoch: usize,
    pub batch: usize,
    pub params: &'a ModelParams<T>,
    pub examples: Vec<&'a TokenExample>,
}

pub type TrainCheckpoint<T> = Checkpoint<T, TrainConfig>;

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the best validation HR@10 (the
    /// initialization when no epoch ran).
    pub params: ModelParams<T>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
    /// State after the last epoch, suitable for resuming.
    pub checkpoint: TrainCheckpoint<T>,
}

/// Fraction of validation users whose held-out item is in their top 10.
pub fn valid_hit_rate<T: Scalar>(params: &ModelParams<T>, trie: &Trie, valid: &ValidSet, beam_width: usize) -> f64 {
    if valid.targets.is_empty() {
        return 0.0;
    }
    let recs = recommend_all(params, &valid.histories, trie, beam_width.max(10), 10);
    let hits = recs
        .iter()
        .zip(&valid.targets)
        .filter(|(r, t)| r.contains(t))
        .count();
    hits as f64 / valid.targets.len() as f64
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn init_checkpoint<T: Scalar>(data: &TrainData<'_>, cfg: &TrainConfig) -> TrainCheckpoint<T> {
    Checkpoint {
        vocab: data.vocab,
        dim: cfg.dim,
        positions: data.positions,
        seed: cfg.seed,
        config: cfg.clone(),
        epoch: 0,
        params: ModelParams::init(data.vocab, cfg.dim, data.positions, cfg.init_gain, cfg.seed),
        velocity: None,
        best: None,
    }
}

/// Minibatch SGD with momentum on `nll + α·auo`.
///
/// Batch order comes from an RNG keyed by (seed, epoch), so a run resumed
/// from `resume` follows the same trajectory as an uninterrupted one. The
/// hook sees every batch before its update.
pub fn train<T: Scalar>(
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    resume: Option<TrainCheckpoint<T>>,
    hook: &mut dyn FnMut(&BatchView<'_, T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    for ex in data.examples {
        data.allowed.check(&ex.target)?;
        for u in &ex.undesired {
            data.allowed.check(u)?;
        }
    }
    let mut ck = match resume {
        Some(c) => {
            if c.vocab != data.vocab || c.dim != cfg.dim || c.positions != data.positions {
                return Err(Error::Config("checkpoint dimensions do not match this run".into()));
            }
            c
        }
        None => init_checkpoint(data, cfg),
    };
    let loss_cfg = cfg.loss();
    let lr = T::lit(cfg.learning_rate);
    let mu = T::lit(cfg.momentum);
    let mut log = Vec::new();
    let mut velocity = ck.velocity.take().unwrap_or_else(|| ck.params.zeros_like());
    for epoch in ck.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.examples.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut parts: Vec<LossParts> = Vec::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TokenExample> = idx.iter().map(|&i| data.examples[i].clone()).collect();
            hook(&BatchView {
                epoch,
                batch: b,
                params: &ck.params,
                examples: idx.iter().map(|&i| &data.examples[i]).collect(),
            });
            let (p, mut g) = batch_grad(&ck.params, &batch, data.allowed, &loss_cfg);
            if !p.total.is_finite() || !g.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: p.total,
                });
            }
            if cfg.max_grad_norm > 0.0 {
                let n = g.norm_sq().as_f64().sqrt();
                if n > cfg.max_grad_norm {
                    g.scale(T::lit(cfg.max_grad_norm / n));
                }
            }
            velocity.scale(mu);
            velocity.add_scaled(T::one(), &g);
            ck.params.add_scaled(-lr, &velocity);
            for _ in 0..idx.len() {
                parts.push(p);
            }
        }
        let m = mean_parts(&parts);
        let hr = valid_hit_rate(&ck.params, data.trie, data.valid, cfg.beam_width);
        log::info!(
            "epoch {epoch}: nll {:.5} auo {:.5} total {:.5} valid HR@10 {hr:.4}",
            m.nll,
            m.auo,
            m.total
        );
        log.push(EpochLog {
            epoch,
            nll: m.nll,
            auo: m.auo,
            total: m.total,
            valid_hr10: hr,
        });
        if ck.best.as_ref().is_none_or(|(_, best, _)| hr > *best) {
            ck.best = Some((epoch, hr, ck.params.clone()));
        }
        ck.epoch = epoch + 1;
    }
    ck.velocity = Some(velocity);
    let (params, best_epoch) = match &ck.best {
        Some((e, _, p)) => (p.clone(), Some(*e)),
        None => (ck.params.clone(), None),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        log,
        checkpoint: ck,
    })
}
