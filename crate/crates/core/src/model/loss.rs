use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{HeadTailSplit, Interaction, ItemId};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matvec_add, matvec_t_add, outer_add};
use crate::model::params::ModelParams;
use crate::model::undesired::UndesiredCollection;
use crate::scalar::Scalar;
use crate::skt::SidTable;

/// A training instance in token form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenExample {
    /// SID tokens of every history item, concatenated.
    pub history: Vec<u32>,
    /// Target SID followed by EOS.
    pub target: Vec<u32>,
    /// Undesired SIDs, each followed by EOS. Empty unless the target is a tail item.
    pub undesired: Vec<Vec<u32>>,
    pub target_item: ItemId,
}

/// SID tokens of the last `max_history` items of `history`.
pub fn history_tokens(history: &[ItemId], table: &SidTable, max_history: usize) -> Result<Vec<u32>> {
    let start = history.len().saturating_sub(max_history);
    let mut out = Vec::new();
    for &item in &history[start..] {
        out.extend_from_slice(&table.sid(item)?.tokens);
    }
    Ok(out)
}

impl TokenExample {
    pub fn new(
        interaction: &Interaction,
        table: &SidTable,
        split: &HeadTailSplit,
        undesired: Option<&UndesiredCollection>,
        max_history: usize,
    ) -> Result<Self> {
        let eos = table.layout.eos;
        let target = table.sid(interaction.target)?.with_eos(eos);
        let undesired = match undesired {
            Some(u) if split.is_tail(interaction.target) => u
                .get(interaction.target)
                .iter()
                .map(|&h| Ok(table.sid(h)?.with_eos(eos)))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            history: history_tokens(&interaction.history, table, max_history)?,
            target,
            undesired,
            target_item: interaction.target,
        })
    }
}

/// Per-position candidate sets used by the training softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct AllowedSets(pub Vec<Vec<u32>>);

impl AllowedSets {
    pub fn from_table(table: &SidTable) -> Self {
        Self(table.training_allowed())
    }

    pub fn at(&self, pos: usize) -> &[u32] {
        self.0.get(pos).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Checks that every token of `seq` is a candidate at its position.
    pub fn check(&self, seq: &[u32]) -> Result<()> {
        for (pos, t) in seq.iter().enumerate() {
            if self.at(pos).binary_search(t).is_err() {
                return Err(Error::Config(format!(
                    "token {t} is not a candidate at position {pos}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    /// Probability clamp inside the logarithms.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub nll: f64,
    /// Unweighted unlikelihood term.
    pub auo: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Nll,
    Auo,
}

/// One softmax evaluation inside a loss chain, kept for the closed-form checks.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<T> {
    pub kind: StepKind,
    pub prefix: Vec<u32>,
    pub token: u32,
    pub context: Vec<T>,
    pub allowed: Vec<u32>,
    pub probs: Vec<T>,
    /// True when the clamp removed this step's gradient.
    pub clamped: bool,
}

/// Mean of the input embeddings of `history` (zero when empty).
pub fn pooled_history<T: Scalar>(params: &ModelParams<T>, history: &[u32]) -> Vec<T> {
    let mut h = vec![T::zero(); params.dim];
    if history.is_empty() {
        return h;
    }
    for &t in history {
        axpy(T::one(), params.input(t), &mut h);
    }
    let n = T::lit(history.len() as f64);
    for x in &mut h {
        *x = *x / n;
    }
    h
}

/// Pre-activation shared by every prefix: `W_h·h̄ + b`.
pub fn context_base<T: Scalar>(params: &ModelParams<T>, hbar: &[T]) -> Vec<T> {
    let mut base = params.bias.clone();
    matvec_add(&params.w_hist, params.dim, hbar, &mut base);
    base
}

/// `X = tanh(W_h·h̄ + Σ_j W_j·a_{prefix[j]} + b)`.
pub fn encode_context<T: Scalar>(params: &ModelParams<T>, history: &[u32], prefix: &[u32]) -> Vec<T> {
    let hbar = pooled_history(params, history);
    let mut pre = context_base(params, &hbar);
    for (j, &t) in prefix.iter().enumerate() {
        matvec_add(params.pos(j), params.dim, params.input(t), &mut pre);
    }
    pre.into_iter().map(|x| x.tanh()).collect()
}

/// Softmax of `⟨e_c, X⟩` over `allowed`, stabilized by the max logit.
pub fn token_probs<T: Scalar>(params: &ModelParams<T>, x: &[T], allowed: &[u32]) -> Vec<T> {
    let logits: Vec<T> = allowed.iter().map(|&c| dot(params.output(c), x)).collect();
    softmax(&logits)
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_softmax_at<T: Scalar>(logits: &[T], idx: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = logits.iter().map(|&z| (z - m).exp()).sum();
    logits[idx] - m - s.ln()
}

#[derive(Clone, Copy)]
enum Chain<T> {
    Nll,
    Auo { weight: T },
}

/// Forward (and optionally backward) through one autoregressive chain.
/// Returns the chain loss; gradients are accumulated into `grad` and the
/// gradient with respect to the shared pre-activation into `dbase`.
#[allow(clippy::too_many_arguments)]
fn run_chain<T: Scalar>(
    params: &ModelParams<T>,
    base: &[T],
    tokens: &[u32],
    allowed: &AllowedSets,
    chain: Chain<T>,
    eps: T,
    mut grad: Option<(&mut ModelParams<T>, &mut [T], T)>,
    mut trace: Option<&mut Vec<StepRecord<T>>>,
) -> T {
    let d = params.dim;
    let m = tokens.len();
    let mut contexts: Vec<Vec<T>> = Vec::with_capacity(m);
    let mut pre = base.to_vec();
    for i in 0..m {
        if i > 0 {
            matvec_add(params.pos(i - 1), d, params.input(tokens[i - 1]), &mut pre);
        }
        contexts.push(pre.iter().map(|x| x.tanh()).collect());
    }
    let mut loss = T::zero();
    let mut dpre: Vec<Vec<T>> = if grad.is_some() {
        vec![vec![T::zero(); d]; m]
    } else {
        Vec::new()
    };
    let log_eps = eps.ln();
    for i in 0..m {
        let cand = allowed.at(i);
        if cand.len() <= 1 {
            continue;
        }
        let x = &contexts[i];
        let idx = cand
            .binary_search(&tokens[i])
            .expect("token validated against the candidate sets");
        let logits: Vec<T> = cand.iter().map(|&c| dot(params.output(c), x)).collect();
        let probs = softmax(&logits);
        let (step_loss, coef): (T, Option<Vec<T>>) = match chain {
            Chain::Nll => {
                let lp = log_softmax_at(&logits, idx);
                if lp < log_eps {
                    (-log_eps, None)
                } else {
                    let mut g = probs.clone();
                    g[idx] = g[idx] - T::one();
                    (-lp, Some(g))
                }
            }
            Chain::Auo { weight } => {
                let pu = probs[idx];
                if pu > T::one() - eps {
                    (-weight * log_eps, None)
                } else {
                    let scale = weight * pu / (T::one() - pu);
                    let mut g: Vec<T> = probs.iter().map(|&pk| -scale * pk).collect();
                    g[idx] = g[idx] + scale;
                    (-weight * (T::one() - pu).ln(), Some(g))
                }
            }
        };
        loss = loss + step_loss;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(StepRecord {
                kind: match chain {
                    Chain::Nll => StepKind::Nll,
                    Chain::Auo { .. } => StepKind::Auo,
                },
                prefix: tokens[..i].to_vec(),
                token: tokens[i],
                context: x.clone(),
                allowed: cand.to_vec(),
                probs: probs.clone(),
                clamped: coef.is_none(),
            });
        }
        if let (Some((g, _, gscale)), Some(coef)) = (grad.as_mut(), coef) {
            let mut dx = vec![T::zero(); d];
            for (&c, &gc) in cand.iter().zip(&coef) {
                let gc = gc * *gscale;
                let t = c as usize;
                axpy(gc, x, &mut g.output_emb[t * d..(t + 1) * d]);
                axpy(gc, params.output(c), &mut dx);
            }
            for ((dp, &dxk), &xk) in dpre[i].iter_mut().zip(&dx).zip(x) {
                *dp = dxk * (T::one() - xk * xk);
            }
        }
    }
    if let Some((g, dbase, _)) = grad {
        let mut suffix = vec![T::zero(); d];
        for i in (0..m).rev() {
            if i + 1 < m {
                axpy(T::one(), &dpre[i + 1], &mut suffix);
                // position i feeds every later step
                let s = d * d;
                outer_add(&suffix, params.input(tokens[i]), &mut g.w_pos[i * s..(i + 1) * s]);
                let t = tokens[i] as usize;
                matvec_t_add(params.pos(i), d, &suffix, &mut g.input_emb[t * d..(t + 1) * d]);
            }
            axpy(T::one(), &dpre[i], dbase);
        }
    }
    loss
}

/// `-Σ_i log P(target_i | history, target_<i)`, each factor clamped at `eps`.
pub fn nll_loss<T: Scalar>(params: &ModelParams<T>, ex: &TokenExample, allowed: &AllowedSets, eps: f64) -> T {
    let base = context_base(params, &pooled_history(params, &ex.history));
    run_chain(params, &base, &ex.target, allowed, Chain::Nll, T::lit(eps), None, None)
}

/// `-Σ_{Ω∈undesired} Σ_i log(1 - P(Ω_i | history, Ω_<i))`, each step
/// conditioned on the undesired SID's own prefix, `P` clamped to `1 - eps`.
pub fn auo_loss<T: Scalar>(
    params: &ModelParams<T>,
    history: &[u32],
    undesired: &[Vec<u32>],
    allowed: &AllowedSets,
    eps: f64,
) -> T {
    let base = context_base(params, &pooled_history(params, history));
    undesired
        .iter()
        .map(|u| {
            run_chain(
                params,
                &base,
                u,
                allowed,
                Chain::Auo { weight: T::one() },
                T::lit(eps),
                None,
                None,
            )
        })
        .fold(T::zero(), |a, b| a + b)
}

/// `nll + α·auo` for one example (the AUO term is empty for head targets).
pub fn example_loss<T: Scalar>(
    params: &ModelParams<T>,
    ex: &TokenExample,
    allowed: &AllowedSets,
    cfg: &LossConfig,
) -> LossParts {
    let nll = nll_loss(params, ex, allowed, cfg.eps).as_f64();
    let auo = if ex.undesired.is_empty() {
        0.0
    } else {
        auo_loss(params, &ex.history, &ex.undesired, allowed, cfg.eps).as_f64()
    };
    LossParts {
        nll,
        auo,
        total: nll + cfg.alpha * auo,
    }
}

/// Backpropagated gradient of `nll + α·auo` for one example, accumulated
/// into `grad` with weight `scale`. Optionally records every softmax step.
pub fn accumulate_example_grad<T: Scalar>(
    params: &ModelParams<T>,
    ex: &TokenExample,
    allowed: &AllowedSets,
    cfg: &LossConfig,
    scale: T,
    grad: &mut ModelParams<T>,
    mut trace: Option<&mut Vec<StepRecord<T>>>,
) -> LossParts {
    let d = params.dim;
    let eps = T::lit(cfg.eps);
    let hbar = pooled_history(params, &ex.history);
    let base = context_base(params, &hbar);
    let mut dbase = vec![T::zero(); d];
    let nll = run_chain(
        params,
        &base,
        &ex.target,
        allowed,
        Chain::Nll,
        eps,
        Some((&mut *grad, &mut dbase, scale)),
        trace.as_deref_mut(),
    );
    let mut auo = T::zero();
    if cfg.alpha > 0.0 {
        let alpha = T::lit(cfg.alpha);
        for u in &ex.undesired {
            let l = run_chain(
                params,
                &base,
                u,
                allowed,
                Chain::Auo { weight: alpha },
                eps,
                Some((&mut *grad, &mut dbase, scale)),
                trace.as_deref_mut(),
            );
            auo = auo + l / alpha;
        }
    }
    outer_add(&dbase, &hbar, &mut grad.w_hist);
    axpy(T::one(), &dbase, &mut grad.bias);
    if !ex.history.is_empty() {
        let mut dh = vec![T::zero(); d];
        matvec_t_add(&params.w_hist, d, &dbase, &mut dh);
        let inv = T::one() / T::lit(ex.history.len() as f64);
        for &t in &ex.history {
            let t = t as usize;
            axpy(inv, &dh, &mut grad.input_emb[t * d..(t + 1) * d]);
        }
    }
    let nll = nll.as_f64();
    let auo = auo.as_f64();
    LossParts {
        nll,
        auo,
        total: nll + cfg.alpha * auo,
    }
}

/// Gradient of `nll + α·auo` for one example.
pub fn grad_analytic<T: Scalar>(
    params: &ModelParams<T>,
    ex: &TokenExample,
    allowed: &AllowedSets,
    cfg: &LossConfig,
) -> (LossParts, ModelParams<T>) {
    let mut g = params.zeros_like();
    let parts = accumulate_example_grad(params, ex, allowed, cfg, T::one(), &mut g, None);
    (parts, g)
}

/// Like [`grad_analytic`], also returning every softmax step.
pub fn grad_with_trace<T: Scalar>(
    params: &ModelParams<T>,
    ex: &TokenExample,
    allowed: &AllowedSets,
    cfg: &LossConfig,
) -> (LossParts, ModelParams<T>, Vec<StepRecord<T>>) {
    let mut g = params.zeros_like();
    let mut trace = Vec::new();
    let parts = accumulate_example_grad(params, ex, allowed, cfg, T::one(), &mut g, Some(&mut trace));
    (parts, g, trace)
}

/// Output-embedding gradients assembled from per-context softmax
/// probabilities alone.
///
/// Steps sharing a prefix share one context `X`. Within such a group with
/// target token `t` and undesired tokens `U` (a multiset), the gradient for
/// candidate `k` is
/// `[(P_k - 1{k=t}) + α Σ_{u∈U} P_u (1{u=k} - P_k) / (1 - P_u)] · X`.
/// Clamped steps contribute nothing.
pub fn closed_form_output_grads<T: Scalar>(steps: &[StepRecord<T>], alpha: f64) -> BTreeMap<u32, Vec<T>> {
    let alpha = T::lit(alpha);
    let mut out: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    let mut groups: BTreeMap<&[u32], Vec<&StepRecord<T>>> = BTreeMap::new();
    for s in steps {
        groups.entry(&s.prefix).or_default().push(s);
    }
    for group in groups.values() {
        let head = group[0];
        let prob = |tok: u32| -> T {
            let i = head.allowed.binary_search(&tok).expect("token in candidate set");
            head.probs[i]
        };
        let target = group
            .iter()
            .find(|s| s.kind == StepKind::Nll && !s.clamped)
            .map(|s| s.token);
        let undesired: Vec<u32> = group
            .iter()
            .filter(|s| s.kind == StepKind::Auo && !s.clamped)
            .map(|s| s.token)
            .collect();
        if target.is_none() && undesired.is_empty() {
            continue;
        }
        for (&k, &pk) in head.allowed.iter().zip(&head.probs) {
            let mut c = T::zero();
            if let Some(t) = target {
                c = pk - if k == t { T::one() } else { T::zero() };
            }
            for &u in &undesired {
                let pu = prob(u);
                let delta = if u == k { T::one() } else { T::zero() };
                c = c + alpha * pu * (delta - pk) / (T::one() - pu);
            }
            let e = out.entry(k).or_insert_with(|| vec![T::zero(); head.context.len()]);
            axpy(c, &head.context, e);
        }
    }
    out
}

/// Mean loss over `batch`.
pub fn total_loss<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[TokenExample],
    allowed: &AllowedSets,
    cfg: &LossConfig,
) -> LossParts {
    let parts: Vec<LossParts> = batch
        .par_iter()
        .map(|ex| example_loss(params, ex, allowed, cfg))
        .collect();
    mean_parts(&parts)
}

pub(crate) fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    let mut m = LossParts::default();
    for p in parts {
        m.nll += p.nll;
        m.auo += p.auo;
        m.total += p.total;
    }
    m.nll /= n;
    m.auo /= n;
    m.total /= n;
    m
}

/// Fixed chunk size for the parallel gradient reduction. Chunk results are
/// summed in order so the result does not depend on the thread count.
pub const GRAD_CHUNK: usize = 16;

/// Mean loss and mean gradient over `batch`.
pub fn batch_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[TokenExample],
    allowed: &AllowedSets,
    cfg: &LossConfig,
) -> (LossParts, ModelParams<T>) {
    let inv = T::one() / T::lit(batch.len().max(1) as f64);
    let chunks: Vec<(Vec<LossParts>, ModelParams<T>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let parts = chunk
                .iter()
                .map(|ex| accumulate_example_grad(params, ex, allowed, cfg, inv, &mut g, None))
                .collect();
            (parts, g)
        })
        .collect();
    let mut grad = params.zeros_like();
    let mut parts = Vec::with_capacity(batch.len());
    for (p, g) in chunks {
        grad.add_scaled(T::one(), &g);
        parts.extend(p);
    }
    (mean_parts(&parts), grad)
}
