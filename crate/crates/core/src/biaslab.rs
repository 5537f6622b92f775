//! Measurements of popularity bias in the trained recommender: gradient
//! checks, gradient starvation, amplification of head preference at
//! branching points, path suppression by competition count, and the
//! rescue effect of the unlikelihood term.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, LatentClusters};
use crate::error::{Error, Result};
use crate::linalg::{dot, matvec_add, norm_sq};
use crate::model::{
    closed_form_output_grads, context_base, grad_with_trace, history_tokens, pooled_history, softmax, AllowedSets,
    LossConfig, ModelParams, StepKind, StepRecord, TokenExample, BLOCK_NAMES,
};
use crate::skt::{competition_steps, ItemKind, SidTable, Trie, ROOT};

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Coordinates sampled per block.
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 20,
            step: 3e-3,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub pass: bool,
    /// Worst or first non-finite coordinate as `block[index]` when failing.
    pub failure: Option<String>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` with fourth-order central differences of `loss` at `point` on
/// `probes` random coordinates of every block (all coordinates when a block
/// is smaller).
pub fn finite_diff_check<F>(
    loss: F,
    point: &[Vec<f64>],
    analytic: &[Vec<f64>],
    names: &[&str],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    if !(cfg.step > 0.0) {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    if point.len() != analytic.len() || point.len() != names.len() {
        return Err(Error::Argument("point, gradient and block names disagree".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut blocks = Vec::new();
    let mut failure = None;
    let mut overall = 0.0f64;
    let mut x: Vec<Vec<f64>> = point.to_vec();
    for b in 0..point.len() {
        let mut idx: Vec<usize> = (0..point[b].len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.probes);
        idx.sort_unstable();
        let mut worst = 0.0f64;
        let mut worst_index = None;
        for &i in &idx {
            let orig = x[b][i];
            let mut at = |k: f64| {
                x[b][i] = orig + k * cfg.step;
                loss(&x)
            };
            // five-point central stencil: truncation error O(h^4), so small
            // gradient coordinates are not swamped by the third derivative
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            x[b][i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * cfg.step);
            let a = analytic[b][i];
            let err = if numeric.is_finite() && a.is_finite() {
                relative_error(a, numeric)
            } else {
                f64::INFINITY
            };
            if worst_index.is_none() || err > worst {
                worst = err;
                worst_index = Some(i);
            }
            if !err.is_finite() && failure.is_none() {
                failure = Some(format!("{}[{i}] is not finite", names[b]));
            }
        }
        overall = overall.max(worst);
        blocks.push(BlockCheck {
            block: names[b].to_string(),
            probes: idx.len(),
            max_rel_error: worst,
            worst_index,
        });
    }
    let pass = overall <= cfg.tolerance;
    if !pass && failure.is_none() {
        let b = blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one block");
        failure = Some(format!(
            "{}[{}] relative error {:.3e}",
            b.block,
            b.worst_index.unwrap_or(0),
            b.max_rel_error
        ));
    }
    Ok(GradCheckReport {
        blocks,
        step: cfg.step,
        tolerance: cfg.tolerance,
        max_rel_error: overall,
        pass,
        failure,
    })
}

fn to_blocks(p: &ModelParams<f64>) -> Vec<Vec<f64>> {
    p.blocks().iter().map(|b| b.to_vec()).collect()
}

fn from_blocks(template: &ModelParams<f64>, blocks: &[Vec<f64>]) -> ModelParams<f64> {
    let mut p = template.clone();
    for (dst, src) in p.blocks_mut().into_iter().zip(blocks) {
        dst.copy_from_slice(src);
    }
    p
}

/// Gradient check of `nll + α·auo` for one example at `params`.
pub fn check_example_gradient(
    params: &ModelParams<f64>,
    ex: &TokenExample,
    allowed: &AllowedSets,
    loss_cfg: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grad, _) = grad_with_trace(params, ex, allowed, loss_cfg);
    finite_diff_check(
        |b| crate::model::example_loss(&from_blocks(params, b), ex, allowed, loss_cfg).total,
        &to_blocks(params),
        &to_blocks(&grad),
        &BLOCK_NAMES,
        cfg,
    )
}

// ---------------------------------------------------------------------------
// Closed-form identities
// ---------------------------------------------------------------------------

/// Largest absolute gap between backpropagated output-embedding gradients
/// and the closed forms assembled from softmax probabilities.
pub fn closed_form_gap(
    params: &ModelParams<f64>,
    ex: &TokenExample,
    allowed: &AllowedSets,
    loss_cfg: &LossConfig,
) -> f64 {
    let (_, grad, trace) = grad_with_trace(params, ex, allowed, loss_cfg);
    let closed = closed_form_output_grads(&trace, loss_cfg.alpha);
    let d = params.dim;
    let mut gap = 0.0f64;
    for tok in 0..params.vocab as u32 {
        let back = &grad.output_emb[tok as usize * d..(tok as usize + 1) * d];
        match closed.get(&tok) {
            Some(c) => {
                for (a, b) in back.iter().zip(c) {
                    gap = gap.max((a - b).abs());
                }
            }
            None => {
                for a in back {
                    gap = gap.max(a.abs());
                }
            }
        }
    }
    gap
}

/// One rescue comparison: token `token` at the context reached by `prefix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescueRecord {
    pub prefix: Vec<u32>,
    pub token: u32,
    /// `⟨Δe_c, X⟩` under the likelihood term alone (unit step).
    pub nll_projection: f64,
    /// The same with the unlikelihood term added.
    pub total_projection: f64,
    /// `α Σ_u P_u P_c / (1 - P_u) ‖X‖²`, evaluated directly.
    pub expected_increment: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RescueReport {
    pub records: Vec<RescueRecord>,
    /// Contexts skipped for clamped or degenerate probabilities.
    pub skipped: usize,
    /// Largest gap between an undesired token's gradient and its
    /// repulsion-minus-offset decomposition.
    pub decomposition_gap: f64,
}

impl RescueReport {
    pub fn all_hold(&self) -> bool {
        self.records.iter().all(|r| r.holds)
    }
}

/// Compares the descent projection of non-undesired tokens with and without
/// the unlikelihood term, per shared context.
///
/// At every context where the target chain and at least one undesired chain
/// coincide, each candidate token outside the undesired set is compared;
/// the likelihood and unlikelihood contributions are those of that context.
pub fn verify_rescue(
    params: &ModelParams<f64>,
    ex: &TokenExample,
    allowed: &AllowedSets,
    alpha: f64,
    eps: f64,
) -> RescueReport {
    let cfg = LossConfig { alpha, eps };
    let (_, _, trace) = grad_with_trace(params, ex, allowed, &cfg);
    let mut groups: BTreeMap<&[u32], Vec<&StepRecord<f64>>> = BTreeMap::new();
    for s in &trace {
        groups.entry(&s.prefix).or_default().push(s);
    }
    let mut report = RescueReport::default();
    for (prefix, steps) in groups {
        let Some(target) = steps.iter().find(|s| s.kind == StepKind::Nll) else {
            continue;
        };
        let undesired: Vec<&&StepRecord<f64>> = steps.iter().filter(|s| s.kind == StepKind::Auo).collect();
        if undesired.is_empty() {
            continue;
        }
        let probs = &target.probs;
        if steps.iter().any(|s| s.clamped) || probs.iter().any(|&p| p <= 0.0 || p >= 1.0) {
            report.skipped += 1;
            continue;
        }
        let x2 = norm_sq(&target.context);
        let p_of = |t: u32| probs[target.allowed.binary_search(&t).expect("candidate")];
        let nll_only: Vec<StepRecord<f64>> = vec![(*target).clone()];
        let all: Vec<StepRecord<f64>> = steps.iter().map(|s| (*s).clone()).collect();
        let g_nll = closed_form_output_grads(&nll_only, 0.0);
        let g_all = closed_form_output_grads(&all, alpha);
        let u_tokens: BTreeSet<u32> = undesired.iter().map(|s| s.token).collect();
        for &c in &target.allowed {
            if u_tokens.contains(&c) {
                // targeted repulsion minus cross-penalization offset
                let pc = p_of(c);
                let m = undesired.iter().filter(|s| s.token == c).count() as f64;
                let offset: f64 = undesired
                    .iter()
                    .filter(|s| s.token != c)
                    .map(|s| {
                        let pu = p_of(s.token);
                        pu * pc / (1.0 - pu)
                    })
                    .sum();
                let nll = pc - if c == target.token { 1.0 } else { 0.0 };
                let coef = nll + alpha * (m * pc - offset);
                for (a, x) in g_all[&c].iter().zip(&target.context) {
                    report.decomposition_gap = report.decomposition_gap.max((a - coef * x).abs());
                }
                continue;
            }
            let nll_projection = -dot(&g_nll[&c], &target.context);
            let total_projection = -dot(&g_all[&c], &target.context);
            let expected_increment = alpha
                * undesired
                    .iter()
                    .map(|s| {
                        let pu = p_of(s.token);
                        pu * p_of(c) / (1.0 - pu)
                    })
                    .sum::<f64>()
                * x2;
            let holds = if alpha > 0.0 && x2 > 0.0 {
                total_projection > nll_projection
            } else {
                total_projection == nll_projection
            };
            report.records.push(RescueRecord {
                prefix: prefix.to_vec(),
                token: c,
                nll_projection,
                total_projection,
                expected_increment,
                holds,
            });
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Gradient starvation
// ---------------------------------------------------------------------------

/// Tokens that occur only in head SIDs and only in tail SIDs.
pub fn exclusive_tokens(table: &SidTable) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let mut head = BTreeSet::new();
    let mut tail = BTreeSet::new();
    for (_, sid) in table.iter() {
        let set = match sid.kind {
            ItemKind::Head => &mut head,
            ItemKind::Tail => &mut tail,
        };
        set.extend(sid.tokens.iter().copied());
    }
    let shared: BTreeSet<u32> = head.intersection(&tail).copied().collect();
    (
        head.difference(&shared).copied().collect(),
        tail.difference(&shared).copied().collect(),
    )
}

/// Accumulates per-token descent projections `⟨-∂L_NLL/∂e_c, X⟩` over
/// observed examples.
#[derive(Clone, Debug, Default)]
pub struct StarvationMeter {
    pub cumulative: BTreeMap<u32, f64>,
    pub examples: usize,
    /// Steps where a non-target token received a positive projection; the
    /// softmax gradient makes this impossible, so it must stay 0.
    pub sign_violations: usize,
}

impl StarvationMeter {
    pub fn observe(&mut self, params: &ModelParams<f64>, batch: &[&TokenExample], allowed: &AllowedSets, eps: f64) {
        let cfg = LossConfig { alpha: 0.0, eps };
        let per_example: Vec<Vec<StepRecord<f64>>> = batch
            .par_iter()
            .map(|ex| grad_with_trace(params, ex, allowed, &cfg).2)
            .collect();
        for trace in per_example {
            self.examples += 1;
            for s in trace.iter().filter(|s| s.kind == StepKind::Nll && !s.clamped) {
                let x2 = norm_sq(&s.context);
                for (&c, &p) in s.allowed.iter().zip(&s.probs) {
                    let hit = if c == s.token { 1.0 } else { 0.0 };
                    let proj = (hit - p) * x2;
                    if c != s.token && proj > 0.0 {
                        self.sign_violations += 1;
                    }
                    *self.cumulative.entry(c).or_insert(0.0) += proj;
                }
            }
        }
    }

    pub fn report(&self, table: &SidTable) -> StarvationReport {
        let (head, tail) = exclusive_tokens(table);
        let mean = |set: &BTreeSet<u32>| {
            if set.is_empty() {
                return None;
            }
            let s: f64 = set.iter().map(|t| self.cumulative.get(t).copied().unwrap_or(0.0)).sum();
            Some(s / set.len() as f64)
        };
        StarvationReport {
            head_exclusive_tokens: head.len(),
            tail_exclusive_tokens: tail.len(),
            head_mean_projection: mean(&head),
            tail_mean_projection: mean(&tail),
            examples: self.examples,
            sign_violations: self.sign_violations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarvationReport {
    pub head_exclusive_tokens: usize,
    pub tail_exclusive_tokens: usize,
    pub head_mean_projection: Option<f64>,
    pub tail_mean_projection: Option<f64>,
    pub examples: usize,
    pub sign_violations: usize,
}

impl StarvationReport {
    /// Tail-exclusive tokens are pushed away on average, harder than
    /// head-exclusive ones.
    pub fn starved(&self) -> bool {
        match (self.head_mean_projection, self.tail_mean_projection) {
            (Some(h), Some(t)) => t < 0.0 && t < h,
            _ => false,
        }
    }
}

/// Net movement of each output embedding over training, seen from the
/// contexts in which the token is a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateProjectionReport {
    pub head_exclusive_tokens: usize,
    pub tail_exclusive_tokens: usize,
    /// Mean over head-exclusive tokens of the per-token mean `⟨Δe_c, X⟩`.
    pub head_mean: Option<f64>,
    pub tail_mean: Option<f64>,
    pub contexts: usize,
}

impl UpdateProjectionReport {
    pub fn starved(&self) -> bool {
        match (self.head_mean, self.tail_mean) {
            (Some(h), Some(t)) => t < 0.0 && t < h,
            _ => false,
        }
    }
}

/// `⟨e_c(final) - e_c(initial), X⟩` averaged over every training-chain
/// context `X` (computed with the final parameters) at which `c` is a
/// candidate, then averaged within the head-exclusive and tail-exclusive
/// token classes.
pub fn cumulative_update_projection(
    initial: &ModelParams<f64>,
    trained: &ModelParams<f64>,
    examples: &[TokenExample],
    allowed: &AllowedSets,
    table: &SidTable,
) -> UpdateProjectionReport {
    let d = trained.dim;
    let delta: Vec<f64> = trained
        .output_emb
        .iter()
        .zip(&initial.output_emb)
        .map(|(a, b)| a - b)
        .collect();
    let per_example: Vec<(BTreeMap<u32, (f64, usize)>, usize)> = examples
        .par_iter()
        .map(|ex| {
            let base = context_base(trained, &pooled_history(trained, &ex.history));
            let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
            let mut contexts = 0;
            for i in 0..ex.target.len() {
                let cand = allowed.at(i);
                if cand.len() <= 1 {
                    continue;
                }
                contexts += 1;
                let x: Vec<f64> = pre_after(trained, &base, &ex.target[..i]).iter().map(|v| v.tanh()).collect();
                for &c in cand {
                    let e = &delta[c as usize * d..(c as usize + 1) * d];
                    let slot = acc.entry(c).or_insert((0.0, 0));
                    slot.0 += dot(e, &x);
                    slot.1 += 1;
                }
            }
            (acc, contexts)
        })
        .collect();
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut contexts = 0;
    for (m, n) in per_example {
        contexts += n;
        for (c, (s, k)) in m {
            let slot = acc.entry(c).or_insert((0.0, 0));
            slot.0 += s;
            slot.1 += k;
        }
    }
    let (head, tail) = exclusive_tokens(table);
    let class_mean = |set: &BTreeSet<u32>| {
        let means: Vec<f64> = set
            .iter()
            .filter_map(|t| acc.get(t).map(|&(s, k)| s / k as f64))
            .collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    };
    UpdateProjectionReport {
        head_exclusive_tokens: head.len(),
        tail_exclusive_tokens: tail.len(),
        head_mean: class_mean(&head),
        tail_mean: class_mean(&tail),
        contexts,
    }
}

// ---------------------------------------------------------------------------
// Empirical next-token distribution and trie-constrained model probabilities
// ---------------------------------------------------------------------------

/// Smoothed next-token frequencies per (context bucket, trie node), counted
/// over training targets. Buckets are users' primary latent clusters, or a
/// single bucket when none are known.
#[derive(Clone, Debug, Default)]
pub struct EmpiricalNextToken {
    counts: BTreeMap<(usize, usize), BTreeMap<u32, u64>>,
}

pub fn context_bucket(latent: Option<&LatentClusters>, user_index: usize) -> usize {
    latent.map_or(0, |l| l.primary_cluster(user_index))
}

impl EmpiricalNextToken {
    pub fn fit(train: &[Interaction], table: &SidTable, trie: &Trie, latent: Option<&LatentClusters>) -> Result<Self> {
        let mut counts: BTreeMap<(usize, usize), BTreeMap<u32, u64>> = BTreeMap::new();
        for it in train {
            let bucket = context_bucket(latent, it.user_index);
            let path = table.sid(it.target)?.with_eos(trie.eos);
            let mut node = ROOT;
            for &t in &path {
                *counts.entry((bucket, node)).or_default().entry(t).or_insert(0) += 1;
                node = trie.child(node, t).ok_or(Error::MissingItem(it.target))?;
            }
        }
        Ok(Self { counts })
    }

    /// Observations behind a bucket and node.
    pub fn support(&self, bucket: usize, node: usize) -> u64 {
        self.counts.get(&(bucket, node)).map_or(0, |m| m.values().sum())
    }

    /// Add-one smoothed probability of `token` among the node's children.
    pub fn prob(&self, trie: &Trie, bucket: usize, node: usize, token: u32) -> f64 {
        let n_children = trie.nodes[node].children.len() as f64;
        let m = self.counts.get(&(bucket, node));
        let c = m.and_then(|m| m.get(&token)).copied().unwrap_or(0) as f64;
        (c + 1.0) / (self.support(bucket, node) as f64 + n_children)
    }
}

/// Pre-activation after feeding `prefix` on top of `base`.
fn pre_after<T: crate::Scalar>(params: &ModelParams<T>, base: &[T], prefix: &[u32]) -> Vec<T> {
    let mut pre = base.to_vec();
    for (j, &t) in prefix.iter().enumerate() {
        matvec_add(params.pos(j), params.dim, params.input(t), &mut pre);
    }
    pre
}

/// Softmax over the trie children of `prefix`, in ascending token order.
pub fn trie_child_probs(params: &ModelParams<f64>, history: &[u32], trie: &Trie, prefix: &[u32]) -> Vec<(u32, f64)> {
    let base = context_base(params, &pooled_history(params, history));
    child_probs_from_base(params, &base, trie, prefix)
}

fn child_probs_from_base(params: &ModelParams<f64>, base: &[f64], trie: &Trie, prefix: &[u32]) -> Vec<(u32, f64)> {
    let Some(node) = trie.node(prefix) else {
        return Vec::new();
    };
    let x: Vec<f64> = pre_after(params, base, prefix).iter().map(|v| v.tanh()).collect();
    let toks: Vec<u32> = trie.nodes[node].children.keys().copied().collect();
    let logits: Vec<f64> = toks.iter().map(|&c| dot(params.output(c), &x)).collect();
    toks.into_iter().zip(softmax(&logits)).collect()
}

// ---------------------------------------------------------------------------
// Amplification factor
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub user: u32,
    /// 1-based decoding step of the branching choice.
    pub position: usize,
    pub model_ratio: f64,
    pub data_ratio: f64,
    pub gamma: f64,
    /// Training observations behind the empirical estimate.
    pub sample_size: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    pub estimates: Vec<GammaEstimate>,
    pub skipped: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

/// Linear-interpolated quantile of already sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// `γ = [P_θ(head)/P_θ(tail)] / [P_d(head)/P_d(tail)]`.
pub fn gamma_quotient(model_ratio: f64, data_ratio: f64) -> f64 {
    model_ratio / data_ratio
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    /// Interactions sampled as contexts.
    pub max_contexts: usize,
    pub max_history: usize,
    pub seed: u64,
}

/// Head-versus-tail amplification at branching points.
///
/// Contexts are sampled from `contexts`; along each target's trie path,
/// every node whose children include both a subtree containing a head item
/// and a tail-only subtree is a branching context. "Head" and "tail" mass
/// are summed over those two kinds of children, for the model (trie-
/// constrained softmax) and for the empirical distribution of the user's
/// bucket. Contexts whose bucket has no training observations are skipped.
pub fn estimate_gamma(
    params: &ModelParams<f64>,
    contexts: &[Interaction],
    empirical: &EmpiricalNextToken,
    table: &SidTable,
    trie: &Trie,
    latent: Option<&LatentClusters>,
    cfg: &GammaConfig,
) -> Result<GammaSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample: Vec<&Interaction> = contexts.choose_multiple(&mut rng, cfg.max_contexts).collect();
    let per_context = sample
        .par_iter()
        .map(|it| -> Result<(Vec<GammaEstimate>, usize)> {
            let hist = history_tokens(&it.history, table, cfg.max_history)?;
            let base = context_base(params, &pooled_history(params, &hist));
            let bucket = context_bucket(latent, it.user_index);
            let path = table.sid(it.target)?.with_eos(trie.eos);
            let mut out = Vec::new();
            let mut skipped = 0;
            let mut node = ROOT;
            for (i, &t) in path.iter().enumerate() {
                let children = &trie.nodes[node].children;
                let is_head = |c: usize| trie.nodes[c].heads_below > 0;
                let has_head = children.values().any(|&c| is_head(c));
                let has_tail = children.values().any(|&c| !is_head(c));
                if has_head && has_tail {
                    let support = empirical.support(bucket, node);
                    if support == 0 {
                        skipped += 1;
                    } else {
                        let probs = child_probs_from_base(params, &base, trie, &path[..i]);
                        let (mut mh, mut mt, mut dh, mut dt) = (0.0, 0.0, 0.0, 0.0);
                        for (tok, p) in probs {
                            let c = children[&tok];
                            let pd = empirical.prob(trie, bucket, node, tok);
                            if is_head(c) {
                                mh += p;
                                dh += pd;
                            } else {
                                mt += p;
                                dt += pd;
                            }
                        }
                        if mh > 0.0 && mt > 0.0 {
                            let model_ratio = mh / mt;
                            let data_ratio = dh / dt;
                            out.push(GammaEstimate {
                                user: it.user.0,
                                position: i + 1,
                                model_ratio,
                                data_ratio,
                                gamma: gamma_quotient(model_ratio, data_ratio),
                                sample_size: support,
                            });
                        } else {
                            skipped += 1;
                        }
                    }
                }
                node = trie.child(node, t).ok_or(Error::MissingItem(it.target))?;
            }
            Ok((out, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut estimates = Vec::new();
    let mut skipped = 0;
    for (e, s) in per_context {
        estimates.extend(e);
        skipped += s;
    }
    let mut g: Vec<f64> = estimates.iter().map(|e| e.gamma).collect();
    g.sort_by(f64::total_cmp);
    Ok(GammaSummary {
        median: quantile(&g, 0.5),
        q1: quantile(&g, 0.25),
        q3: quantile(&g, 0.75),
        estimates,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Suppression by competition count
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionBucket {
    pub z: usize,
    pub mean_deficit: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionCurve {
    pub tokenizer: String,
    pub buckets: Vec<SuppressionBucket>,
    /// Least-squares slope of per-instance deficit on z; absent when only
    /// one z occurs.
    pub slope: Option<f64>,
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Log-probability deficit `log P_d(path) - log P_θ(path)` of tail targets,
/// bucketed by the number of head-competition steps on their path. Both
/// path probabilities are products of per-step trie-constrained
/// conditionals (EOS included); buckets with fewer than `min_count`
/// instances are omitted.
#[allow(clippy::too_many_arguments)]
pub fn suppression_curve(
    params: &ModelParams<f64>,
    tokenizer: &str,
    contexts: &[Interaction],
    empirical: &EmpiricalNextToken,
    table: &SidTable,
    trie: &Trie,
    latent: Option<&LatentClusters>,
    max_history: usize,
    min_count: usize,
) -> Result<SuppressionCurve> {
    let points = contexts
        .par_iter()
        .filter(|it| table.get(it.target).is_some_and(|s| s.kind == ItemKind::Tail))
        .map(|it| -> Result<(f64, f64)> {
            let z = competition_steps(table, it.target).ok_or(Error::MissingItem(it.target))?;
            let hist = history_tokens(&it.history, table, max_history)?;
            let base = context_base(params, &pooled_history(params, &hist));
            let bucket = context_bucket(latent, it.user_index);
            let path = table.sid(it.target)?.with_eos(trie.eos);
            let mut node = ROOT;
            let mut deficit = 0.0;
            for (i, &t) in path.iter().enumerate() {
                if trie.nodes[node].children.len() > 1 {
                    let probs = child_probs_from_base(params, &base, trie, &path[..i]);
                    let p = probs.iter().find(|(c, _)| *c == t).map_or(0.0, |x| x.1);
                    deficit += empirical.prob(trie, bucket, node, t).ln() - p.max(f64::MIN_POSITIVE).ln();
                }
                node = trie.child(node, t).ok_or(Error::MissingItem(it.target))?;
            }
            Ok((z as f64, deficit))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_z: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(z, d) in &points {
        let e = by_z.entry(z as usize).or_insert((0.0, 0));
        e.0 += d;
        e.1 += 1;
    }
    let buckets = by_z
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_count.max(1))
        .map(|(z, (s, n))| SuppressionBucket {
            z,
            mean_deficit: s / n as f64,
            count: n,
        })
        .collect();
    Ok(SuppressionCurve {
        tokenizer: tokenizer.to_string(),
        buckets,
        slope: ols_slope(&points),
    })
}
