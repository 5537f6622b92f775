//! In-memory pipeline stages shared by the commands and the test suites.

use std::collections::BTreeMap;

use anyhow::{bail, Context};
use sidbias::corpus::{
    balancing_probability, generate_synthetic_with, head_tail_counts, leave_one_out, load_interactions,
    split_head_tail, transform_sequences, Dataset, HeadTailSplit, Interaction, SplitDataset,
};
use sidbias::evalx::{evaluate, MetricsReport, RecList, Truth};
use sidbias::model::{
    history_tokens, recommend_all, train, AllowedSets, BatchView, ModelParams, TokenExample, TrainCheckpoint,
    TrainData, TrainOutcome, UndesiredCollection, ValidSet,
};
use sidbias::quantize::{load_reps, most_similar_tail, reduce_dim, synthesize_reps, ItemRep, RepTable};
use sidbias::skt::{baseline_rqk, baseline_rqk_split, skt_tokenize, TokenizerConfig, Trie};

use crate::config::{RunConfig, TokenizerKind};

pub struct Prepared {
    pub dataset: Dataset,
    pub split: HeadTailSplit,
    pub loo: SplitDataset,
}

pub fn prepare_data(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let dataset = match &cfg.data.input {
        Some(path) => load_interactions(path).with_context(|| format!("loading {}", path.display()))?,
        None => generate_synthetic_with(&cfg.data.synthetic)?,
    };
    let split = split_head_tail(&dataset);
    let loo = leave_one_out(&dataset);
    if loo.test.is_empty() {
        bail!("no user has enough interactions for a leave-one-out split");
    }
    Ok(Prepared { dataset, split, loo })
}

pub fn build_reps(cfg: &RunConfig, data: &Prepared) -> anyhow::Result<Vec<ItemRep<f64>>> {
    let reps = match &cfg.reps.input {
        Some(path) => {
            let loaded = load_reps(path, cfg.reps.dim, &data.dataset)?;
            if loaded.ignored > 0 {
                log::warn!("ignored {} representation rows for unknown items", loaded.ignored);
            }
            loaded.reps
        }
        None => {
            let clusters = data
                .dataset
                .latent
                .as_ref()
                .map_or((data.dataset.items.len() / 20).max(2), |l| l.num_clusters);
            synthesize_reps(&data.dataset, &data.split, cfg.reps.dim, clusters, cfg.reps.noise, cfg.reps.seed)?
        }
    };
    Ok(match cfg.reps.reduce_to {
        Some(d) => reduce_dim(&reps, d)?.0,
        None => reps,
    })
}

pub fn rep_table(reps: &[ItemRep<f64>]) -> RepTable<f64> {
    reps.iter().map(|r| (r.item, r.vector.clone())).collect()
}

/// Head-to-tail substituted or augmented corpus, when configured.
pub fn transformed(cfg: &RunConfig, data: &Prepared, reps: &RepTable<f64>) -> anyhow::Result<Option<(Dataset, f64)>> {
    let Some(tr) = &cfg.data.transform else {
        return Ok(None);
    };
    let p = match tr.p {
        Some(p) => p,
        None => {
            let (h, t) = head_tail_counts(&data.dataset, &data.split);
            balancing_probability(h as f64 / (h + t) as f64)
        }
    };
    let sims = most_similar_tail(reps, &data.split)?;
    let ds = transform_sequences(&data.dataset, &data.split, &sims, p, tr.mode, cfg.data.synthetic.seed)?;
    Ok(Some((ds, p)))
}

/// Swaps in the training instances of the transformed corpus. Validation,
/// test targets and the popularity used by the metrics stay those of the
/// original corpus, so transformed arms are scored on the same users.
pub fn apply_transform(cfg: &RunConfig, data: &mut Prepared, reps: &RepTable<f64>) -> anyhow::Result<Option<f64>> {
    let Some((ds, p)) = transformed(cfg, data, reps)? else {
        return Ok(None);
    };
    let loo = leave_one_out(&ds);
    data.loo.train = loo.train;
    data.loo.train_sequences = loo.train_sequences;
    data.dataset.latent = ds.latent;
    Ok(Some(p))
}

pub fn tokenizer_config(cfg: &RunConfig) -> TokenizerConfig {
    let t = &cfg.tokenizer;
    TokenizerConfig {
        l_head: t.l_head,
        l_tail: t.l_tail,
        n_head: t.n_head,
        n_tail: t.n_tail,
        iters: t.iters,
        dedup_capacity: t.dedup_capacity,
        seed: t.seed,
    }
}

pub fn tokenize(cfg: &RunConfig, data: &Prepared, reps: &RepTable<f64>) -> anyhow::Result<sidbias::Tokenization> {
    let tc = tokenizer_config(cfg);
    let pop = &data.dataset.popularity;
    Ok(match cfg.tokenizer.kind {
        TokenizerKind::Skt => skt_tokenize(reps, &data.split, pop, &tc)?,
        TokenizerKind::Rqk(l) => baseline_rqk(reps, &data.split, pop, l, &tc)?,
        TokenizerKind::RqkSplit => {
            baseline_rqk_split(reps, &data.split, pop, tc.l_head, tc.l_head + tc.l_tail, &tc)?
        }
    })
}

/// Token-level training state for one tokenization.
pub struct Prepped {
    pub examples: Vec<TokenExample>,
    pub valid: ValidSet,
    pub allowed: AllowedSets,
    pub trie: Trie,
    pub undesired: UndesiredCollection,
}

pub fn prep_training(
    cfg: &RunConfig,
    data: &Prepared,
    reps: &RepTable<f64>,
    tok: &sidbias::Tokenization,
) -> anyhow::Result<Prepped> {
    let table = &tok.table;
    let undesired = UndesiredCollection::build(reps, &data.split, table, cfg.undesired)?;
    let use_auo = cfg.train.alpha > 0.0;
    let examples = data
        .loo
        .train
        .iter()
        .map(|it| {
            TokenExample::new(
                it,
                table,
                &data.split,
                use_auo.then_some(&undesired),
                cfg.train.max_history,
            )
        })
        .collect::<sidbias::Result<Vec<_>>>()?;
    let valid = ValidSet {
        histories: histories(&data.loo.valid, tok, cfg.train.max_history)?,
        targets: data.loo.valid.iter().map(|it| it.target).collect(),
    };
    Ok(Prepped {
        examples,
        valid,
        allowed: AllowedSets::from_table(table),
        trie: Trie::build(table),
        undesired,
    })
}

pub fn histories(its: &[Interaction], tok: &sidbias::Tokenization, max_history: usize) -> anyhow::Result<Vec<Vec<u32>>> {
    Ok(its
        .iter()
        .map(|it| history_tokens(&it.history, &tok.table, max_history))
        .collect::<sidbias::Result<Vec<_>>>()?)
}

pub fn train_model(
    cfg: &RunConfig,
    prepped: &Prepped,
    tok: &sidbias::Tokenization,
    resume: Option<TrainCheckpoint<f64>>,
    hook: &mut dyn FnMut(&BatchView<'_, f64>),
) -> anyhow::Result<TrainOutcome<f64>> {
    let data = TrainData {
        examples: &prepped.examples,
        allowed: &prepped.allowed,
        trie: &prepped.trie,
        valid: &prepped.valid,
        vocab: tok.table.layout.vocab_size as usize,
        positions: tok.table.max_len(),
    };
    Ok(train(&data, &cfg.train, resume, hook)?)
}

/// Recommendations and held-out items for the test interactions.
pub fn test_recs(
    cfg: &RunConfig,
    data: &Prepared,
    tok: &sidbias::Tokenization,
    trie: &Trie,
    params: &ModelParams<f64>,
) -> anyhow::Result<(RecList, Truth)> {
    let k = cfg.eval.cutoffs.iter().copied().max().unwrap_or(10);
    let hist = histories(&data.loo.test, tok, cfg.train.max_history)?;
    let lists = recommend_all(params, &hist, trie, cfg.eval.beam_width, k);
    let mut recs = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (it, list) in data.loo.test.iter().zip(lists) {
        recs.insert(it.user, list);
        truth.insert(it.user, it.target);
    }
    Ok((recs, truth))
}

pub fn evaluate_model(
    cfg: &RunConfig,
    data: &Prepared,
    tok: &sidbias::Tokenization,
    trie: &Trie,
    params: &ModelParams<f64>,
) -> anyhow::Result<MetricsReport> {
    let (recs, truth) = test_recs(cfg, data, tok, trie, params)?;
    Ok(evaluate(&recs, &truth, &data.loo.train_popularity, &data.split, &cfg.eval.cutoffs)?)
}

/// Result of one end-to-end in-memory run.
pub struct ArmRun {
    pub tokenization: sidbias::Tokenization,
    pub prepped: Prepped,
    pub outcome: TrainOutcome<f64>,
    pub report: MetricsReport,
}

pub fn run_arm(
    cfg: &RunConfig,
    data: &Prepared,
    reps: &RepTable<f64>,
    hook: &mut dyn FnMut(&BatchView<'_, f64>),
) -> anyhow::Result<ArmRun> {
    let tokenization = tokenize(cfg, data, reps)?;
    let prepped = prep_training(cfg, data, reps, &tokenization)?;
    let outcome = train_model(cfg, &prepped, &tokenization, None, hook)?;
    let report = evaluate_model(cfg, data, &tokenization, &prepped.trie, &outcome.params)?;
    Ok(ArmRun {
        tokenization,
        prepped,
        outcome,
        report,
    })
}
