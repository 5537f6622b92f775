//! The pipeline stages behind each subcommand, writing their artifacts into
//! an output directory and recording them in its manifest.
//!
//! Every command regenerates the cheap upstream state (corpus, vectors,
//! tokenization) from the config, which is deterministic; only the trained
//! model travels between commands, as a checkpoint file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sidbias::biaslab::{
    check_example_gradient, closed_form_gap, cumulative_update_projection, estimate_gamma, suppression_curve,
    verify_rescue, EmpiricalNextToken, GammaConfig, GammaSummary, GradCheckConfig, GradCheckReport,
    SuppressionCurve, UpdateProjectionReport,
};
use sidbias::corpus::{gini, head_tail_counts, ItemId};
use sidbias::evalx::{cns_table, MetricsReport};
use sidbias::model::{init_checkpoint, EpochLog, LossConfig, TokenExample, TrainCheckpoint, TrainData};
use sidbias::quantize::{write_reps, CodebookFile, ItemRep, RepTable};
use sidbias::skt::{trie_stats, TrieStats};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::pipeline::{
    apply_transform, build_reps, evaluate_model, prep_training, prepare_data, rep_table, test_recs, tokenize,
    train_model, Prepared, Prepped,
};

pub const CHECKPOINT: &str = "checkpoint.json";

/// Corpus, vectors and the optional transform, rebuilt from the config.
pub struct Upstream {
    pub data: Prepared,
    pub reps: Vec<ItemRep<f64>>,
    pub table: RepTable<f64>,
    pub transform_p: Option<f64>,
}

pub fn upstream(cfg: &RunConfig) -> anyhow::Result<Upstream> {
    let mut data = prepare_data(cfg)?;
    let reps = build_reps(cfg, &data)?;
    let table = rep_table(&reps);
    let transform_p = apply_transform(cfg, &mut data, &table)?;
    Ok(Upstream {
        data,
        reps,
        table,
        transform_p,
    })
}

fn ensure_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub head_items: usize,
    pub tail_items: usize,
    pub head_interaction_share: f64,
    pub gini: f64,
    pub train_instances: usize,
    pub valid_instances: usize,
    pub test_instances: usize,
    pub skipped_users: usize,
    /// Replacement probability of the configured transform.
    pub transform_p: Option<f64>,
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<DataStats> {
    ensure_dir(out)?;
    let up = upstream(cfg)?;
    let ds = &up.data.dataset;
    let (h, t) = head_tail_counts(ds, &up.data.split);
    let stats = DataStats {
        users: ds.users.len(),
        items: ds.items.len(),
        interactions: ds.num_interactions(),
        head_items: up.data.split.head.len(),
        tail_items: up.data.split.tail.len(),
        head_interaction_share: h as f64 / (h + t).max(1) as f64,
        gini: gini(&ds.popularity),
        train_instances: up.data.loo.train.len(),
        valid_instances: up.data.loo.valid.len(),
        test_instances: up.data.loo.test.len(),
        skipped_users: up.data.loo.skipped,
        transform_p: up.transform_p,
    };
    ds.write_jsonl(&out.join("interactions.jsonl"))?;
    write_reps(&up.reps, &out.join("reps.jsonl"))?;
    write_json(&out.join("split.json"), &up.data.split)?;
    write_json(&out.join("data_stats.json"), &stats)?;
    Manifest::record(
        out,
        cfg,
        "gen-data",
        &["interactions.jsonl", "reps.jsonl", "split.json", "data_stats.json"],
    )?;
    Ok(stats)
}

pub fn tokenize_cmd(cfg: &RunConfig, out: &Path) -> anyhow::Result<TrieStats> {
    ensure_dir(out)?;
    let up = upstream(cfg)?;
    let tok = tokenize(cfg, &up.data, &up.table)?;
    let prepped = prep_training(cfg, &up.data, &up.table, &tok)?;
    let stats = trie_stats(&tok.table, &prepped.trie);
    tok.table.write_jsonl(&out.join("sids.jsonl"))?;
    let seed = cfg.tokenizer.seed;
    write_json(&out.join("head_codebooks.json"), &CodebookFile::new(&tok.head_books, seed))?;
    // tail levels are always seeded one past the head levels
    write_json(
        &out.join("tail_codebooks.json"),
        &CodebookFile::new(&tok.tail_books, seed.wrapping_add(1)),
    )?;
    write_json(&out.join("layout.json"), &tok.table.layout)?;
    write_json(&out.join("trie_stats.json"), &stats)?;
    prepped.undesired.write_json(&out.join("undesired.json"))?;
    Manifest::record(
        out,
        cfg,
        "tokenize",
        &[
            "sids.jsonl",
            "head_codebooks.json",
            "tail_codebooks.json",
            "layout.json",
            "trie_stats.json",
            "undesired.json",
        ],
    )?;
    Ok(stats)
}

fn read_log(path: &Path) -> anyhow::Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<Vec<EpochLog>, _>>()?)
}

fn write_log(path: &Path, log: &[EpochLog]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains and writes `checkpoint.json` and `train_log.csv`.
///
/// With `resume`, training continues from that checkpoint up to the
/// configured epoch count, and the log rows of the epochs it already covers
/// are carried over from `train_log.csv` in `out`; the result is
/// byte-identical to an uninterrupted run.
pub fn train_cmd(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<Vec<EpochLog>> {
    ensure_dir(out)?;
    let up = upstream(cfg)?;
    let tok = tokenize(cfg, &up.data, &up.table)?;
    let prepped = prep_training(cfg, &up.data, &up.table, &tok)?;
    let (ck, mut log) = match resume {
        Some(path) => {
            let mut ck =
                TrainCheckpoint::<f64>::load(path).with_context(|| format!("loading {}", path.display()))?;
            // the stored config follows the run being resumed into
            ck.config = cfg.train.clone();
            if ck.epoch > cfg.train.epochs {
                bail!("checkpoint has {} epochs, more than the configured {}", ck.epoch, cfg.train.epochs);
            }
            let prior = out.join("train_log.csv");
            let mut log = if prior.exists() { read_log(&prior)? } else { Vec::new() };
            log.retain(|l| l.epoch < ck.epoch);
            if log.len() != ck.epoch {
                log::warn!("train_log.csv covers {} of the {} resumed epochs", log.len(), ck.epoch);
            }
            (Some(ck), log)
        }
        None => (None, Vec::new()),
    };
    let outcome = train_model(cfg, &prepped, &tok, ck, &mut |_| {})?;
    log.extend(outcome.log.iter().copied());
    outcome.checkpoint.save(&out.join(CHECKPOINT))?;
    write_log(&out.join("train_log.csv"), &log)?;
    Manifest::record(out, cfg, "train", &[CHECKPOINT, "train_log.csv"])?;
    Ok(log)
}

fn load_checkpoint(out: &Path, explicit: Option<&Path>) -> anyhow::Result<TrainCheckpoint<f64>> {
    let path: PathBuf = explicit.map_or_else(|| out.join(CHECKPOINT), Path::to_path_buf);
    TrainCheckpoint::<f64>::load(&path).with_context(|| format!("loading {} (run `train` first)", path.display()))
}

/// Best-validation parameters of a checkpoint, or its latest ones.
fn best_params(ck: &TrainCheckpoint<f64>) -> &sidbias::ModelParams {
    ck.best.as_ref().map_or(&ck.params, |(_, _, p)| p)
}

#[derive(Serialize)]
struct RecRow<'a> {
    user: u32,
    target: ItemId,
    items: &'a [ItemId],
}

pub fn eval_cmd(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> anyhow::Result<MetricsReport> {
    ensure_dir(out)?;
    let up = upstream(cfg)?;
    let tok = tokenize(cfg, &up.data, &up.table)?;
    let prepped = prep_training(cfg, &up.data, &up.table, &tok)?;
    let ck = load_checkpoint(out, checkpoint)?;
    let params = best_params(&ck);
    let report = evaluate_model(cfg, &up.data, &tok, &prepped.trie, params)?;
    let (recs, truth) = test_recs(cfg, &up.data, &tok, &prepped.trie, params)?;
    let mut w = BufWriter::new(File::create(out.join("recs.jsonl"))?);
    for (user, items) in &recs {
        serde_json::to_writer(
            &mut w,
            &RecRow {
                user: user.0,
                target: truth[user],
                items,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    report.write_json(&out.join("metrics.json"))?;
    report.write_plot_csv(&out.join("metrics_long.csv"))?;
    Manifest::record(out, cfg, "eval", &["metrics.json", "metrics_long.csv", "recs.jsonl"])?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub alpha: f64,
    pub example: usize,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescueSummary {
    pub alpha: f64,
    pub comparisons: usize,
    pub violations: usize,
    pub skipped: usize,
    /// Largest gap between measured and closed-form projection increments.
    pub increment_gap: f64,
    pub decomposition_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiaslabReport {
    pub tokenizer: String,
    pub gradcheck: Vec<GradCheckEntry>,
    pub gradcheck_pass: bool,
    pub closed_form_gap: f64,
    pub rescue: RescueSummary,
    pub update_projection: UpdateProjectionReport,
    pub gamma: GammaSummary,
    pub suppression: SuppressionCurve,
    pub trie: TrieStats,
}

/// Examples for the gradient checks: tail targets with undesired SIDs first,
/// then head targets, in training order.
fn probe_examples(cfg: &RunConfig, up: &Upstream, tok: &sidbias::Tokenization, prepped: &Prepped) -> anyhow::Result<Vec<TokenExample>> {
    let mut tails = Vec::new();
    let mut heads = Vec::new();
    for it in &up.data.loo.train {
        let ex = TokenExample::new(
            it,
            &tok.table,
            &up.data.split,
            Some(&prepped.undesired),
            cfg.train.max_history,
        )?;
        if !ex.undesired.is_empty() {
            tails.push(ex);
        } else if up.data.split.is_head(it.target) {
            heads.push(ex);
        }
    }
    let n = cfg.biaslab.gradcheck_examples;
    let mut out: Vec<TokenExample> = tails.into_iter().take(n.div_ceil(2)).collect();
    let rest = n - out.len();
    out.extend(heads.into_iter().take(rest));
    Ok(out)
}

/// Gradient checks, closed forms and rescue run at the initialization (no
/// probability clamps are active there); starvation, γ and the suppression
/// curve use the trained checkpoint.
pub fn biaslab_cmd(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> anyhow::Result<BiaslabReport> {
    ensure_dir(out)?;
    let up = upstream(cfg)?;
    let tok = tokenize(cfg, &up.data, &up.table)?;
    let prepped = prep_training(cfg, &up.data, &up.table, &tok)?;
    let ck = load_checkpoint(out, checkpoint)?;
    let data = TrainData {
        examples: &[],
        allowed: &prepped.allowed,
        trie: &prepped.trie,
        valid: &prepped.valid,
        vocab: tok.table.layout.vocab_size as usize,
        positions: tok.table.max_len(),
    };
    let init = init_checkpoint::<f64>(&data, &cfg.train).params;
    let probes = probe_examples(cfg, &up, &tok, &prepped)?;
    let b = &cfg.biaslab;
    let mut gradcheck = Vec::new();
    let mut closed = 0.0f64;
    let rescue_alpha = if cfg.train.alpha > 0.0 { cfg.train.alpha } else { 0.1 };
    let mut rescue = RescueSummary {
        alpha: rescue_alpha,
        comparisons: 0,
        violations: 0,
        skipped: 0,
        increment_gap: 0.0,
        decomposition_gap: 0.0,
    };
    for (i, ex) in probes.iter().enumerate() {
        for alpha in [0.0, 0.1] {
            let loss = LossConfig {
                alpha,
                eps: cfg.train.eps,
            };
            let gc = GradCheckConfig {
                probes: b.gradcheck_probes,
                step: b.gradcheck_step,
                tolerance: b.gradcheck_tolerance,
                seed: b.seed.wrapping_add(i as u64),
            };
            gradcheck.push(GradCheckEntry {
                alpha,
                example: i,
                report: check_example_gradient(&init, ex, &prepped.allowed, &loss, &gc)?,
            });
            closed = closed.max(closed_form_gap(&init, ex, &prepped.allowed, &loss));
        }
        let r = verify_rescue(&init, ex, &prepped.allowed, rescue_alpha, cfg.train.eps);
        rescue.comparisons += r.records.len();
        rescue.violations += r.records.iter().filter(|x| !x.holds).count();
        rescue.skipped += r.skipped;
        rescue.decomposition_gap = rescue.decomposition_gap.max(r.decomposition_gap);
        for rec in &r.records {
            let measured = rec.total_projection - rec.nll_projection;
            rescue.increment_gap = rescue.increment_gap.max((measured - rec.expected_increment).abs());
        }
    }
    let gradcheck_pass = gradcheck.iter().all(|g| g.report.pass);

    let trained = best_params(&ck);
    let latent = up.data.dataset.latent.as_ref();
    let update_projection =
        cumulative_update_projection(&init, &ck.params, &prepped.examples, &prepped.allowed, &tok.table);
    let emp = EmpiricalNextToken::fit(&up.data.loo.train, &tok.table, &prepped.trie, latent)?;
    let gamma = estimate_gamma(
        trained,
        &up.data.loo.valid,
        &emp,
        &tok.table,
        &prepped.trie,
        latent,
        &GammaConfig {
            max_contexts: b.gamma_contexts,
            max_history: cfg.train.max_history,
            seed: b.seed,
        },
    )?;
    let suppression = suppression_curve(
        trained,
        &cfg.tokenizer.kind.to_string(),
        &up.data.loo.test,
        &emp,
        &tok.table,
        &prepped.trie,
        latent,
        cfg.train.max_history,
        b.suppression_min_count,
    )?;
    let report = BiaslabReport {
        tokenizer: cfg.tokenizer.kind.to_string(),
        gradcheck,
        gradcheck_pass,
        closed_form_gap: closed,
        rescue,
        update_projection,
        gamma,
        suppression,
        trie: trie_stats(&tok.table, &prepped.trie),
    };
    write_json(&out.join("biaslab.json"), &report)?;
    let mut w = csv::Writer::from_path(out.join("suppression.csv"))?;
    w.write_record(["tokenizer", "z", "deficit", "count"])?;
    for bk in &report.suppression.buckets {
        w.write_record([
            report.suppression.tokenizer.clone(),
            bk.z.to_string(),
            bk.mean_deficit.to_string(),
            bk.count.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("gamma.csv"))?;
    for g in &report.gamma.estimates {
        w.serialize(g)?;
    }
    w.flush()?;
    Manifest::record(out, cfg, "biaslab", &["biaslab.json", "suppression.csv", "gamma.csv"])?;
    Ok(report)
}

/// Runs every stage in order into `out`.
pub fn run_all(cfg: &RunConfig, out: &Path) -> anyhow::Result<(MetricsReport, BiaslabReport)> {
    gen_data(cfg, out)?;
    tokenize_cmd(cfg, out)?;
    train_cmd(cfg, out, None)?;
    let metrics = eval_cmd(cfg, out, None)?;
    let lab = biaslab_cmd(cfg, out, None)?;
    Ok((metrics, lab))
}

/// CNS table and a side-by-side metric listing over named run directories.
pub fn report_cmd(runs: &[(String, PathBuf)], out: &Path, k: usize) -> anyhow::Result<sidbias::evalx::CnsTable> {
    ensure_dir(out)?;
    let reports = runs
        .iter()
        .map(|(name, dir)| {
            let path = dir.join("metrics.json");
            let r = MetricsReport::read_json(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok((name.clone(), r))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table = cns_table(&reports, k)?;
    table.write_csv(&out.join("cns.csv"))?;
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    w.write_record(["model", "metric", "cutoff", "group", "value"])?;
    for (name, r) in &reports {
        for (m, c, g, v) in r.plot_rows() {
            w.write_record([name.clone(), m, c.to_string(), g, v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(table)
}
