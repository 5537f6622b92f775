//! Trains the comparison arms on one synthetic corpus and prints their
//! metrics side by side.
//!
//! cargo run --release -p sidbias-cli --example arms -- [seed] [config.json]

use std::time::Instant;

use sidbias::biaslab::{cumulative_update_projection, estimate_gamma, suppression_curve, EmpiricalNextToken, GammaConfig, StarvationMeter};
use sidbias_cli::pipeline::{build_reps, prepare_data, rep_table, run_arm};
use sidbias_cli::{RunConfig, TokenizerKind};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(Ok(1), |s| s.parse())?;
    let mut base = match args.get(2) {
        Some(path) => RunConfig::load(std::path::Path::new(path))?,
        None => RunConfig::default(),
    };
    base.reseed(seed);
    let data = prepare_data(&base)?;
    let reps = rep_table(&build_reps(&base, &data)?);
    println!(
        "users {} items {} train examples {} heads {}",
        data.dataset.users.len(),
        data.dataset.items.len(),
        data.loo.train.len(),
        data.split.head.len()
    );
    for (kind, alpha) in [
        (TokenizerKind::Rqk(4), 0.0),
        (TokenizerKind::Skt, 0.0),
        (TokenizerKind::Skt, 0.1),
        (TokenizerKind::RqkSplit, 0.0),
    ] {
        let mut cfg = base.clone();
        cfg.tokenizer.kind = kind;
        cfg.train.alpha = alpha;
        let t0 = Instant::now();
        let mut meter = StarvationMeter::default();
        let mut pending: Vec<(sidbias::ModelParams, Vec<sidbias::model::TokenExample>)> = Vec::new();
        let arm = run_arm(&cfg, &data, &reps, &mut |v| {
            if v.batch % 10 == 0 {
                pending.push((v.params.clone(), v.examples.iter().map(|e| (*e).clone()).collect()));
            }
        })?;
        for (p, exs) in &pending {
            let refs: Vec<_> = exs.iter().collect();
            meter.observe(p, &refs, &arm.prepped.allowed, cfg.train.eps);
        }
        let c10 = arm.report.at(10).unwrap();
        let emp = EmpiricalNextToken::fit(&data.loo.train, &arm.tokenization.table, &arm.prepped.trie, data.dataset.latent.as_ref())?;
        let gamma = estimate_gamma(
            &arm.outcome.params,
            &data.loo.valid,
            &emp,
            &arm.tokenization.table,
            &arm.prepped.trie,
            data.dataset.latent.as_ref(),
            &GammaConfig { max_contexts: 500, max_history: cfg.train.max_history, seed: 9 },
        )?;
        let sup = suppression_curve(
            &arm.outcome.params,
            &kind.to_string(),
            &data.loo.test,
            &emp,
            &arm.tokenization.table,
            &arm.prepped.trie,
            data.dataset.latent.as_ref(),
            cfg.train.max_history,
            5,
        )?;
        let st = meter.report(&arm.tokenization.table);
        let init = sidbias::model::init_checkpoint::<f64>(
            &sidbias::model::TrainData {
                examples: &[],
                allowed: &arm.prepped.allowed,
                trie: &arm.prepped.trie,
                valid: &arm.prepped.valid,
                vocab: arm.tokenization.table.layout.vocab_size as usize,
                positions: arm.tokenization.table.max_len(),
            },
            &cfg.train,
        )
        .params;
        let up = cumulative_update_projection(&init, &arm.outcome.checkpoint.params, &arm.prepped.examples, &arm.prepped.allowed, &arm.tokenization.table);
        println!("   update projection head {:?} tail {:?}", up.head_mean, up.tail_mean);
        println!(
            "{kind} a={alpha}: {:.1}s best_epoch {:?} HR10 {:.4} tailHR10 {:?} NDCG10 {:.4} ARP {:.1} MGU {:.3} exposure {}/{} | starve head {:?} tail {:?} viol {} | gamma med {:?} n {} | slope {:?} buckets {:?}",
            t0.elapsed().as_secs_f64(),
            arm.outcome.best_epoch,
            c10.hr_all,
            c10.hr_tail,
            c10.ndcg_all,
            c10.arp,
            c10.mgu,
            c10.exposure_head,
            c10.exposure_tail,
            st.head_mean_projection,
            st.tail_mean_projection,
            st.sign_violations,
            gamma.median,
            gamma.estimates.len(),
            sup.slope,
            sup.buckets.iter().map(|b| (b.z, (b.mean_deficit * 100.0).round() / 100.0, b.count)).collect::<Vec<_>>()
        );
        let hrs: Vec<String> = arm.outcome.log.iter().map(|l| format!("{:.3}", l.valid_hr10)).collect();
        println!("   valid HR10 per epoch: {}", hrs.join(" "));
    }
    Ok(())
}
