use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sidbias_cli::commands::{biaslab_cmd, eval_cmd, gen_data, report_cmd, run_all, tokenize_cmd, train_cmd};
use sidbias_cli::{RunConfig, TokenizerKind};

/// Exit code when a command ran but a verification it performs failed.
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "sidbias", version, about = "Popularity-bias laboratory for semantic-ID generative recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults apply to absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reseeds every stage from one value.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the tokenizer (skt, rqk-L, rqk-split).
    #[arg(long)]
    tokenizer: Option<TokenizerKind>,
    /// Overrides the unlikelihood weight.
    #[arg(long)]
    alpha: Option<f64>,
}

impl Common {
    fn resolve(&self) -> anyhow::Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.reseed(s);
        }
        if let Some(k) = self.tokenizer {
            cfg.tokenizer.kind = k;
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the corpus and item vectors.
    GenData(Common),
    /// Assign semantic IDs and build the decoding trie.
    Tokenize(Common),
    /// Train the recommender; `--checkpoint` resumes a run.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient checks and bias diagnostics; exits 3 when a gradient check fails.
    Biaslab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// All stages in order.
    Run(Common),
    /// CNS table over evaluated runs, each given as NAME=DIR.
    Report {
        #[arg(long = "run", required = true, value_parser = parse_run)]
        runs: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

fn parse_run(s: &str) -> anyhow::Result<(String, PathBuf)> {
    let Some((name, dir)) = s.split_once('=') else {
        bail!("expected NAME=DIR, got {s:?}");
    };
    if name.is_empty() {
        bail!("empty run name in {s:?}");
    }
    Ok((name.to_string(), PathBuf::from(dir)))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = c.resolve()?;
            let s = gen_data(&cfg, &out)?;
            println!(
                "{} users, {} items, {} interactions, head share {:.3}",
                s.users, s.items, s.interactions, s.head_interaction_share
            );
        }
        Command::Tokenize(c) => {
            let (cfg, out) = c.resolve()?;
            let s = tokenize_cmd(&cfg, &out)?;
            println!(
                "{} trie nodes, {} leaves, {} collisions, tail competition {:?}",
                s.nodes, s.leaves, s.collisions, s.tail_competition_histogram
            );
        }
        Command::Train { common, checkpoint } => {
            let (cfg, out) = common.resolve()?;
            let log = train_cmd(&cfg, &out, checkpoint.as_deref())?;
            if let Some(last) = log.last() {
                println!("epoch {}: loss {:.5} valid HR@10 {:.4}", last.epoch, last.total, last.valid_hr10);
            }
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = common.resolve()?;
            let r = eval_cmd(&cfg, &out, checkpoint.as_deref())?;
            for c in &r.cutoffs {
                println!("HR@{} {:.4} tail {:?} ARP {:.2} MGU {:.4}", c.k, c.hr_all, c.hr_tail, c.arp, c.mgu);
            }
        }
        Command::Biaslab { common, checkpoint } => {
            let (cfg, out) = common.resolve()?;
            let r = biaslab_cmd(&cfg, &out, checkpoint.as_deref())?;
            let worst = r.gradcheck.iter().map(|g| g.report.max_rel_error).fold(0.0, f64::max);
            println!(
                "gradcheck {} (max rel error {worst:.2e}), median gamma {:?}, suppression slope {:?}",
                if r.gradcheck_pass { "pass" } else { "FAIL" },
                r.gamma.median,
                r.suppression.slope
            );
            if !r.gradcheck_pass {
                for g in r.gradcheck.iter().filter(|g| !g.report.pass) {
                    eprintln!("alpha {} example {}: {:?}", g.alpha, g.example, g.report.failure);
                }
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
        Command::Run(c) => {
            let (cfg, out) = c.resolve()?;
            let (m, lab) = run_all(&cfg, &out).context("pipeline failed")?;
            if let Some(c) = m.at(10) {
                println!("HR@10 {:.4} tail {:?} ARP {:.2}", c.hr_all, c.hr_tail, c.arp);
            }
            if !lab.gradcheck_pass {
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
        Command::Report { runs, out, k } => {
            let t = report_cmd(&runs, &out, k)?;
            for r in &t.rows {
                println!("{}: CNS@{} {:.4}", r.model, t.k, r.cns);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
