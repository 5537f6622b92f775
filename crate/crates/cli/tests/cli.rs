use std::path::{Path, PathBuf};
use std::process::Command;

use sidbias_cli::commands::{gen_data, report_cmd, run_all, train_cmd};
use sidbias_cli::config::TransformConfig;
use sidbias_cli::{Manifest, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_sidbias");

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic.num_users = 300;
    cfg.data.synthetic.num_items = 120;
    cfg.train.epochs = 2;
    cfg.biaslab.gradcheck_examples = 2;
    cfg.biaslab.gamma_contexts = 100;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn full_run_is_byte_identical_across_reruns_and_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), &small());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let st = Command::new(BIN)
            .args(["run", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(dir)
            .status()
            .unwrap();
        assert!(st.success());
    }
    let names = files(&a);
    assert_eq!(names, files(&b));
    for want in [
        "manifest.json",
        "checkpoint.json",
        "train_log.csv",
        "metrics.json",
        "biaslab.json",
        "sids.jsonl",
        "layout.json",
        "head_codebooks.json",
        "tail_codebooks.json",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    let books: sidbias::quantize::CodebookFile<f64> =
        serde_json::from_slice(&std::fs::read(a.join("head_codebooks.json")).unwrap()).unwrap();
    assert_eq!(books.header.l, books.levels.len());
    assert_eq!(books.header.l, small().tokenizer.l_head);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let m = Manifest::load(&a).unwrap().unwrap();
    assert_eq!(m.commands, ["gen-data", "tokenize", "train", "eval", "biaslab"]);
    assert!(m.verify(&a).unwrap().is_empty());
    // every artifact except the manifest itself is checksummed
    assert_eq!(m.artifacts.len(), names.len() - 1);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.train.epochs = 4;
    let whole = tmp.path().join("whole");
    train_cmd(&cfg, &whole, None).unwrap();

    let split = tmp.path().join("split");
    let mut first = cfg.clone();
    first.train.epochs = 2;
    train_cmd(&first, &split, None).unwrap();
    let ck = split.join("checkpoint.json");
    let log = train_cmd(&cfg, &split, Some(&ck)).unwrap();
    assert_eq!(log.iter().map(|l| l.epoch).collect::<Vec<_>>(), [0, 1, 2, 3]);
    for f in ["checkpoint.json", "train_log.csv", "manifest.json"] {
        assert_eq!(std::fs::read(whole.join(f)).unwrap(), std::fs::read(split.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_detects_tampering_and_config_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    gen_data(&cfg, tmp.path()).unwrap();
    let m = Manifest::load(tmp.path()).unwrap().unwrap();
    assert_eq!(m.seeds, cfg.seeds());
    std::fs::write(tmp.path().join("split.json"), "{}").unwrap();
    assert_eq!(m.verify(tmp.path()).unwrap(), ["split.json"]);

    let mut other = cfg.clone();
    other.reseed(99);
    gen_data(&other, tmp.path()).unwrap();
    let m2 = Manifest::load(tmp.path()).unwrap().unwrap();
    assert_ne!(m2.config_sha256, m.config_sha256);
    assert_eq!(m2.seeds["data"], 99);
}

#[test]
fn augmentation_reports_the_balancing_probability() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.data.transform = Some(TransformConfig {
        mode: sidbias::corpus::TransformMode::Augment,
        p: None,
    });
    let plain = gen_data(&small(), &tmp.path().join("plain")).unwrap();
    let s = gen_data(&cfg, &tmp.path().join("aug")).unwrap();
    let h = s.head_interaction_share;
    assert!((s.transform_p.unwrap() - (2.0 * h - 1.0) / (2.0 * h)).abs() < 1e-12);
    // validation and test users are unchanged, training grows
    assert_eq!(s.test_instances, plain.test_instances);
    assert!(s.train_instances > plain.train_instances);
}

#[test]
fn report_builds_cns_over_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (name, alpha) in [("mle", 0.0), ("auo", 0.1)] {
        let mut cfg = small();
        cfg.train.alpha = alpha;
        let dir = tmp.path().join(name);
        run_all(&cfg, &dir).unwrap();
        runs.push((name.to_string(), dir));
    }
    let out = tmp.path().join("report");
    let t = report_cmd(&runs, &out, 10).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!(t.rows.iter().all(|r| (0.0..=1.0).contains(&r.cns)));
    let text = std::fs::read_to_string(out.join("cns.csv")).unwrap();
    assert!(text.starts_with("model,hr_all,hr_tail,ndcg_all,ndcg_tail,mgu,arp,cns"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"bogus": true}"#).unwrap();
    let st = Command::new(BIN).args(["gen-data", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(1));
    let st = Command::new(BIN).args(["tokenize", "--tokenizer", "bpe"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    // eval without a checkpoint is an error, not a panic
    let cfg_path = write_config(tmp.path(), &small());
    let out = Command::new(BIN)
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(tmp.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"));
}

#[test]
fn failing_gradient_check_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    // a tolerance nothing can meet
    cfg.biaslab.gradcheck_tolerance = 0.0;
    let dir = tmp.path().join("run");
    let cfg_path = write_config(tmp.path(), &cfg);
    let st = Command::new(BIN)
        .args(["run", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&dir)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    assert!(dir.join("biaslab.json").exists());
}
