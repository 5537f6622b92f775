use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sidbias::corpus::{SyntheticConfig, TransformMode};
use sidbias::model::{TrainConfig, UndesiredConfig};

/// Which SID assignment scheme a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Skt,
    /// Undifferentiated RQ-KMeans with `L` levels.
    Rqk(usize),
    /// Separate head and tail stacks without inheritance.
    RqkSplit,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Skt => write!(f, "skt"),
            Self::Rqk(l) => write!(f, "rqk-{l}"),
            Self::RqkSplit => write!(f, "rqk-split"),
        }
    }
}

impl FromStr for TokenizerKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "skt" => Ok(Self::Skt),
            "rqk-split" => Ok(Self::RqkSplit),
            _ => {
                let Some(l) = s.strip_prefix("rqk-") else {
                    bail!("unknown tokenizer {s:?} (expected skt, rqk-L or rqk-split)");
                };
                let l: usize = l.parse().with_context(|| format!("bad level count in {s:?}"))?;
                if l == 0 {
                    bail!("rqk needs at least one level");
                }
                Ok(Self::Rqk(l))
            }
        }
    }
}

impl Serialize for TokenizerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TokenizerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub mode: TransformMode,
    /// Replacement probability; absent means the balancing value for the
    /// corpus's head share.
    #[serde(default)]
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Interaction file (CSV or JSONL); when absent a synthetic corpus is generated.
    pub input: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub transform: Option<TransformConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            synthetic: SyntheticConfig::default(),
            transform: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepConfig {
    /// Precomputed item vectors (JSONL `{"item", "vec"}`); synthesized when absent.
    pub input: Option<PathBuf>,
    /// Dimension of synthesized or loaded vectors.
    pub dim: usize,
    /// Optional PCA target dimension.
    pub reduce_to: Option<usize>,
    /// Expected norm of the per-item perturbation of synthesized vectors.
    pub noise: f64,
    pub seed: u64,
}

impl Default for RepConfig {
    fn default() -> Self {
        Self {
            input: None,
            dim: 32,
            reduce_to: None,
            noise: 0.6,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSettings {
    pub kind: TokenizerKind,
    pub l_head: usize,
    pub l_tail: usize,
    pub n_head: usize,
    pub n_tail: usize,
    pub iters: usize,
    pub dedup_capacity: usize,
    pub seed: u64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            kind: TokenizerKind::Skt,
            l_head: 3,
            l_tail: 1,
            n_head: 8,
            n_tail: 8,
            iters: 25,
            dedup_capacity: 64,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub beam_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cutoffs: vec![5, 10],
            beam_width: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiaslabConfig {
    pub gradcheck_examples: usize,
    pub gradcheck_probes: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
    pub gamma_contexts: usize,
    pub suppression_min_count: usize,
    pub seed: u64,
}

impl Default for BiaslabConfig {
    fn default() -> Self {
        Self {
            gradcheck_examples: 4,
            gradcheck_probes: 20,
            gradcheck_step: 3e-3,
            gradcheck_tolerance: 1e-4,
            gamma_contexts: 500,
            suppression_min_count: 5,
            seed: 5,
        }
    }
}

/// Everything a run needs, in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub reps: RepConfig,
    pub tokenizer: TokenizerSettings,
    pub undesired: UndesiredConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub biaslab: BiaslabConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            reps: RepConfig::default(),
            tokenizer: TokenizerSettings::default(),
            undesired: UndesiredConfig { k_a: 20, k_b: 5 },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            biaslab: BiaslabConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `--seed`: every stage seed is offset from it so one flag
    /// reseeds the whole pipeline.
    pub fn reseed(&mut self, seed: u64) {
        self.data.synthetic.seed = seed;
        self.reps.seed = seed.wrapping_add(1);
        self.tokenizer.seed = seed.wrapping_add(2);
        self.train.seed = seed.wrapping_add(3);
        self.biaslab.seed = seed.wrapping_add(4);
    }

    pub fn seeds(&self) -> serde_json::Value {
        serde_json::json!({
            "data": self.data.synthetic.seed,
            "reps": self.reps.seed,
            "tokenizer": self.tokenizer.seed,
            "train": self.train.seed,
            "biaslab": self.biaslab.seed,
        })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let t = &self.tokenizer;
        if t.n_head < 2 || t.n_tail < 2 {
            bail!("codebook sizes must be at least 2");
        }
        match t.kind {
            TokenizerKind::Skt | TokenizerKind::RqkSplit => {
                if t.l_head == 0 || t.l_tail == 0 {
                    bail!("{} needs l_head >= 1 and l_tail >= 1", t.kind);
                }
            }
            TokenizerKind::Rqk(_) => {}
        }
        if self.undesired.k_b == 0 || self.undesired.k_a < self.undesired.k_b {
            bail!("need undesired.k_a >= undesired.k_b >= 1");
        }
        if self.eval.cutoffs.is_empty() || self.eval.cutoffs.contains(&0) {
            bail!("eval cutoffs must be non-empty and positive");
        }
        if self.eval.beam_width < self.eval.cutoffs.iter().copied().max().unwrap_or(0) {
            bail!("beam width must be at least the largest cutoff");
        }
        if self.reps.dim < 2 || !(self.reps.noise >= 0.0) {
            bail!("reps.dim must be >= 2 and reps.noise >= 0");
        }
        if let Some(tr) = &self.data.transform {
            if let Some(p) = tr.p {
                if !(0.0..=1.0).contains(&p) {
                    bail!("transform probability must lie in [0, 1]");
                }
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_names_round_trip() {
        for k in [TokenizerKind::Skt, TokenizerKind::Rqk(4), TokenizerKind::RqkSplit] {
            assert_eq!(k.to_string().parse::<TokenizerKind>().unwrap(), k);
        }
        assert!("rqk-0".parse::<TokenizerKind>().is_err());
        assert!("bpe".parse::<TokenizerKind>().is_err());
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
