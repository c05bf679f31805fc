//! Run configuration as a flat `key = value` text file. Unknown keys are
//! rejected; any key can be overridden from the environment as
//! `EMVI_<KEY>` with dots replaced by underscores.

use std::path::{Path, PathBuf};

use crate::corpus::{GeneratorConfig, NegativeConfig};
use crate::encoder::{EncoderConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::tensor::DType;

pub const ENV_PREFIX: &str = "EMVI_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceStage {
    Auto,
    One,
    Two,
}

impl ForceStage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(ForceStage::Auto),
            "1" => Some(ForceStage::One),
            "2" => Some(ForceStage::Two),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ForceStage::Auto => "auto",
            ForceStage::One => "1",
            ForceStage::Two => "2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub generator: GeneratorConfig,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_tokens: usize,
    pub k_hops: usize,
    pub graph_hidden: usize,
    pub dtype: DType,

    /// Positive instances per trunk.
    pub trunk_size: usize,
    pub max_trunks: usize,
    pub stage1_min_trunks: usize,
    pub stage1_max_trunks: usize,
    pub stage2_trunks: usize,
    pub em_iters: usize,
    pub alpha: f64,
    pub beta: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub neg_ratio: usize,
    pub validation_size: usize,
    pub rank_items: usize,
    pub rank_candidates: usize,
    pub force_stage: ForceStage,
    pub checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::new(0);
        RunConfig {
            corpus: None,
            out_dir: None,
            metrics_out: None,
            generator: GeneratorConfig::default(),
            d_model: enc.d_model,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            ffn_dim: enc.ffn_dim,
            max_tokens: enc.max_tokens,
            k_hops: enc.k_hops,
            graph_hidden: enc.graph_hidden,
            dtype: enc.dtype,
            trunk_size: 2000,
            max_trunks: 20,
            stage1_min_trunks: 5,
            stage1_max_trunks: 8,
            stage2_trunks: 3,
            em_iters: 3,
            alpha: 1.0,
            beta: 0.5,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            clip_norm: 0.0,
            batch_size: 32,
            seed: 42,
            neg_ratio: 1,
            validation_size: 200,
            rank_items: 64,
            rank_candidates: 10,
            force_stage: ForceStage::Auto,
            checkpoints: true,
        }
    }
}

pub const KEYS: [&str; 37] = [
    "corpus",
    "out_dir",
    "metrics_out",
    "gen.dialogues",
    "gen.speakers",
    "gen.lambda",
    "gen.topic_inherit",
    "gen.seed",
    "d_model",
    "n_layers",
    "n_heads",
    "ffn_dim",
    "max_tokens",
    "k_hops",
    "graph_hidden",
    "dtype",
    "trunk_size",
    "max_trunks",
    "stage1_min_trunks",
    "stage1_max_trunks",
    "stage2_trunks",
    "em_iters",
    "alpha",
    "beta",
    "optimizer",
    "lr",
    "clip_norm",
    "batch_size",
    "seed",
    "neg_ratio",
    "validation_size",
    "rank_items",
    "rank_candidates",
    "force_stage",
    "checkpoints",
    "gen.topics",
    "gen.topic_size",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "corpus" => self.corpus = path(v),
            "out_dir" => self.out_dir = path(v),
            "metrics_out" => self.metrics_out = path(v),
            "gen.dialogues" => self.generator.n_dialogues = num(key, v)?,
            "gen.speakers" => self.generator.n_speakers = num(key, v)?,
            "gen.lambda" => self.generator.lambda = num(key, v)?,
            "gen.topic_inherit" => self.generator.topic_inherit = num(key, v)?,
            "gen.seed" => self.generator.seed = num(key, v)?,
            "gen.topics" => self.generator.n_topics = num(key, v)?,
            "gen.topic_size" => self.generator.topic_size = num(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "n_layers" => self.n_layers = num(key, v)?,
            "n_heads" => self.n_heads = num(key, v)?,
            "ffn_dim" => self.ffn_dim = num(key, v)?,
            "max_tokens" => self.max_tokens = num(key, v)?,
            "k_hops" => self.k_hops = num(key, v)?,
            "graph_hidden" => self.graph_hidden = num(key, v)?,
            "dtype" => {
                self.dtype = DType::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown dtype {v:?}")))?
            }
            "trunk_size" => self.trunk_size = num(key, v)?,
            "max_trunks" => self.max_trunks = num(key, v)?,
            "stage1_min_trunks" => self.stage1_min_trunks = num(key, v)?,
            "stage1_max_trunks" => self.stage1_max_trunks = num(key, v)?,
            "stage2_trunks" => self.stage2_trunks = num(key, v)?,
            "em_iters" => self.em_iters = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "optimizer" => {
                self.optimizer = OptimizerKind::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown optimizer {v:?}")))?
            }
            "lr" => self.lr = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "neg_ratio" => self.neg_ratio = num(key, v)?,
            "validation_size" => self.validation_size = num(key, v)?,
            "rank_items" => self.rank_items = num(key, v)?,
            "rank_candidates" => self.rank_candidates = num(key, v)?,
            "force_stage" => {
                self.force_stage = ForceStage::parse(v)
                    .ok_or_else(|| Error::Config(format!("force_stage must be 1, 2 or auto, got {v:?}")))?
            }
            "checkpoints" => self.checkpoints = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.generator;
        Some(match key {
            "corpus" => show(&self.corpus),
            "out_dir" => show(&self.out_dir),
            "metrics_out" => show(&self.metrics_out),
            "gen.dialogues" => g.n_dialogues.to_string(),
            "gen.speakers" => g.n_speakers.to_string(),
            "gen.lambda" => g.lambda.to_string(),
            "gen.topic_inherit" => g.topic_inherit.to_string(),
            "gen.seed" => g.seed.to_string(),
            "gen.topics" => g.n_topics.to_string(),
            "gen.topic_size" => g.topic_size.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "max_tokens" => self.max_tokens.to_string(),
            "k_hops" => self.k_hops.to_string(),
            "graph_hidden" => self.graph_hidden.to_string(),
            "dtype" => self.dtype.as_str().to_string(),
            "trunk_size" => self.trunk_size.to_string(),
            "max_trunks" => self.max_trunks.to_string(),
            "stage1_min_trunks" => self.stage1_min_trunks.to_string(),
            "stage1_max_trunks" => self.stage1_max_trunks.to_string(),
            "stage2_trunks" => self.stage2_trunks.to_string(),
            "em_iters" => self.em_iters.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "optimizer" => self.optimizer.as_str().to_string(),
            "lr" => self.lr.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "neg_ratio" => self.neg_ratio.to_string(),
            "validation_size" => self.validation_size.to_string(),
            "rank_items" => self.rank_items.to_string(),
            "rank_candidates" => self.rank_candidates.to_string(),
            "force_stage" => self.force_stage.as_str().to_string(),
            "checkpoints" => self.checkpoints.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
    }

    /// Applies overrides from `(name, value)` pairs such as
    /// `std::env::vars()`. Variables with the prefix that name no key are
    /// an error.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let names: Vec<(String, &str)> = KEYS.iter().map(|k| (Self::env_name(k), *k)).collect();
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(n, _)| n.starts_with(ENV_PREFIX))
            .collect();
        found.sort();
        for (name, value) in found {
            match names.iter().find(|(n, _)| *n == name) {
                Some((_, key)) => self.set(key, &value)?,
                None => return Err(Error::Config(format!("unknown override {name}"))),
            }
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`RunConfig::apply_text`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).unwrap_or_default()));
        }
        out
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_tokens: self.max_tokens,
            max_turns: EncoderConfig::new(vocab_size).max_turns,
            k_hops: self.k_hops,
            graph_hidden: self.graph_hidden,
            dtype: self.dtype,
        }
    }

    pub fn negatives(&self) -> NegativeConfig {
        NegativeConfig { ratio: self.neg_ratio }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder_config(16).validate()?;
        let positive = [
            ("trunk_size", self.trunk_size),
            ("max_trunks", self.max_trunks),
            ("em_iters", self.em_iters),
            ("batch_size", self.batch_size),
            ("validation_size", self.validation_size),
            ("rank_candidates", self.rank_candidates),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.stage1_min_trunks > self.stage1_max_trunks {
            return Err(Error::Config("stage1_min_trunks exceeds stage1_max_trunks".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("lr and clip_norm must be non-negative".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.beta, c.em_iters, c.k_hops), (1.0, 0.5, 3, 3));
        assert_eq!(c.validation_size, 200);
        c.validate().unwrap();
    }

    #[test]
    fn snapshot_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("lr = 0.01 # faster\n\ncorpus = data/c.jsonl\nforce_stage=2\n").unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.force_stage, ForceStage::Two);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        let e = c.apply_text("learning_rate = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 1"));
        assert_eq!(e.exit_code(), 2);
        assert!(c.apply_text("seed 4\n").is_err());
        assert!(c.apply_env([("EMVI_SEEDS".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        c.apply_env([
            ("EMVI_GEN_SEED".to_string(), "9".to_string()),
            ("EMVI_BATCH_SIZE".to_string(), "8".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ])
        .unwrap();
        assert_eq!((c.generator.seed, c.batch_size), (9, 8));
    }
}
