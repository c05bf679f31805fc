//! A small pre-LN transformer with addressee embeddings and four heads:
//! single-turn matching, discourse-aware matching over k-hop ancestors,
//! masked-token prediction, and pairwise reply-link scoring.

mod checkpoint;
mod forward;
mod loss;
mod optim;
mod params;

pub use checkpoint::{
    config_hash, load_checkpoint, read_manifest, save_checkpoint, Manifest, ManifestEntry,
    MANIFEST_FILE, PARAMS_FILE,
};
pub use forward::{
    crm_discourse_logit, crm_single_logit, encode, graph_logits, khop_positions, mlm_logits,
    one_hot_weights, pooling_matrix, unmarked_weights, utterance_rows, Encoded,
};
pub use loss::{
    accumulate_batch, stage1_loss, stage2_loss, GradSet, LossParts, Stage2Inputs, Stage2Sample,
    PRIOR_CLAMP,
};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Group, LayerIds, ParamIds, ParamSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Mat, Real};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub max_turns: usize,
    pub k_hops: usize,
    pub graph_hidden: usize,
    pub dtype: DType,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            vocab_size,
            max_tokens: 256,
            max_turns: 12,
            k_hops: 3,
            graph_hidden: 64,
            dtype: DType::F32,
        }
    }

    /// Small enough for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 12,
            vocab_size,
            max_tokens: 64,
            max_turns: 8,
            k_hops: 3,
            graph_hidden: 6,
            dtype: DType::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k_hops == 0 {
            return Err(Error::Config("k_hops must be at least 1".into()));
        }
        if self.max_tokens < 8 || self.vocab_size < 5 || self.ffn_dim == 0 || self.graph_hidden == 0 {
            return Err(Error::Config("encoder dimensions are too small".into()));
        }
        Ok(())
    }
}

/// All trainable parameters, stored flat and addressed through [`ParamIds`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub specs: Vec<ParamSpec>,
    pub ids: ParamIds,
    pub params: Vec<Mat<T>>,
    pub seed: u64,
}

impl<T: Real> Encoder<T> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, ids) = params::layout(cfg);
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, s)| params::draw(s, seed, i))
            .collect();
        Ok(Encoder {
            cfg: cfg.clone(),
            specs,
            ids,
            params,
            seed,
        })
    }

    /// Redraws the addressee embedding and both matching heads from `seed`.
    /// Returns the indices that changed so optimizer state can be reset.
    pub fn reinit_heads(&mut self, seed: u64) -> Vec<usize> {
        let mut touched = Vec::new();
        for (i, spec) in self.specs.iter().enumerate() {
            if spec.group.is_head() {
                self.params[i] = params::draw(spec, seed, i);
                touched.push(i);
            }
        }
        touched
    }

    pub fn group_indices(&self, group: Group) -> Vec<usize> {
        (0..self.specs.len()).filter(|&i| self.specs[i].group == group).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = EncoderConfig::new(100);
        let a: Encoder<f32> = Encoder::init(&cfg, 3).unwrap();
        let b: Encoder<f32> = Encoder::init(&cfg, 3).unwrap();
        let c: Encoder<f32> = Encoder::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        assert_eq!(a.params[a.ids.addr].shape(), (2, 64));
        assert_eq!(a.params[a.ids.disc_w].shape(), (3 * 64, 1));
        let bound = 1.0 / 8.0;
        assert!(a.params[a.ids.tok].data.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn f32_and_f64_share_initial_values() {
        let cfg = EncoderConfig::tiny(30);
        let a: Encoder<f32> = Encoder::init(&cfg, 9).unwrap();
        let b: Encoder<f64> = Encoder::init(&cfg, 9).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            for (u, v) in x.data.iter().zip(&y.data) {
                assert_eq!(*u, *v as f32);
            }
        }
    }

    #[test]
    fn reinit_touches_only_heads() {
        let cfg = EncoderConfig::tiny(30);
        let mut e: Encoder<f64> = Encoder::init(&cfg, 1).unwrap();
        let before = e.clone();
        let touched = e.reinit_heads(77);
        for (i, spec) in e.specs.iter().enumerate() {
            let same = e.params[i].data.iter().zip(&before.params[i].data).all(|(a, b)| a.to_bits() == b.to_bits());
            match spec.group {
                Group::Body | Group::Mlm | Group::Graph => assert!(same, "{} changed", spec.name),
                _ => assert!(touched.contains(&i)),
            }
        }
        assert_ne!(e.params[e.ids.addr], before.params[e.ids.addr]);
        assert_ne!(e.params[e.ids.crm_w], before.params[e.ids.crm_w]);
    }

    #[test]
    fn bad_heads_rejected() {
        let mut cfg = EncoderConfig::new(100);
        cfg.n_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
