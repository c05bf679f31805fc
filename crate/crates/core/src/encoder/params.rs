use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::tensor::{Mat, Real};

/// Which part of the model a parameter belongs to. Re-initialization after
/// an E-step touches only [`Group::Addressee`], [`Group::Crm`] and
/// [`Group::Discourse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Body,
    Addressee,
    Crm,
    Discourse,
    Mlm,
    Graph,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Body,
        Group::Addressee,
        Group::Crm,
        Group::Discourse,
        Group::Mlm,
        Group::Graph,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Body => "body",
            Group::Addressee => "addressee",
            Group::Crm => "crm",
            Group::Discourse => "discourse",
            Group::Mlm => "mlm",
            Group::Graph => "graph",
        }
    }

    /// Reset by `reinit_heads`.
    pub fn is_head(self) -> bool {
        matches!(self, Group::Addressee | Group::Crm | Group::Discourse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: Group,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Indices of every parameter in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIds {
    pub tok: usize,
    pub pos: usize,
    pub addr: usize,
    pub layers: Vec<LayerIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub crm_w: usize,
    pub crm_b: usize,
    pub disc_w: usize,
    pub disc_b: usize,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub g_w1: usize,
    pub g_b1: usize,
    pub g_w2: usize,
    pub g_b2: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, group: Group, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            group,
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn weight(&mut self, name: String, group: Group, rows: usize, cols: usize) -> usize {
        self.add(name, group, rows, cols, Init::Uniform { fan_in: rows })
    }

    fn bias(&mut self, name: String, group: Group, cols: usize) -> usize {
        self.add(name, group, 1, cols, Init::Zeros)
    }
}

/// Parameter layout for a config: names, shapes, groups and init rules.
pub fn layout(cfg: &EncoderConfig) -> (Vec<ParamSpec>, ParamIds) {
    let d = cfg.d_model;
    let mut b = Builder { specs: Vec::new() };
    let emb = Init::Uniform { fan_in: d };
    let tok = b.add("body.tok_emb".into(), Group::Body, cfg.vocab_size, d, emb);
    let pos = b.add("body.pos_emb".into(), Group::Body, cfg.max_tokens, d, emb);
    let addr = b.add("addressee.emb".into(), Group::Addressee, 2, d, emb);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("body.layer{l}.{s}");
        layers.push(LayerIds {
            ln1_g: b.add(p("ln1.gamma"), Group::Body, 1, d, Init::Ones),
            ln1_b: b.bias(p("ln1.beta"), Group::Body, d),
            w_qkv: b.weight(p("attn.w_qkv"), Group::Body, d, 3 * d),
            b_qkv: b.bias(p("attn.b_qkv"), Group::Body, 3 * d),
            w_o: b.weight(p("attn.w_o"), Group::Body, d, d),
            b_o: b.bias(p("attn.b_o"), Group::Body, d),
            ln2_g: b.add(p("ln2.gamma"), Group::Body, 1, d, Init::Ones),
            ln2_b: b.bias(p("ln2.beta"), Group::Body, d),
            w_1: b.weight(p("ffn.w_1"), Group::Body, d, cfg.ffn_dim),
            b_1: b.bias(p("ffn.b_1"), Group::Body, cfg.ffn_dim),
            w_2: b.weight(p("ffn.w_2"), Group::Body, cfg.ffn_dim, d),
            b_2: b.bias(p("ffn.b_2"), Group::Body, d),
        });
    }
    let lnf_g = b.add("body.ln_f.gamma".into(), Group::Body, 1, d, Init::Ones);
    let lnf_b = b.bias("body.ln_f.beta".into(), Group::Body, d);
    let crm_w = b.weight("crm.w".into(), Group::Crm, d, 1);
    let crm_b = b.bias("crm.b".into(), Group::Crm, 1);
    let disc_w = b.weight("discourse.w".into(), Group::Discourse, cfg.k_hops * d, 1);
    let disc_b = b.bias("discourse.b".into(), Group::Discourse, 1);
    let mlm_w = b.weight("mlm.w".into(), Group::Mlm, d, cfg.vocab_size);
    let mlm_b = b.bias("mlm.b".into(), Group::Mlm, cfg.vocab_size);
    let g_w1 = b.weight("graph.w_1".into(), Group::Graph, 3 * d, cfg.graph_hidden);
    let g_b1 = b.bias("graph.b_1".into(), Group::Graph, cfg.graph_hidden);
    let g_w2 = b.weight("graph.w_2".into(), Group::Graph, cfg.graph_hidden, 1);
    let g_b2 = b.bias("graph.b_2".into(), Group::Graph, 1);
    let ids = ParamIds {
        tok,
        pos,
        addr,
        layers,
        lnf_g,
        lnf_b,
        crm_w,
        crm_b,
        disc_w,
        disc_b,
        mlm_w,
        mlm_b,
        g_w1,
        g_b1,
        g_w2,
        g_b2,
    };
    (b.specs, ids)
}

/// Draws one parameter. Values are generated in f64 from a stream keyed by
/// `(seed, index)`, so f32 and f64 models start from the same point.
pub(crate) fn draw<T: Real>(spec: &ParamSpec, seed: u64, index: usize) -> Mat<T> {
    let n = spec.rows * spec.cols;
    let data = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Uniform { fan_in } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                .collect()
        }
    };
    Mat::from_vec(spec.rows, spec.cols, data)
}
