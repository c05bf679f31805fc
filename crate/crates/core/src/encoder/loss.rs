use super::forward::{
    crm_discourse_logit, crm_single_logit, encode, graph_logits, mlm_logits, one_hot_weights,
    unmarked_weights,
};
use super::Encoder;
use crate::corpus::layout::Layout;
use crate::corpus::mlm::MaskedLayout;
use crate::tensor::{lit, Mat, Real, Tape, Var};

/// Prior entries are clamped here before the log in the KL term.
pub const PRIOR_CLAMP: f64 = 1e-8;

/// One gradient slot per parameter; `None` where the loss does not reach.
pub type GradSet<T> = Vec<Option<Mat<T>>>;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub crm: f64,
    pub kl: f64,
    pub mlm: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    pub fn add(&mut self, other: &LossParts) {
        self.total += other.total;
        self.crm += other.crm;
        self.kl += other.kl;
        self.mlm += other.mlm;
    }

    pub fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            total: self.total * s,
            crm: self.crm * s,
            kl: self.kl * s,
            mlm: self.mlm * s,
        }
    }
}

fn masked_term<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &Encoder<T>,
    hidden: Var,
    masked: Option<&MaskedLayout>,
) -> Option<Var> {
    let m = masked.filter(|m| !m.targets.is_empty())?;
    let positions: Vec<usize> = m.targets.iter().map(|t| t.0).collect();
    let targets: Vec<usize> = m.targets.iter().map(|t| t.1 as usize).collect();
    let logits = mlm_logits(tape, enc, hidden, &positions);
    Some(tape.cross_entropy(logits, &targets))
}

/// `L_CRM + beta * L_MLM` with hard addressee `addressee` (1-based).
/// With `masked` the encoder sees the masked tokens and the MLM term is
/// added; otherwise `beta` has no effect.
pub fn stage1_loss<T: Real>(
    enc: &Encoder<T>,
    layout: &Layout,
    addressee: usize,
    label: bool,
    masked: Option<&MaskedLayout>,
    beta: f64,
    want_grads: bool,
) -> (LossParts, GradSet<T>) {
    let n_ctx = layout.n_rows() - 1;
    let mut tape = Tape::new(&enc.params);
    let w = tape.constant(one_hot_weights(n_ctx, addressee - 1));
    let tokens = masked.map(|m| &m.tokens[..]).unwrap_or(&layout.tokens);
    let e = encode(&mut tape, enc, layout, tokens, w);
    let logit = crm_single_logit(&mut tape, enc, e.hidden);
    let crm = tape.bce_with_logits(logit, if label { T::one() } else { T::zero() });
    let mut terms = vec![(crm, T::one())];
    let mut parts = LossParts {
        crm: tape.scalar(crm).as_f64(),
        ..LossParts::default()
    };
    if beta != 0.0 {
        if let Some(mlm) = masked_term(&mut tape, enc, e.hidden, masked) {
            parts.mlm = tape.scalar(mlm).as_f64();
            terms.push((mlm, lit(beta)));
        }
    }
    let loss = tape.weighted_sum(&terms);
    parts.total = tape.scalar(loss).as_f64();
    let grads = if want_grads && parts.is_finite() {
        tape.backward(loss)
    } else {
        Vec::new()
    };
    (parts, grads)
}

/// Graph used in the reconstruction term of a stage-two instance.
pub enum Stage2Sample<'a, T> {
    /// Relaxed sample `softmax((S + M + G) / tau)` from the graph head with
    /// the given Gumbel noise; `prior` enables the KL term.
    Relaxed {
        gumbel: &'a Mat<T>,
        tau: f64,
        prior: Option<&'a Mat<T>>,
    },
    /// A graph treated as a constant (e.g. reused from the paired positive).
    Fixed(&'a Mat<T>),
}

pub struct Stage2Inputs<'a, T> {
    pub layout: &'a Layout,
    pub label: bool,
    pub sample: Stage2Sample<'a, T>,
    pub masked: Option<&'a MaskedLayout>,
    pub alpha: f64,
    pub beta: f64,
}

/// `L_CRM + alpha * L_KL + beta * L_MLM` for one instance. The graph head
/// reads an unmarked, unmasked encoding; the matching head reads a second
/// encoding whose addressee marking is the response row of the sampled
/// graph. Returns the sampled graph alongside the loss.
pub fn stage2_loss<T: Real>(
    enc: &Encoder<T>,
    inp: &Stage2Inputs<'_, T>,
    want_grads: bool,
) -> (LossParts, GradSet<T>, Mat<T>) {
    let layout = inp.layout;
    let t = layout.n_rows();
    let mut tape = Tape::new(&enc.params);
    let mut parts = LossParts::default();
    let mut terms = Vec::new();

    let z = match &inp.sample {
        Stage2Sample::Fixed(z) => tape.constant((*z).clone()),
        Stage2Sample::Relaxed { gumbel, tau, prior } => {
            let w0 = tape.constant(unmarked_weights(t - 1));
            let e0 = encode(&mut tape, enc, layout, &layout.tokens, w0);
            let s = graph_logits(&mut tape, enc, e0.rows);
            if let Some(prior) = prior {
                if inp.alpha != 0.0 {
                    let kl = tape.kl_rows(s, prior, lit(PRIOR_CLAMP));
                    parts.kl = tape.scalar(kl).as_f64();
                    terms.push((kl, lit(inp.alpha)));
                }
            }
            let g = tape.constant((*gumbel).clone());
            let noisy = tape.add(s, g);
            let scaled = tape.scale(noisy, lit(1.0 / tau));
            tape.softmax_rows(scaled)
        }
    };
    let weights = tape.slice(z, t - 1, t, 0, t - 1);
    let tokens = inp.masked.map(|m| &m.tokens[..]).unwrap_or(&layout.tokens);
    let e = encode(&mut tape, enc, layout, tokens, weights);
    let logit = crm_discourse_logit(&mut tape, enc, e.rows, z);
    let crm = tape.bce_with_logits(logit, if inp.label { T::one() } else { T::zero() });
    parts.crm = tape.scalar(crm).as_f64();
    terms.push((crm, T::one()));
    if inp.beta != 0.0 {
        if let Some(mlm) = masked_term(&mut tape, enc, e.hidden, inp.masked) {
            parts.mlm = tape.scalar(mlm).as_f64();
            terms.push((mlm, lit(inp.beta)));
        }
    }
    let loss = tape.weighted_sum(&terms);
    parts.total = tape.scalar(loss).as_f64();
    let sample = tape.value(z).clone();
    let grads = if want_grads && parts.is_finite() {
        tape.backward(loss)
    } else {
        Vec::new()
    };
    (parts, grads, sample)
}

/// Sums per-example gradients in order and divides by their count.
pub fn accumulate_batch<T: Real>(enc: &Encoder<T>, sets: Vec<GradSet<T>>) -> Vec<Mat<T>> {
    let mut out: Vec<Mat<T>> = enc.params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    let n = sets.len().max(1);
    for set in sets {
        for (slot, g) in out.iter_mut().zip(set) {
            if let Some(g) = g {
                slot.add_assign(&g);
            }
        }
    }
    let s = lit::<T>(1.0 / n as f64);
    out.iter_mut().for_each(|g| g.scale_assign(s));
    out
}
