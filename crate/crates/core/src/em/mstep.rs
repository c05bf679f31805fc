use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::estep::Stage;
use super::posterior::PosteriorTable;
use crate::rng::stream;
use crate::corpus::layout::build_layout;
use crate::corpus::mlm::{apply_mlm_mask, special_positions};
use crate::corpus::{negatives_for, Conversation, NegativeConfig, Vocab};
use crate::encoder::{
    accumulate_batch, stage1_loss, stage2_loss, Encoder, GradSet, LossParts, Optimizer,
    Stage2Inputs, Stage2Sample,
};
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::vi::{assemble_prior, gumbel_noise};

/// A positive training turn and the addressee it is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MStepItem {
    pub dialogue: usize,
    pub turn: usize,
    pub addressee: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepHyper {
    pub stage: Stage,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub negatives: NegativeConfig,
    pub seed: u64,
    /// Distinguishes random streams of different passes.
    pub pass_id: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MStepReport {
    /// Mean loss per batch, in order.
    pub batch_losses: Vec<f64>,
    /// Instance-weighted means over the pass.
    pub mean: LossParts,
    pub n_instances: usize,
}

const STREAM_ORDER: u64 = 1;
const STREAM_UNIT: u64 = 2;

struct UnitResult<T> {
    parts: Vec<LossParts>,
    grads: Vec<GradSet<T>>,
}

fn run_unit<T: Real>(
    enc: &Encoder<T>,
    vocab: &Vocab,
    conversations: &[Conversation],
    prior_table: Option<&PosteriorTable>,
    item: &MStepItem,
    hyper: &MStepHyper,
    unit_index: u64,
) -> Result<UnitResult<T>> {
    let mut rng = stream(hyper.seed, &[STREAM_UNIT, hyper.pass_id, unit_index]);
    let conv = &conversations[item.dialogue];
    let t = item.turn;
    let max_tokens = enc.cfg.max_tokens;
    let negs = negatives_for(conversations, item.dialogue, t, &hyper.negatives, &mut rng);
    let addressee_speaker = conv.turn(item.addressee).speaker;
    let use_mlm = hyper.beta != 0.0;

    let mut responses = vec![(conv.turn(t).tokens.clone(), true)];
    responses.extend(negs.into_iter().map(|n| (n.response, false)));

    let mut parts = Vec::with_capacity(responses.len());
    let mut grads = Vec::with_capacity(responses.len());
    let mut sample = None;
    for (response, label) in &responses {
        let layout = build_layout(vocab, conv, t, response, max_tokens);
        let masked = if use_mlm {
            let special =
                special_positions(&layout, vocab, Some(item.addressee), Some(addressee_speaker));
            apply_mlm_mask(&layout, &special, &mut rng)
        } else {
            None
        };
        let (p, g) = match hyper.stage {
            Stage::One => {
                stage1_loss(enc, &layout, item.addressee, *label, masked.as_ref(), hyper.beta, true)
            }
            Stage::Two => {
                let (p, g, z) = match &sample {
                    None => {
                        let table = prior_table.expect("stage two needs a prior");
                        let prior = assemble_prior::<T>(table, item.dialogue, t)?;
                        let noise = gumbel_noise::<T, _>(t, &mut rng);
                        let inp = Stage2Inputs {
                            layout: &layout,
                            label: *label,
                            sample: Stage2Sample::Relaxed {
                                gumbel: &noise,
                                tau: hyper.tau,
                                prior: Some(&prior),
                            },
                            masked: masked.as_ref(),
                            alpha: hyper.alpha,
                            beta: hyper.beta,
                        };
                        stage2_loss(enc, &inp, true)
                    }
                    Some(z) => {
                        let inp = Stage2Inputs {
                            layout: &layout,
                            label: *label,
                            sample: Stage2Sample::Fixed(z),
                            masked: masked.as_ref(),
                            alpha: hyper.alpha,
                            beta: hyper.beta,
                        };
                        stage2_loss(enc, &inp, true)
                    }
                };
                sample.get_or_insert(z);
                (p, g)
            }
        };
        parts.push(p);
        grads.push(g);
    }
    Ok(UnitResult { parts, grads })
}

/// One pass over `items` (and their negatives) in shuffled batches.
/// `batch_size` counts instances, so each batch holds
/// `batch_size / (1 + ratio)` positives.
pub fn m_step<T: Real>(
    enc: &mut Encoder<T>,
    opt: &mut Optimizer<T>,
    vocab: &Vocab,
    conversations: &[Conversation],
    items: &[MStepItem],
    prior_table: Option<&PosteriorTable>,
    hyper: &MStepHyper,
) -> Result<MStepReport> {
    let per_unit = 1 + hyper.negatives.ratio;
    let units_per_batch = (hyper.batch_size / per_unit).max(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut stream(hyper.seed, &[STREAM_ORDER, hyper.pass_id]));
    let trainable = vec![true; enc.params.len()];

    let mut report = MStepReport::default();
    let mut initial: Option<f64> = None;
    for (batch, chunk) in order.chunks(units_per_batch).enumerate() {
        let results: Vec<Result<UnitResult<T>>> = chunk
            .par_iter()
            .map(|&i| {
                run_unit(enc, vocab, conversations, prior_table, &items[i], hyper, i as u64)
            })
            .collect();
        let mut grads = Vec::new();
        let mut batch_parts = LossParts::default();
        let mut n = 0usize;
        for r in results {
            let r = r?;
            for p in &r.parts {
                if !p.is_finite() {
                    return Err(Error::NonFiniteLoss { batch });
                }
                batch_parts.add(p);
                n += 1;
            }
            grads.extend(r.grads);
        }
        let mean = batch_parts.total / n as f64;
        let first = *initial.get_or_insert(mean);
        if mean > 10.0 * first {
            return Err(Error::Divergence {
                batch,
                loss: mean,
                initial: first,
            });
        }
        let mut g = accumulate_batch(enc, grads);
        opt.step(&mut enc.params, &mut g, &trainable);
        report.batch_losses.push(mean);
        report.mean.add(&batch_parts);
        report.n_instances += n;
    }
    if report.n_instances > 0 {
        report.mean = report.mean.scaled(1.0 / report.n_instances as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorConfig};
    use crate::em::posterior::cold_start;
    use crate::encoder::{EncoderConfig, OptimizerKind};
    use crate::tensor::Mat;

    fn setup(n: usize) -> (crate::corpus::Corpus, Encoder<f64>, Vec<MStepItem>) {
        let corpus = generate_corpus(&GeneratorConfig { n_dialogues: n, seed: 8, ..Default::default() }).unwrap();
        let mut cfg = EncoderConfig::tiny(corpus.vocab.size());
        cfg.max_tokens = 256;
        let enc = Encoder::init(&cfg, 2).unwrap();
        let convs = corpus.conversations();
        let items = (0..n)
            .flat_map(|d| (2..=convs[d].len()).map(move |t| MStepItem { dialogue: d, turn: t, addressee: t - 1 }))
            .collect();
        (corpus, enc, items)
    }

    fn hyper(stage: Stage, pass_id: u64) -> MStepHyper {
        MStepHyper {
            stage,
            alpha: if stage == Stage::Two { 1.0 } else { 0.0 },
            beta: if stage == Stage::Two { 0.5 } else { 0.0 },
            tau: 1.0,
            batch_size: 8,
            negatives: NegativeConfig { ratio: 1 },
            seed: 4,
            pass_id,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise() {
        let (corpus, mut enc, items) = setup(6);
        let convs = corpus.conversations();
        let lens: Vec<(usize, usize)> = (0..6).map(|d| (d, convs[d].len())).collect();
        let prior = cold_start(&lens);
        let before = enc.params.clone();
        for stage in [Stage::One, Stage::Two] {
            let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, None, &enc.params);
            let r = m_step(&mut enc, &mut opt, &corpus.vocab, &convs, &items, Some(&prior), &hyper(stage, 0)).unwrap();
            assert_eq!(r.n_instances, 2 * items.len());
            assert_eq!(enc.params, before);
        }
    }

    #[test]
    fn neutral_head_gives_log_two() {
        let (corpus, mut enc, items) = setup(4);
        for id in [enc.ids.crm_w, enc.ids.crm_b] {
            let p = &enc.params[id];
            enc.params[id] = Mat::zeros(p.rows, p.cols);
        }
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, None, &enc.params);
        let r = m_step(&mut enc, &mut opt, &corpus.vocab, &corpus.conversations(), &items, None, &hyper(Stage::One, 0)).unwrap();
        assert!((r.mean.crm - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(r.batch_losses.iter().all(|l| (l - std::f64::consts::LN_2).abs() < 1e-12));
    }

    #[test]
    fn a_pass_lowers_the_training_loss() {
        let (corpus, mut enc, items) = setup(30);
        let convs = corpus.conversations();
        let eval = |enc: &mut Encoder<f64>| {
            let mut frozen = Optimizer::new(OptimizerKind::Adam, 0.0, None, &enc.params);
            m_step(enc, &mut frozen, &corpus.vocab, &convs, &items, None, &hyper(Stage::One, 9)).unwrap().mean.crm
        };
        let pre = eval(&mut enc);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, None, &enc.params);
        for pass in 0..3 {
            m_step(&mut enc, &mut opt, &corpus.vocab, &convs, &items, None, &hyper(Stage::One, pass)).unwrap();
        }
        let post = eval(&mut enc);
        assert!(post < pre, "{post} !< {pre}");
    }

    #[test]
    fn same_seed_same_update() {
        let (corpus, enc, items) = setup(5);
        let convs = corpus.conversations();
        let run = || {
            let mut e = enc.clone();
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, None, &e.params);
            let r = m_step(&mut e, &mut opt, &corpus.vocab, &convs, &items, None, &hyper(Stage::One, 1)).unwrap();
            (e.params, r.batch_losses)
        };
        assert_eq!(run(), run());
    }
}
