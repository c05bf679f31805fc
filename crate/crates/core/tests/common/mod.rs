#![allow(dead_code)]

pub mod oracles;
pub mod protocol;

use emvi::corpus::layout::build_layout;
use emvi::corpus::mlm::{apply_mlm_mask, special_positions};
use emvi::corpus::{generate_corpus, Corpus, GeneratorConfig};
use emvi::em::{Posterior, PosteriorTable};
use emvi::encoder::{stage1_loss, stage2_loss, Encoder, EncoderConfig, Group, Stage2Inputs, Stage2Sample};
use emvi::oracle::finite_diff_grad;
use emvi::tensor::Mat;
use emvi::vi::{assemble_prior, gumbel_noise};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub const GROUPS: [Group; 6] = [Group::Body, Group::Addressee, Group::Crm, Group::Discourse, Group::Mlm, Group::Graph];

pub fn small_corpus() -> Corpus {
    let cfg = GeneratorConfig {
        n_dialogues: 4,
        n_speakers: 4,
        n_topics: 4,
        topic_size: 4,
        min_turns: 5,
        max_turns: 6,
        seed: 3,
        ..GeneratorConfig::default()
    };
    generate_corpus(&cfg).unwrap()
}

/// Moves zero-initialized biases and unit gains off their defaults so every
/// path carries gradient.
pub fn perturbed(enc: &Encoder<f64>, seed: u64) -> Encoder<f64> {
    let mut e = enc.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut e.params {
        for v in &mut p.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    e
}

/// Relative error `‖bp − fd‖ / max(‖bp‖, ‖fd‖)` per parameter group.
/// Groups in `untouched` must have no backprop gradient and vanishing
/// finite differences.
pub fn group_errors(
    enc: &Encoder<f64>,
    bp: &[Option<Mat<f64>>],
    fd: &[Mat<f64>],
    untouched: &[Group],
) -> Result<Vec<(Group, f64)>, String> {
    let mut out = Vec::new();
    for group in GROUPS {
        let idx = enc.group_indices(group);
        let (mut diff, mut a2, mut b2) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let zeros = Mat::zeros(fd[i].rows, fd[i].cols);
            let g = bp[i].as_ref().unwrap_or(&zeros);
            for (x, y) in g.data.iter().zip(&fd[i].data) {
                diff += (x - y) * (x - y);
                a2 += x * x;
                b2 += y * y;
            }
        }
        if untouched.contains(&group) {
            if idx.iter().any(|&i| bp[i].is_some()) || b2 != 0.0 {
                return Err(format!("{group:?} should carry no gradient"));
            }
            continue;
        }
        if a2 == 0.0 {
            return Err(format!("{group:?} has no gradient"));
        }
        out.push((group, diff.sqrt() / a2.sqrt().max(b2.sqrt())));
    }
    Ok(out)
}

/// Stage-one loss with the masked-LM term, for both labels.
pub fn stage_one_errors() -> Result<Vec<(Group, f64)>, String> {
    let corpus = small_corpus();
    let vocab = corpus.vocab.clone();
    let conv = corpus.dialogues[0].conversation().clone();
    let base: Encoder<f64> = Encoder::init(&EncoderConfig::tiny(vocab.size()), 9).unwrap();
    let enc = perturbed(&base, 1);
    let t = 4;
    let layout = build_layout(&vocab, &conv, t, &conv.turn(t).tokens, enc.cfg.max_tokens);
    let addressee = 2;
    let special = special_positions(&layout, &vocab, Some(addressee), Some(conv.turn(addressee).speaker));
    let masked = apply_mlm_mask(&layout, &special, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut all = Vec::new();
    for label in [true, false] {
        let (_, bp) = stage1_loss(&enc, &layout, addressee, label, Some(&masked), 0.5, true);
        let fd = finite_diff_grad(&enc.params, EPS, |_, n| (0..n).collect(), |p| {
            let mut e = enc.clone();
            e.params = p.to_vec();
            stage1_loss(&e, &layout, addressee, label, Some(&masked), 0.5, false).0.total
        });
        all.extend(group_errors(&enc, &bp, &fd, &[Group::Discourse, Group::Graph])?);
    }
    Ok(all)
}

/// Stage-two loss through a relaxed sample with the Gumbel noise held fixed.
pub fn stage_two_errors() -> Result<Vec<(Group, f64)>, String> {
    let corpus = small_corpus();
    let vocab = corpus.vocab.clone();
    let conv = corpus.dialogues[1].conversation().clone();
    let base: Encoder<f64> = Encoder::init(&EncoderConfig::tiny(vocab.size()), 4).unwrap();
    let enc = perturbed(&base, 6);
    let t = 5;
    let layout = build_layout(&vocab, &conv, t, &conv.turn(t).tokens, enc.cfg.max_tokens);
    let mut table = PosteriorTable::default();
    for i in 2..t {
        let scores: Vec<f64> = (0..i - 1).map(|j| 0.2 + 0.3 * j as f64).collect();
        table.insert(0, i, Posterior::from_scores(scores));
    }
    let prior: Mat<f64> = assemble_prior(&table, 0, t).unwrap();
    let noise: Mat<f64> = gumbel_noise(t, &mut ChaCha8Rng::seed_from_u64(8));
    let special = special_positions(&layout, &vocab, Some(3), Some(conv.turn(3).speaker));
    let masked = apply_mlm_mask(&layout, &special, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut all = Vec::new();
    for (tau, label) in [(1.0, true), (0.5, false)] {
        let inputs = Stage2Inputs {
            layout: &layout,
            label,
            sample: Stage2Sample::Relaxed { gumbel: &noise, tau, prior: Some(&prior) },
            masked: Some(&masked),
            alpha: 1.0,
            beta: 0.5,
        };
        let (parts, bp, _) = stage2_loss(&enc, &inputs, true);
        if !(parts.kl > 0.0 && parts.mlm > 0.0) {
            return Err("stage-two KL and MLM terms should both be active".into());
        }
        let fd = finite_diff_grad(&enc.params, EPS, |_, n| (0..n).collect(), |p| {
            let mut e = enc.clone();
            e.params = p.to_vec();
            stage2_loss(&e, &inputs, false).0.total
        });
        all.extend(group_errors(&enc, &bp, &fd, &[Group::Crm])?);
    }
    Ok(all)
}

pub fn worst(errors: &[(Group, f64)]) -> f64 {
    errors.iter().map(|e| e.1).fold(0.0, f64::max)
}
