//! Stage-two pieces: the factored prior over reply graphs assembled from
//! E-step posteriors, relaxed graph sampling, the KL term, temperature
//! annealing and the stage-switch rule.

use rand::Rng;

use crate::em::PosteriorTable;
use crate::error::{Error, Result};
use crate::tensor::{lit, Mat, Real};

/// Row `i` (0-based) holds the distribution over the addressee of turn
/// `i + 1`: posteriors for turns `2..t-1`, uniform for the response turn `t`,
/// and zeros for the root.
pub fn assemble_prior<T: Real>(table: &PosteriorTable, dialogue: usize, t: usize) -> Result<Mat<T>> {
    let mut m = Mat::zeros(t, t);
    for turn in 2..t {
        let post = table.get(dialogue, turn).ok_or_else(|| Error::MissingPosterior {
            dialogue: dialogue.to_string(),
            turn,
        })?;
        debug_assert_eq!(post.probs.len(), turn - 1);
        for (j, &p) in post.probs.iter().enumerate() {
            m.set(turn - 1, j, lit(p));
        }
    }
    let u = lit::<T>(1.0 / (t - 1) as f64);
    for j in 0..t - 1 {
        m.set(t - 1, j, u);
    }
    Ok(m)
}

/// Gumbel noise for the strictly lower triangle; zero elsewhere.
pub fn gumbel_noise<T: Real, R: Rng>(t: usize, rng: &mut R) -> Mat<T> {
    let mut g = Mat::zeros(t, t);
    for i in 1..t {
        for j in 0..i {
            g.set(i, j, lit(sample_gumbel(rng)));
        }
    }
    g
}

pub fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    // open interval keeps both logs finite
    let u: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// `softmax((S + G) / tau)` row by row; `-inf` entries get exactly zero and
/// fully masked rows stay zero.
pub fn relaxed_sample<T: Real>(logits: &Mat<T>, noise: &Mat<T>, tau: f64) -> Mat<T> {
    let mut out = Mat::zeros(logits.rows, logits.cols);
    let inv = 1.0 / tau;
    for r in 0..logits.rows {
        let vals: Vec<f64> = logits
            .row(r)
            .iter()
            .zip(noise.row(r))
            .map(|(&s, &g)| (s.as_f64() + g.as_f64()) * inv)
            .collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let e: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (c, ev) in e.iter().enumerate() {
            out.set(r, c, lit(ev / z));
        }
    }
    out
}

/// `Σ_rows KL(q_row ‖ max(prior_row, clamp))` for probability rows; rows
/// where `q` has no mass are skipped.
pub fn kl_term(q: &Mat<f64>, prior: &Mat<f64>, clamp: f64) -> f64 {
    let mut total = 0.0;
    for r in 0..q.rows {
        for (&qv, &pv) in q.row(r).iter().zip(prior.row(r)) {
            if qv > 0.0 {
                total += qv * (qv.ln() - pv.max(clamp).ln());
            }
        }
    }
    total
}

/// Temperature for the `n`-th stage-two trunk (1-based):
/// `max(0.1, 1 / (n - 0.9))`, scaled by ten so that `n = 1` gives exactly 10.
pub fn anneal_tau(n: usize) -> f64 {
    assert!(n >= 1);
    (10.0 / (10.0 * n as f64 - 9.0)).max(0.1)
}

/// True once the last three trunk accuracies have each failed to exceed
/// the best accuracy seen before them.
pub fn stage_switch(history: &[f64]) -> bool {
    let n = history.len();
    if n < 4 {
        return false;
    }
    let best = history[..n - 3].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    history[n - 3..].iter().all(|&a| a <= best)
}
