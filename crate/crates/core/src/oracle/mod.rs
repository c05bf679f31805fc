//! Brute-force reference implementations used by the test suites. None of
//! these share code with the quantity they check: posteriors are
//! recomputed with a plain per-candidate loop, graph priors by full
//! enumeration, ancestors by walking parent pointers, and gradients by
//! central differences.

use rand::Rng;

use crate::corpus::layout::build_layout;
use crate::corpus::{AddresseeGraph, Conversation, Vocab};
use crate::encoder::{crm_single_logit, encode, Encoder};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real, Tape};
use crate::vi::relaxed_sample;

/// Largest dialogue prefix [`enumerate_graph_prior`] accepts.
pub const MAX_ENUMERATION_TURNS: usize = 5;

/// Stage-one posterior over the addressee of turn `t`, one candidate at a
/// time.
pub fn exact_posterior<T: Real>(enc: &Encoder<T>, vocab: &Vocab, conv: &Conversation, t: usize) -> Vec<f64> {
    let layout = build_layout(vocab, conv, t, &conv.turn(t).tokens, enc.cfg.max_tokens);
    let n = t - 1;
    let mut scores = Vec::with_capacity(n);
    for j in 0..n {
        let mut w = Mat::zeros(1, n);
        w.set(0, j, T::one());
        let mut tape = Tape::new(&enc.params);
        let w = tape.constant(w);
        let e = encode(&mut tape, enc, &layout, &layout.tokens, w);
        let logit = crm_single_logit(&mut tape, enc, e.hidden);
        // logistic written out rather than shared
        let x = tape.scalar(logit);
        let p = if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let ex = x.exp();
            ex / (T::one() + ex)
        };
        scores.push(p.as_f64());
    }
    let mut total = 0.0;
    for &s in &scores {
        total += s;
    }
    if total == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    scores.iter().map(|s| s / total).collect()
}

/// Every full graph over `t` turns with its probability under a factored
/// prior. `rows[i]` is the distribution over the addressee of turn `i + 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedJoint {
    pub graphs: Vec<(AddresseeGraph, f64)>,
}

impl EnumeratedJoint {
    pub fn total(&self) -> f64 {
        self.graphs.iter().map(|(_, p)| p).sum()
    }

    /// Marginal distribution of the addressee of `turn`.
    pub fn marginal(&self, turn: usize) -> Vec<f64> {
        let mut m = vec![0.0; turn - 1];
        for (g, p) in &self.graphs {
            m[g.parent(turn).expect("non-root turn") - 1] += p;
        }
        m
    }

    pub fn probability(&self, g: &AddresseeGraph) -> f64 {
        self.graphs.iter().find(|(h, _)| h == g).map(|(_, p)| *p).unwrap_or(0.0)
    }
}

pub fn enumerate_graph_prior(rows: &[Vec<f64>], t: usize) -> Result<EnumeratedJoint> {
    if t > MAX_ENUMERATION_TURNS {
        return Err(Error::Validation(format!(
            "refusing to enumerate graphs over {t} turns (limit {MAX_ENUMERATION_TURNS})"
        )));
    }
    if rows.len() != t - 1 || rows.iter().enumerate().any(|(i, r)| r.len() != i + 1) {
        return Err(Error::Validation("prior rows do not match the turn count".into()));
    }
    let mut graphs = Vec::new();
    let mut choice = vec![0usize; t - 1];
    loop {
        let mut parents = vec![None];
        let mut p = 1.0;
        for (i, &c) in choice.iter().enumerate() {
            parents.push(Some(c + 1));
            p *= rows[i][c];
        }
        graphs.push((AddresseeGraph::from_parents(parents)?, p));
        // odometer over the row choices
        let mut i = 0;
        loop {
            if i == choice.len() {
                return Ok(EnumeratedJoint { graphs });
            }
            choice[i] += 1;
            if choice[i] <= i {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

/// KL between two factored distributions computed over the full joint.
pub fn joint_kl(q: &[Vec<f64>], p: &[Vec<f64>], t: usize, clamp: f64) -> Result<f64> {
    let clamped: Vec<Vec<f64>> = p.iter().map(|r| r.iter().map(|v| v.max(clamp)).collect()).collect();
    let jq = enumerate_graph_prior(q, t)?;
    let jp = enumerate_graph_prior(&clamped, t)?;
    let mut kl = 0.0;
    for ((g, qv), (h, pv)) in jq.graphs.iter().zip(&jp.graphs) {
        debug_assert_eq!(g, h);
        if *qv > 0.0 {
            kl += qv * (qv.ln() - pv.ln());
        }
    }
    Ok(kl)
}

/// `node` and its ancestors, nearest first, `k` entries; `None` past the
/// root.
pub fn ancestors_by_walk(graph: &AddresseeGraph, node: usize, k: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(k);
    let mut cur = Some(node);
    for _ in 0..k {
        out.push(cur);
        cur = cur.and_then(|c| graph.parent(c));
    }
    out
}

/// Central-difference gradient of `loss` at `params`, one scalar at a time.
/// `select(i, n)` limits which entries of parameter `i` (with `n` entries) are
/// probed; unprobed entries are left at zero.
pub fn finite_diff_grad<F, S>(params: &[Mat<f64>], eps: f64, mut select: S, loss: F) -> Vec<Mat<f64>>
where
    F: Fn(&[Mat<f64>]) -> f64,
    S: FnMut(usize, usize) -> Vec<usize>,
{
    let mut work = params.to_vec();
    let mut out: Vec<Mat<f64>> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    for i in 0..params.len() {
        for e in select(i, params[i].data.len()) {
            let orig = work[i].data[e];
            work[i].data[e] = orig + eps;
            let up = loss(&work);
            work[i].data[e] = orig - eps;
            let down = loss(&work);
            work[i].data[e] = orig;
            out[i].data[e] = (up - down) / (2.0 * eps);
        }
    }
    out
}

/// Argmax frequencies of relaxed samples from one row of logits. Entries
/// equal to `-inf` are masked.
pub fn gumbel_frequency_test<R: Rng>(logits: &[f64], tau: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let k = logits.len();
    let s = Mat::from_vec(1, k, logits.to_vec());
    let mut counts = vec![0usize; k];
    for _ in 0..n {
        let mut g = Mat::zeros(1, k);
        for c in 0..k {
            let u: f64 = loop {
                let u = rng.gen::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            g.set(0, c, -(-u.ln()).ln());
        }
        let z = relaxed_sample(&s, &g, tau);
        let mut best = 0;
        for c in 1..k {
            if z.get(0, c) > z.get(0, best) {
                best = c;
            }
        }
        counts[best] += 1;
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn enumeration_small_cases() {
        let j = enumerate_graph_prior(&[vec![1.0], vec![0.5, 0.5]], 3).unwrap();
        assert_eq!(j.graphs.len(), 2);
        assert!(j.graphs.iter().all(|(_, p)| *p == 0.5));
        let rows = vec![vec![1.0], vec![0.3, 0.7], vec![1.0 / 3.0; 3]];
        let j = enumerate_graph_prior(&rows, 4).unwrap();
        assert_eq!(j.graphs.len(), 6);
        assert!((j.total() - 1.0).abs() < 1e-12);
        let m = j.marginal(3);
        assert!((m[0] - 0.3).abs() < 1e-12 && (m[1] - 0.7).abs() < 1e-12);
        let big: Vec<Vec<f64>> = (1..6).map(|i| vec![1.0 / i as f64; i]).collect();
        assert!(enumerate_graph_prior(&big, 6).is_err());
    }

    #[test]
    fn walk_examples() {
        let chain = AddresseeGraph::chain(4);
        assert_eq!(ancestors_by_walk(&chain, 4, 3), vec![Some(4), Some(3), Some(2)]);
        let star = AddresseeGraph::from_parents(vec![None, Some(1), Some(1), Some(1)]).unwrap();
        assert_eq!(ancestors_by_walk(&star, 4, 3), vec![Some(4), Some(1), None]);
    }

    #[test]
    fn finite_differences_on_linear_loss() {
        let w = vec![Mat::from_f64(1, 3, &[0.5, -1.0, 2.0])];
        let x = [3.0, 1.0, -2.0];
        let g = finite_diff_grad(&w, 1e-5, |_, n| (0..n).collect(), |p| {
            p[0].data.iter().zip(&x).map(|(a, b)| a * b).sum()
        });
        for (a, b) in g[0].data.iter().zip(&x) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn gumbel_symmetric_and_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = gumbel_frequency_test(&[0.0, 0.0], 1.0, 10_000, &mut rng);
        assert!((0.48..=0.52).contains(&f[0]));
        let f = gumbel_frequency_test(&[0.0, f64::NEG_INFINITY, 0.5], 0.5, 10_000, &mut rng);
        assert_eq!(f[1], 0.0);
    }
}
