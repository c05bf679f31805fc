//! Addressee accuracy, zero-shot reply-graph F1, response ranking, and the
//! reply-distance histogram, plus CSV export of the per-iteration timeline.

mod export;
mod snapshot;

pub use export::{export_metrics, parse_metrics, MetricsRow, CSV_COLUMNS};
pub use snapshot::{evaluate, rank_scores, MetricsSnapshot, RankConfig};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::layout::build_layout;
use crate::corpus::{AddresseeGraph, Conversation, Dialogue, Vocab};
use crate::encoder::{encode, graph_logits, unmarked_weights, Encoder};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape};

/// Fraction of `(predicted, gold)` pairs that agree.
pub fn accuracy(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("accuracy over an empty set".into()));
    }
    Ok(pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64)
}

/// Accuracy on all pairs and on those flagged in `used`.
pub fn addressee_accuracy(pairs: &[(usize, usize)], used: &[bool]) -> Result<(f64, f64)> {
    let all = accuracy(pairs)?;
    let sub: Vec<(usize, usize)> = pairs
        .iter()
        .zip(used)
        .filter(|(_, &u)| u)
        .map(|(p, _)| *p)
        .collect();
    Ok((all, accuracy(&sub)?))
}

/// Normalized histogram of reply distances; entry `d - 1` is distance `d`.
pub fn distance_histogram(distances: &[usize], max_distance: usize) -> Vec<f64> {
    let mut h = vec![0.0; max_distance];
    if distances.is_empty() {
        return h;
    }
    for &d in distances {
        h[d.min(max_distance) - 1] += 1.0;
    }
    let n = distances.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    0.5 * (0..n).map(|i| (at(a, i) - at(b, i)).abs()).sum::<f64>()
}

/// Micro-F1 of predicted against gold reply links.
pub fn link_f1<E: std::hash::Hash + Eq>(pred: &[E], gold: &[E]) -> f64 {
    use std::collections::HashSet;
    let g: HashSet<_> = gold.iter().collect();
    let tp = pred.iter().filter(|e| g.contains(e)).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / pred.len() as f64;
    let r = tp / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Reply graph predicted by the graph head from an unmarked encoding of
/// the whole dialogue (last turn as the response).
pub fn predict_graph<T: Real>(enc: &Encoder<T>, vocab: &Vocab, conv: &Conversation) -> AddresseeGraph {
    let t = conv.len();
    let layout = build_layout(vocab, conv, t, &conv.turn(t).tokens, enc.cfg.max_tokens);
    let mut tape = Tape::new(&enc.params);
    let w = tape.constant(unmarked_weights(t - 1));
    let e = encode(&mut tape, enc, &layout, &layout.tokens, w);
    let s = graph_logits(&mut tape, enc, e.rows);
    let s = tape.value(s);
    let mut parents = vec![None];
    for i in 1..t {
        let row = &s.row(i)[..i];
        let mut best = 0;
        for j in 1..i {
            if row[j] > row[best] {
                best = j;
            }
        }
        parents.push(Some(best + 1));
    }
    AddresseeGraph::from_parents(parents).expect("argmax graph is well formed")
}

/// Zero-shot link F1 over dialogues with gold graphs. Each row has exactly
/// one predicted and one gold link, so this equals per-row accuracy.
pub fn zero_shot_graph_f1<T: Real>(enc: &Encoder<T>, vocab: &Vocab, dialogues: &[&Dialogue]) -> Result<f64> {
    let per: Vec<(Vec<(usize, usize)>, Vec<(usize, usize)>)> = dialogues
        .par_iter()
        .filter_map(|d| {
            let gold = d.gold_graph()?;
            let pred = predict_graph(enc, vocab, d.conversation());
            Some((pred.edges(), gold.edges()))
        })
        .collect();
    if per.is_empty() {
        return Err(Error::Data("no dialogues with gold graphs".into()));
    }
    // edges are keyed by dialogue so links never match across dialogues
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (k, (p, g)) in per.into_iter().enumerate() {
        pred.extend(p.into_iter().map(|(i, j)| (k, i, j)));
        gold.extend(g.into_iter().map(|(i, j)| (k, i, j)));
    }
    Ok(link_f1(&pred, &gold))
}

/// A positive turn and its ranking candidates; candidate 0 is the true
/// response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankItem {
    pub dialogue: usize,
    pub turn: usize,
    pub candidates: Vec<Vec<u32>>,
}

/// Draws up to `n_items` positives from `dialogues`, each with
/// `n_candidates - 1` negatives, half of them from later turns of the same
/// dialogue where enough exist.
pub fn build_ranking_pool<R: Rng>(
    conversations: &[Conversation],
    dialogues: &[usize],
    n_items: usize,
    n_candidates: usize,
    rng: &mut R,
) -> Vec<RankItem> {
    let mut turns: Vec<(usize, usize)> = dialogues
        .iter()
        .flat_map(|&d| (2..=conversations[d].len()).map(move |t| (d, t)))
        .collect();
    turns.shuffle(rng);
    turns.truncate(n_items);
    turns.sort_unstable();
    let n_neg = n_candidates - 1;
    turns
        .into_iter()
        .map(|(d, t)| {
            let conv = &conversations[d];
            let mut candidates = vec![conv.turn(t).tokens.clone()];
            let mut later: Vec<usize> = (t + 1..=conv.len()).collect();
            later.shuffle(rng);
            let n_hard = later.len().min(n_neg / 2);
            for &j in &later[..n_hard] {
                candidates.push(conv.turn(j).tokens.clone());
            }
            while candidates.len() < n_candidates {
                let other = loop {
                    let o = dialogues[rng.gen_range(0..dialogues.len())];
                    if o != d || dialogues.len() == 1 {
                        break o;
                    }
                };
                let oc = &conversations[other];
                candidates.push(oc.turn(rng.gen_range(1..=oc.len())).tokens.clone());
            }
            RankItem {
                dialogue: d,
                turn: t,
                candidates,
            }
        })
        .collect()
}

/// Mean reciprocal rank and recall@1 of candidate 0 in each score list.
/// Tied scores share the mean of the ranks they span.
pub fn crm_ranking(scores: &[Vec<f64>]) -> (f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let (mut rr, mut r1) = (0.0, 0.0);
    for s in scores {
        let pos = s[0];
        let above = s[1..].iter().filter(|&&v| v > pos).count() as f64;
        let ties = s[1..].iter().filter(|&&v| v == pos).count() as f64;
        let rank = 1.0 + above + ties / 2.0;
        rr += 1.0 / rank;
        if above == 0.0 && ties == 0.0 {
            r1 += 1.0;
        }
    }
    let n = scores.len() as f64;
    (rr / n, r1 / n)
}

/// Expected MRR when the true response lands at a uniformly random rank.
pub fn chance_mrr(n_candidates: usize) -> f64 {
    (1..=n_candidates).map(|k| 1.0 / k as f64).sum::<f64>() / n_candidates as f64
}
