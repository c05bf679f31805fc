use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Distribution over the addressee of one turn, plus the matching-head
/// probabilities it was normalized from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    /// Entry `j` is candidate turn `j + 1`.
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
}

impl Posterior {
    /// Normalizes candidate scores by their sum. All-zero scores give the
    /// uniform distribution.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let total: f64 = scores.iter().sum();
        let probs = if total > 0.0 {
            scores.iter().map(|s| s / total).collect()
        } else {
            log::warn!("all {} candidate scores are zero; using a uniform posterior", scores.len());
            vec![1.0 / scores.len() as f64; scores.len()]
        };
        Posterior { probs, scores }
    }

    pub fn one_hot(n: usize, j: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[j] = 1.0;
        Posterior {
            scores: probs.clone(),
            probs,
        }
    }

    pub fn n_candidates(&self) -> usize {
        self.probs.len()
    }

    /// 1-based addressee with the highest posterior; ties go to the later
    /// turn.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &p) in self.probs.iter().enumerate() {
            if p >= self.probs[best] {
                best = j;
            }
        }
        best + 1
    }
}

/// Posteriors keyed by `(dialogue index, turn)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    map: BTreeMap<(usize, usize), Posterior>,
}

impl PosteriorTable {
    pub fn get(&self, dialogue: usize, turn: usize) -> Option<&Posterior> {
        self.map.get(&(dialogue, turn))
    }

    pub fn insert(&mut self, dialogue: usize, turn: usize, post: Posterior) {
        self.map.insert((dialogue, turn), post);
    }

    pub fn extend(&mut self, other: PosteriorTable) {
        self.map.extend(other.map);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Posterior)> {
        self.map.iter()
    }

    pub fn argmax(&self, dialogue: usize, turn: usize) -> Option<usize> {
        self.get(dialogue, turn).map(Posterior::argmax)
    }
}

/// Every turn addresses the turn right before it.
pub fn cold_start(dialogues: &[(usize, usize)]) -> PosteriorTable {
    let mut table = PosteriorTable::default();
    for &(d, len) in dialogues {
        for t in 2..=len {
            table.insert(d, t, Posterior::one_hot(t - 1, t - 2));
        }
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    MinMax,
    Average,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::MinMax => "min-max",
            Normalization::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "min-max" => Some(Normalization::MinMax),
            "average" => Some(Normalization::Average),
            _ => None,
        }
    }
}

/// Degenerate inputs (`max == min`, or a zero mean) normalize to zeros.
pub fn normalize(scores: &[f64], norm: Normalization) -> Vec<f64> {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom = match norm {
        Normalization::MinMax => max - min,
        Normalization::Average => scores.iter().sum::<f64>() / scores.len() as f64,
    };
    if max == min || denom == 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / denom).collect()
}

/// Gap between the two largest normalized scores. A single candidate is
/// infinitely confident.
pub fn confidence(scores: &[f64], norm: Normalization) -> f64 {
    if scores.len() < 2 {
        return f64::INFINITY;
    }
    let n = normalize(scores, norm);
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in &n {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

/// Indices of the `ceil(n / 2)` most confident entries, in increasing index
/// order. Ties keep the earlier index.
pub fn top_half(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let keep = confidences.len().div_ceil(2);
    let mut sel = order[..keep].to_vec();
    sel.sort_unstable();
    sel
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub norm: Normalization,
    /// Selected training keys.
    pub selected: Vec<(usize, usize)>,
    /// Validation accuracy on the full set and on its confident half.
    pub addr_acc: f64,
    pub used_acc: f64,
    /// Confident-half validation accuracy under each normalization.
    pub used_by_norm: [(Normalization, f64); 2],
}

fn accuracy(hits: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += h as usize;
    }
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Chooses the normalization whose confident half of `validation` is more
/// accurate (min-max on ties), then keeps the confident half of `train`
/// under it.
pub fn confidence_filter(
    train: &[((usize, usize), &Posterior)],
    validation: &[(&Posterior, usize)],
) -> FilterOutcome {
    let addr_acc = accuracy(validation.iter().map(|(p, g)| p.argmax() == *g));
    let used = |norm| {
        let conf: Vec<f64> = validation.iter().map(|(p, _)| confidence(&p.scores, norm)).collect();
        accuracy(top_half(&conf).into_iter().map(|i| validation[i].0.argmax() == validation[i].1))
    };
    let mm = used(Normalization::MinMax);
    let av = used(Normalization::Average);
    let (norm, used_acc) = if av > mm {
        (Normalization::Average, av)
    } else {
        (Normalization::MinMax, mm)
    };
    let conf: Vec<f64> = train.iter().map(|(_, p)| confidence(&p.scores, norm)).collect();
    let selected = top_half(&conf).into_iter().map(|i| train[i].0).collect();
    FilterOutcome {
        norm,
        selected,
        addr_acc,
        used_acc,
        used_by_norm: [(Normalization::MinMax, mm), (Normalization::Average, av)],
    }
}
