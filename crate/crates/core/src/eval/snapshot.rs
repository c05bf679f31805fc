use rayon::prelude::*;

use super::{
    RankItem, accuracy, build_ranking_pool, crm_ranking, distance_histogram, tv_distance, zero_shot_graph_f1,
};
use crate::corpus::layout::build_layout;
use crate::corpus::{Conversation, Corpus, Dialogue, Vocab};
use crate::em::{
    candidate_graph, confidence_filter, e_step, score_discourse, score_single, PosteriorTable, Stage,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Real;

/// Ranking score of each candidate: the best matching probability over
/// its possible addressees. Stage-two context rows come from `table`.
pub fn rank_scores<T: Real>(
    enc: &Encoder<T>,
    vocab: &Vocab,
    conversations: &[Conversation],
    pool: &[RankItem],
    stage: Stage,
    table: &PosteriorTable,
) -> Vec<Vec<f64>> {
    pool.par_iter()
        .map(|item| {
            let conv = &conversations[item.dialogue];
            let t = item.turn;
            let context: Vec<usize> = (2..t).map(|i| table.argmax(item.dialogue, i).unwrap_or(i - 1)).collect();
            item.candidates
                .iter()
                .map(|resp| {
                    let layout = build_layout(vocab, conv, t, resp, enc.cfg.max_tokens);
                    (1..t)
                        .map(|j| match stage {
                            Stage::One => score_single(enc, &layout, j),
                            Stage::Two => score_discourse(enc, &layout, &candidate_graph(&context, j)),
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsSnapshot {
    pub addr_acc: f64,
    pub used_acc: f64,
    pub norm_choice: String,
    pub f1_g: f64,
    pub mrr: f64,
    pub recall_at_1: f64,
    pub histogram: Vec<f64>,
    pub gold_histogram: Vec<f64>,
    pub tv_distance: f64,
    pub n_dialogues: usize,
    pub n_turns: usize,
}

impl MetricsSnapshot {
    /// `key=value` lines in a fixed order.
    pub fn to_lines(&self) -> String {
        let hist: Vec<String> = self.histogram.iter().map(|v| v.to_string()).collect();
        format!(
            "dialogues={}\nturns={}\naddr_acc={}\nused_acc={}\nnorm_choice={}\nf1_g={}\nmrr={}\nrecall_at_1={}\ntv_distance={}\nhistogram={}\n",
            self.n_dialogues,
            self.n_turns,
            self.addr_acc,
            self.used_acc,
            self.norm_choice,
            self.f1_g,
            self.mrr,
            self.recall_at_1,
            self.tv_distance,
            hist.join(" ")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankConfig {
    pub items: usize,
    pub candidates: usize,
    pub seed: u64,
}

/// Full diagnostic pass over the labeled dialogues of `corpus`.
pub fn evaluate<T: Real>(
    enc: &Encoder<T>,
    corpus: &Corpus,
    labeled: &[usize],
    stage: Stage,
    rank: RankConfig,
) -> Result<MetricsSnapshot> {
    if labeled.is_empty() {
        return Err(Error::Data("no labeled dialogues to evaluate".into()));
    }
    let vocab = &corpus.vocab;
    let convs = corpus.conversations();
    let dialogues: Vec<&Dialogue> = labeled.iter().map(|&d| &corpus.dialogues[d]).collect();
    let mut gold = Vec::with_capacity(labeled.len());
    for d in &dialogues {
        gold.push(d.gold_graph().ok_or_else(|| Error::Data(format!("dialogue {} has no gold graph", d.id())))?);
    }
    let table = e_step(enc, vocab, &convs, labeled, stage);
    let mut entries = Vec::new();
    let mut pairs = Vec::new();
    let mut pred_d = Vec::new();
    let mut gold_d = Vec::new();
    for (&d, g) in labeled.iter().zip(&gold) {
        for t in 2..=g.len() {
            let p = table.get(d, t).expect("e_step covers every turn");
            let parent = g.parent(t).expect("non-root turn");
            entries.push((p, parent));
            pairs.push((p.argmax(), parent));
            pred_d.push(t - p.argmax());
            gold_d.push(t - parent);
        }
    }
    let filter = confidence_filter(&[], &entries);
    let max_distance = enc.cfg.max_turns - 1;
    let histogram = distance_histogram(&pred_d, max_distance);
    let gold_histogram = distance_histogram(&gold_d, max_distance);

    let pool = build_ranking_pool(&convs, labeled, rank.items, rank.candidates, &mut stream(rank.seed, &[12]));
    let scores = rank_scores(enc, vocab, &convs, &pool, stage, &table);
    let (mrr, recall_at_1) = crm_ranking(&scores);

    Ok(MetricsSnapshot {
        addr_acc: accuracy(&pairs)?,
        used_acc: filter.used_acc,
        norm_choice: filter.norm.as_str().to_string(),
        f1_g: zero_shot_graph_f1(enc, vocab, &dialogues)?,
        mrr,
        recall_at_1,
        tv_distance: tv_distance(&histogram, &gold_histogram),
        histogram,
        gold_histogram,
        n_dialogues: labeled.len(),
        n_turns: pairs.len(),
    })
}
