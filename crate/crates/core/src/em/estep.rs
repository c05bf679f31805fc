use rayon::prelude::*;

use super::posterior::{Posterior, PosteriorTable};
use crate::corpus::layout::{build_layout, Layout};
use crate::corpus::{AddresseeGraph, Conversation, Vocab};
use crate::encoder::{crm_discourse_logit, crm_single_logit, encode, one_hot_weights, Encoder};
use crate::tensor::{sigmoid, Mat, Real, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Matching probability with a hard addressee (1-based) under the
/// single-turn head.
pub fn score_single<T: Real>(enc: &Encoder<T>, layout: &Layout, addressee: usize) -> f64 {
    let mut tape = Tape::new(&enc.params);
    let w = tape.constant(one_hot_weights(layout.n_rows() - 1, addressee - 1));
    let e = encode(&mut tape, enc, layout, &layout.tokens, w);
    let s = crm_single_logit(&mut tape, enc, e.hidden);
    sigmoid(tape.scalar(s)).as_f64()
}

/// Matching probability under the discourse head for a hard graph whose
/// last row is the response's addressee. The response is also marked on
/// that addressee.
pub fn score_discourse<T: Real>(enc: &Encoder<T>, layout: &Layout, graph: &AddresseeGraph) -> f64 {
    let t = layout.n_rows();
    let addressee = graph.parent(t).expect("response has an addressee");
    let mut tape = Tape::new(&enc.params);
    let w = tape.constant(one_hot_weights(t - 1, addressee - 1));
    let e = encode(&mut tape, enc, layout, &layout.tokens, w);
    let z = tape.constant(graph.matrix::<T>());
    let s = crm_discourse_logit(&mut tape, enc, e.rows, z);
    sigmoid(tape.scalar(s)).as_f64()
}

/// Graph with the given context parents (turns `2..t-1`) and response
/// addressee `j`.
pub fn candidate_graph(context: &[usize], j: usize) -> AddresseeGraph {
    let mut parents = vec![None];
    parents.extend(context.iter().map(|&p| Some(p)));
    parents.push(Some(j));
    AddresseeGraph::from_parents(parents).expect("candidate graph is well formed")
}

fn dialogue_posteriors<T: Real>(
    enc: &Encoder<T>,
    vocab: &Vocab,
    conv: &Conversation,
    stage: Stage,
) -> Vec<Posterior> {
    let mut out: Vec<Posterior> = Vec::with_capacity(conv.len().saturating_sub(1));
    let mut parents: Vec<usize> = Vec::new();
    for t in 2..=conv.len() {
        let layout = build_layout(vocab, conv, t, &conv.turn(t).tokens, enc.cfg.max_tokens);
        let scores: Vec<f64> = (1..t)
            .map(|j| match stage {
                Stage::One => score_single(enc, &layout, j),
                Stage::Two => score_discourse(enc, &layout, &candidate_graph(&parents, j)),
            })
            .collect();
        let post = Posterior::from_scores(scores);
        parents.push(post.argmax());
        out.push(post);
    }
    out
}

/// Posteriors for every turn `2..=T` of each listed dialogue. In stage two
/// the context rows of each candidate graph are the argmaxes already
/// computed for the earlier turns of the same dialogue.
pub fn e_step<T: Real>(
    enc: &Encoder<T>,
    vocab: &Vocab,
    conversations: &[Conversation],
    dialogues: &[usize],
    stage: Stage,
) -> PosteriorTable {
    let per: Vec<Vec<Posterior>> = dialogues
        .par_iter()
        .map(|&d| dialogue_posteriors(enc, vocab, &conversations[d], stage))
        .collect();
    let mut table = PosteriorTable::default();
    for (&d, posts) in dialogues.iter().zip(per) {
        for (k, p) in posts.into_iter().enumerate() {
            table.insert(d, k + 2, p);
        }
    }
    table
}

/// Convenience for building a hard graph matrix from argmax posteriors.
pub fn argmax_graph<T: Real>(table: &PosteriorTable, dialogue: usize, t: usize) -> Option<Mat<T>> {
    let mut parents = vec![None];
    for turn in 2..=t {
        parents.push(Some(table.argmax(dialogue, turn)?));
    }
    AddresseeGraph::from_parents(parents).ok().map(|g| g.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorConfig};
    use crate::encoder::EncoderConfig;
    use crate::oracle::exact_posterior;

    #[test]
    fn every_turn_gets_a_normalized_posterior() {
        let corpus = generate_corpus(&GeneratorConfig { n_dialogues: 5, seed: 1, ..Default::default() }).unwrap();
        let convs = corpus.conversations();
        let enc: Encoder<f64> = Encoder::init(&EncoderConfig::tiny(corpus.vocab.size()), 3).unwrap();
        for stage in [Stage::One, Stage::Two] {
            let table = e_step(&enc, &corpus.vocab, &convs, &[0, 2, 4], stage);
            assert_eq!(table.len(), [0, 2, 4].iter().map(|&d| convs[d].len() - 1).sum::<usize>());
            for (&(d, t), p) in table.iter() {
                assert_eq!(p.n_candidates(), t - 1);
                assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{d} {t}");
                assert!(p.scores.iter().all(|s| *s > 0.0 && *s < 1.0));
            }
            assert_eq!(table.get(0, 2).unwrap().probs, vec![1.0]);
        }
    }

    #[test]
    fn stage_one_matches_oracle_bitwise() {
        let corpus = generate_corpus(&GeneratorConfig { n_dialogues: 3, seed: 5, ..Default::default() }).unwrap();
        let convs = corpus.conversations();
        let enc: Encoder<f64> = Encoder::init(&EncoderConfig::tiny(corpus.vocab.size()), 7).unwrap();
        let table = e_step(&enc, &corpus.vocab, &convs, &[1], Stage::One);
        for t in 2..=convs[1].len() {
            let want = exact_posterior(&enc, &corpus.vocab, &convs[1], t);
            let got = &table.get(1, t).unwrap().probs;
            assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn candidate_graphs_set_the_last_row() {
        let g = candidate_graph(&[1, 1, 2], 3);
        assert_eq!(g.parents(), &[None, Some(1), Some(1), Some(2), Some(3)]);
        let mut table = PosteriorTable::default();
        table.insert(0, 2, Posterior::one_hot(1, 0));
        table.insert(0, 3, Posterior::from_scores(vec![0.2, 0.6]));
        let m: Mat<f64> = argmax_graph(&table, 0, 3).unwrap();
        assert_eq!(m.get(2, 1), 1.0);
        assert!(argmax_graph::<f64>(&table, 0, 4).is_none());
    }
}
