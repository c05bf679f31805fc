//! Synthetic multi-party dialogues with a known reply structure.
//!
//! Each non-root turn replies to an earlier turn drawn with probability
//! proportional to `exp(-lambda * distance)`, is spoken by someone other than
//! the addressee's speaker, and usually continues the addressee's topic.
//! Tokens mix topic words, a mention of the addressee's speaker, and noise.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AddresseeGraph, Conversation, Corpus, Dialogue, Utterance, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_dialogues: usize,
    pub n_speakers: u32,
    pub n_topics: u32,
    pub topic_size: u32,
    pub lambda: f64,
    pub topic_inherit: f64,
    pub p_topic: f64,
    pub p_mention: f64,
    pub p_noise: f64,
    pub min_turns: usize,
    pub max_turns: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_dialogues: 2000,
            n_speakers: 8,
            n_topics: 32,
            topic_size: 16,
            lambda: 0.7,
            topic_inherit: 0.8,
            p_topic: 0.70,
            p_mention: 0.10,
            p_noise: 0.20,
            min_turns: 4,
            max_turns: 12,
            min_tokens: 4,
            max_tokens: 12,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_topic, self.p_mention, self.p_noise];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("token mixture probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "token mixture probabilities sum to {total}, expected 1"
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.topic_inherit) {
            return Err(Error::Config("topic_inherit must lie in [0, 1]".into()));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config("at least two speakers are required".into()));
        }
        if self.n_topics == 0 || self.topic_size == 0 {
            return Err(Error::Config("topic vocabulary must be non-empty".into()));
        }
        if self.min_turns < 2 || self.min_turns > self.max_turns {
            return Err(Error::Config(format!(
                "turn range {}..={} is invalid",
                self.min_turns, self.max_turns
            )));
        }
        if self.min_tokens < 1 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_speakers, self.n_topics * self.topic_size)
    }
}

/// Deterministic in `cfg.seed`. Every dialogue draws from its own RNG stream,
/// so the output does not depend on how the work is split.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let dialogues = (0..cfg.n_dialogues)
        .map(|idx| generate_dialogue(cfg, &vocab, idx))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { vocab, dialogues })
}

fn generate_dialogue(cfg: &GeneratorConfig, vocab: &Vocab, idx: usize) -> Result<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64);

    let t = rng.gen_range(cfg.min_turns..=cfg.max_turns);
    let decay: Vec<f64> = (1..t).map(|d| (-cfg.lambda * d as f64).exp()).collect();
    let mix = WeightedIndex::new([cfg.p_topic, cfg.p_mention, cfg.p_noise])
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut speakers = Vec::with_capacity(t);
    let mut topics = Vec::with_capacity(t);
    let mut parents = Vec::with_capacity(t);
    let mut utterances = Vec::with_capacity(t);

    for turn in 1..=t {
        let (speaker, topic, parent) = if turn == 1 {
            (
                rng.gen_range(0..cfg.n_speakers),
                rng.gen_range(0..cfg.n_topics),
                None,
            )
        } else {
            // candidate distances 1..turn-1, nearest first
            let w = WeightedIndex::new(&decay[..turn - 1]).expect("positive weights");
            let d = w.sample(&mut rng) + 1;
            let j = turn - d;
            let addressee_speaker: u32 = speakers[j - 1];
            let mut s = rng.gen_range(0..cfg.n_speakers - 1);
            if s >= addressee_speaker {
                s += 1;
            }
            let topic = if rng.gen_bool(cfg.topic_inherit) {
                topics[j - 1]
            } else {
                rng.gen_range(0..cfg.n_topics)
            };
            (s, topic, Some(j))
        };

        let n_tokens = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let mention = parent.map(|j| vocab.mention(speakers[j - 1]));
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let tok = match (mix.sample(&mut rng), mention) {
                (0, _) => vocab.content(topic * cfg.topic_size + rng.gen_range(0..cfg.topic_size)),
                (1, Some(m)) => m,
                _ => vocab.content(rng.gen_range(0..vocab.n_content)),
            };
            tokens.push(tok);
        }

        speakers.push(speaker);
        topics.push(topic);
        parents.push(parent);
        utterances.push(Utterance {
            speaker,
            tokens,
            turn,
        });
    }

    let gold = AddresseeGraph::from_parents(parents)?;
    Dialogue::new(
        Conversation {
            id: format!("syn-{idx:06}"),
            utterances,
        },
        Some(gold),
    )
}

/// Exact reply-distance distribution implied by the generator, pooled over
/// all non-root turns. Entry `d - 1` is the probability of distance `d`.
pub fn expected_distance_histogram(cfg: &GeneratorConfig) -> Vec<f64> {
    let max_d = cfg.max_turns - 1;
    let mut hist = vec![0.0; max_d];
    let mut mass = 0.0;
    for t in cfg.min_turns..=cfg.max_turns {
        for i in 2..=t {
            let w: Vec<f64> = (1..i).map(|d| (-cfg.lambda * d as f64).exp()).collect();
            let z: f64 = w.iter().sum();
            for (d, wd) in w.iter().enumerate() {
                hist[d] += wd / z;
            }
            mass += 1.0;
        }
    }
    hist.iter_mut().for_each(|h| *h /= mass);
    hist
}

/// Topic identifier of a content token, if it is one.
#[cfg(test)]
pub(crate) fn topic_of(vocab: &Vocab, cfg_topic_size: u32, token: u32) -> Option<u32> {
    match vocab.kind(token) {
        super::TokenKind::Content(c) => Some(c / cfg_topic_size),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_dialogues: n,
            seed,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn shapes_and_graphs_are_valid() {
        let c = generate_corpus(&small(10, 42)).unwrap();
        assert_eq!(c.dialogues.len(), 10);
        for d in &c.dialogues {
            assert!((4..=12).contains(&d.len()));
            let g = d.gold_graph().unwrap();
            assert_eq!(g.parent(1), None);
            assert_eq!(g.parent(2), Some(1));
            for u in &d.conversation().utterances {
                assert!((4..=12).contains(&u.tokens.len()));
                assert!(u.tokens.iter().all(|&t| c.vocab.contains(t)));
            }
            for i in 2..=d.len() {
                let j = g.parent(i).unwrap();
                assert_ne!(d.conversation().turn(i).speaker, d.conversation().turn(j).speaker);
            }
        }
    }

    #[test]
    fn byte_reproducible() {
        let a = generate_corpus(&small(50, 9)).unwrap().to_bytes();
        let b = generate_corpus(&small(50, 9)).unwrap().to_bytes();
        let c = generate_corpus(&small(50, 10)).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_of_larger_corpus_matches() {
        let a = generate_corpus(&small(20, 3)).unwrap();
        let b = generate_corpus(&small(40, 3)).unwrap();
        assert_eq!(a.dialogues[..], b.dialogues[..20]);
    }

    #[test]
    fn bad_mixture_rejected() {
        let cfg = GeneratorConfig {
            p_noise: 0.3,
            ..GeneratorConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            lambda: 0.0,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empirical_distances_match_enumeration() {
        let cfg = small(2000, 7);
        let c = generate_corpus(&cfg).unwrap();
        let expect = expected_distance_histogram(&cfg);
        assert!((expect.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut counts = vec![0usize; expect.len()];
        let mut n = 0usize;
        for d in &c.dialogues {
            for dist in d.gold_graph().unwrap().distances() {
                counts[dist - 1] += 1;
                n += 1;
            }
        }
        for (k, (&cnt, &e)) in counts.iter().zip(&expect).enumerate() {
            let got = cnt as f64 / n as f64;
            assert!((got - e).abs() < 0.015, "distance {}: {got} vs {e}", k + 1);
        }
    }

    #[test]
    fn enumeration_frozen_values() {
        let h = expected_distance_histogram(&GeneratorConfig::default());
        assert!((h[0] - FROZEN_D1).abs() < 1e-12, "{}", h[0]);
        assert!((h[1] - FROZEN_D2).abs() < 1e-12, "{}", h[1]);
    }

    const FROZEN_D1: f64 = 0.6150212940943709;
    const FROZEN_D2: f64 = 0.23446977848155198;
}
