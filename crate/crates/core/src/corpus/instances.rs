use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Conversation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NegativeType {
    Positive,
    /// Response drawn from another dialogue.
    Simple,
    /// Response drawn from a later turn of the same dialogue.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeConfig {
    /// Negatives per positive.
    pub ratio: usize,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig { ratio: 1 }
    }
}

/// A context-response pair. The context is turns `1..t-1` of dialogue
/// `dialogue` plus the speaker of turn `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    /// Index into the conversation list the instance was built from.
    pub dialogue: usize,
    pub turn: usize,
    pub response: Vec<u32>,
    pub label: bool,
    pub kind: NegativeType,
    /// 1-based addressee turn, once assigned.
    pub addressee: Option<usize>,
}

impl TrainingInstance {
    pub fn positive(conversations: &[Conversation], dialogue: usize, turn: usize) -> Self {
        TrainingInstance {
            dialogue,
            turn,
            response: conversations[dialogue].turn(turn).tokens.clone(),
            label: true,
            kind: NegativeType::Positive,
            addressee: None,
        }
    }

    pub fn n_candidates(&self) -> usize {
        self.turn - 1
    }
}

/// Draws `cfg.ratio` negatives for turn `t` of dialogue `dialogue`,
/// alternating hard and simple by the parity of `t + k`. A hard negative at
/// the final turn falls back to a simple one.
pub fn negatives_for<R: Rng>(
    conversations: &[Conversation],
    dialogue: usize,
    t: usize,
    cfg: &NegativeConfig,
    rng: &mut R,
) -> Vec<TrainingInstance> {
    let len = conversations[dialogue].len();
    (0..cfg.ratio)
        .map(|k| {
            let want_hard = (t + k) % 2 == 0;
            let (kind, response) = if want_hard && t < len {
                let j = rng.gen_range(t + 1..=len);
                (NegativeType::Hard, conversations[dialogue].turn(j).tokens.clone())
            } else {
                (NegativeType::Simple, simple_response(conversations, dialogue, rng))
            };
            TrainingInstance {
                dialogue,
                turn: t,
                response,
                label: false,
                kind,
                addressee: None,
            }
        })
        .collect()
}

fn simple_response<R: Rng>(conversations: &[Conversation], dialogue: usize, rng: &mut R) -> Vec<u32> {
    let n = conversations.len();
    if n < 2 {
        // nothing else to draw from; take an earlier-or-equal turn of the same dialogue
        let c = &conversations[dialogue];
        return c.turn(rng.gen_range(1..=c.len())).tokens.clone();
    }
    let mut other = rng.gen_range(0..n - 1);
    if other >= dialogue {
        other += 1;
    }
    let c = &conversations[other];
    c.turn(rng.gen_range(1..=c.len())).tokens.clone()
}

/// Positive plus negatives for every turn `2..=T` of one dialogue.
pub fn build_dialogue_instances<R: Rng>(
    conversations: &[Conversation],
    dialogue: usize,
    cfg: &NegativeConfig,
    rng: &mut R,
) -> Vec<TrainingInstance> {
    let mut out = Vec::new();
    for t in 2..=conversations[dialogue].len() {
        out.push(TrainingInstance::positive(conversations, dialogue, t));
        out.extend(negatives_for(conversations, dialogue, t, cfg, rng));
    }
    out
}

pub fn build_instances<R: Rng>(
    conversations: &[Conversation],
    cfg: &NegativeConfig,
    rng: &mut R,
) -> Vec<TrainingInstance> {
    (0..conversations.len())
        .flat_map(|d| build_dialogue_instances(conversations, d, cfg, rng))
        .collect()
}
