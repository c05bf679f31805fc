//! Flattening of a context-response pair into one token sequence:
//!
//! ```text
//! [CLS] S_1 U_1 [SEP] ... S_{t-1} U_{t-1} [SEP] S_t [SEP] r_t
//! ```

use super::{Conversation, Vocab, CLS, SEP};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tokens: Vec<u32>,
    /// Context turn (1-based) owning each position, for addressee marking.
    pub turn_of: Vec<Option<usize>>,
    /// Positions pooled into each utterance row; row `t - 1` is the response.
    /// Rows of truncated turns are empty.
    pub spans: Vec<Vec<usize>>,
    /// Number of leading context turns dropped to fit the length limit.
    pub dropped: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.spans.len()
    }

    /// Positions eligible for masking (everything except CLS and SEP).
    pub fn maskable(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != CLS && t != SEP)
            .map(|(p, _)| p)
    }
}

/// Lays out turn `t` of `conv` with `response` in place of the turn's own
/// tokens. Earliest context turns are dropped until the sequence fits in
/// `max_tokens`; the response is cut only if it cannot fit on its own.
pub fn build_layout(
    vocab: &Vocab,
    conv: &Conversation,
    t: usize,
    response: &[u32],
    max_tokens: usize,
) -> Layout {
    debug_assert!(t >= 2 && t <= conv.len());
    let turn_cost = |j: usize| conv.turn(j).tokens.len() + 2;
    // CLS + S_t + SEP + response
    let fixed = 3 + response.len();
    let mut first = 1;
    let mut total = fixed + (1..t).map(turn_cost).sum::<usize>();
    while total > max_tokens && first < t {
        total -= turn_cost(first);
        first += 1;
    }
    let dropped = first - 1;
    if dropped > 0 {
        log::debug!("{}: turn {t} truncated, dropped {dropped} context turns", conv.id);
    }
    let response = &response[..response.len().min(max_tokens.saturating_sub(3))];

    let mut tokens = Vec::with_capacity(total.min(max_tokens));
    let mut turn_of = Vec::with_capacity(tokens.capacity());
    let mut spans = vec![Vec::new(); t];
    tokens.push(CLS);
    turn_of.push(None);
    for j in first..t {
        let u = conv.turn(j);
        let span = &mut spans[j - 1];
        span.push(tokens.len());
        tokens.push(vocab.speaker(u.speaker));
        turn_of.push(Some(j));
        for &tok in &u.tokens {
            span.push(tokens.len());
            tokens.push(tok);
            turn_of.push(Some(j));
        }
        tokens.push(SEP);
        turn_of.push(Some(j));
    }
    let resp_span = &mut spans[t - 1];
    resp_span.push(tokens.len());
    tokens.push(vocab.speaker(conv.turn(t).speaker));
    turn_of.push(None);
    tokens.push(SEP);
    turn_of.push(None);
    for &tok in response {
        resp_span.push(tokens.len());
        tokens.push(tok);
        turn_of.push(None);
    }
    Layout {
        tokens,
        turn_of,
        spans,
        dropped,
    }
}
