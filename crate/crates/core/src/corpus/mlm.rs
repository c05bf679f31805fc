//! Addressee-aware masking for the masked-token objective.
//!
//! Special tokens are speaker identifiers, tokens of the addressee
//! utterance, and mentions of the addressee's speaker. They are masked first
//! at a higher rate; the total is then adjusted into `[15%, 30%]` of the
//! maskable positions.

use rand::seq::SliceRandom;
use rand::Rng;

use super::layout::Layout;
use super::{TokenKind, Vocab, MASK};

pub const P_SPECIAL: f64 = 0.60;
pub const P_NORMAL: f64 = 0.15;
pub const MIN_TOKENS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedLayout {
    pub tokens: Vec<u32>,
    /// `(position, original token)` in increasing position order.
    pub targets: Vec<(usize, u32)>,
}

impl MaskedLayout {
    pub fn ratio(&self, n_maskable: usize) -> f64 {
        self.targets.len() as f64 / n_maskable as f64
    }
}

/// Minimum and maximum number of masked positions for `n` maskable tokens.
pub fn mask_bounds(n: usize) -> (usize, usize) {
    ((15 * n).div_ceil(100), 30 * n / 100)
}

/// Which maskable positions count as special, given the addressee turn and
/// its speaker.
pub fn special_positions(
    layout: &Layout,
    vocab: &Vocab,
    addressee: Option<usize>,
    addressee_speaker: Option<u32>,
) -> Vec<bool> {
    layout
        .tokens
        .iter()
        .zip(&layout.turn_of)
        .map(|(&tok, &turn)| match vocab.kind(tok) {
            TokenKind::Structural => false,
            TokenKind::Speaker(_) => true,
            TokenKind::Mention(k) if Some(k) == addressee_speaker => true,
            _ => addressee.is_some() && turn == addressee,
        })
        .collect()
}

/// Returns `None` when fewer than [`MIN_TOKENS`] positions are maskable.
pub fn apply_mlm_mask<R: Rng>(layout: &Layout, special: &[bool], rng: &mut R) -> Option<MaskedLayout> {
    let positions: Vec<usize> = layout.maskable().collect();
    let n = positions.len();
    if n < MIN_TOKENS {
        return None;
    }
    let (lo, hi) = mask_bounds(n);
    let mut masked = vec![false; n];
    for (k, &p) in positions.iter().enumerate() {
        let rate = if special[p] { P_SPECIAL } else { P_NORMAL };
        masked[k] = rng.gen_bool(rate);
    }
    let mut count = masked.iter().filter(|&&m| m).count();
    if count > hi {
        let mut on: Vec<usize> = (0..n).filter(|&k| masked[k]).collect();
        on.shuffle(rng);
        for &k in &on[..count - hi] {
            masked[k] = false;
        }
        count = hi;
    }
    if count < lo {
        let normal: Vec<usize> = (0..n).filter(|&k| !special[positions[k]]).collect();
        let pool = if normal.iter().any(|&k| !masked[k]) {
            normal
        } else {
            (0..n).collect()
        };
        'fill: loop {
            for &k in &pool {
                if !masked[k] && rng.gen_bool(P_NORMAL) {
                    masked[k] = true;
                    count += 1;
                    if count == lo {
                        break 'fill;
                    }
                }
            }
            if pool.iter().all(|&k| masked[k]) {
                // normal tokens exhausted; top up from the rest
                for k in 0..n {
                    if count == lo {
                        break;
                    }
                    if !masked[k] {
                        masked[k] = true;
                        count += 1;
                    }
                }
                break;
            }
        }
    }
    let mut tokens = layout.tokens.clone();
    let mut targets = Vec::with_capacity(count);
    for (k, &p) in positions.iter().enumerate() {
        if masked[k] {
            targets.push((p, tokens[p]));
            tokens[p] = MASK;
        }
    }
    Some(MaskedLayout { tokens, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, SEP};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(n: usize, vocab: &Vocab, special_every: usize) -> Layout {
        let mut tokens = vec![CLS];
        let mut turn_of = vec![None];
        for k in 0..n {
            let tok = if special_every > 0 && k % special_every == 0 {
                vocab.speaker((k % 2) as u32)
            } else {
                vocab.content((k % 30) as u32)
            };
            tokens.push(tok);
            turn_of.push(None);
        }
        tokens.push(SEP);
        turn_of.push(None);
        Layout {
            tokens,
            turn_of,
            spans: vec![],
            dropped: 0,
        }
    }

    #[test]
    fn ratio_bounds_on_hundred_tokens() {
        let vocab = Vocab::new(2, 30);
        let l = flat(100, &vocab, 5);
        let special = special_positions(&l, &vocab, None, None);
        let mut total = 0.0;
        for seed in 0..1000 {
            let m = apply_mlm_mask(&l, &special, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let r = m.ratio(100);
            assert!((0.15..=0.30).contains(&r), "seed {seed}: {r}");
            total += r;
        }
        let mean = total / 1000.0;
        assert!((0.15..=0.30).contains(&mean));
    }

    #[test]
    fn all_special_is_capped() {
        let vocab = Vocab::new(2, 30);
        let l = flat(40, &vocab, 1);
        let special = special_positions(&l, &vocab, None, None);
        assert!(special[1..41].iter().all(|&s| s));
        for seed in 0..10_000 {
            let m = apply_mlm_mask(&l, &special, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(m.targets.len() <= 12);
            assert!(m.targets.len() >= 6);
        }
    }

    #[test]
    fn no_special_still_reaches_floor() {
        let vocab = Vocab::new(2, 30);
        let l = flat(20, &vocab, 0);
        let special = special_positions(&l, &vocab, None, None);
        assert!(special.iter().all(|&s| !s));
        for seed in 0..500 {
            let m = apply_mlm_mask(&l, &special, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((3..=6).contains(&m.targets.len()));
            for &(p, orig) in &m.targets {
                assert_eq!(m.tokens[p], MASK);
                assert_eq!(l.tokens[p], orig);
            }
        }
    }

    #[test]
    fn short_instances_skipped() {
        let vocab = Vocab::new(2, 30);
        let l = flat(3, &vocab, 0);
        let special = special_positions(&l, &vocab, None, None);
        assert!(apply_mlm_mask(&l, &special, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
    }

    #[test]
    fn addressee_tokens_are_special() {
        let vocab = Vocab::new(3, 30);
        let l = Layout {
            tokens: vec![CLS, vocab.speaker(0), vocab.content(1), SEP, vocab.content(2), vocab.mention(0), vocab.mention(1)],
            turn_of: vec![None, Some(1), Some(1), Some(1), None, None, None],
            spans: vec![],
            dropped: 0,
        };
        let s = special_positions(&l, &vocab, Some(1), Some(0));
        assert_eq!(s, vec![false, true, true, false, false, true, false]);
    }

    proptest! {
        #[test]
        fn ratio_in_bounds_from_seven_tokens(n in 7usize..200, every in 0usize..6, seed in any::<u64>()) {
            let vocab = Vocab::new(2, 30);
            let l = flat(n, &vocab, every);
            let special = special_positions(&l, &vocab, None, None);
            let m = apply_mlm_mask(&l, &special, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let r = m.ratio(n);
            prop_assert!((0.15..=0.30).contains(&r), "n={} r={}", n, r);
        }

        #[test]
        fn bounds_are_consistent(n in 4usize..10_000) {
            let (lo, hi) = mask_bounds(n);
            prop_assert!(lo >= 1 && lo <= hi);
        }
    }
}
