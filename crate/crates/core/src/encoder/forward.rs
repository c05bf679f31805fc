use super::Encoder;
use crate::corpus::layout::Layout;
use crate::tensor::{lit, Mat, Real, Tape, Var};

/// Token states plus one pooled row per utterance (response last).
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub hidden: Var,
    pub rows: Var,
}

/// `1×n` one-hot addressee weights on 0-based context index `j`.
pub fn one_hot_weights<T: Real>(n: usize, j: usize) -> Mat<T> {
    let mut m = Mat::zeros(1, n);
    m.data[j] = T::one();
    m
}

pub fn unmarked_weights<T: Real>(n: usize) -> Mat<T> {
    Mat::zeros(1, n)
}

/// Mean-pooling operator: row `r` averages the positions in `spans[r]`.
pub fn pooling_matrix<T: Real>(layout: &Layout) -> Mat<T> {
    let l = layout.len();
    let mut p = Mat::zeros(layout.n_rows(), l);
    for (r, span) in layout.spans.iter().enumerate() {
        if span.is_empty() {
            continue;
        }
        let w = T::one() / lit::<T>(span.len() as f64);
        for &pos in span {
            p.set(r, pos, w);
        }
    }
    p
}

/// Runs the transformer over `tokens` (the layout's tokens, possibly
/// masked). `weights` is `1×(t-1)`: the marked share of each context turn.
pub fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &Encoder<T>,
    layout: &Layout,
    tokens: &[u32],
    weights: Var,
) -> Encoded {
    let ids = &enc.ids;
    let l = tokens.len();
    assert!(l <= enc.cfg.max_tokens, "sequence of {l} exceeds max_tokens");
    let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..l).collect();
    let turns: Vec<Option<usize>> = layout.turn_of.iter().map(|t| t.map(|j| j - 1)).collect();

    let tok = tape.embed(ids.tok, &rows);
    let pos = tape.embed(ids.pos, &positions);
    let addr = tape.addressee_mix(weights, &turns, ids.addr);
    let x = tape.add(tok, pos);
    let mut x = tape.add(x, addr);

    for li in &ids.layers {
        let (g, b) = (tape.param(li.ln1_g), tape.param(li.ln1_b));
        let h = tape.layer_norm(x, g, b);
        let (w, b) = (tape.param(li.w_qkv), tape.param(li.b_qkv));
        let qkv = tape.matmul(h, w);
        let qkv = tape.add_bias(qkv, b);
        let a = tape.attention(qkv, enc.cfg.n_heads);
        let (w, b) = (tape.param(li.w_o), tape.param(li.b_o));
        let o = tape.matmul(a, w);
        let o = tape.add_bias(o, b);
        x = tape.add(x, o);

        let (g, b) = (tape.param(li.ln2_g), tape.param(li.ln2_b));
        let h = tape.layer_norm(x, g, b);
        let (w, b) = (tape.param(li.w_1), tape.param(li.b_1));
        let f = tape.matmul(h, w);
        let f = tape.add_bias(f, b);
        let f = tape.gelu(f);
        let (w, b) = (tape.param(li.w_2), tape.param(li.b_2));
        let f = tape.matmul(f, w);
        let f = tape.add_bias(f, b);
        x = tape.add(x, f);
    }
    let (g, b) = (tape.param(ids.lnf_g), tape.param(ids.lnf_b));
    let hidden = tape.layer_norm(x, g, b);
    let rows = utterance_rows(tape, hidden, layout);
    Encoded { hidden, rows }
}

pub fn utterance_rows<T: Real>(tape: &mut Tape<'_, T>, hidden: Var, layout: &Layout) -> Var {
    let p = tape.constant(pooling_matrix(layout));
    tape.matmul(p, hidden)
}

/// Single-turn matching logit from the first position.
pub fn crm_single_logit<T: Real>(tape: &mut Tape<'_, T>, enc: &Encoder<T>, hidden: Var) -> Var {
    let d = enc.cfg.d_model;
    let cls = tape.slice(hidden, 0, 1, 0, d);
    let (w, b) = (tape.param(enc.ids.crm_w), tape.param(enc.ids.crm_b));
    let s = tape.matmul(cls, w);
    tape.add_bias(s, b)
}

/// `a_t · Z^i` for `i = 0..k`, where `a_t` selects the last row.
pub fn khop_positions<T: Real>(tape: &mut Tape<'_, T>, z: Var, k: usize) -> Vec<Var> {
    let t = tape.value(z).rows;
    let mut a = Mat::zeros(1, t);
    a.data[t - 1] = T::one();
    let mut out = vec![tape.constant(a)];
    for _ in 1..k {
        let prev = *out.last().unwrap();
        out.push(tape.matmul(prev, z));
    }
    out
}

/// Discourse-aware matching logit: the response's k-hop ancestor rows of
/// `rows`, flattened through a linear head.
pub fn crm_discourse_logit<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &Encoder<T>,
    rows: Var,
    z: Var,
) -> Var {
    let hops = khop_positions(tape, z, enc.cfg.k_hops);
    let parts: Vec<Var> = hops.into_iter().map(|a| tape.matmul(a, rows)).collect();
    let flat = tape.concat_cols(&parts);
    let (w, b) = (tape.param(enc.ids.disc_w), tape.param(enc.ids.disc_b));
    let s = tape.matmul(flat, w);
    tape.add_bias(s, b)
}

/// `t×t` reply-link scores with `-inf` on and above the diagonal (so row 0
/// is fully masked).
pub fn graph_logits<T: Real>(tape: &mut Tape<'_, T>, enc: &Encoder<T>, rows: Var) -> Var {
    let t = tape.value(rows).rows;
    let pairs: Vec<(usize, usize)> = (1..t).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let hi = tape.gather_rows(rows, &is);
    let hj = tape.gather_rows(rows, &js);
    let prod = tape.mul(hi, hj);
    let feats = tape.concat_cols(&[hi, hj, prod]);
    let ids = &enc.ids;
    let (w1, b1) = (tape.param(ids.g_w1), tape.param(ids.g_b1));
    let h = tape.matmul(feats, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.gelu(h);
    let (w2, b2) = (tape.param(ids.g_w2), tape.param(ids.g_b2));
    let s = tape.matmul(h, w2);
    let s = tape.add_bias(s, b2);
    tape.scatter_pairs(s, t, &pairs)
}

/// Vocabulary logits at `positions`.
pub fn mlm_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &Encoder<T>,
    hidden: Var,
    positions: &[usize],
) -> Var {
    let h = tape.gather_rows(hidden, positions);
    let (w, b) = (tape.param(enc.ids.mlm_w), tape.param(enc.ids.mlm_b));
    let s = tape.matmul(h, w);
    tape.add_bias(s, b)
}
