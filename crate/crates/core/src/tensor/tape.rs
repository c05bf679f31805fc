//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] borrows a flat parameter list; `param`/`embed` nodes read from
//! it and their gradients are accumulated into a per-parameter buffer by
//! [`Tape::backward`]. Values are kept for every node, so a tape doubles as a
//! forward-only evaluator.

use super::kernels::{dot, gemm, gemm_a_bt, gemm_at_b};
use super::{lit, Mat, Real};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(usize),
    Embed {
        table: usize,
        rows: Vec<usize>,
    },
    AddresseeMix {
        weights: Var,
        turns: Vec<Option<usize>>,
        table: usize,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    BceWithLogits {
        logit: Var,
        target: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    ScatterPairs {
        src: Var,
        pairs: Vec<(usize, usize)>,
    },
    KlRows {
        logits: Var,
        log_prior: Vec<T>,
        probs: Vec<T>,
        row_kl: Vec<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// Computation graph recorded in evaluation order.
pub struct Tape<'p, T: Real> {
    params: &'p [Mat<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p [Mat<T>]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: usize) -> Var {
        let value = self.params[id].clone();
        self.push(value, Op::Param(id))
    }

    /// Rows of a parameter table, e.g. an embedding lookup.
    pub fn embed(&mut self, table: usize, rows: &[usize]) -> Var {
        let t = &self.params[table];
        let mut out = Mat::zeros(rows.len(), t.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(
            out,
            Op::Embed {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    /// Per-token convex combination of the two rows of `table`
    /// (row 0 = marked, row 1 = unmarked). Token `l` with `turns[l] = Some(j)`
    /// uses weight `weights[j]`; tokens outside the context are unmarked.
    pub fn addressee_mix(&mut self, weights: Var, turns: &[Option<usize>], table: usize) -> Var {
        let t = &self.params[table];
        assert_eq!(t.rows, 2, "addressee table must have two rows");
        let w = &self.nodes[weights.0].value;
        let d = t.cols;
        let mut out = Mat::zeros(turns.len(), d);
        for (l, turn) in turns.iter().enumerate() {
            let m = turn.map(|j| w.data[j]).unwrap_or_else(T::zero);
            let one_minus = T::one() - m;
            let row = out.row_mut(l);
            for c in 0..d {
                row[c] = m * t.data[c] + one_minus * t.data[d + c];
            }
        }
        self.push(
            out,
            Op::AddresseeMix {
                weights,
                turns: turns.to_vec(),
                table,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `x + 1·b` for a row vector `b`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, bias.cols);
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        let n = lit::<T>(cols as f64);
        let eps = lit::<T>(LN_EPS);
        let mut out = Mat::zeros(rows, cols);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = g.data[c] * h + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
        let data = xv
            .data
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let out = Mat::from_vec(xv.rows, xv.cols, data);
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v.tanh()).collect();
        let out = Mat::from_vec(xv.rows, xv.cols, data);
        self.push(out, Op::Tanh(x))
    }

    /// Bidirectional multi-head self-attention over a fused `L×3d` projection
    /// laid out as `[Q | K | V]`. Output is `L×d` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let v = self.value(qkv);
        let l = v.rows;
        let d = v.cols / 3;
        assert_eq!(d * 3, v.cols);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut out = Mat::zeros(l, d);
        let mut probs = vec![T::zero(); heads * l * l];
        let mut q = vec![T::zero(); l * dh];
        let mut k = vec![T::zero(); l * dh];
        let mut vv = vec![T::zero(); l * dh];
        let mut o = vec![T::zero(); l * dh];
        for h in 0..heads {
            split_head(v, h, dh, d, &mut q, &mut k, &mut vv);
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            gemm_a_bt(&q, &k, p, l, dh, l);
            for r in 0..l {
                let row = &mut p[r * l..(r + 1) * l];
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(row);
            }
            o.iter_mut().for_each(|x| *x = T::zero());
            gemm(p, &vv, &mut o, l, l, dh);
            for r in 0..l {
                out.data[r * d + h * dh..r * d + (h + 1) * dh]
                    .copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
        }
        self.push(out, Op::Attention { qkv, heads, probs })
    }

    pub fn slice(&mut self, x: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Var {
        let xv = self.value(x);
        assert!(r0 <= r1 && r1 <= xv.rows && c0 <= c1 && c1 <= xv.cols);
        let mut out = Mat::zeros(r1 - r0, c1 - c0);
        for r in r0..r1 {
            out.row_mut(r - r0).copy_from_slice(&xv.row(r)[c0..c1]);
        }
        self.push(out, Op::Slice { x, r0, c0 })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols);
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let out = Mat::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols);
        let out = Mat::from_vec(rows, cols, xv.data.clone());
        self.push(out, Op::Reshape(x))
    }

    /// Row-wise softmax. Entries at `-inf` get exactly zero mass; a row that
    /// is entirely `-inf` becomes all zeros.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Numerically stable binary cross-entropy on a `1×1` logit.
    pub fn bce_with_logits(&mut self, logit: Var, target: T) -> Var {
        let x = self.scalar(logit);
        let loss = x.max(T::zero()) - x * target + (T::one() + (-x.abs()).exp()).ln();
        self.push(Mat::scalar(loss), Op::BceWithLogits { logit, target })
    }

    /// Mean cross-entropy of each row of `logits` against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = lv.data.clone();
        let mut total = T::zero();
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &lv.data[r * lv.cols..(r + 1) * lv.cols];
            let lse = log_sum_exp(row);
            total += lse - row[tgt];
            softmax_in_place(&mut probs[r * lv.cols..(r + 1) * lv.cols]);
        }
        let m = lit::<T>(targets.len().max(1) as f64);
        self.push(
            Mat::scalar(total / m),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Places a column of pair scores into a `t×t` matrix; every other entry
    /// is `-inf`.
    pub fn scatter_pairs(&mut self, src: Var, t: usize, pairs: &[(usize, usize)]) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.len(), pairs.len());
        let mut out = Mat::filled(t, t, T::neg_infinity());
        for (p, &(i, j)) in pairs.iter().enumerate() {
            out.set(i, j, sv.data[p]);
        }
        self.push(
            out,
            Op::ScatterPairs {
                src,
                pairs: pairs.to_vec(),
            },
        )
    }

    /// `Σ_rows KL(softmax(logits_row) ‖ prior_row)` over rows with at least one
    /// finite logit. `prior` is given as probabilities and is clamped at
    /// `clamp` before the log.
    pub fn kl_rows(&mut self, logits: Var, prior: &Mat<T>, clamp: T) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), prior.shape());
        let cols = lv.cols;
        let log_prior: Vec<T> = prior.data.iter().map(|&p| p.max(clamp).ln()).collect();
        let mut probs = lv.data.clone();
        let mut row_kl = vec![T::zero(); lv.rows];
        let mut total = T::zero();
        for r in 0..lv.rows {
            let row = &lv.data[r * cols..(r + 1) * cols];
            if row.iter().all(|v| *v == T::neg_infinity()) {
                probs[r * cols..(r + 1) * cols].iter_mut().for_each(|p| *p = T::zero());
                continue;
            }
            let lse = log_sum_exp(row);
            softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
            let mut kl = T::zero();
            for c in 0..cols {
                let q = probs[r * cols + c];
                if row[c] == T::neg_infinity() || q == T::zero() {
                    continue;
                }
                kl += q * ((row[c] - lse) - log_prior[r * cols + c]);
            }
            row_kl[r] = kl;
            total += kl;
        }
        self.push(
            Mat::scalar(total),
            Op::KlRows {
                logits,
                log_prior,
                probs,
                row_kl,
            },
        )
    }

    /// Sum of `1×1` terms with coefficients.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == T::one() { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.expect("weighted_sum of no terms")
    }

    /// Back-propagates from a `1×1` node. Returns one gradient slot per
    /// parameter; slots for untouched parameters stay `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Mat<T>>> {
        self.backward_scaled(loss, T::one())
    }

    pub fn backward_scaled(&self, loss: Var, seed: T) -> Vec<Option<Mat<T>>> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(seed));
        let mut pgrads: Vec<Option<Mat<T>>> = (0..self.params.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    accumulate(&mut pgrads[*id], g);
                }
                Op::Embed { table, rows } => {
                    let t = &self.params[*table];
                    let slot = pgrads[*table].get_or_insert_with(|| Mat::zeros(t.rows, t.cols));
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, &b) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::AddresseeMix {
                    weights,
                    turns,
                    table,
                } => {
                    let t = &self.params[*table];
                    let d = t.cols;
                    let w = &self.nodes[weights.0].value;
                    let diff: Vec<T> = (0..d).map(|c| t.data[c] - t.data[d + c]).collect();
                    let mut dw = Mat::zeros(w.rows, w.cols);
                    let slot = pgrads[*table].get_or_insert_with(|| Mat::zeros(2, d));
                    for (l, turn) in turns.iter().enumerate() {
                        let gl = g.row(l);
                        let m = turn.map(|j| w.data[j]).unwrap_or_else(T::zero);
                        let one_minus = T::one() - m;
                        for c in 0..d {
                            slot.data[c] += m * gl[c];
                            slot.data[d + c] += one_minus * gl[c];
                        }
                        if let Some(j) = turn {
                            dw.data[*j] += dot(&diff, gl);
                        }
                    }
                    accumulate(&mut grads[weights.0], dw);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows, va.cols, vb.cols);
                    let mut da = Mat::zeros(m, k);
                    gemm_a_bt(&g.data, &vb.data, &mut da.data, m, n, k);
                    let mut db = Mat::zeros(k, n);
                    gemm_at_b(&va.data, &g.data, &mut db.data, m, k, n);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddBias(x, b) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (a, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, vb, |gv, y| gv * y);
                    let db = zip_map(&g, va, |gv, x| gv * x);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(x, s) => {
                    let mut dx = g;
                    dx.scale_assign(*s);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let (rows, cols) = g.shape();
                    let n = lit::<T>(cols as f64);
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dg = Mat::zeros(1, cols);
                    let mut dbeta = Mat::zeros(1, cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            dg.data[c] += gr[c] * xh[c];
                            dbeta.data[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xh[c];
                        }
                        let k = rstd[r] / n;
                        for c in 0..cols {
                            dx.data[r * cols + c] = k * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gamma.0], dg);
                    accumulate(&mut grads[beta.0], dbeta);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
                    let three = lit::<T>(3.0);
                    let dx = zip_map(&g, xv, |gv, v| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dth = (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        gv * (half * (T::one() + th) + half * v * dth)
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Tanh(x) => {
                    let dx = zip_map(&g, &node.value, |gv, y| gv * (T::one() - y * y));
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Attention { qkv, heads, probs } => {
                    let v = self.value(*qkv);
                    let l = v.rows;
                    let d = v.cols / 3;
                    let dh = d / heads;
                    let scale = T::one() / lit::<T>(dh as f64).sqrt();
                    let mut dqkv = Mat::zeros(l, 3 * d);
                    let mut q = vec![T::zero(); l * dh];
                    let mut k = vec![T::zero(); l * dh];
                    let mut vv = vec![T::zero(); l * dh];
                    let mut go = vec![T::zero(); l * dh];
                    let mut dp = vec![T::zero(); l * l];
                    for h in 0..*heads {
                        split_head(v, h, dh, d, &mut q, &mut k, &mut vv);
                        for r in 0..l {
                            go[r * dh..(r + 1) * dh]
                                .copy_from_slice(&g.data[r * d + h * dh..r * d + (h + 1) * dh]);
                        }
                        let p = &probs[h * l * l..(h + 1) * l * l];
                        dp.iter_mut().for_each(|x| *x = T::zero());
                        gemm_a_bt(&go, &vv, &mut dp, l, dh, l);
                        let mut dv = vec![T::zero(); l * dh];
                        gemm_at_b(p, &go, &mut dv, l, l, dh);
                        for r in 0..l {
                            let pr = &p[r * l..(r + 1) * l];
                            let dr = &mut dp[r * l..(r + 1) * l];
                            let s = dot(pr, dr);
                            for c in 0..l {
                                dr[c] = pr[c] * (dr[c] - s) * scale;
                            }
                        }
                        let mut dq = vec![T::zero(); l * dh];
                        gemm(&dp, &k, &mut dq, l, l, dh);
                        let mut dk = vec![T::zero(); l * dh];
                        gemm_at_b(&dp, &q, &mut dk, l, l, dh);
                        for r in 0..l {
                            let row = dqkv.row_mut(r);
                            row[h * dh..(h + 1) * dh].copy_from_slice(&dq[r * dh..(r + 1) * dh]);
                            row[d + h * dh..d + (h + 1) * dh]
                                .copy_from_slice(&dk[r * dh..(r + 1) * dh]);
                            row[2 * d + h * dh..2 * d + (h + 1) * dh]
                                .copy_from_slice(&dv[r * dh..(r + 1) * dh]);
                        }
                    }
                    accumulate(&mut grads[qkv.0], dqkv);
                }
                Op::Slice { x, r0, c0 } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        dx.row_mut(r0 + r)[*c0..*c0 + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::GatherRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, &b) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        let mut dp = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut grads[p.0], dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        let dp = Mat::from_vec(pv.rows, pv.cols, g.data[off..off + n].to_vec());
                        off += n;
                        accumulate(&mut grads[p.0], dp);
                    }
                }
                Op::Reshape(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads[x.0], Mat::from_vec(xv.rows, xv.cols, g.data));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = dot(yr, gr);
                        for c in 0..y.cols {
                            dx.data[r * y.cols + c] = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::BceWithLogits { logit, target } => {
                    let x = self.scalar(*logit);
                    let dx = (sigmoid(x) - *target) * g.data[0];
                    accumulate(&mut grads[logit.0], Mat::scalar(dx));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let m = lit::<T>(targets.len().max(1) as f64);
                    let k = g.data[0] / m;
                    let mut dx = Mat::from_vec(lv.rows, lv.cols, probs.clone());
                    for (r, &tgt) in targets.iter().enumerate() {
                        dx.data[r * lv.cols + tgt] -= T::one();
                    }
                    dx.scale_assign(k);
                    accumulate(&mut grads[logits.0], dx);
                }
                Op::ScatterPairs { src, pairs } => {
                    let sv = self.value(*src);
                    let mut ds = Mat::zeros(sv.rows, sv.cols);
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        ds.data[p] = g.get(i, j);
                    }
                    accumulate(&mut grads[src.0], ds);
                }
                Op::KlRows {
                    logits,
                    log_prior,
                    probs,
                    row_kl,
                } => {
                    let lv = self.value(*logits);
                    let cols = lv.cols;
                    let mut dx = Mat::zeros(lv.rows, cols);
                    for r in 0..lv.rows {
                        for c in 0..cols {
                            let q = probs[r * cols + c];
                            let x = lv.data[r * cols + c];
                            if q == T::zero() || x == T::neg_infinity() {
                                continue;
                            }
                            let lq = q.ln();
                            dx.data[r * cols + c] =
                                g.data[0] * q * (lq - log_prior[r * cols + c] - row_kl[r]);
                        }
                    }
                    accumulate(&mut grads[logits.0], dx);
                }
            }
        }
        pgrads
    }
}

fn split_head<T: Real>(
    v: &Mat<T>,
    h: usize,
    dh: usize,
    d: usize,
    q: &mut [T],
    k: &mut [T],
    vv: &mut [T],
) {
    for r in 0..v.rows {
        let row = v.row(r);
        q[r * dh..(r + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
        k[r * dh..(r + 1) * dh].copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
        vv[r * dh..(r + 1) * dh].copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
    }
}

fn accumulate<T: Real>(slot: &mut Option<Mat<T>>, g: Mat<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows, a.cols, data)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
