use serde::{Deserialize, Serialize};

use crate::tensor::{lit, Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Plain SGD or Adam with per-parameter step counts, so that state for a
/// re-initialized parameter can be reset on its own.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    steps: Vec<u64>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: Option<f64>, params: &[Mat<T>]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Optimizer {
            kind,
            lr,
            clip_norm,
            m: zeros(),
            v: zeros(),
            steps: vec![0; params.len()],
        }
    }

    pub fn reset(&mut self, indices: &[usize]) {
        for &i in indices {
            self.m[i].data.iter_mut().for_each(|x| *x = T::zero());
            self.v[i].data.iter_mut().for_each(|x| *x = T::zero());
            self.steps[i] = 0;
        }
    }

    /// Applies one update. `trainable[i] == false` freezes parameter `i`.
    pub fn step(&mut self, params: &mut [Mat<T>], grads: &mut [Mat<T>], trainable: &[bool]) {
        if self.lr == 0.0 {
            return;
        }
        if let Some(max) = self.clip_norm {
            let sq: f64 = grads
                .iter()
                .zip(trainable)
                .filter(|(_, &t)| t)
                .flat_map(|(g, _)| g.data.iter())
                .map(|x| x.as_f64() * x.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > max {
                let s = lit::<T>(max / norm);
                grads.iter_mut().for_each(|g| g.scale_assign(s));
            }
        }
        let lr = lit::<T>(self.lr);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let (p, g) = (&mut params[i], &grads[i]);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, &gx) in p.data.iter_mut().zip(&g.data) {
                        *x -= lr * gx;
                    }
                }
                OptimizerKind::Adam => {
                    self.steps[i] += 1;
                    let n = self.steps[i] as i32;
                    let (b1, b2) = (lit::<T>(BETA1), lit::<T>(BETA2));
                    let c1 = lit::<T>(1.0 - BETA1.powi(n));
                    let c2 = lit::<T>(1.0 - BETA2.powi(n));
                    let eps = lit::<T>(EPS);
                    let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
                    for k in 0..p.data.len() {
                        let gx = g.data[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * gx;
                        v[k] = b2 * v[k] + (T::one() - b2) * gx * gx;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p.data[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut p = vec![Mat::from_f64(1, 3, &[0.1, -0.0, 3.0])];
        let before = p.clone();
        let mut g = vec![Mat::from_f64(1, 3, &[1.0, 2.0, -1.0])];
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.0, None, &p);
            opt.step(&mut p, &mut g, &[true]);
            assert_eq!(p[0].data.iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>(),
                before[0].data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sgd_and_adam_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = vec![Mat::from_f64(1, 2, &[3.0, -2.0])];
            let mut opt = Optimizer::new(kind, 0.05, None, &p);
            for _ in 0..500 {
                let mut g = vec![Mat::from_vec(1, 2, p[0].data.iter().map(|x| 2.0 * x).collect())];
                opt.step(&mut p, &mut g, &[true]);
            }
            assert!(p[0].data.iter().all(|x: &f64| x.abs() < 0.1), "{kind:?}: {:?}", p[0].data);
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = vec![Mat::<f64>::from_f64(1, 1, &[1.0]), Mat::from_f64(1, 1, &[1.0])];
        let mut g = vec![Mat::from_f64(1, 1, &[1.0]), Mat::from_f64(1, 1, &[1.0])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, Some(1.0), &p);
        opt.step(&mut p, &mut g, &[true, false]);
        assert!(p[0].data[0] < 1.0);
        assert_eq!(p[1].data[0], 1.0);
    }
}
