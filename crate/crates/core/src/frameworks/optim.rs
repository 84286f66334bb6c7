use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::ShapeMismatch { op: "sgd step", left: p.shape(), right: g.shape() });
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero, indexed by step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineWarmup {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineWarmup {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = CosineWarmup { base_lr: 1.0, warmup_steps: 4, total_steps: 14 };
        assert_eq!(s.lr(0), 0.25);
        assert_eq!(s.lr(3), 1.0);
        assert_eq!(s.lr(4), 1.0);
        assert!((s.lr(9) - 0.5).abs() < 1e-12);
        assert!(s.lr(14).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 4..14 {
            assert!(s.lr(k) <= prev);
            prev = s.lr(k);
        }
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut p = Matrix::from_rows(&[[0.1, -0.2], [3.0, -0.0]]).unwrap();
        let before = p.clone();
        let g = vec![Matrix::from_rows(&[[5.0, 1.0], [-2.0, 0.5]]).unwrap()];
        let mut opt = Sgd::new(0.9, 1e-5);
        opt.step(vec![&mut p], &g, 0.0).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&before));
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Matrix::filled(1, 1, 0.0);
        let g = vec![Matrix::filled(1, 1, 1.0)];
        let mut opt = Sgd::new(0.5, 0.0);
        opt.step(vec![&mut p], &g, 1.0).unwrap();
        assert_eq!(p.get(0, 0), -1.0);
        opt.step(vec![&mut p], &g, 1.0).unwrap();
        assert_eq!(p.get(0, 0), -2.5);
    }
}
