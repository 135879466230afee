//! Adam over a fixed list of flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{dim, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clears moments and the step counter.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    /// One update. `params[i]` and `grads[i]` must keep the same length
    /// across calls until the next [`reset`](Self::reset).
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim("adam", "parameter and gradient group counts differ"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(dim("adam", "group count changed without reset"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != g.len() {
                return Err(dim("adam", format!("group {i} length changed")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut opt = Adam::new(0.1);
        let mut p = vec![1.0, -1.0, 0.5];
        let g = vec![3.0, -0.2, 0.0];
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = vec![2.0, -3.0];
        for _ in 0..2000 {
            let g = p.clone();
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn group_changes_need_reset() {
        let mut opt = Adam::new(0.1);
        let mut a = vec![0.0];
        opt.step(&mut [&mut a], &[&[1.0]]).unwrap();
        let mut b = vec![0.0, 0.0];
        assert!(opt.step(&mut [&mut b], &[&[1.0, 1.0]]).is_err());
        opt.reset();
        opt.step(&mut [&mut b], &[&[1.0, 1.0]]).unwrap();
        assert_eq!(opt.steps(), 1);
    }
}
