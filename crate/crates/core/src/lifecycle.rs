//! Task-boundary mechanics: orthogonal initialization, bank expansion with
//! freezing, the orthogonality penalty and stochastic restoration.

use serde::{Deserialize, Serialize};

use crate::error::{config, dim, Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::weighting::{Component, ComponentBank};

/// Thin QR of a d×n matrix (n ≤ d) by Householder reflections. Returns the
/// d×n orthonormal factor with signs chosen so that `diag(R) ≥ 0`.
fn householder_q(a: &Matrix) -> Matrix {
    let (d, n) = a.shape();
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut diag = vec![0.0; n];
    for k in 0..n {
        let x: Vec<f64> = (k..d).map(|i| r.get(i, k)).collect();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if x[0] >= 0.0 { -nx } else { nx };
        let mut v = x;
        v[0] -= alpha;
        let nv = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if nv > 0.0 {
            v.iter_mut().for_each(|t| *t /= nv);
            for j in k..n {
                let proj: f64 = (k..d).map(|i| v[i - k] * r.get(i, j)).sum();
                for i in k..d {
                    r.set(i, j, r.get(i, j) - 2.0 * v[i - k] * proj);
                }
            }
        }
        diag[k] = r.get(k, k);
        reflectors.push(v);
    }
    let mut q = Matrix::zeros(d, n);
    for j in 0..n {
        q.set(j, j, 1.0);
    }
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let proj: f64 = (k..d).map(|i| v[i - k] * q.get(i, j)).sum();
            if proj == 0.0 {
                continue;
            }
            for i in k..d {
                q.set(i, j, q.get(i, j) - 2.0 * v[i - k] * proj);
            }
        }
    }
    for (j, rjj) in diag.iter().enumerate() {
        if *rjj < 0.0 {
            for i in 0..d {
                q.set(i, j, -q.get(i, j));
            }
        }
    }
    q
}

/// n×d matrix with orthonormal rows, from the QR factor of a seeded Gaussian.
pub fn orthogonal_init(n: usize, d: usize, rng: &mut Rng) -> Result<Matrix> {
    if n > d {
        return Err(Error::TooManyRows { n, d });
    }
    let g = Matrix::randn(n, d, 1.0, rng);
    Ok(householder_q(&g.transpose()).transpose())
}

/// `n` orthonormal rows that are also orthogonal to the span of `existing`.
///
/// When `existing.len() + n > d` the complement is too small; the new rows are
/// then only orthonormal among themselves.
pub fn orthonormal_extension(existing: &[&[f64]], n: usize, d: usize, rng: &mut Rng) -> Result<Matrix> {
    if n > d {
        return Err(Error::TooManyRows { n, d });
    }
    if existing.iter().any(|r| r.len() != d) {
        return Err(dim("orthonormal_extension", "existing row length"));
    }
    let k = existing.len();
    if k + n > d {
        log::warn!("{k} existing + {n} new rows exceed dimension {d}; new rows only mutually orthogonal");
        return orthogonal_init(n, d, rng);
    }
    let g = Matrix::randn(n, d, 1.0, rng);
    let mut stacked = Matrix::zeros(d, k + n);
    for (j, row) in existing.iter().enumerate() {
        stacked.set_column(j, row);
    }
    for j in 0..n {
        stacked.set_column(k + j, g.row(j));
    }
    let q = householder_q(&stacked);
    let mut out = Matrix::zeros(n, d);
    for j in 0..n {
        out.row_mut(j).copy_from_slice(&q.column(k + j));
    }
    Ok(out)
}

/// `‖B·Bᵀ − I‖²_F`.
pub fn ortho_loss(b: &Matrix) -> f64 {
    ortho_loss_grad(b).0
}

/// Orthogonality penalty and its gradient `4·(B·Bᵀ − I)·B`.
pub fn ortho_loss_grad(b: &Matrix) -> (f64, Matrix) {
    let mut gram = b.matmul_t(b).expect("square gram");
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) - 1.0);
    }
    let loss = gram.frobenius_sq();
    let grad = gram.matmul(b).expect("gram times b").scale(4.0);
    (loss, grad)
}

/// Freezes every existing component and appends `per_task` new ones for
/// task `task` (1-based). Keys, attention vectors and each weight row slice
/// are initialized orthonormal and orthogonal to the frozen ones.
pub fn expand_for_task(bank: &mut ComponentBank, task: usize, per_task: usize, rng: &mut Rng) -> Result<()> {
    if task == 0 {
        return Err(config("task", "task index is 1-based"));
    }
    if per_task == 0 {
        return Err(config("per_task", "must be at least 1"));
    }
    let expected = (task - 1) * per_task;
    if bank.len() != expected {
        return Err(config(
            "task",
            format!("bank has {} components, expected {expected} before task {task}", bank.len()),
        ));
    }
    bank.freeze_all();
    let (dq, d, lw) = (bank.query_dim(), bank.dim(), bank.weight_len());

    let existing_keys: Vec<&[f64]> = bank.components().iter().map(|c| c.key.as_slice()).collect();
    let keys = orthonormal_extension(&existing_keys, per_task, dq, rng)?;

    let attention = if bank.learns_attention() {
        let existing: Vec<&[f64]> = bank.components().iter().map(|c| c.attention.as_slice()).collect();
        orthonormal_extension(&existing, per_task, dq, rng)?
    } else {
        Matrix::filled(per_task, dq, 1.0)
    };

    let mut weights = vec![Matrix::zeros(lw, d); per_task];
    for r in 0..lw {
        let existing: Vec<&[f64]> = bank.components().iter().map(|c| c.weight.row(r)).collect();
        let slice = orthonormal_extension(&existing, per_task, d, rng)?;
        for (j, w) in weights.iter_mut().enumerate() {
            w.row_mut(r).copy_from_slice(slice.row(j));
        }
    }

    for (j, weight) in weights.into_iter().enumerate() {
        bank.push(Component {
            weight,
            key: keys.row(j).to_vec(),
            attention: attention.row(j).to_vec(),
            frozen: false,
        })?;
    }
    Ok(())
}

/// Bernoulli restoration schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationPolicy {
    pub p: f64,
    pub interval: u64,
}

impl RestorationPolicy {
    pub fn new(p: f64, interval: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(config("restore_p", format!("must be in [0, 1], got {p}")));
        }
        if interval < 1 {
            return Err(config("restore_interval", "must be >= 1"));
        }
        Ok(Self { p, interval })
    }

    /// True on optimizer steps `interval, 2·interval, …` (1-based step count).
    pub fn is_due(&self, step: u64) -> bool {
        step > 0 && step.is_multiple_of(self.interval)
    }
}

impl Default for RestorationPolicy {
    fn default() -> Self {
        Self { p: 0.01, interval: 200 }
    }
}

/// Task-start values of every restoration-eligible parameter, keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceSnapshot {
    entries: Vec<(String, Vec<f64>)>,
}

impl SourceSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.entries.push((name.into(), values));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Resets each element of every snapshotted parameter to its snapshot value
/// with probability `policy.p`, independently. Parameters absent from the
/// snapshot are left alone. Returns the number of restored elements.
pub fn apply_restoration(
    params: &mut [(String, &mut [f64])],
    snapshot: &SourceSnapshot,
    policy: &RestorationPolicy,
    rng: &mut Rng,
) -> Result<usize> {
    let mut restored = 0;
    for (name, values) in params.iter_mut() {
        let Some(source) = snapshot.get(name) else {
            continue;
        };
        if source.len() != values.len() {
            return Err(dim("apply_restoration", format!("{name}: {} vs {}", source.len(), values.len())));
        }
        for (v, s) in values.iter_mut().zip(source) {
            if rng.bernoulli(policy.p) {
                *v = *s;
                restored += 1;
            }
        }
    }
    Ok(restored)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Classical Gram–Schmidt on the rows of `g`.
    fn gram_schmidt(g: &Matrix) -> Matrix {
        let (n, d) = g.shape();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let mut v = g.row(i).to_vec();
            for j in 0..i {
                let u = out.row(j).to_vec();
                let p: f64 = g.row(i).iter().zip(&u).map(|(a, b)| a * b).sum();
                for (vk, uk) in v.iter_mut().zip(&u) {
                    *vk -= p * uk;
                }
            }
            let nv = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            out.row_mut(i).copy_from_slice(&v.iter().map(|t| t / nv).collect::<Vec<_>>());
        }
        out
    }

    fn gram_defect(b: &Matrix) -> f64 {
        let mut gram = b.matmul_t(b).unwrap();
        for i in 0..gram.rows() {
            gram.set(i, i, gram.get(i, i) - 1.0);
        }
        gram.frobenius_sq()
    }

    #[test]
    fn single_row_is_unit_norm() {
        let b = orthogonal_init(1, 7, &mut Rng::new(1)).unwrap();
        assert!((b.row(0).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_gram_schmidt_on_same_draw() {
        let b = orthogonal_init(4, 16, &mut Rng::new(42)).unwrap();
        let g = Matrix::randn(4, 16, 1.0, &mut Rng::new(42));
        let oracle = gram_schmidt(&g);
        assert!(b.max_abs_diff(&oracle) < 1e-10);
        assert!(gram_defect(&b) < 1e-10);
    }

    #[test]
    fn rejects_more_rows_than_columns() {
        assert!(matches!(
            orthogonal_init(5, 4, &mut Rng::new(0)),
            Err(Error::TooManyRows { n: 5, d: 4 })
        ));
    }

    #[test]
    fn ortho_loss_hand_cases() {
        let b = orthogonal_init(3, 5, &mut Rng::new(2)).unwrap();
        assert!(ortho_loss(&b) < 1e-20);
        assert_eq!(ortho_loss(&Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()), 1.0);
        assert_eq!(ortho_loss(&Matrix::identity(2).scale(2.0)), 18.0);
    }

    #[test]
    fn ortho_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        for _ in 0..5 {
            let b = Matrix::randn(4, 8, 0.5, &mut rng);
            let (_, g) = ortho_loss_grad(&b);
            let mut flat = b.as_slice().to_vec();
            let numeric = crate::numerics::central_difference(&mut flat, 1e-5, |p| {
                ortho_loss(&Matrix::new(4, 8, p.to_vec()).unwrap())
            });
            for (a, n) in g.as_slice().iter().zip(&numeric) {
                assert!((a - n).abs() / n.abs().max(1.0) < 1e-6, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn extension_is_orthogonal_to_existing() {
        let mut rng = Rng::new(3);
        let first = orthogonal_init(3, 10, &mut rng).unwrap();
        let rows: Vec<&[f64]> = (0..3).map(|i| first.row(i)).collect();
        let ext = orthonormal_extension(&rows, 4, 10, &mut rng).unwrap();
        assert!(gram_defect(&ext) < 1e-20);
        let cross = ext.matmul_t(&first).unwrap();
        assert!(cross.frobenius_sq() < 1e-20);
    }

    #[test]
    fn expansion_freezes_and_appends() {
        let mut rng = Rng::new(4);
        let mut bank = ComponentBank::new(4, 6, 5, true).unwrap();
        expand_for_task(&mut bank, 1, 2, &mut rng).unwrap();
        assert_eq!((bank.len(), bank.frozen_count()), (2, 0));
        expand_for_task(&mut bank, 2, 2, &mut rng).unwrap();
        assert_eq!((bank.len(), bank.frozen_count()), (4, 2));
        assert!(bank.components()[..2].iter().all(|c| c.frozen));
        assert!(bank.components()[2..].iter().all(|c| !c.frozen));
        let keys = bank.keys().transpose();
        assert!(gram_defect(&keys) < 1e-20);
        for r in 0..4 {
            let rows: Vec<Vec<f64>> = bank.components().iter().map(|c| c.weight.row(r).to_vec()).collect();
            assert!(gram_defect(&Matrix::from_rows(&rows).unwrap()) < 1e-20);
        }
        assert!(expand_for_task(&mut bank, 2, 2, &mut rng).is_err());
    }

    #[test]
    fn fixed_attention_is_all_ones() {
        let mut bank = ComponentBank::new(2, 3, 3, false).unwrap();
        expand_for_task(&mut bank, 1, 2, &mut Rng::new(5)).unwrap();
        assert!(bank.components().iter().all(|c| c.attention == vec![1.0; 3]));
    }

    #[test]
    fn restoration_extremes() {
        let snapshot = {
            let mut s = SourceSnapshot::new();
            s.insert("a", vec![0.0; 50]);
            s
        };
        let mut values = vec![1.0; 50];
        let mut other = vec![2.0; 5];
        let mut rng = Rng::new(6);
        {
            let mut params = vec![("a".to_string(), values.as_mut_slice()), ("b".to_string(), other.as_mut_slice())];
            let policy = RestorationPolicy::new(0.0, 1).unwrap();
            assert_eq!(apply_restoration(&mut params, &snapshot, &policy, &mut rng).unwrap(), 0);
        }
        assert!(values.iter().all(|v| *v == 1.0));
        {
            let mut params = vec![("a".to_string(), values.as_mut_slice()), ("b".to_string(), other.as_mut_slice())];
            let policy = RestorationPolicy::new(1.0, 1).unwrap();
            assert_eq!(apply_restoration(&mut params, &snapshot, &policy, &mut rng).unwrap(), 50);
        }
        assert!(values.iter().all(|v| *v == 0.0));
        assert!(other.iter().all(|v| *v == 2.0));
    }

    #[test]
    fn policy_validation_and_schedule() {
        assert!(RestorationPolicy::new(1.5, 10).is_err());
        assert!(RestorationPolicy::new(0.1, 0).is_err());
        let p = RestorationPolicy::default();
        assert_eq!((p.p, p.interval), (0.01, 200));
        assert!(!p.is_due(0) && !p.is_due(199) && p.is_due(200) && p.is_due(400));
    }
}
