//! Dual-rank adapter around a frozen linear map.
//!
//! A layer computes `f_x = f_o + λ_h ⊙ f_h + λ_l ⊙ f_l` where
//! `f_o = W0·x + b0`, `f_h = A_high·(B_high·x)` and `f_l = A_low·(B_low·x)`.
//! Down-projections start Gaussian with std 0.02 and up-projections at zero,
//! so a fresh layer reproduces the frozen base exactly.

use serde::{Deserialize, Serialize};

use crate::error::{config, dim, Result};
use crate::numerics::{Matrix, Rng};

pub const DOWN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedAdapterLayer {
    w0: Matrix,
    b0: Vec<f64>,
    pub b_low: Matrix,
    pub a_low: Matrix,
    pub b_high: Matrix,
    pub a_high: Matrix,
}

/// Single linear map produced by folding both branches into the base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl MergedLayer {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weight.matvec(x)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }

    /// Row-per-sample batch forward.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_t(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Intermediate products of a batched forward, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    pub z_low: Matrix,
    pub f_low: Matrix,
    pub z_high: Matrix,
    pub f_high: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub b_low: Matrix,
    pub a_low: Matrix,
    pub b_high: Matrix,
    pub a_high: Matrix,
}

impl AdapterGrads {
    pub fn zeros_like(layer: &DecomposedAdapterLayer) -> Self {
        Self {
            b_low: Matrix::zeros(layer.b_low.rows(), layer.b_low.cols()),
            a_low: Matrix::zeros(layer.a_low.rows(), layer.a_low.cols()),
            b_high: Matrix::zeros(layer.b_high.rows(), layer.b_high.cols()),
            a_high: Matrix::zeros(layer.a_high.rows(), layer.a_high.cols()),
        }
    }
}

/// Gradients flowing out of a batched backward through the layer.
#[derive(Debug, Clone)]
pub struct LayerBackward {
    pub params: AdapterGrads,
    pub d_lambda_high: Matrix,
    pub d_lambda_low: Matrix,
    pub d_input: Matrix,
}

impl DecomposedAdapterLayer {
    /// Wraps a frozen base map with freshly initialized branches.
    pub fn new(w0: Matrix, b0: Vec<f64>, rank_low: usize, rank_high: usize, rng: &mut Rng) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        if b0.len() != d_out {
            return Err(dim("DecomposedAdapterLayer::new", format!("bias {} vs d_out {d_out}", b0.len())));
        }
        if rank_low < 1 || rank_low >= rank_high || rank_high > d_in.min(d_out) {
            return Err(config(
                "rank_low/rank_high",
                format!("need 1 <= rank_low < rank_high <= {}, got {rank_low}/{rank_high}", d_in.min(d_out)),
            ));
        }
        Ok(Self {
            b_low: Matrix::randn(rank_low, d_in, DOWN_INIT_STD, rng),
            a_low: Matrix::zeros(d_out, rank_low),
            b_high: Matrix::randn(rank_high, d_in, DOWN_INIT_STD, rng),
            a_high: Matrix::zeros(d_out, rank_high),
            w0,
            b0,
        })
    }

    /// Builds a layer from explicit matrices; shapes are validated.
    pub fn from_parts(
        w0: Matrix,
        b0: Vec<f64>,
        b_low: Matrix,
        a_low: Matrix,
        b_high: Matrix,
        a_high: Matrix,
    ) -> Result<Self> {
        let (d_out, d_in) = w0.shape();
        let ok = b0.len() == d_out
            && b_low.cols() == d_in
            && b_high.cols() == d_in
            && a_low.shape() == (d_out, b_low.rows())
            && a_high.shape() == (d_out, b_high.rows());
        if !ok {
            return Err(dim("DecomposedAdapterLayer::from_parts", "inconsistent branch shapes"));
        }
        Ok(Self {
            w0,
            b0,
            b_low,
            a_low,
            b_high,
            a_high,
        })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn b0(&self) -> &[f64] {
        &self.b0
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn rank_low(&self) -> usize {
        self.b_low.rows()
    }

    pub fn rank_high(&self) -> usize {
        self.b_high.rows()
    }

    /// `(f_h, f_l)` for one input vector.
    pub fn branch_features(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f_h = self.a_high.matvec(&self.b_high.matvec(x)?)?;
        let f_l = self.a_low.matvec(&self.b_low.matvec(x)?)?;
        Ok((f_h, f_l))
    }

    /// Base output `W0·x + b0`.
    pub fn base_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.w0.matvec(x)?;
        for (o, b) in f.iter_mut().zip(&self.b0) {
            *o += b;
        }
        Ok(f)
    }

    pub fn fuse(&self, x: &[f64], lambda_high: &[f64], lambda_low: &[f64]) -> Result<Vec<f64>> {
        self.check_lambda(lambda_high, lambda_low)?;
        let (f_h, f_l) = self.branch_features(x)?;
        let mut f = self.base_output(x)?;
        for j in 0..f.len() {
            f[j] += lambda_high[j] * f_h[j] + lambda_low[j] * f_l[j];
        }
        Ok(f)
    }

    /// `W′ = W0 + diag(λ_h)·A_high·B_high + diag(λ_l)·A_low·B_low`.
    pub fn reparameterize(&self, lambda_high: &[f64], lambda_low: &[f64]) -> Result<MergedLayer> {
        self.check_lambda(lambda_high, lambda_low)?;
        let high = self.a_high.matmul(&self.b_high)?.scale_rows(lambda_high)?;
        let low = self.a_low.matmul(&self.b_low)?.scale_rows(lambda_low)?;
        let weight = self.w0.add(&high)?.add(&low)?;
        Ok(MergedLayer {
            weight,
            bias: self.b0.clone(),
        })
    }

    fn check_lambda(&self, lambda_high: &[f64], lambda_low: &[f64]) -> Result<()> {
        let d = self.d_out();
        if lambda_high.len() != d || lambda_low.len() != d {
            return Err(dim(
                "lambda",
                format!("expected length {d}, got {}/{}", lambda_high.len(), lambda_low.len()),
            ));
        }
        Ok(())
    }

    /// Batched fusion: `x` is n×d_in, each λ matrix n×d_out (one row per sample).
    pub fn forward_batch(&self, x: &Matrix, lambda_high: &Matrix, lambda_low: &Matrix) -> Result<(Matrix, BranchCache)> {
        let n = x.rows();
        if lambda_high.shape() != (n, self.d_out()) || lambda_low.shape() != (n, self.d_out()) {
            return Err(dim("forward_batch", "lambda must be n x d_out"));
        }
        let z_high = x.matmul_t(&self.b_high)?;
        let f_high = z_high.matmul_t(&self.a_high)?;
        let z_low = x.matmul_t(&self.b_low)?;
        let f_low = z_low.matmul_t(&self.a_low)?;
        let mut out = x.matmul_t(&self.w0)?;
        let lh = lambda_high.as_slice();
        let ll = lambda_low.as_slice();
        let fh = f_high.as_slice();
        let fl = f_low.as_slice();
        let d = self.d_out();
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            *o += self.b0[i % d] + lh[i] * fh[i] + ll[i] * fl[i];
        }
        Ok((
            out,
            BranchCache {
                z_low,
                f_low,
                z_high,
                f_high,
            },
        ))
    }

    /// Backward of [`forward_batch`](Self::forward_batch) given `∂L/∂f_x`.
    pub fn backward_batch(
        &self,
        x: &Matrix,
        lambda_high: &Matrix,
        lambda_low: &Matrix,
        cache: &BranchCache,
        grad_out: &Matrix,
    ) -> Result<LayerBackward> {
        let d_lambda_high = grad_out.hadamard(&cache.f_high)?;
        let d_lambda_low = grad_out.hadamard(&cache.f_low)?;
        let d_f_high = grad_out.hadamard(lambda_high)?;
        let d_f_low = grad_out.hadamard(lambda_low)?;

        let a_high = d_f_high.t_matmul(&cache.z_high)?;
        let d_z_high = d_f_high.matmul(&self.a_high)?;
        let b_high = d_z_high.t_matmul(x)?;
        let a_low = d_f_low.t_matmul(&cache.z_low)?;
        let d_z_low = d_f_low.matmul(&self.a_low)?;
        let b_low = d_z_low.t_matmul(x)?;

        let mut d_input = grad_out.matmul(&self.w0)?;
        d_input.add_assign(&d_z_high.matmul(&self.b_high)?)?;
        d_input.add_assign(&d_z_low.matmul(&self.b_low)?)?;

        Ok(LayerBackward {
            params: AdapterGrads {
                b_low,
                a_low,
                b_high,
                a_high,
            },
            d_lambda_high,
            d_lambda_low,
            d_input,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_layer(d_in: usize, d_out: usize, rng: &mut Rng) -> DecomposedAdapterLayer {
        let w0 = Matrix::randn(d_out, d_in, 0.5, rng);
        let b0 = (0..d_out).map(|_| rng.normal()).collect();
        let mut layer = DecomposedAdapterLayer::new(w0, b0, 1, 2, rng).unwrap();
        layer.a_low = Matrix::randn(d_out, 1, 0.5, rng);
        layer.a_high = Matrix::randn(d_out, 2, 0.5, rng);
        layer.b_low = Matrix::randn(1, d_in, 0.5, rng);
        layer.b_high = Matrix::randn(2, d_in, 0.5, rng);
        layer
    }

    #[test]
    fn zero_high_down_projection_gives_zero_high_features() {
        let mut rng = Rng::new(1);
        let mut layer = random_layer(4, 4, &mut rng);
        layer.b_high = Matrix::zeros(2, 4);
        let (f_h, _) = layer.branch_features(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(f_h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_low_branch_returns_input() {
        let w0 = Matrix::zeros(3, 3);
        let layer = DecomposedAdapterLayer::from_parts(
            w0,
            vec![0.0; 3],
            Matrix::identity(3),
            Matrix::identity(3),
            Matrix::zeros(3, 3),
            Matrix::zeros(3, 3),
        )
        .unwrap();
        let (_, f_l) = layer.branch_features(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(f_l, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn branch_features_match_sequential_matmuls() {
        let mut rng = Rng::new(2);
        let layer = random_layer(4, 4, &mut rng);
        let x = [0.3, -0.7, 1.1, 0.2];
        let (f_h, f_l) = layer.branch_features(&x).unwrap();
        let xm = Matrix::new(4, 1, x.to_vec()).unwrap();
        let oracle_h = layer.a_high.matmul(&layer.b_high.matmul(&xm).unwrap()).unwrap();
        let oracle_l = layer.a_low.matmul(&layer.b_low.matmul(&xm).unwrap()).unwrap();
        for j in 0..4 {
            assert!((f_h[j] - oracle_h.get(j, 0)).abs() < 1e-14);
            assert!((f_l[j] - oracle_l.get(j, 0)).abs() < 1e-14);
        }
    }

    #[test]
    fn fuse_passthrough_cases() {
        let mut rng = Rng::new(3);
        let layer = random_layer(3, 2, &mut rng);
        let x = [1.0, -1.0, 0.5];
        let base = layer.base_output(&x).unwrap();
        assert_eq!(layer.fuse(&x, &[0.0, 0.0], &[0.0, 0.0]).unwrap(), base);

        let fresh = DecomposedAdapterLayer::new(layer.w0.clone(), layer.b0.clone(), 1, 2, &mut rng).unwrap();
        assert_eq!(fresh.fuse(&x, &[3.0, -2.0], &[0.7, 5.0]).unwrap(), base);
    }

    #[test]
    fn fuse_hand_checked_two_dim_case() {
        // W0 = I, b0 = (1, 0); low: B=[[1, 0]], A=[[1],[2]]; high: B=[[0,1],[1,1]], A=[[1,0],[0,1]]
        let layer = DecomposedAdapterLayer::from_parts(
            Matrix::identity(2),
            vec![1.0, 0.0],
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            Matrix::identity(2),
        )
        .unwrap();
        // x = (2, 3): f_o = (3, 3); f_h = (3, 5); f_l = (2, 4)
        // λ_h = (1, 0.5), λ_l = (2, -1) → (3+3+4, 3+2.5-4) = (10, 1.5)
        let f = layer.fuse(&[2.0, 3.0], &[1.0, 0.5], &[2.0, -1.0]).unwrap();
        assert_eq!(f, vec![10.0, 1.5]);
    }

    #[test]
    fn reparameterize_reduces_to_base_and_lora() {
        let mut rng = Rng::new(4);
        let mut layer = random_layer(3, 3, &mut rng);
        let merged = layer.reparameterize(&[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(&merged.weight, layer.w0());

        layer.a_low = Matrix::zeros(3, 1);
        let merged = layer.reparameterize(&[1.0; 3], &[0.0; 3]).unwrap();
        let lora = layer.w0().add(&layer.a_high.matmul(&layer.b_high).unwrap()).unwrap();
        assert!(merged.weight.max_abs_diff(&lora) < 1e-15);
    }

    #[test]
    fn lambda_length_is_checked() {
        let mut rng = Rng::new(5);
        let layer = random_layer(3, 2, &mut rng);
        assert!(layer.fuse(&[0.0; 3], &[1.0; 3], &[1.0; 2]).is_err());
        assert!(layer.branch_features(&[0.0; 2]).is_err());
    }

    #[test]
    fn rank_constraints_are_enforced() {
        let mut rng = Rng::new(6);
        let w0 = Matrix::zeros(4, 4);
        assert!(DecomposedAdapterLayer::new(w0.clone(), vec![0.0; 4], 2, 2, &mut rng).is_err());
        assert!(DecomposedAdapterLayer::new(w0.clone(), vec![0.0; 4], 0, 2, &mut rng).is_err());
        assert!(DecomposedAdapterLayer::new(w0.clone(), vec![0.0; 4], 2, 5, &mut rng).is_err());
        assert!(DecomposedAdapterLayer::new(w0, vec![0.0; 4], 1, 4, &mut rng).is_ok());
    }

    #[test]
    fn batched_forward_matches_per_sample_fuse() {
        let mut rng = Rng::new(7);
        let layer = random_layer(5, 4, &mut rng);
        let x = Matrix::randn(3, 5, 1.0, &mut rng);
        let lh = Matrix::randn(3, 4, 1.0, &mut rng);
        let ll = Matrix::randn(3, 4, 1.0, &mut rng);
        let (out, _) = layer.forward_batch(&x, &lh, &ll).unwrap();
        for i in 0..3 {
            let f = layer.fuse(x.row(i), lh.row(i), ll.row(i)).unwrap();
            for j in 0..4 {
                assert!((out.get(i, j) - f[j]).abs() < 1e-12);
            }
        }
    }
}
