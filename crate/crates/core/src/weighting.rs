//! Decomposed component weighting.
//!
//! Each component `m` carries a weight slice `W_m` (L_w × d), a key `K_m`
//! and an attention vector `A_m` (both of query length). For a query `q` the
//! weighting is `α_m = cos(q ⊙ A_m, K_m)` and the composed weight is
//! `λ = Σ_m α_m W_m`. The first half of λ's rows scales the high-rank branch
//! and the second half the low-rank branch.

use serde::{Deserialize, Serialize};

use crate::error::{config, dim, Result};
use crate::numerics::{cosine_sim, cosine_sim_grad, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// L_w × d weight slice.
    pub weight: Matrix,
    pub key: Vec<f64>,
    pub attention: Vec<f64>,
    pub frozen: bool,
}

/// How a composed λ (L_w × d) is reduced to per-branch vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaSplit {
    /// Rows `0..L_w/2` feed the high branch, `L_w/2..L_w` the low branch.
    Halves,
    /// All rows averaged; both outputs are the same vector.
    Whole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBank {
    components: Vec<Component>,
    weight_len: usize,
    dim: usize,
    query_dim: usize,
    learn_attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGrads {
    pub weight: Matrix,
    pub key: Vec<f64>,
    pub attention: Vec<f64>,
}

/// Mean of the rows of a (pooled) activation; a single row is returned as is.
/// The result is a plain value, so nothing downstream differentiates through it.
pub fn query(inputs: &Matrix) -> Result<QueryVector> {
    if inputs.rows() == 0 {
        return Err(dim("query", "empty input"));
    }
    let n = inputs.rows() as f64;
    let mut q = vec![0.0; inputs.cols()];
    for r in 0..inputs.rows() {
        for (acc, v) in q.iter_mut().zip(inputs.row(r)) {
            *acc += v;
        }
    }
    q.iter_mut().for_each(|v| *v /= n);
    Ok(QueryVector(q))
}

/// Splits λ (L_w × d) into `(λ_h, λ_l)` by averaging each half of the rows.
pub fn split_lambda(lambda: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = lambda.rows();
    if rows == 0 || !rows.is_multiple_of(2) {
        return Err(config("weight_len", format!("must be even and positive, got {rows}")));
    }
    let half = rows / 2;
    Ok((row_mean(lambda, 0..half), row_mean(lambda, half..rows)))
}

fn row_mean(m: &Matrix, range: std::ops::Range<usize>) -> Vec<f64> {
    let count = range.len() as f64;
    let mut out = vec![0.0; m.cols()];
    for r in range {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= count);
    out
}

impl ComponentBank {
    pub fn new(weight_len: usize, dim: usize, query_dim: usize, learn_attention: bool) -> Result<Self> {
        if weight_len == 0 {
            return Err(config("weight_len", "must be positive"));
        }
        Ok(Self {
            components: Vec::new(),
            weight_len,
            dim,
            query_dim,
            learn_attention,
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weight_len(&self) -> usize {
        self.weight_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn query_dim(&self) -> usize {
        self.query_dim
    }

    pub fn learns_attention(&self) -> bool {
        self.learn_attention
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [Component] {
        &mut self.components
    }

    pub fn frozen_count(&self) -> usize {
        self.components.iter().filter(|c| c.frozen).count()
    }

    pub fn push(&mut self, component: Component) -> Result<()> {
        if component.weight.shape() != (self.weight_len, self.dim)
            || component.key.len() != self.query_dim
            || component.attention.len() != self.query_dim
        {
            return Err(dim("ComponentBank::push", "component shape does not match bank"));
        }
        self.components.push(component);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.components.iter_mut().for_each(|c| c.frozen = true);
    }

    /// Keys as a d_q × M matrix (one column per component).
    pub fn keys(&self) -> Matrix {
        self.columns(|c| &c.key)
    }

    /// Attention vectors as a d_q × M matrix.
    pub fn attention(&self) -> Matrix {
        self.columns(|c| &c.attention)
    }

    fn columns(&self, pick: impl Fn(&Component) -> &Vec<f64>) -> Matrix {
        let mut m = Matrix::zeros(self.query_dim, self.len());
        for (j, c) in self.components.iter().enumerate() {
            m.set_column(j, pick(c));
        }
        m
    }

    pub fn attention_weights(&self, q: &QueryVector) -> Result<Vec<f64>> {
        if q.0.len() != self.query_dim {
            return Err(dim(
                "attention_weights",
                format!("query length {} vs {}", q.0.len(), self.query_dim),
            ));
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                let attended: Vec<f64> = q.0.iter().zip(&c.attention).map(|(a, b)| a * b).collect();
                cosine_sim(&attended, &c.key)
            })
            .collect())
    }

    /// `λ = Σ_m α_m W_m`.
    pub fn compose_lambda(&self, alpha: &[f64]) -> Result<Matrix> {
        if alpha.len() != self.len() {
            return Err(dim("compose_lambda", format!("{} weights for {} components", alpha.len(), self.len())));
        }
        let mut lambda = Matrix::zeros(self.weight_len, self.dim);
        for (a, c) in alpha.iter().zip(&self.components) {
            lambda.axpy(*a, &c.weight)?;
        }
        Ok(lambda)
    }

    /// Per-component reduced weight vectors `(high, low)` under `split`.
    fn reduced(&self, split: LambdaSplit) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if split == LambdaSplit::Halves && !self.weight_len.is_multiple_of(2) {
            return Err(config("weight_len", format!("must be even to split, got {}", self.weight_len)));
        }
        let half = self.weight_len / 2;
        Ok(self
            .components
            .iter()
            .map(|c| match split {
                LambdaSplit::Halves => (row_mean(&c.weight, 0..half), row_mean(&c.weight, half..self.weight_len)),
                LambdaSplit::Whole => {
                    let m = row_mean(&c.weight, 0..self.weight_len);
                    (m.clone(), m)
                }
            })
            .collect())
    }

    /// Weighting for a batch of per-sample queries (n × d_q) → n × M.
    pub fn weights_batch(&self, queries: &Matrix) -> Result<Matrix> {
        if queries.cols() != self.query_dim {
            return Err(dim("weights_batch", "query width"));
        }
        let mut alpha = Matrix::zeros(queries.rows(), self.len());
        for i in 0..queries.rows() {
            let q = queries.row(i);
            for (m, c) in self.components.iter().enumerate() {
                let attended: Vec<f64> = q.iter().zip(&c.attention).map(|(a, b)| a * b).collect();
                alpha.set(i, m, cosine_sim(&attended, &c.key));
            }
        }
        Ok(alpha)
    }

    /// Per-sample `(λ_h, λ_l)` rows from a weighting matrix (n × M).
    pub fn lambda_batch(&self, alpha: &Matrix, split: LambdaSplit) -> Result<(Matrix, Matrix)> {
        if alpha.cols() != self.len() {
            return Err(dim("lambda_batch", "alpha width"));
        }
        let reduced = self.reduced(split)?;
        let n = alpha.rows();
        let mut high = Matrix::zeros(n, self.dim);
        let mut low = Matrix::zeros(n, self.dim);
        for i in 0..n {
            for (m, (rh, rl)) in reduced.iter().enumerate() {
                let a = alpha.get(i, m);
                if a == 0.0 {
                    continue;
                }
                for (o, v) in high.row_mut(i).iter_mut().zip(rh) {
                    *o += a * v;
                }
                for (o, v) in low.row_mut(i).iter_mut().zip(rl) {
                    *o += a * v;
                }
            }
        }
        Ok((high, low))
    }

    /// Backward through `lambda_batch` and `weights_batch`.
    ///
    /// Takes the per-sample queries, the weighting they produced and the
    /// upstream `∂L/∂λ_h`, `∂L/∂λ_l` (n × d); returns one gradient per
    /// component. Attention gradients are zero when the bank does not learn
    /// attention.
    pub fn backward_batch(
        &self,
        queries: &Matrix,
        alpha: &Matrix,
        d_high: &Matrix,
        d_low: &Matrix,
        split: LambdaSplit,
    ) -> Result<Vec<ComponentGrads>> {
        let reduced = self.reduced(split)?;
        let n = queries.rows();
        let half = self.weight_len / 2;
        let mut grads = Vec::with_capacity(self.len());
        for (m, c) in self.components.iter().enumerate() {
            let (rh, rl) = &reduced[m];
            let mut g_high = vec![0.0; self.dim];
            let mut g_low = vec![0.0; self.dim];
            let mut key = vec![0.0; self.query_dim];
            let mut attention = vec![0.0; self.query_dim];
            for i in 0..n {
                let a = alpha.get(i, m);
                let dh = d_high.row(i);
                let dl = d_low.row(i);
                for j in 0..self.dim {
                    g_high[j] += a * dh[j];
                    g_low[j] += a * dl[j];
                }
                let d_alpha: f64 = dh.iter().zip(rh).map(|(x, y)| x * y).sum::<f64>()
                    + dl.iter().zip(rl).map(|(x, y)| x * y).sum::<f64>();
                if d_alpha == 0.0 {
                    continue;
                }
                let q = queries.row(i);
                let attended: Vec<f64> = q.iter().zip(&c.attention).map(|(x, y)| x * y).collect();
                let (_, d_u, d_k) = cosine_sim_grad(&attended, &c.key);
                for j in 0..self.query_dim {
                    key[j] += d_alpha * d_k[j];
                    if self.learn_attention {
                        attention[j] += d_alpha * d_u[j] * q[j];
                    }
                }
            }
            let mut weight = Matrix::zeros(self.weight_len, self.dim);
            for r in 0..self.weight_len {
                let row = weight.row_mut(r);
                match split {
                    LambdaSplit::Halves => {
                        let (src, count) = if r < half { (&g_high, half) } else { (&g_low, self.weight_len - half) };
                        for (o, v) in row.iter_mut().zip(src) {
                            *o = v / count as f64;
                        }
                    }
                    LambdaSplit::Whole => {
                        for j in 0..self.dim {
                            row[j] = (g_high[j] + g_low[j]) / self.weight_len as f64;
                        }
                    }
                }
            }
            grads.push(ComponentGrads { weight, key, attention });
        }
        Ok(grads)
    }
}
