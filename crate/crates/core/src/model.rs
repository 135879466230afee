//! Two-hidden-layer classifier with decomposed adapters on both hidden layers.
//!
//! The backbone weights are pretrained once on a generic mixture and then
//! frozen inside [`DecomposedAdapterLayer`]s. A zero-initialised head covers
//! the union label space; each sample is scored only on its task's slice.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterGrads, BranchCache, DecomposedAdapterLayer, MergedLayer};
use crate::checkpoint::NamedArray;
use crate::error::{config, dim, Error, Result};
use crate::lifecycle::{expand_for_task, ortho_loss_grad};
use crate::numerics::{relative_error, GradTape, Matrix, Rng};
use crate::optim::Adam;
use crate::weighting::{Component, ComponentBank, ComponentGrads, LambdaSplit};

const STREAM_PRETRAIN: u64 = 0x7072_6574_0001;
const STREAM_BACKBONE: u64 = 0x7072_6574_0002;
const STREAM_ADAPTER: u64 = 0x7072_6574_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub high_branch: bool,
    pub low_branch: bool,
    pub weighting: bool,
    pub attention: bool,
    pub ortho: bool,
    pub restore: bool,
}

impl Ablation {
    pub const ALL: Self = Self {
        high_branch: true,
        low_branch: true,
        weighting: true,
        attention: true,
        ortho: true,
        restore: true,
    };

    pub const NONE: Self = Self {
        high_branch: false,
        low_branch: false,
        weighting: false,
        attention: false,
        ortho: false,
        restore: false,
    };

    /// Rows E1..E8 of the component ablation, cumulative from E4 onwards.
    pub fn table_row(row: usize) -> Option<Self> {
        let both = Self {
            high_branch: true,
            low_branch: true,
            ..Self::NONE
        };
        Some(match row {
            1 => Self::NONE,
            2 => Self {
                high_branch: true,
                ..Self::NONE
            },
            3 => Self {
                low_branch: true,
                ..Self::NONE
            },
            4 => both,
            5 => Self { restore: true, ..both },
            6 => Self {
                restore: true,
                weighting: true,
                ..both
            },
            7 => Self {
                ortho: false,
                ..Self::ALL
            },
            8 => Self::ALL,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_in: usize,
    pub hidden: usize,
    pub classes_per_task: usize,
    pub num_tasks: usize,
    pub rank_low: usize,
    pub rank_high: usize,
    pub weight_len: usize,
    pub ablation: Ablation,
    pub scalar_lambda: bool,
    pub dual_bank: bool,
}

impl ModelSpec {
    pub fn total_classes(&self) -> usize {
        self.classes_per_task * self.num_tasks
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 {
            return Err(config("d_in/hidden", "must be positive"));
        }
        let cap = self.d_in.min(self.hidden);
        if !(1 <= self.rank_low && self.rank_low < self.rank_high && self.rank_high <= cap) {
            return Err(config(
                "rank_low/rank_high",
                format!("need 1 <= rank_low < rank_high <= {cap}, got {}/{}", self.rank_low, self.rank_high),
            ));
        }
        if self.weight_len == 0 || (!self.dual_bank && !self.weight_len.is_multiple_of(2)) {
            return Err(config("weight_len", format!("must be even and >= 2, got {}", self.weight_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub samples: usize,
    pub classes: usize,
    /// Leading input coordinates the generic data occupies; the rest are zero.
    pub dims: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            classes: 8,
            dims: 32,
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLayer {
    pub adapter: DecomposedAdapterLayer,
    /// Shared bank (half-split) or the high-branch bank in dual mode.
    pub bank: ComponentBank,
    /// Low-branch bank, only used in dual mode.
    pub bank_low: Option<ComponentBank>,
}

impl AdaptedLayer {
    pub fn banks(&self) -> impl Iterator<Item = &ComponentBank> {
        std::iter::once(&self.bank).chain(self.bank_low.iter())
    }

    pub fn banks_mut(&mut self) -> impl Iterator<Item = &mut ComponentBank> {
        std::iter::once(&mut self.bank).chain(self.bank_low.iter_mut())
    }
}

/// Per layer: gradients for the main bank and the optional low bank.
type BankPairGrads = (Vec<ComponentGrads>, Vec<ComponentGrads>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<AdaptedLayer>,
    /// total_classes × hidden.
    pub head: Matrix,
    pub head_bias: Vec<f64>,
    /// Mean layer inputs recorded at the end of each task: `[slot][layer]`.
    pub static_queries: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    /// Task-local labels.
    pub labels: Vec<usize>,
    /// Head slice (stream position) of each sample.
    pub slots: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// λ recomputed from every input.
    Dynamic,
    /// λ from the task's stored mean query, folded into merged layers.
    Static,
}

/// Identifies one trainable array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Head,
    HeadBias,
    Adapter { layer: usize, part: AdapterPart },
    Bank { layer: usize, low: bool, component: usize, part: BankPart },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterPart {
    BLow,
    ALow,
    BHigh,
    AHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BankPart {
    Weight,
    Key,
    Attention,
}

impl ParamId {
    /// Coarse group used by the gradient check report.
    pub fn group(&self) -> &'static str {
        match self {
            Self::Head | Self::HeadBias => "head",
            Self::Adapter { part: AdapterPart::AHigh | AdapterPart::BHigh, .. } => "adapter.high",
            Self::Adapter { .. } => "adapter.low",
            Self::Bank { part: BankPart::Weight, .. } => "bank.weight",
            Self::Bank { part: BankPart::Key, .. } => "bank.key",
            Self::Bank { part: BankPart::Attention, .. } => "bank.attention",
        }
    }
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Head => write!(f, "head.weight"),
            Self::HeadBias => write!(f, "head.bias"),
            Self::Adapter { layer, part } => {
                let p = match part {
                    AdapterPart::BLow => "b_low",
                    AdapterPart::ALow => "a_low",
                    AdapterPart::BHigh => "b_high",
                    AdapterPart::AHigh => "a_high",
                };
                write!(f, "layer{layer}.{p}")
            }
            Self::Bank { layer, low, component, part } => {
                let b = if *low { "bank_low" } else { "bank" };
                let p = match part {
                    BankPart::Weight => "weight",
                    BankPart::Key => "key",
                    BankPart::Attention => "attention",
                };
                write!(f, "layer{layer}.{b}.c{component}.{p}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub task: f64,
    pub ortho: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub adapter: AdapterGrads,
    pub bank: Vec<ComponentGrads>,
    pub bank_low: Vec<ComponentGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub head: Matrix,
    pub head_bias: Vec<f64>,
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::Head => self.head.as_slice(),
            ParamId::HeadBias => &self.head_bias,
            ParamId::Adapter { layer, part } => {
                let g = &self.layers[layer].adapter;
                match part {
                    AdapterPart::BLow => g.b_low.as_slice(),
                    AdapterPart::ALow => g.a_low.as_slice(),
                    AdapterPart::BHigh => g.b_high.as_slice(),
                    AdapterPart::AHigh => g.a_high.as_slice(),
                }
            }
            ParamId::Bank { layer, low, component, part } => {
                let l = &self.layers[layer];
                let c = if low { &l.bank_low[component] } else { &l.bank[component] };
                match part {
                    BankPart::Weight => c.weight.as_slice(),
                    BankPart::Key => &c.key,
                    BankPart::Attention => &c.attention,
                }
            }
        }
    }
}

/// λ for one layer and batch, with what backward needs.
struct LambdaState {
    alpha: Option<Matrix>,
    alpha_low: Option<Matrix>,
    high: Matrix,
    low: Matrix,
}

struct LayerRecord {
    layer: usize,
    input: Matrix,
    lambda: LambdaState,
    cache: BranchCache,
    pre: Matrix,
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn relu_backward(grad: &mut Matrix, pre: &Matrix) {
    for (g, p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Replaces each row by its mean, broadcast across the row.
fn collapse_rows(m: &mut Matrix) {
    let d = m.cols() as f64;
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        row.iter_mut().for_each(|v| *v = mean);
    }
}

fn he_linear(d_out: usize, d_in: usize, rng: &mut Rng) -> (Matrix, Vec<f64>) {
    (Matrix::randn(d_out, d_in, (2.0 / d_in as f64).sqrt(), rng), vec![0.0; d_out])
}

/// Masked softmax cross-entropy over each sample's slice; returns mean loss
/// and `∂L/∂logits`.
fn masked_cross_entropy(logits: &Matrix, labels: &[usize], slots: &[usize], classes: usize) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for i in 0..n {
        if labels[i] >= classes {
            return Err(Error::LabelOutOfRange {
                label: labels[i],
                classes,
            });
        }
        let start = slots[i] * classes;
        if start + classes > logits.cols() {
            return Err(dim("cross_entropy", format!("slot {} outside head", slots[i])));
        }
        let z = &logits.row(i)[start..start + classes];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - z[labels[i]];
        let g = &mut grad.row_mut(i)[start..start + classes];
        for k in 0..classes {
            g[k] = exps[k] / sum / n as f64;
        }
        g[labels[i]] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

/// Pretrains a d_in→hidden→hidden→classes ReLU network on a seeded generic
/// Gaussian mixture and returns the two hidden layers' `(weight, bias)`.
pub fn pretrain_backbone(d_in: usize, hidden: usize, cfg: &PretrainConfig, seed: u64) -> Result<Vec<(Matrix, Vec<f64>)>> {
    if cfg.dims == 0 || cfg.dims > d_in || cfg.classes < 2 || cfg.batch_size == 0 {
        return Err(config("pretrain", "need 0 < dims <= d_in, classes >= 2, batch_size > 0"));
    }
    let mut rng = Rng::derive(seed, STREAM_PRETRAIN, 0);
    let means = Matrix::randn(cfg.classes, cfg.dims, 2.0 / (cfg.dims as f64).sqrt() * 1.5, &mut rng);
    let mut x = Matrix::zeros(cfg.samples, d_in);
    let mut y = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let k = i % cfg.classes;
        for j in 0..cfg.dims {
            x.set(i, j, means.get(k, j) + rng.normal());
        }
        y.push(k);
    }

    let mut init = Rng::derive(seed, STREAM_BACKBONE, 0);
    let (mut w1, mut b1) = he_linear(hidden, d_in, &mut init);
    let (mut w2, mut b2) = he_linear(hidden, hidden, &mut init);
    let (mut w3, mut b3) = he_linear(cfg.classes, hidden, &mut init);
    let mut opt = Adam::new(cfg.lr);
    let slots = vec![0; cfg.samples];
    for _ in 0..cfg.epochs {
        let order = rng.permutation(cfg.samples);
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Matrix::zeros(chunk.len(), d_in);
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).copy_from_slice(x.row(i));
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let forward = |w: &Matrix, b: &[f64], inp: &Matrix| -> Result<Matrix> {
                let mut z = inp.matmul_t(w)?;
                let d = b.len();
                z.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v += b[i % d]);
                Ok(z)
            };
            let z1 = forward(&w1, &b1, &xb)?;
            let h1 = relu(&z1);
            let z2 = forward(&w2, &b2, &h1)?;
            let h2 = relu(&z2);
            let z3 = forward(&w3, &b3, &h2)?;
            let (_, d3) = masked_cross_entropy(&z3, &yb, &slots[..chunk.len()], cfg.classes)?;
            let col_sum = |m: &Matrix| -> Vec<f64> {
                let mut s = vec![0.0; m.cols()];
                for r in 0..m.rows() {
                    s.iter_mut().zip(m.row(r)).for_each(|(a, b)| *a += b);
                }
                s
            };
            let gw3 = d3.t_matmul(&h2)?;
            let gb3 = col_sum(&d3);
            let mut d2 = d3.matmul(&w3)?;
            relu_backward(&mut d2, &z2);
            let gw2 = d2.t_matmul(&h1)?;
            let gb2 = col_sum(&d2);
            let mut d1 = d2.matmul(&w2)?;
            relu_backward(&mut d1, &z1);
            let gw1 = d1.t_matmul(&xb)?;
            let gb1 = col_sum(&d1);
            opt.step(
                &mut [
                    w1.as_mut_slice(),
                    &mut b1,
                    w2.as_mut_slice(),
                    &mut b2,
                    w3.as_mut_slice(),
                    &mut b3,
                ],
                &[gw1.as_slice(), &gb1, gw2.as_slice(), &gb2, gw3.as_slice(), &gb3],
            )?;
        }
    }
    Ok(vec![(w1, b1), (w2, b2)])
}

impl Model {
    /// Builds a model around pretrained `(weight, bias)` pairs, one per hidden layer.
    pub fn new(spec: ModelSpec, backbone: Vec<(Matrix, Vec<f64>)>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::derive(seed, STREAM_ADAPTER, 0);
        let mut layers = Vec::with_capacity(backbone.len());
        for (w0, b0) in backbone {
            let (d_out, d_in) = w0.shape();
            let adapter = DecomposedAdapterLayer::new(w0, b0, spec.rank_low, spec.rank_high, &mut rng)?;
            let learn_attention = spec.ablation.attention;
            let bank = ComponentBank::new(spec.weight_len, d_out, d_in, learn_attention)?;
            let bank_low = if spec.dual_bank {
                Some(ComponentBank::new(spec.weight_len, d_out, d_in, learn_attention)?)
            } else {
                None
            };
            layers.push(AdaptedLayer {
                adapter,
                bank,
                bank_low,
            });
        }
        if layers.len() != 2 || layers[0].adapter.d_in() != spec.d_in || layers[1].adapter.d_in() != spec.hidden {
            return Err(dim("model", "backbone must be d_in -> hidden -> hidden"));
        }
        Ok(Self {
            head: Matrix::zeros(spec.total_classes(), spec.hidden),
            head_bias: vec![0.0; spec.total_classes()],
            static_queries: Vec::new(),
            layers,
            spec,
        })
    }

    fn uses_banks(&self) -> bool {
        self.spec.ablation.weighting
    }

    /// Freezes existing components and appends `per_task` new ones per bank.
    pub fn expand(&mut self, task: usize, per_task: usize, rng: &mut Rng) -> Result<()> {
        if !self.uses_banks() {
            return Ok(());
        }
        for layer in &mut self.layers {
            for bank in layer.banks_mut() {
                expand_for_task(bank, task, per_task, rng)?;
            }
        }
        Ok(())
    }

    fn lambdas(&self, layer: usize, x: &Matrix) -> Result<LambdaState> {
        let l = &self.layers[layer];
        let n = x.rows();
        let d = l.adapter.d_out();
        let ab = self.spec.ablation;
        let mut state = if !ab.weighting {
            LambdaState {
                alpha: None,
                alpha_low: None,
                high: Matrix::filled(n, d, 1.0),
                low: Matrix::filled(n, d, 1.0),
            }
        } else if let Some(bank_low) = &l.bank_low {
            let alpha = l.bank.weights_batch(x)?;
            let (high, _) = l.bank.lambda_batch(&alpha, LambdaSplit::Whole)?;
            let alpha_low = bank_low.weights_batch(x)?;
            let (_, low) = bank_low.lambda_batch(&alpha_low, LambdaSplit::Whole)?;
            LambdaState {
                alpha: Some(alpha),
                alpha_low: Some(alpha_low),
                high,
                low,
            }
        } else {
            let alpha = l.bank.weights_batch(x)?;
            let (high, low) = l.bank.lambda_batch(&alpha, LambdaSplit::Halves)?;
            LambdaState {
                alpha: Some(alpha),
                alpha_low: None,
                high,
                low,
            }
        };
        if ab.weighting && self.spec.scalar_lambda {
            collapse_rows(&mut state.high);
            collapse_rows(&mut state.low);
        }
        if !ab.high_branch {
            state.high = Matrix::zeros(n, d);
        }
        if !ab.low_branch {
            state.low = Matrix::zeros(n, d);
        }
        Ok(state)
    }

    fn forward_taped(&self, x: &Matrix) -> Result<(Matrix, Matrix, GradTape<LayerRecord>)> {
        let mut tape = GradTape::new();
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            let lambda = self.lambdas(i, &h)?;
            let (pre, cache) = self.layers[i].adapter.forward_batch(&h, &lambda.high, &lambda.low)?;
            let next = relu(&pre);
            tape.record(LayerRecord {
                layer: i,
                input: h,
                lambda,
                cache,
                pre,
            });
            h = next;
        }
        let logits = self.head_logits(&h)?;
        Ok((logits, h, tape))
    }

    fn head_logits(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = h.matmul_t(&self.head)?;
        let c = self.head_bias.len();
        z.as_mut_slice().iter_mut().enumerate().for_each(|(i, v)| *v += self.head_bias[i % c]);
        Ok(z)
    }

    /// Hidden activations feeding each adapted layer.
    pub fn layer_inputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let (_, _, tape) = self.forward_taped(x)?;
        let mut inputs: Vec<Matrix> = tape.into_reverse().map(|r| r.input).collect();
        inputs.reverse();
        Ok(inputs)
    }

    /// Per-sample component weights of every layer's (shared or high) bank.
    pub fn layer_alphas(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let inputs = self.layer_inputs(x)?;
        inputs.iter().zip(&self.layers).map(|(h, l)| l.bank.weights_batch(h)).collect()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_taped(x)?.0)
    }

    /// Orthogonality penalty over unfrozen components, with its gradients.
    fn ortho_terms(&self) -> (f64, Vec<BankPairGrads>) {
        let mut total = 0.0;
        let mut out = Vec::new();
        for layer in &self.layers {
            let mut pair = (Vec::new(), Vec::new());
            for (b, bank) in layer.banks().enumerate() {
                let (loss, grads) = bank_ortho(bank);
                total += loss;
                if b == 0 {
                    pair.0 = grads;
                } else {
                    pair.1 = grads;
                }
            }
            out.push(pair);
        }
        (total, out)
    }

    fn ortho_active(&self, beta: f64) -> bool {
        self.spec.ablation.ortho && self.uses_banks() && beta > 0.0
    }

    /// Task loss plus `β ·` orthogonality penalty, without gradients.
    pub fn loss(&self, batch: &Batch, beta: f64) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(dim("loss", "empty batch"));
        }
        let logits = self.logits(&batch.x)?;
        let (task, _) = masked_cross_entropy(&logits, &batch.labels, &batch.slots, self.spec.classes_per_task)?;
        let ortho = if self.ortho_active(beta) { self.ortho_terms().0 } else { 0.0 };
        Ok(LossParts {
            task,
            ortho,
            total: task + beta * ortho,
        })
    }

    /// Loss and gradients for every parameter (frozen ones receive zeros).
    pub fn loss_and_grads(&self, batch: &Batch, beta: f64) -> Result<(LossParts, Gradients)> {
        if batch.is_empty() {
            return Err(dim("loss", "empty batch"));
        }
        let (logits, h, tape) = self.forward_taped(&batch.x)?;
        let (task, d_logits) = masked_cross_entropy(&logits, &batch.labels, &batch.slots, self.spec.classes_per_task)?;

        let head = d_logits.t_matmul(&h)?;
        let mut head_bias = vec![0.0; self.head_bias.len()];
        for r in 0..d_logits.rows() {
            head_bias.iter_mut().zip(d_logits.row(r)).for_each(|(a, b)| *a += b);
        }
        let mut upstream = d_logits.matmul(&self.head)?;

        let mut layer_grads: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        for rec in tape.into_reverse() {
            relu_backward(&mut upstream, &rec.pre);
            let layer = &self.layers[rec.layer];
            let back =
                layer
                    .adapter
                    .backward_batch(&rec.input, &rec.lambda.high, &rec.lambda.low, &rec.cache, &upstream)?;
            let (bank, bank_low) = self.lambda_backward(rec.layer, &rec.input, &rec.lambda, back.d_lambda_high, back.d_lambda_low)?;
            layer_grads[rec.layer] = Some(LayerGrads {
                adapter: back.params,
                bank,
                bank_low,
            });
            upstream = back.d_input;
        }
        let mut layers: Vec<LayerGrads> = layer_grads.into_iter().map(|g| g.expect("every layer recorded")).collect();

        let mut ortho = 0.0;
        if self.ortho_active(beta) {
            let (value, grads) = self.ortho_terms();
            ortho = value;
            for (lg, (g_bank, g_low)) in layers.iter_mut().zip(grads) {
                for (acc, g) in lg.bank.iter_mut().zip(g_bank).chain(lg.bank_low.iter_mut().zip(g_low)) {
                    acc.weight.axpy(beta, &g.weight)?;
                    acc.key.iter_mut().zip(&g.key).for_each(|(a, b)| *a += beta * b);
                    acc.attention.iter_mut().zip(&g.attention).for_each(|(a, b)| *a += beta * b);
                }
            }
        }

        for (lg, layer) in layers.iter_mut().zip(&self.layers) {
            for (grads, bank) in [(&mut lg.bank, &layer.bank)].into_iter().chain(
                layer.bank_low.as_ref().map(|b| (&mut lg.bank_low, b)),
            ) {
                for (g, c) in grads.iter_mut().zip(bank.components()) {
                    if c.frozen {
                        g.weight = Matrix::zeros(g.weight.rows(), g.weight.cols());
                        g.key.iter_mut().for_each(|v| *v = 0.0);
                        g.attention.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }

        Ok((
            LossParts {
                task,
                ortho,
                total: task + beta * ortho,
            },
            Gradients {
                head,
                head_bias,
                layers,
            },
        ))
    }

    fn lambda_backward(
        &self,
        layer: usize,
        input: &Matrix,
        state: &LambdaState,
        mut d_high: Matrix,
        mut d_low: Matrix,
    ) -> Result<(Vec<ComponentGrads>, Vec<ComponentGrads>)> {
        let l = &self.layers[layer];
        let ab = self.spec.ablation;
        let empty = |bank: &ComponentBank| -> Vec<ComponentGrads> {
            bank.components()
                .iter()
                .map(|c| ComponentGrads {
                    weight: Matrix::zeros(c.weight.rows(), c.weight.cols()),
                    key: vec![0.0; c.key.len()],
                    attention: vec![0.0; c.attention.len()],
                })
                .collect()
        };
        let Some(alpha) = &state.alpha else {
            return Ok((empty(&l.bank), l.bank_low.as_ref().map(empty).unwrap_or_default()));
        };
        if !ab.high_branch {
            d_high = Matrix::zeros(d_high.rows(), d_high.cols());
        }
        if !ab.low_branch {
            d_low = Matrix::zeros(d_low.rows(), d_low.cols());
        }
        if self.spec.scalar_lambda {
            collapse_rows(&mut d_high);
            collapse_rows(&mut d_low);
        }
        match (&l.bank_low, &state.alpha_low) {
            (Some(bank_low), Some(alpha_low)) => {
                let zeros = Matrix::zeros(d_high.rows(), d_high.cols());
                let g = l.bank.backward_batch(input, alpha, &d_high, &zeros, LambdaSplit::Whole)?;
                let g_low = bank_low.backward_batch(input, alpha_low, &zeros, &d_low, LambdaSplit::Whole)?;
                Ok((g, g_low))
            }
            _ => Ok((l.bank.backward_batch(input, alpha, &d_high, &d_low, LambdaSplit::Halves)?, Vec::new())),
        }
    }

    /// Trainable arrays in a fixed order, frozen and disabled parts excluded.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let ab = self.spec.ablation;
        let mut ids = vec![ParamId::Head, ParamId::HeadBias];
        for (i, layer) in self.layers.iter().enumerate() {
            if ab.low_branch {
                ids.push(ParamId::Adapter { layer: i, part: AdapterPart::BLow });
                ids.push(ParamId::Adapter { layer: i, part: AdapterPart::ALow });
            }
            if ab.high_branch {
                ids.push(ParamId::Adapter { layer: i, part: AdapterPart::BHigh });
                ids.push(ParamId::Adapter { layer: i, part: AdapterPart::AHigh });
            }
            if !self.uses_banks() {
                continue;
            }
            for (b, bank) in layer.banks().enumerate() {
                for (m, c) in bank.components().iter().enumerate() {
                    if c.frozen {
                        continue;
                    }
                    let mut parts = vec![BankPart::Weight, BankPart::Key];
                    if bank.learns_attention() {
                        parts.push(BankPart::Attention);
                    }
                    for part in parts {
                        ids.push(ParamId::Bank {
                            layer: i,
                            low: b == 1,
                            component: m,
                            part,
                        });
                    }
                }
            }
        }
        ids
    }

    /// Mutable views of the arrays named by [`trainable_ids`](Self::trainable_ids), same order.
    pub fn trainable_mut(&mut self) -> Vec<(ParamId, &mut [f64])> {
        let ids = self.trainable_ids();
        let mut out: Vec<(ParamId, &mut [f64])> = Vec::with_capacity(ids.len());
        let Model {
            head,
            head_bias,
            layers,
            ..
        } = self;
        out.push((ParamId::Head, head.as_mut_slice()));
        out.push((ParamId::HeadBias, head_bias.as_mut_slice()));
        let mut pool: Vec<(ParamId, &mut [f64])> = Vec::new();
        for (i, layer) in layers.iter_mut().enumerate() {
            let AdaptedLayer { adapter, bank, bank_low } = layer;
            pool.push((ParamId::Adapter { layer: i, part: AdapterPart::BLow }, adapter.b_low.as_mut_slice()));
            pool.push((ParamId::Adapter { layer: i, part: AdapterPart::ALow }, adapter.a_low.as_mut_slice()));
            pool.push((ParamId::Adapter { layer: i, part: AdapterPart::BHigh }, adapter.b_high.as_mut_slice()));
            pool.push((ParamId::Adapter { layer: i, part: AdapterPart::AHigh }, adapter.a_high.as_mut_slice()));
            for (b, bk) in std::iter::once(bank).chain(bank_low.iter_mut()).enumerate() {
                for (m, c) in bk.components_mut().iter_mut().enumerate() {
                    let Component { weight, key, attention, .. } = c;
                    let id = |part| ParamId::Bank {
                        layer: i,
                        low: b == 1,
                        component: m,
                        part,
                    };
                    pool.push((id(BankPart::Weight), weight.as_mut_slice()));
                    pool.push((id(BankPart::Key), key.as_mut_slice()));
                    pool.push((id(BankPart::Attention), attention.as_mut_slice()));
                }
            }
        }
        let mut slots: Vec<Option<(ParamId, &mut [f64])>> = pool.into_iter().map(Some).collect();
        for id in &ids[2..] {
            let pos = slots
                .iter()
                .position(|s| s.as_ref().is_some_and(|(p, _)| p == id))
                .expect("trainable id exists");
            out.push(slots[pos].take().expect("taken once"));
        }
        out
    }

    /// Gradient arrays aligned with [`trainable_ids`](Self::trainable_ids).
    pub fn flat_grads<'a>(&self, grads: &'a Gradients) -> Vec<&'a [f64]> {
        self.trainable_ids().into_iter().map(|id| grads.get(id)).collect()
    }

    /// Largest gradient magnitude reaching any frozen component.
    pub fn frozen_grad_max(&self, grads: &Gradients) -> f64 {
        let mut max = 0.0f64;
        for (lg, layer) in grads.layers.iter().zip(&self.layers) {
            for (g, c) in lg
                .bank
                .iter()
                .zip(layer.bank.components())
                .chain(lg.bank_low.iter().zip(layer.bank_low.iter().flat_map(|b| b.components())))
            {
                if c.frozen {
                    for v in g.weight.as_slice().iter().chain(&g.key).chain(&g.attention) {
                        max = max.max(v.abs());
                    }
                }
            }
        }
        max
    }

    /// Task-local predictions using the head slice of `slot`.
    pub fn predict(&self, x: &Matrix, slot: usize, mode: EvalMode) -> Result<Vec<usize>> {
        let logits = match mode {
            EvalMode::Dynamic => self.logits(x)?,
            EvalMode::Static => {
                let merged = self.merged_layers(slot)?;
                let mut h = x.clone();
                for m in &merged {
                    h = relu(&m.forward_batch(&h)?);
                }
                self.head_logits(&h)?
            }
        };
        let c = self.spec.classes_per_task;
        let start = slot * c;
        if start + c > logits.cols() {
            return Err(dim("predict", format!("slot {slot} outside head")));
        }
        Ok((0..logits.rows()).map(|i| argmax(&logits.row(i)[start..start + c])).collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize], slot: usize, mode: EvalMode) -> Result<f64> {
        let pred = self.predict(x, slot, mode)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Stores the mean layer inputs of `x` as the static query of `slot`.
    pub fn record_static_query(&mut self, slot: usize, x: &Matrix) -> Result<()> {
        let inputs = self.layer_inputs(x)?;
        let qs = inputs
            .iter()
            .map(|h| crate::weighting::query(h).map(|q| q.0))
            .collect::<Result<Vec<_>>>()?;
        if self.static_queries.len() <= slot {
            self.static_queries.resize(slot + 1, Vec::new());
        }
        self.static_queries[slot] = qs;
        Ok(())
    }

    /// Layers with λ fixed from the stored query of `slot` and folded in.
    pub fn merged_layers(&self, slot: usize) -> Result<Vec<MergedLayer>> {
        let qs = self
            .static_queries
            .get(slot)
            .filter(|q| q.len() == self.layers.len())
            .ok_or_else(|| config("static mode", format!("no stored query for task slot {slot}")))?;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let q = Matrix::new(1, qs[i].len(), qs[i].clone())?;
                let lam = self.lambdas(i, &q)?;
                l.adapter.reparameterize(lam.high.row(0), lam.low.row(0))
            })
            .collect()
    }

    /// Every array of the model, for checkpoints.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = vec![
            NamedArray::new("head.weight", vec![self.head.rows(), self.head.cols()], self.head.as_slice().to_vec()),
            NamedArray::new("head.bias", vec![self.head_bias.len()], self.head_bias.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let a = &l.adapter;
            let mat = |name: &str, m: &Matrix| NamedArray::new(format!("layer{i}.{name}"), vec![m.rows(), m.cols()], m.as_slice().to_vec());
            out.push(mat("w0", a.w0()));
            out.push(NamedArray::new(format!("layer{i}.b0"), vec![a.d_out()], a.b0().to_vec()));
            out.push(mat("b_low", &a.b_low));
            out.push(mat("a_low", &a.a_low));
            out.push(mat("b_high", &a.b_high));
            out.push(mat("a_high", &a.a_high));
            for (b, bank) in l.banks().enumerate() {
                let prefix = format!("layer{i}.{}", if b == 0 { "bank" } else { "bank_low" });
                let m = bank.len();
                let weights: Vec<f64> = bank.components().iter().flat_map(|c| c.weight.as_slice().to_vec()).collect();
                out.push(NamedArray::new(format!("{prefix}.weight"), vec![m, bank.weight_len(), bank.dim()], weights));
                out.push(NamedArray::new(format!("{prefix}.key"), vec![bank.query_dim(), m], bank.keys().into_vec()));
                out.push(NamedArray::new(format!("{prefix}.attention"), vec![bank.query_dim(), m], bank.attention().into_vec()));
                let frozen = bank.components().iter().map(|c| if c.frozen { 1.0 } else { 0.0 }).collect();
                out.push(NamedArray::new(format!("{prefix}.frozen"), vec![m], frozen));
            }
        }
        for (slot, qs) in self.static_queries.iter().enumerate() {
            for (i, q) in qs.iter().enumerate() {
                out.push(NamedArray::new(format!("static.slot{slot}.layer{i}"), vec![q.len()], q.clone()));
            }
        }
        out
    }

    /// Rebuilds a model from [`to_arrays`](Self::to_arrays) output.
    pub fn from_arrays(spec: ModelSpec, arrays: &[NamedArray]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedArray> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))
        };
        let mat = |name: &str| -> Result<Matrix> {
            let a = find(name)?;
            match a.shape.as_slice() {
                [r, c] => Matrix::new(*r, *c, a.data.clone()),
                _ => Err(Error::Checkpoint(format!("'{name}' is not 2-d"))),
            }
        };
        let mut layers = Vec::new();
        for i in 0..2 {
            let adapter = DecomposedAdapterLayer::from_parts(
                mat(&format!("layer{i}.w0"))?,
                find(&format!("layer{i}.b0"))?.data.clone(),
                mat(&format!("layer{i}.b_low"))?,
                mat(&format!("layer{i}.a_low"))?,
                mat(&format!("layer{i}.b_high"))?,
                mat(&format!("layer{i}.a_high"))?,
            )?;
            let load_bank = |prefix: String| -> Result<ComponentBank> {
                let w = find(&format!("{prefix}.weight"))?;
                let [m, lw, d] = w.shape[..] else {
                    return Err(Error::Checkpoint(format!("{prefix}.weight is not 3-d")));
                };
                let keys = mat(&format!("{prefix}.key"))?;
                let att = mat(&format!("{prefix}.attention"))?;
                let frozen = &find(&format!("{prefix}.frozen"))?.data;
                let mut bank = ComponentBank::new(lw, d, keys.rows(), spec.ablation.attention)?;
                for c in 0..m {
                    bank.push(Component {
                        weight: Matrix::new(lw, d, w.data[c * lw * d..(c + 1) * lw * d].to_vec())?,
                        key: keys.column(c),
                        attention: att.column(c),
                        frozen: frozen[c] != 0.0,
                    })?;
                }
                Ok(bank)
            };
            let bank = load_bank(format!("layer{i}.bank"))?;
            let bank_low = if spec.dual_bank {
                Some(load_bank(format!("layer{i}.bank_low"))?)
            } else {
                None
            };
            layers.push(AdaptedLayer { adapter, bank, bank_low });
        }
        let mut static_queries = Vec::new();
        for slot in 0.. {
            let q0 = arrays.iter().find(|a| a.name == format!("static.slot{slot}.layer0"));
            let Some(q0) = q0 else { break };
            let q1 = find(&format!("static.slot{slot}.layer1"))?;
            static_queries.push(vec![q0.data.clone(), q1.data.clone()]);
        }
        let model = Self {
            head: mat("head.weight")?,
            head_bias: find("head.bias")?.data.clone(),
            layers,
            static_queries,
            spec,
        };
        model.spec.validate()?;
        Ok(model)
    }
}

/// `‖KKᵀ−I‖² + ‖AAᵀ−I‖² + Σ_r ‖W_r W_rᵀ−I‖²` over a bank's unfrozen
/// components, where `W_r` stacks their r-th weight rows. Gradients are
/// returned for every component (zeros for frozen ones).
fn bank_ortho(bank: &ComponentBank) -> (f64, Vec<ComponentGrads>) {
    let comps = bank.components();
    let mut grads: Vec<ComponentGrads> = comps
        .iter()
        .map(|c| ComponentGrads {
            weight: Matrix::zeros(c.weight.rows(), c.weight.cols()),
            key: vec![0.0; c.key.len()],
            attention: vec![0.0; c.attention.len()],
        })
        .collect();
    let live: Vec<usize> = (0..comps.len()).filter(|&m| !comps[m].frozen).collect();
    if live.is_empty() {
        return (0.0, grads);
    }
    let stack = |rows: Vec<&[f64]>| -> Matrix {
        let cols = rows[0].len();
        Matrix::new(rows.len(), cols, rows.concat()).expect("equal lengths")
    };
    let mut total = 0.0;

    let keys = stack(live.iter().map(|&m| comps[m].key.as_slice()).collect());
    let (loss, g) = ortho_loss_grad(&keys);
    total += loss;
    for (r, &m) in live.iter().enumerate() {
        grads[m].key.copy_from_slice(g.row(r));
    }

    if bank.learns_attention() {
        let att = stack(live.iter().map(|&m| comps[m].attention.as_slice()).collect());
        let (loss, g) = ortho_loss_grad(&att);
        total += loss;
        for (r, &m) in live.iter().enumerate() {
            grads[m].attention.copy_from_slice(g.row(r));
        }
    }

    for slice in 0..bank.weight_len() {
        let w = stack(live.iter().map(|&m| comps[m].weight.row(slice)).collect());
        let (loss, g) = ortho_loss_grad(&w);
        total += loss;
        for (r, &m) in live.iter().enumerate() {
            grads[m].weight.row_mut(slice).copy_from_slice(g.row(r));
        }
    }
    (total, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    /// `None` when the group is skipped.
    pub max_rel_error: Option<f64>,
    pub checked: usize,
}

/// Compares analytic gradients with central differences of the full loss,
/// grouped by parameter kind, plus a separate `ortho` group that checks the
/// penalty term alone (skipped when `β = 0` or the penalty is off).
/// `corrupt` adds a bias to the analytic gradient of the named group.
pub fn grad_check(model: &Model, batch: &Batch, beta: f64, eps: f64, corrupt: Option<&str>) -> Result<Vec<GroupReport>> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(config("eps", format!("must be in (0, 1e-2], got {eps}")));
    }
    let (_, grads) = model.loss_and_grads(batch, beta)?;
    let ids = model.trainable_ids();
    let mut work = model.clone();
    let mut reports: Vec<GroupReport> = Vec::new();
    let mut note = |group: &str, err: f64| match reports.iter_mut().find(|r| r.group == group) {
        Some(r) => {
            r.max_rel_error = Some(r.max_rel_error.unwrap_or(0.0).max(err));
            r.checked += 1;
        }
        None => reports.push(GroupReport {
            group: group.to_string(),
            max_rel_error: Some(err),
            checked: 1,
        }),
    };
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).to_vec();
        let bias = if corrupt == Some(id.group()) { 1.0 } else { 0.0 };
        for j in 0..analytic.len() {
            let numeric = {
                let orig = work.trainable_mut()[k].1[j];
                work.trainable_mut()[k].1[j] = orig + eps;
                let plus = work.loss(batch, beta)?.total;
                work.trainable_mut()[k].1[j] = orig - eps;
                let minus = work.loss(batch, beta)?.total;
                work.trainable_mut()[k].1[j] = orig;
                (plus - minus) / (2.0 * eps)
            };
            note(id.group(), relative_error(analytic[j] + bias, numeric));
        }
    }

    if model.ortho_active(beta) {
        let (_, ortho_grads) = model.ortho_terms();
        let mut worst = 0.0f64;
        let mut checked = 0;
        let bias = if corrupt == Some("ortho") { 1.0 } else { 0.0 };
        for (k, id) in ids.iter().enumerate() {
            let ParamId::Bank { layer, low, component, part } = *id else { continue };
            let pair = &ortho_grads[layer];
            let cg = if low { &pair.1[component] } else { &pair.0[component] };
            let analytic = match part {
                BankPart::Weight => cg.weight.as_slice().to_vec(),
                BankPart::Key => cg.key.clone(),
                BankPart::Attention => cg.attention.clone(),
            };
            for j in 0..analytic.len() {
                let orig = work.trainable_mut()[k].1[j];
                work.trainable_mut()[k].1[j] = orig + eps;
                let plus = work.ortho_terms().0;
                work.trainable_mut()[k].1[j] = orig - eps;
                let minus = work.ortho_terms().0;
                work.trainable_mut()[k].1[j] = orig;
                worst = worst.max(relative_error(analytic[j] + bias, (plus - minus) / (2.0 * eps)));
                checked += 1;
            }
        }
        reports.push(GroupReport {
            group: "ortho".into(),
            max_rel_error: Some(worst),
            checked,
        });
    } else {
        reports.push(GroupReport {
            group: "ortho".into(),
            max_rel_error: None,
            checked: 0,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(ablation: Ablation) -> ModelSpec {
        ModelSpec {
            d_in: 8,
            hidden: 8,
            classes_per_task: 3,
            num_tasks: 2,
            rank_low: 2,
            rank_high: 4,
            weight_len: 4,
            ablation,
            scalar_lambda: false,
            dual_bank: false,
        }
    }

    fn backbone(rng: &mut Rng) -> Vec<(Matrix, Vec<f64>)> {
        vec![he_linear(8, 8, rng), he_linear(8, 8, rng)]
    }

    fn batch(rng: &mut Rng, n: usize) -> Batch {
        Batch {
            x: Matrix::randn(n, 8, 1.0, rng),
            labels: (0..n).map(|i| i % 3).collect(),
            slots: (0..n).map(|i| i % 2).collect(),
        }
    }

    #[test]
    fn uniform_head_gives_log_c() {
        let mut rng = Rng::new(1);
        let model = Model::new(spec(Ablation::ALL), backbone(&mut rng), 1).unwrap();
        let parts = model.loss(&batch(&mut rng, 6), 10.0).unwrap();
        assert!((parts.task - 3f64.ln()).abs() < 1e-12);
        assert_eq!(parts.ortho, 0.0);
    }

    #[test]
    fn fresh_expansion_has_zero_ortho() {
        let mut rng = Rng::new(2);
        let mut model = Model::new(spec(Ablation::ALL), backbone(&mut rng), 2).unwrap();
        model.expand(1, 2, &mut rng).unwrap();
        let parts = model.loss(&batch(&mut rng, 6), 10.0).unwrap();
        assert!(parts.ortho < 1e-20);
        assert!((parts.total - parts.task).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_labels() {
        let mut rng = Rng::new(3);
        let model = Model::new(spec(Ablation::ALL), backbone(&mut rng), 3).unwrap();
        let mut b = batch(&mut rng, 4);
        b.labels[0] = 3;
        assert!(matches!(model.loss(&b, 0.0), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn trainable_views_match_ids() {
        let mut rng = Rng::new(4);
        let mut model = Model::new(spec(Ablation::ALL), backbone(&mut rng), 4).unwrap();
        model.expand(1, 2, &mut rng).unwrap();
        model.expand(2, 2, &mut rng).unwrap();
        let ids = model.trainable_ids();
        let views: Vec<ParamId> = model.trainable_mut().into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, views);
        let banks = ids.iter().filter(|i| matches!(i, ParamId::Bank { .. })).count();
        assert_eq!(banks, 2 * 2 * 3);
    }

    #[test]
    fn arrays_round_trip() {
        let mut rng = Rng::new(5);
        let mut s = spec(Ablation::ALL);
        s.dual_bank = true;
        let mut model = Model::new(s.clone(), backbone(&mut rng), 5).unwrap();
        model.expand(1, 2, &mut rng).unwrap();
        model.record_static_query(0, &Matrix::randn(4, 8, 1.0, &mut rng)).unwrap();
        let back = Model::from_arrays(s, &model.to_arrays()).unwrap();
        assert_eq!(back, model);
    }
}
