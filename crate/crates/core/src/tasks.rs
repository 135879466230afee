//! Synthetic sequential classification tasks.
//!
//! Every task draws class-conditional Gaussians. Class `k` of task `t` has
//! mean `separation · (w·s_k + (1 − w)·T_t(u_k))` where `s_k` is shared by all
//! tasks, `u_k` is the task-specific direction and `T_t` is the per-task
//! shift (rotation, coordinate permutation or accumulated centroid drift).
//! Task 0 is always untransformed.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::lifecycle::orthogonal_init;
use crate::numerics::{Matrix, Rng};

const STREAM_BASE: u64 = 0x7461_736b_0001;
const STREAM_TASK: u64 = 0x7461_736b_0002;
const STREAM_SHIFT: u64 = 0x7461_736b_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Rotation,
    Permutation,
    ClusterDrift,
}

impl std::str::FromStr for ShiftKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rotation" => Ok(Self::Rotation),
            "permutation" => Ok(Self::Permutation),
            "cluster-drift" => Ok(Self::ClusterDrift),
            other => Err(format!("unknown shift kind '{other}' (rotation, permutation, cluster-drift)")),
        }
    }
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rotation => "rotation",
            Self::Permutation => "permutation",
            Self::ClusterDrift => "cluster-drift",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub d_in: usize,
    pub classes: usize,
    pub shift: ShiftKind,
    /// Rotation angle per task (radians), fraction of coordinates permuted,
    /// or drift step length, depending on `shift`.
    pub magnitude: f64,
    /// Weight `w` of the shared class direction in each class mean.
    pub shared_weight: f64,
    pub separation: f64,
    pub noise: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            d_in: 32,
            classes: 4,
            shift: ShiftKind::Rotation,
            magnitude: std::f64::consts::FRAC_PI_6,
            shared_weight: 0.3,
            separation: 5.0,
            noise: 1.0,
            train_size: 1000,
            val_size: 250,
            test_size: 500,
            seed: 0,
        }
    }
}

impl StreamConfig {
    /// Fifteen-task preset mirroring long-sequence benchmarks.
    pub fn long_sequence() -> Self {
        Self {
            num_tasks: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(config("num_tasks", format!("must be >= 2, got {}", self.num_tasks)));
        }
        if self.d_in < 2 {
            return Err(config("d_in", format!("must be >= 2, got {}", self.d_in)));
        }
        if self.classes < 2 {
            return Err(config("classes", format!("must be >= 2, got {}", self.classes)));
        }
        if self.d_in < 64 && self.classes as u64 > 1u64 << self.d_in {
            return Err(config(
                "classes",
                format!("{} classes exceed the 2^d_in = {} separability bound", self.classes, 1u64 << self.d_in),
            ));
        }
        if !(self.magnitude.is_finite() && self.magnitude >= 0.0) {
            return Err(config("magnitude", format!("must be >= 0, got {}", self.magnitude)));
        }
        if self.shift == ShiftKind::Permutation && self.magnitude > 1.0 {
            return Err(config("magnitude", "permutation shift is a fraction in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return Err(config("shared_weight", format!("must be in [0, 1], got {}", self.shared_weight)));
        }
        if !(self.separation > 0.0 && self.noise >= 0.0) {
            return Err(config("separation/noise", "separation must be > 0 and noise >= 0"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(config("train_size/test_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// One sample per row.
    pub x: Matrix,
    /// Task-local class labels in `0..classes`.
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Split {
        let mut x = Matrix::zeros(indices.len(), self.x.cols());
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
        }
        Split {
            x,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Generator index (position in the unshuffled stream).
    pub id: usize,
    pub seed: u64,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub config: StreamConfig,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn order(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    /// Writes every sample as `feature_0..feature_{d-1},label,task_id,split`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.config.d_in;
        let header: Vec<String> = (0..d).map(|i| format!("feature_{i}")).collect();
        writeln!(out, "{},label,task_id,split", header.join(","))?;
        for task in &self.tasks {
            for (name, split) in [("train", &task.train), ("val", &task.val), ("test", &task.test)] {
                for r in 0..split.len() {
                    let feats: Vec<String> = split.x.row(r).iter().map(|v| v.to_string()).collect();
                    writeln!(out, "{},{},{},{}", feats.join(","), split.labels[r], task.id, name)?;
                }
            }
        }
        Ok(())
    }
}

fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Per-task class means, one row per class.
fn class_means(cfg: &StreamConfig) -> Result<Vec<Matrix>> {
    let d = cfg.d_in;
    let c = cfg.classes;
    let mut base = Rng::derive(cfg.seed, STREAM_BASE, 0);
    let shared: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(d, &mut base)).collect();
    let specific: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(d, &mut base)).collect();
    let basis = orthogonal_init(d, d, &mut base)?;

    let mut shift_rng = Rng::derive(cfg.seed, STREAM_SHIFT, 0);
    let mut drift = specific.clone();
    let mut means = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let transformed: Vec<Vec<f64>> = match cfg.shift {
            ShiftKind::Rotation => specific
                .iter()
                .map(|u| rotate(u, &basis, cfg.magnitude * t as f64))
                .collect(),
            ShiftKind::Permutation => {
                let perm = if t == 0 {
                    (0..d).collect()
                } else {
                    partial_permutation(d, cfg.magnitude, &mut shift_rng)
                };
                specific.iter().map(|u| perm.iter().map(|&i| u[i]).collect()).collect()
            }
            ShiftKind::ClusterDrift => {
                if t > 0 {
                    for u in drift.iter_mut() {
                        let step = unit_vector(d, &mut shift_rng);
                        for (ui, si) in u.iter_mut().zip(&step) {
                            *ui += cfg.magnitude * si;
                        }
                    }
                }
                drift.clone()
            }
        };
        let mut m = Matrix::zeros(c, d);
        for k in 0..c {
            for j in 0..d {
                let v = cfg.shared_weight * shared[k][j] + (1.0 - cfg.shared_weight) * transformed[k][j];
                m.set(k, j, cfg.separation * v);
            }
        }
        means.push(m);
    }
    Ok(means)
}

/// Rotates `u` by `angle` in every plane spanned by consecutive rows of
/// `basis` (an orthogonal d×d matrix); a trailing odd row is left fixed.
fn rotate(u: &[f64], basis: &Matrix, angle: f64) -> Vec<f64> {
    let d = u.len();
    let coords = basis.matvec(u).expect("basis is d x d");
    let (s, c) = angle.sin_cos();
    let mut rotated = coords.clone();
    for p in 0..d / 2 {
        let (a, b) = (coords[2 * p], coords[2 * p + 1]);
        rotated[2 * p] = c * a - s * b;
        rotated[2 * p + 1] = s * a + c * b;
    }
    basis.t_matmul(&Matrix::new(d, 1, rotated).expect("column")).expect("shapes").into_vec()
}

/// Permutation that shuffles a random subset of `round(fraction·d)` coordinates.
fn partial_permutation(d: usize, fraction: f64, rng: &mut Rng) -> Vec<usize> {
    let count = ((fraction * d as f64).round() as usize).min(d);
    let mut perm: Vec<usize> = (0..d).collect();
    let mut chosen = rng.permutation(d);
    chosen.truncate(count);
    let mut targets = chosen.clone();
    rng.shuffle(&mut targets);
    for (src, dst) in chosen.iter().zip(&targets) {
        perm[*src] = *dst;
    }
    perm
}

fn sample_split(means: &Matrix, noise: f64, size: usize, rng: &mut Rng) -> Split {
    let (c, d) = means.shape();
    let mut labels: Vec<usize> = (0..size).map(|i| i % c).collect();
    rng.shuffle(&mut labels);
    let mut x = Matrix::zeros(size, d);
    for (r, &k) in labels.iter().enumerate() {
        for j in 0..d {
            x.set(r, j, means.get(k, j) + noise * rng.normal());
        }
    }
    Split { x, labels }
}

pub fn gen_task_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let means = class_means(cfg)?;
    let tasks = means
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let mut rng = Rng::derive(cfg.seed, STREAM_TASK, t as u64);
            let seed = rng.seed();
            Task {
                id: t,
                seed,
                train: sample_split(m, cfg.noise, cfg.train_size, &mut rng),
                val: sample_split(m, cfg.noise, cfg.val_size, &mut rng),
                test: sample_split(m, cfg.noise, cfg.test_size, &mut rng),
            }
        })
        .collect();
    Ok(TaskStream {
        config: cfg.clone(),
        tasks,
    })
}

/// Reorders tasks by an explicit permutation: position `i` receives task `order[i]`.
pub fn permute_stream(stream: &TaskStream, order: &[usize]) -> Result<TaskStream> {
    let mut seen = vec![false; stream.len()];
    if order.len() != stream.len() || order.iter().any(|&i| i >= stream.len() || std::mem::replace(&mut seen[i], true)) {
        return Err(config("order", "not a permutation of the task indices"));
    }
    Ok(TaskStream {
        config: stream.config.clone(),
        tasks: order.iter().map(|&i| stream.tasks[i].clone()).collect(),
    })
}

/// Seeded random task order; split contents are untouched.
pub fn order_shuffle(stream: &TaskStream, order_seed: u64) -> TaskStream {
    let order = Rng::new(order_seed).permutation(stream.len());
    permute_stream(stream, &order).expect("generated permutation is valid")
}
