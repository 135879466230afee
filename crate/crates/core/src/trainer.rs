//! Sequential training over a task stream.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint, NamedArray, VERSION};
use crate::error::{config, Error, Result};
use crate::lifecycle::{apply_restoration, RestorationPolicy, SourceSnapshot};
use crate::metrics::{AccuracyMatrix, MetricsRecord};
use crate::model::{
    pretrain_backbone, Ablation, AdapterPart, BankPart, Batch, EvalMode, Gradients, Model, ModelSpec, ParamId, PretrainConfig,
};
use crate::numerics::{Matrix, Rng};
use crate::optim::Adam;
use crate::tasks::{Split, TaskStream};

const STREAM_SHUFFLE: u64 = 0x7472_6e72_0001;
const STREAM_EXPAND: u64 = 0x7472_6e72_0002;
const STREAM_RESTORE: u64 = 0x7472_6e72_0003;
const STREAM_REPLAY: u64 = 0x7472_6e72_0004;
const STREAM_BUFFER: u64 = 0x7472_6e72_0005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Data,
    Seqlora,
    DataReplay,
    LoraReplay,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Data, Method::Seqlora, Method::DataReplay, Method::LoraReplay];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Data => "data",
            Self::Seqlora => "seqlora",
            Self::DataReplay => "data_replay",
            Self::LoraReplay => "lora_replay",
        }
    }

    pub fn uses_replay(&self) -> bool {
        matches!(self, Self::DataReplay | Self::LoraReplay)
    }

    pub fn is_data(&self) -> bool {
        matches!(self, Self::Data | Self::DataReplay)
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method '{s}' (data, seqlora, data_replay, lora_replay)"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    /// Component switches for the data methods; the LoRA methods always run
    /// the high branch alone with λ ≡ 1.
    pub ablation: Ablation,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub replay_ratio: f64,
    pub seed: u64,
    pub scalar_lambda: bool,
    pub dual_bank: bool,
    pub rank_low: usize,
    pub rank_high: usize,
    pub weight_len: usize,
    pub per_task: usize,
    pub hidden: usize,
    pub restore_p: f64,
    pub restore_interval: u64,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ablation: Ablation::ALL,
            beta: 10.0,
            lr: 1e-4,
            epochs: 20,
            batch_size: 16,
            replay_ratio: 0.02,
            seed: 0,
            scalar_lambda: false,
            dual_bank: false,
            rank_low: 2,
            rank_high: 8,
            weight_len: 8,
            per_task: 2,
            hidden: 64,
            restore_p: 0.01,
            restore_interval: 200,
            pretrain: PretrainConfig::default(),
        }
    }

    pub fn effective_ablation(&self) -> Ablation {
        if self.method.is_data() {
            self.ablation
        } else {
            Ablation::table_row(2).expect("row 2 exists")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.replay_ratio) {
            return Err(config("replay_ratio", format!("must be in [0, 0.5], got {}", self.replay_ratio)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(config("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size", "must be >= 1"));
        }
        if self.per_task == 0 {
            return Err(config("per_task", "must be >= 1"));
        }
        if self.weight_len < 2 || (!self.dual_bank && !self.weight_len.is_multiple_of(2)) {
            return Err(config("weight_len", format!("must be even and >= 2, got {}", self.weight_len)));
        }
        RestorationPolicy::new(self.restore_p, self.restore_interval)?;
        Ok(())
    }

    pub fn model_spec(&self, stream: &TaskStream) -> ModelSpec {
        ModelSpec {
            d_in: stream.config.d_in,
            hidden: self.hidden,
            classes_per_task: stream.classes(),
            num_tasks: stream.len(),
            rank_low: self.rank_low,
            rank_high: self.rank_high,
            weight_len: self.weight_len,
            ablation: self.effective_ablation(),
            scalar_lambda: self.scalar_lambda,
            dual_bank: self.dual_bank,
        }
    }

    /// Stable text form used for the checkpoint hash.
    pub fn canonical(&self, stream: &TaskStream) -> String {
        format!(
            "{}|{}|{:?}",
            serde_json::to_string(self).expect("config serialises"),
            serde_json::to_string(&stream.config).expect("stream config serialises"),
            stream.order()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub task: usize,
    pub loss: f64,
    pub ortho_loss: f64,
    pub restored: usize,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,task,loss,ortho_loss,restored_count";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.task, self.loss, self.ortho_loss, self.restored)
    }
}

/// Stored samples from completed tasks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    slots: Vec<usize>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Stores `⌈ratio · |split|⌉` distinct samples of `split` drawn uniformly.
    /// Draws nothing from `rng` when that count is zero.
    pub fn add_task(&mut self, split: &Split, slot: usize, ratio: f64, rng: &mut Rng) {
        let count = ((ratio * split.len() as f64).ceil() as usize).min(split.len());
        if count == 0 {
            return;
        }
        let mut idx = rng.permutation(split.len());
        idx.truncate(count);
        for i in idx {
            self.rows.push(split.x.row(i).to_vec());
            self.labels.push(split.labels[i]);
            self.slots.push(slot);
        }
    }

    /// `k` samples drawn uniformly with replacement.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<usize> {
        if self.is_empty() {
            return Vec::new();
        }
        (0..k).map(|_| rng.below(self.len())).collect()
    }
}

fn build_batch(split: &Split, idx: &[usize], slot: usize, buffer: &ReplayBuffer, extra: &[usize]) -> Batch {
    let d = split.x.cols();
    let n = idx.len() + extra.len();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut slots = Vec::with_capacity(n);
    for &i in idx {
        data.extend_from_slice(split.x.row(i));
        labels.push(split.labels[i]);
        slots.push(slot);
    }
    for &j in extra {
        data.extend_from_slice(&buffer.rows[j]);
        labels.push(buffer.labels[j]);
        slots.push(buffer.slots[j]);
    }
    Batch {
        x: Matrix::new(n, d, data).expect("finite data"),
        labels,
        slots,
    }
}

fn restoration_eligible(id: &ParamId) -> bool {
    matches!(
        id,
        ParamId::Adapter {
            part: AdapterPart::ALow | AdapterPart::AHigh,
            ..
        } | ParamId::Bank {
            part: BankPart::Weight,
            ..
        }
    )
}

/// Keeps only the current task's head rows; slices of completed tasks stay
/// fixed even when replayed samples reach them.
fn mask_head_to_slot(grads: &mut Gradients, slot: usize, classes: usize) {
    let keep = slot * classes..(slot + 1) * classes;
    for r in 0..grads.head.rows() {
        if !keep.contains(&r) {
            grads.head.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            grads.head_bias[r] = 0.0;
        }
    }
}

/// Task loss plus the weighted orthogonality penalty.
pub fn total_loss(batch: &Batch, model: &Model, cfg: &RunConfig) -> Result<f64> {
    Ok(model.loss(batch, cfg.beta)?.total)
}

/// Trains one task in place. Expansion for data methods happens here, at
/// the start of the task; `step` is the global step counter.
pub fn train_task(
    model: &mut Model,
    stream: &TaskStream,
    slot: usize,
    cfg: &RunConfig,
    buffer: &ReplayBuffer,
    step: &mut u64,
) -> Result<Vec<StepLog>> {
    let task = &stream.tasks[slot];
    let ablation = cfg.effective_ablation();
    model.expand(slot + 1, cfg.per_task, &mut Rng::derive(cfg.seed, STREAM_EXPAND, slot as u64))?;

    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let policy = RestorationPolicy::new(cfg.restore_p, cfg.restore_interval)?;
    let mut snapshot = SourceSnapshot::new();
    if ablation.restore {
        for (id, values) in model.trainable_mut() {
            match id {
                ParamId::Adapter { .. } if restoration_eligible(&id) => snapshot.insert(id.to_string(), vec![0.0; values.len()]),
                ParamId::Bank { .. } if restoration_eligible(&id) => snapshot.insert(id.to_string(), values.to_vec()),
                _ => {}
            }
        }
    }

    let beta = if ablation.ortho { cfg.beta } else { 0.0 };
    let mut opt = Adam::new(cfg.lr);
    let mut shuffle = Rng::derive(cfg.seed, STREAM_SHUFFLE, slot as u64);
    let mut restore_rng = Rng::derive(cfg.seed, STREAM_RESTORE, slot as u64);
    let mut replay_rng = Rng::derive(cfg.seed, STREAM_REPLAY, slot as u64);
    let replay = cfg.method.uses_replay() && !buffer.is_empty();
    let mut initial: Option<f64> = None;

    for _ in 0..cfg.epochs {
        let order = shuffle.permutation(task.train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let extra = if replay {
                let k = (cfg.replay_ratio * chunk.len() as f64).ceil() as usize;
                buffer.sample(k, &mut replay_rng)
            } else {
                Vec::new()
            };
            let batch = build_batch(&task.train, chunk, slot, buffer, &extra);
            let (parts, mut grads) = model.loss_and_grads(&batch, beta)?;
            mask_head_to_slot(&mut grads, slot, model.spec.classes_per_task);
            let first = *initial.get_or_insert(parts.total);
            if !parts.total.is_finite() || parts.total > 1e3 * first.max(1e-12) {
                return Err(Error::Diverged {
                    step: *step,
                    task: slot,
                    loss: parts.total,
                });
            }
            {
                let flat: Vec<Vec<f64>> = model.flat_grads(&grads).into_iter().map(|g| g.to_vec()).collect();
                let refs: Vec<&[f64]> = flat.iter().map(|g| g.as_slice()).collect();
                let mut params = model.trainable_mut();
                let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|(_, s)| &mut **s).collect();
                opt.step(&mut slices, &refs)?;
            }
            *step += 1;
            let mut restored = 0;
            if ablation.restore && policy.is_due(*step) {
                let mut named: Vec<(String, &mut [f64])> = model
                    .trainable_mut()
                    .into_iter()
                    .filter(|(id, _)| restoration_eligible(id))
                    .map(|(id, s)| (id.to_string(), s))
                    .collect();
                restored = apply_restoration(&mut named, &snapshot, &policy, &mut restore_rng)?;
            }
            log.push(StepLog {
                step: *step,
                task: slot,
                loss: parts.total,
                ortho_loss: parts.ortho,
                restored,
            });
        }
    }
    Ok(log)
}

/// Accuracy of `model` on every task's test split for column `after`.
/// Static entries are only filled for tasks with a stored query.
fn evaluate_into(
    model: &Model,
    stream: &TaskStream,
    after: usize,
    dynamic: &mut AccuracyMatrix,
    stat: &mut AccuracyMatrix,
) -> Result<()> {
    let results: Vec<Result<(f64, Option<f64>)>> = (0..stream.len())
        .into_par_iter()
        .map(|q| {
            let test = &stream.tasks[q].test;
            let dyn_acc = model.accuracy(&test.x, &test.labels, q, EvalMode::Dynamic)?;
            let static_acc = if q <= after {
                Some(model.accuracy(&test.x, &test.labels, q, EvalMode::Static)?)
            } else {
                None
            };
            Ok((dyn_acc, static_acc))
        })
        .collect();
    for (q, r) in results.into_iter().enumerate() {
        let (d, s) = r?;
        dynamic.set(q, after, d)?;
        if let Some(s) = s {
            stat.set(q, after, s)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub model: Model,
    pub matrix: AccuracyMatrix,
    pub matrix_static: AccuracyMatrix,
    /// Tasks completed so far.
    pub tasks_done: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub state: RunState,
    pub log: Vec<StepLog>,
}

impl RunOutput {
    pub fn record(&self, cfg: &RunConfig, order: &str) -> Result<MetricsRecord> {
        MetricsRecord::from_matrix(cfg.method.name(), order, cfg.seed, &self.state.matrix)
    }

    pub fn record_static(&self, cfg: &RunConfig, order: &str) -> Result<MetricsRecord> {
        MetricsRecord::from_matrix(cfg.method.name(), order, cfg.seed, &self.state.matrix_static)
    }
}

/// Fresh state: pretrained backbone, no tasks trained.
pub fn initial_state(stream: &TaskStream, cfg: &RunConfig) -> Result<RunState> {
    cfg.validate()?;
    if stream.len() < 2 {
        return Err(config("num_tasks", "stream needs at least 2 tasks"));
    }
    let spec = cfg.model_spec(stream);
    let backbone = pretrain_backbone(spec.d_in, spec.hidden, &cfg.pretrain, cfg.seed)?;
    let model = Model::new(spec, backbone, cfg.seed)?;
    Ok(RunState {
        model,
        matrix: AccuracyMatrix::new(stream.len()),
        matrix_static: AccuracyMatrix::new(stream.len()),
        tasks_done: 0,
        step: 0,
    })
}

/// Replay buffer holding the first `tasks_done` tasks, rebuilt from seeds.
pub fn rebuild_buffer(stream: &TaskStream, cfg: &RunConfig, tasks_done: usize) -> ReplayBuffer {
    let mut buffer = ReplayBuffer::default();
    if cfg.method.uses_replay() {
        for slot in 0..tasks_done {
            let mut rng = Rng::derive(cfg.seed, STREAM_BUFFER, slot as u64);
            buffer.add_task(&stream.tasks[slot].train, slot, cfg.replay_ratio, &mut rng);
        }
    }
    buffer
}

/// Trains the remaining tasks of `state`, calling `on_task_end` after each.
pub fn continue_sequence<F>(stream: &TaskStream, cfg: &RunConfig, mut state: RunState, mut on_task_end: F) -> Result<RunOutput>
where
    F: FnMut(&RunState) -> Result<()>,
{
    cfg.validate()?;
    let mut buffer = rebuild_buffer(stream, cfg, state.tasks_done);
    let mut log = Vec::new();
    for slot in state.tasks_done..stream.len() {
        let task_log = train_task(&mut state.model, stream, slot, cfg, &buffer, &mut state.step)?;
        if let Some(last) = task_log.last() {
            log::debug!("task {slot}: {} steps, final loss {:.4}", task_log.len(), last.loss);
        }
        log.extend(task_log);
        state.model.record_static_query(slot, &stream.tasks[slot].train.x)?;
        evaluate_into(&state.model, stream, slot, &mut state.matrix, &mut state.matrix_static)?;
        if cfg.method.uses_replay() {
            let mut rng = Rng::derive(cfg.seed, STREAM_BUFFER, slot as u64);
            buffer.add_task(&stream.tasks[slot].train, slot, cfg.replay_ratio, &mut rng);
        }
        state.tasks_done = slot + 1;
        on_task_end(&state)?;
    }
    Ok(RunOutput { state, log })
}

pub fn train_sequence(stream: &TaskStream, cfg: &RunConfig) -> Result<RunOutput> {
    let state = initial_state(stream, cfg)?;
    continue_sequence(stream, cfg, state, |_| Ok(()))
}

fn matrix_arrays(name: &str, m: &AccuracyMatrix) -> [NamedArray; 2] {
    let n = m.len();
    let mut values = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for q in 0..n {
        for j in 0..n {
            let v = m.get(q, j);
            values.push(v.unwrap_or(0.0));
            mask.push(if v.is_some() { 1.0 } else { 0.0 });
        }
    }
    [
        NamedArray::new(name, vec![n, n], values),
        NamedArray::new(format!("{name}.mask"), vec![n, n], mask),
    ]
}

fn matrix_from(ck: &Checkpoint, name: &str, n: usize) -> Result<AccuracyMatrix> {
    let missing = || Error::Checkpoint(format!("missing array '{name}'"));
    let values = ck.array(name).ok_or_else(missing)?;
    let mask = ck.array(&format!("{name}.mask")).ok_or_else(missing)?;
    if values.data.len() != n * n || mask.data.len() != n * n {
        return Err(Error::Checkpoint(format!("'{name}' is not {n}x{n}")));
    }
    let mut m = AccuracyMatrix::new(n);
    for i in 0..n * n {
        if mask.data[i] != 0.0 {
            m.set(i / n, i % n, values.data[i])?;
        }
    }
    Ok(m)
}

pub fn to_checkpoint(state: &RunState, stream: &TaskStream, cfg: &RunConfig) -> Checkpoint {
    let mut arrays = state.model.to_arrays();
    arrays.extend(matrix_arrays("accuracy", &state.matrix));
    arrays.extend(matrix_arrays("accuracy_static", &state.matrix_static));
    Checkpoint {
        version: VERSION,
        config_hash: config_hash(&cfg.canonical(stream)),
        task_index: state.tasks_done as u64,
        step: state.step,
        arrays,
    }
}

/// Restores a run state, refusing checkpoints from another configuration.
pub fn from_checkpoint(ck: &Checkpoint, stream: &TaskStream, cfg: &RunConfig) -> Result<RunState> {
    ck.ensure_hash(&config_hash(&cfg.canonical(stream)))?;
    let n = stream.len();
    Ok(RunState {
        model: Model::from_arrays(cfg.model_spec(stream), &ck.arrays)?,
        matrix: matrix_from(ck, "accuracy", n)?,
        matrix_static: matrix_from(ck, "accuracy_static", n)?,
        tasks_done: ck.task_index as usize,
        step: ck.step,
    })
}

/// A small model for gradient checking: two expansions (so frozen
/// components exist), every trainable value perturbed by `N(0, noise²)`,
/// and a batch drawn from the first two tasks.
pub fn gradcheck_fixture(stream: &TaskStream, cfg: &RunConfig, batch_size: usize, noise: f64) -> Result<(Model, Batch)> {
    let mut state = initial_state(stream, cfg)?;
    let model = &mut state.model;
    model.expand(1, cfg.per_task, &mut Rng::derive(cfg.seed, STREAM_EXPAND, 0))?;
    model.expand(2, cfg.per_task, &mut Rng::derive(cfg.seed, STREAM_EXPAND, 1))?;
    let mut rng = Rng::derive(cfg.seed, STREAM_SHUFFLE, u64::MAX);
    for (_, values) in model.trainable_mut() {
        values.iter_mut().for_each(|v| *v += noise * rng.normal());
    }
    let half = batch_size.div_ceil(2);
    let a: Vec<usize> = (0..half.min(stream.tasks[0].train.len())).collect();
    let b: Vec<usize> = (0..(batch_size - a.len()).min(stream.tasks[1].train.len())).collect();
    let first = build_batch(&stream.tasks[0].train, &a, 0, &ReplayBuffer::default(), &[]);
    let second = build_batch(&stream.tasks[1].train, &b, 1, &ReplayBuffer::default(), &[]);
    let mut data = first.x.into_vec();
    data.extend(second.x.into_vec());
    let n = first.labels.len() + second.labels.len();
    let batch = Batch {
        x: Matrix::new(n, stream.config.d_in, data)?,
        labels: first.labels.into_iter().chain(second.labels).collect(),
        slots: first.slots.into_iter().chain(second.slots).collect(),
    };
    Ok((state.model, batch))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub row: usize,
    pub ablation: Ablation,
    pub record: MetricsRecord,
}

/// One data-method run per ablation row E1..E8 with the seed held fixed.
pub fn ablation_grid(stream: &TaskStream, base: &RunConfig) -> Result<Vec<AblationRow>> {
    (1..=8)
        .into_par_iter()
        .map(|row| {
            let ablation = Ablation::table_row(row).expect("rows 1..=8");
            let cfg = RunConfig {
                method: Method::Data,
                ablation,
                ..base.clone()
            };
            let out = train_sequence(stream, &cfg)?;
            let mut record = out.record(&cfg, &order_label(stream))?;
            record.method = format!("E{row}");
            Ok(AblationRow { row, ablation, record })
        })
        .collect()
}

pub fn order_label(stream: &TaskStream) -> String {
    stream.order().iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_task_stream, StreamConfig};

    fn tiny_stream() -> TaskStream {
        gen_task_stream(&StreamConfig {
            num_tasks: 2,
            d_in: 8,
            train_size: 40,
            val_size: 8,
            test_size: 40,
            ..StreamConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg(method: Method) -> RunConfig {
        RunConfig {
            epochs: 2,
            hidden: 16,
            pretrain: PretrainConfig {
                samples: 64,
                dims: 8,
                epochs: 1,
                ..PretrainConfig::default()
            },
            ..RunConfig::new(method)
        }
    }

    #[test]
    fn validation_bounds() {
        let mut cfg = RunConfig::new(Method::Data);
        assert!(cfg.validate().is_ok());
        cfg.replay_ratio = 0.6;
        assert!(cfg.validate().is_err());
        cfg.replay_ratio = 0.02;
        cfg.beta = -1.0;
        assert!(cfg.validate().is_err());
        cfg.beta = 0.0;
        cfg.weight_len = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_epochs_leave_state_unchanged_apart_from_expansion() {
        let stream = tiny_stream();
        let cfg = RunConfig { epochs: 0, ..tiny_cfg(Method::Seqlora) };
        let mut state = initial_state(&stream, &cfg).unwrap();
        let before = state.model.clone();
        let log = train_task(&mut state.model, &stream, 0, &cfg, &ReplayBuffer::default(), &mut state.step).unwrap();
        assert!(log.is_empty());
        assert_eq!(state.model, before);
    }

    #[test]
    fn buffer_counts_and_zero_ratio() {
        let stream = tiny_stream();
        let mut buf = ReplayBuffer::default();
        let mut rng = Rng::new(1);
        buf.add_task(&stream.tasks[0].train, 0, 0.02, &mut rng);
        assert_eq!(buf.len(), 1);
        buf.add_task(&stream.tasks[1].train, 1, 0.1, &mut rng);
        assert_eq!(buf.len(), 5);
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        let mut empty = ReplayBuffer::default();
        empty.add_task(&stream.tasks[0].train, 0, 0.0, &mut a);
        assert!(empty.is_empty());
        assert_eq!(a.uniform(), b.uniform());
    }

    #[test]
    fn sequence_fills_matrix() {
        let stream = tiny_stream();
        let out = train_sequence(&stream, &tiny_cfg(Method::DataReplay)).unwrap();
        let m = &out.state.matrix;
        for q in 0..2 {
            for j in 0..2 {
                assert!(m.get(q, j).is_some());
            }
        }
        assert!(out.state.matrix_static.get(1, 0).is_none());
        assert!(out.state.matrix_static.get(0, 1).is_some());
        assert_eq!(out.log.len() as u64, out.state.step);
    }
}
