//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use datacl_core::tasks::{ShiftKind, StreamConfig};
use datacl_core::trainer::{Method, RunConfig};

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub run: RunConfig,
    pub stream: StreamConfig,
    /// Seeds `seed, seed+1, ...`.
    pub num_seeds: u64,
    /// Present when the task order should be shuffled.
    pub order_seed: Option<u64>,
    /// Stream seed; follows the run seed unless set.
    pub stream_seed: Option<u64>,
    pub gradcheck_eps: f64,
}

pub const KEYS: &[&str] = &[
    "method",
    "seed",
    "num_seeds",
    "epochs",
    "batch_size",
    "lr",
    "beta",
    "replay_ratio",
    "rank_low",
    "rank_high",
    "weight_len",
    "per_task",
    "hidden",
    "restore_p",
    "restore_interval",
    "scalar_lambda",
    "dual_bank",
    "high_branch",
    "low_branch",
    "weighting",
    "attention",
    "ortho",
    "restore",
    "pretrain_samples",
    "pretrain_classes",
    "pretrain_dims",
    "pretrain_epochs",
    "pretrain_batch_size",
    "pretrain_lr",
    "num_tasks",
    "d_in",
    "classes",
    "shift",
    "magnitude",
    "shared_weight",
    "separation",
    "noise",
    "train_size",
    "val_size",
    "test_size",
    "stream_seed",
    "order_seed",
    "gradcheck_eps",
];

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected 'key = value', got '{}'", no + 1, raw.trim()))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.insert(k.clone(), v).is_some() {
            bail!("line {}: duplicate key '{k}'", no + 1);
        }
    }
    Ok(out)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("invalid value '{v}' for '{key}': {e}")),
        }
    }

    fn set<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }
}

fn check(ok: bool, field: &str, bound: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        bail!("invalid configuration: {field} {bound}")
    }
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let unknown: Vec<&str> = pairs.keys().map(String::as_str).filter(|k| !KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            bail!("unknown configuration keys: {}", unknown.join(", "));
        }
        let mut f = Fields(pairs);
        let method: Method = f.get("method")?.ok_or_else(|| anyhow!("missing required key 'method'"))?;
        let mut run = RunConfig::new(method);
        let mut stream = StreamConfig::default();
        f.set("seed", &mut run.seed)?;
        f.set("epochs", &mut run.epochs)?;
        f.set("batch_size", &mut run.batch_size)?;
        f.set("lr", &mut run.lr)?;
        f.set("beta", &mut run.beta)?;
        f.set("replay_ratio", &mut run.replay_ratio)?;
        f.set("rank_low", &mut run.rank_low)?;
        f.set("rank_high", &mut run.rank_high)?;
        f.set("weight_len", &mut run.weight_len)?;
        f.set("per_task", &mut run.per_task)?;
        f.set("hidden", &mut run.hidden)?;
        f.set("restore_p", &mut run.restore_p)?;
        f.set("restore_interval", &mut run.restore_interval)?;
        f.set("scalar_lambda", &mut run.scalar_lambda)?;
        f.set("dual_bank", &mut run.dual_bank)?;
        f.set("high_branch", &mut run.ablation.high_branch)?;
        f.set("low_branch", &mut run.ablation.low_branch)?;
        f.set("weighting", &mut run.ablation.weighting)?;
        f.set("attention", &mut run.ablation.attention)?;
        f.set("ortho", &mut run.ablation.ortho)?;
        f.set("restore", &mut run.ablation.restore)?;
        f.set("pretrain_samples", &mut run.pretrain.samples)?;
        f.set("pretrain_classes", &mut run.pretrain.classes)?;
        f.set("pretrain_dims", &mut run.pretrain.dims)?;
        f.set("pretrain_epochs", &mut run.pretrain.epochs)?;
        f.set("pretrain_batch_size", &mut run.pretrain.batch_size)?;
        f.set("pretrain_lr", &mut run.pretrain.lr)?;
        f.set("num_tasks", &mut stream.num_tasks)?;
        f.set("d_in", &mut stream.d_in)?;
        f.set("classes", &mut stream.classes)?;
        if let Some(s) = f.get::<ShiftKind>("shift")? {
            stream.shift = s;
        }
        f.set("magnitude", &mut stream.magnitude)?;
        f.set("shared_weight", &mut stream.shared_weight)?;
        f.set("separation", &mut stream.separation)?;
        f.set("noise", &mut stream.noise)?;
        f.set("train_size", &mut stream.train_size)?;
        f.set("val_size", &mut stream.val_size)?;
        f.set("test_size", &mut stream.test_size)?;
        let mut cfg = FileConfig {
            num_seeds: f.get("num_seeds")?.unwrap_or(1),
            order_seed: f.get("order_seed")?,
            stream_seed: f.get("stream_seed")?,
            gradcheck_eps: f.get("gradcheck_eps")?.unwrap_or(1e-5),
            run,
            stream,
        };
        if run_pretrain_dims_unset(text) {
            cfg.run.pretrain.dims = cfg.stream.d_in;
        }
        cfg.sync_stream_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }

    /// Replaces the run seed and re-derives the stream seed when not pinned.
    pub fn override_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.sync_stream_seed();
    }

    fn sync_stream_seed(&mut self) {
        self.stream.seed = self.stream_seed.unwrap_or(self.run.seed);
    }

    pub fn for_seed(&self, offset: u64) -> Self {
        let mut c = self.clone();
        c.override_seed(self.run.seed + offset);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        check((0.0..=0.5).contains(&r.replay_ratio), "replay_ratio", "must be within [0, 0.5]")?;
        check(r.beta >= 0.0, "beta", "must be >= 0")?;
        check(r.lr > 0.0, "lr", "must be > 0")?;
        check(r.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(r.per_task >= 1, "per_task", "must be >= 1")?;
        check((0.0..=1.0).contains(&r.restore_p), "restore_p", "must be within [0, 1]")?;
        check(r.restore_interval >= 1, "restore_interval", "must be >= 1")?;
        check(
            r.weight_len >= 2 && (r.dual_bank || r.weight_len.is_multiple_of(2)),
            "weight_len",
            "must be even and >= 2",
        )?;
        let cap = self.stream.d_in.min(r.hidden);
        check(
            1 <= r.rank_low && r.rank_low < r.rank_high && r.rank_high <= cap,
            "rank_low/rank_high",
            &format!("need 1 <= rank_low < rank_high <= min(d_in, hidden) = {cap}"),
        )?;
        check(self.num_seeds >= 1, "num_seeds", "must be >= 1")?;
        check(
            r.pretrain.dims >= 1 && r.pretrain.dims <= self.stream.d_in,
            "pretrain_dims",
            "must be within [1, d_in]",
        )?;
        check(
            self.gradcheck_eps > 0.0 && self.gradcheck_eps <= 1e-2,
            "gradcheck_eps",
            "must be within (0, 1e-2]",
        )?;
        r.validate()?;
        self.stream.validate()?;
        Ok(())
    }
}

fn run_pretrain_dims_unset(text: &str) -> bool {
    !text
        .lines()
        .any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("pretrain_dims"))
}
