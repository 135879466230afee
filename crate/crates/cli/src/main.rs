mod config;
mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use datacl_core::checkpoint::Checkpoint;
use datacl_core::metrics::MetricsRecord;
use datacl_core::model::grad_check;
use datacl_core::tasks::{gen_task_stream, order_shuffle, TaskStream};
use datacl_core::trainer::{
    ablation_grid, continue_sequence, from_checkpoint, gradcheck_fixture, initial_state, order_label, to_checkpoint,
    RunOutput, StepLog,
};
use rayon::prelude::*;

use crate::config::FileConfig;
use crate::report::AccuracyFile;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "datacl", version, about = "Continual learning with decomposed attention-weighted adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence and write metrics, logs and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Summarise every run under a results directory.
    Report {
        /// Results directory (as passed to `run --out`).
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
    /// Run the component ablation rows E1..E8.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Export the generated task stream as CSV.
    Genstream {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "stream.csv")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<FileConfig> {
    let mut cfg = FileConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn stream_for(cfg: &FileConfig) -> Result<TaskStream> {
    let stream = gen_task_stream(&cfg.stream)?;
    Ok(match cfg.order_seed {
        Some(s) => order_shuffle(&stream, s),
        None => stream,
    })
}

fn run_name(cfg: &FileConfig) -> String {
    format!("{}_seed{}", cfg.run.method, cfg.run.seed)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn previous_steps(path: &Path, upto: u64) -> Result<Vec<String>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    Ok(fs::read_to_string(path)?
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= upto))
        .map(str::to_string)
        .collect())
}

fn run_one(cfg: &FileConfig, out: &Path, resume: Option<&Path>) -> Result<MetricsRecord> {
    let stream = stream_for(cfg)?;
    let dir = out.join(run_name(cfg));
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).with_context(|| format!("creating {}", ck_dir.display()))?;

    let (state, earlier) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let state = from_checkpoint(&ck, &stream, &cfg.run).with_context(|| format!("resuming from {}", path.display()))?;
            log::info!("resuming {} after task {} (step {})", run_name(cfg), ck.task_index, ck.step);
            (state, previous_steps(&dir.join("steps.csv"), ck.step)?)
        }
        None => (initial_state(&stream, &cfg.run)?, Vec::new()),
    };

    let output: RunOutput = continue_sequence(&stream, &cfg.run, state, |s| {
        let ck = to_checkpoint(s, &stream, &cfg.run);
        ck.save(&ck_dir.join(format!("task{}.ckpt", s.tasks_done)))?;
        log::info!("{}: finished task {}/{}", run_name(cfg), s.tasks_done, stream.len());
        Ok(())
    })?;

    let order = order_label(&stream);
    let record = output.record(&cfg.run, &order)?;
    write_json(&dir.join("metrics.json"), &record)?;
    write_json(&dir.join("metrics_static.json"), &output.record_static(&cfg.run, &order)?)?;
    write_json(
        &dir.join("accuracy.json"),
        &AccuracyFile {
            order: stream.order(),
            dynamic: output.state.matrix.percent_rows(),
            static_mode: output.state.matrix_static.percent_rows(),
        },
    )?;
    let mut steps = fs::File::create(dir.join("steps.csv"))?;
    writeln!(steps, "{}", StepLog::CSV_HEADER)?;
    for line in earlier {
        writeln!(steps, "{line}")?;
    }
    for entry in &output.log {
        writeln!(steps, "{}", entry.csv_row())?;
    }
    Ok(record)
}

fn cmd_run(common: &Common, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load(common)?;
    if resume.is_some() && cfg.num_seeds > 1 {
        bail!("--resume needs a single-seed config (num_seeds = 1); pass --seed to pick the run");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let records: Vec<MetricsRecord> = (0..cfg.num_seeds)
        .into_par_iter()
        .map(|i| run_one(&cfg.for_seed(i), out, resume))
        .collect::<Result<_>>()?;
    let mut csv = format!("{}\n", MetricsRecord::CSV_HEADER);
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        println!("{} seed {}: FP {:.2}  AP {:.2}  Forget {:.2}", r.method, r.seed, r.fp, r.ap, r.forget);
    }
    fs::write(out.join(format!("metrics_{}.csv", cfg.run.method)), csv)?;
    Ok(())
}

fn cmd_gradcheck(common: &Common, corrupt: Option<&str>) -> Result<bool> {
    let cfg = load(common)?;
    if cfg.stream.d_in > 16 || cfg.run.hidden > 16 {
        bail!(
            "gradcheck needs a small model: d_in and hidden must be <= 16 (got {} and {})",
            cfg.stream.d_in,
            cfg.run.hidden
        );
    }
    let stream = stream_for(&cfg)?;
    let (model, batch) = gradcheck_fixture(&stream, &cfg.run, 16, 0.1)?;
    let beta = if cfg.run.effective_ablation().ortho { cfg.run.beta } else { 0.0 };
    let reports = grad_check(&model, &batch, beta, cfg.gradcheck_eps, corrupt)?;
    println!("{:<16} {:>8} {:>14}  status", "group", "checked", "max rel error");
    let mut ok = true;
    for r in &reports {
        match r.max_rel_error {
            Some(e) => {
                let pass = e < GRADCHECK_TOLERANCE;
                ok &= pass;
                println!("{:<16} {:>8} {:>14.3e}  {}", r.group, r.checked, e, if pass { "ok" } else { "FAIL" });
            }
            None => println!("{:<16} {:>8} {:>14}  skipped", r.group, r.checked, "-"),
        }
    }
    Ok(ok)
}

fn cmd_ablate(common: &Common, out: &Path) -> Result<()> {
    let cfg = load(common)?;
    fs::create_dir_all(out)?;
    let per_seed = (0..cfg.num_seeds)
        .into_par_iter()
        .map(|i| {
            let c = cfg.for_seed(i);
            let stream = stream_for(&c)?;
            Ok(ablation_grid(&stream, &c.run)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("seed,row,high_branch,low_branch,weighting,attention,ortho,restore,fp,ap,forget\n");
    let mut sums = [0.0f64; 8];
    for rows in &per_seed {
        for r in rows {
            let a = r.ablation;
            csv.push_str(&format!(
                "{},E{},{},{},{},{},{},{},{},{},{}\n",
                r.record.seed,
                r.row,
                a.high_branch,
                a.low_branch,
                a.weighting,
                a.attention,
                a.ortho,
                a.restore,
                r.record.fp,
                r.record.ap,
                r.record.forget
            ));
            sums[r.row - 1] += r.record.fp;
        }
    }
    fs::write(out.join("ablation.csv"), csv)?;
    let mut text = format!("{:<4} {:>8}\n", "row", "mean FP");
    for (i, s) in sums.iter().enumerate() {
        text.push_str(&format!("E{:<3} {:>8.2}\n", i + 1, s / per_seed.len() as f64));
    }
    fs::write(out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_genstream(common: &Common, out: &Path) -> Result<()> {
    let cfg = load(common)?;
    let stream = stream_for(&cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    stream.write_csv(std::io::BufWriter::new(file))?;
    println!("wrote {} tasks to {}", stream.len(), out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DATA_CL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DATA_CL_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("DATA_CL_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Run { common, out, resume } => cmd_run(common, out, resume.as_deref()).map(|()| true),
        Command::Report { out } => report::write_report(out).map(|_| true),
        Command::Gradcheck { common, corrupt_group } => cmd_gradcheck(common, corrupt_group.as_deref()),
        Command::Ablate { common, out } => cmd_ablate(common, out).map(|()| true),
        Command::Genstream { common, out } => cmd_genstream(common, out).map(|()| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
