//! Executes single runs in-process and sweeps as child processes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Instant;

use retrofeat_core::compensate::Compensation;
use retrofeat_core::engine::{ExperimentConfig, Learner};
use retrofeat_core::metrics::MetricSummary;
use retrofeat_core::Error;

use crate::config::{config_hash, echo, expand_grid, Cell, ConfigFile};
use crate::formats::{encode_checkpoint, encode_stats, CheckpointMeta};
use crate::record::{load_all, run_dir_name, Confusion, Protocol, RunRecord, RECORD_FILE};
use crate::report;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATS_FILE: &str = "stats.bin";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

/// Reads a config file and applies environment overrides, then `sets`,
/// then the seed.
pub fn load_config(path: &Path, sets: &[(String, String)], seed: Option<u64>) -> Result<(ConfigFile, ExperimentConfig), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(vec![format!("{}: {}", path.display(), e)]))?;
    let mut file = ConfigFile::parse(&text)?;
    file.apply_env(std::env::vars())?;
    file.apply_sets(sets)?;
    if let Some(s) = seed {
        file.values.insert("train.seed".into(), s.to_string());
    }
    let cfg = file.resolve()?;
    Ok((file, cfg))
}

pub fn run_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(run_dir_name(&config_hash(cfg), cfg.train.seed))
}

#[derive(Debug)]
pub enum RunOutcome {
    Completed { record: Box<RunRecord>, dir: PathBuf },
    /// A record for this config and seed already exists.
    Skipped { dir: PathBuf },
}

fn notes(cfg: &ExperimentConfig) -> Vec<String> {
    let t = &cfg.train;
    let mut n = vec!["augmentation: quarter-turn rotations only".to_string()];
    n.push(if t.restrict_new_cls {
        "new-class loss restricted to current-task logits".into()
    } else {
        "new-class loss over all seen-class logits".into()
    });
    if t.strategy.compensation == Compensation::RandInterp {
        n.push("rand_interp: old-labelled interpolation only, no extra new-labelled samples".into());
    }
    n
}

/// Trains and evaluates every phase, then writes the record, checkpoint,
/// class statistics and plot files into the run directory.
pub fn execute(cfg: &ExperimentConfig, overrides: &[(String, String)], out: &Path) -> Result<RunOutcome, CliError> {
    let dir = run_dir(out, cfg);
    if dir.join(RECORD_FILE).exists() {
        return Ok(RunOutcome::Skipped { dir });
    }
    let hash = config_hash(cfg);
    let mut learner = Learner::new(cfg.clone())?;
    let mut epoch_losses = Vec::new();
    let mut confusion = Vec::new();
    let mut phase_seconds = Vec::new();
    while !learner.is_finished() {
        let start = Instant::now();
        let report = match learner.run_next_phase() {
            Ok(r) => r,
            Err(Error::NonFiniteLoss {
                task,
                epoch,
                step,
                breakdown,
            }) => {
                fs::create_dir_all(&dir)?;
                let path = dir.join(DIAGNOSTIC_FILE);
                let diag = serde_json::json!({
                    "config_hash": hash,
                    "seed": cfg.train.seed,
                    "task": task,
                    "epoch": epoch,
                    "step": step,
                    "losses": breakdown,
                });
                fs::write(&path, serde_json::to_string_pretty(&diag)?)?;
                return Err(CliError::NonFinite(path));
            }
            Err(e) => return Err(e.into()),
        };
        phase_seconds.push(start.elapsed().as_secs_f64());
        epoch_losses.push(report.epoch_losses);
        confusion.push(Confusion {
            classes: report.evaluation.classes,
            counts: report.evaluation.confusion,
        });
    }
    let p = &cfg.protocol;
    let record = RunRecord {
        config: echo(cfg),
        config_hash: hash.clone(),
        seed: cfg.train.seed,
        strategy: cfg.train.strategy.label(),
        overrides: overrides.to_vec(),
        protocol: Protocol {
            base: p.base,
            per_phase: p.per_phase,
            phases: p.phases,
        },
        matrix: learner.matrix().clone(),
        metrics: MetricSummary::from_matrix(learner.matrix())?,
        epoch_losses,
        confusion,
        phase_seconds,
        notes: notes(cfg),
    };
    fs::create_dir_all(&dir)?;
    let meta = CheckpointMeta {
        task: p.phases,
        config_hash: hash.clone(),
    };
    fs::write(dir.join(CHECKPOINT_FILE), encode_checkpoint(learner.model(), &meta))?;
    fs::write(dir.join(STATS_FILE), encode_stats(learner.store(), &hash))?;
    report::emit(std::slice::from_ref(&record), &dir)?;
    // The record goes last so its presence marks a complete run.
    record.write_new(&dir)?;
    Ok(RunOutcome::Completed {
        record: Box::new(record),
        dir,
    })
}

/// How sweep cells are executed.
#[derive(Debug, Clone)]
pub enum Executor {
    /// Child processes of this binary, at most `jobs` at a time.
    Processes { exe: PathBuf, jobs: usize },
    /// Sequentially in the current process.
    InProcess,
}

#[derive(Debug)]
pub struct SweepSummary {
    pub records: Vec<RunRecord>,
    pub skipped: usize,
    pub failures: Vec<String>,
}

/// Runs every cell of the config's grid that has no record yet, then writes
/// the comparison table and plot files into `out` from the persisted
/// records.
pub fn sweep(config: &Path, out: &Path, executor: &Executor) -> Result<SweepSummary, CliError> {
    let (file, _) = load_config(config, &[], None)?;
    let cells = expand_grid(&file)?;
    let mut pending = Vec::new();
    let mut dirs = Vec::new();
    let mut skipped = 0;
    for cell in &cells {
        let (_, cfg) = load_config(config, &cell.sets, Some(cell.seed))?;
        let dir = run_dir(out, &cfg);
        if dir.join(RECORD_FILE).exists() {
            skipped += 1;
        } else {
            pending.push((cell.clone(), cfg));
        }
        dirs.push(dir);
    }
    let mut failures = Vec::new();
    match executor {
        Executor::InProcess => {
            for (cell, cfg) in &pending {
                if let Err(e) = execute(cfg, &cell.sets, out) {
                    failures.push(format!("seed {} {:?}: {}", cell.seed, cell.sets, e));
                }
            }
        }
        Executor::Processes { exe, jobs } => {
            let mut running: Vec<(Cell, Child)> = Vec::new();
            let mut queue = pending.into_iter().map(|(c, _)| c);
            loop {
                while running.len() < (*jobs).max(1) {
                    let Some(cell) = queue.next() else { break };
                    let mut cmd = Command::new(exe);
                    cmd.arg("run").arg("--config").arg(config).arg("--out").arg(out);
                    cmd.arg("--seed").arg(cell.seed.to_string());
                    for (k, v) in &cell.sets {
                        cmd.arg("--set").arg(format!("{}={}", k, v));
                    }
                    let child = cmd.spawn()?;
                    running.push((cell, child));
                }
                if running.is_empty() {
                    break;
                }
                let (cell, mut child) = running.remove(0);
                let status = child.wait()?;
                if !status.success() {
                    failures.push(format!("seed {} {:?}: exit status {}", cell.seed, cell.sets, status));
                }
            }
        }
    }
    let mut records = Vec::new();
    for dir in &dirs {
        let path = dir.join(RECORD_FILE);
        if path.exists() {
            records.push(RunRecord::read(&path)?);
        }
    }
    if !records.is_empty() {
        report::emit(&records, out)?;
    }
    Ok(SweepSummary {
        records,
        skipped,
        failures,
    })
}

/// Regenerates the table and plot files of every record under `dir`.
pub fn report_dir(dir: &Path) -> Result<(Vec<RunRecord>, Vec<PathBuf>), CliError> {
    let records = load_all(dir)?;
    let written = report::emit(&records, dir)?;
    Ok((records, written))
}
