use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use retrofeat::record::{load_all, RunRecord};
use retrofeat::report::{accuracy_curve_tsv, comparison_table, confusion_tsv, table_tsv, task0_curve_tsv};
use retrofeat::runner::{execute, load_config, sweep, Executor, RunOutcome};
use retrofeat::CliError;
use retrofeat_core::engine::LossBreakdown;
use retrofeat_core::metrics::{AccuracyMatrix, MetricSummary};

const TINY: &str = "\
data.classes = 6
data.train_per_class = 10
data.test_per_class = 5
data.side = 8
tasks.B = 2
tasks.C = 2
tasks.T = 2
model.hidden = 16
model.feature_dim = 6
train.epochs = 2
train.milestones = 1
train.batch_size = 8
mgs.K = 20
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retrofeat"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_cli(args: &[&str]) -> Output {
    bin().args(args).env_remove("RETROFEAT_LOSS__ALPHA").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_record_and_plot_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.cfg", TINY);
    let out = tmp.path().join("out");
    let o = run_cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let records = load_all(&out).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!(r.seed, 4);
    assert_eq!(r.strategy, "mgs+sfc");
    assert_eq!(r.matrix.entries.len(), 3);
    assert_eq!(r.epoch_losses.len(), 3);
    assert_eq!(r.phase_seconds.len(), 3);
    assert_eq!(r.config["tasks.B"], "2");
    assert!(r.notes.iter().any(|n| n.contains("rotations only")));
    let dir = out.join(retrofeat::record::run_dir_name(&r.config_hash, 4));
    for f in ["record.json", "checkpoint.bin", "stats.bin", "accuracy_curve.tsv", "task0_curve.tsv", "table.tsv"] {
        assert!(dir.join(f).is_file(), "{}", f);
    }
    let curve = fs::read_to_string(dir.join("accuracy_curve.tsv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "phase\tmgs+sfc");
    assert_eq!(lines.len(), 1 + 3);
    let confusion = fs::read_to_string(dir.join("confusion_mgs_sfc_s4.tsv")).unwrap();
    let cells: usize = confusion.lines().skip(1).map(|l| l.split('\t').count() - 1).sum();
    assert_eq!(cells, 36);

    // The record is append-only: a second run is skipped.
    let again = run_cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stdout(&again).contains("already present"));
}

#[test]
fn identical_runs_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.cfg", TINY);
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = run_cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let r = load_all(&out).unwrap().remove(0);
        metrics.push((serde_json::to_string(&r.metrics).unwrap(), r.matrix, r.confusion));
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn missing_field_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", &TINY.replace("tasks.B = 2\n", ""));
    let o = run_cli(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tasks.B"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "bad2.cfg", &format!("{}loss.alpha = -2\n", TINY));
    let o = run_cli(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.alpha"));

    let o = run_cli(&["run", "--config", "/nonexistent.cfg", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "nan.cfg", &format!("{}train.lr = 1e306\n", TINY));
    let out = tmp.path().join("out");
    let o = run_cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let msg = stderr(&o);
    let path = msg.split("written to ").nth(1).unwrap().trim();
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert!(diag["losses"].is_object());
    assert!(load_all(&out).unwrap().is_empty());
}

#[test]
fn environment_and_set_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.cfg", TINY);
    let out = tmp.path().join("out");
    let o = bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(["--set", "strategy.compensation=none"])
        .env("RETROFEAT_LOSS__ALPHA", "2.5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = load_all(&out).unwrap().remove(0);
    assert_eq!(r.config["loss.alpha"], "2.5");
    assert_eq!(r.strategy, "mgs+none");
    let o = bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("RETROFEAT_LOSS__NOPE", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_runs_every_cell_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{}sweep.strategy.generation = mgs,prototype\nsweep.strategy.compensation = sfc,none\nsweep.train.seed = 0,1,2\n",
        TINY
    );
    let cfg = write_config(tmp.path(), "grid.cfg", &text);
    let out = tmp.path().join("out");
    let o = run_cli(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let records = load_all(&out).unwrap();
    assert_eq!(records.len(), 12);
    let table = fs::read_to_string(out.join("table.tsv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    for label in ["mgs+sfc", "mgs+none", "prototype+sfc", "prototype+none"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{}\t0,1,2\t", label))), "{}", table);
    }
    let header = fs::read_to_string(out.join("accuracy_curve.tsv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "phase\tmgs+none\tmgs+sfc\tprototype+none\tprototype+sfc");

    // The table is rebuilt from the records alone.
    fs::remove_file(out.join("table.tsv")).unwrap();
    let o = run_cli(&["report", "--in", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out.join("table.tsv")).unwrap(), table);

    let in_process = sweep(&cfg, &out, &Executor::InProcess).unwrap();
    assert_eq!(in_process.skipped, 12);
    assert_eq!(in_process.records.len(), 12);
}

#[test]
fn report_refuses_mixed_protocols() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.cfg", TINY);
    let b = write_config(
        tmp.path(),
        "b.cfg",
        &TINY.replace("tasks.C = 2\n", "tasks.C = 1\n").replace("tasks.T = 2\n", "tasks.T = 4\n"),
    );
    let out = tmp.path().join("out");
    for cfg in [&a, &b] {
        let (_, c) = load_config(cfg, &[], None).unwrap();
        assert!(matches!(execute(&c, &[], &out).unwrap(), RunOutcome::Completed { .. }));
    }
    let o = run_cli(&["report", "--in", out.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("mix protocols"), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let o = run_cli(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

fn record_with(values: &[f64], losses: &[f64], seconds: f64, seed: u64) -> RunRecord {
    let rows: Vec<Vec<f64>> = (1..=values.len()).map(|t| values[..t].to_vec()).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let matrix = AccuracyMatrix::from_values(&refs, 40).unwrap();
    let l = |v: f64| LossBreakdown {
        new_cls: v,
        new_aug_cls: v / 3.0,
        new_ka: v * 1e-9,
        old_cls: -v,
        old_feat_kd: v.abs().sqrt(),
        old_logit_kd: 0.1 + v,
        total: 7.0 * v,
    };
    RunRecord {
        config: [("tasks.B".to_string(), "2".to_string())].into_iter().collect(),
        config_hash: "0123456789abcdef0123".into(),
        seed,
        strategy: "mgs+sfc".into(),
        overrides: vec![("mgs.K".into(), "7".into())],
        protocol: retrofeat::record::Protocol {
            base: 2,
            per_phase: 1,
            phases: values.len() - 1,
        },
        metrics: MetricSummary::from_matrix(&matrix).unwrap(),
        matrix,
        epoch_losses: vec![losses.iter().map(|&v| l(v)).collect()],
        confusion: vec![retrofeat::record::Confusion {
            classes: vec![3, 1],
            counts: vec![5, 1, 0, 6],
        }],
        phase_seconds: vec![seconds],
        notes: vec!["n".into()],
    }
}

proptest! {
    #[test]
    fn records_round_trip(
        values in prop::collection::vec(0.0f64..=1.0, 1..6),
        losses in prop::collection::vec(-1e6f64..1e6, 0..5),
        seconds in 0.0f64..1e4,
        seed in any::<u64>(),
    ) {
        let r = record_with(&values, &losses, seconds, seed);
        let back = RunRecord::from_json(&r.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}

#[test]
fn records_are_never_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let r = record_with(&[0.9, 0.8], &[1.0], 0.5, 1);
    r.write_new(tmp.path()).unwrap();
    assert!(matches!(r.write_new(tmp.path()), Err(CliError::Exists(_))));
    assert_eq!(RunRecord::read(&tmp.path().join("record.json")).unwrap(), r);
}

#[test]
fn plot_data_shapes() {
    let a = record_with(&[0.9, 0.8, 0.7], &[1.0], 0.1, 0);
    let mut b = record_with(&[0.5, 0.6, 0.4], &[1.0], 0.1, 1);
    b.overrides.clear();
    b.strategy = "prototype+none".into();
    let recs = [a.clone(), b];
    let acc = accuracy_curve_tsv(&recs).unwrap();
    let lines: Vec<&str> = acc.lines().collect();
    assert_eq!(lines[0], "phase\tmgs+sfc mgs.K=7\tprototype+none");
    assert_eq!(lines.len(), 4);
    assert!(task0_curve_tsv(&recs).unwrap().lines().nth(3).unwrap().starts_with("2\t0.9"));
    assert_eq!(confusion_tsv(&a).unwrap(), "true\\predicted\t3\t1\n3\t5\t1\n1\t0\t6\n");
    let table = table_tsv(&comparison_table(&recs));
    assert!(table.starts_with("strategy\tseeds\tavg_incremental_acc\tfinal_acc\tavg_forgetting\n"));
}
