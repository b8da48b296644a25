//! Comparison tables and tab-separated plot data, derived only from records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::record::{Protocol, RunRecord};
use crate::CliError;

pub const ACCURACY_FILE: &str = "accuracy_curve.tsv";
pub const TASK0_FILE: &str = "task0_curve.tsv";
pub const TABLE_FILE: &str = "table.tsv";

/// One row of a comparison table: means over the seeds of a strategy cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub average_incremental_accuracy: f64,
    pub final_accuracy: f64,
    pub average_forgetting: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Groups records by label, in label order, so that output depends only on
/// the set of records.
fn groups(records: &[RunRecord]) -> Vec<(String, Vec<&RunRecord>)> {
    let mut map: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.label()).or_default().push(r);
    }
    for rs in map.values_mut() {
        rs.sort_by_key(|r| r.seed);
    }
    map.into_iter().collect()
}

pub fn comparison_table(records: &[RunRecord]) -> Vec<TableRow> {
    groups(records)
        .into_iter()
        .map(|(label, rs)| {
            let forgetting: Vec<f64> = rs.iter().filter_map(|r| r.metrics.average_forgetting).collect();
            TableRow {
                label,
                seeds: rs.iter().map(|r| r.seed).collect(),
                average_incremental_accuracy: mean(rs.iter().map(|r| r.metrics.average_incremental_accuracy)),
                final_accuracy: mean(rs.iter().map(|r| r.metrics.final_accuracy)),
                average_forgetting: (forgetting.len() == rs.len()).then(|| mean(forgetting.into_iter())),
            }
        })
        .collect()
}

pub fn table_tsv(rows: &[TableRow]) -> String {
    let mut s = String::from("strategy\tseeds\tavg_incremental_acc\tfinal_acc\tavg_forgetting\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(|x| x.to_string()).collect();
        let f = r.average_forgetting.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x));
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{}",
            r.label,
            seeds.join(","),
            r.average_incremental_accuracy,
            r.final_accuracy,
            f
        );
    }
    s
}

fn common_protocol(records: &[RunRecord]) -> Result<Protocol, CliError> {
    let first = records.first().ok_or_else(|| CliError::Report("no records to report".into()))?.protocol;
    if let Some(r) = records.iter().find(|r| r.protocol != first) {
        return Err(CliError::Report(format!(
            "records mix protocols: B={} C={} T={} and B={} C={} T={}",
            first.base, first.per_phase, first.phases, r.protocol.base, r.protocol.per_phase, r.protocol.phases
        )));
    }
    Ok(first)
}

fn curve_tsv(records: &[RunRecord], curve: impl Fn(&RunRecord) -> Vec<f64>) -> Result<String, CliError> {
    let protocol = common_protocol(records)?;
    let gs = groups(records);
    let mut s = String::from("phase");
    for (label, _) in &gs {
        s.push('\t');
        s.push_str(label);
    }
    s.push('\n');
    let curves: Vec<Vec<Vec<f64>>> = gs.iter().map(|(_, rs)| rs.iter().map(|r| curve(r)).collect()).collect();
    for phase in 0..=protocol.phases {
        let _ = write!(s, "{}", phase);
        for per_seed in &curves {
            let _ = write!(s, "\t{:.6}", mean(per_seed.iter().map(|c| c[phase])));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Overall accuracy per phase, one column per strategy cell (seed mean).
pub fn accuracy_curve_tsv(records: &[RunRecord]) -> Result<String, CliError> {
    curve_tsv(records, |r| r.matrix.overall_curve())
}

/// Accuracy on the first task's classes per phase.
pub fn task0_curve_tsv(records: &[RunRecord]) -> Result<String, CliError> {
    curve_tsv(records, |r| r.matrix.task_curve(0))
}

/// Final-phase confusion counts as a square table: a header of predicted
/// class ids, then one row per true class.
pub fn confusion_tsv(record: &RunRecord) -> Result<String, CliError> {
    let c = record.confusion.last().ok_or_else(|| CliError::Report("record holds no confusion matrix".into()))?;
    let n = c.classes.len();
    let mut s = String::from("true\\predicted");
    for id in &c.classes {
        let _ = write!(s, "\t{}", id);
    }
    s.push('\n');
    for (i, id) in c.classes.iter().enumerate() {
        let _ = write!(s, "{}", id);
        for v in &c.counts[i * n..(i + 1) * n] {
            let _ = write!(s, "\t{}", v);
        }
        s.push('\n');
    }
    Ok(s)
}

fn file_safe(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes the table, both curves and one confusion file per record into
/// `dir`. Returns the paths written.
pub fn emit(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    common_protocol(records)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), CliError> {
        let p = dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    put(TABLE_FILE.into(), table_tsv(&comparison_table(records)))?;
    put(ACCURACY_FILE.into(), accuracy_curve_tsv(records)?)?;
    put(TASK0_FILE.into(), task0_curve_tsv(records)?)?;
    for r in records {
        put(format!("confusion_{}_s{}.tsv", file_safe(&r.label()), r.seed), confusion_tsv(r)?)?;
    }
    Ok(written)
}
