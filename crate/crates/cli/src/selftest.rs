//! Quick invariant checks runnable from the installed binary.

use retrofeat_core::compensate::sfc_compensate;
use retrofeat_core::metrics::{average_forgetting, average_incremental_accuracy, AccuracyMatrix};
use retrofeat_core::numerics::{cholesky, gradcheck, Tape, Tensor};
use retrofeat_core::synthdata::{generate_dataset, rotate90, DatasetConfig};

use crate::config::{config_hash, ConfigFile};
use crate::formats::{decode_dataset, encode_dataset};

type Check = (&'static str, fn() -> Result<(), String>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rotation_group() -> Result<(), String> {
    let (train, _) = generate_dataset(&DatasetConfig::default()).map_err(|e| e.to_string())?;
    for im in train.images.iter().take(200) {
        let mut r = im.clone();
        for _ in 0..4 {
            r = rotate90(&r, 1).map_err(|e| e.to_string())?;
        }
        ensure(&r == im, || "four quarter turns changed an image".into())?;
    }
    Ok(())
}

fn cross_entropy_uniform() -> Result<(), String> {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[0.0, 0.0]]).map_err(|e| e.to_string())?);
    let l = t.cross_entropy(x, &[0]).map_err(|e| e.to_string())?;
    let v = t.value(l).item();
    ensure((v - std::f64::consts::LN_2).abs() < 1e-15, || format!("CE of equal logits is {}", v))
}

fn gradient_check() -> Result<(), String> {
    let x = Tensor::from_rows(&[[0.3, -1.2, 0.5], [1.1, 0.2, -0.7]]).map_err(|e| e.to_string())?;
    let w = Tensor::from_rows(&[[0.2, 0.4, -0.1], [-0.3, 0.8, 0.6]]).map_err(|e| e.to_string())?;
    let r = gradcheck::check(&[x, w], 1e-6, 1e-3, |t, v| {
        let z = t.linear(v[0], v[1], None)?;
        t.cross_entropy(z, &[1, 0])
    })
    .map_err(|e| e.to_string())?;
    ensure(r.max_rel_error < 1e-6, || format!("relative error {}", r.max_rel_error))
}

fn cholesky_reconstruction() -> Result<(), String> {
    let a = Tensor::from_rows(&[[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]]).map_err(|e| e.to_string())?;
    let l = cholesky(&a).map_err(|e| e.to_string())?;
    let back = l.matmul(&l.transpose()).map_err(|e| e.to_string())?;
    let err = back.data().iter().zip(a.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(err < 1e-12, || format!("reconstruction error {}", err))
}

fn metric_examples() -> Result<(), String> {
    let m = AccuracyMatrix::from_values(&[&[0.90], &[0.80, 0.85], &[0.70, 0.80, 0.60]], 100).map_err(|e| e.to_string())?;
    let f = average_forgetting(&m).map_err(|e| e.to_string())?;
    ensure((f - 0.125).abs() < 1e-12, || format!("forgetting {}", f))?;
    let o = AccuracyMatrix::from_values(&[&[0.90], &[0.80, 0.80], &[0.70, 0.70, 0.70]], 100).map_err(|e| e.to_string())?;
    let a = average_incremental_accuracy(&o).map_err(|e| e.to_string())?;
    ensure((a - 0.8).abs() < 1e-12, || format!("average incremental accuracy {}", a))
}

fn sfc_midpoint() -> Result<(), String> {
    let old = Tensor::from_rows(&[[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]]).map_err(|e| e.to_string())?;
    let new = Tensor::from_rows(&[[0.9, 0.1, 1.8], [0.0, 1.0, 0.0], [0.1, -1.0, 0.8]]).map_err(|e| e.to_string())?;
    let (com, matched) = sfc_compensate(&old, &new).map_err(|e| e.to_string())?;
    ensure(matched == [0, 2], || format!("matched {:?}", matched))?;
    for i in 0..2 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let gap = d(com.row(i), old.row(i)) - d(com.row(i), new.row(matched[i]));
        ensure(gap.abs() < 1e-12, || format!("midpoint gap {}", gap))?;
    }
    Ok(())
}

fn determinism() -> Result<(), String> {
    let cfg = DatasetConfig {
        seed: 7,
        ..DatasetConfig::default()
    };
    let a = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    let b = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    ensure(a == b, || "same seed produced different data".into())
}

fn config_hash_stable() -> Result<(), String> {
    let text = "data.classes = 20\ntasks.B = 10\ntasks.C = 2\ntasks.T = 5\n";
    let a = ConfigFile::parse(text).and_then(|f| f.resolve()).map_err(|e| e.to_string())?;
    let b = ConfigFile::parse(&format!("{}\n# same\n", text)).and_then(|f| f.resolve()).map_err(|e| e.to_string())?;
    ensure(config_hash(&a) == config_hash(&b), || "hash depends on formatting".into())
}

fn dataset_round_trip() -> Result<(), String> {
    let cfg = DatasetConfig {
        class_count: 3,
        per_class_train: 4,
        per_class_test: 2,
        ..DatasetConfig::default()
    };
    let (train, _) = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    let back = decode_dataset(&encode_dataset(&train)).map_err(|e| e.to_string())?;
    ensure(back == train, || "dataset changed in a round trip".into())
}

pub const CHECKS: [Check; 9] = [
    ("rotation group", rotation_group),
    ("cross-entropy of equal logits", cross_entropy_uniform),
    ("finite-difference gradient", gradient_check),
    ("cholesky reconstruction", cholesky_reconstruction),
    ("metric examples", metric_examples),
    ("sfc midpoint", sfc_midpoint),
    ("seeded determinism", determinism),
    ("config hash", config_hash_stable),
    ("dataset round trip", dataset_round_trip),
];

/// Runs every check, returning `(name, outcome)` pairs.
pub fn run() -> Vec<(&'static str, Result<(), String>)> {
    CHECKS.iter().map(|(name, f)| (*name, f())).collect()
}
