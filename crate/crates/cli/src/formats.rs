//! Little-endian binary files: datasets, model checkpoints and class
//! statistics.

use std::collections::BTreeMap;

use retrofeat_core::gaussmem::{ClassStats, CovarianceMode, StatsStore};
use retrofeat_core::model::{DualHead, FeatureExtractor, Linear, Model, ModelConfig};
use retrofeat_core::numerics::Tensor;
use retrofeat_core::synthdata::{Image, LabeledSet, Split};

use crate::CliError;

pub const DATASET_MAGIC: [u8; 4] = *b"RFDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RFCK";
pub const STATS_MAGIC: [u8; 4] = *b"RFST";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn header(&mut self, magic: [u8; 4]) {
        self.0.extend_from_slice(&magic);
        self.u32(VERSION);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: [u8; 4], what: &str) -> Result<Self, CliError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != magic {
            return Err(CliError::Format(format!("not a {} file (bad magic)", what)));
        }
        let v = r.u32()?;
        if v != VERSION {
            return Err(CliError::Format(format!("unsupported {} version {}", what, v)));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, CliError> {
        usize::try_from(self.u64()?).map_err(|_| CliError::Format("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CliError::Format("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn str(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Format("invalid UTF-8 string".into()))
    }
    fn finish(&self) -> Result<(), CliError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(CliError::Format(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// Header (magic, version, side, class count, split, image count), then
/// row-major pixels of every image, then the `u32` labels.
pub fn encode_dataset(set: &LabeledSet) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(DATASET_MAGIC);
    w.u32(set.side() as u32);
    w.u32(set.class_count as u32);
    w.u8(match set.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    w.u64(set.len() as u64);
    for im in &set.images {
        w.f64s(im.pixels());
    }
    for &l in &set.labels {
        w.u32(l as u32);
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledSet, CliError> {
    let mut r = Reader::new(bytes, DATASET_MAGIC, "dataset")?;
    let side = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Test,
        s => return Err(CliError::Format(format!("unknown split tag {}", s))),
    };
    let n = r.usize()?;
    let mut images = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        images.push(Image::new(side, r.f64s(side * side)?)?);
    }
    let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(LabeledSet::new(images, labels, split, classes)?)
}

/// Metadata stored alongside checkpointed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub task: usize,
    pub config_hash: String,
}

fn put_tensor(w: &mut Writer, name: &str, t: &Tensor) {
    w.str(name);
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
}

/// Metadata block (task, seen classes, current-task classes, head init
/// gain, config hash), then named tensors, each with its shape.
pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(CHECKPOINT_MAGIC);
    w.u64(meta.task as u64);
    w.u64(model.head.seen_classes.len() as u64);
    model.head.seen_classes.iter().for_each(|&c| w.u64(c as u64));
    w.u64(model.head.current_task_classes.len() as u64);
    model.head.current_task_classes.iter().for_each(|&c| w.u64(c as u64));
    w.f64(model.config.head_init_gain);
    w.str(&meta.config_hash);

    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (i, l) in model.extractor.layers.iter().enumerate() {
        tensors.push((format!("extractor.{}.weight", i), &l.weight));
        tensors.push((format!("extractor.{}.bias", i), &l.bias));
    }
    tensors.push(("unified.weight".into(), &model.head.unified));
    if let Some(b) = &model.head.unified_bias {
        tensors.push(("unified.bias".into(), b));
    }
    tensors.push(("aug.weight".into(), &model.head.aug));
    if let Some(b) = &model.head.aug_bias {
        tensors.push(("aug.bias".into(), b));
    }
    w.u64(tensors.len() as u64);
    for (name, t) in tensors {
        put_tensor(&mut w, &name, t);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta), CliError> {
    let mut r = Reader::new(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let task = r.usize()?;
    let n = r.usize()?;
    let seen = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
    let n = r.usize()?;
    let current = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
    let gain = r.f64()?;
    let config_hash = r.str()?;
    let count = r.usize()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| CliError::Format(format!("tensor {} is too large", name)))?;
        let t = Tensor::new(shape, r.f64s(len)?)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CliError::Format(format!("duplicate tensor {}", name)));
        }
    }
    r.finish()?;

    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| CliError::Format(format!("missing tensor {}", name)));
    let mut layers = Vec::new();
    while let (Ok(weight), Ok(bias)) = (
        take(&format!("extractor.{}.weight", layers.len())),
        take(&format!("extractor.{}.bias", layers.len())),
    ) {
        layers.push(Linear { weight, bias });
    }
    if layers.is_empty() {
        return Err(CliError::Format("checkpoint has no extractor layers".into()));
    }
    let unified = take("unified.weight")?;
    let unified_bias = take("unified.bias").ok();
    let aug = take("aug.weight")?;
    let aug_bias = take("aug.bias").ok();
    if let Some(extra) = tensors.keys().next() {
        return Err(CliError::Format(format!("unexpected tensor {}", extra)));
    }
    let config = ModelConfig {
        input_dim: layers[0].weight.cols(),
        hidden: layers[..layers.len() - 1].iter().map(|l| l.weight.rows()).collect(),
        feature_dim: layers[layers.len() - 1].weight.rows(),
        head_bias: unified_bias.is_some(),
        head_init_gain: gain,
    };
    if unified.rows() != seen.len() {
        return Err(CliError::Format("unified head rows do not match the seen classes".into()));
    }
    let model = Model {
        config,
        extractor: FeatureExtractor { layers },
        head: DualHead {
            unified,
            unified_bias,
            aug,
            aug_bias,
            seen_classes: seen,
            current_task_classes: current,
        },
    };
    Ok((model, CheckpointMeta { task, config_hash }))
}

/// Header (feature dim, covariance mode, config hash, class count), then
/// per class: id, sample count, task, mean and covariance.
pub fn encode_stats(store: &StatsStore, config_hash: &str) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(STATS_MAGIC);
    w.u64(store.feature_dim() as u64);
    w.u8(match store.mode() {
        CovarianceMode::PerClass => 0,
        CovarianceMode::Tied => 1,
    });
    w.str(config_hash);
    w.u64(store.len() as u64);
    for s in store.iter() {
        w.u64(s.class_id as u64);
        w.u64(s.sample_count as u64);
        w.u64(s.learned_at_task as u64);
        w.f64s(&s.mean);
        w.f64s(s.covariance.data());
    }
    w.0
}

/// Rebuilds a store; regularisation and factors are recomputed.
pub fn decode_stats(bytes: &[u8]) -> Result<(StatsStore, String), CliError> {
    let mut r = Reader::new(bytes, STATS_MAGIC, "stats")?;
    let m = r.usize()?;
    let mode = match r.u8()? {
        0 => CovarianceMode::PerClass,
        1 => CovarianceMode::Tied,
        t => return Err(CliError::Format(format!("unknown covariance mode {}", t))),
    };
    let hash = r.str()?;
    let n = r.usize()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let (id, count, task) = (r.usize()?, r.usize()?, r.usize()?);
        let mean = r.f64s(m)?;
        let cov = Tensor::matrix(m, m, r.f64s(m * m)?)?;
        entries.push(ClassStats::from_moments(id, mean, cov, count, task)?);
    }
    r.finish()?;
    // Tied pooling depends on insertion order; replay tasks in order.
    entries.sort_by_key(|s| (s.learned_at_task, s.class_id));
    let mut store = StatsStore::new(m, mode);
    for s in entries {
        store.insert(s)?;
    }
    Ok((store, hash))
}
