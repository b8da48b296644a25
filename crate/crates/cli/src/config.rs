//! Flat `key = value` experiment configs with dotted section names.

use std::collections::BTreeMap;
use std::str::FromStr;

use retrofeat_core::compensate::{Compensation, Generation};
use retrofeat_core::engine::ExperimentConfig;
use retrofeat_core::gaussmem::CovarianceMode;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Prefix of environment overrides: `RETROFEAT_LOSS__ALPHA=5` sets
/// `loss.alpha`.
pub const ENV_PREFIX: &str = "RETROFEAT_";

/// Keys that every config file must spell out.
pub const REQUIRED: [&str; 4] = ["data.classes", "tasks.B", "tasks.C", "tasks.T"];

/// Every recognised key, in canonical order.
pub const KEYS: [&str; 36] = [
    "data.classes",
    "data.noise",
    "data.seed",
    "data.side",
    "data.test_per_class",
    "data.train_per_class",
    "loss.alpha",
    "loss.feature_kd",
    "loss.kd_temperature",
    "loss.logit_kd",
    "loss.old_cls",
    "loss.restrict_new_cls",
    "mgs.K",
    "mgs.covariance",
    "model.feature_dim",
    "model.head_bias",
    "model.head_init_gain",
    "model.hidden",
    "strategy.compensation",
    "strategy.generation",
    "strategy.interp_high",
    "strategy.interp_low",
    "strategy.mixing_weight",
    "strategy.noise_scale",
    "tasks.B",
    "tasks.C",
    "tasks.T",
    "tasks.order_seed",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.epochs",
    "train.lr",
    "train.lr_decay",
    "train.milestones",
    "train.seed",
];

// Not part of the canonical text; the remaining Adam knobs.
const EXTRA_KEYS: [&str; 2] = ["train.adam_eps", "train.weight_decay"];

/// A parsed config file: plain assignments plus optional sweep axes
/// (`sweep.<key> = v1,v2,...`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
    pub sweep: BTreeMap<String, Vec<String>>,
}

fn known(key: &str) -> bool {
    KEYS.contains(&key) || EXTRA_KEYS.contains(&key)
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut out = ConfigFile::default();
        let mut errs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {}: expected `key = value`, got {:?}", n + 1, raw));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(axis) = k.strip_prefix("sweep.") {
                if !known(axis) {
                    errs.push(format!("line {}: unknown sweep key {}", n + 1, axis));
                    continue;
                }
                let vals: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if vals.is_empty() {
                    errs.push(format!("line {}: sweep.{} lists no values", n + 1, axis));
                } else if out.sweep.insert(axis.to_string(), vals).is_some() {
                    errs.push(format!("line {}: duplicate key sweep.{}", n + 1, axis));
                }
                continue;
            }
            if !known(k) {
                errs.push(format!("line {}: unknown key {}", n + 1, k));
            } else if out.values.insert(k.to_string(), v.to_string()).is_some() {
                errs.push(format!("line {}: duplicate key {}", n + 1, k));
            }
        }
        if errs.is_empty() {
            Ok(out)
        } else {
            Err(CliError::Config(errs))
        }
    }

    /// Applies `RETROFEAT_*` variables from `vars` on top of the file.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), CliError> {
        let mut errs = Vec::new();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let wanted = rest.replace("__", ".").to_ascii_lowercase();
            match KEYS.iter().chain(&EXTRA_KEYS).find(|k| k.to_ascii_lowercase() == wanted) {
                Some(k) => {
                    self.values.insert(k.to_string(), value);
                }
                None => errs.push(format!("environment variable {} names no config key", name)),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }

    /// Applies `key=value` assignments given on the command line.
    pub fn apply_sets(&mut self, sets: &[(String, String)]) -> Result<(), CliError> {
        let bad: Vec<String> = sets.iter().filter(|(k, _)| !known(k)).map(|(k, _)| format!("unknown key {}", k)).collect();
        if !bad.is_empty() {
            return Err(CliError::Config(bad));
        }
        for (k, v) in sets {
            self.values.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    /// Builds and validates the experiment config. Every problem is reported,
    /// each naming its key.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut errs: Vec<String> = REQUIRED
            .iter()
            .filter(|k| !self.values.contains_key(**k))
            .map(|k| format!("missing required field {}", k))
            .collect();
        let mut cfg = ExperimentConfig::default();
        for (k, v) in &self.values {
            if let Err(e) = set(&mut cfg, k, v) {
                errs.push(format!("{}: {}", k, e));
            }
        }
        cfg.model.input_dim = cfg.data.side * cfg.data.side;
        if errs.is_empty() {
            if let Err(retrofeat_core::Error::Config(more)) = cfg.validate() {
                errs.extend(more);
            }
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(errs))
        }
    }
}

/// `key=value` for `--set`.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {:?}", s))
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {:?}", v))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got {:?}", v)),
    }
}

fn list(v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn optional(v: &str) -> Result<Option<f64>, String> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn covariance(v: &str) -> Result<CovarianceMode, String> {
    match v {
        "per_class" => Ok(CovarianceMode::PerClass),
        "tied" => Ok(CovarianceMode::Tied),
        _ => Err(format!("expected per_class or tied, got {:?}", v)),
    }
}

fn set(cfg: &mut ExperimentConfig, key: &str, v: &str) -> Result<(), String> {
    let (d, p, m, t) = (&mut cfg.data, &mut cfg.protocol, &mut cfg.model, &mut cfg.train);
    match key {
        "data.classes" => d.class_count = num(v)?,
        "data.noise" => d.noise_std = num(v)?,
        "data.seed" => d.seed = num(v)?,
        "data.side" => d.side = num(v)?,
        "data.test_per_class" => d.per_class_test = num(v)?,
        "data.train_per_class" => d.per_class_train = num(v)?,
        "loss.alpha" => t.alpha = num(v)?,
        "loss.feature_kd" => t.feature_kd = flag(v)?,
        "loss.kd_temperature" => t.kd_temperature = num(v)?,
        "loss.logit_kd" => t.logit_kd = flag(v)?,
        "loss.old_cls" => t.old_cls = flag(v)?,
        "loss.restrict_new_cls" => t.restrict_new_cls = flag(v)?,
        "mgs.K" => t.strategy.candidates = num(v)?,
        "mgs.covariance" => t.covariance = covariance(v)?,
        "model.feature_dim" => m.feature_dim = num(v)?,
        "model.head_bias" => m.head_bias = flag(v)?,
        "model.head_init_gain" => m.head_init_gain = num(v)?,
        "model.hidden" => m.hidden = list(v)?,
        "strategy.compensation" => t.strategy.compensation = Compensation::from_str(v).map_err(|e| e.to_string())?,
        "strategy.generation" => t.strategy.generation = Generation::from_str(v).map_err(|e| e.to_string())?,
        "strategy.interp_high" => t.strategy.interp_high = num(v)?,
        "strategy.interp_low" => t.strategy.interp_low = num(v)?,
        "strategy.mixing_weight" => t.strategy.mixing_weight = optional(v)?,
        "strategy.noise_scale" => t.strategy.noise_scale = optional(v)?,
        "tasks.B" => p.base = num(v)?,
        "tasks.C" => p.per_phase = num(v)?,
        "tasks.T" => p.phases = num(v)?,
        "tasks.order_seed" => p.order_seed = num(v)?,
        "train.batch_size" => t.batch_size = num(v)?,
        "train.beta1" => t.adam.beta1 = num(v)?,
        "train.beta2" => t.adam.beta2 = num(v)?,
        "train.epochs" => t.epochs = num(v)?,
        "train.lr" => t.adam.learning_rate = num(v)?,
        "train.lr_decay" => t.lr_decay = num(v)?,
        "train.milestones" => t.milestones = list(v)?,
        "train.seed" => t.seed = num(v)?,
        "train.adam_eps" => t.adam.eps = num(v)?,
        "train.weight_decay" => t.adam.weight_decay = num(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

/// Canonical value of `key` in `cfg`.
pub fn get(cfg: &ExperimentConfig, key: &str) -> Option<String> {
    let (d, p, m, t) = (&cfg.data, &cfg.protocol, &cfg.model, &cfg.train);
    Some(match key {
        "data.classes" => d.class_count.to_string(),
        "data.noise" => d.noise_std.to_string(),
        "data.seed" => d.seed.to_string(),
        "data.side" => d.side.to_string(),
        "data.test_per_class" => d.per_class_test.to_string(),
        "data.train_per_class" => d.per_class_train.to_string(),
        "loss.alpha" => t.alpha.to_string(),
        "loss.feature_kd" => t.feature_kd.to_string(),
        "loss.kd_temperature" => t.kd_temperature.to_string(),
        "loss.logit_kd" => t.logit_kd.to_string(),
        "loss.old_cls" => t.old_cls.to_string(),
        "loss.restrict_new_cls" => t.restrict_new_cls.to_string(),
        "mgs.K" => t.strategy.candidates.to_string(),
        "mgs.covariance" => match t.covariance {
            CovarianceMode::PerClass => "per_class".into(),
            CovarianceMode::Tied => "tied".into(),
        },
        "model.feature_dim" => m.feature_dim.to_string(),
        "model.head_bias" => m.head_bias.to_string(),
        "model.head_init_gain" => m.head_init_gain.to_string(),
        "model.hidden" => join(&m.hidden),
        "strategy.compensation" => t.strategy.compensation.as_str().into(),
        "strategy.generation" => t.strategy.generation.as_str().into(),
        "strategy.interp_high" => t.strategy.interp_high.to_string(),
        "strategy.interp_low" => t.strategy.interp_low.to_string(),
        "strategy.mixing_weight" => opt(t.strategy.mixing_weight),
        "strategy.noise_scale" => opt(t.strategy.noise_scale),
        "tasks.B" => p.base.to_string(),
        "tasks.C" => p.per_phase.to_string(),
        "tasks.T" => p.phases.to_string(),
        "tasks.order_seed" => p.order_seed.to_string(),
        "train.batch_size" => t.batch_size.to_string(),
        "train.beta1" => t.adam.beta1.to_string(),
        "train.beta2" => t.adam.beta2.to_string(),
        "train.epochs" => t.epochs.to_string(),
        "train.lr" => t.adam.learning_rate.to_string(),
        "train.lr_decay" => t.lr_decay.to_string(),
        "train.milestones" => join(&t.milestones),
        "train.seed" => t.seed.to_string(),
        "train.adam_eps" => t.adam.eps.to_string(),
        "train.weight_decay" => t.adam.weight_decay.to_string(),
        _ => return None,
    })
}

/// Every key with its resolved value, sorted.
pub fn echo(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    KEYS.iter()
        .chain(&EXTRA_KEYS)
        .map(|k| (k.to_string(), get(cfg, k).expect("listed key")))
        .collect()
}

/// `key = value` lines of every resolved key except the training seed,
/// sorted by key.
pub fn canonical_text(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    for (k, v) in echo(cfg) {
        if k != "train.seed" {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
    }
    s
}

/// Hex SHA-256 of the canonical text.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    Sha256::digest(canonical_text(cfg).as_bytes())
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

/// One cell of a sweep grid: its assignments (in axis order) and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub sets: Vec<(String, String)>,
    pub seed: u64,
}

/// Cartesian product of the sweep axes. `sweep.train.seed` provides the
/// seeds; without it the file's own seed is used.
pub fn expand_grid(file: &ConfigFile) -> Result<Vec<Cell>, CliError> {
    let seeds: Vec<u64> = match file.sweep.get("train.seed") {
        Some(v) => v
            .iter()
            .map(|s| num(s))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(vec![format!("sweep.train.seed: {}", e)]))?,
        None => vec![file.values.get("train.seed").map_or(Ok(0), |s| num(s)).map_err(|e| CliError::Config(vec![e]))?],
    };
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (axis, values) in file.sweep.iter().filter(|(k, _)| *k != "train.seed") {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((axis.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    Ok(combos
        .into_iter()
        .flat_map(|sets| seeds.iter().map(move |&seed| Cell { sets: sets.clone(), seed }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "data.classes = 20\ntasks.B = 10\ntasks.C = 2\ntasks.T = 5\n";

    #[test]
    fn every_key_round_trips() {
        let cfg = ConfigFile::parse(MINIMAL).unwrap().resolve().unwrap();
        let text: String = echo(&cfg).iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect();
        let again = ConfigFile::parse(&text).unwrap().resolve().unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn missing_field_is_named() {
        let err = ConfigFile::parse("data.classes = 20\ntasks.C = 2\ntasks.T = 5\n").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("tasks.B"), "{}", err);
    }

    #[test]
    fn unknown_and_malformed_lines_are_rejected() {
        let err = ConfigFile::parse("tasks.X = 1\nnonsense\n").unwrap_err();
        let s = err.to_string();
        assert!(s.contains("tasks.X") && s.contains("line 2"), "{}", s);
        assert!(ConfigFile::parse("tasks.B = 1\ntasks.B = 2\n").is_err());
    }

    #[test]
    fn hash_ignores_formatting_and_seed() {
        let a = ConfigFile::parse(MINIMAL).unwrap().resolve().unwrap();
        let b = ConfigFile::parse("# comment\ntasks.T=5\n tasks.C = 2 \ntasks.B = 10\ndata.classes = 20\ntrain.seed = 7\nloss.alpha = 15.0\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = ConfigFile::parse(&format!("{}loss.alpha = 14\n", MINIMAL)).unwrap().resolve().unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn env_overrides_apply() {
        let mut f = ConfigFile::parse(MINIMAL).unwrap();
        f.apply_env([
            ("RETROFEAT_LOSS__ALPHA".to_string(), "3".to_string()),
            ("RETROFEAT_MGS__K".to_string(), "10".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ])
        .unwrap();
        let cfg = f.resolve().unwrap();
        assert_eq!(cfg.train.alpha, 3.0);
        assert_eq!(cfg.train.strategy.candidates, 10);
        assert!(f.apply_env([("RETROFEAT_NOPE".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn grid_cardinality() {
        let f = ConfigFile::parse(&format!(
            "{}sweep.strategy.generation = mgs, prototype\nsweep.strategy.compensation = sfc,none\nsweep.train.seed = 0,1,2\n",
            MINIMAL
        ))
        .unwrap();
        let cells = expand_grid(&f).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].sets.len(), 2);
        assert_eq!(cells.iter().filter(|c| c.seed == 2).count(), 4);
    }

    #[test]
    fn validation_errors_are_collected() {
        let err = ConfigFile::parse("data.classes = 20\ntasks.B = 10\ntasks.C = 2\ntasks.T = 4\nloss.alpha = -1\n")
            .unwrap()
            .resolve()
            .unwrap_err();
        let s = err.to_string();
        assert!(s.contains("loss.alpha") && s.contains("tasks.B"), "{}", s);
    }
}
