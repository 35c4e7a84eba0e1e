//! `key = value` configuration files with dotted section paths.
//!
//! ```text
//! # comments run to the end of the line
//! data.conflict_ratio = 0.01
//! model.hidden = 100, 100
//! bcsi.seeds = 1, 2, 3
//! ```
//!
//! Every key is optional; anything left out keeps the toy default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bcsi::datagen::GenConfig;
use bcsi::influence::Damping;
use bcsi::nn::{LossKind, OptimizerKind};
use bcsi::pipeline::{DataSource, PipelineSettings};
use serde::Serialize;

/// A problem with the configuration, tied to the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at `{}`: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

/// Extra evaluation products of the `eval` stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSection {
    /// Master seeds for the detector comparison and the ratio sweep.
    pub seeds: Vec<u64>,
    /// Conflict ratios to sweep; empty skips the sweep.
    pub ratios: Vec<f64>,
    /// Compare all detectors on the training set.
    pub compare: bool,
    /// Epochs of the self-influence precision curve; empty skips it.
    pub epochs: Vec<usize>,
    /// Bins of the BCSI score histogram; 0 skips it.
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seeds: vec![0, 1, 2, 3, 4],
            ratios: Vec::new(),
            compare: false,
            epochs: Vec::new(),
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub settings: PipelineSettings,
    pub eval: EvalSection,
    pub out_dir: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            settings: PipelineSettings::toy(),
            eval: EvalSection::default(),
            out_dir: None,
        }
    }
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::new(format!("line {}", n + 1), format!("bad key `{key}`")));
            }
            if map.insert(key.clone(), (n + 1, value.trim().to_string())).is_some() {
                return Err(ConfigError::new(key, "set more than once"));
            }
        }
        Ok(Fields { map })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((_, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError::new(key, format!("cannot parse `{v}`"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, dst: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.take(key)? {
            *dst = v;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((_, v)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| ConfigError::new(key, format!("cannot parse list item `{s}`")))
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(ConfigError::new(key, format!("unknown key (line {line})"))),
        }
    }
}

fn optimizer(key: &str, name: &str) -> Result<OptimizerKind, ConfigError> {
    match name {
        "adam" => Ok(OptimizerKind::adam()),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(ConfigError::new(key, format!("unknown optimizer `{other}` (adam or sgd)"))),
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut f = Fields::parse(text)?;
        let mut cfg = CliConfig::default();
        let s = &mut cfg.settings;

        let kind: String = f.take("data.kind")?.unwrap_or_else(|| "synthetic".into());
        match kind.as_str() {
            "synthetic" => {
                let (mut gen, mut test_per_class) = match &s.data {
                    DataSource::Synthetic { gen, test_per_class } => (gen.clone(), *test_per_class),
                    DataSource::Idx { .. } => (GenConfig::default(), 200),
                };
                f.set("data.n_per_class", &mut gen.n_per_class)?;
                f.set("data.num_classes", &mut gen.num_classes)?;
                f.set("data.d_signal", &mut gen.d_signal)?;
                f.set("data.d_bias", &mut gen.d_bias)?;
                f.set("data.signal_margin", &mut gen.signal_margin)?;
                f.set("data.bias_margin", &mut gen.bias_margin)?;
                f.set("data.noise_sigma", &mut gen.noise_sigma)?;
                f.set("data.conflict_ratio", &mut gen.conflict_ratio)?;
                f.set("data.seed", &mut gen.seed)?;
                f.set("data.test_per_class", &mut test_per_class)?;
                s.data = DataSource::Synthetic { gen, test_per_class };
            }
            "idx" => {
                let mut path = |key: &str| -> Result<PathBuf, ConfigError> {
                    f.take::<PathBuf>(key)?
                        .ok_or_else(|| ConfigError::new(key, "required when data.kind = idx"))
                };
                let train_images = path("data.train_images")?;
                let train_labels = path("data.train_labels")?;
                let test_images = path("data.test_images")?;
                let test_labels = path("data.test_labels")?;
                s.data = DataSource::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                    conflict_ratio: f.take("data.conflict_ratio")?.unwrap_or(0.01),
                    seed: f.take("data.seed")?.unwrap_or(0),
                };
            }
            other => {
                return Err(ConfigError::new("data.kind", format!("unknown kind `{other}` (synthetic or idx)")))
            }
        }

        if let Some(h) = f.list("model.hidden")? {
            s.hidden = h;
        }

        f.set("erm.epochs", &mut s.erm.epochs)?;
        f.set("erm.lr", &mut s.erm.lr)?;
        f.set("erm.batch_size", &mut s.erm.batch_size)?;
        f.set("erm.weight_decay", &mut s.erm.weight_decay)?;
        f.set("erm.seed", &mut s.erm.seed)?;
        if let Some(name) = f.take::<String>("erm.optimizer")? {
            s.erm.optimizer = optimizer("erm.optimizer", &name)?;
        }

        f.set("bcsi.t_epochs", &mut s.detector.epochs)?;
        f.set("bcsi.lr", &mut s.detector.lr)?;
        f.set("bcsi.batch_size", &mut s.detector.batch_size)?;
        f.set("bcsi.weight_decay", &mut s.detector.weight_decay)?;
        if let Some(q) = f.take("bcsi.q")? {
            s.detector.train_loss = LossKind::Gce { q };
        }
        let damping: Option<f64> = f.take("bcsi.damping")?;
        let mode: String = f.take("bcsi.damping_mode")?.unwrap_or_else(|| "relative".into());
        let value = damping.unwrap_or(match s.detector.damping {
            Damping::RelativeTrace(v) | Damping::Absolute(v) => v,
        });
        s.detector.damping = match mode.as_str() {
            "relative" => Damping::RelativeTrace(value),
            "absolute" => Damping::Absolute(value),
            other => {
                return Err(ConfigError::new(
                    "bcsi.damping_mode",
                    format!("unknown mode `{other}` (relative or absolute)"),
                ))
            }
        };
        f.set("bcsi.k", &mut s.k)?;
        let num_runs: Option<usize> = f.take("bcsi.num_runs")?;
        match (f.list::<u64>("bcsi.seeds")?, num_runs) {
            (Some(seeds), Some(n)) if seeds.len() != n => {
                return Err(ConfigError::new(
                    "bcsi.seeds",
                    format!("{} seeds given but bcsi.num_runs = {n}", seeds.len()),
                ))
            }
            (Some(seeds), _) => s.run_seeds = seeds,
            (None, Some(n)) => s.run_seeds = (1..=n as u64).collect(),
            (None, None) => {}
        }

        let ft = &mut s.finetune;
        f.set("finetune.lambda", &mut ft.lambda)?;
        f.set("finetune.n_iter", &mut ft.n_iter)?;
        f.set("finetune.lr", &mut ft.lr)?;
        f.set("finetune.final_lr_factor", &mut ft.final_lr_factor)?;
        f.set("finetune.weight_decay", &mut ft.weight_decay)?;
        f.set("finetune.reinit_last_layer", &mut ft.reinit_last_layer)?;
        f.set("finetune.seed", &mut ft.seed)?;
        f.set("finetune.pivotal_chunk", &mut ft.pivotal_chunk)?;

        let e = &mut cfg.eval;
        if let Some(v) = f.list("eval.seeds")? {
            e.seeds = v;
        }
        if let Some(v) = f.list("eval.ratios")? {
            e.ratios = v;
        }
        if let Some(v) = f.list("eval.epochs")? {
            e.epochs = v;
        }
        f.set("eval.compare", &mut e.compare)?;
        f.set("eval.histogram_bins", &mut e.histogram_bins)?;

        cfg.out_dir = f.take("output.dir")?;
        f.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Re-derives every seed from a single master seed.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.settings = self.settings.with_master_seed(seed);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.settings;
        let prefixed = |section: &str, e: bcsi::Error| match e {
            bcsi::Error::InvalidArgument { field, reason } if field.contains('.') => {
                ConfigError::new(field, reason)
            }
            bcsi::Error::InvalidArgument { field, reason } => {
                ConfigError::new(format!("{section}.{field}"), reason)
            }
            other => ConfigError::new(section, other.to_string()),
        };
        match &s.data {
            DataSource::Synthetic { gen, test_per_class } => {
                gen.validate().map_err(|e| prefixed("data", e))?;
                if *test_per_class < 1 {
                    return Err(ConfigError::new("data.test_per_class", "must be at least 1"));
                }
            }
            DataSource::Idx { conflict_ratio, .. } => {
                if !(0.0..=1.0).contains(conflict_ratio) {
                    return Err(ConfigError::new("data.conflict_ratio", "must be in [0, 1]"));
                }
            }
        }
        if s.hidden.contains(&0) {
            return Err(ConfigError::new("model.hidden", "widths must be at least 1"));
        }
        s.erm.validate().map_err(|e| prefixed("erm", e))?;
        s.detector.train_config().validate().map_err(|e| prefixed("bcsi", e))?;
        if s.detector.epochs < 1 {
            return Err(ConfigError::new("bcsi.t_epochs", "must be at least 1"));
        }
        match s.detector.damping {
            Damping::RelativeTrace(v) | Damping::Absolute(v) if !(v > 0.0 && v.is_finite()) => {
                return Err(ConfigError::new("bcsi.damping", "must be positive"));
            }
            _ => {}
        }
        s.finetune.validate().map_err(|e| prefixed("finetune", e))?;
        s.validate().map_err(|e| prefixed("bcsi", e))?;
        bcsi::selection::check_distinct_seeds(&self.eval.seeds)
            .map_err(|_| ConfigError::new("eval.seeds", "need at least one seed, all distinct"))?;
        if let Some(r) = self.eval.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(ConfigError::new("eval.ratios", format!("{r} is outside [0, 1]")));
        }
        if self.eval.epochs.contains(&0) {
            return Err(ConfigError::new("eval.epochs", "epochs start at 1"));
        }
        Ok(())
    }
}
