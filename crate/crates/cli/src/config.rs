use std::fmt;
use std::path::PathBuf;

use lmc_core::baselines::{BaselineKind, LearnerConfig};
use lmc_core::taskgen::{family_count, StreamConfig, StreamKind};
use serde::{Deserialize, Serialize};
use toml::Value;

/// Everything needed to reproduce a run. Written next to each run as
/// `experiment.toml` with every key spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub learner: BaselineKind,
    /// Seeds network initialisation and batch order.
    pub seed: u64,
    pub repetitions: usize,
    pub output: Option<PathBuf>,
    /// Train an isolated expert on the last task for the transfer metric.
    pub transfer: bool,
    pub stream: StreamKind,
    pub stream_seed: u64,
    pub stream_cfg: StreamConfig,
    /// Exported task directories of a custom stream.
    pub tasks: Vec<PathBuf>,
    pub learner_cfg: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            learner: BaselineKind::LmcAware,
            seed: 0,
            repetitions: 1,
            output: None,
            transfer: true,
            stream: StreamKind::SMinus,
            stream_seed: 0,
            stream_cfg: StreamConfig::default(),
            tasks: Vec::new(),
            learner_cfg: LearnerConfig::default(),
        }
    }
}

/// Field-level problems found while reading a config.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemaErrors(pub Vec<String>);

impl fmt::Display for SchemaErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for SchemaErrors {}

pub const KEYS: [&str; 34] = [
    "learner.kind",
    "learner.normalize",
    "seed",
    "repetitions",
    "output.dir",
    "metrics.transfer",
    "stream.kind",
    "stream.seed",
    "stream.scale",
    "stream.classes",
    "stream.noise",
    "stream.jitter",
    "stream.long_tasks",
    "stream.tasks",
    "net.channels",
    "net.depth",
    "net.structural_backprop",
    "net.projection_strength",
    "gate.tau",
    "gate.tau_batch",
    "gate.batched",
    "gate.hard",
    "expansion.enabled",
    "expansion.z",
    "expansion.per_sample",
    "expansion.inherit",
    "expansion.mask_outliers",
    "train.epochs",
    "train.projection_epochs",
    "train.batch_size",
    "train.lr",
    "train.functional_in_projection",
    "cell.stats_decay",
    "cell.stats_warmup",
];

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn want<T>(key: &str, what: &str, v: &Value, got: Option<T>) -> Result<T, String> {
    got.ok_or_else(|| format!("{key}: expected {what}, found {} {v}", kind_name(v)))
}

fn uint(key: &str, v: &Value) -> Result<u64, String> {
    want(key, "non-negative integer", v, v.as_integer().and_then(|i| u64::try_from(i).ok()))
}

fn usize_of(key: &str, v: &Value) -> Result<usize, String> {
    uint(key, v).map(|u| u as usize)
}

fn float(key: &str, v: &Value) -> Result<f64, String> {
    let f = want(key, "number", v, v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))?;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(format!("{key}: must be finite"))
    }
}

fn boolean(key: &str, v: &Value) -> Result<bool, String> {
    want(key, "boolean", v, v.as_bool())
}

fn string<'a>(key: &str, v: &'a Value) -> Result<&'a str, String> {
    want(key, "string", v, v.as_str())
}

fn stream_name(k: StreamKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, SchemaErrors> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SchemaErrors(vec![format!("syntax: {}", e.message())]))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        let mut cfg = ExperimentConfig::default();
        let errors: Vec<String> = entries.iter().filter_map(|(k, v)| cfg.set(k, v).err()).collect();
        if !errors.is_empty() {
            return Err(SchemaErrors(errors));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SchemaErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| SchemaErrors(vec![format!("{}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), String> {
        let l = &mut self.learner_cfg;
        match key {
            "learner.kind" => self.learner = string(key, v)?.parse().map_err(|e| format!("{key}: {e}"))?,
            "learner.normalize" => l.normalize = boolean(key, v)?,
            "seed" => self.seed = uint(key, v)?,
            "repetitions" => self.repetitions = usize_of(key, v)?,
            "output.dir" => self.output = Some(PathBuf::from(string(key, v)?)),
            "metrics.transfer" => self.transfer = boolean(key, v)?,
            "stream.kind" => self.stream = string(key, v)?.parse().map_err(|e| format!("{key}: {e}"))?,
            "stream.seed" => self.stream_seed = uint(key, v)?,
            "stream.scale" => self.stream_cfg.scale = float(key, v)?,
            "stream.classes" => self.stream_cfg.classes = usize_of(key, v)?,
            "stream.noise" => self.stream_cfg.noise = float(key, v)?,
            "stream.jitter" => self.stream_cfg.jitter = float(key, v)?,
            "stream.long_tasks" => self.stream_cfg.long_tasks = usize_of(key, v)?,
            "stream.tasks" => {
                let arr = want(key, "array of paths", v, v.as_array())?;
                self.tasks = arr.iter().map(|p| string(key, p).map(PathBuf::from)).collect::<Result<_, _>>()?;
            }
            "net.channels" => l.net.channels = usize_of(key, v)?,
            "net.depth" => l.net.depth = usize_of(key, v)?,
            "net.structural_backprop" => l.net.structural_backprop = boolean(key, v)?,
            "net.projection_strength" => l.net.projection_strength = float(key, v)?,
            "gate.tau" => l.net.gate.tau = float(key, v)?,
            "gate.tau_batch" => l.net.gate.tau_batch = float(key, v)?,
            "gate.batched" => l.net.gate.batched = boolean(key, v)?,
            "gate.hard" => l.net.gate.hard = boolean(key, v)?,
            "expansion.enabled" => l.net.expansion.enabled = boolean(key, v)?,
            "expansion.z" => l.net.expansion.z_threshold = float(key, v)?,
            "expansion.per_sample" => l.net.expansion.per_sample = boolean(key, v)?,
            "expansion.inherit" => l.net.expansion.inherit = boolean(key, v)?,
            "expansion.mask_outliers" => l.net.expansion.mask_outliers = boolean(key, v)?,
            "train.epochs" => l.train.epochs = usize_of(key, v)?,
            "train.projection_epochs" => l.train.projection_epochs = usize_of(key, v)?,
            "train.batch_size" => l.train.batch_size = usize_of(key, v)?,
            "train.lr" => l.train.adam.lr = float(key, v)?,
            "train.functional_in_projection" => l.train.functional_in_projection = boolean(key, v)?,
            "cell.stats_decay" => l.net.cell.stats_decay = float(key, v)?,
            "cell.stats_warmup" => l.net.cell.stats_warmup = uint(key, v)?,
            _ => return Err(format!("{key}: unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let l = &self.learner_cfg;
        let u = |x: u64| Value::Integer(x as i64);
        let mut v = vec![
            ("learner.kind", Value::String(self.learner.name().into())),
            ("learner.normalize", Value::Boolean(l.normalize)),
            ("seed", u(self.seed)),
            ("repetitions", u(self.repetitions as u64)),
        ];
        if let Some(dir) = &self.output {
            v.push(("output.dir", Value::String(dir.display().to_string())));
        }
        v.extend([
            ("metrics.transfer", Value::Boolean(self.transfer)),
            ("stream.kind", Value::String(stream_name(self.stream))),
            ("stream.seed", u(self.stream_seed)),
            ("stream.scale", Value::Float(self.stream_cfg.scale)),
            ("stream.classes", u(self.stream_cfg.classes as u64)),
            ("stream.noise", Value::Float(self.stream_cfg.noise)),
            ("stream.jitter", Value::Float(self.stream_cfg.jitter)),
            ("stream.long_tasks", u(self.stream_cfg.long_tasks as u64)),
            (
                "stream.tasks",
                Value::Array(self.tasks.iter().map(|p| Value::String(p.display().to_string())).collect()),
            ),
            ("net.channels", u(l.net.channels as u64)),
            ("net.depth", u(l.net.depth as u64)),
            ("net.structural_backprop", Value::Boolean(l.net.structural_backprop)),
            ("net.projection_strength", Value::Float(l.net.projection_strength)),
            ("gate.tau", Value::Float(l.net.gate.tau)),
            ("gate.tau_batch", Value::Float(l.net.gate.tau_batch)),
            ("gate.batched", Value::Boolean(l.net.gate.batched)),
            ("gate.hard", Value::Boolean(l.net.gate.hard)),
            ("expansion.enabled", Value::Boolean(l.net.expansion.enabled)),
            ("expansion.z", Value::Float(l.net.expansion.z_threshold)),
            ("expansion.per_sample", Value::Boolean(l.net.expansion.per_sample)),
            ("expansion.inherit", Value::Boolean(l.net.expansion.inherit)),
            ("expansion.mask_outliers", Value::Boolean(l.net.expansion.mask_outliers)),
            ("train.epochs", u(l.train.epochs as u64)),
            ("train.projection_epochs", u(l.train.projection_epochs as u64)),
            ("train.batch_size", u(l.train.batch_size as u64)),
            ("train.lr", Value::Float(l.train.adam.lr)),
            ("train.functional_in_projection", Value::Boolean(l.train.functional_in_projection)),
            ("cell.stats_decay", Value::Float(l.net.cell.stats_decay)),
            ("cell.stats_warmup", u(l.net.cell.stats_warmup)),
        ]);
        v
    }

    /// Flat `key = value` lines that parse back to `self`.
    pub fn to_toml(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), SchemaErrors> {
        let mut e = Vec::new();
        let l = &self.learner_cfg;
        let s = &self.stream_cfg;
        if self.repetitions == 0 {
            e.push("repetitions: must be at least 1".to_string());
        }
        if s.scale <= 0.0 {
            e.push(format!("stream.scale: must be positive, found {}", s.scale));
        }
        if s.classes < 2 || s.classes > family_count() {
            e.push(format!("stream.classes: must lie in 2..={}, found {}", family_count(), s.classes));
        }
        if !(0.0..=1.0).contains(&s.noise) {
            e.push(format!("stream.noise: must lie in [0, 1], found {}", s.noise));
        }
        if s.jitter < 0.0 {
            e.push(format!("stream.jitter: must be non-negative, found {}", s.jitter));
        }
        if self.stream == StreamKind::Long && s.long_tasks == 0 {
            e.push("stream.long_tasks: must be positive".to_string());
        }
        match (self.stream == StreamKind::Custom, self.tasks.is_empty()) {
            (true, true) => e.push("stream.tasks: a custom stream needs at least one task directory".to_string()),
            (false, false) => e.push("stream.tasks: only valid with stream.kind = \"custom\"".to_string()),
            _ => {}
        }
        if l.net.channels == 0 {
            e.push("net.channels: must be positive".to_string());
        }
        if l.net.depth == 0 {
            e.push("net.depth: must be positive".to_string());
        }
        if l.net.projection_strength < 0.0 {
            e.push("net.projection_strength: must be non-negative".to_string());
        }
        for (k, t) in [("gate.tau", l.net.gate.tau), ("gate.tau_batch", l.net.gate.tau_batch)] {
            if t <= 0.0 {
                e.push(format!("{k}: must be positive, found {t}"));
            }
        }
        if l.train.epochs == 0 {
            e.push("train.epochs: must be positive".to_string());
        }
        if l.train.batch_size == 0 {
            e.push("train.batch_size: must be positive".to_string());
        }
        if l.train.projection_epochs > 0 && l.train.projection_epochs >= l.train.epochs {
            e.push(format!("train.projection_epochs: must be shorter than train.epochs ({})", l.train.epochs));
        }
        if l.train.adam.lr <= 0.0 {
            e.push(format!("train.lr: must be positive, found {}", l.train.adam.lr));
        }
        if !(0.0..1.0).contains(&l.net.cell.stats_decay) {
            e.push(format!("cell.stats_decay: must lie in [0, 1), found {}", l.net.cell.stats_decay));
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(SchemaErrors(e))
        }
    }

    /// Copy for repetition `r` with both seeds shifted.
    pub fn with_seed_offset(&self, r: u64) -> Self {
        ExperimentConfig {
            seed: self.seed + r,
            stream_seed: self.stream_seed + r,
            repetitions: 1,
            ..self.clone()
        }
    }

    /// Learner settings with the seeds filled in.
    pub fn learner_config(&self) -> LearnerConfig {
        let mut l = self.learner_cfg;
        l.net.seed = self.seed;
        l.train.seed = self.seed;
        l
    }
}

/// Reads a command-line value as TOML, falling back to a bare string.
pub fn parse_value(s: &str) -> Value {
    format!("v = {s}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(s.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.learner = BaselineKind::LmcHard;
        c.stream_cfg.scale = 0.3;
        c.learner_cfg.net.gate.tau = 0.25;
        c.output = Some("out/x".into());
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let keys: Vec<&str> = c.entries().iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, KEYS.to_vec());
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = ExperimentConfig::parse("train.epochs = 3\ntrain.projection_epochs = 1\ngate.tau = 0.5").unwrap();
        let b = ExperimentConfig::parse("[train]\nepochs = 3\nprojection_epochs = 1\n[gate]\ntau = 0.5").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.learner_cfg.train.epochs, 3);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_reported_per_field() {
        let e = ExperimentConfig::parse("gate.temperature = 1\ntrain.epochs = \"ten\"\nlearner.kind = \"hat\"").unwrap_err();
        assert_eq!(e.0.len(), 3, "{e}");
        assert!(e.0.iter().any(|m| m.starts_with("gate.temperature: unknown key")));
        assert!(e.0.iter().any(|m| m.starts_with("train.epochs: expected non-negative integer")));
        assert!(e.0.iter().any(|m| m.starts_with("learner.kind:")));
    }

    #[test]
    fn cross_field_checks() {
        let e = ExperimentConfig::parse("train.epochs = 4\ntrain.projection_epochs = 4\nrepetitions = 0").unwrap_err();
        assert!(e.0.iter().any(|m| m.starts_with("train.projection_epochs")));
        assert!(e.0.iter().any(|m| m.starts_with("repetitions")));
        assert!(ExperimentConfig::parse("stream.kind = \"custom\"").is_err());
    }

    #[test]
    fn values_from_the_command_line() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("2.5"), Value::Float(2.5));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("lmc-hard"), Value::String("lmc-hard".into()));
    }
}
