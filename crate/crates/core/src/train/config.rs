use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{F1Aggregation, LossConfig};
use crate::model::{BlockKind, ModelConfig};
use crate::tensor::LrSchedule;

/// How a binary shape becomes the single-channel network input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputMode {
    RawShape,
    Distance,
    #[default]
    RepairedDistance,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::RawShape => "raw_shape",
            InputMode::Distance => "distance",
            InputMode::RepairedDistance => "repaired_distance",
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_shape" => Ok(InputMode::RawShape),
            "distance" => Ok(InputMode::Distance),
            "repaired_distance" => Ok(InputMode::RepairedDistance),
            _ => Err(Error::Config(format!(
                "input_mode must be raw_shape, distance or repaired_distance, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub shapes_dir: PathBuf,
    pub skeletons_dir: PathBuf,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub input_mode: InputMode,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Joint L2 bound on the gradient before each update.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Final checkpoint; the best-F1 checkpoint goes next to it (see [`best_checkpoint_path`]).
    pub checkpoint: Option<PathBuf>,
    pub eval_interval: usize,
    pub f1_aggregation: F1Aggregation,
    /// Stop once an evaluation reaches this F1.
    pub stop_at_f1: Option<f64>,
    /// Per-step CSV log.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shapes_dir: PathBuf::from("data/shapes"),
            skeletons_dir: PathBuf::from("data/skeletons"),
            split_ratio: 0.8,
            split_seed: 0,
            input_mode: InputMode::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            lr_max: 0.02,
            lr_min: 0.0,
            momentum: 0.9,
            grad_clip: Some(1.0),
            batch_size: 4,
            total_steps: 1000,
            checkpoint: None,
            eval_interval: 100,
            f1_aggregation: F1Aggregation::Mean,
            stop_at_f1: None,
            log_path: None,
        }
    }
}

/// `run.ckpt` -> `run.best.ckpt`.
pub fn best_checkpoint_path(final_path: &Path) -> PathBuf {
    let stem = final_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match final_path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    final_path.with_file_name(name)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn optional(v: &str) -> Option<&str> {
    (!v.is_empty() && v != "none").then_some(v)
}

fn parse_stages(v: &str) -> Result<BTreeSet<usize>> {
    match optional(v) {
        None => Ok(BTreeSet::new()),
        Some(v) => v.split(',').map(|s| parse("attention_stages", s.trim())).collect(),
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_steps: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if let Some(f) = self.stop_at_f1 {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("stop_at_f1 must lie in [0, 1], got {f}")));
            }
        }
        self.schedule().validate()?;
        self.model.validate()?;
        self.loss.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let l = &mut self.loss;
        match key {
            "shapes_dir" => self.shapes_dir = PathBuf::from(v),
            "skeletons_dir" => self.skeletons_dir = PathBuf::from(v),
            "split_ratio" => self.split_ratio = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "input_mode" => self.input_mode = v.parse()?,
            "base_channels" => m.base_channels = parse(key, v)?,
            "attention_stages" => m.attention_stages = parse_stages(v)?,
            "attention_reduction" => m.attention_reduction = parse(key, v)?,
            "use_batch_norm" => m.use_batch_norm = parse_bool(key, v)?,
            "aux_heads" => m.aux_heads = parse_bool(key, v)?,
            "input_channels" => m.input_channels = parse(key, v)?,
            "seed" => m.seed = parse(key, v)?,
            "block_type" => m.block_type = BlockKind::parse(v)?,
            "decoder_attention" => m.decoder_attention = parse_bool(key, v)?,
            "epsilon" => l.epsilon = parse(key, v)?,
            "gamma" => l.gamma = parse(key, v)?,
            "w_pos" => l.w_pos = parse(key, v)?,
            "w_neg" => l.w_neg = parse(key, v)?,
            "lambda_dice" => l.lambda_dice = parse(key, v)?,
            "lambda_focal" => l.lambda_focal = parse(key, v)?,
            "aux_weight" => l.aux_weight = parse(key, v)?,
            "prob_clamp" => l.prob_clamp = parse(key, v)?,
            "lr_max" => self.lr_max = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "grad_clip" => self.grad_clip = optional(v).map(|v| parse(key, v)).transpose()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "checkpoint" => self.checkpoint = optional(v).map(PathBuf::from),
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "f1_aggregation" => self.f1_aggregation = F1Aggregation::parse(v)?,
            "stop_at_f1" => self.stop_at_f1 = optional(v).map(|v| parse(key, v)).transpose()?,
            "log_path" => self.log_path = optional(v).map(PathBuf::from),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("invalid config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("invalid config: "))))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.shapes_dir);
        resolve(&mut cfg.skeletons_dir);
        if let Some(p) = cfg.checkpoint.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.log_path.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let stages: Vec<String> = m.attention_stages.iter().map(|s| s.to_string()).collect();
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("shapes_dir", self.shapes_dir.display().to_string());
        kv("skeletons_dir", self.skeletons_dir.display().to_string());
        kv("split_ratio", self.split_ratio.to_string());
        kv("split_seed", self.split_seed.to_string());
        kv("input_mode", self.input_mode.as_str().into());
        kv("base_channels", m.base_channels.to_string());
        kv("attention_stages", if stages.is_empty() { "none".into() } else { stages.join(",") });
        kv("attention_reduction", m.attention_reduction.to_string());
        kv("use_batch_norm", m.use_batch_norm.to_string());
        kv("aux_heads", m.aux_heads.to_string());
        kv("input_channels", m.input_channels.to_string());
        kv("seed", m.seed.to_string());
        kv("block_type", m.block_type.as_str().into());
        kv("decoder_attention", m.decoder_attention.to_string());
        kv("epsilon", l.epsilon.to_string());
        kv("gamma", l.gamma.to_string());
        kv("w_pos", l.w_pos.to_string());
        kv("w_neg", l.w_neg.to_string());
        kv("lambda_dice", l.lambda_dice.to_string());
        kv("lambda_focal", l.lambda_focal.to_string());
        kv("aux_weight", l.aux_weight.to_string());
        kv("prob_clamp", l.prob_clamp.to_string());
        kv("lr_max", self.lr_max.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("momentum", self.momentum.to_string());
        kv("grad_clip", self.grad_clip.map_or("none".into(), |f| f.to_string()));
        kv("batch_size", self.batch_size.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("checkpoint", opt_path(&self.checkpoint));
        kv("eval_interval", self.eval_interval.to_string());
        kv("f1_aggregation", self.f1_aggregation.as_str().into());
        kv("stop_at_f1", self.stop_at_f1.map_or("none".into(), |f| f.to_string()));
        kv("log_path", opt_path(&self.log_path));
        s
    }
}
