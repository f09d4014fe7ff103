//! Flat `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored, later assignments override
//! earlier ones, and unknown keys are errors. [`RunConfig::echo`] prints
//! every key with its resolved value in a form `parse` reads back.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::bench::{EvalMode, PsnrMode};
use crate::error::{Error, Result};
use crate::interweave::AseMode;
use crate::scale_space::{scale_grid, validate_widths, ScaleGroups, ScalePair, DEFAULT_S_MAX};
use crate::trainer::TrainConfig;
use crate::upsampler::Skip;

/// Scalar type used for weights and training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!(
                "unknown precision `{other}` (f32|f64)"
            ))),
        }
    }
}

/// Scale set `{min, min+step, ..., max}` split into one group per width.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
    pub s_max: f64,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self {
            min: 1.1,
            max: 4.0,
            step: 0.1,
            s_max: DEFAULT_S_MAX,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    /// Directory of HR training PNGs.
    pub train_dir: Option<PathBuf>,
    /// Number of generated training images, used when `train_dir` is unset.
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathsConfig {
    /// Store to start training from; a fresh one is built when unset.
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    /// Evaluation CSV; the text table goes next to it.
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub data_dir: Option<PathBuf>,
    /// Generated test images `synthetic_first..+synthetic_count`, used when
    /// `data_dir` is unset.
    pub synthetic_first: usize,
    pub synthetic_count: usize,
    pub scales: Vec<ScalePair>,
    pub mode: EvalMode,
    pub psnr: PsnrMode,
    /// Dataset label; defaults to the directory name.
    pub dataset: String,
    /// Row label; defaults to the ablation settings.
    pub variant: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            synthetic_first: 0,
            synthetic_count: 0,
            scales: [2.0, 3.0, 4.0]
                .iter()
                .map(|&s| ScalePair { h: s, w: s })
                .collect(),
            mode: EvalMode::Subnet,
            psnr: PsnrMode::Rgb,
            dataset: String::new(),
            variant: String::new(),
        }
    }
}

/// Everything one command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub precision: Precision,
    pub init_seed: u64,
    /// Start fresh stores with the upsampler's output layer at zero, so the
    /// untrained model returns the skip image.
    pub zero_head: bool,
    pub scales: ScaleSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
    /// LR input size used by the cost report.
    pub flops_lr: (usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: BackboneConfig::default(),
            precision: Precision::F64,
            init_seed: 0,
            zero_head: true,
            scales: ScaleSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                synthetic_size: 128,
                ..DataConfig::default()
            },
            paths: PathsConfig::default(),
            eval: EvalConfig::default(),
            flops_lr: (48, 48),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "model.c_in",
    "model.n_blocks",
    "model.kernel",
    "model.lambda",
    "model.widths",
    "model.ase_mode",
    "model.ase_bias",
    "model.hidden",
    "model.skip",
    "model.precision",
    "model.init_seed",
    "model.zero_head",
    "scales.min",
    "scales.max",
    "scales.step",
    "scales.s_max",
    "train.steps",
    "train.p",
    "train.lr",
    "train.decay_every",
    "train.decay_factor",
    "train.batch",
    "train.patch",
    "train.seed",
    "train.phase",
    "train.checkpoint_every",
    "data.train_dir",
    "data.synthetic_count",
    "data.synthetic_size",
    "data.synthetic_seed",
    "paths.init_checkpoint",
    "paths.checkpoint",
    "paths.loss_log",
    "paths.report",
    "eval.data_dir",
    "eval.synthetic_first",
    "eval.synthetic_count",
    "eval.scales",
    "eval.mode",
    "eval.psnr",
    "eval.dataset",
    "eval.variant",
    "flops.lr_h",
    "flops.lr_w",
];

fn num<V: FromStr>(v: &str) -> std::result::Result<V, String>
where
    V::Err: fmt::Display,
{
    v.parse::<V>().map_err(|e| format!("`{v}`: {e}"))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

/// `2`, `1.5x2` (height × width), comma-separated.
fn scale_list(v: &str) -> std::result::Result<Vec<ScalePair>, String> {
    if v.trim().is_empty() {
        return Err("scale list is empty".into());
    }
    v.split(',')
        .map(|item| {
            let item = item.trim();
            let (h, w) = match item.split_once('x') {
                Some((h, w)) => (num::<f64>(h)?, num::<f64>(w)?),
                None => {
                    let s = num::<f64>(item)?;
                    (s, s)
                }
            };
            Ok(ScalePair { h, w })
        })
        .collect()
}

fn widths(v: &str) -> std::result::Result<Vec<f64>, String> {
    let ws = v
        .split(',')
        .map(|x| num::<f64>(x.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    validate_widths(&ws).map_err(|e| e.to_string())?;
    Ok(ws)
}

fn at_least(v: &str, min: usize) -> std::result::Result<usize, String> {
    let n = num::<usize>(v)?;
    if n < min {
        return Err(format!("must be at least {min}, got {n}"));
    }
    Ok(n)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut parser = Parser::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigKey {
                key: line.to_string(),
                line: i + 1,
                message: "expected `key=value`".into(),
            })?;
            parser.set(k.trim(), v.trim(), i + 1)?;
        }
        parser.finish()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `text`, then applies `overrides` (`key=value`, reported as
    /// line 0) on top.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut joined = text.to_string();
        if !joined.is_empty() && !joined.ends_with('\n') {
            joined.push('\n');
        }
        let base_lines = joined.lines().count();
        for (k, v) in overrides {
            joined.push_str(&format!("{k}={v}\n"));
        }
        Self::parse(&joined).map_err(|e| match e {
            Error::ConfigKey { key, line, message } if line > base_lines => Error::ConfigKey {
                key,
                line: 0,
                message,
            },
            other => other,
        })
    }

    /// Every key with its resolved value.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let ws: Vec<String> = m.widths.iter().map(|w| w.to_string()).collect();
        let scales: Vec<String> = e.scales.iter().map(|s| s.to_string()).collect();
        let values: Vec<String> = vec![
            m.c_in.to_string(),
            m.n_blocks.to_string(),
            m.kernel.to_string(),
            m.lambda.to_string(),
            ws.join(","),
            m.ase_mode.to_string(),
            m.ase_bias.to_string(),
            m.hidden.to_string(),
            m.skip.to_string(),
            self.precision.to_string(),
            self.init_seed.to_string(),
            self.zero_head.to_string(),
            self.scales.min.to_string(),
            self.scales.max.to_string(),
            self.scales.step.to_string(),
            self.scales.s_max.to_string(),
            t.steps.to_string(),
            t.p.to_string(),
            t.lr0.to_string(),
            t.decay_every.to_string(),
            t.decay_factor.to_string(),
            t.batch.to_string(),
            t.patch.to_string(),
            t.seed.to_string(),
            t.phase.to_string(),
            t.checkpoint_every.to_string(),
            show_path(&self.data.train_dir),
            self.data.synthetic_count.to_string(),
            self.data.synthetic_size.to_string(),
            self.data.synthetic_seed.to_string(),
            show_path(&self.paths.init_checkpoint),
            show_path(&self.paths.checkpoint),
            show_path(&self.paths.loss_log),
            show_path(&self.paths.report),
            show_path(&e.data_dir),
            e.synthetic_first.to_string(),
            e.synthetic_count.to_string(),
            scales.join(","),
            e.mode.to_string(),
            e.psnr.to_string(),
            e.dataset.clone(),
            e.variant.clone(),
            self.flops_lr.0.to_string(),
            self.flops_lr.1.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn groups(&self) -> Result<ScaleGroups> {
        let grid = scale_grid(self.scales.min, self.scales.max, self.scales.step);
        ScaleGroups::build(
            &grid,
            self.model.widths.len(),
            &self.model.widths,
            self.scales.s_max,
        )
    }

    /// Row label used when `eval.variant` is empty.
    pub fn variant_label(&self) -> String {
        if self.eval.variant.is_empty() {
            format!("{}-p{}", self.model.ase_mode, self.train.p)
        } else {
            self.eval.variant.clone()
        }
    }
}

#[derive(Default)]
struct Parser {
    cfg: RunConfig,
    lines: HashMap<&'static str, usize>,
}

impl Parser {
    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let known = KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| Error::ConfigKey {
                key: key.to_string(),
                line,
                message: "unknown key".into(),
            })?;
        self.lines.insert(known, line);
        self.apply(known, v).map_err(|message| Error::ConfigKey {
            key: key.to_string(),
            line,
            message,
        })
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let c = &mut self.cfg;
        let parsed_enum = |e: Error| match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        match key {
            "model.c_in" => c.model.c_in = at_least(v, 1)?,
            "model.n_blocks" => c.model.n_blocks = at_least(v, 1)?,
            "model.kernel" => {
                let k = at_least(v, 1)?;
                if k % 2 == 0 {
                    return Err(format!("kernel size {k} must be odd"));
                }
                c.model.kernel = k;
            }
            "model.lambda" => c.model.lambda = at_least(v, 1)?,
            "model.widths" => c.model.widths = widths(v)?,
            "model.ase_mode" => c.model.ase_mode = v.parse::<AseMode>().map_err(parsed_enum)?,
            "model.ase_bias" => c.model.ase_bias = num(v)?,
            "model.hidden" => c.model.hidden = at_least(v, 1)?,
            "model.skip" => c.model.skip = v.parse::<Skip>().map_err(parsed_enum)?,
            "model.precision" => c.precision = v.parse().map_err(parsed_enum)?,
            "model.init_seed" => c.init_seed = num(v)?,
            "model.zero_head" => c.zero_head = num(v)?,
            "scales.min" => c.scales.min = num(v)?,
            "scales.max" => c.scales.max = num(v)?,
            "scales.step" => {
                let s: f64 = num(v)?;
                if s.is_nan() || s <= 0.0 {
                    return Err(format!("step must be positive, got {s}"));
                }
                c.scales.step = s;
            }
            "scales.s_max" => c.scales.s_max = num(v)?,
            "train.steps" => c.train.steps = num(v)?,
            "train.p" => {
                let p: f64 = num(v)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("p = {p} is outside [0, 1]"));
                }
                c.train.p = p;
            }
            "train.lr" => {
                let lr: f64 = num(v)?;
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(format!("learning rate {lr} must be positive"));
                }
                c.train.lr0 = lr;
            }
            "train.decay_every" => c.train.decay_every = at_least(v, 1)? as u64,
            "train.decay_factor" => {
                let f: f64 = num(v)?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(format!("decay factor {f} is outside (0, 1]"));
                }
                c.train.decay_factor = f;
            }
            "train.batch" => c.train.batch = at_least(v, 1)?,
            "train.patch" => c.train.patch = at_least(v, 8)?,
            "train.seed" => c.train.seed = num(v)?,
            "train.phase" => c.train.phase = v.parse().map_err(parsed_enum)?,
            "train.checkpoint_every" => c.train.checkpoint_every = num(v)?,
            "data.train_dir" => c.data.train_dir = path(v),
            "data.synthetic_count" => c.data.synthetic_count = num(v)?,
            "data.synthetic_size" => c.data.synthetic_size = at_least(v, 8)?,
            "data.synthetic_seed" => c.data.synthetic_seed = num(v)?,
            "paths.init_checkpoint" => c.paths.init_checkpoint = path(v),
            "paths.checkpoint" => c.paths.checkpoint = path(v),
            "paths.loss_log" => c.paths.loss_log = path(v),
            "paths.report" => c.paths.report = path(v),
            "eval.data_dir" => c.eval.data_dir = path(v),
            "eval.synthetic_first" => c.eval.synthetic_first = num(v)?,
            "eval.synthetic_count" => c.eval.synthetic_count = num(v)?,
            "eval.scales" => c.eval.scales = scale_list(v)?,
            "eval.mode" => c.eval.mode = v.parse().map_err(parsed_enum)?,
            "eval.psnr" => c.eval.psnr = v.parse().map_err(parsed_enum)?,
            "eval.dataset" => c.eval.dataset = v.to_string(),
            "eval.variant" => c.eval.variant = v.to_string(),
            "flops.lr_h" => c.flops_lr.0 = at_least(v, 1)?,
            "flops.lr_w" => c.flops_lr.1 = at_least(v, 1)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    fn fail(&self, key: &str, err: impl fmt::Display) -> Error {
        Error::ConfigKey {
            key: key.to_string(),
            line: self.lines.get(key).copied().unwrap_or(0),
            message: match err.to_string().strip_prefix("config error: ") {
                Some(m) => m.to_string(),
                None => err.to_string(),
            },
        }
    }

    /// Cross-key invariants, blamed on the most recently set key involved.
    fn finish(self) -> Result<RunConfig> {
        let c = &self.cfg;
        let latest = |keys: &[&'static str]| -> &'static str {
            keys.iter()
                .copied()
                .max_by_key(|k| self.lines.get(k).copied().unwrap_or(0))
                .unwrap()
        };
        if c.model.c_in / c.model.lambda == 0 {
            let key = latest(&["model.lambda", "model.c_in"]);
            return Err(self.fail(
                key,
                format!("lambda {} exceeds c_in {}", c.model.lambda, c.model.c_in),
            ));
        }
        if let Err(e) = c.model.validate() {
            return Err(self.fail(latest(&["model.widths", "model.c_in"]), e));
        }
        if let Err(e) = c.groups() {
            let key = latest(&[
                "scales.min",
                "scales.max",
                "scales.step",
                "scales.s_max",
                "model.widths",
            ]);
            return Err(self.fail(key, e));
        }
        for s in &c.eval.scales {
            if let Err(e) = ScalePair::new(s.h, s.w, c.scales.s_max) {
                return Err(self.fail("eval.scales", e));
            }
        }
        if let Err(e) = c.train.validate() {
            return Err(self.fail("train.p", e));
        }
        Ok(self.cfg)
    }
}
