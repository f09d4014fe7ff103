//! Config-driven entry points behind the command-line tool.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{read_manifest, SharedWeightStore};
use crate::bench::{
    evaluate, flops_report, load_png_dir, synthetic_dataset, EvalReport, EvalSettings, FlopsReport,
    Image,
};
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::numerics::{DType, Real};
use crate::trainer::{TrainLog, TrainOutputs, Trainer};

/// A store in either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyStore {
    F32(SharedWeightStore<f32>),
    F64(SharedWeightStore<f64>),
}

impl AnyStore {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        match read_manifest(&bytes)?.dtype() {
            Some(DType::F32) => SharedWeightStore::from_bytes(&bytes).map(AnyStore::F32),
            Some(DType::F64) | None => SharedWeightStore::from_bytes(&bytes).map(AnyStore::F64),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyStore::F32(s) => s.save(path),
            AnyStore::F64(s) => s.save(path),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyStore::F32(s) => s.to_bytes(),
            AnyStore::F64(s) => s.to_bytes(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyStore::F32(_) => Precision::F32,
            AnyStore::F64(_) => Precision::F64,
        }
    }
}

/// HR training images: PNGs from `data.train_dir`, else generated ones.
pub fn training_images(cfg: &RunConfig) -> Result<Vec<Image>> {
    let images: Vec<Image> = match &cfg.data.train_dir {
        Some(dir) => load_png_dir(dir)?.into_iter().map(|(_, img)| img).collect(),
        None => synthetic_dataset(
            0,
            cfg.data.synthetic_count,
            cfg.data.synthetic_size,
            cfg.data.synthetic_seed,
        ),
    };
    if images.is_empty() {
        return Err(Error::Data(
            "no training images: set data.train_dir or data.synthetic_count".into(),
        ));
    }
    Ok(images)
}

/// Dataset label and HR test images.
pub fn eval_images(cfg: &RunConfig) -> Result<(String, Vec<Image>)> {
    let e = &cfg.eval;
    let (name, images) = match &e.data_dir {
        Some(dir) => {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string());
            let images = load_png_dir(dir)?.into_iter().map(|(_, img)| img).collect();
            (name, images)
        }
        None => (
            "synthetic".to_string(),
            synthetic_dataset(
                e.synthetic_first,
                e.synthetic_count,
                cfg.data.synthetic_size,
                cfg.data.synthetic_seed,
            ),
        ),
    };
    let name = if e.dataset.is_empty() {
        name
    } else {
        e.dataset.clone()
    };
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no test images in `{name}`: set eval.data_dir or eval.synthetic_count"
        )));
    }
    Ok((name, images))
}

/// The starting store: `paths.init_checkpoint` if set, else a fresh one.
pub fn initial_store(cfg: &RunConfig) -> Result<AnyStore> {
    let store = match &cfg.paths.init_checkpoint {
        Some(path) => AnyStore::load(path)?,
        None => {
            let mut s = SharedWeightStore::<f64>::build(&cfg.model, cfg.init_seed)?;
            if cfg.zero_head {
                let out_layer = [s.layout().up_w2, s.layout().up_b2];
                for i in out_layer {
                    s.params_mut()[i].data_mut().fill(0.0);
                }
            }
            match cfg.precision {
                Precision::F64 => AnyStore::F64(s),
                Precision::F32 => AnyStore::F32(s.cast()),
            }
        }
    };
    let stored = match &store {
        AnyStore::F32(s) => s.config(),
        AnyStore::F64(s) => s.config(),
    };
    if stored != &cfg.model {
        return Err(Error::config(format!(
            "checkpoint model differs from the configured one:\n{}vs\n{}",
            stored.to_text(),
            cfg.model.to_text()
        )));
    }
    if store.precision() != cfg.precision {
        return Err(Error::config(format!(
            "checkpoint holds {} weights but model.precision is {}",
            store.precision(),
            cfg.precision
        )));
    }
    Ok(store)
}

fn train_typed<T: Real>(
    store: SharedWeightStore<T>,
    cfg: &RunConfig,
    images: &[Image],
    outputs: &TrainOutputs,
) -> Result<(SharedWeightStore<T>, TrainLog)> {
    let mut trainer = Trainer::new(store, cfg.groups()?, cfg.train.clone())?;
    let log = trainer.train(images, outputs)?;
    Ok((trainer.into_store(), log))
}

/// Trains per `cfg`, writing `paths.checkpoint` and `paths.loss_log` when
/// set.
pub fn cmd_train(cfg: &RunConfig) -> Result<(AnyStore, TrainLog)> {
    let images = training_images(cfg)?;
    let outputs = TrainOutputs {
        checkpoint: cfg.paths.checkpoint.clone(),
        loss_log: cfg.paths.loss_log.clone(),
    };
    match initial_store(cfg)? {
        AnyStore::F32(s) => {
            train_typed(s, cfg, &images, &outputs).map(|(s, l)| (AnyStore::F32(s), l))
        }
        AnyStore::F64(s) => {
            train_typed(s, cfg, &images, &outputs).map(|(s, l)| (AnyStore::F64(s), l))
        }
    }
}

/// Evaluates `store` per `cfg.eval`, writing `paths.report` when set.
pub fn cmd_eval(cfg: &RunConfig, store: &AnyStore) -> Result<EvalReport> {
    let (dataset, images) = eval_images(cfg)?;
    let groups = cfg.groups()?;
    let settings = EvalSettings {
        variant: cfg.variant_label(),
        dataset,
        mode: cfg.eval.mode,
        psnr: cfg.eval.psnr,
    };
    let report = match store {
        AnyStore::F32(s) => evaluate(s, &groups, &images, &cfg.eval.scales, &settings)?,
        AnyStore::F64(s) => evaluate(s, &groups, &images, &cfg.eval.scales, &settings)?,
    };
    if let Some(path) = &cfg.paths.report {
        report.write(path)?;
    }
    Ok(report)
}

/// Cost of every subnet at every `eval.scales` entry.
pub fn cmd_flops(cfg: &RunConfig) -> Result<FlopsReport> {
    let (h, w) = cfg.flops_lr;
    flops_report(
        &cfg.model,
        &cfg.groups()?,
        h,
        w,
        &cfg.eval.scales,
        &cfg.variant_label(),
    )
}

/// Human-readable manifest: tensors, shapes, and per-subnet totals.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let manifest = read_manifest(&bytes)?;
    let mut out = String::new();
    let total: usize = manifest.entries.iter().map(|e| e.len()).sum();
    let _ = writeln!(
        out,
        "# {} tensors, {} parameters",
        manifest.entries.len(),
        total
    );
    let name_w = manifest
        .entries
        .iter()
        .map(|e| e.name.len())
        .max()
        .unwrap_or(4);
    for e in &manifest.entries {
        let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            out,
            "{:<name_w$}  {}  [{}]  {}",
            e.name,
            e.dtype.name(),
            shape.join(", "),
            e.len()
        );
    }
    let counts: Vec<usize> = match manifest.dtype() {
        Some(DType::F32) => {
            let s = SharedWeightStore::<f32>::from_bytes(&bytes)?;
            (1..=s.config().widths.len())
                .map(|t| s.count_params(t))
                .collect::<Result<_>>()?
        }
        _ => {
            let s = SharedWeightStore::<f64>::from_bytes(&bytes)?;
            (1..=s.config().widths.len())
                .map(|t| s.count_params(t))
                .collect::<Result<_>>()?
        }
    };
    let _ = writeln!(out, "# parameters per subnet");
    for (i, (c, w)) in counts.iter().zip(&manifest.config.widths).enumerate() {
        let _ = writeln!(
            out,
            "t={} w={}  {}  ({:.2}%)",
            i + 1,
            w,
            c,
            100.0 * *c as f64 / total as f64
        );
    }
    let _ = writeln!(out, "# model");
    out.push_str(&manifest.config.to_text());
    Ok(out)
}
