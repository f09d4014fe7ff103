use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{subnet_view, write_atomic, SharedWeightStore};
use crate::bench::flops::{aligned, flops, FLOPS_CONVENTION};
use crate::bench::{bicubic_resize, format_db, load_png_dir, psnr, Image, PsnrMode};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::scale_space::{ScaleGroups, ScalePair};
use crate::upsampler::target_size;

/// Which subnet serves a scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// The subnet of the scale's group.
    #[default]
    Subnet,
    /// Always the full-width network.
    Full,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Subnet => "subnet",
            EvalMode::Full => "full",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subnet" => Ok(EvalMode::Subnet),
            "full" => Ok(EvalMode::Full),
            other => Err(Error::config(format!(
                "unknown eval mode `{other}` (subnet|full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub dataset: String,
    pub scale: ScalePair,
    pub mode: EvalMode,
    pub t: usize,
    pub w: f64,
    pub psnr_model: f64,
    pub psnr_bicubic: f64,
    pub params: usize,
    /// Mean over the images of the forward cost.
    pub flops: u64,
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub psnr_mode: PsnrMode,
    pub rows: Vec<EvalRow>,
}

/// Labels attached to every row of one evaluation.
#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub variant: String,
    pub dataset: String,
    pub mode: EvalMode,
    pub psnr: PsnrMode,
}

/// HR crop whose size is an exact reconstruction target for scale `s`, and
/// the bicubic-downscaled LR input.
pub fn degrade(hr: &Image, s: ScalePair) -> Result<(Image, Image)> {
    let lr_h = (hr.height() as f64 / s.h + 1e-9).floor() as usize;
    let lr_w = (hr.width() as f64 / s.w + 1e-9).floor() as usize;
    if lr_h == 0 || lr_w == 0 {
        return Err(Error::Data(format!(
            "{}×{} image is too small for scale {s}",
            hr.height(),
            hr.width()
        )));
    }
    let (oh, ow) = target_size(lr_h, lr_w, s);
    let crop = hr.crop(0, 0, oh, ow)?;
    let lr = bicubic_resize(&crop, lr_h, lr_w)?;
    Ok((crop, lr))
}

struct ImageScore {
    model: f64,
    bicubic: f64,
    flops: u64,
    full_flops: u64,
}

/// Mean PSNR of the model and of bicubic upsampling at each scale.
/// Per-image results are reduced in input order.
pub fn evaluate<T: Real>(
    store: &SharedWeightStore<T>,
    groups: &ScaleGroups,
    images: &[Image],
    scales: &[ScalePair],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Data(format!(
            "dataset `{}` has no images",
            settings.dataset
        )));
    }
    let cfg = store.config();
    let big_t = groups.count();
    let mut rows = Vec::with_capacity(scales.len());
    for &s in scales {
        let t = match settings.mode {
            EvalMode::Subnet => groups.group_of(s)?,
            EvalMode::Full => big_t,
        };
        let view = subnet_view(store, t, groups)?;
        let view = if settings.mode == EvalMode::Full {
            view.allow_any_scale()
        } else {
            view
        };
        let scores: Vec<ImageScore> = crate::par::map(images, |hr| -> Result<ImageScore> {
            let (crop, lr) = degrade(hr, s)?;
            let out = view.predict(&lr.to_tensor::<T>(), s)?;
            let out = Image::from_tensor(&out)?;
            let baseline = bicubic_resize(&lr, crop.height(), crop.width())?;
            Ok(ImageScore {
                model: psnr(&out, &crop, settings.psnr)?,
                bicubic: psnr(&baseline, &crop, settings.psnr)?,
                flops: flops(cfg, t, groups, lr.height(), lr.width(), s)?,
                full_flops: flops(cfg, big_t, groups, lr.height(), lr.width(), s)?,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let n = scores.len() as f64;
        let mean = |f: fn(&ImageScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let total: u64 = scores.iter().map(|r| r.flops).sum();
        let full: u64 = scores.iter().map(|r| r.full_flops).sum();
        rows.push(EvalRow {
            variant: settings.variant.clone(),
            dataset: settings.dataset.clone(),
            scale: s,
            mode: settings.mode,
            t,
            w: view.width(),
            psnr_model: mean(|r| r.model),
            psnr_bicubic: mean(|r| r.bicubic),
            params: store.count_params(t)?,
            flops: total / scores.len() as u64,
            flops_ratio: total as f64 / full as f64,
        });
    }
    Ok(EvalReport {
        psnr_mode: settings.psnr,
        rows,
    })
}

/// [`evaluate`] over every PNG in `dir`, in file-name order.
pub fn evaluate_dir<T: Real>(
    store: &SharedWeightStore<T>,
    groups: &ScaleGroups,
    dir: &Path,
    scales: &[ScalePair],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let images: Vec<Image> = load_png_dir(dir)?.into_iter().map(|(_, img)| img).collect();
    evaluate(store, groups, &images, scales, settings)
}

pub const EVAL_COLUMNS: [&str; 11] = [
    "variant",
    "dataset",
    "scale",
    "mode",
    "t",
    "w",
    "psnr_model",
    "psnr_bicubic",
    "params",
    "flops",
    "flops_ratio",
];

impl EvalRow {
    fn cells(&self, precise: bool) -> Vec<String> {
        let db = |v: f64| {
            if precise && v.is_finite() {
                format!("{v:.6}")
            } else {
                format_db(v)
            }
        };
        vec![
            self.variant.clone(),
            self.dataset.clone(),
            self.scale.to_string(),
            self.mode.to_string(),
            self.t.to_string(),
            self.w.to_string(),
            db(self.psnr_model),
            db(self.psnr_bicubic),
            self.params.to_string(),
            self.flops.to_string(),
            format!("{:.6}", self.flops_ratio),
        ]
    }
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(EVAL_COLUMNS).map_err(io)?;
        for r in &self.rows {
            w.write_record(r.cells(true)).map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self.rows.iter().map(|r| r.cells(false)).collect();
        format!(
            "# PSNR on {} channels; {FLOPS_CONVENTION}\n{}",
            self.psnr_mode,
            aligned(&EVAL_COLUMNS, &rows)
        )
    }

    /// Writes the CSV to `csv_path` and the text table next to it (`.txt`).
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv()?.as_bytes())?;
        write_atomic(&csv_path.with_extension("txt"), self.to_table().as_bytes())
    }
}
