//! WebAssembly bindings for the browser demo in `www/`.
//!
//! The plain functions (`layout`, `costs`, `Upscaler::compare_rgba`) carry
//! the logic and are tested natively; the `#[wasm_bindgen]` wrappers only
//! convert errors.

use anysr::backbone::{read_manifest, BackboneConfig, SharedWeightStore};
use anysr::bench::{
    bicubic_resize, degrade, flops_breakdown, psnr, subnet_params, synthetic_image, Image, PsnrMode,
};
use anysr::interweave::{AseMode, InterleavePlan, Slot};
use anysr::numerics::DType;
use anysr::scale_space::{ScaleGroups, ScalePair};
use anysr::Error;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_widths(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|w| {
            w.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("width `{w}`: {e}")))
        })
        .collect()
}

#[derive(Serialize)]
pub struct LayoutRow {
    pub width: f64,
    pub features: usize,
    pub prefix_len: usize,
    /// `f<j>` for pooled feature `j`, `sh`/`sw` for the scale entries.
    pub slots: Vec<String>,
    pub scale_slots: Vec<usize>,
}

/// Gating-MLP input layout for every width.
pub fn layout(
    c_in: usize,
    lambda: usize,
    mode: &str,
    widths: &str,
) -> Result<Vec<LayoutRow>, Error> {
    let mode: AseMode = mode.parse()?;
    parse_widths(widths)?
        .into_iter()
        .map(|w| {
            let plan = InterleavePlan::for_mode(mode, c_in, lambda, w)?
                .ok_or_else(|| Error::Config("the gating block is switched off".into()))?;
            Ok(LayoutRow {
                width: w,
                features: plan.features,
                prefix_len: plan.prefix_len(),
                slots: plan
                    .layout()
                    .iter()
                    .map(|s| match s {
                        Slot::Feature(j) => format!("f{j}"),
                        Slot::ScaleH => "sh".into(),
                        Slot::ScaleW => "sw".into(),
                    })
                    .collect(),
                scale_slots: plan.scale_indices(),
            })
        })
        .collect()
}

#[derive(Serialize)]
pub struct CostRow {
    pub t: usize,
    pub width: f64,
    pub params: usize,
    pub flops: u64,
    pub ratio: f64,
    pub shallow: u64,
    pub blocks: u64,
    pub ase: u64,
    pub tail: u64,
    pub upsampler: u64,
}

/// Per-subnet parameters and FLOPs on an `lr_h×lr_w` input at `scale`.
pub fn costs(
    c_in: usize,
    n_blocks: usize,
    lambda: usize,
    mode: &str,
    lr_h: usize,
    lr_w: usize,
    scale: f64,
) -> Result<Vec<CostRow>, Error> {
    let cfg = BackboneConfig {
        c_in,
        n_blocks,
        lambda,
        ase_mode: mode.parse()?,
        ..BackboneConfig::default()
    };
    let groups = ScaleGroups::default_groups();
    let s = ScalePair::square(scale)?;
    let big_t = groups.count();
    let full = flops_breakdown(&cfg, big_t, &groups, lr_h, lr_w, s)?.total();
    (1..=big_t)
        .map(|t| {
            let b = flops_breakdown(&cfg, t, &groups, lr_h, lr_w, s)?;
            Ok(CostRow {
                t,
                width: groups.width_of(t)?,
                params: subnet_params(&cfg, t)?,
                flops: b.total(),
                ratio: b.total() as f64 / full as f64,
                shallow: b.shallow,
                blocks: b.blocks,
                ase: b.ase,
                tail: b.tail,
                upsampler: b.upsampler,
            })
        })
        .collect()
}

#[wasm_bindgen]
pub fn layout_json(
    c_in: usize,
    lambda: usize,
    mode: &str,
    widths: &str,
) -> Result<String, JsError> {
    let rows = layout(c_in, lambda, mode, widths).map_err(js)?;
    Ok(serde_json::to_string(&rows).expect("layout rows serialize"))
}

#[wasm_bindgen]
pub fn costs_json(
    c_in: usize,
    n_blocks: usize,
    lambda: usize,
    mode: &str,
    lr_h: usize,
    lr_w: usize,
    scale: f64,
) -> Result<String, JsError> {
    let rows = costs(c_in, n_blocks, lambda, mode, lr_h, lr_w, scale).map_err(js)?;
    Ok(serde_json::to_string(&rows).expect("cost rows serialize"))
}

/// RGBA bytes of generated test image `index`.
#[wasm_bindgen]
pub fn synthetic_rgba(index: usize, size: usize, seed: u64) -> Vec<u8> {
    to_rgba(&synthetic_image(index, size, seed))
}

fn to_rgba(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Image, Error> {
    if rgba.len() != 4 * width * height {
        return Err(Error::Dimension(format!(
            "{} bytes for a {width}×{height} RGBA image",
            rgba.len()
        )));
    }
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgba.chunks_exact(4).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Image::new(height, width, data)
}

/// Everything the page shows for one comparison.
#[wasm_bindgen(getter_with_clone)]
pub struct Comparison {
    pub lr_width: usize,
    pub lr_height: usize,
    pub hr_width: usize,
    pub hr_height: usize,
    pub lr_rgba: Vec<u8>,
    pub hr_rgba: Vec<u8>,
    pub bicubic_rgba: Vec<u8>,
    pub model_rgba: Vec<u8>,
    pub psnr_bicubic: f64,
    pub psnr_model: f64,
    pub subnet: usize,
    pub width: f64,
    pub flops: f64,
    pub flops_ratio: f64,
}

enum Weights {
    F32(SharedWeightStore<f32>),
    F64(SharedWeightStore<f64>),
}

/// A loaded checkpoint that upscales images in the page.
#[wasm_bindgen]
pub struct Upscaler {
    weights: Weights,
    groups: ScaleGroups,
}

impl Upscaler {
    pub fn from_bytes(bytes: &[u8]) -> Result<Upscaler, Error> {
        let manifest = read_manifest(bytes)?;
        let weights = match manifest.dtype() {
            Some(DType::F32) => Weights::F32(SharedWeightStore::from_bytes(bytes)?),
            _ => Weights::F64(SharedWeightStore::from_bytes(bytes)?),
        };
        let groups = ScaleGroups::build(
            &anysr::scale_space::default_scale_grid(),
            manifest.config.widths.len(),
            &manifest.config.widths,
            anysr::scale_space::DEFAULT_S_MAX,
        )?;
        Ok(Upscaler { weights, groups })
    }

    fn config(&self) -> &BackboneConfig {
        match &self.weights {
            Weights::F32(s) => s.config(),
            Weights::F64(s) => s.config(),
        }
    }

    /// Shrinks the image by `scale` with bicubic, then reconstructs it with
    /// bicubic and with the network (`mode` is `subnet` or `full`).
    pub fn compare_rgba(
        &self,
        rgba: &[u8],
        width: usize,
        height: usize,
        scale: f64,
        mode: &str,
    ) -> Result<Comparison, Error> {
        let s = ScalePair::square(scale)?;
        let hr = from_rgba(rgba, width, height)?;
        let (hr, lr) = degrade(&hr, s)?;
        let big_t = self.groups.count();
        let t = match mode {
            "subnet" => self.groups.group_of(s)?,
            "full" => big_t,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        };
        let out = match &self.weights {
            Weights::F32(st) => {
                Image::from_tensor(&st.view(t)?.predict(&lr.to_tensor::<f32>(), s)?)?
            }
            Weights::F64(st) => {
                Image::from_tensor(&st.view(t)?.predict(&lr.to_tensor::<f64>(), s)?)?
            }
        };
        let bicubic = bicubic_resize(&lr, hr.height(), hr.width())?;
        let cfg = self.config();
        let cost = flops_breakdown(cfg, t, &self.groups, lr.height(), lr.width(), s)?.total();
        let full = flops_breakdown(cfg, big_t, &self.groups, lr.height(), lr.width(), s)?.total();
        Ok(Comparison {
            lr_width: lr.width(),
            lr_height: lr.height(),
            hr_width: hr.width(),
            hr_height: hr.height(),
            lr_rgba: to_rgba(&lr),
            hr_rgba: to_rgba(&hr),
            bicubic_rgba: to_rgba(&bicubic),
            model_rgba: to_rgba(&out),
            psnr_bicubic: psnr(&bicubic, &hr, PsnrMode::Rgb)?,
            psnr_model: psnr(&out, &hr, PsnrMode::Rgb)?,
            subnet: t,
            width: self.groups.width_of(t)?,
            flops: cost as f64,
            flops_ratio: cost as f64 / full as f64,
        })
    }
}

#[wasm_bindgen]
impl Upscaler {
    #[wasm_bindgen(constructor)]
    pub fn new(checkpoint: &[u8]) -> Result<Upscaler, JsError> {
        Upscaler::from_bytes(checkpoint).map_err(js)
    }

    pub fn subnets(&self) -> usize {
        self.groups.count()
    }

    pub fn compare(
        &self,
        rgba: &[u8],
        width: usize,
        height: usize,
        scale: f64,
        mode: &str,
    ) -> Result<Comparison, JsError> {
        self.compare_rgba(rgba, width, height, scale, mode)
            .map_err(js)
    }
}
