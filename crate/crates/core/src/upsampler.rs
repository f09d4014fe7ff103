//! Shared continuous upsampler and the bilinear baseline.
//!
//! Each output pixel takes the nearest low-resolution feature vector, appends
//! its offset from that pixel's center (in LR pixels) and the output cell
//! size, and runs a two-layer MLP whose RGB output is added to a bilinear
//! (or bicubic) upsample of the input image. All coordinates follow the pixel-center
//! convention: pixel `i` of an extent `n` sits at `(i + 0.5) / n`.

use std::fmt;
use std::str::FromStr;

use crate::bench::{bicubic_resize, Image};
use crate::error::{Error, Result};
use crate::numerics::{Entry, Graph, Real, Tensor, Var};
use crate::scale_space::ScalePair;

pub const DEFAULT_HIDDEN: usize = 64;

/// Extra per-query inputs besides the feature vector: offset (2) and cell (2).
pub const QUERY_EXTRA: usize = 4;

/// `(round(H·s_h), round(W·s_w))`, halves rounded up.
pub fn target_size(h: usize, w: usize, s: ScalePair) -> (usize, usize) {
    (round_half_up(h as f64 * s.h), round_half_up(w as f64 * s.w))
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

/// Graph handles of the upsampler MLP.
#[derive(Clone, Copy, Debug)]
pub struct UpsamplerVars {
    /// `[hidden, C_in + 4]`
    pub w1: Var,
    pub b1: Option<Var>,
    /// `[3, hidden]`
    pub w2: Var,
    pub b2: Option<Var>,
}

/// Nearest source index and the signed offset of the output center from
/// that source center, in source-pixel units.
fn nearest(i: usize, n_out: usize, n_in: usize) -> (usize, f64) {
    let u = (i as f64 + 0.5) * n_in as f64 / n_out as f64;
    let j = (u.floor() as usize).min(n_in - 1);
    (j, u - (j as f64 + 0.5))
}

/// Interpolation the MLP output is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Skip {
    #[default]
    Bilinear,
    Bicubic,
}

impl fmt::Display for Skip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Skip::Bilinear => "bilinear",
            Skip::Bicubic => "bicubic",
        })
    }
}

impl FromStr for Skip {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Skip::Bilinear),
            "bicubic" => Ok(Skip::Bicubic),
            other => Err(Error::config(format!(
                "unknown skip `{other}` (expected bilinear or bicubic)"
            ))),
        }
    }
}

/// The skip image of `lr_image` at `out_h×out_w`.
pub fn skip_image<T: Real>(
    skip: Skip,
    lr_image: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    match skip {
        Skip::Bilinear => bilinear_resize(lr_image, out_h, out_w),
        Skip::Bicubic => {
            let img = Image::from_tensor(lr_image)?;
            Ok(bicubic_resize(&img, out_h, out_w)?.to_tensor())
        }
    }
}

/// Reconstructs a `3×H'×W'` image from `feat` (`C×H×W`) and the LR image.
pub fn upsample<T: Real>(
    g: &mut Graph<'_, T>,
    feat: Var,
    lr_image: &Tensor<T>,
    s: ScalePair,
    weights: &UpsamplerVars,
    skip: Skip,
) -> Result<Var> {
    let fs = g.shape(feat).to_vec();
    if fs.len() != 3 || lr_image.shape() != [3, fs[1], fs[2]] {
        return Err(Error::dim(format!(
            "upsampler got features {fs:?} and image {:?}",
            lr_image.shape()
        )));
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let w1_shape = g.shape(weights.w1).to_vec();
    if w1_shape.len() != 2 || w1_shape[1] != c + QUERY_EXTRA {
        return Err(Error::dim(format!(
            "upsampler first layer {w1_shape:?} does not accept {c} features"
        )));
    }
    let (oh, ow) = target_size(h, w, s);
    let cell_h = T::lit(2.0 / oh as f64);
    let cell_w = T::lit(2.0 / ow as f64);
    let width = c + QUERY_EXTRA;

    let cols: Vec<(usize, f64)> = (0..ow).map(|x| nearest(x, ow, w)).collect();
    let mut entries = Vec::with_capacity(oh * ow * width);
    for y in 0..oh {
        let (ly, dy) = nearest(y, oh, h);
        for &(lx, dx) in &cols {
            let base = ly * w + lx;
            entries.extend((0..c).map(|ch| Entry::Src(ch * h * w + base)));
            entries.push(Entry::Const(T::lit(dy)));
            entries.push(Entry::Const(T::lit(dx)));
            entries.push(Entry::Const(cell_h));
            entries.push(Entry::Const(cell_w));
        }
    }
    let points = oh * ow;
    let queries = g.assemble(feat, &entries, &[points, width])?;
    let hidden = g.linear(queries, weights.w1, weights.b1, w1_shape[0])?;
    let hidden = g.relu(hidden)?;
    let rgb = g.linear(hidden, weights.w2, weights.b2, 3)?;

    let planar: Vec<Entry<T>> = (0..3)
        .flat_map(|ch| (0..points).map(move |p| Entry::Src(p * 3 + ch)))
        .collect();
    let residual = g.assemble(rgb, &planar, &[3, oh, ow])?;
    let skip = g.input(skip_image(skip, lr_image, oh, ow)?);
    g.add(residual, skip)
}

/// Bilinear upsampling of a `C×H×W` image to `target_size(H, W, s)`.
pub fn bilinear_upsample<T: Real>(img: &Tensor<T>, s: ScalePair) -> Result<Tensor<T>> {
    let sh = img.shape();
    if sh.len() != 3 {
        return Err(Error::dim(format!("bilinear upsample of {sh:?}")));
    }
    let (oh, ow) = target_size(sh[1], sh[2], s);
    bilinear_resize(img, oh, ow)
}

/// Source taps `(i0, i1, frac)` for each output index, edge-clamped.
fn bilinear_taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let u = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let f = u.floor();
            let frac = u - f;
            let clamp = |v: f64| v.clamp(0.0, (n_in - 1) as f64) as usize;
            (clamp(f), clamp(f + 1.0), frac)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` image (pixel-center aligned, edge-clamped).
pub fn bilinear_resize<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let sh = img.shape();
    if sh.len() != 3 || sh[1] == 0 || sh[2] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!(
            "bilinear resize of {sh:?} to {out_h}×{out_w}"
        )));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let rows = bilinear_taps(out_h, h);
    let cols = bilinear_taps(out_w, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for &(x0, x1, fx) in &cols {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                let top = plane[y0 * w + x0] * gx + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * gx + plane[y1 * w + x1] * fx;
                out.push(top * gy + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}
