use std::fmt::Write as _;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::interweave::InterleavePlan;
use crate::scale_space::{ScaleGroups, ScalePair};
use crate::upsampler::{target_size, QUERY_EXTRA};

/// Header line stating the counting convention.
pub const FLOPS_CONVENTION: &str = "FLOPs count one multiply-accumulate as 2 operations";

/// Analytic cost of one forward pass, per network part. Each part is its
/// multiply-accumulate FLOPs plus one add per bias element.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub shallow: u64,
    /// `conv_a` + `conv_b` over all blocks, including bias adds.
    pub blocks: u64,
    /// Multiply-accumulate part of `blocks` only.
    pub block_conv_mac: u64,
    pub ase: u64,
    pub tail: u64,
    pub upsampler: u64,
    /// All multiply-accumulate FLOPs; equals what the engine records for
    /// the same forward pass.
    pub mac: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.shallow + self.blocks + self.ase + self.tail + self.upsampler
    }
}

/// `2·k²·cin·cout·h·w`.
pub fn conv_flops(k: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    2 * (k * k * cin * cout * h * w) as u64
}

struct Tally {
    mac: u64,
}

impl Tally {
    fn conv(&mut self, k: usize, cin: usize, cout: usize, hw: usize) -> (u64, u64) {
        let mac = conv_flops(k, cin, cout, hw, 1);
        self.mac += mac;
        (mac, (cout * hw) as u64)
    }

    fn linear(&mut self, points: usize, rows: usize, cols: usize, bias: bool) -> u64 {
        let mac = 2 * (points * rows * cols) as u64;
        self.mac += mac;
        mac + if bias { (points * rows) as u64 } else { 0 }
    }
}

/// Cost of subnet `t` on an `lr_h×lr_w` input at scale `s`.
pub fn flops_breakdown(
    cfg: &BackboneConfig,
    t: usize,
    groups: &ScaleGroups,
    lr_h: usize,
    lr_w: usize,
    s: ScalePair,
) -> Result<FlopsBreakdown> {
    cfg.validate()?;
    if groups.widths() != cfg.widths.as_slice() {
        return Err(Error::config(format!(
            "group widths {:?} differ from the model's {:?}",
            groups.widths(),
            cfg.widths
        )));
    }
    let w = groups.width_of(t)?;
    let (c, k) = (cfg.c_in, cfg.kernel);
    let m = cfg.mid_channels(w);
    let hw = lr_h * lr_w;
    let mut tally = Tally { mac: 0 };
    let mut out = FlopsBreakdown::default();

    let (mac, bias) = tally.conv(k, 3, c, hw);
    out.shallow = mac + bias;
    let plan = InterleavePlan::for_mode(cfg.ase_mode, c, cfg.lambda, w)?;
    for _ in 0..cfg.n_blocks {
        let (mac_a, bias_a) = tally.conv(k, c, m, hw);
        let (mac_b, bias_b) = tally.conv(k, m, c, hw);
        out.blocks += mac_a + bias_a + mac_b + bias_b;
        out.block_conv_mac += mac_a + mac_b;
        if let Some(plan) = &plan {
            out.ase += tally.linear(1, 2 * c, plan.prefix_len(), cfg.ase_bias);
            out.ase += tally.linear(1, m, 2 * c, cfg.ase_bias);
        }
    }
    let (mac, bias) = tally.conv(k, c, c, hw);
    out.tail = mac + bias;
    let (oh, ow) = target_size(lr_h, lr_w, s);
    let points = oh * ow;
    out.upsampler = tally.linear(points, cfg.hidden, c + QUERY_EXTRA, true)
        + tally.linear(points, 3, cfg.hidden, true);
    out.mac = tally.mac;
    Ok(out)
}

/// Total FLOPs of subnet `t`; see [`flops_breakdown`].
pub fn flops(
    cfg: &BackboneConfig,
    t: usize,
    groups: &ScaleGroups,
    lr_h: usize,
    lr_w: usize,
    s: ScalePair,
) -> Result<u64> {
    flops_breakdown(cfg, t, groups, lr_h, lr_w, s).map(|b| b.total())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsRow {
    pub variant: String,
    pub t: usize,
    pub w: f64,
    pub scale: ScalePair,
    pub params: usize,
    pub flops: u64,
    /// Relative to the full-width network at the same scale.
    pub ratio: f64,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub lr_h: usize,
    pub lr_w: usize,
    pub rows: Vec<FlopsRow>,
}

/// Parameter count of subnet `t` without materializing weights.
pub fn subnet_params(cfg: &BackboneConfig, t: usize) -> Result<usize> {
    let store = crate::backbone::SharedWeightStore::<f32>::zeros(cfg)?;
    store.count_params(t)
}

/// One row per `(t, scale)` pair, `t` outermost.
pub fn flops_report(
    cfg: &BackboneConfig,
    groups: &ScaleGroups,
    lr_h: usize,
    lr_w: usize,
    scales: &[ScalePair],
    variant: &str,
) -> Result<FlopsReport> {
    let big_t = groups.count();
    let mut rows = Vec::with_capacity(big_t * scales.len());
    for t in 1..=big_t {
        let params = subnet_params(cfg, t)?;
        for &s in scales {
            let f = flops(cfg, t, groups, lr_h, lr_w, s)?;
            let full = flops(cfg, big_t, groups, lr_h, lr_w, s)?;
            rows.push(FlopsRow {
                variant: variant.to_string(),
                t,
                w: groups.width_of(t)?,
                scale: s,
                params,
                flops: f,
                ratio: f as f64 / full as f64,
                psnr: None,
            });
        }
    }
    Ok(FlopsReport { lr_h, lr_w, rows })
}

/// Unit divisor and suffix picked from the largest value.
pub(crate) fn flops_unit(max: u64) -> (f64, &'static str) {
    if max >= 1_000_000_000 {
        (1e9, "G")
    } else if max >= 1_000_000 {
        (1e6, "M")
    } else {
        (1e3, "K")
    }
}

/// `value (percent)`, e.g. `97.93 (69.25%)`.
pub fn format_flops(flops: u64, ratio: f64, divisor: f64) -> String {
    format!("{:.2} ({:.2}%)", flops as f64 / divisor, ratio * 100.0)
}

pub(crate) fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = *w))
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

impl FlopsReport {
    pub fn to_table(&self) -> String {
        let max = self.rows.iter().map(|r| r.flops).max().unwrap_or(0);
        let (div, unit) = flops_unit(max);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {FLOPS_CONVENTION}; LR input {}x{}",
            self.lr_h, self.lr_w
        );
        let flops_col = format!("FLOPs ({unit})");
        let header = [
            "variant",
            "t",
            "w",
            "scale",
            "params",
            flops_col.as_str(),
            "psnr",
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    r.t.to_string(),
                    r.w.to_string(),
                    format!("x{}", r.scale),
                    r.params.to_string(),
                    format_flops(r.flops, r.ratio, div),
                    r.psnr.map_or("-".into(), super::format_db),
                ]
            })
            .collect();
        out.push_str(&aligned(&header, &rows));
        out
    }
}
