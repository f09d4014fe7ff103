use std::fmt;
use std::str::FromStr;

use crate::bench::Image;
use crate::error::{Error, Result};

/// Channels PSNR is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PsnrMode {
    #[default]
    Rgb,
    /// BT.601 luma `0.299 R + 0.587 G + 0.114 B`.
    Y,
}

impl fmt::Display for PsnrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsnrMode::Rgb => "rgb",
            PsnrMode::Y => "y",
        })
    }
}

impl FromStr for PsnrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(PsnrMode::Rgb),
            "y" => Ok(PsnrMode::Y),
            other => Err(Error::config(format!(
                "unknown PSNR mode `{other}` (rgb|y)"
            ))),
        }
    }
}

fn mse(a: &Image, b: &Image, mode: PsnrMode) -> f64 {
    match mode {
        PsnrMode::Rgb => {
            let n = a.data().len() as f64;
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n
        }
        PsnrMode::Y => {
            let plane = a.height() * a.width();
            let luma = |img: &Image, i: usize| {
                let d = img.data();
                0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i]
            };
            (0..plane)
                .map(|i| (luma(a, i) - luma(b, i)).powi(2))
                .sum::<f64>()
                / plane as f64
        }
    }
}

/// `10·log10(1 / MSE)` in dB; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image, mode: PsnrMode) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::dim(format!(
            "PSNR of {}×{} against {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let e = mse(a, b, mode);
    Ok(if e == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * e.log10()
    })
}

/// Two decimals, or `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}
