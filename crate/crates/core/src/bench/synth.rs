//! Procedural training and test images.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{save_png, Image};
use crate::error::Result;

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn gradient(size: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (a, b) = (color(rng), color(rng));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    let radial = rng.gen_bool(0.3);
    let (cy, cx) = (
        rng.gen_range(0.0..size as f64),
        rng.gen_range(0.0..size as f64),
    );
    let n = size as f64;
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            let u = if radial {
                ((y - cy).hypot(x - cx) / n).min(1.0)
            } else {
                ((y / n - 0.5) * dy + (x / n - 0.5) * dx + 0.5).clamp(0.0, 1.0)
            };
            [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * u)
        })
        .collect()
}

fn checkerboard(size: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (a, b) = (color(rng), color(rng));
    let cell_y = rng.gen_range(3.0..14.0);
    let cell_x = rng.gen_range(3.0..14.0);
    let (oy, ox) = (rng.gen_range(0.0..cell_y), rng.gen_range(0.0..cell_x));
    let shade = gradient(size, rng);
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let parity =
                (((y + oy) / cell_y).floor() + ((x + ox) / cell_x).floor()) as i64 % 2 == 0;
            let base = if parity { a } else { b };
            [0, 1, 2].map(|c| 0.8 * base[c] + 0.2 * shade[i][c])
        })
        .collect()
}

fn box_blur(plane: &[f64], size: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                let lo = j.saturating_sub(r);
                let hi = (j + r).min(size - 1);
                let sum: f64 = (lo..=hi)
                    .map(|k| {
                        if horizontal {
                            src[i * size + k]
                        } else {
                            src[k * size + i]
                        }
                    })
                    .sum();
                let idx = if horizontal {
                    i * size + j
                } else {
                    j * size + i
                };
                out[idx] = sum / (hi - lo + 1) as f64;
            }
        }
        out
    };
    let h = pass(plane, true);
    pass(&h, false)
}

fn filtered_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let r = rng.gen_range(1..=4);
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let white: Vec<f64> = (0..size * size).map(|_| rng.gen()).collect();
            let smooth = box_blur(&box_blur(&white, size, r), size, r);
            let (lo, hi) = smooth
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            smooth
                .iter()
                .map(|v| (v - lo) / (hi - lo).max(1e-12))
                .collect()
        })
        .collect();
    (0..size * size)
        .map(|i| [planes[0][i], planes[1][i], planes[2][i]])
        .collect()
}

/// Image `index` of the synthetic set: kind `index % 3` picks a gradient,
/// a shaded checkerboard or smoothed color noise. Values are quantized to
/// 8-bit levels so a PNG round trip is exact.
pub fn synthetic_image(index: usize, size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let pixels = match index % 3 {
        0 => gradient(size, &mut rng),
        1 => checkerboard(size, &mut rng),
        _ => filtered_noise(size, &mut rng),
    };
    let mut data = vec![0.0; 3 * size * size];
    for (i, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * size * size + i] = (px[c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Image::new(size, size, data).expect("synthetic pixels lie in [0, 1]")
}

/// Images `first..first + count`.
pub fn synthetic_dataset(first: usize, count: usize, size: usize, seed: u64) -> Vec<Image> {
    (first..first + count)
        .map(|i| synthetic_image(i, size, seed))
        .collect()
}

/// Writes images `first..first + count` as `synth_NNNN.png` into `dir`.
pub fn write_synthetic_dataset(
    dir: &Path,
    first: usize,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (first..first + count)
        .map(|i| {
            let path = dir.join(format!("synth_{i:04}.png"));
            save_png(&synthetic_image(i, size, seed), &path)?;
            Ok(path)
        })
        .collect()
}
