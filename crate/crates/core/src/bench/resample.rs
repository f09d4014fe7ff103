use crate::bench::Image;
use crate::error::{Error, Result};

const A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn bicubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized taps for each output index. When shrinking, the kernel is
/// stretched by the reduction factor so it also acts as a low-pass filter.
fn taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut row: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = bicubic_kernel((j as f64 - center) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let src = j.clamp(0, n_in as isize - 1) as usize;
                match row.iter_mut().find(|(k, _)| *k == src) {
                    Some(entry) => entry.1 += wgt,
                    None => row.push((src, wgt)),
                }
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            row.iter_mut().for_each(|(_, w)| *w /= total);
            row
        })
        .collect()
}

/// Separable bicubic resize with pixel-center alignment and edge clamping,
/// clipped to `[0, 1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("bicubic resize to {out_h}×{out_w}")));
    }
    let (h, w) = (img.height(), img.width());
    let cols = taps(w, out_w);
    let rows = taps(h, out_h);
    let src = img.data();
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    let mut horiz = vec![0.0; h * out_w];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            for (x, tap) in cols.iter().enumerate() {
                horiz[y * out_w + x] = tap.iter().map(|&(j, k)| line[j] * k).sum();
            }
        }
        for tap in &rows {
            for x in 0..out_w {
                let v: f64 = tap.iter().map(|&(j, k)| horiz[j * out_w + x] * k).sum();
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_h, out_w, out)
}
