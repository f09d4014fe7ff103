use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// `data` is planar `3×H×W`; every value must lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::dim(format!(
                "image {height}×{width} with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    /// Clips every value into `[0, 1]`; NaN becomes 0.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let sh = t.shape();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(Error::dim(format!("expected a 3×H×W tensor, got {sh:?}")));
        }
        let data = t
            .data()
            .iter()
            .map(|v| {
                let v = v.as_f64();
                if v.is_nan() {
                    0.0
                } else {
                    v.clamp(0.0, 1.0)
                }
            })
            .collect();
        Self::new(sh[1], sh[2], data)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[3, self.height, self.width], |i| T::lit(self.data[i]))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Sub-image with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return Err(Error::dim(format!(
                "crop {h}×{w} at ({y}, {x}) from {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for row in y..y + h {
                let start = (c * self.height + row) * self.width + x;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads a PNG as RGB. Grayscale is replicated into all three channels,
/// alpha is dropped and 16-bit samples are rounded to the nearest 8-bit
/// level before scaling to `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::Image(format!("cannot read `{}`: {e}", path.display())))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(b) => b,
        other => other.into_rgb8(),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Writes an 8-bit RGB PNG, rounding to the nearest level.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| to_u8(img.data[(c * h + y) * w + x])))
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("cannot write `{}`: {e}", path.display())))
}

/// Every `*.png` in `dir`, sorted by file name.
pub fn load_png_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            load_png(&p).map(|img| (name, img))
        })
        .collect()
}
