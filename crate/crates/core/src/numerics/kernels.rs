//! Raw forward/backward loops shared by the graph and the free functions.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible:
//! a convolution output accumulates over (input channel, kernel row,
//! kernel column) lexicographically, then adds its bias.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Geometry of a (possibly channel-sliced) same-size convolution whose
/// borders replicate the edge pixels.
///
/// `kernel_cin` is the input-channel extent of the stored kernel, which may
/// exceed the active `cin` when only a prefix of input channels is used.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kernel_cin: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Row length of the padded input.
    fn pw(&self) -> usize {
        self.w + 2 * self.pad()
    }

    fn padded_len(&self) -> usize {
        (self.h + 2 * self.pad()) * self.pw()
    }

    /// Multiply-accumulate FLOPs (one MAC = 2 FLOPs), bias excluded.
    pub fn mac_flops(&self) -> u64 {
        2 * (self.k * self.k * self.cin * self.cout * self.h * self.w) as u64
    }

    #[inline]
    fn kidx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.kernel_cin + ci) * self.k + ky) * self.k + kx
    }

    /// Source pixel of padded position `(py, px)`: the nearest in-bounds one.
    #[inline]
    fn source(&self, py: usize, px: usize) -> usize {
        let p = self.pad();
        let y = py.saturating_sub(p).min(self.h - 1);
        let x = px.saturating_sub(p).min(self.w - 1);
        y * self.w + x
    }

    /// The active input channels with edges replicated `pad` pixels out.
    fn pad_input<T: Real>(&self, input: &[T]) -> Vec<T> {
        let (hw, len, pw) = (self.h * self.w, self.padded_len(), self.pw());
        let mut out = Vec::with_capacity(self.cin * len);
        for ci in 0..self.cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for py in 0..self.h + 2 * self.pad() {
                out.extend((0..pw).map(|px| inp[self.source(py, px)]));
            }
        }
        out
    }
}

pub(crate) fn conv_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw = g.h * g.w;
    let (len, pw) = (g.padded_len(), g.pw());
    let padded = g.pad_input(input);
    for co in 0..g.cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.fill(T::zero());
        for ci in 0..g.cin {
            let inp = &padded[ci * len..(ci + 1) * len];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = kernel[g.kidx(co, ci, ky, kx)];
                    for y in 0..g.h {
                        let start = (y + ky) * pw + kx;
                        let orow = &mut o[y * g.w..(y + 1) * g.w];
                        for (a, &b) in orow.iter_mut().zip(&inp[start..start + g.w]) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b[co];
            for a in o.iter_mut() {
                *a += bv;
            }
        }
    }
}

const DOT_LANES: usize = 8;

/// Adds `a·b` into strided partial sums; element `i` goes to lane `i % 8`.
#[inline]
fn dot_into<T: Real>(lanes: &mut [T; DOT_LANES], a: &[T], b: &[T]) {
    let mut ca = a.chunks_exact(DOT_LANES);
    let mut cb = b.chunks_exact(DOT_LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for k in 0..DOT_LANES {
            lanes[k] += xa[k] * xb[k];
        }
    }
    for (k, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[k] += x * y;
    }
}

/// True when no element is NaN or infinite. `v - v` is NaN exactly for
/// those, and NaN survives the lane sums.
#[allow(clippy::eq_op)]
pub(crate) fn all_finite<T: Real>(v: &[T]) -> bool {
    let mut lanes = [T::zero(); DOT_LANES];
    let mut chunks = v.chunks_exact(DOT_LANES);
    for c in &mut chunks {
        for k in 0..DOT_LANES {
            lanes[k] += c[k] - c[k];
        }
    }
    for &x in chunks.remainder() {
        lanes[0] += x - x;
    }
    reduce_lanes(&lanes) == T::zero()
}

#[inline]
fn reduce_lanes<T: Real>(lanes: &[T; DOT_LANES]) -> T {
    let mut s = T::zero();
    for &v in lanes {
        s += v;
    }
    s
}

/// Accumulates gradients of a convolution. `grad_kernel` and `grad_bias` are
/// full-size buffers of the stored tensors; only active entries are touched.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let (len, pw) = (g.padded_len(), g.pw());
    if let Some(gb) = grad_bias {
        for co in 0..g.cout {
            let mut s = T::zero();
            for &v in &grad_out[co * hw..(co + 1) * hw] {
                s += v;
            }
            gb[co] += s;
        }
    }
    if let Some(gk) = grad_kernel {
        let padded = g.pad_input(input);
        for co in 0..g.cout {
            let go = &grad_out[co * hw..(co + 1) * hw];
            for ci in 0..g.cin {
                let inp = &padded[ci * len..(ci + 1) * len];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let mut lanes = [T::zero(); DOT_LANES];
                        for y in 0..g.h {
                            let start = (y + ky) * pw + kx;
                            let orow = &go[y * g.w..(y + 1) * g.w];
                            dot_into(&mut lanes, orow, &inp[start..start + g.w]);
                        }
                        gk[g.kidx(co, ci, ky, kx)] += reduce_lanes(&lanes);
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_input {
        // Accumulate into the padded layout, then fold each padded pixel
        // back onto the pixel it replicated.
        let mut gpad = vec![T::zero(); g.cin * len];
        for co in 0..g.cout {
            let go = &grad_out[co * hw..(co + 1) * hw];
            for ci in 0..g.cin {
                let gin = &mut gpad[ci * len..(ci + 1) * len];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = kernel[g.kidx(co, ci, ky, kx)];
                        for y in 0..g.h {
                            let start = (y + ky) * pw + kx;
                            let orow = &go[y * g.w..(y + 1) * g.w];
                            for (b, &a) in gin[start..start + g.w].iter_mut().zip(orow) {
                                *b += wv * a;
                            }
                        }
                    }
                }
            }
        }
        for ci in 0..g.cin {
            let src = &gpad[ci * len..(ci + 1) * len];
            let dst = &mut gi[ci * hw..(ci + 1) * hw];
            for (i, &v) in src.iter().enumerate() {
                dst[g.source(i / pw, i % pw)] += v;
            }
        }
    }
}

/// Geometry of `out[p, r] = sum_j w[r, j] x[p, j] (+ b[r])` over the first
/// `rows` rows and `cols` columns of a stored `[*, w_cols]` matrix.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearGeom {
    pub points: usize,
    pub rows: usize,
    pub cols: usize,
    pub w_cols: usize,
}

impl LinearGeom {
    pub fn mac_flops(&self) -> u64 {
        2 * (self.points * self.rows * self.cols) as u64
    }
}

pub(crate) fn linear_forward<T: Real>(
    g: &LinearGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    // Points are processed LANES at a time with one accumulator each, so
    // every output still sums its columns in order.
    const LANES: usize = 8;
    if g.rows >= LANES {
        // Wide outputs: axpy over a transposed copy of the active block.
        let mut wt = vec![T::zero(); g.cols * g.rows];
        for r in 0..g.rows {
            for j in 0..g.cols {
                wt[j * g.rows + r] = w[r * g.w_cols + j];
            }
        }
        for p in 0..g.points {
            let xp = &x[p * g.cols..(p + 1) * g.cols];
            let op = &mut out[p * g.rows..(p + 1) * g.rows];
            op.fill(T::zero());
            for (j, &xv) in xp.iter().enumerate() {
                for (o, &wv) in op.iter_mut().zip(&wt[j * g.rows..(j + 1) * g.rows]) {
                    *o += wv * xv;
                }
            }
            if let Some(b) = bias {
                for (o, &bv) in op.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        return;
    }
    let mut p0 = 0;
    while p0 < g.points {
        let n = LANES.min(g.points - p0);
        for r in 0..g.rows {
            let wr = &w[r * g.w_cols..r * g.w_cols + g.cols];
            let mut acc = [T::zero(); LANES];
            if n == LANES {
                let xs = &x[p0 * g.cols..(p0 + LANES) * g.cols];
                for (j, &wv) in wr.iter().enumerate() {
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += wv * xs[k * g.cols + j];
                    }
                }
            } else {
                for (k, a) in acc.iter_mut().enumerate().take(n) {
                    let xp = &x[(p0 + k) * g.cols..(p0 + k + 1) * g.cols];
                    for (&wv, &xv) in wr.iter().zip(xp) {
                        *a += wv * xv;
                    }
                }
            }
            for (k, &a) in acc.iter().enumerate().take(n) {
                out[(p0 + k) * g.rows + r] = match bias {
                    Some(b) => a + b[r],
                    None => a,
                };
            }
        }
        p0 += n;
    }
}

pub(crate) fn linear_backward<T: Real>(
    g: &LinearGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
) {
    for p in 0..g.points {
        let xp = &x[p * g.cols..(p + 1) * g.cols];
        let gop = &grad_out[p * g.rows..(p + 1) * g.rows];
        for (r, &go) in gop.iter().enumerate() {
            if let Some(gb) = grad_b.as_deref_mut() {
                gb[r] += go;
            }
            if go == T::zero() {
                continue;
            }
            if let Some(gw) = grad_w.as_deref_mut() {
                let gwr = &mut gw[r * g.w_cols..r * g.w_cols + g.cols];
                for (a, &b) in gwr.iter_mut().zip(xp) {
                    *a += go * b;
                }
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                let wr = &w[r * g.w_cols..r * g.w_cols + g.cols];
                let gxp = &mut gx[p * g.cols..(p + 1) * g.cols];
                for (a, &b) in gxp.iter_mut().zip(wr) {
                    *a += go * b;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "non-finite value produced by {what}"
        )))
    }
}

/// Same-size 2-D convolution of a `C_in×H×W` map with a `C_out×C_in×k×k`
/// kernel. The `padding` border repeats the nearest edge pixel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let geom = conv_geom(
        input.shape(),
        kernel.shape(),
        bias.map(|b| b.shape()),
        padding,
        true,
    )?;
    let mut out = Tensor::zeros(&[geom.cout, geom.h, geom.w]);
    conv_forward(
        &geom,
        input.data(),
        kernel.data(),
        bias.map(|b| b.data()),
        out.data_mut(),
    );
    check_finite(&out, "conv2d")?;
    Ok(out)
}

/// Validates conv shapes; with `exact` the input channels must equal the
/// kernel's, otherwise they may be a prefix.
pub(crate) fn conv_geom(
    input: &[usize],
    kernel: &[usize],
    bias: Option<&[usize]>,
    padding: usize,
    exact: bool,
) -> Result<ConvGeom> {
    if kernel.len() != 4 || kernel[2] != kernel[3] {
        return Err(Error::dim(format!(
            "kernel must be C_out×C_in×k×k, got {kernel:?}"
        )));
    }
    let k = kernel[2];
    if k.is_multiple_of(2) {
        return Err(Error::config(format!("kernel size {k} is not odd")));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::config(format!(
            "padding {padding} does not preserve size for k={k}"
        )));
    }
    if input.len() != 3 {
        return Err(Error::dim(format!(
            "conv input must be C×H×W, got {input:?}"
        )));
    }
    let cin = input[0];
    if (exact && cin != kernel[1]) || cin > kernel[1] {
        return Err(Error::dim(format!(
            "input has {cin} channels, kernel expects {}",
            kernel[1]
        )));
    }
    if let Some(b) = bias {
        if b.len() != 1 || b[0] != kernel[0] {
            return Err(Error::dim(format!(
                "bias shape {b:?} does not match {} output channels",
                kernel[0]
            )));
        }
    }
    Ok(ConvGeom {
        cin,
        cout: kernel[0],
        h: input[1],
        w: input[2],
        k,
        kernel_cin: kernel[1],
    })
}

/// Matrix-vector product `weight · x`.
pub fn matvec<T: Real>(weight: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if weight.rank() != 2 || x.rank() != 1 || weight.shape()[1] != x.len() {
        return Err(Error::dim(format!(
            "matvec of {:?} with {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let geom = LinearGeom {
        points: 1,
        rows: weight.shape()[0],
        cols: x.len(),
        w_cols: weight.shape()[1],
    };
    let mut out = Tensor::zeros(&[geom.rows]);
    linear_forward(&geom, x.data(), weight.data(), None, out.data_mut());
    check_finite(&out, "matvec")?;
    Ok(out)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.set_requires_grad(false);
    for v in out.data_mut() {
        if v.is_nan() || *v <= T::zero() {
            *v = T::zero();
        }
    }
    out
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.set_requires_grad(false);
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

impl Activation {
    pub fn apply<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => relu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

/// Mean over the spatial extent of each channel of a `C×H×W` map.
pub fn global_avg_pool<T: Real>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::dim(format!(
            "global average pool needs C×H×W with H,W ≥ 1, got {s:?}"
        )));
    }
    let hw = s[1] * s[2];
    let scale = T::one() / T::lit(hw as f64);
    let data = f
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(&[s[0]], data)
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "l1 loss between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::dim("l1 loss of empty tensors"));
    }
    let total: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    let loss = total / T::lit(a.len() as f64);
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite l1 loss"));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = t(&[1, 2, 3], &[1.0, -2.0, 3.0, 4.5, 0.0, 6.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv2d(&x, &k, Some(&b), 0).unwrap().data(), x.data());
    }

    #[test]
    fn all_ones_window_sums() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 3, 3], &[1.0; 9]);
        let out = conv2d(&x, &k, None, 1).unwrap();
        // Top-left window over the replicated border: rows (1,1,2), (1,1,2), (3,3,4).
        assert_eq!(out.data(), &[18.0, 21.0, 24.0, 27.0]);
    }

    #[test]
    fn matches_clamped_index_loop() {
        let (cin, cout, h, w, k) = (2, 3, 4, 5, 5);
        let x = Tensor::<f64>::from_fn(&[cin, h, w], |i| ((i * 37) % 11) as f64 - 5.0);
        let kern =
            Tensor::<f64>::from_fn(&[cout, cin, k, k], |i| ((i * 13) % 7) as f64 * 0.5 - 1.5);
        let bias = t(&[3], &[0.5, -1.0, 2.0]);
        let out = conv2d(&x, &kern, Some(&bias), 2).unwrap();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = clamp(y as isize + ky as isize - 2, h);
                                let sx = clamp(xx as isize + kx as isize - 2, w);
                                s += kern.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * x.data()[(ci * h + sy) * w + sx];
                            }
                        }
                    }
                    assert!((out.data()[(co * h + y) * w + xx] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_shape_contract_and_errors() {
        let x = Tensor::<f64>::zeros(&[3, 5, 7]);
        let k = Tensor::<f64>::zeros(&[8, 3, 3, 3]);
        assert_eq!(conv2d(&x, &k, None, 1).unwrap().shape(), &[8, 5, 7]);
        let bad = Tensor::<f64>::zeros(&[8, 4, 3, 3]);
        assert!(matches!(
            conv2d(&x, &bad, None, 1),
            Err(Error::Dimension(_))
        ));
        let even = Tensor::<f64>::zeros(&[8, 3, 2, 2]);
        assert!(matches!(conv2d(&x, &even, None, 0), Err(Error::Config(_))));
    }

    #[test]
    fn matvec_examples() {
        let id = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(matvec(&id, &x).unwrap().data(), &[1.0, 2.0, 3.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            matvec(&m, &t(&[2], &[1.0, 1.0])).unwrap().data(),
            &[3.0, 7.0]
        );
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(matvec(&z, &x).unwrap().data(), &[0.0, 0.0]);
        assert!(matvec(&m, &x).is_err());
    }

    #[test]
    fn activation_examples() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&t(&[1], &[0.0])).data(), &[0.5]);
        let v = sigmoid(&t(&[1], &[3f64.ln()])).data()[0];
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn gap_examples() {
        let f = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&f).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[4, 3, 5], 0.25);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[0.25; 4]);
        assert!(global_avg_pool(&Tensor::<f64>::zeros(&[2, 0, 3])).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &t(&[2], &[0.0, 4.0])).unwrap(), 1.5);
        assert!(l1_loss(&a, &t(&[3], &[0.0; 3])).is_err());
    }
}
