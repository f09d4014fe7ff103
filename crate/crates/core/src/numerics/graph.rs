use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::kernels::{
    all_finite, conv_backward, conv_forward, conv_geom, linear_backward, linear_forward,
    sigmoid_scalar, ConvGeom, LinearGeom,
};
use crate::numerics::{Activation, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One element of an [`Graph::assemble`] layout: either a copy of a source
/// element or a constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Entry<T> {
    Src(usize),
    Const(T),
}

const CONST_SLOT: u32 = u32::MAX;

enum Op<T> {
    Leaf {
        key: Option<usize>,
    },
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: LinearGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Gap {
        x: Var,
        hw: usize,
    },
    ChannelScale {
        x: Var,
        gate: Var,
        hw: usize,
    },
    Assemble {
        src: Var,
        map: Vec<u32>,
    },
    Sum(Var),
    Scale(Var, T),
    L1 {
        a: Var,
        b: Var,
    },
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    tracked: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Leaves may borrow tensors (parameters are never copied); intermediate
/// values are owned by the tape.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    mac_flops: u64,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mac_flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs spent in multiply-accumulates by conv and linear nodes so far
    /// (one MAC = 2 FLOPs).
    pub fn mac_flops(&self) -> u64 {
        self.mac_flops
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [T]>,
        op: Op<T>,
        tracked: bool,
    ) -> Result<Var> {
        if !all_finite(&value) {
            return Err(Error::numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape matches value")
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(Error::dim(format!(
                "expected a scalar, node holds {} values",
                other.len()
            ))),
        }
    }

    /// Borrowed leaf; tracked when the tensor requires grad.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf { key: None },
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed, always-tracked leaf whose gradient is reported under `key`.
    pub fn param(&mut self, t: &'a Tensor<T>, key: usize) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf { key: Some(key) },
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; tracked when the tensor requires grad.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf { key: None },
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.node(*v).tracked)
    }

    /// Dense same-padded convolution; input channels must equal the kernel's.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv_geom(
            self.shape(input),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
            padding,
            true,
        )?;
        self.conv_with(input, kernel, bias, geom)
    }

    /// Convolution over a prefix of a stored kernel: the first `cout` output
    /// channels and as many input channels as `input` carries.
    pub fn conv2d_sliced(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        cout: usize,
    ) -> Result<Var> {
        let ks = self.shape(kernel);
        let padding = ks.get(2).map(|k| k.saturating_sub(1) / 2).unwrap_or(0);
        let mut geom = conv_geom(
            self.shape(input),
            ks,
            bias.map(|b| self.shape(b)),
            padding,
            false,
        )?;
        if cout == 0 || cout > geom.cout {
            return Err(Error::dim(format!(
                "active output channels {cout} outside 1..={}",
                geom.cout
            )));
        }
        geom.cout = cout;
        self.conv_with(input, kernel, bias, geom)
    }

    fn conv_with(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let mut out = vec![T::zero(); geom.cout * geom.h * geom.w];
        conv_forward(
            &geom,
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &mut out,
        );
        self.mac_flops += geom.mac_flops();
        let tracked = self.tracked(&[Some(input), Some(kernel), bias]);
        self.push(
            vec![geom.cout, geom.h, geom.w],
            Cow::Owned(out),
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            tracked,
        )
    }

    /// Dense matrix-vector product.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::dim(format!("matvec of {ws:?} with {xs:?}")));
        }
        let rows = ws[0];
        self.linear(x, w, None, rows)
    }

    /// `x · W[..rows, ..n]ᵀ (+ b[..rows])` for `x` of shape `[n]` or `[P, n]`,
    /// where `n` may be a prefix of the stored column count.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>, rows: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let (points, cols, vector) = match xs.as_slice() {
            [n] => (1, *n, true),
            [p, n] => (*p, *n, false),
            _ => {
                return Err(Error::dim(format!(
                    "linear input must be rank 1 or 2, got {xs:?}"
                )))
            }
        };
        if ws.len() != 2 || cols > ws[1] || rows == 0 || rows > ws[0] {
            return Err(Error::dim(format!(
                "linear with weight {ws:?}, {cols} input columns, {rows} rows"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!(
                    "bias {:?} for weight {ws:?}",
                    self.shape(b)
                )));
            }
        }
        let geom = LinearGeom {
            points,
            rows,
            cols,
            w_cols: ws[1],
        };
        let mut out = vec![T::zero(); points * rows];
        linear_forward(
            &geom,
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &mut out,
        );
        self.mac_flops += geom.mac_flops();
        let tracked = self.tracked(&[Some(x), Some(w), bias]);
        let shape = if vector {
            vec![rows]
        } else {
            vec![points, rows]
        };
        self.push(
            shape,
            Cow::Owned(out),
            Op::Linear { x, w, bias, geom },
            tracked,
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let tracked = self.node(x).tracked;
        self.push(
            self.shape(x).to_vec(),
            Cow::Owned(out),
            Op::Relu(x),
            tracked,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let tracked = self.node(x).tracked;
        self.push(
            self.shape(x).to_vec(),
            Cow::Owned(out),
            Op::Sigmoid(x),
            tracked,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let tracked = self.tracked(&[Some(a), Some(b)]);
        self.push(
            self.shape(a).to_vec(),
            Cow::Owned(out),
            Op::Add(a, b),
            tracked,
        )
    }

    /// Global average pooling of a `C×H×W` node into `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::dim(format!("global average pool of {s:?}")));
        }
        let hw = s[1] * s[2];
        let inv = T::one() / T::lit(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let tracked = self.node(x).tracked;
        self.push(vec![s[0]], Cow::Owned(out), Op::Gap { x, hw }, tracked)
    }

    /// Multiplies channel `c` of a `C×H×W` node by `gate[c]`.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(gate) != [s[0]] {
            return Err(Error::dim(format!(
                "channel gate {:?} for map {s:?}",
                self.shape(gate)
            )));
        }
        let hw = s[1] * s[2];
        let gv = self.value(gate);
        let out: Vec<T> = self
            .value(x)
            .chunks(hw.max(1))
            .zip(gv)
            .flat_map(|(plane, &g)| plane.iter().map(move |&v| v * g))
            .collect();
        let tracked = self.tracked(&[Some(x), Some(gate)]);
        self.push(
            s,
            Cow::Owned(out),
            Op::ChannelScale { x, gate, hw },
            tracked,
        )
    }

    /// Builds a new node whose elements are copies of `src` elements or
    /// constants, laid out as `shape`.
    pub fn assemble(&mut self, src: Var, entries: &[Entry<T>], shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != entries.len() {
            return Err(Error::dim(format!(
                "assemble layout of {} entries for shape {shape:?}",
                entries.len()
            )));
        }
        let sv = self.value(src);
        let mut map = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for e in entries {
            match *e {
                Entry::Src(i) => {
                    let v = *sv.get(i).ok_or_else(|| {
                        Error::dim(format!("assemble index {i} outside source of {}", sv.len()))
                    })?;
                    map.push(i as u32);
                    out.push(v);
                }
                Entry::Const(c) => {
                    map.push(CONST_SLOT);
                    out.push(c);
                }
            }
        }
        let tracked = self.node(src).tracked;
        self.push(
            shape.to_vec(),
            Cow::Owned(out),
            Op::Assemble { src, map },
            tracked,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).iter().copied().sum();
        let tracked = self.node(x).tracked;
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), tracked)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let tracked = self.node(x).tracked;
        self.push(
            self.shape(x).to_vec(),
            Cow::Owned(out),
            Op::Scale(x, c),
            tracked,
        )
    }

    /// Mean absolute difference, a scalar node.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "l1 loss between {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("l1 loss of empty tensors"));
        }
        let total: T = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let loss = total / T::lit(n as f64);
        let tracked = self.tracked(&[Some(a), Some(b)]);
        self.push(vec![1], Cow::Owned(vec![loss]), Op::L1 { a, b }, tracked)
    }

    /// Reverse sweep from a scalar node. Returns gradients of every tracked
    /// leaf reached; untouched leaves have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, node has shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut keys = Vec::new();
        if !self.node(loss).tracked {
            return Ok(Gradients { leaves, keys });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { key } => {
                    if let Some(k) = key {
                        keys.push((*k, i));
                    }
                    leaves[i] = Some(g);
                }
                Op::Conv {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let mut gi = self.take_slot(&mut grads, *input);
                    let mut gk = self.take_slot(&mut grads, *kernel);
                    let mut gb = bias.and_then(|b| self.take_slot(&mut grads, b));
                    conv_backward(
                        geom,
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        gi.as_deref_mut(),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    put(&mut grads, *input, gi);
                    put(&mut grads, *kernel, gk);
                    if let Some(b) = bias {
                        put(&mut grads, *b, gb);
                    }
                }
                Op::Linear { x, w, bias, geom } => {
                    let mut gx = self.take_slot(&mut grads, *x);
                    let mut gw = self.take_slot(&mut grads, *w);
                    let mut gb = bias.and_then(|b| self.take_slot(&mut grads, b));
                    linear_backward(
                        geom,
                        self.value(*x),
                        self.value(*w),
                        &g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    put(&mut grads, *x, gx);
                    put(&mut grads, *w, gw);
                    if let Some(b) = bias {
                        put(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    self.accumulate(&mut grads, *x, |buf| {
                        for ((b, &gv), &v) in buf.iter_mut().zip(&g).zip(xv) {
                            if v > T::zero() {
                                *b += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    self.accumulate(&mut grads, *x, |buf| {
                        for ((b, &gv), &y) in buf.iter_mut().zip(&g).zip(yv.iter()) {
                            *b += gv * y * (T::one() - y);
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        self.accumulate(&mut grads, v, |buf| {
                            for (d, &gv) in buf.iter_mut().zip(&g) {
                                *d += gv;
                            }
                        });
                    }
                }
                Op::Gap { x, hw } => {
                    let inv = T::one() / T::lit(*hw as f64);
                    self.accumulate(&mut grads, *x, |buf| {
                        for (plane, &gv) in buf.chunks_mut(*hw).zip(&g) {
                            let d = gv * inv;
                            for b in plane {
                                *b += d;
                            }
                        }
                    });
                }
                Op::ChannelScale { x, gate, hw } => {
                    let xv = self.value(*x);
                    let gatev = self.value(*gate);
                    let hw = (*hw).max(1);
                    self.accumulate(&mut grads, *x, |buf| {
                        for ((plane, gplane), &s) in buf.chunks_mut(hw).zip(g.chunks(hw)).zip(gatev)
                        {
                            for (b, &gv) in plane.iter_mut().zip(gplane) {
                                *b += gv * s;
                            }
                        }
                    });
                    self.accumulate(&mut grads, *gate, |buf| {
                        for ((b, xplane), gplane) in
                            buf.iter_mut().zip(xv.chunks(hw)).zip(g.chunks(hw))
                        {
                            let mut s = T::zero();
                            for (&a, &gv) in xplane.iter().zip(gplane) {
                                s += a * gv;
                            }
                            *b += s;
                        }
                    });
                }
                Op::Assemble { src, map } => {
                    self.accumulate(&mut grads, *src, |buf| {
                        for (&m, &gv) in map.iter().zip(&g) {
                            if m != CONST_SLOT {
                                buf[m as usize] += gv;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    self.accumulate(&mut grads, *x, |buf| {
                        for b in buf {
                            *b += gv;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *x, |buf| {
                        for (b, &gv) in buf.iter_mut().zip(&g) {
                            *b += gv * c;
                        }
                    });
                }
                Op::L1 { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let scale = g[0] / T::lit(av.len() as f64);
                    let sign = |x: T, y: T| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    };
                    self.accumulate(&mut grads, *a, |buf| {
                        for ((d, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                            *d += sign(x, y);
                        }
                    });
                    self.accumulate(&mut grads, *b, |buf| {
                        for ((d, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                            *d -= sign(x, y);
                        }
                    });
                }
            }
        }
        keys.sort_unstable();
        Ok(Gradients { leaves, keys })
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.node(v).tracked {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.node(v).value.len()]),
        )
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut buf) = self.take_slot(grads, v) {
            f(&mut buf);
            grads[v.0] = Some(buf);
        }
    }
}

fn put<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if g.is_some() {
        grads[v.0] = g;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Conv { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Add(..) => "add",
        Op::Gap { .. } => "global_avg_pool",
        Op::ChannelScale { .. } => "channel_scale",
        Op::Assemble { .. } => "assemble",
        Op::Sum(_) => "sum",
        Op::Scale(..) => "scale",
        Op::L1 { .. } => "l1_loss",
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Vec<T>>>,
    keys: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the parameter registered under `key`.
    pub fn by_key(&self, key: usize) -> Option<&[T]> {
        let i = self.keys.binary_search_by_key(&key, |&(k, _)| k).ok()?;
        self.leaves[self.keys[i].1].as_deref()
    }

    /// `(key, gradient)` pairs in ascending key order.
    pub fn keyed(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.keys
            .iter()
            .filter_map(|&(k, i)| self.leaves[i].as_deref().map(|g| (k, g)))
    }
}
