//! Scale-conditioned channel gating inside each elastic block.
//!
//! The block feature is pooled to one value per active channel, the scale
//! pair is injected into that vector, and a two-layer MLP produces a sigmoid
//! gate per channel. Injection is either interleaved (the pair repeated `λ`
//! times at positions that do not depend on the width) or a naive append
//! at the rear, kept as an ablation.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Entry, Graph, Real, Var};
use crate::scale_space::ScalePair;

/// How the scale pair enters the gating MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AseMode {
    Interweave,
    Naive,
    Off,
}

impl AseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AseMode::Interweave => "interweave",
            AseMode::Naive => "naive",
            AseMode::Off => "off",
        }
    }

    /// Column count of the full first MLP layer, or `None` when disabled.
    pub fn w1_cols(self, c_in: usize, lambda: usize) -> Option<usize> {
        match self {
            AseMode::Interweave => Some(c_in + 2 * lambda),
            AseMode::Naive => Some(c_in + 2),
            AseMode::Off => None,
        }
    }
}

impl fmt::Display for AseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interweave" => Ok(AseMode::Interweave),
            "naive" => Ok(AseMode::Naive),
            "off" => Ok(AseMode::Off),
            other => Err(Error::config(format!(
                "unknown ase mode `{other}` (expected interweave, naive or off)"
            ))),
        }
    }
}

/// `⌊n·w⌋`, robust to products like `0.7·10` landing a hair below an integer.
pub fn floor_width(n: usize, w: f64) -> usize {
    (n as f64 * w + 1e-9).floor() as usize
}

/// One position of the assembled vector (0-based storage order).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Copy of pooled feature `j`.
    Feature(usize),
    ScaleH,
    ScaleW,
}

/// Contiguous run of pooled features copied into the assembled vector.
/// Ranges are 0-based and half-open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub src: Range<usize>,
    pub dst: Range<usize>,
}

/// Layout of the assembled vector at one width.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavePlan {
    pub mode: AseMode,
    pub c_in: usize,
    pub lambda: usize,
    pub w: f64,
    /// Active pooled features `⌊C_in·w⌋`.
    pub features: usize,
    pub insertions: usize,
    pub total_len: usize,
    /// 1-based `(s_h, s_w)` positions, in insertion order.
    pub slots: Vec<(usize, usize)>,
    pub segments: Vec<Segment>,
}

impl InterleavePlan {
    /// Interleaved layout: pair `i` (1-based, `i ≤ ⌊λ·w⌋`) sits at 1-based
    /// positions `⌊C_in·i/λ⌋ + 2i − 1` and `⌊C_in·i/λ⌋ + 2i`.
    pub fn interweave(c_in: usize, lambda: usize, w: f64) -> Result<Self> {
        if lambda == 0 || lambda > c_in {
            return Err(Error::config(format!(
                "lambda {lambda} must lie in 1..={c_in} (C_in)"
            )));
        }
        check_width(w)?;
        let features = floor_width(c_in, w);
        let insertions = floor_width(lambda, w);
        let bound = |i: usize| c_in * i / lambda;

        let mut slots = Vec::with_capacity(insertions);
        let mut segments = Vec::with_capacity(insertions + 1);
        for i in 1..=insertions {
            let (lo, hi) = (bound(i - 1), bound(i));
            segments.push(Segment {
                src: lo..hi,
                dst: lo + 2 * (i - 1)..hi + 2 * (i - 1),
            });
            slots.push((hi + 2 * i - 1, hi + 2 * i));
        }
        let tail = bound(insertions);
        segments.push(Segment {
            src: tail..features,
            dst: tail + 2 * insertions..features + 2 * insertions,
        });
        Ok(Self {
            mode: AseMode::Interweave,
            c_in,
            lambda,
            w,
            features,
            insertions,
            total_len: features + 2 * insertions,
            slots,
            segments,
        })
    }

    /// Rear concatenation `[f̃, s_h, s_w]`.
    pub fn naive(c_in: usize, w: f64) -> Result<Self> {
        check_width(w)?;
        let features = floor_width(c_in, w);
        Ok(Self {
            mode: AseMode::Naive,
            c_in,
            lambda: 1,
            w,
            features,
            insertions: 1,
            total_len: features + 2,
            slots: vec![(features + 1, features + 2)],
            segments: vec![Segment {
                src: 0..features,
                dst: 0..features,
            }],
        })
    }

    pub fn for_mode(mode: AseMode, c_in: usize, lambda: usize, w: f64) -> Result<Option<Self>> {
        match mode {
            AseMode::Interweave => Self::interweave(c_in, lambda, w).map(Some),
            AseMode::Naive => Self::naive(c_in, w).map(Some),
            AseMode::Off => Ok(None),
        }
    }

    /// Columns of the first MLP layer used at this width.
    pub fn prefix_len(&self) -> usize {
        self.total_len
    }

    /// 0-based 1-D layout. Slot position `p` (1-based) maps to index `p − 1`.
    pub fn layout(&self) -> Vec<Slot> {
        let mut out = vec![Slot::Feature(usize::MAX); self.total_len];
        for seg in &self.segments {
            for (j, d) in seg.src.clone().zip(seg.dst.clone()) {
                out[d] = Slot::Feature(j);
            }
        }
        for &(ph, pw) in &self.slots {
            out[ph - 1] = Slot::ScaleH;
            out[pw - 1] = Slot::ScaleW;
        }
        out
    }

    /// 0-based indices of all scale slots.
    pub fn scale_indices(&self) -> Vec<usize> {
        self.slots
            .iter()
            .flat_map(|&(a, b)| [a - 1, b - 1])
            .collect()
    }

    pub(crate) fn entries<T: Real>(&self, s: ScalePair) -> Vec<Entry<T>> {
        self.layout()
            .into_iter()
            .map(|slot| match slot {
                Slot::Feature(j) => Entry::Src(j),
                Slot::ScaleH => Entry::Const(T::lit(s.h)),
                Slot::ScaleW => Entry::Const(T::lit(s.w)),
            })
            .collect()
    }
}

fn check_width(w: f64) -> Result<()> {
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::config(format!("width {w} outside (0, 1]")));
    }
    Ok(())
}

/// Convenience wrapper around [`InterleavePlan::interweave`].
pub fn plan_interleave(c_in: usize, lambda: usize, w: f64) -> Result<InterleavePlan> {
    InterleavePlan::interweave(c_in, lambda, w)
}

/// Assembles the pooled features and the scale pair per `plan`.
pub fn interweave<T: Real>(f_pooled: &[T], s: ScalePair, plan: &InterleavePlan) -> Result<Vec<T>> {
    if f_pooled.len() != plan.features {
        return Err(Error::dim(format!(
            "pooled feature of length {} for a plan over {} features",
            f_pooled.len(),
            plan.features
        )));
    }
    Ok(plan
        .layout()
        .into_iter()
        .map(|slot| match slot {
            Slot::Feature(j) => f_pooled[j],
            Slot::ScaleH => T::lit(s.h),
            Slot::ScaleW => T::lit(s.w),
        })
        .collect())
}

/// `[f̃, s_h, s_w]`.
pub fn naive_concat<T: Real>(f_pooled: &[T], s: ScalePair) -> Vec<T> {
    let mut out = f_pooled.to_vec();
    out.push(T::lit(s.h));
    out.push(T::lit(s.w));
    out
}

/// Graph handles of one block's gating MLP.
#[derive(Clone, Copy, Debug)]
pub struct AseVars {
    /// `[2·C_in, cols]`; only the first `plan.prefix_len()` columns are read.
    pub w1: Var,
    /// `[rows ≥ m_t, 2·C_in]`; only the first `m_t` rows are read.
    pub w2: Var,
    pub b1: Option<Var>,
    pub b2: Option<Var>,
}

/// Gates `f_t` (`m_t×H×W`) channel-wise:
/// `f_t ⊙ σ(W2[..m_t] · ReLU(W1[:, ..prefix] · f̄))`.
pub fn ase_forward<T: Real>(
    g: &mut Graph<'_, T>,
    f_t: Var,
    s: ScalePair,
    weights: &AseVars,
    plan: &InterleavePlan,
) -> Result<Var> {
    let channels = g.shape(f_t).first().copied().unwrap_or(0);
    if channels != plan.features {
        return Err(Error::dim(format!(
            "ASE input has {channels} channels, plan expects {}",
            plan.features
        )));
    }
    let hidden_rows = g.shape(weights.w1)[0];
    let pooled = g.global_avg_pool(f_t)?;
    let fbar = g.assemble(pooled, &plan.entries(s), &[plan.total_len])?;
    let hidden = g.linear(fbar, weights.w1, weights.b1, hidden_rows)?;
    let hidden = g.relu(hidden)?;
    let gate = g.linear(hidden, weights.w2, weights.b2, plan.features)?;
    let gate = g.sigmoid(gate)?;
    g.channel_scale(f_t, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn sp(h: f64, w: f64) -> ScalePair {
        ScalePair { h, w }
    }

    #[test]
    fn published_slot_positions() {
        let p = plan_interleave(64, 4, 1.0).unwrap();
        assert_eq!(p.slots, vec![(17, 18), (35, 36), (53, 54), (71, 72)]);
        assert_eq!(p.total_len, 72);
    }

    #[test]
    fn small_plans() {
        let p = plan_interleave(8, 2, 1.0).unwrap();
        assert_eq!(p.slots, vec![(5, 6), (11, 12)]);
        assert_eq!(p.total_len, 12);

        let p = plan_interleave(8, 2, 0.5).unwrap();
        assert_eq!(p.slots, vec![(5, 6)]);
        assert_eq!(p.total_len, 6);
        let tail = p.segments.last().unwrap();
        assert!(tail.src.is_empty() && tail.dst.is_empty());
    }

    #[test]
    fn index_mapping_is_one_based_to_zero_based() {
        let p = plan_interleave(8, 2, 1.0).unwrap();
        let layout = p.layout();
        assert_eq!(layout[4], Slot::ScaleH);
        assert_eq!(layout[5], Slot::ScaleW);
        assert_eq!(layout[3], Slot::Feature(3));
        assert_eq!(layout[6], Slot::Feature(4));
        assert_eq!(p.scale_indices(), vec![4, 5, 10, 11]);
    }

    #[test]
    fn interweave_examples() {
        let p = plan_interleave(8, 2, 1.0).unwrap();
        let f: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(
            interweave(&f, sp(2.0, 3.0), &p).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 2.0, 3.0, 5.0, 6.0, 7.0, 8.0, 2.0, 3.0]
        );

        let p = plan_interleave(8, 1, 0.5).unwrap();
        assert_eq!(p.insertions, 0);
        let f = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(interweave(&f, sp(2.0, 2.0), &p).unwrap(), f.to_vec());

        let p = plan_interleave(8, 2, 0.5).unwrap();
        assert_eq!(
            interweave(&f, sp(1.5, 1.5), &p).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0, 1.5, 1.5]
        );
        assert!(interweave(&[1.0], sp(1.5, 1.5), &p).is_err());
    }

    #[test]
    fn naive_concat_examples() {
        assert_eq!(
            naive_concat(&[1.0, 2.0], sp(2.0, 2.0)),
            vec![1.0, 2.0, 2.0, 2.0]
        );
        assert_eq!(naive_concat::<f64>(&[], sp(1.5, 2.5)), vec![1.5, 2.5]);
        let p = InterleavePlan::naive(8, 0.5).unwrap();
        let f = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            interweave(&f, sp(2.0, 3.0), &p).unwrap(),
            naive_concat(&f, sp(2.0, 3.0))
        );
    }

    #[test]
    fn lambda_above_c_in_is_rejected() {
        assert!(plan_interleave(4, 5, 1.0).is_err());
        assert!(plan_interleave(4, 0, 1.0).is_err());
        assert!(plan_interleave(4, 2, 0.0).is_err());
    }

    #[test]
    fn zero_weights_halve_the_feature() {
        let f = Tensor::<f64>::from_fn(&[4, 2, 3], |i| i as f64 - 7.0);
        let w1 = Tensor::<f64>::zeros(&[16, 8 + 4]);
        let w2 = Tensor::<f64>::zeros(&[8, 16]);
        let plan = plan_interleave(8, 2, 0.5).unwrap();
        let mut g = Graph::new();
        let fv = g.leaf(&f);
        let vars = AseVars {
            w1: g.leaf(&w1),
            w2: g.leaf(&w2),
            b1: None,
            b2: None,
        };
        let out = ase_forward(&mut g, fv, sp(2.0, 2.0), &vars, &plan).unwrap();
        assert_eq!(g.shape(out), &[4, 2, 3]);
        let expected: Vec<f64> = f.data().iter().map(|v| v * 0.5).collect();
        assert_eq!(g.value(out), expected.as_slice());
    }

    #[test]
    fn slot_stability_holds_for_interweave_only() {
        let widths = [0.5, 0.7, 0.9, 1.0];
        for (i, &a) in widths.iter().enumerate() {
            for &b in &widths[i + 1..] {
                let pa = plan_interleave(64, 4, a).unwrap();
                let pb = plan_interleave(64, 4, b).unwrap();
                assert!(pb.slots.starts_with(&pa.slots));
                let na = InterleavePlan::naive(64, a).unwrap();
                let nb = InterleavePlan::naive(64, b).unwrap();
                assert!(!nb.slots.starts_with(&na.slots));
            }
        }
    }
}
