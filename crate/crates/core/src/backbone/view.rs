use crate::backbone::{Role, SharedWeightStore};
use crate::error::{Error, Result};
use crate::interweave::{ase_forward, AseVars, InterleavePlan};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::scale_space::{ScaleGroups, ScalePair};
use crate::upsampler::{upsample, UpsamplerVars};

/// Which elements of a stored tensor a subnet reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActiveRegion {
    Full,
    /// First `n` indices along axis 0.
    Leading(usize),
    /// First `n` indices along axis 1, all of axis 0.
    Inner(usize),
}

impl ActiveRegion {
    pub fn contains(&self, shape: &[usize], flat: usize) -> bool {
        match *self {
            ActiveRegion::Full => true,
            ActiveRegion::Leading(n) => {
                let stride: usize = shape[1..].iter().product();
                flat / stride.max(1) < n
            }
            ActiveRegion::Inner(n) => {
                let stride: usize = shape[2..].iter().product();
                (flat / stride.max(1)) % shape[1] < n
            }
        }
    }

    pub fn count(&self, shape: &[usize]) -> usize {
        let total: usize = shape.iter().product();
        match *self {
            ActiveRegion::Full => total,
            ActiveRegion::Leading(n) => n * shape[1..].iter().product::<usize>(),
            ActiveRegion::Inner(n) => shape[0] * n * shape[2..].iter().product::<usize>(),
        }
    }

    /// Element mask, or `None` when every element is active.
    pub fn mask(&self, shape: &[usize]) -> Option<Vec<bool>> {
        let total: usize = shape.iter().product();
        if self.count(shape) == total {
            return None;
        }
        Some((0..total).map(|i| self.contains(shape, i)).collect())
    }
}

/// Width-`w_t` window over a [`SharedWeightStore`]; never copies weights.
#[derive(Clone, Debug)]
pub struct SubnetView<'a, T: Real> {
    store: &'a SharedWeightStore<T>,
    t: usize,
    w: f64,
    mid: usize,
    plan: Option<InterleavePlan>,
    /// `(exclusive lower, inclusive upper)` dominant-scale range accepted
    /// by `forward`; `None` accepts any scale.
    scale_range: Option<(f64, f64)>,
}

/// View of subnet `t` that only accepts scales of group `t`.
pub fn subnet_view<'a, T: Real>(
    store: &'a SharedWeightStore<T>,
    t: usize,
    groups: &ScaleGroups,
) -> Result<SubnetView<'a, T>> {
    SubnetView::new(store, t, Some(groups))
}

impl<'a, T: Real> SubnetView<'a, T> {
    pub(crate) fn new(
        store: &'a SharedWeightStore<T>,
        t: usize,
        groups: Option<&ScaleGroups>,
    ) -> Result<Self> {
        let cfg = store.config();
        if t == 0 || t > cfg.widths.len() {
            return Err(Error::config(format!(
                "subnet index {t} outside 1..={}",
                cfg.widths.len()
            )));
        }
        let scale_range = match groups {
            Some(g) => {
                if g.widths() != cfg.widths.as_slice() {
                    return Err(Error::config(format!(
                        "group widths {:?} differ from the store's {:?}",
                        g.widths(),
                        cfg.widths
                    )));
                }
                let lower = if t == 1 { 1.0 } else { g.upper_bounds()[t - 2] };
                Some((lower, g.upper_bounds()[t - 1]))
            }
            None => None,
        };
        let w = cfg.widths[t - 1];
        Ok(Self {
            store,
            t,
            w,
            mid: cfg.mid_channels(w),
            plan: InterleavePlan::for_mode(cfg.ase_mode, cfg.c_in, cfg.lambda, w)?,
            scale_range,
        })
    }

    /// Lifts the scale/group consistency check.
    pub fn allow_any_scale(mut self) -> Self {
        self.scale_range = None;
        self
    }

    pub fn store(&self) -> &'a SharedWeightStore<T> {
        self.store
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn width(&self) -> f64 {
        self.w
    }

    pub fn mid_channels(&self) -> usize {
        self.mid
    }

    pub fn plan(&self) -> Option<&InterleavePlan> {
        self.plan.as_ref()
    }

    pub fn region(&self, index: usize) -> ActiveRegion {
        match self.store.role(index) {
            Role::Fixed => ActiveRegion::Full,
            Role::ConvAWeight | Role::ConvABias | Role::AseW2 | Role::AseB2 => {
                ActiveRegion::Leading(self.mid)
            }
            Role::ConvBWeight => ActiveRegion::Inner(self.mid),
            Role::AseW1 => ActiveRegion::Inner(self.plan.as_ref().map_or(0, |p| p.prefix_len())),
        }
    }

    pub fn active_params(&self) -> usize {
        self.store
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| self.region(i).count(p.shape()))
            .sum()
    }

    /// Per-tensor update masks; `None` for fully active tensors.
    pub fn masks(&self) -> Vec<Option<Vec<bool>>> {
        self.store
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| self.region(i).mask(p.shape()))
            .collect()
    }

    fn check_scale(&self, s: ScalePair) -> Result<()> {
        if let Some((lo, hi)) = self.scale_range {
            let d = s.dominant();
            if !(d > lo + 1e-9 && d <= hi + 1e-9) {
                return Err(Error::Scale(format!(
                    "scale {s} does not belong to group {} ({lo}, {hi}]",
                    self.t
                )));
            }
        }
        Ok(())
    }

    /// Backbone output `F(I_LR)` (`C_in×H×W`). `vars` come from
    /// [`SharedWeightStore::register`] on the same graph.
    pub fn features(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        input: Var,
        s: ScalePair,
    ) -> Result<Var> {
        self.check_scale(s)?;
        let layout = self.store.layout();
        let c = self.store.config().c_in;
        if g.shape(input).first() != Some(&3) {
            return Err(Error::dim(format!(
                "backbone input must be 3×H×W, got {:?}",
                g.shape(input)
            )));
        }
        let shallow = g.conv2d_sliced(
            input,
            vars[layout.shallow_w],
            Some(vars[layout.shallow_b]),
            c,
        )?;
        let mut x = shallow;
        for block in &layout.blocks {
            let u = g.conv2d_sliced(
                x,
                vars[block.conv_a_w],
                Some(vars[block.conv_a_b]),
                self.mid,
            )?;
            let mut u = g.relu(u)?;
            if let (Some(ase), Some(plan)) = (&block.ase, &self.plan) {
                let weights = AseVars {
                    w1: vars[ase.w1],
                    w2: vars[ase.w2],
                    b1: ase.b1.map(|i| vars[i]),
                    b2: ase.b2.map(|i| vars[i]),
                };
                u = ase_forward(g, u, s, &weights, plan)?;
            }
            let r = g.conv2d_sliced(u, vars[block.conv_b_w], Some(vars[block.conv_b_b]), c)?;
            x = g.add(x, r)?;
        }
        let tail = g.conv2d_sliced(x, vars[layout.tail_w], Some(vars[layout.tail_b]), c)?;
        g.add(tail, shallow)
    }

    /// Full reconstruction `U(F(I_LR))` at scale `s`.
    pub fn reconstruct(
        &self,
        g: &mut Graph<'a, T>,
        vars: &[Var],
        lr: &'a Tensor<T>,
        s: ScalePair,
    ) -> Result<Var> {
        let input = g.leaf(lr);
        let feat = self.features(g, vars, input, s)?;
        let layout = self.store.layout();
        let up = UpsamplerVars {
            w1: vars[layout.up_w1],
            b1: Some(vars[layout.up_b1]),
            w2: vars[layout.up_w2],
            b2: Some(vars[layout.up_b2]),
        };
        upsample(g, feat, lr, s, &up, self.store.config().skip)
    }

    /// Forward-only reconstruction.
    pub fn predict(&self, lr: &Tensor<T>, s: ScalePair) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.store.register(&mut g);
        let mut lr = lr.clone();
        lr.set_requires_grad(false);
        let input = g.input(lr.clone());
        let feat = self.features(&mut g, &vars, input, s)?;
        let layout = self.store.layout();
        let up = UpsamplerVars {
            w1: vars[layout.up_w1],
            b1: Some(vars[layout.up_b1]),
            w2: vars[layout.up_w2],
            b2: Some(vars[layout.up_b2]),
        };
        let out = upsample(&mut g, feat, &lr, s, &up, self.store.config().skip)?;
        Ok(g.tensor(out))
    }

    /// Forward-only backbone output.
    pub fn predict_features(&self, lr: &Tensor<T>, s: ScalePair) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.store.register(&mut g);
        let input = g.input(lr.clone());
        let feat = self.features(&mut g, &vars, input, s)?;
        Ok(g.tensor(feat))
    }
}
