use crate::backbone::{register, BackboneConfig, Layout, SharedWeightStore};
use crate::error::Result;
use crate::interweave::{ase_forward, AseVars, InterleavePlan};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::scale_space::ScalePair;
use crate::upsampler::{upsample, UpsamplerVars};

/// Self-contained dense copy of one subnet: every tensor holds exactly the
/// slice the subnet reads, and forward uses only unsliced ops.
#[derive(Clone, Debug, PartialEq)]
pub struct StandaloneNet<T = f64> {
    config: BackboneConfig,
    width: f64,
    mid: usize,
    plan: Option<InterleavePlan>,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Copies the active slices of subnet `t` out of `store`.
pub fn extract_standalone<T: Real>(
    store: &SharedWeightStore<T>,
    t: usize,
) -> Result<StandaloneNet<T>> {
    let view = store.view(t)?;
    let cfg = store.config().clone();
    let plan = view.plan().cloned();
    let (reg, layout) = register(
        &cfg,
        view.mid_channels(),
        plan.as_ref().map(|p| p.prefix_len()),
    );
    let mut params = Vec::with_capacity(reg.shapes.len());
    for (i, shape) in reg.shapes.iter().enumerate() {
        let src = &store.params()[i];
        let region = view.region(i);
        let data: Vec<T> = src
            .data()
            .iter()
            .enumerate()
            .filter(|(j, _)| region.contains(src.shape(), *j))
            .map(|(_, &v)| v)
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    Ok(StandaloneNet {
        config: cfg,
        width: view.width(),
        mid: view.mid_channels(),
        plan,
        names: reg.names,
        params,
        layout,
    })
}

impl<T: Real> StandaloneNet<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn mid_channels(&self) -> usize {
        self.mid
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn features<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        v: &[Var],
        input: Var,
        s: ScalePair,
    ) -> Result<Var> {
        let l = &self.layout;
        let pad = self.config.kernel / 2;
        let shallow = g.conv2d(input, v[l.shallow_w], Some(v[l.shallow_b]), pad)?;
        let mut x = shallow;
        for block in &l.blocks {
            let u = g.conv2d(x, v[block.conv_a_w], Some(v[block.conv_a_b]), pad)?;
            let mut u = g.relu(u)?;
            if let (Some(ase), Some(plan)) = (&block.ase, &self.plan) {
                let weights = AseVars {
                    w1: v[ase.w1],
                    w2: v[ase.w2],
                    b1: ase.b1.map(|i| v[i]),
                    b2: ase.b2.map(|i| v[i]),
                };
                u = ase_forward(g, u, s, &weights, plan)?;
            }
            let r = g.conv2d(u, v[block.conv_b_w], Some(v[block.conv_b_b]), pad)?;
            x = g.add(x, r)?;
        }
        let tail = g.conv2d(x, v[l.tail_w], Some(v[l.tail_b]), pad)?;
        g.add(tail, shallow)
    }

    /// Forward-only reconstruction.
    pub fn predict(&self, lr: &Tensor<T>, s: ScalePair) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v: Vec<Var> = self.params.iter().map(|p| g.leaf(p)).collect();
        let input = g.input(lr.clone());
        let feat = self.features(&mut g, &v, input, s)?;
        let l = &self.layout;
        let up = UpsamplerVars {
            w1: v[l.up_w1],
            b1: Some(v[l.up_b1]),
            w2: v[l.up_w2],
            b2: Some(v[l.up_b2]),
        };
        let out = upsample(&mut g, feat, lr, s, &up, self.config.skip)?;
        Ok(g.tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interweave::AseMode;

    fn cfg(mode: AseMode, bias: bool) -> BackboneConfig {
        BackboneConfig {
            c_in: 8,
            n_blocks: 2,
            lambda: 2,
            ase_mode: mode,
            ase_bias: bias,
            hidden: 6,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn full_extraction_is_identical_copy() {
        let store = SharedWeightStore::<f64>::build(&cfg(AseMode::Interweave, true), 2).unwrap();
        let net = extract_standalone(&store, 4).unwrap();
        assert_eq!(net.params(), store.params());
        assert_eq!(net.names(), store.names());
    }

    #[test]
    fn parameter_count_matches_view() {
        for mode in [AseMode::Interweave, AseMode::Naive, AseMode::Off] {
            let store = SharedWeightStore::<f64>::build(&cfg(mode, true), 2).unwrap();
            for t in 1..=4 {
                let net = extract_standalone(&store, t).unwrap();
                assert_eq!(
                    net.total_params(),
                    store.count_params(t).unwrap(),
                    "{mode} t={t}"
                );
            }
        }
    }

    #[test]
    fn sliced_and_dense_forward_agree_exactly() {
        for mode in [AseMode::Interweave, AseMode::Naive, AseMode::Off] {
            let store = SharedWeightStore::<f64>::build(&cfg(mode, false), 11).unwrap();
            let lr = Tensor::from_fn(&[3, 5, 6], |i| ((i * 37 % 19) as f64) / 19.0);
            let s = ScalePair { h: 1.8, w: 2.3 };
            for t in 1..=4 {
                let sliced = store.view(t).unwrap().predict(&lr, s).unwrap();
                let dense = extract_standalone(&store, t)
                    .unwrap()
                    .predict(&lr, s)
                    .unwrap();
                assert_eq!(sliced, dense, "{mode} t={t}");
            }
        }
    }
}
