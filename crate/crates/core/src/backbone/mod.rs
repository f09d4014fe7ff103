//! The elastic feature extractor and the single weight store it slices.
//!
//! Layout: a shallow 3→C_in conv, `N` blocks, a C_in→C_in tail conv with a
//! global residual to the shallow feature, and the shared upsampler. Block
//! `i` computes `x + conv_b(ASE(ReLU(conv_a(x))))`, where `conv_a` has C_in
//! output channels of which subnet `t` uses the first `⌊C_in·w_t⌋`.

mod checkpoint;
mod standalone;
mod view;

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{read_manifest, Manifest, ManifestEntry, MAGIC};
pub use standalone::{extract_standalone, StandaloneNet};
pub use view::{subnet_view, ActiveRegion, SubnetView};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interweave::{floor_width, AseMode};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::scale_space::{validate_widths, DEFAULT_WIDTHS};
use crate::upsampler::{Skip, DEFAULT_HIDDEN, QUERY_EXTRA};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub c_in: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub lambda: usize,
    pub widths: Vec<f64>,
    pub ase_mode: AseMode,
    /// Biases on the gating MLP layers.
    pub ase_bias: bool,
    /// Hidden units of the upsampler MLP.
    pub hidden: usize,
    pub skip: Skip,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            c_in: 64,
            n_blocks: 4,
            kernel: 3,
            lambda: 4,
            widths: DEFAULT_WIDTHS.to_vec(),
            ase_mode: AseMode::Interweave,
            ase_bias: false,
            hidden: DEFAULT_HIDDEN,
            skip: Skip::Bilinear,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("n_blocks must be at least 1"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.lambda == 0 || self.c_in / self.lambda == 0 {
            return Err(Error::config(format!(
                "⌊c_in/lambda⌋ = ⌊{}/{}⌋ must be at least 1",
                self.c_in, self.lambda
            )));
        }
        validate_widths(&self.widths)?;
        if floor_width(self.c_in, self.widths[0]) == 0 {
            return Err(Error::config(format!(
                "⌊c_in·w_min⌋ = ⌊{}·{}⌋ must be at least 1",
                self.c_in, self.widths[0]
            )));
        }
        if self.hidden == 0 {
            return Err(Error::config("upsampler hidden width must be at least 1"));
        }
        Ok(())
    }

    /// Active mid channels at width `w`.
    pub fn mid_channels(&self, w: f64) -> usize {
        floor_width(self.c_in, w)
    }

    /// Serialized as `key=value` lines, used inside checkpoints.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "c_in={}\nn_blocks={}\nkernel={}\nlambda={}\nwidths={}\nase_mode={}\nase_bias={}\nhidden={}\nskip={}\n",
            self.c_in,
            self.n_blocks,
            self.kernel,
            self.lambda,
            widths.join(","),
            self.ase_mode,
            self.ase_bias,
            self.hidden,
            self.skip
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = BackboneConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            let bad = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("config `{k}`: {e}"));
            match k {
                "c_in" => cfg.c_in = v.parse().map_err(|e| bad(&e))?,
                "n_blocks" => cfg.n_blocks = v.parse().map_err(|e| bad(&e))?,
                "kernel" => cfg.kernel = v.parse().map_err(|e| bad(&e))?,
                "lambda" => cfg.lambda = v.parse().map_err(|e| bad(&e))?,
                "widths" => {
                    cfg.widths = v
                        .split(',')
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(&e))?
                }
                "ase_mode" => cfg.ase_mode = v.parse()?,
                "ase_bias" => cfg.ase_bias = v.parse().map_err(|e| bad(&e))?,
                "hidden" => cfg.hidden = v.parse().map_err(|e| bad(&e))?,
                "skip" => cfg.skip = v.parse()?,
                other => return Err(Error::Checkpoint(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Indices of one block's tensors in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayout {
    pub conv_a_w: usize,
    pub conv_a_b: usize,
    pub conv_b_w: usize,
    pub conv_b_b: usize,
    pub ase: Option<AseLayout>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AseLayout {
    pub w1: usize,
    pub w2: usize,
    pub b1: Option<usize>,
    pub b2: Option<usize>,
}

/// Indices of every tensor in the store, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub shallow_w: usize,
    pub shallow_b: usize,
    pub blocks: Vec<BlockLayout>,
    pub tail_w: usize,
    pub tail_b: usize,
    pub up_w1: usize,
    pub up_b1: usize,
    pub up_w2: usize,
    pub up_b2: usize,
}

/// Role of a tensor, which decides how subnets slice it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Role {
    Fixed,
    ConvAWeight,
    ConvABias,
    ConvBWeight,
    AseW1,
    AseW2,
    AseB2,
}

/// Registration helper: names, shapes, roles, and fan-ins in order.
struct Registry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    roles: Vec<Role>,
    fan_in: Vec<usize>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, role: Role, fan_in: usize) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.roles.push(role);
        self.fan_in.push(fan_in);
        self.names.len() - 1
    }
}

/// Shapes of the tensors of a (possibly narrowed) network. `mid` is the
/// block-internal channel count and `ase_cols` the first MLP layer width.
fn register(cfg: &BackboneConfig, mid: usize, ase_cols: Option<usize>) -> (Registry, Layout) {
    let (c, k) = (cfg.c_in, cfg.kernel);
    let mut r = Registry {
        names: Vec::new(),
        shapes: Vec::new(),
        roles: Vec::new(),
        fan_in: Vec::new(),
    };
    let shallow_w = r.add(
        "shallow.weight".into(),
        vec![c, 3, k, k],
        Role::Fixed,
        3 * k * k,
    );
    let shallow_b = r.add("shallow.bias".into(), vec![c], Role::Fixed, 3 * k * k);
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let p = format!("blocks.{i}");
        let conv_a_w = r.add(
            format!("{p}.conv_a.weight"),
            vec![mid, c, k, k],
            Role::ConvAWeight,
            c * k * k,
        );
        let conv_a_b = r.add(
            format!("{p}.conv_a.bias"),
            vec![mid],
            Role::ConvABias,
            c * k * k,
        );
        let ase = ase_cols.map(|cols| {
            let w1 = r.add(format!("{p}.ase.w1"), vec![2 * c, cols], Role::AseW1, cols);
            let b1 = cfg
                .ase_bias
                .then(|| r.add(format!("{p}.ase.b1"), vec![2 * c], Role::Fixed, cols));
            let w2 = r.add(format!("{p}.ase.w2"), vec![mid, 2 * c], Role::AseW2, 2 * c);
            let b2 = cfg
                .ase_bias
                .then(|| r.add(format!("{p}.ase.b2"), vec![mid], Role::AseB2, 2 * c));
            AseLayout { w1, w2, b1, b2 }
        });
        let conv_b_w = r.add(
            format!("{p}.conv_b.weight"),
            vec![c, mid, k, k],
            Role::ConvBWeight,
            c * k * k,
        );
        let conv_b_b = r.add(format!("{p}.conv_b.bias"), vec![c], Role::Fixed, c * k * k);
        blocks.push(BlockLayout {
            conv_a_w,
            conv_a_b,
            conv_b_w,
            conv_b_b,
            ase,
        });
    }
    let tail_w = r.add(
        "tail.weight".into(),
        vec![c, c, k, k],
        Role::Fixed,
        c * k * k,
    );
    let tail_b = r.add("tail.bias".into(), vec![c], Role::Fixed, c * k * k);
    let q = c + QUERY_EXTRA;
    let h = cfg.hidden;
    let up_w1 = r.add("upsampler.mlp1.weight".into(), vec![h, q], Role::Fixed, q);
    let up_b1 = r.add("upsampler.mlp1.bias".into(), vec![h], Role::Fixed, q);
    let up_w2 = r.add("upsampler.mlp2.weight".into(), vec![3, h], Role::Fixed, h);
    let up_b2 = r.add("upsampler.mlp2.bias".into(), vec![3], Role::Fixed, h);
    let layout = Layout {
        shallow_w,
        shallow_b,
        blocks,
        tail_w,
        tail_b,
        up_w1,
        up_b1,
        up_w2,
        up_b2,
    };
    (r, layout)
}

/// Every parameter of the elastic network, stored once at full width.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedWeightStore<T = f64> {
    config: BackboneConfig,
    names: Vec<String>,
    roles: Vec<Role>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Real> SharedWeightStore<T> {
    /// Weights and biases uniform in `±sqrt(1/fan_in)`, drawn in
    /// registration order from a ChaCha8 stream seeded with `seed`.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (reg, layout) = register(
            config,
            config.c_in,
            config.ase_mode.w1_cols(config.c_in, config.lambda),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = reg
            .shapes
            .iter()
            .zip(&reg.fan_in)
            .map(|(shape, &fan_in)| {
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            names: reg.names,
            roles: reg.roles,
            params,
            layout,
        })
    }

    /// Store with every tensor zero.
    pub fn zeros(config: &BackboneConfig) -> Result<Self> {
        let mut s = Self::build(config, 0)?;
        for p in &mut s.params {
            p.data_mut().fill(T::zero());
        }
        Ok(s)
    }

    pub(crate) fn from_parts(config: BackboneConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (reg, layout) = register(
            &config,
            config.c_in,
            config.ase_mode.w1_cols(config.c_in, config.lambda),
        );
        if params.len() != reg.shapes.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reg.shapes.len(),
                params.len()
            )));
        }
        for (i, (p, shape)) in params.iter().zip(&reg.shapes).enumerate() {
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {shape:?}",
                    reg.names[i],
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: reg.names,
            roles: reg.roles,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub(crate) fn role(&self, i: usize) -> Role {
        self.roles[i]
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `g` as a parameter keyed by its index.
    pub fn register<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(p, i))
            .collect()
    }

    /// Subnet `t` (1-based) at width `widths[t-1]`, accepting any scale.
    pub fn view(&self, t: usize) -> Result<SubnetView<'_, T>> {
        SubnetView::new(self, t, None)
    }

    /// Number of scalars active in subnet `t`.
    pub fn count_params(&self, t: usize) -> Result<usize> {
        Ok(self.view(t)?.active_params())
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> SharedWeightStore<U> {
        SharedWeightStore {
            config: self.config.clone(),
            names: self.names.clone(),
            roles: self.roles.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(c_in: usize, n_blocks: usize, mode: AseMode) -> BackboneConfig {
        BackboneConfig {
            c_in,
            n_blocks,
            lambda: 2,
            ase_mode: mode,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn construction_contract() {
        let s = SharedWeightStore::<f64>::build(&small(16, 2, AseMode::Interweave), 1).unwrap();
        assert_eq!(s.layout().blocks.len(), 2);
        assert_eq!(s.param("shallow.weight").unwrap().shape(), &[16, 3, 3, 3]);
        assert_eq!(s.param("tail.weight").unwrap().shape(), &[16, 16, 3, 3]);
        assert_eq!(s.param("blocks.1.ase.w1").unwrap().shape(), &[32, 16 + 4]);
        assert_eq!(s.param("blocks.1.ase.w2").unwrap().shape(), &[16, 32]);
    }

    #[test]
    fn names_are_unique() {
        let s = SharedWeightStore::<f64>::build(&small(8, 3, AseMode::Interweave), 1).unwrap();
        let mut names = s.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), s.names().len());
        assert!(!s.names().iter().any(|n| n.contains("width")));
    }

    #[test]
    fn same_seed_same_store() {
        let cfg = small(8, 2, AseMode::Naive);
        let a = SharedWeightStore::<f64>::build(&cfg, 7).unwrap();
        let b = SharedWeightStore::<f64>::build(&cfg, 7).unwrap();
        let c = SharedWeightStore::<f64>::build(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let s = SharedWeightStore::<f64>::build(&small(8, 1, AseMode::Off), 3).unwrap();
        let bound = (1.0 / 72f64).sqrt();
        assert!(s
            .param("tail.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn hand_counted_backbone_params() {
        let s = SharedWeightStore::<f64>::build(&small(8, 1, AseMode::Off), 0).unwrap();
        let backbone: usize = s
            .names()
            .iter()
            .zip(s.params())
            .filter(|(n, _)| !n.starts_with("upsampler"))
            .map(|(_, p)| p.len())
            .sum();
        assert_eq!(backbone, 224 + 584 + 584 + 584);
    }

    #[test]
    fn config_validation() {
        let mut c = small(8, 1, AseMode::Interweave);
        c.lambda = 9;
        assert!(c.validate().is_err());
        let mut c = small(1, 1, AseMode::Off);
        c.lambda = 1;
        assert!(c.validate().is_err(), "⌊1·0.5⌋ = 0");
        let mut c = small(8, 0, AseMode::Off);
        c.n_blocks = 0;
        assert!(c.validate().is_err());
        let mut c = small(8, 1, AseMode::Off);
        c.kernel = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = small(12, 3, AseMode::Naive);
        c.ase_bias = true;
        c.widths = vec![0.25, 0.6, 1.0];
        assert_eq!(BackboneConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
