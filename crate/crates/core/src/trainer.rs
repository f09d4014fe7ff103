//! Any-resource training: sample a (subnet, scale) task, run one batch
//! through that subnet, and update only the weights it reads.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{subnet_view, write_atomic, SharedWeightStore, SubnetView};
use crate::bench::{bicubic_resize, Image};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, Real, Tensor};
use crate::scale_space::{ScaleGroups, ScalePair, Task};
use crate::upsampler::round_half_up;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Phase {
    /// Full width only, scales uniform over the whole set.
    Pretrain,
    #[default]
    AnySr,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::AnySr => "anysr",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "anysr" => Ok(Phase::AnySr),
            other => Err(Error::config(format!(
                "unknown phase `{other}` (pretrain|anysr)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Probability of promoting a sampled task to the full network.
    pub p: f64,
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub batch: usize,
    /// LR patch side length.
    pub patch: usize,
    pub seed: u64,
    pub phase: Phase,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            p: 0.6,
            lr0: 1e-5,
            decay_every: 1000,
            decay_factor: 0.5,
            batch: 8,
            patch: 48,
            seed: 0,
            phase: Phase::AnySr,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("p = {} must lie in [0, 1]", self.p)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.lr0
            )));
        }
        if self.patch < 8 {
            return Err(Error::config(format!(
                "patch {} must be at least 8",
                self.patch
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "decay factor {} must lie in (0, 1]",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊step / decay_every⌋`.
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    let k = (step / cfg.decay_every.max(1)).min(i32::MAX as u64) as i32;
    cfg.lr0 * cfg.decay_factor.powi(k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair<T = f64> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub scale: ScalePair,
}

/// Random `round(patch·s)` crop of `hr` and its bicubic reduction to
/// `patch×patch`.
pub fn make_training_pair<T: Real, R: Rng + ?Sized>(
    hr: &Image,
    s: ScalePair,
    patch: usize,
    rng: &mut R,
) -> Result<TrainingPair<T>> {
    let ch = round_half_up(patch as f64 * s.h);
    let cw = round_half_up(patch as f64 * s.w);
    if ch > hr.height() || cw > hr.width() {
        return Err(Error::Data(format!(
            "{}×{} image is smaller than the {ch}×{cw} crop needed at scale {s}",
            hr.height(),
            hr.width()
        )));
    }
    let y = rng.gen_range(0..=hr.height() - ch);
    let x = rng.gen_range(0..=hr.width() - cw);
    let crop = hr.crop(y, x, ch, cw)?;
    let lr = bicubic_resize(&crop, patch, patch)?;
    Ok(TrainingPair {
        lr: lr.to_tensor(),
        hr: crop.to_tensor(),
        scale: s,
    })
}

fn view_for<'a, T: Real>(
    store: &'a SharedWeightStore<T>,
    groups: &ScaleGroups,
    t: usize,
    s: ScalePair,
) -> Result<SubnetView<'a, T>> {
    if t == groups.count() {
        Ok(subnet_view(store, t, groups)?.allow_any_scale())
    } else if groups.group_of(s)? == t {
        subnet_view(store, t, groups)
    } else {
        Err(Error::Scale(format!(
            "scale {s} belongs to group {}, not subnet {t}",
            groups.group_of(s)?
        )))
    }
}

/// One optimization step of subnet `t` on a batch sharing one scale.
/// Returns the mean ℓ1 loss before the update. Inactive weights and their
/// Adam moments are left untouched.
pub fn train_step<T: Real>(
    store: &mut SharedWeightStore<T>,
    groups: &ScaleGroups,
    batch: &[TrainingPair<T>],
    t: usize,
    adam: &mut AdamState<T>,
    lr: f64,
) -> Result<f64> {
    let s = match batch.first() {
        Some(p) => p.scale,
        None => return Err(Error::Data("empty batch".into())),
    };
    if batch.iter().any(|p| p.scale != s) {
        return Err(Error::Scale(
            "all pairs of a batch must share one scale".into(),
        ));
    }
    let (masks, per_sample) = {
        let view = view_for(store, groups, t, s)?;
        let frozen: &SharedWeightStore<T> = store;
        let per_sample: Vec<(f64, Vec<Option<Vec<T>>>)> =
            crate::par::map(batch, |pair| -> Result<_> {
                let mut g = Graph::new();
                let vars = frozen.register(&mut g);
                let out = view.reconstruct(&mut g, &vars, &pair.lr, s)?;
                let target = g.leaf(&pair.hr);
                let loss = g.l1_loss(out, target)?;
                let value = g.scalar(loss)?.as_f64();
                let grads = g.backward(loss)?;
                let by_param = (0..vars.len())
                    .map(|i| grads.by_key(i).map(<[T]>::to_vec))
                    .collect();
                Ok((value, by_param))
            })
            .into_iter()
            .collect::<Result<_>>()?;
        (view.masks(), per_sample)
    };

    let inv = T::lit(1.0 / batch.len() as f64);
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss became {loss}")));
    }
    let mut total: Vec<Option<Vec<T>>> = vec![None; store.params().len()];
    for (_, grads) in &per_sample {
        for (acc, g) in total.iter_mut().zip(grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => *acc = Some(g.clone()),
                }
            }
        }
    }
    for g in total.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    let grads: Vec<Option<&[T]>> = total.iter().map(|g| g.as_deref()).collect();
    let masks: Vec<Option<&[bool]>> = masks.iter().map(|m| m.as_deref()).collect();
    adam.step_masked(store.params_mut(), &grads, lr, &masks)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub t: usize,
    pub scale: ScalePair,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// Columns `step,t,s_h,s_w,lr,loss`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["step", "t", "s_h", "s_w", "lr", "loss"])
            .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.t.to_string(),
                r.scale.h.to_string(),
                r.scale.w.to_string(),
                format!("{:e}", r.lr),
                format!("{:.9}", r.loss),
            ])
            .map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Mean loss over records `range`, clamped to the log length.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.records.len());
        let start = range.start.min(end);
        let slice = &self.records[start..end];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

/// Owns the store and optimizer state across steps.
pub struct Trainer<T: Real> {
    store: SharedWeightStore<T>,
    groups: ScaleGroups,
    cfg: TrainConfig,
    adam: AdamState<T>,
    steps: u64,
    forwards: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(store: SharedWeightStore<T>, groups: ScaleGroups, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if groups.widths() != store.config().widths.as_slice() {
            return Err(Error::config(format!(
                "group widths {:?} differ from the model's {:?}",
                groups.widths(),
                store.config().widths
            )));
        }
        let adam = AdamState::new(store.params());
        Ok(Self {
            store,
            groups,
            cfg,
            adam,
            steps: 0,
            forwards: 0,
        })
    }

    pub fn store(&self) -> &SharedWeightStore<T> {
        &self.store
    }

    pub fn into_store(self) -> SharedWeightStore<T> {
        self.store
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn groups(&self) -> &ScaleGroups {
        &self.groups
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Batch forwards run so far; one per step.
    pub fn forwards(&self) -> u64 {
        self.forwards
    }

    pub fn step(&mut self, batch: &[TrainingPair<T>], t: usize, lr: f64) -> Result<f64> {
        self.forwards += 1;
        let loss = train_step(&mut self.store, &self.groups, batch, t, &mut self.adam, lr)?;
        self.steps += 1;
        Ok(loss)
    }

    /// Draws tasks with the phase's sampler.
    pub fn train(&mut self, dataset: &[Image], outputs: &TrainOutputs) -> Result<TrainLog> {
        let (phase, p) = (self.cfg.phase, self.cfg.p);
        self.train_with(dataset, outputs, move |groups, rng| match phase {
            Phase::Pretrain => groups.sample_full(rng),
            Phase::AnySr => groups.sample_task(p, rng),
        })
    }

    /// Runs `steps` iterations with tasks from `next_task`. Tasks and data
    /// come from two independent streams of the seeded generator, so the
    /// task sampler cannot shift which crops are drawn.
    pub fn train_with(
        &mut self,
        dataset: &[Image],
        outputs: &TrainOutputs,
        mut next_task: impl FnMut(&ScaleGroups, &mut ChaCha8Rng) -> Task,
    ) -> Result<TrainLog> {
        if dataset.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut task_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        task_rng.set_stream(1);
        let mut data_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        data_rng.set_stream(2);
        let mut log = TrainLog::default();
        for k in 0..self.cfg.steps {
            let task = next_task(&self.groups, &mut task_rng);
            let batch = (0..self.cfg.batch)
                .map(|_| {
                    let img = &dataset[data_rng.gen_range(0..dataset.len())];
                    make_training_pair(img, task.scale, self.cfg.patch, &mut data_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = lr_schedule(&self.cfg, k);
            let loss = match self.step(&batch, task.subnet, lr) {
                Ok(l) => l,
                Err(e) => {
                    self.persist(outputs, &log)?;
                    return Err(e);
                }
            };
            log.records.push(LossRecord {
                step: k,
                t: task.subnet,
                scale: task.scale,
                lr,
                loss,
            });
            let every = self.cfg.checkpoint_every;
            if every > 0 && (k + 1) % every == 0 && k + 1 < self.cfg.steps {
                self.persist(outputs, &log)?;
            }
        }
        self.persist(outputs, &log)?;
        Ok(log)
    }

    fn persist(&self, outputs: &TrainOutputs, log: &TrainLog) -> Result<()> {
        if let Some(path) = &outputs.checkpoint {
            self.store.save(path)?;
        }
        if let Some(path) = &outputs.loss_log {
            write_atomic(path, log.to_csv()?.as_bytes())?;
        }
        Ok(())
    }
}
