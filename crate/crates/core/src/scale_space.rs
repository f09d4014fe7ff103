//! Scale set, its ordered partition into groups, width schedule, and the
//! training-task sampler.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Largest supported upsampling factor unless configured otherwise.
pub const DEFAULT_S_MAX: f64 = 4.0;

const BOUND_TOL: f64 = 1e-9;

/// Vertical and horizontal upsampling factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalePair {
    pub h: f64,
    pub w: f64,
}

impl ScalePair {
    pub fn new(h: f64, w: f64, s_max: f64) -> Result<Self> {
        for v in [h, w] {
            if !(v > 1.0 && v <= s_max + BOUND_TOL) {
                return Err(Error::Scale(format!("scale {v} outside (1, {s_max}]")));
            }
        }
        Ok(Self { h, w })
    }

    pub fn square(s: f64) -> Result<Self> {
        Self::new(s, s, DEFAULT_S_MAX)
    }

    /// The harder axis; decides the group.
    pub fn dominant(&self) -> f64 {
        self.h.max(self.w)
    }

    pub fn is_square(&self) -> bool {
        self.h == self.w
    }
}

impl fmt::Display for ScalePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_square() {
            write!(f, "{}", self.h)
        } else {
            write!(f, "{}x{}", self.h, self.w)
        }
    }
}

/// `1.1, 1.2, …, 4.0`.
pub fn default_scale_grid() -> Vec<f64> {
    scale_grid(1.1, 4.0, 0.1)
}

/// Inclusive arithmetic grid, each value rounded to 10 decimals so the
/// printed values are exact.
pub fn scale_grid(min: f64, max: f64, step: f64) -> Vec<f64> {
    let n = ((max - min) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| ((min + step * i as f64) * 1e10).round() / 1e10)
        .collect()
}

pub const DEFAULT_WIDTHS: [f64; 4] = [0.5, 0.7, 0.9, 1.0];

/// Ordered partition `S = S_1 ∪ … ∪ S_T` with one width per group.
///
/// Group indices `t` are 1-based throughout the public API.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGroups {
    groups: Vec<Vec<f64>>,
    widths: Vec<f64>,
    upper_bounds: Vec<f64>,
    s_max: f64,
}

impl ScaleGroups {
    /// Splits sorted, unique `scales` into `t` contiguous runs; run `i`
    /// (0-based) ends at element `⌊(i+1)·n/t⌋`.
    pub fn build(scales: &[f64], t: usize, widths: &[f64], s_max: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::config("group count T must be at least 1"));
        }
        if t > scales.len() {
            return Err(Error::config(format!(
                "cannot split {} scales into {t} groups",
                scales.len()
            )));
        }
        if widths.len() != t {
            return Err(Error::config(format!(
                "{} widths given for {t} groups",
                widths.len()
            )));
        }
        validate_widths(widths)?;
        if scales.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("scales must be sorted ascending and unique"));
        }
        if let Some(bad) = scales
            .iter()
            .find(|&&s| !(s > 1.0 && s <= s_max + BOUND_TOL))
        {
            return Err(Error::config(format!("scale {bad} outside (1, {s_max}]")));
        }

        let n = scales.len();
        let mut groups = Vec::with_capacity(t);
        let mut start = 0;
        for i in 0..t {
            let end = (i + 1) * n / t;
            groups.push(scales[start..end].to_vec());
            start = end;
        }
        let mut upper_bounds: Vec<f64> = groups.iter().map(|g| *g.last().unwrap()).collect();
        upper_bounds[t - 1] = s_max;
        Ok(Self {
            groups,
            widths: widths.to_vec(),
            upper_bounds,
            s_max,
        })
    }

    /// Four groups over `1.1..=4.0` with widths `0.5, 0.7, 0.9, 1.0`.
    pub fn default_groups() -> Self {
        Self::build(&default_scale_grid(), 4, &DEFAULT_WIDTHS, DEFAULT_S_MAX)
            .expect("default grouping is valid")
    }

    pub fn count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    pub fn group(&self, t: usize) -> Result<&[f64]> {
        self.check_index(t)?;
        Ok(&self.groups[t - 1])
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn upper_bounds(&self) -> &[f64] {
        &self.upper_bounds
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn all_scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.groups.iter().flatten().copied()
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.groups.len() {
            return Err(Error::config(format!(
                "subnet index {t} outside 1..={}",
                self.groups.len()
            )));
        }
        Ok(())
    }

    pub fn width_of(&self, t: usize) -> Result<f64> {
        self.check_index(t)?;
        Ok(self.widths[t - 1])
    }

    /// Smallest `t` whose upper bound covers `max(s_h, s_w)`.
    pub fn group_of(&self, s: ScalePair) -> Result<usize> {
        let d = s.dominant();
        if d > self.s_max + BOUND_TOL {
            return Err(Error::Scale(format!(
                "scale {d} exceeds s_max {}",
                self.s_max
            )));
        }
        Ok(self
            .upper_bounds
            .iter()
            .position(|&ub| d <= ub + BOUND_TOL)
            .map(|i| i + 1)
            .unwrap_or(self.groups.len()))
    }

    /// Draws a training task as in the any-resource training loop: `t`
    /// uniform over `1..=T`, a scale uniform over `S_t`, then `t` is
    /// promoted to `T` with probability `p`. The scale keeps the group it
    /// was drawn from. Exactly three draws are consumed regardless of `p`.
    pub fn sample_task<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Task {
        let big_t = self.groups.len();
        let t = rng.gen_range(1..=big_t);
        let group = &self.groups[t - 1];
        let s = group[rng.gen_range(0..group.len())];
        let coin: f64 = rng.gen();
        let subnet = if coin < p { big_t } else { t };
        Task {
            subnet,
            drawn_group: t,
            scale: ScalePair { h: s, w: s },
        }
    }

    /// A scale uniform over the whole set, run at full width.
    pub fn sample_full<R: Rng + ?Sized>(&self, rng: &mut R) -> Task {
        let n: usize = self.groups.iter().map(Vec::len).sum();
        let s = self.all_scales().nth(rng.gen_range(0..n)).unwrap();
        let scale = ScalePair { h: s, w: s };
        Task {
            subnet: self.groups.len(),
            drawn_group: self.group_of(scale).unwrap_or(self.groups.len()),
            scale,
        }
    }
}

pub(crate) fn validate_widths(widths: &[f64]) -> Result<()> {
    if widths.is_empty() {
        return Err(Error::config("width schedule is empty"));
    }
    if widths.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
        return Err(Error::config(format!(
            "widths {widths:?} must lie in (0, 1]"
        )));
    }
    if widths.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::config(format!(
            "widths {widths:?} must be strictly increasing"
        )));
    }
    if *widths.last().unwrap() != 1.0 {
        return Err(Error::config(format!(
            "last width must be 1.0, got {widths:?}"
        )));
    }
    Ok(())
}

/// One sampled training task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Task {
    /// Subnet that runs the step (1-based).
    pub subnet: usize,
    /// Group the scale was drawn from, before any promotion to `T`.
    pub drawn_group: usize,
    pub scale: ScalePair,
}
