//! Automatic domain randomization over the cars' initial velocities.
//!
//! Each randomized parameter `i` is drawn from `U(lower_i, upper_i)`. Every
//! range boundary owns a performance queue and a pair of thresholds. When a
//! queue fills, its mean decides the move:
//!
//! * mean >= increase threshold: widen the range at that boundary by `step`
//!   and raise the increase threshold to the mean;
//! * mean <= decrease threshold: narrow it by `step / 2` and lower the
//!   decrease threshold to the mean;
//! * otherwise leave it alone.
//!
//! The queue is cleared after every decision.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{ScenarioSample, CARS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

/// One end of one parameter's range. `param` is 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundaryId {
    pub param: usize,
    pub side: Side,
}

impl BoundaryId {
    pub fn new(param: usize, side: Side) -> Self {
        Self { param, side }
    }

    fn slot(self) -> usize {
        2 * self.param + usize::from(self.side == Side::Upper)
    }
}

/// What is appended to a boundary's performance queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceSignal {
    /// Cumulative reward of the whole boundary-sampled episode.
    EpisodeReturn,
    /// Every per-step reward of the boundary-sampled episode.
    StepReward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Probability that an episode is boundary sampled.
    pub boundary_prob: f64,
    /// Expansion step; contraction uses half of it.
    pub step: f64,
    pub initial_increase_threshold: f64,
    pub initial_decrease_threshold: f64,
    pub queue_len: usize,
    pub min_bound: f64,
    pub max_bound: f64,
    pub initial_lower: f64,
    pub initial_upper: f64,
    /// Randomize the ego's initial velocity too (9 parameters). When off,
    /// only the 8 neighbours are randomized and the ego starts at
    /// `fixed_ego_velocity`.
    pub randomize_ego: bool,
    pub fixed_ego_velocity: f64,
    pub performance: PerformanceSignal,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            boundary_prob: 0.5,
            step: 0.5,
            initial_increase_threshold: 15.0,
            initial_decrease_threshold: 13.0,
            queue_len: 10,
            min_bound: 0.0,
            max_bound: 30.0,
            initial_lower: 10.0,
            initial_upper: 10.0,
            randomize_ego: true,
            fixed_ego_velocity: 10.0,
            performance: PerformanceSignal::EpisodeReturn,
        }
    }
}

impl GeneratorConfig {
    pub fn dims(&self) -> usize {
        if self.randomize_ego {
            CARS
        } else {
            CARS - 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("generator: {msg}")));
        if !(0.0..=1.0).contains(&self.boundary_prob) {
            return bad("boundary_prob must be in [0, 1]");
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be > 0");
        }
        if !(self.initial_decrease_threshold < self.initial_increase_threshold) {
            return bad("initial_decrease_threshold must be below initial_increase_threshold");
        }
        if self.queue_len == 0 {
            return bad("queue_len must be > 0");
        }
        if !(0.0 <= self.min_bound
            && self.min_bound <= self.initial_lower
            && self.initial_lower <= self.initial_upper
            && self.initial_upper <= self.max_bound)
        {
            return bad("need 0 <= min_bound <= initial_lower <= initial_upper <= max_bound");
        }
        if !self.randomize_ego
            && !(self.min_bound..=self.max_bound).contains(&self.fixed_ego_velocity)
        {
            return bad("fixed_ego_velocity must lie within [min_bound, max_bound]");
        }
        Ok(())
    }
}

/// Parameter uniform over `0..dims`, lower side iff a uniform draw is
/// below 0.5.
pub fn pick_boundary<R: RngCore + ?Sized>(dims: usize, rng: &mut R) -> BoundaryId {
    let param = rng.random_range(0..dims);
    let x: f64 = rng.random();
    let side = if x < 0.5 { Side::Lower } else { Side::Upper };
    BoundaryId::new(param, side)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryState {
    pub queue: Vec<f64>,
    pub increase_threshold: f64,
    pub decrease_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateAction {
    Expanded,
    Contracted,
    Unchanged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub boundary: BoundaryId,
    pub mean_performance: f64,
    pub action: UpdateAction,
    /// The boundary's value after the decision.
    pub bound: f64,
    /// The threshold that was replaced, or the increase threshold when
    /// nothing changed.
    pub threshold: f64,
}

/// The generator's complete mutable state.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionState {
    ranges: Vec<Range>,
    /// Indexed by `BoundaryId::slot`: `2 * param` lower, `2 * param + 1` upper.
    boundaries: Vec<BoundaryState>,
    step: f64,
    min_bound: f64,
    max_bound: f64,
    queue_len: usize,
    fixed_ego_velocity: Option<f64>,
}

impl DistributionState {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let dims = cfg.dims();
        let range = Range {
            lower: cfg.initial_lower,
            upper: cfg.initial_upper,
        };
        Self::with_ranges(cfg, vec![range; dims]).expect("initial ranges come from a validated config")
    }

    /// Starts from explicit per-parameter ranges (e.g. a frozen snapshot).
    pub fn with_ranges(cfg: &GeneratorConfig, ranges: Vec<Range>) -> Result<Self> {
        if ranges.len() != cfg.dims() {
            return Err(Error::InvalidConfig(format!(
                "expected {} ranges, got {}",
                cfg.dims(),
                ranges.len()
            )));
        }
        for (i, r) in ranges.iter().enumerate() {
            if !(cfg.min_bound <= r.lower && r.lower <= r.upper && r.upper <= cfg.max_bound) {
                return Err(Error::InvalidConfig(format!(
                    "range {i} [{}, {}] violates [{}, {}]",
                    r.lower, r.upper, cfg.min_bound, cfg.max_bound
                )));
            }
        }
        let boundary = BoundaryState {
            queue: Vec::with_capacity(cfg.queue_len),
            increase_threshold: cfg.initial_increase_threshold,
            decrease_threshold: cfg.initial_decrease_threshold,
        };
        Ok(Self {
            boundaries: vec![boundary; 2 * ranges.len()],
            ranges,
            step: cfg.step,
            min_bound: cfg.min_bound,
            max_bound: cfg.max_bound,
            queue_len: cfg.queue_len,
            fixed_ego_velocity: (!cfg.randomize_ego).then_some(cfg.fixed_ego_velocity),
        })
    }

    pub fn dims(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range] {
        &self.ranges
    }

    pub fn boundary(&self, id: BoundaryId) -> &BoundaryState {
        &self.boundaries[id.slot()]
    }

    pub fn bound(&self, id: BoundaryId) -> f64 {
        let r = &self.ranges[id.param];
        match id.side {
            Side::Lower => r.lower,
            Side::Upper => r.upper,
        }
    }

    /// Maps a parameter vector onto the 9 initial velocities.
    fn to_sample(&self, lambda: &[f64]) -> ScenarioSample {
        let mut v = [0.0; CARS];
        match self.fixed_ego_velocity {
            Some(ego) => {
                v[0] = ego;
                v[1..].copy_from_slice(lambda);
            }
            None => v.copy_from_slice(lambda),
        }
        ScenarioSample::new(v)
    }

    fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.ranges
            .iter()
            .map(|r| {
                let u: f64 = rng.random();
                (r.lower + (r.upper - r.lower) * u).min(r.upper)
            })
            .collect()
    }

    /// Every parameter independently uniform over its current range.
    pub fn episode_sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> ScenarioSample {
        self.to_sample(&self.draw(rng))
    }

    /// Picks a boundary uniformly (parameter uniform, then lower iff a
    /// uniform draw is below 0.5) and pins that parameter to it.
    pub fn boundary_sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> (ScenarioSample, BoundaryId) {
        let mut lambda = self.draw(rng);
        let id = pick_boundary(self.dims(), rng);
        lambda[id.param] = self.bound(id);
        (self.to_sample(&lambda), id)
    }

    /// Like [`boundary_sample`](Self::boundary_sample) with the boundary fixed.
    pub fn boundary_sample_at<R: RngCore + ?Sized>(&self, id: BoundaryId, rng: &mut R) -> ScenarioSample {
        let mut lambda = self.draw(rng);
        lambda[id.param] = self.bound(id);
        self.to_sample(&lambda)
    }

    pub fn record_performance(&mut self, id: BoundaryId, performance: f64) -> Result<()> {
        if !performance.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite performance {performance} for boundary {id:?}"
            )));
        }
        self.boundaries[id.slot()].queue.push(performance);
        Ok(())
    }

    /// Decides on `id` once its queue holds `queue_len` entries. Returns
    /// `None` while the queue is still filling.
    pub fn maybe_update(&mut self, id: BoundaryId) -> Option<UpdateEvent> {
        let slot = id.slot();
        if self.boundaries[slot].queue.len() < self.queue_len {
            return None;
        }
        let b = &mut self.boundaries[slot];
        let mean = mean(&b.queue);
        b.queue.clear();

        let (action, threshold, delta) = if mean >= b.increase_threshold {
            b.increase_threshold = mean;
            (UpdateAction::Expanded, mean, self.step)
        } else if mean <= b.decrease_threshold {
            b.decrease_threshold = mean;
            (UpdateAction::Contracted, mean, -self.step / 2.0)
        } else {
            (UpdateAction::Unchanged, b.increase_threshold, 0.0)
        };

        let (min, max) = (self.min_bound, self.max_bound);
        let r = &mut self.ranges[id.param];
        // positive delta widens the range at this side
        match id.side {
            Side::Upper => r.upper = (r.upper + delta).clamp(r.lower, max),
            Side::Lower => r.lower = (r.lower - delta).clamp(min, r.upper),
        }

        Some(UpdateEvent {
            boundary: id,
            mean_performance: mean,
            action,
            bound: self.bound(id),
            threshold,
        })
    }

    /// `(param, lower, upper)` for every parameter, in index order.
    pub fn snapshot_bounds(&self) -> Vec<(usize, f64, f64)> {
        self.ranges
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.lower, r.upper))
            .collect()
    }
}

/// Mean with compensated summation, so a queue of identical values averages
/// to exactly that value.
fn mean(values: &[f64]) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    (sum + carry) / values.len() as f64
}
