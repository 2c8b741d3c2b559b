//! Lane-based highway micro-simulator.
//!
//! Five lanes, one controllable ego car and eight scripted neighbours laid
//! out on a 3x3 grid around the ego. Neighbours hold their lane and their
//! initial velocity for the whole episode; only the ego accelerates, brakes
//! or changes lane.
//!
//! Grid cell `(row, col)` maps to lane `col + 1`; row 0 starts 20 m ahead of
//! the ego, row 1 10 m behind and row 2 20 m behind. The ego is `(1, 1)` and
//! starts in lane 2 at position 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANES: usize = 5;
pub const CARS: usize = 9;
pub const NEIGHBOURS: usize = CARS - 1;
pub const OBS_DIM: usize = LANES + CARS + NEIGHBOURS;
pub const EGO_START_LANE: usize = 2;

/// Relative distances are clipped to this many metres before normalisation.
pub const DISTANCE_CLIP: f64 = 100.0;

/// Neighbour grid cells in scenario order (ego excluded).
pub const NEIGHBOUR_CELLS: [(usize, usize); NEIGHBOURS] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 0),
    (1, 2),
    (2, 0),
    (2, 1),
    (2, 2),
];

/// Longitudinal start offset of each grid row relative to the ego.
const ROW_OFFSET: [f64; 3] = [20.0, -10.0, -20.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Accelerate,
    Decelerate,
    Left,
    Right,
    Noop,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; Action::COUNT] = [
        Action::Accelerate,
        Action::Decelerate,
        Action::Left,
        Action::Right,
        Action::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Simulation step in seconds.
    pub dt: f64,
    /// Magnitude of the A/D acceleration, m/s^2.
    pub accel: f64,
    pub car_length: f64,
    /// Episode time limit in seconds.
    pub timeout: f64,
    /// Ego maximum velocity; also the velocity normaliser.
    pub v_max: f64,
    /// Journey length from the ego start line to the destination.
    pub distance: f64,
    pub r_arrive: f64,
    pub r_collision: f64,
    /// Admissible range for any initial velocity.
    pub min_velocity: f64,
    pub max_velocity: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            accel: 3.0,
            car_length: 5.0,
            timeout: 60.0,
            v_max: 30.0,
            distance: 200.0,
            r_arrive: 20.0,
            r_collision: -20.0,
            min_velocity: 0.0,
            max_velocity: 30.0,
        }
    }
}

impl EnvConfig {
    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            r_arrive: self.r_arrive,
            r_collision: self.r_collision,
            v_max: self.v_max,
            distance: self.distance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("accel", self.accel),
            ("car_length", self.car_length),
            ("timeout", self.timeout),
            ("v_max", self.v_max),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidConfig(format!("env.{name} must be > 0")));
            }
        }
        if !(self.distance.is_finite() && self.distance >= 0.0) {
            return Err(Error::InvalidConfig("env.distance must be >= 0".into()));
        }
        if !(0.0 <= self.min_velocity && self.min_velocity <= self.max_velocity) {
            return Err(Error::InvalidConfig(
                "env velocity range must satisfy 0 <= min_velocity <= max_velocity".into(),
            ));
        }
        if self.max_velocity > self.v_max {
            return Err(Error::InvalidConfig(
                "env.max_velocity may not exceed env.v_max".into(),
            ));
        }
        validate_reward_config(&self.reward())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub r_arrive: f64,
    pub r_collision: f64,
    pub v_max: f64,
    pub distance: f64,
}

impl RewardConfig {
    /// Smallest admissible gap between the arrival and collision rewards.
    pub fn required_margin(&self) -> f64 {
        2.0 * self.distance / self.v_max
    }

    pub fn margin(&self) -> f64 {
        self.r_arrive - self.r_collision
    }
}

/// Accepts a reward design only if arriving slowly always beats colliding at
/// full speed: `r_arrive - r_collision >= 2 d / v_max`.
pub fn validate_reward_config(cfg: &RewardConfig) -> Result<()> {
    let margin = cfg.margin();
    let required = cfg.required_margin();
    if margin >= required {
        Ok(())
    } else {
        Err(Error::RewardInfeasible { margin, required })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub lane: usize,
    pub position: f64,
    pub velocity: f64,
}

/// True when two vehicles overlap: same lane and closer than one car length.
pub fn collides(a: &VehicleState, b: &VehicleState, car_length: f64) -> bool {
    a.lane == b.lane && (a.position - b.position).abs() < car_length
}

/// Continuous-time overlap test for two same-lane vehicles moving linearly
/// from their `before` to their `after` positions during one step.
pub fn swept_overlap(gap_before: f64, gap_after: f64, car_length: f64) -> bool {
    if gap_before.signum() != gap_after.signum() || gap_before == 0.0 || gap_after == 0.0 {
        return true;
    }
    gap_before.abs().min(gap_after.abs()) < car_length
}

/// One episode's randomized initial velocities: ego first, then the
/// neighbours in [`NEIGHBOUR_CELLS`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSample {
    pub initial_velocities: [f64; CARS],
}

impl ScenarioSample {
    pub fn new(initial_velocities: [f64; CARS]) -> Self {
        Self { initial_velocities }
    }

    pub fn uniform(velocity: f64) -> Self {
        Self::new([velocity; CARS])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; CARS] = values.try_into().map_err(|_| Error::ScenarioLength {
            expected: CARS,
            got: values.len(),
        })?;
        Ok(Self::new(arr))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terminal {
    Collided,
    Arrived,
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    /// Ego first, then neighbours in scenario order.
    pub vehicles: [VehicleState; CARS],
    pub elapsed: f64,
    pub terminal: Option<Terminal>,
}

impl WorldState {
    pub fn ego(&self) -> &VehicleState {
        &self.vehicles[0]
    }

    pub fn neighbours(&self) -> &[VehicleState] {
        &self.vehicles[1..]
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOutcome {
    pub collision: bool,
    pub arrived: bool,
    pub timeout: bool,
}

impl StepOutcome {
    pub fn terminal(&self) -> Option<Terminal> {
        if self.collision {
            Some(Terminal::Collided)
        } else if self.arrived {
            Some(Terminal::Arrived)
        } else if self.timeout {
            Some(Terminal::Timeout)
        } else {
            None
        }
    }
}

pub fn build_scenario(sample: &ScenarioSample, cfg: &EnvConfig) -> Result<WorldState> {
    for (index, &value) in sample.initial_velocities.iter().enumerate() {
        if !(value >= cfg.min_velocity && value <= cfg.max_velocity) {
            return Err(Error::VelocityOutOfRange {
                index,
                value,
                min: cfg.min_velocity,
                max: cfg.max_velocity,
            });
        }
    }

    let lambda = &sample.initial_velocities;
    let mut vehicles = [VehicleState {
        lane: EGO_START_LANE,
        position: 0.0,
        velocity: lambda[0],
    }; CARS];
    for (k, &(row, col)) in NEIGHBOUR_CELLS.iter().enumerate() {
        vehicles[k + 1] = VehicleState {
            lane: col + 1,
            position: ROW_OFFSET[row],
            velocity: lambda[k + 1],
        };
    }

    Ok(WorldState {
        vehicles,
        elapsed: 0.0,
        terminal: None,
    })
}

/// Advances the world by `cfg.dt`. Lane changes are applied instantly at the
/// start of the step, then every vehicle moves with its (updated) velocity.
/// The ego collides if at any instant of the step it shares a lane with a
/// neighbour at less than one car length.
pub fn step(state: &WorldState, action: Action, cfg: &EnvConfig) -> Result<(WorldState, StepOutcome)> {
    if state.is_terminal() {
        return Err(Error::TerminalStep);
    }
    let dt = cfg.dt;
    let mut next = state.clone();

    let ego = &mut next.vehicles[0];
    match action {
        Action::Accelerate => ego.velocity = (ego.velocity + cfg.accel * dt).min(cfg.v_max),
        Action::Decelerate => ego.velocity = (ego.velocity - cfg.accel * dt).max(0.0),
        Action::Left => ego.lane = ego.lane.saturating_sub(1),
        Action::Right => ego.lane = (ego.lane + 1).min(LANES - 1),
        Action::Noop => {}
    }

    let before = next.vehicles;
    for v in next.vehicles.iter_mut() {
        v.position += v.velocity * dt;
    }
    next.elapsed = state.elapsed + dt;

    let ego_before = before[0];
    let ego_after = next.vehicles[0];
    let collision = (1..CARS).any(|k| {
        before[k].lane == ego_before.lane
            && swept_overlap(
                before[k].position - ego_before.position,
                next.vehicles[k].position - ego_after.position,
                cfg.car_length,
            )
    });

    let outcome = StepOutcome {
        collision,
        arrived: !collision && ego_after.position >= cfg.distance,
        timeout: !collision && ego_after.position < cfg.distance && next.elapsed >= cfg.timeout - 1e-9,
    };
    next.terminal = outcome.terminal();
    Ok((next, outcome))
}

/// Fixed-layout observation vector.
///
/// `[0, 5)` ego lane one-hot, `[5, 14)` all velocities over `v_max`,
/// `[14, 22)` neighbour-minus-ego longitudinal distance clipped to
/// `±DISTANCE_CLIP` and divided by it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn lane_block(&self) -> &[f64] {
        &self.0[..LANES]
    }

    pub fn velocity_block(&self) -> &[f64] {
        &self.0[LANES..LANES + CARS]
    }

    pub fn distance_block(&self) -> &[f64] {
        &self.0[LANES + CARS..]
    }
}

pub fn observe(state: &WorldState, v_max: f64) -> Observation {
    let mut obs = [0.0; OBS_DIM];
    let ego = state.ego();
    obs[ego.lane] = 1.0;
    for (k, v) in state.vehicles.iter().enumerate() {
        obs[LANES + k] = v.velocity / v_max;
    }
    for (k, n) in state.neighbours().iter().enumerate() {
        let gap = (n.position - ego.position).clamp(-DISTANCE_CLIP, DISTANCE_CLIP);
        obs[LANES + CARS + k] = gap / DISTANCE_CLIP;
    }
    Observation(obs)
}

/// Per-step reward: speed term `(v - v_max/2) / v_max` plus the safety
/// term for a collision or arrival occurring on this step.
pub fn reward(state: &WorldState, outcome: &StepOutcome, cfg: &RewardConfig) -> f64 {
    let v = state.ego().velocity;
    let r_v = (v - cfg.v_max / 2.0) / cfg.v_max;
    let mut r_safety = 0.0;
    if outcome.collision {
        r_safety += cfg.r_collision;
    }
    if outcome.arrived {
        r_safety += cfg.r_arrive;
    }
    r_v + r_safety
}
