//! The training loop: the generator proposes scenarios, the agent drives
//! them and learns, and boundary-sampled episodes feed their performance
//! back into the generator.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adr::{
    BoundaryId, DistributionState, GeneratorConfig, PerformanceSignal, Range, Side, UpdateAction,
    UpdateEvent,
};
use crate::agent::{argmax, AgentConfig, DqnAgent, TrainSchedule, TrainStep, Transition};
use crate::env::{self, Action, EnvConfig, Observation, ScenarioSample, Terminal, CARS};
use crate::error::{Error, Result};
use crate::qnet::{self, NetworkParams};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BOUNDS_FILE: &str = "bounds_trace.csv";
pub const SAMPLES_FILE: &str = "lambda_samples.csv";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const WEIGHTS_FILE: &str = "weights.qnet";
pub const SNAPSHOT_BOUNDS_FILE: &str = "bounds.csv";

pub const BOUNDS_HEADER: &str = "episode_index,param_index,lower,upper";
pub const SNAPSHOT_BOUNDS_HEADER: &str = "param_index,lower,upper";

/// Tag under which the final adaptively trained agent is stored.
pub const DR_TAG: &str = "dr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub episodes: usize,
    pub seed: u64,
    /// Fractions of `episodes` at which snapshots are taken.
    pub milestones: Vec<f64>,
    /// One tag per milestone.
    pub snapshot_tags: Vec<String>,
    /// Push boundary-sampled transitions into replay and train on them.
    pub train_on_boundary: bool,
    /// Explore (epsilon-greedy) during boundary-sampled episodes. Off means
    /// they act greedily, so the generator sees the current policy's
    /// performance rather than exploration noise.
    pub explore_on_boundary: bool,
    /// Greedy evaluation episodes per grid cell.
    pub eval_episodes: usize,
    /// Collision-free rate at or above which a grid cell counts as safe.
    pub collision_free_threshold: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            seed: 0,
            milestones: vec![0.0, 0.25, 1.0],
            snapshot_tags: vec!["easy".into(), "mid".into(), "hard".into()],
            train_on_boundary: true,
            explore_on_boundary: false,
            eval_episodes: 100,
            collision_free_threshold: 0.95,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub generator: GeneratorConfig,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.generator.validate()?;
        if self.generator.min_bound < self.env.min_velocity
            || self.generator.max_bound > self.env.max_velocity
        {
            return Err(Error::InvalidConfig(
                "generator bounds must lie inside the env velocity range".into(),
            ));
        }
        let run = &self.run;
        if run.milestones.len() != run.snapshot_tags.len() {
            return Err(Error::InvalidConfig(
                "run.milestones and run.snapshot_tags must have equal length".into(),
            ));
        }
        if run.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidConfig("run.milestones must lie in [0, 1]".into()));
        }
        let mut tags = run.snapshot_tags.clone();
        tags.push(DR_TAG.into());
        tags.sort();
        tags.dedup();
        if tags.len() != run.snapshot_tags.len() + 1
            || run.snapshot_tags.iter().any(|t| t.is_empty() || t.contains(['/', '\\', ',']))
        {
            return Err(Error::InvalidConfig(format!(
                "run.snapshot_tags must be distinct plain names other than '{DR_TAG}'"
            )));
        }
        if run.eval_episodes == 0 {
            return Err(Error::InvalidConfig("run.eval_episodes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&run.collision_free_threshold) {
            return Err(Error::InvalidConfig(
                "run.collision_free_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Episode index before which each milestone snapshot is taken
    /// (`episodes` means after the last one).
    pub fn milestone_episodes(&self) -> Vec<usize> {
        self.run
            .milestones
            .iter()
            .map(|f| ((f * self.run.episodes as f64).round() as usize).min(self.run.episodes))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeMode {
    EpisodeSampled,
    BoundarySampled(BoundaryId),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

impl LossStats {
    fn from_losses(losses: &[f64]) -> Self {
        if losses.is_empty() {
            return Self::default();
        }
        Self {
            count: losses.len() as u64,
            mean: Some(losses.iter().sum::<f64>() / losses.len() as f64),
            max: Some(losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub cumulative_reward: f64,
    /// Mean ego velocity over the episode's steps.
    pub average_speed: f64,
    pub outcome: Terminal,
    pub steps: usize,
    pub mode: EpisodeMode,
    pub step_rewards: Vec<f64>,
    pub loss: LossStats,
}

/// Decides actions for an episode and optionally consumes its transitions.
pub trait Driver {
    fn act(&mut self, obs: &Observation, rng: &mut dyn RngCore) -> Result<Action>;

    fn feedback(&mut self, _t: Transition, _rng: &mut dyn RngCore) -> Result<()> {
        Ok(())
    }
}

/// Acts greedily on a fixed set of weights; never learns.
pub struct Greedy<'a>(pub &'a NetworkParams);

impl Driver for Greedy<'_> {
    fn act(&mut self, obs: &Observation, _rng: &mut dyn RngCore) -> Result<Action> {
        let q = qnet::forward(self.0, obs.as_slice())?;
        Ok(Action::from_index(argmax(&q)).expect("argmax is a valid action"))
    }
}

/// A hand-written policy, mainly for tests and baselines.
pub struct Scripted<F>(pub F);

impl<F: FnMut(&Observation) -> Action> Driver for Scripted<F> {
    fn act(&mut self, obs: &Observation, _rng: &mut dyn RngCore) -> Result<Action> {
        Ok((self.0)(obs))
    }
}

/// Epsilon-greedy (or greedy) acting with replay and per-step training.
struct Learner<'a> {
    agent: &'a mut DqnAgent,
    explore: bool,
    losses: Vec<f64>,
    episode: usize,
}

impl Learner<'_> {
    fn train_once(&mut self, rng: &mut dyn RngCore) -> Result<()> {
        if let TrainStep::Trained { loss } = self.agent.train(rng)? {
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    episode: self.episode,
                    iteration: self.agent.iterations,
                });
            }
            self.losses.push(loss);
        }
        Ok(())
    }
}

impl Driver for Learner<'_> {
    fn act(&mut self, obs: &Observation, rng: &mut dyn RngCore) -> Result<Action> {
        let a = if self.explore {
            self.agent.act(obs, rng)?
        } else {
            self.agent.greedy(obs)?
        };
        Ok(Action::from_index(a).expect("agent returns a valid action"))
    }

    fn feedback(&mut self, t: Transition, rng: &mut dyn RngCore) -> Result<()> {
        self.agent.observe(t);
        if self.agent.cfg.train_schedule == TrainSchedule::PerStep {
            self.train_once(rng)?;
        }
        Ok(())
    }
}

/// Rolls one episode to termination with `driver` choosing actions.
///
/// Collisions and arrivals are stored as terminal transitions; a timeout is
/// a time-limit cut, so its last transition still bootstraps.
pub fn drive_episode<D: Driver + ?Sized>(
    env_cfg: &EnvConfig,
    driver: &mut D,
    sample: &ScenarioSample,
    mode: EpisodeMode,
    rng: &mut dyn RngCore,
) -> Result<EpisodeResult> {
    let reward_cfg = env_cfg.reward();
    let mut state = env::build_scenario(sample, env_cfg)?;
    let mut obs = env::observe(&state, env_cfg.v_max);
    let mut step_rewards = Vec::new();
    let mut speed_sum = 0.0;

    let outcome = loop {
        let action = driver.act(&obs, rng)?;
        let (next, outcome) = env::step(&state, action, env_cfg)?;
        let r = env::reward(&next, &outcome, &reward_cfg);
        let next_obs = env::observe(&next, env_cfg.v_max);
        driver.feedback(
            Transition {
                obs,
                action: action.index(),
                reward: r,
                next_obs,
                terminal: outcome.collision || outcome.arrived,
            },
            rng,
        )?;
        step_rewards.push(r);
        speed_sum += next.ego().velocity;
        state = next;
        obs = next_obs;
        if let Some(t) = state.terminal {
            break t;
        }
    };

    let steps = step_rewards.len();
    Ok(EpisodeResult {
        cumulative_reward: step_rewards.iter().sum(),
        average_speed: speed_sum / steps as f64,
        outcome,
        steps,
        mode,
        step_rewards,
        loss: LossStats::default(),
    })
}

/// How the agent takes part in an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Participation {
    /// Epsilon-greedy acting, transitions stored, training runs.
    Explore,
    /// Greedy acting, but transitions are still stored and trained on.
    GreedyLearn,
    /// Greedy acting; the agent is left untouched.
    Evaluate,
}

/// One episode with the agent. Under [`Participation::Evaluate`] nothing
/// about the agent changes.
pub fn run_episode(
    env_cfg: &EnvConfig,
    agent: &mut DqnAgent,
    sample: &ScenarioSample,
    mode: EpisodeMode,
    participation: Participation,
    episode: usize,
    rng: &mut dyn RngCore,
) -> Result<EpisodeResult> {
    if participation == Participation::Evaluate {
        return drive_episode(env_cfg, &mut Greedy(&agent.online), sample, mode, rng);
    }
    let mut learner = Learner {
        agent,
        explore: participation == Participation::Explore,
        losses: Vec::new(),
        episode,
    };
    let mut result = drive_episode(env_cfg, &mut learner, sample, mode, rng)?;
    if learner.agent.cfg.train_schedule == TrainSchedule::PerEpisode {
        learner.train_once(rng)?;
    }
    result.loss = LossStats::from_losses(&learner.losses);
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub episode: usize,
    pub cumulative_reward: f64,
    /// Exploration rate used while acting (0 for greedy episodes).
    pub epsilon: f64,
    /// `"episode"` or `"boundary"`.
    pub mode: String,
    pub boundary_param: Option<usize>,
    pub boundary_side: Option<Side>,
    pub outcome: Terminal,
    pub steps: usize,
    pub average_speed: f64,
    pub loss_mean: Option<f64>,
    pub loss_max: Option<f64>,
    pub train_iterations: u64,
    /// Generator decisions taken because of this episode.
    pub updates: Vec<UpdateAction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub tag: String,
    pub episode: usize,
    pub params: NetworkParams,
    pub bounds: Vec<Range>,
}

pub fn take_snapshot(agent: &DqnAgent, generator: &DistributionState, tag: &str, episode: usize) -> Snapshot {
    Snapshot {
        tag: tag.to_string(),
        episode,
        params: agent.online.clone(),
        bounds: generator.ranges().to_vec(),
    }
}

impl Snapshot {
    /// Writes `<root>/<tag>/weights.qnet` and `<root>/<tag>/bounds.csv`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let dir = root.join(&self.tag);
        fs::create_dir_all(&dir)?;
        let mut w = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
        qnet::write_snapshot(&self.params, &mut w)?;
        w.flush()?;
        let mut b = BufWriter::new(File::create(dir.join(SNAPSHOT_BOUNDS_FILE))?);
        writeln!(b, "{SNAPSHOT_BOUNDS_HEADER}")?;
        for (i, r) in self.bounds.iter().enumerate() {
            writeln!(b, "{i},{:?},{:?}", r.lower, r.upper)?;
        }
        b.flush()?;
        Ok(())
    }

    pub fn load(root: &Path, tag: &str) -> Result<Self> {
        let dir = root.join(tag);
        let weights = dir.join(WEIGHTS_FILE);
        let bounds = dir.join(SNAPSHOT_BOUNDS_FILE);
        if !weights.is_file() || !bounds.is_file() {
            return Err(Error::MissingSnapshot {
                tag: tag.to_string(),
                dir: root.to_path_buf(),
            });
        }
        let params = qnet::read_snapshot(BufReader::new(File::open(weights)?))?;
        Ok(Self {
            tag: tag.to_string(),
            episode: 0,
            params,
            bounds: read_snapshot_bounds(&bounds)?,
        })
    }
}

fn read_snapshot_bounds(path: &Path) -> Result<Vec<Range>> {
    let what = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != SNAPSHOT_BOUNDS_HEADER {
        return Err(Error::format(&what, format!("bad header '{header}'")));
    }
    let mut ranges = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 || cols[0].trim().parse::<usize>().ok() != Some(ranges.len()) {
            return Err(Error::format(&what, format!("bad row '{line}'")));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(&what, format!("bad number '{s}'")))
        };
        ranges.push(Range {
            lower: parse(cols[1])?,
            upper: parse(cols[2])?,
        });
    }
    Ok(ranges)
}

/// Everything a training run produces, in memory.
#[derive(Clone, Debug)]
pub struct RunLog {
    pub metrics: Vec<MetricsRecord>,
    /// `(episode, param, lower, upper)` after each episode.
    pub bounds_trace: Vec<(usize, usize, f64, f64)>,
    /// `(episode, initial velocities)` per episode.
    pub samples: Vec<(usize, ScenarioSample)>,
    pub snapshots: Vec<Snapshot>,
    pub updates: Vec<(usize, UpdateEvent)>,
}

impl RunLog {
    fn new() -> Self {
        Self {
            metrics: Vec::new(),
            bounds_trace: Vec::new(),
            samples: Vec::new(),
            snapshots: Vec::new(),
            updates: Vec::new(),
        }
    }

    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn bounds_csv(&self) -> String {
        let mut out = format!("{BOUNDS_HEADER}\n");
        for (e, i, lo, hi) in &self.bounds_trace {
            out.push_str(&format!("{e},{i},{lo:?},{hi:?}\n"));
        }
        out
    }

    pub fn samples_csv(&self) -> String {
        let mut out = samples_header();
        out.push('\n');
        for (e, s) in &self.samples {
            out.push_str(&e.to_string());
            for v in &s.initial_velocities {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    /// Writes the metrics log, both CSV traces and every snapshot under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), self.metrics_jsonl()?)?;
        fs::write(dir.join(BOUNDS_FILE), self.bounds_csv())?;
        fs::write(dir.join(SAMPLES_FILE), self.samples_csv())?;
        let snaps = dir.join(SNAPSHOT_DIR);
        for s in &self.snapshots {
            s.save(&snaps)?;
        }
        Ok(())
    }
}

pub fn samples_header() -> String {
    let mut h = String::from("episode_index");
    for i in 0..CARS {
        h.push_str(&format!(",v{i}"));
    }
    h
}

pub struct TrainingRun {
    pub agent: DqnAgent,
    pub generator: DistributionState,
    pub log: RunLog,
}

/// Independent RNG streams derived from one seed.
pub(crate) struct Streams {
    pub scenario: ChaCha8Rng,
    pub agent: ChaCha8Rng,
}

impl Streams {
    pub(crate) fn new(seed: u64) -> Self {
        let mut scenario = ChaCha8Rng::seed_from_u64(seed);
        scenario.set_stream(1);
        let mut agent = ChaCha8Rng::seed_from_u64(seed);
        agent.set_stream(2);
        Self { scenario, agent }
    }
}

/// How the loop treats the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Curriculum {
    /// Boundary sampling and range updates enabled.
    Adaptive,
    /// Episode sampling only; the ranges never change.
    Frozen,
    /// Boundary sampling as in an adaptive run, but the ranges never change.
    Held,
}

pub(crate) fn training_loop(
    cfg: &RunConfig,
    mut generator: DistributionState,
    curriculum: Curriculum,
) -> Result<TrainingRun> {
    let mut streams = Streams::new(cfg.run.seed);
    let mut agent = DqnAgent::new(cfg.agent.clone(), cfg.run.seed);
    let mut log = RunLog::new();
    let episodes = cfg.run.episodes;
    let milestones = if curriculum == Curriculum::Adaptive {
        cfg.milestone_episodes()
    } else {
        Vec::new()
    };
    let snap_at = |e: usize, agent: &DqnAgent, g: &DistributionState, log: &mut RunLog| {
        for (m, tag) in milestones.iter().zip(&cfg.run.snapshot_tags) {
            if *m == e {
                log.snapshots.push(take_snapshot(agent, g, tag, e));
            }
        }
    };

    for episode in 0..episodes {
        snap_at(episode, &agent, &generator, &mut log);

        let boundary = curriculum != Curriculum::Frozen
            && streams.scenario.random::<f64>() < cfg.generator.boundary_prob;
        let (sample, mode) = if boundary {
            let (s, id) = generator.boundary_sample(&mut streams.scenario);
            (s, EpisodeMode::BoundarySampled(id))
        } else {
            (generator.episode_sample(&mut streams.scenario), EpisodeMode::EpisodeSampled)
        };

        let participation = match (boundary, cfg.run.train_on_boundary, cfg.run.explore_on_boundary) {
            (false, _, _) | (true, true, true) => Participation::Explore,
            (true, true, false) => Participation::GreedyLearn,
            (true, false, _) => Participation::Evaluate,
        };
        // exploration rate actually used while acting this episode
        let epsilon = if participation == Participation::Explore { agent.epsilon() } else { 0.0 };
        let result = run_episode(&cfg.env, &mut agent, &sample, mode, participation, episode, &mut streams.agent)?;

        let mut updates = Vec::new();
        if let (EpisodeMode::BoundarySampled(id), Curriculum::Adaptive) = (mode, curriculum) {
            let signals: Vec<f64> = match cfg.generator.performance {
                PerformanceSignal::EpisodeReturn => vec![result.cumulative_reward],
                PerformanceSignal::StepReward => result.step_rewards.clone(),
            };
            for p in signals {
                generator.record_performance(id, p)?;
                if let Some(ev) = generator.maybe_update(id) {
                    updates.push(ev.action);
                    log.updates.push((episode, ev));
                }
            }
        }

        let (boundary_param, boundary_side) = match mode {
            EpisodeMode::BoundarySampled(id) => (Some(id.param), Some(id.side)),
            EpisodeMode::EpisodeSampled => (None, None),
        };
        log.metrics.push(MetricsRecord {
            episode,
            cumulative_reward: result.cumulative_reward,
            epsilon,
            mode: if boundary { "boundary" } else { "episode" }.to_string(),
            boundary_param,
            boundary_side,
            outcome: result.outcome,
            steps: result.steps,
            average_speed: result.average_speed,
            loss_mean: result.loss.mean,
            loss_max: result.loss.max,
            train_iterations: agent.iterations,
            updates,
        });
        for (i, lo, hi) in generator.snapshot_bounds() {
            log.bounds_trace.push((episode, i, lo, hi));
        }
        log.samples.push((episode, sample));
    }

    if curriculum == Curriculum::Adaptive {
        snap_at(episodes, &agent, &generator, &mut log);
        log.snapshots.push(take_snapshot(&agent, &generator, DR_TAG, episodes));
    }

    Ok(TrainingRun {
        agent,
        generator,
        log,
    })
}

/// Full adaptive run from the configured initial distribution.
pub fn run_training(cfg: &RunConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let generator = DistributionState::new(&cfg.generator);
    training_loop(cfg, generator, Curriculum::Adaptive)
}

/// Control for an adaptive run: identical loop, seed and episode-mode draws,
/// but the ranges stay at the configured initial distribution.
pub fn run_control(cfg: &RunConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let generator = DistributionState::new(&cfg.generator);
    training_loop(cfg, generator, Curriculum::Held)
}
