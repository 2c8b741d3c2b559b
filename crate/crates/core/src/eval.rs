//! Cross-environment evaluation: agents trained on frozen snapshot
//! distributions and the adaptively trained agent, each tested greedily in
//! every snapshot environment.

use serde::{Deserialize, Serialize};

use crate::adr::{DistributionState, GeneratorConfig, Range};
use crate::env::{EnvConfig, Terminal};
use crate::error::{Error, Result};
use crate::qnet::NetworkParams;
use crate::train::{self, Curriculum, Driver, EpisodeMode, EpisodeResult, RunConfig, TrainingRun};

pub const GRID_FILE: &str = "grid.csv";
pub const GRID_HEADER: &str = "trained_in,tested_in,avg_speed,collision_free_rate,episodes,seed";

/// A frozen velocity distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub tag: String,
    pub bounds: Vec<Range>,
}

impl EnvSnapshot {
    pub fn distribution(&self, gen: &GeneratorConfig) -> Result<DistributionState> {
        DistributionState::with_ranges(gen, self.bounds.clone())
    }
}

/// Trains a fresh agent with episode sampling only on `env`'s frozen ranges.
pub fn train_fixed(env: &EnvSnapshot, cfg: &RunConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let generator = env.distribution(&cfg.generator)?;
    train::training_loop(cfg, generator, Curriculum::Frozen)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub avg_speed: f64,
    pub collision_free_rate: f64,
    pub episodes: Vec<EpisodeResult>,
}

/// Runs `n` episodes of `driver` on scenarios drawn from `env`.
pub fn evaluate<D: Driver + ?Sized>(
    driver: &mut D,
    env: &EnvSnapshot,
    n: usize,
    env_cfg: &EnvConfig,
    gen_cfg: &GeneratorConfig,
    seed: u64,
) -> Result<EvalSummary> {
    if n == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let dist = env.distribution(gen_cfg)?;
    let mut streams = train::Streams::new(seed);
    let mut episodes = Vec::with_capacity(n);
    for _ in 0..n {
        let sample = dist.episode_sample(&mut streams.scenario);
        episodes.push(train::drive_episode(
            env_cfg,
            driver,
            &sample,
            EpisodeMode::EpisodeSampled,
            &mut streams.agent,
        )?);
    }
    let avg_speed = episodes.iter().map(|e| e.average_speed).sum::<f64>() / n as f64;
    let safe = episodes
        .iter()
        .filter(|e| e.outcome != Terminal::Collided)
        .count();
    Ok(EvalSummary {
        avg_speed,
        collision_free_rate: safe as f64 / n as f64,
        episodes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub trained_in: String,
    pub tested_in: String,
    pub avg_speed: f64,
    pub collision_free_rate: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl GridCell {
    pub fn collision_free(&self, threshold: f64) -> bool {
        self.collision_free_rate >= threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub cells: Vec<GridCell>,
}

impl Grid {
    pub fn cell(&self, trained_in: &str, tested_in: &str) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.trained_in == trained_in && c.tested_in == tested_in)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRID_HEADER}\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:?},{:?},{},{}\n",
                c.trained_in, c.tested_in, c.avg_speed, c.collision_free_rate, c.episodes, c.seed
            ));
        }
        out
    }

    /// Human-readable table: one row per trained agent, one column pair per
    /// test environment.
    pub fn render(&self, threshold: f64) -> String {
        let mut rows: Vec<&str> = Vec::new();
        let mut cols: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !rows.contains(&c.trained_in.as_str()) {
                rows.push(&c.trained_in);
            }
            if !cols.contains(&c.tested_in.as_str()) {
                cols.push(&c.tested_in);
            }
        }
        let mut out = format!("{:<12}", "train\\test");
        for c in &cols {
            out.push_str(&format!(" | {c:>18}"));
        }
        out.push('\n');
        for r in &rows {
            out.push_str(&format!("{r:<12}"));
            for c in &cols {
                match self.cell(r, c) {
                    Some(cell) => {
                        let mark = if cell.collision_free(threshold) { "ok" } else { "x" };
                        out.push_str(&format!(
                            " | {:>6.2} m/s {:>4.2} {:>2}",
                            cell.avg_speed, cell.collision_free_rate, mark
                        ));
                    }
                    None => out.push_str(&format!(" | {:>18}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluation seed for a test environment; shared by every trained agent so
/// all rows face the same scenarios.
pub fn cell_seed(base: u64, tested_index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(1_000 + tested_index as u64)
}

/// Evaluates every `(agent, environment)` pair greedily.
pub fn build_grid(
    envs: &[EnvSnapshot],
    agents: &[(String, NetworkParams)],
    n: usize,
    env_cfg: &EnvConfig,
    gen_cfg: &GeneratorConfig,
    base_seed: u64,
) -> Result<Grid> {
    let mut cells = Vec::with_capacity(envs.len() * agents.len());
    for (tag, params) in agents {
        for (j, env) in envs.iter().enumerate() {
            let seed = cell_seed(base_seed, j);
            let summary = evaluate(&mut train::Greedy(params), env, n, env_cfg, gen_cfg, seed)?;
            cells.push(GridCell {
                trained_in: tag.clone(),
                tested_in: env.tag.clone(),
                avg_speed: summary.avg_speed,
                collision_free_rate: summary.collision_free_rate,
                episodes: n,
                seed,
            });
        }
    }
    Ok(Grid { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Action;
    use crate::train::Scripted;

    fn degenerate(tag: &str, v: f64) -> EnvSnapshot {
        EnvSnapshot {
            tag: tag.into(),
            bounds: vec![Range { lower: v, upper: v }; 9],
        }
    }

    #[test]
    fn always_colliding_agent() {
        // brake to a stop in the ego lane; the follower runs into it
        let mut driver = Scripted(|_: &_| Action::Decelerate);
        let s = evaluate(
            &mut driver,
            &degenerate("easy", 10.0),
            5,
            &EnvConfig::default(),
            &GeneratorConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(s.collision_free_rate, 0.0);
    }

    #[test]
    fn constant_speed_agent() {
        let mut driver = Scripted(|_: &_| Action::Noop);
        let s = evaluate(
            &mut driver,
            &degenerate("easy", 10.0),
            5,
            &EnvConfig::default(),
            &GeneratorConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(s.collision_free_rate, 1.0);
        assert_eq!(s.avg_speed, 10.0);
    }

    #[test]
    fn zero_episodes_rejected() {
        let mut driver = Scripted(|_: &_| Action::Noop);
        assert!(evaluate(
            &mut driver,
            &degenerate("easy", 10.0),
            0,
            &EnvConfig::default(),
            &GeneratorConfig::default(),
            1
        )
        .is_err());
    }

    #[test]
    fn csv_layout() {
        let grid = Grid {
            cells: vec![GridCell {
                trained_in: "dr".into(),
                tested_in: "hard".into(),
                avg_speed: 19.5,
                collision_free_rate: 0.97,
                episodes: 100,
                seed: 7,
            }],
        };
        assert_eq!(grid.to_csv(), format!("{GRID_HEADER}\ndr,hard,19.5,0.97,100,7\n"));
        assert!(grid.render(0.95).contains("ok"));
    }
}
