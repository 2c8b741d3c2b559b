//! Command-line entry point and run-directory layout.
//!
//! A run directory looks like:
//!
//! ```text
//! <out>/config.resolved.toml      resolved config, defaults applied
//! <out>/metrics.jsonl             one record per episode
//! <out>/bounds_trace.csv          episode_index,param_index,lower,upper
//! <out>/lambda_samples.csv        episode_index,v0..v8
//! <out>/snapshots/<tag>/weights.qnet
//! <out>/snapshots/<tag>/bounds.csv
//! <out>/grid.csv                  written by `grid`
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{self, EnvSnapshot, GRID_FILE};
use crate::train::{
    self, RunConfig, Snapshot, BOUNDS_FILE, BOUNDS_HEADER, CONFIG_FILE, DR_TAG, METRICS_FILE,
    SAMPLES_FILE, SNAPSHOT_DIR,
};

/// Report lines go to stdout; a closed pipe (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! say_raw {
    ($($arg:tt)*) => {{
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "adr-highway", version, about = "Adaptive-curriculum DQN training on a highway scenario")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent with the adaptive scenario generator.
    Train(TrainArgs),
    /// Train fixed-distribution agents on snapshot environments and
    /// evaluate every agent in every environment.
    Grid(GridArgs),
    /// Re-emit the bounds trace and velocity-sample CSVs of a run.
    Export(ExportArgs),
    /// Parse and validate a config, printing it with defaults applied.
    ValidateConfig(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; built-in defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Comma-separated milestone tags, e.g. `easy,mid,hard`.
    #[arg(long, value_delimiter = ',')]
    pub snapshot_tags: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory holding `<tag>/weights.qnet` and `<tag>/bounds.csv`.
    #[arg(long)]
    pub snapshots: PathBuf,
    /// Where `grid.csv` goes; defaults to the parent of `--snapshots`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Destination; defaults to `<run>/export`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// Reads a TOML config. Unknown keys are rejected and every omitted key takes
/// its default.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => parse_config(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    Ok(toml::from_str(text)?)
}

pub fn render_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::format("config", e.to_string()))
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(n) = self.episodes {
            cfg.run.episodes = n;
        }
        if let Some(tags) = &self.snapshot_tags {
            cfg.run.snapshot_tags = tags.clone();
        }
    }
}

/// Fixed file names inside a run directory.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn bounds_trace(&self) -> PathBuf {
        self.root.join(BOUNDS_FILE)
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join(SAMPLES_FILE)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn snapshots(&self) -> PathBuf {
        self.root.join(SNAPSHOT_DIR)
    }

    pub fn grid(&self) -> PathBuf {
        self.root.join(GRID_FILE)
    }

    /// Creates the directory. An existing non-empty directory is an error
    /// unless `force`, in which case it is emptied first.
    pub fn prepare(&self, force: bool) -> Result<()> {
        if self.root.exists() && fs::read_dir(&self.root)?.next().is_some() {
            if !force {
                return Err(Error::OutputExists(self.root.clone()));
            }
            fs::remove_dir_all(&self.root)?;
        }
        fs::create_dir_all(&self.root)?;
        Ok(())
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.config.as_deref())?;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;

    let layout = OutputLayout::new(&args.out);
    layout.prepare(args.force)?;
    fs::write(layout.config(), render_config(&cfg)?)?;

    let run = train::run_training(&cfg)?;
    run.log.write_to(&layout.root)?;

    let n = run.log.metrics.len();
    let arrived = run
        .log
        .metrics
        .iter()
        .filter(|m| m.outcome == crate::env::Terminal::Arrived)
        .count();
    say!(
        "trained {n} episodes ({arrived} arrived), {} generator decisions, {} gradient steps",
        run.log.updates.len(),
        run.agent.iterations
    );
    for (i, lo, hi) in run.generator.snapshot_bounds() {
        say!("  param {i}: [{lo:.2}, {hi:.2}]");
    }
    say!("outputs in {}", layout.root.display());
    Ok(())
}

pub fn cmd_grid(args: &GridArgs) -> Result<()> {
    let mut cfg = load_config(args.config.config.as_deref())?;
    args.overrides.apply(&mut cfg);
    cfg.validate()?;

    let mut needed = cfg.run.snapshot_tags.clone();
    needed.push(DR_TAG.to_string());
    let mut snapshots = Vec::with_capacity(needed.len());
    for tag in &needed {
        snapshots.push(Snapshot::load(&args.snapshots, tag)?);
    }
    let dr = snapshots.pop().expect("dr snapshot loaded last");
    let envs: Vec<EnvSnapshot> = snapshots
        .iter()
        .map(|s| EnvSnapshot {
            tag: s.tag.clone(),
            bounds: s.bounds.clone(),
        })
        .collect();

    let mut agents = Vec::with_capacity(envs.len() + 1);
    for env in &envs {
        let run = eval::train_fixed(env, &cfg)?;
        agents.push((env.tag.clone(), run.agent.online));
    }
    agents.push((DR_TAG.to_string(), dr.params));

    let grid = eval::build_grid(
        &envs,
        &agents,
        cfg.run.eval_episodes,
        &cfg.env,
        &cfg.generator,
        cfg.run.seed,
    )?;

    let out = match &args.out {
        Some(o) => o.clone(),
        None => args
            .snapshots
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out)?;
    let layout = OutputLayout::new(out);
    fs::write(layout.grid(), grid.to_csv())?;
    say_raw!("{}", grid.render(cfg.run.collision_free_threshold));
    say!("grid written to {}", layout.grid().display());
    Ok(())
}

/// Row counts found while exporting a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportSummary {
    pub episodes: usize,
    pub bounds_rows: usize,
    pub sample_rows: usize,
}

pub fn cmd_export(args: &ExportArgs) -> Result<ExportSummary> {
    let src = OutputLayout::new(&args.run);
    for path in [src.metrics(), src.bounds_trace(), src.samples()] {
        if !path.is_file() {
            return Err(Error::format("run directory", format!("missing {}", path.display())));
        }
    }
    let dims = if src.config().is_file() {
        parse_config(&fs::read_to_string(src.config())?)?
            .generator
            .dims()
    } else {
        crate::env::CARS
    };

    let metrics = fs::read_to_string(src.metrics())?;
    let mut episodes = 0;
    for line in metrics.lines().filter(|l| !l.trim().is_empty()) {
        let m: train::MetricsRecord = serde_json::from_str(line)?;
        if m.episode != episodes {
            return Err(Error::format("metrics log", format!("episode {} out of order", m.episode)));
        }
        episodes += 1;
    }

    let bounds = fs::read_to_string(src.bounds_trace())?;
    let bounds_rows = check_csv(&bounds, BOUNDS_HEADER, 4, "bounds trace")?;
    let samples = fs::read_to_string(src.samples())?;
    let sample_rows = check_csv(&samples, &train::samples_header(), crate::env::CARS + 1, "velocity samples")?;
    if sample_rows != episodes {
        return Err(Error::format(
            "velocity samples",
            format!("{sample_rows} rows for {episodes} episodes"),
        ));
    }
    if bounds_rows != episodes * dims {
        return Err(Error::format(
            "bounds trace",
            format!("{bounds_rows} rows, expected {episodes} episodes x {dims} parameters"),
        ));
    }

    let dst = OutputLayout::new(args.out.clone().unwrap_or_else(|| args.run.join("export")));
    dst.prepare(args.force)?;
    fs::write(dst.bounds_trace(), bounds)?;
    fs::write(dst.samples(), samples)?;
    say!(
        "exported {episodes} episodes: {bounds_rows} bound rows, {sample_rows} sample rows -> {}",
        dst.root.display()
    );
    Ok(ExportSummary {
        episodes,
        bounds_rows,
        sample_rows,
    })
}

/// Checks the header and that every row has `cols` numeric fields; returns
/// the row count.
fn check_csv(text: &str, header: &str, cols: usize, what: &str) -> Result<usize> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::format(what, "unexpected header"));
    }
    let mut rows = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols || fields.iter().any(|f| f.trim().parse::<f64>().is_err()) {
            return Err(Error::format(what, format!("bad row '{line}'")));
        }
        rows += 1;
    }
    Ok(rows)
}

pub fn cmd_validate(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    say_raw!("{}", render_config(&cfg)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Export(a) => cmd_export(&a).map(|_| ()),
        Command::ValidateConfig(a) => cmd_validate(&a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config("[run]\nepisodes = 3\nbogus = 1\n").is_err());
        assert!(parse_config("[nope]\n").is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse_config("[run]\nepisodes = 3\n").unwrap();
        assert_eq!(cfg.run.episodes, 3);
        assert_eq!(cfg.agent.pool_capacity, 2000);
        assert_eq!(cfg.generator.queue_len, 10);
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = RunConfig::default();
        let text = render_config(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn infeasible_reward_is_reported() {
        let cfg = parse_config("[env]\nr_arrive = 5.0\nr_collision = 0.0\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("13.33"), "{err}");
    }
}
