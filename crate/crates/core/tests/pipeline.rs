//! Training-loop and evaluation behaviour on short runs.

use std::collections::HashMap;

use adr_highway::adr::{BoundaryId, DistributionState, GeneratorConfig, Range};
use adr_highway::env::{Action, Observation, Terminal, CARS};
use adr_highway::eval::{self, EnvSnapshot};
use adr_highway::qnet;
use adr_highway::train::{self, EpisodeMode, RunConfig, Scripted, Snapshot};

fn cfg(episodes: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.run.episodes = episodes;
    c.run.seed = seed;
    c
}

fn wide(tag: &str) -> EnvSnapshot {
    EnvSnapshot { tag: tag.into(), bounds: vec![Range { lower: 5.0, upper: 15.0 }; CARS] }
}

#[test]
fn episode_conservation_and_queue_plumbing() {
    let c = cfg(400, 3);
    let run = train::run_training(&c).unwrap();
    let m = &run.log.metrics;
    assert_eq!(m.len(), 400);
    assert!(m.iter().enumerate().all(|(i, r)| r.episode == i));
    let boundary = m.iter().filter(|r| r.mode == "boundary").count();
    let episode = m.iter().filter(|r| r.mode == "episode").count();
    assert_eq!(boundary + episode, 400);
    assert!(boundary > 0 && episode > 0);

    // every boundary episode leaves exactly one queue entry behind, either
    // still queued or consumed by a decision of `queue_len` entries
    let mut per_boundary: HashMap<BoundaryId, usize> = HashMap::new();
    for r in m.iter().filter(|r| r.mode == "boundary") {
        let id = BoundaryId::new(r.boundary_param.unwrap(), r.boundary_side.unwrap());
        *per_boundary.entry(id).or_default() += 1;
    }
    let mut decisions: HashMap<BoundaryId, usize> = HashMap::new();
    for (_, ev) in &run.log.updates {
        *decisions.entry(ev.boundary).or_default() += 1;
    }
    for (id, n) in per_boundary {
        let queued = run.generator.boundary(id).queue.len();
        let consumed = decisions.get(&id).copied().unwrap_or(0) * c.generator.queue_len;
        assert_eq!(queued + consumed, n, "{id:?}");
    }

    assert_eq!(run.log.bounds_trace.len(), 400 * CARS);
    assert_eq!(run.log.samples.len(), 400);
    let csv = run.log.bounds_csv();
    assert_eq!(csv.lines().count(), 1 + 400 * CARS);
    assert_eq!(run.log.samples_csv().lines().count(), 401);
}

#[test]
fn seeded_runs_are_identical() {
    let a = train::run_training(&cfg(150, 9)).unwrap();
    let b = train::run_training(&cfg(150, 9)).unwrap();
    assert_eq!(a.log.metrics_jsonl().unwrap(), b.log.metrics_jsonl().unwrap());
    assert_eq!(a.log.bounds_csv(), b.log.bounds_csv());
    assert_eq!(a.agent.online, b.agent.online);
    let c = train::run_training(&cfg(150, 10)).unwrap();
    assert_ne!(a.log.metrics_jsonl().unwrap(), c.log.metrics_jsonl().unwrap());
}

#[test]
fn frozen_degenerate_bounds_repeat_the_same_scenario() {
    let env = EnvSnapshot { tag: "easy".into(), bounds: vec![Range { lower: 12.0, upper: 12.0 }; CARS] };
    let run = eval::train_fixed(&env, &cfg(50, 1)).unwrap();
    assert!(run.log.samples.iter().all(|(_, s)| s.initial_velocities == [12.0; CARS]));
    assert!(run.log.metrics.iter().all(|r| r.mode == "episode"));
    assert!(run.log.updates.is_empty());
    assert_eq!(run.generator.ranges(), env.bounds.as_slice());
}

#[test]
fn milestone_snapshots() {
    let c = cfg(40, 2);
    let run = train::run_training(&c).unwrap();
    let tags: Vec<(&str, usize)> = run.log.snapshots.iter().map(|s| (s.tag.as_str(), s.episode)).collect();
    assert_eq!(tags, vec![("easy", 0), ("mid", 10), ("hard", 40), ("dr", 40)]);
    let initial = DistributionState::new(&c.generator).ranges().to_vec();
    assert_eq!(run.log.snapshots[0].bounds, initial);
    assert_eq!(run.log.snapshots[0].params, qnet::init_network(c.run.seed));
    assert_eq!(run.log.snapshots[3].params, run.agent.online);
}

#[test]
fn snapshot_reload_reproduces_outputs() {
    let run = train::run_training(&cfg(60, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let snap = run.log.snapshots.last().unwrap();
    snap.save(dir.path()).unwrap();
    let back = Snapshot::load(dir.path(), &snap.tag).unwrap();
    assert_eq!(back.bounds, snap.bounds);
    let probe = [0.3; 22];
    assert_eq!(qnet::forward(&back.params, &probe).unwrap(), qnet::forward(&snap.params, &probe).unwrap());
    assert!(matches!(
        Snapshot::load(dir.path(), "absent"),
        Err(adr_highway::Error::MissingSnapshot { .. })
    ));
}

#[test]
fn collision_free_rate_matches_recount() {
    let params = qnet::init_network(8);
    let gen = GeneratorConfig::default();
    let env_cfg = Default::default();
    let summary = eval::evaluate(&mut train::Greedy(&params), &wide("w"), 10, &env_cfg, &gen, 5).unwrap();
    assert_eq!(summary.episodes.len(), 10);
    let safe = summary.episodes.iter().filter(|e| e.outcome != Terminal::Collided).count();
    assert_eq!(summary.collision_free_rate, safe as f64 / 10.0);
    let speed = summary.episodes.iter().map(|e| e.average_speed).sum::<f64>() / 10.0;
    assert!((summary.avg_speed - speed).abs() < 1e-12);
    assert!(summary.episodes.iter().all(|e| e.mode == EpisodeMode::EpisodeSampled));
}

#[test]
fn constant_speed_agent_reports_its_speed() {
    let mut driver = Scripted(|_: &Observation| Action::Noop);
    let env = EnvSnapshot { tag: "e".into(), bounds: vec![Range { lower: 13.0, upper: 13.0 }; CARS] };
    let s = eval::evaluate(&mut driver, &env, 100, &Default::default(), &GeneratorConfig::default(), 0).unwrap();
    assert_eq!(s.collision_free_rate, 1.0);
    assert_eq!(s.avg_speed, 13.0);
}

#[test]
fn grid_is_complete_and_repeatable() {
    let envs = vec![
        EnvSnapshot { tag: "easy".into(), bounds: vec![Range { lower: 10.0, upper: 10.0 }; CARS] },
        EnvSnapshot { tag: "mid".into(), bounds: vec![Range { lower: 8.0, upper: 12.0 }; CARS] },
        wide("hard"),
    ];
    let agents: Vec<(String, _)> = ["easy", "mid", "hard", "dr"]
        .iter()
        .enumerate()
        .map(|(k, t)| (t.to_string(), qnet::init_network(k as u64)))
        .collect();
    let c = RunConfig::default();
    let build = || eval::build_grid(&envs, &agents, 20, &c.env, &c.generator, 3).unwrap();
    let g = build();
    assert_eq!(g.cells.len(), 12);
    for a in ["easy", "mid", "hard", "dr"] {
        for e in ["easy", "mid", "hard"] {
            let cell = g.cell(a, e).unwrap();
            assert!((0.0..=1.0).contains(&cell.collision_free_rate));
            assert!((0.0..=c.env.v_max).contains(&cell.avg_speed));
            assert_eq!(cell.episodes, 20);
        }
    }
    // the per-cell seed depends only on the tested environment
    for e in ["easy", "mid", "hard"] {
        let seeds: Vec<u64> = g.cells.iter().filter(|c| c.tested_in == e).map(|c| c.seed).collect();
        assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    }
    assert_eq!(g, build());
    assert_eq!(g.to_csv().lines().count(), 13);
}
