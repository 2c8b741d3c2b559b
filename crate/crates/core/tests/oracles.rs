//! Independent oracles for the numeric core: hand-rolled forward pass,
//! straight-line batch loss, closed-form kinematics and reward sums.

use adr_highway::agent::{self, AgentConfig, ReplayPool, TrainStep, Transition};
use adr_highway::env::{
    self, reward, validate_reward_config, Action, EnvConfig, Observation, RewardConfig,
    StepOutcome, VehicleState, WorldState, CARS, OBS_DIM,
};
use adr_highway::qnet::{self, GradientSet, NetworkParams};
use adr_highway::train::{self, EpisodeMode, Scripted};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Layer-by-layer evaluation written without any crate helpers.
fn oracle_forward(p: &NetworkParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = p.layers.len() - 1;
    for (k, layer) in p.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.fan_out];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = layer.biases[j];
            for (i, ai) in a.iter().enumerate() {
                s += ai * layer.weights[i * layer.fan_out + j];
            }
            *zj = if k == last { s } else { s.max(0.0) };
        }
        a = z;
    }
    a
}

fn random_params(rng: &mut ChaCha8Rng) -> NetworkParams {
    let mut p = qnet::init_network(rng.random());
    for b in p.layers.iter_mut().flat_map(|l| l.biases.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    p
}

fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
    let mut o = [0.0; OBS_DIM];
    for v in o.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    Observation(o)
}

#[test]
fn forward_matches_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let p = random_params(&mut rng);
        let obs = random_obs(&mut rng);
        let q = qnet::forward(&p, obs.as_slice()).unwrap();
        let expected = oracle_forward(&p, obs.as_slice());
        for (a, b) in q.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{q:?} vs {expected:?}");
        }
        assert!(q.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn sgd_single_weight_arithmetic() {
    let mut p = NetworkParams::zeros();
    p.layers[0].weights[0] = 1.0;
    let mut g = GradientSet::zeros();
    g.layers[0].weights[0] = 2.0;
    let next = qnet::sgd_step(&p, &g, 0.001).unwrap();
    assert_eq!(next.layers[0].weights[0], 0.998);
    assert_eq!(qnet::sgd_step(&p, &g, 0.0).unwrap(), p);
    assert_eq!(qnet::sgd_step(&p, &GradientSet::zeros(), 0.1).unwrap(), p);
}

#[test]
fn loss_is_monotone_for_small_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let mut p = random_params(&mut rng);
        let obs = random_obs(&mut rng);
        let action = rng.random_range(0..5);
        let target = rng.random_range(-5.0..5.0);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let (loss, g) = qnet::backward(&p, obs.as_slice(), action, target).unwrap();
            assert!(loss <= last + 1e-12, "loss rose from {last} to {loss}");
            last = loss;
            p = qnet::sgd_step(&p, &g, 1e-4).unwrap();
        }
    }
}

#[test]
fn one_iteration_matches_straight_line_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = AgentConfig::default();
    let online = random_params(&mut rng);
    let target = random_params(&mut rng);
    let mut pool = ReplayPool::new(cfg.pool_capacity);
    let mut items = Vec::new();
    for k in 0..32 {
        let t = Transition {
            obs: random_obs(&mut rng),
            action: k % 5,
            reward: rng.random_range(-1.0..1.0),
            next_obs: random_obs(&mut rng),
            terminal: k % 4 == 0,
        };
        items.push(t.clone());
        pool.push(t);
    }

    let seed = 99;
    let indices = pool.sample_indices(32, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut expected = 0.0;
    for &i in &indices {
        let t = &items[i];
        let y = if t.terminal {
            t.reward
        } else {
            let q = oracle_forward(&target, t.next_obs.as_slice());
            t.reward + 0.9 * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        let q = oracle_forward(&online, t.obs.as_slice())[t.action];
        expected += (y - q) * (y - q);
    }
    expected /= 32.0;

    let mut trained = online.clone();
    let step = agent::train_iteration(&mut trained, &target, &pool, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let TrainStep::Trained { loss } = step else { panic!("pool is full enough") };
    assert!((loss - expected).abs() <= 1e-10 * expected.max(1.0), "{loss} vs {expected}");
    assert_ne!(trained, online);
    // every entry moves by at most lr * clip
    let bound = cfg.learning_rate * cfg.grad_clip + 1e-15;
    assert!(trained.values().zip(online.values()).all(|(a, b)| (a - b).abs() <= bound));
}

#[test]
fn terminal_targets_ignore_target_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch: Vec<Transition> = (0..20)
        .map(|_| Transition {
            obs: random_obs(&mut rng),
            action: 0,
            reward: rng.random_range(-20.0..20.0),
            next_obs: random_obs(&mut rng),
            terminal: true,
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let base = agent::td_targets(&refs, &random_params(&mut rng), 0.9).unwrap();
    for _ in 0..10 {
        let mut perturbed = random_params(&mut rng);
        for v in perturbed.values_mut() {
            *v += rng.random_range(-10.0..10.0);
        }
        assert_eq!(agent::td_targets(&refs, &perturbed, 0.9).unwrap(), base);
    }
    assert!(base.iter().zip(&batch).all(|(y, t)| *y == t.reward));
}

/// Ego alone in lane 2 with every neighbour parked far behind.
fn empty_road(ego_velocity: f64) -> WorldState {
    let mut vehicles = [VehicleState { lane: 1, position: -10_000.0, velocity: 0.0 }; CARS];
    vehicles[0] = VehicleState { lane: 2, position: 0.0, velocity: ego_velocity };
    WorldState { vehicles, elapsed: 0.0, terminal: None }
}

fn roll_noop(state: WorldState, cfg: &EnvConfig) -> (Vec<f64>, env::Terminal) {
    let mut state = state;
    let mut rewards = Vec::new();
    loop {
        let (next, outcome) = env::step(&state, Action::Noop, cfg).unwrap();
        rewards.push(reward(&next, &outcome, &cfg.reward()));
        if let Some(t) = next.terminal {
            return (rewards, t);
        }
        state = next;
    }
}

#[test]
fn empty_road_arrival_matches_kinematics() {
    let cfg = EnvConfig::default();
    for &v in &[0.5, 1.0, 2.0, 3.0, 3.25, 3.5, 4.0, 5.0, 10.0, 17.0, 30.0] {
        let (_, outcome) = roll_noop(empty_road(v), &cfg);
        let arrives = v * cfg.timeout >= cfg.distance;
        assert_eq!(outcome == env::Terminal::Arrived, arrives, "v = {v}");
        assert_ne!(outcome, env::Terminal::Collided);
    }
    // exact threshold: 5 m/s for 60 s covers exactly 300 m
    let edge = EnvConfig { distance: 300.0, ..EnvConfig::default() };
    assert_eq!(roll_noop(empty_road(5.0), &edge).1, env::Terminal::Arrived);
    assert_eq!(roll_noop(empty_road(4.75), &edge).1, env::Terminal::Timeout);
}

#[test]
fn full_speed_return_is_half_per_step_plus_arrival() {
    let cfg = EnvConfig::default();
    let (rewards, outcome) = roll_noop(empty_road(cfg.v_max), &cfg);
    assert_eq!(outcome, env::Terminal::Arrived);
    let k = rewards.len();
    assert_eq!(k, (cfg.distance / cfg.v_max).ceil() as usize);
    let total: f64 = rewards.iter().sum();
    assert!((total - (0.5 * k as f64 + cfg.r_arrive)).abs() < 1e-12);

    // same through the episode driver
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut driver = Scripted(|_: &Observation| Action::Noop);
    let sample = env::ScenarioSample::uniform(10.0);
    let r = train::drive_episode(&cfg, &mut driver, &sample, EpisodeMode::EpisodeSampled, &mut rng).unwrap();
    assert!((r.cumulative_reward - r.step_rewards.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn reward_bounds() {
    let rc = EnvConfig::default().reward();
    for i in 0..=300 {
        let v = i as f64 * 0.1;
        let s = empty_road(v);
        let plain = reward(&s, &StepOutcome::default(), &rc);
        assert!((-0.5..=0.5).contains(&plain));
        let crash = reward(&s, &StepOutcome { collision: true, ..Default::default() }, &rc);
        let home = reward(&s, &StepOutcome { arrived: true, ..Default::default() }, &rc);
        assert!((-0.5 + rc.r_collision..=0.5 + rc.r_collision).contains(&crash));
        assert!((-0.5 + rc.r_arrive..=0.5 + rc.r_arrive).contains(&home));
    }
}

/// Every positive-speed profile over `speeds` that first reaches `d` on its
/// last step and takes at most `max_steps` steps.
fn arriving_profiles(speeds: &[f64], d: f64, max_steps: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((profile, pos)) = stack.pop() {
        for &v in speeds {
            let mut p = profile.clone();
            p.push(v);
            if pos + v >= d {
                out.push(p);
            } else if p.len() < max_steps {
                stack.push((p, pos + v));
            }
        }
    }
    out
}

#[test]
fn feasible_rewards_rank_safe_arrival_above_fast_collision() {
    // exactly on the feasibility boundary: margin 4 = 2 * 60 / 30
    let rc = RewardConfig { r_arrive: 2.0, r_collision: -2.0, v_max: 30.0, distance: 60.0 };
    validate_reward_config(&rc).unwrap();
    let horizon = (2.0 * rc.distance / rc.v_max) as usize;
    let speeds = [0.5, 1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
    let step_reward = |v: f64, outcome: StepOutcome| reward(&empty_road(v), &outcome, &rc);

    let arrive_returns: Vec<f64> = arriving_profiles(&speeds, rc.distance, horizon)
        .iter()
        .map(|p| {
            let last = p.len() - 1;
            p.iter()
                .enumerate()
                .map(|(k, &v)| step_reward(v, StepOutcome { arrived: k == last, ..Default::default() }))
                .sum()
        })
        .collect();
    assert!(!arrive_returns.is_empty());

    // full speed throughout, colliding on step k before reaching d
    let collide_returns: Vec<f64> = (1..=horizon)
        .filter(|&k| (k as f64) * rc.v_max < rc.distance)
        .map(|k| {
            (1..=k)
                .map(|j| step_reward(rc.v_max, StepOutcome { collision: j == k, ..Default::default() }))
                .sum()
        })
        .collect();
    assert!(!collide_returns.is_empty());

    let worst_arrival = arrive_returns.iter().copied().fold(f64::INFINITY, f64::min);
    let best_collision = collide_returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(worst_arrival > best_collision, "{worst_arrival} vs {best_collision}");
}
