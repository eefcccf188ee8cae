mod common;

use std::collections::{HashMap, VecDeque};

use adhoc_core::diffreward::{difference_reward, fit_dr_weights, CounterfactualMode, DrSample};
use adhoc_core::env::foraging::{FixedLayout, PlacedObject};
use adhoc_core::env::{Foraging, ForagingConfig, ForagingState, Pursuit, PursuitConfig, STAY};
use adhoc_core::mmdp::{
    rollout, Cell, ConstantPolicy, Environment, JointAction, ObsEncoding, ObsKey, Policy, Rng64, UniformPolicy,
};
use adhoc_core::sfql::{argmax_lowest, enumerate_mdp, sf_bellman_residual, sfql_sweep, sfql_train_teams, SfHyperparams, SfUpdate};
use adhoc_core::{Error, FeatureVector, WeightVector};
use common::ChainEnv;
use rand::{Rng, SeedableRng};

const GAMMA: f64 = 0.95;

fn tiny_foraging() -> Foraging {
    let cfg = ForagingConfig {
        grid_size: 4,
        objects_per_type: 1,
        horizon: 1_000,
        encoding: ObsEncoding::Absolute,
        layout: Some(FixedLayout {
            agents: vec![Cell::new(3, 0), Cell::new(3, 1)],
            objects: vec![
                PlacedObject { cell: Cell::new(0, 0), kind: 0 },
                PlacedObject { cell: Cell::new(0, 3), kind: 1 },
                PlacedObject { cell: Cell::new(3, 3), kind: 2 },
            ],
        }),
        ..ForagingConfig::default()
    };
    Foraging::new(cfg).unwrap()
}

type Full = (Vec<Cell>, Vec<u8>);

fn full(s: &ForagingState) -> Full {
    (s.agents.clone(), s.grid.clone())
}

/// Reachable states by breadth-first search over real transitions, with the
/// teammate standing still, plus value iteration on r = φ·w.
struct Oracle {
    states: Vec<ForagingState>,
    next: Vec<Vec<(usize, FeatureVector, bool)>>,
    q: Vec<Vec<f64>>,
}

fn value_iteration(env: &Foraging, w: &WeightVector) -> Oracle {
    let start = env.reset(&mut Rng64::seed_from_u64(0)).unwrap();
    let mut index: HashMap<Full, usize> = HashMap::from([(full(&start), 0)]);
    let mut states = vec![start];
    let mut next: Vec<Vec<(usize, FeatureVector, bool)>> = vec![Vec::new()];
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        if env.is_terminal(&states[i]) {
            continue;
        }
        for a in 0..env.n_actions() {
            let out = env.step(&states[i], &JointAction(vec![a, STAY])).unwrap();
            let j = *index.entry(full(&out.next_state)).or_insert_with(|| {
                states.push(out.next_state.clone());
                next.push(Vec::new());
                queue.push_back(states.len() - 1);
                states.len() - 1
            });
            next[i].push((j, out.features, out.terminal));
        }
    }
    let n_actions = env.n_actions();
    let mut q = vec![vec![0.0; n_actions]; states.len()];
    loop {
        let mut change: f64 = 0.0;
        for s in 0..states.len() {
            for (a, (j, phi, terminal)) in next[s].iter().enumerate() {
                let boot = if *terminal { 0.0 } else { q[*j].iter().cloned().fold(f64::MIN, f64::max) };
                let v = phi.reward(w) + GAMMA * boot;
                change = change.max((v - q[s][a]).abs());
                q[s][a] = v;
            }
        }
        if change < 1e-14 {
            break;
        }
    }
    Oracle { states, next, q }
}

#[test]
fn exhaustive_sweep_matches_value_iteration() {
    let env = tiny_foraging();
    let w = WeightVector(vec![1.0, 1.0, 1.0]);
    let oracle = value_iteration(&env, &w);
    assert!(oracle.states.len() <= 500, "{} states", oracle.states.len());

    let mate = ConstantPolicy(STAY);
    let start = env.reset(&mut Rng64::seed_from_u64(0)).unwrap();
    let mdp = enumerate_mdp(&env, &[start], &[&mate as &dyn Policy<Foraging>], ObsEncoding::Absolute).unwrap();
    assert_eq!(mdp.n_states(), oracle.states.len());
    let (policy, sweeps) = sfql_sweep(&mdp, env.n_actions(), &w, GAMMA, 1.0, 1e-12, 10_000, ObsEncoding::Absolute).unwrap();
    assert!(sweeps > 1);
    assert!(sf_bellman_residual(&policy, &mdp) < 1e-6);

    for (s, state) in oracle.states.iter().enumerate() {
        let key = env.encode(state, 0, ObsEncoding::Absolute);
        for (a, q) in oracle.q[s].iter().enumerate() {
            if oracle.next[s].is_empty() {
                continue;
            }
            let psi_w = w.dot(&policy.sf.psi(&key, a));
            assert!((psi_w - q).abs() < 1e-6, "state {s} action {a}: {psi_w} vs {q}");
        }
    }
}

#[test]
fn swept_features_match_policy_evaluation() {
    let env = tiny_foraging();
    let w = WeightVector(vec![1.0, -0.5, 0.25]);
    let oracle = value_iteration(&env, &w);
    let mate = ConstantPolicy(STAY);
    let start = env.reset(&mut Rng64::seed_from_u64(0)).unwrap();
    let mdp = enumerate_mdp(&env, &[start], &[&mate as &dyn Policy<Foraging>], ObsEncoding::Absolute).unwrap();
    let (policy, _) = sfql_sweep(&mdp, env.n_actions(), &w, GAMMA, 1.0, 1e-12, 10_000, ObsEncoding::Absolute).unwrap();

    // ψ^π for the swept greedy policy, evaluated feature by feature
    let keys: Vec<ObsKey> = oracle.states.iter().map(|s| env.encode(s, 0, ObsEncoding::Absolute)).collect();
    let pi: Vec<usize> = keys.iter().map(|k| policy.greedy_action(k)).collect();
    let n = oracle.states.len();
    let mut psi = vec![vec![vec![0.0; 3]; env.n_actions()]; n];
    loop {
        let mut change: f64 = 0.0;
        for s in 0..n {
            for (a, (j, phi, terminal)) in oracle.next[s].iter().enumerate() {
                for k in 0..3 {
                    let boot = if *terminal { 0.0 } else { psi[*j][pi[*j]][k] };
                    let v = phi[k] + GAMMA * boot;
                    change = change.max((v - psi[s][a][k]).abs());
                    psi[s][a][k] = v;
                }
            }
        }
        if change < 1e-14 {
            break;
        }
    }
    for (s, key) in keys.iter().enumerate() {
        for (a, want) in psi[s].iter().enumerate().take(oracle.next[s].len()) {
            let got = policy.sf.psi(key, a);
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn chain_successor_features_have_closed_form() {
    let env = ChainEnv::new(6, 100);
    let mate = ConstantPolicy(common::STAY);
    let start = env.reset(&mut Rng64::seed_from_u64(0)).unwrap();
    let mdp = enumerate_mdp(&env, &[start], &[&mate as &dyn Policy<ChainEnv>], ObsEncoding::Absolute).unwrap();
    let w = env.weight.clone();
    let (policy, _) = sfql_sweep(&mdp, 3, &w, GAMMA, 1.0, 1e-13, 10_000, ObsEncoding::Absolute).unwrap();
    for p in 0..5usize {
        let key = ObsKey(vec![p as u8, 0]);
        let psi = policy.sf.psi(&key, common::RIGHT);
        // the goal is reached after 5 - p moves; its feature is discounted by the moves before it
        let expected = GAMMA.powi(4 - p as i32);
        assert!((psi[0] - expected).abs() < 1e-9, "p={p}: {} vs {expected}", psi[0]);
        assert_eq!(psi[1], 0.0);
        assert_eq!(policy.greedy_action(&key), common::RIGHT);
    }
}

#[test]
fn horizon_truncation_still_bootstraps() {
    let env = ChainEnv::new(6, 3);
    let stay = ConstantPolicy(common::STAY);
    let log = rollout(&env, &stay, &[&stay], &mut Rng64::seed_from_u64(0), 10).unwrap();
    let last = log.transitions.last().unwrap();
    assert_eq!(log.len(), 3);
    assert!(last.terminal && last.truncated);

    let right = ConstantPolicy(common::RIGHT);
    let env = ChainEnv::new(3, 50);
    let log = rollout(&env, &right, &[&stay], &mut Rng64::seed_from_u64(0), 50).unwrap();
    let last = log.transitions.last().unwrap();
    assert_eq!(log.len(), 2);
    assert!(last.terminal && !last.truncated);
}

#[test]
fn scalar_q_and_successor_features_move_in_lockstep() {
    let env = Foraging::new(ForagingConfig { encoding: ObsEncoding::Absolute, ..ForagingConfig::reduced(5, 1) }).unwrap();
    let w = WeightVector(vec![1.0, 0.5, -0.25]);
    let hp = SfHyperparams { learning_rate: 0.3, epsilon: 0.3, total_timesteps: 30_000, ..SfHyperparams::default() };
    let mate = UniformPolicy;
    let n_actions = env.n_actions();
    let mut q: HashMap<ObsKey, Vec<f64>> = HashMap::new();
    let mut observe = |u: &SfUpdate| {
        let next = q.get(&u.next_key).cloned().unwrap_or_else(|| vec![0.0; n_actions]);
        let boot = if u.bootstrap { next[argmax_lowest(&next)] } else { 0.0 };
        let row = q.entry(u.key.clone()).or_insert_with(|| vec![0.0; n_actions]);
        row[u.action] += hp.learning_rate * (u.features.reward(&w) + GAMMA * boot - row[u.action]);
    };
    let teams = [vec![&mate as &dyn Policy<Foraging>]];
    let (policy, report) =
        sfql_train_teams(&env, &teams, &w, &hp, ObsEncoding::Absolute, &mut Rng64::seed_from_u64(9), Some(&mut observe)).unwrap();
    assert_eq!(report.steps, 30_000);
    assert!(q.len() > 100);
    let mut worst: f64 = 0.0;
    for (key, row) in &q {
        for (a, v) in row.iter().enumerate() {
            worst = worst.max((w.dot(&policy.sf.psi(key, a)) - v).abs());
        }
    }
    assert!(worst <= 1e-9, "max |ψ·w − Q| = {worst}");
}

#[test]
fn least_squares_recovers_exactly_linear_rewards() {
    let mut rng = Rng64::seed_from_u64(4);
    for d in [1usize, 3, 4] {
        let truth: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let samples: Vec<DrSample> = (0..200)
            .map(|_| {
                let phi: Vec<f64> = (0..d).map(|_| f64::from(rng.gen_range(0u8..3))).collect();
                let dr = phi.iter().zip(&truth).map(|(a, b)| a * b).sum();
                DrSample { features: FeatureVector(phi), dr }
            })
            .collect();
        let fit = fit_dr_weights(&samples).unwrap();
        assert_eq!(fit.rank, d);
        for (got, want) in fit.weights.as_slice().iter().zip(&truth) {
            assert!((got - want).abs() < 1e-9, "d={d}: {got} vs {want}");
        }
        assert!(fit.residual_rms < 1e-9);
    }
}

/// Mean team reward over every learner action, by explicit re-simulation.
fn brute_force_dr<E: Environment>(env: &E, state: &E::State, joint: &JointAction, reward: f64) -> f64 {
    let mut total = 0.0;
    for b in 0..env.n_actions() {
        let mut cf = joint.0.clone();
        cf[0] = b;
        total += env.step(&state.clone(), &JointAction(cf)).unwrap().reward;
    }
    reward - total / env.n_actions() as f64
}

fn check_dr_against_brute_force<E: Environment>(env: &E, seed: u64) -> usize {
    let mut rng = Rng64::seed_from_u64(seed);
    let mut checked = 0;
    for _ in 0..30 {
        let mut state = env.reset(&mut rng).unwrap();
        while !env.is_terminal(&state) {
            let joint = JointAction((0..env.n_agents()).map(|_| rng.gen_range(0..env.n_actions())).collect());
            let out = env.step(&state, &joint).unwrap();
            let got = difference_reward(env, &state, &joint, &out.next_state, out.reward, 0, CounterfactualMode::Resimulate).unwrap();
            let want = brute_force_dr(env, &state, &joint, out.reward);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            checked += 1;
            state = out.next_state;
        }
    }
    checked
}

#[test]
fn difference_reward_matches_brute_force_counterfactuals() {
    let foraging = Foraging::new(ForagingConfig::reduced(4, 1)).unwrap();
    assert!(check_dr_against_brute_force(&foraging, 1) > 100);
    let pursuit = Pursuit::new(PursuitConfig::with_grid(5)).unwrap();
    assert!(check_dr_against_brute_force(&pursuit, 2) > 100);
}

#[test]
fn difference_reward_needs_a_forkable_environment() {
    let mut env = ChainEnv::new(4, 10);
    env.forkable = false;
    let s = env.reset(&mut Rng64::seed_from_u64(0)).unwrap();
    let joint = JointAction(vec![common::RIGHT, common::STAY]);
    let out = env.step(&s, &joint).unwrap();
    let err = difference_reward(&env, &s, &joint, &out.next_state, out.reward, 0, CounterfactualMode::Resimulate);
    assert!(matches!(err, Err(Error::Capability(_))));
    let terminal = adhoc_core::mmdp::Environment::step(&ChainEnv::new(2, 10), &s, &joint).unwrap().next_state;
    let err = difference_reward(&ChainEnv::new(2, 10), &terminal, &joint, &terminal, 0.0, 0, CounterfactualMode::Resimulate);
    assert!(matches!(err, Err(Error::State(_))));
}
