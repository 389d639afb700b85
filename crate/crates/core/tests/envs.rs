use std::collections::BTreeSet;

use ghp_core::envs::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cp(a: f64, l: f64, x: f64) -> CartpoleParams {
    CartpoleParams::new(a, l, x).unwrap()
}

#[test]
fn hanging_pole_is_an_equilibrium() {
    let p = cp(1.0, 0.5, 1.0);
    let mut s = CartpoleState::hanging();
    for _ in 0..200 {
        let (n, _, done) = cartpole_step(&s, 0.0, &p);
        assert!(!done);
        s = n;
    }
    assert!(s.x.abs() < 1e-12 && s.x_dot.abs() < 1e-12 && s.theta_dot.abs() < 1e-12);
    assert!((s.theta - std::f64::consts::PI).abs() < 1e-12);
}

#[test]
fn cartpole_reward_peaks_at_the_goal() {
    let p = cp(1.0, 0.7, 0.0);
    let (s, r, _) = cartpole_step(&CartpoleState::hanging(), 0.0, &p);
    assert_eq!(s.tip_x(0.7), s.x + 0.7 * s.theta.sin());
    assert!(r.abs() < 1e-20);
    let (_, r, _) = cartpole_step(&CartpoleState::hanging(), 0.0, &cp(1.0, 0.7, 0.4));
    assert!(r < 0.0 && (r + 0.16).abs() < 1e-12);
}

#[test]
fn energy_is_conserved_without_forcing() {
    for (theta, l) in [(std::f64::consts::FRAC_PI_2, 0.5), (2.0, 0.7), (0.3, 0.5), (std::f64::consts::PI - 0.4, 0.7)] {
        let p = cp(1.0, l, 0.0);
        let mut s = CartpoleState { x: 0.0, x_dot: 0.3, theta, theta_dot: 0.5 };
        let e0 = s.energy(l);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            s = cartpole_step(&s, 0.0, &p).0;
            worst = worst.max((s.energy(l) - e0).abs() / e0);
        }
        assert!(worst < 0.01, "start θ={theta}, l={l}: relative energy drift {worst}");
    }
}

#[test]
fn cartpole_observation_hides_parameters() {
    let tasks = toy_cartpole_tasks();
    let obs: Vec<Vec<f64>> = tasks.iter().map(|t| EnvInstance::new(t.clone()).reset()).collect();
    assert_eq!(obs[0], obs[1]);
    assert_eq!(obs[0].len(), 5);
    assert_eq!(obs[0], vec![0.0, 0.0, -1.0, std::f64::consts::PI.sin(), 0.0]);
}

#[test]
fn crippled_thruster_is_ignored() {
    let s = PointRobotState { pos: [1.0, -2.0], vel: [0.3, 0.1] };
    for leg in 0..4 {
        let p = PointRobotParams::new(Some(leg), 2).unwrap();
        let mut a = [0.0; 4];
        a[leg] = 0.8;
        assert_eq!(pointrobot_step(&s, &a, &p), pointrobot_step(&s, &[0.0; 4], &p));
    }
}

#[test]
fn point_reward_is_goal_velocity() {
    let p = PointRobotParams::new(None, 0).unwrap();
    // Drag-free start: choose a state whose next velocity is exactly (1, 0).
    let v0 = 1.0 / (1.0 - pointrobot::DT * pointrobot::DRAG);
    let s = PointRobotState { pos: [0.0; 2], vel: [v0, 0.0] };
    let (n, r, done) = pointrobot_step(&s, &[0.0; 4], &p);
    assert!((n.vel[0] - 1.0).abs() < 1e-12);
    assert!((r - 1.0).abs() < 1e-12);
    assert!(!done);
    let perp = PointRobotParams::new(None, 2).unwrap();
    assert!(pointrobot_step(&s, &[0.0; 4], &perp).1.abs() < 1e-12);
}

#[test]
fn leaving_the_arena_ends_the_episode() {
    assert!(pointrobot_terminal(&[10.5, 0.0, 0.0, 0.0]));
    assert!(!pointrobot_terminal(&[7.0, 7.0, 0.0, 0.0]));
    assert!(!early_termination(Family::Cartpole, &[1e9, 0.0, 1.0, 0.0, 0.0]));
    let task = TaskDescriptor { id: 0, params: HiddenParams::PointRobot(PointRobotParams::new(Some(1), 0).unwrap()), split: Split::Train };
    let mut env = EnvInstance::new(task);
    env.reset();
    let mut steps = 0;
    loop {
        let st = env.step(&[1.0, 0.0, -1.0, 0.0]).unwrap();
        steps += 1;
        if st.done || st.truncated {
            assert!(st.done && !st.truncated);
            break;
        }
    }
    assert!(steps < pointrobot::EPISODE_LEN);
    assert!(env.step(&[0.0; 4]).is_err());
}

#[test]
fn termination_agrees_with_the_env_flag() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = PointRobotParams::new(Some(3), 5).unwrap();
    for _ in 0..10_000 {
        let s = PointRobotState {
            pos: [rng.random_range(-11.0..11.0), rng.random_range(-11.0..11.0)],
            vel: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        };
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (n, _, done) = pointrobot_step(&s, &a, &p);
        assert_eq!(done, early_termination(Family::PointRobot, &n.observe()));
    }
}

#[test]
fn episodes_truncate_at_their_length() {
    let mut env = EnvInstance::new(toy_cartpole_tasks()[0].clone());
    env.reset();
    let mut n = 0;
    while !env.step(&[0.3]).unwrap().truncated {
        n += 1;
    }
    assert_eq!(n + 1, cartpole::EPISODE_LEN);
    assert!(env.step(&[0.0, 0.0]).is_err() || env.steps() == cartpole::EPISODE_LEN);
}

#[test]
fn split_counts_and_coverage() {
    for seed in 0..50 {
        let s = make_task_split(Family::PointRobot, seed, 45).unwrap();
        assert_eq!((s.train.len(), s.weak.len(), s.strong.len()), (12, 5, 4));
        let ids: BTreeSet<usize> = s.all().map(|t| t.id).collect();
        assert_eq!(ids.len(), 21);
        let pr = |t: &TaskDescriptor| match t.params {
            HiddenParams::PointRobot(p) => p,
            _ => unreachable!(),
        };
        let legs: BTreeSet<_> = s.train.iter().map(|t| pr(t).crippled.unwrap()).collect();
        let dirs: BTreeSet<_> = s.train.iter().map(|t| pr(t).direction).collect();
        assert_eq!(legs.len(), 4);
        assert_eq!(dirs, [0, 2, 3, 4, 5, 6, 7].into_iter().collect());
        assert!(s.weak.iter().all(|t| pr(t).direction != 1));
        assert!(s.strong.iter().all(|t| pr(t).direction == 1));
        assert!(s.train.iter().all(|t| t.split == Split::Train) && s.weak.iter().all(|t| t.split == Split::Weak));
    }
    assert_eq!(make_task_split(Family::PointRobot, 9, 45).unwrap(), make_task_split(Family::PointRobot, 9, 45).unwrap());
    assert_ne!(make_task_split(Family::PointRobot, 9, 45).unwrap(), make_task_split(Family::PointRobot, 10, 45).unwrap());
    assert!(make_task_split(Family::PointRobot, 9, 30).is_err());
}

#[test]
fn manifest_round_trip() {
    for family in [Family::PointRobot, Family::Cartpole] {
        let s = make_task_split(family, 4, 45).unwrap();
        let text = s.to_manifest();
        assert!(text.starts_with("ghp-task-split v1\n"));
        assert_eq!(TaskSplit::from_manifest(&text).unwrap(), s);
    }
    let s = make_task_split(Family::PointRobot, 4, 45).unwrap().to_manifest();
    assert!(TaskSplit::from_manifest(&s.replace("v1", "v9")).is_err());
    assert!(TaskSplit::from_manifest("").is_err());
    assert!(TaskSplit::from_manifest(&s.replace("direction=90", "direction=91")).is_err());
}

#[test]
fn sampling_from_a_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = make_task_split(Family::PointRobot, 1, 45).unwrap();
    for _ in 0..20 {
        let t = s.sample(Split::Strong, &mut rng).unwrap();
        assert!(s.strong.contains(t));
    }
    let mut empty = s.clone();
    empty.weak.clear();
    assert!(matches!(empty.sample(Split::Weak, &mut rng), Err(ghp_core::Error::Exhausted(_))));
    let toy = toy_cartpole_tasks();
    let lengths: Vec<f64> = toy
        .iter()
        .map(|t| match t.params {
            HiddenParams::Cartpole(p) => p.eta_l,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(lengths, vec![0.5, 0.7]);
}

/// Rotates a state by +90°.
fn rot(s: &PointRobotState) -> PointRobotState {
    PointRobotState { pos: [-s.pos[1], s.pos[0]], vel: [-s.vel[1], s.vel[0]] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn point_robot_is_rotation_equivariant(
        px in -9.0f64..9.0, py in -9.0f64..9.0, vx in -3.0f64..3.0, vy in -3.0f64..3.0,
        a in proptest::collection::vec(-1.0f64..1.0, 4), leg in 0usize..4, dir in 0usize..8,
    ) {
        let s = PointRobotState { pos: [px, py], vel: [vx, vy] };
        let p = PointRobotParams::new(Some(leg), dir).unwrap();
        let (n, r, d) = pointrobot_step(&s, &a, &p);
        // Rotating the body by 90° moves thruster i's command to thruster i+1.
        let ra = [a[3], a[0], a[1], a[2]];
        let rp = PointRobotParams::new(Some((leg + 1) % 4), (dir + 2) % 8).unwrap();
        let (rn, rr, rd) = pointrobot_step(&rot(&s), &ra, &rp);
        let want = rot(&n);
        for k in 0..2 {
            prop_assert!((rn.pos[k] - want.pos[k]).abs() < 1e-12);
            prop_assert!((rn.vel[k] - want.vel[k]).abs() < 1e-12);
        }
        prop_assert!((rr - r).abs() < 1e-12);
        prop_assert_eq!(rd, d);
    }

    #[test]
    fn steps_stay_finite(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in toy_cartpole_tasks().into_iter().chain(make_task_split(Family::PointRobot, seed, 45).unwrap().train) {
            let mut env = EnvInstance::new(t);
            env.reset();
            let ad = env.family().action_dim();
            loop {
                let a: Vec<f64> = (0..ad).map(|_| rng.random_range(-1.0..1.0)).collect();
                let st = env.step(&a).unwrap();
                prop_assert!(st.obs.iter().all(|v| v.is_finite()) && st.reward.is_finite());
                if st.done || st.truncated { break; }
            }
        }
    }

    #[test]
    fn observations_share_layout_across_tasks(seed in 0u64..100) {
        let split = make_task_split(Family::PointRobot, seed, 45).unwrap();
        let first: Vec<Vec<f64>> = split.all().map(|t| EnvInstance::new(t.clone()).reset()).collect();
        prop_assert!(first.windows(2).all(|w| w[0] == w[1]));
    }
}
