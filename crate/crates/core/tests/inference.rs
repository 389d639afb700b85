//! Latent posteriors and variational objectives against closed forms,
//! finite differences and synthetic tasks.

use std::collections::BTreeMap;

use ghp_core::gradcore::{Array, Graph};
use ghp_core::latent::{FactorKind, FactorSpec, LatentLayout, TaskPosterior};
use ghp_core::models::{unbound_log_var, LOG_VAR_MAX, LOG_VAR_MIN};
use ghp_core::objective::{
    elbo_loss, loss_joint, loss_structured, minibatch_kl_scales, testtime_inference_step, train_phase, InferenceConfig,
    LossOptions, ModelShape, TaskData, TrainConfig, WorldModel,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, sd: usize, ad: usize) -> TaskData<f64> {
    let mut u = |k: usize| Array::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let (s, a, sn, r) = (u(sd), u(ad), u(sd), u(1));
    TaskData::new(s, a, sn, r).unwrap()
}

/// Randomizes every parameter so no gradient is trivially zero.
fn scramble(model: &mut WorldModel<f64>, rng: &mut ChaCha8Rng) {
    scramble_ensemble(model.dynamics_mut(), rng);
    scramble_ensemble(model.reward_mut(), rng);
}

fn scramble_ensemble(ens: &mut ghp_core::models::ProbabilisticEnsemble<f64>, rng: &mut ChaCha8Rng) {
    for m in ens.members_mut() {
        let names: Vec<String> = m.params().names().map(str::to_string).collect();
        for n in names {
            let shape = m.params().get(&n).unwrap().shape().to_vec();
            let len = shape.iter().product();
            let v = Array::new(shape, (0..len).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap();
            m.params_mut().set(&n, v).unwrap();
        }
    }
}

fn structured_layout() -> LatentLayout {
    LatentLayout::structured(vec![
        FactorSpec::new("env", 2, FactorKind::Dynamics),
        FactorSpec::new("goal", 2, FactorKind::Reward),
    ])
    .unwrap()
}

#[test]
fn reparameterized_sample_gradients() {
    let layout = LatentLayout::joint(3).unwrap();
    let mut p = TaskPosterior::<f64>::new(0, &layout);
    p.set("z", &[0.4, -1.1, 0.2], &[-0.3, 0.5, 0.1]).unwrap();
    let eps = [0.7, -1.3, 0.25];
    let w = [1.5, -0.5, 2.0];
    let eval = |p: &TaskPosterior<f64>| {
        let mut g = Graph::new();
        let z = p.sample_with(&mut g, "z", &eps).unwrap();
        let sq = g.square(z).unwrap();
        let wn = g.constant(Array::vector(w.to_vec()));
        let t = g.mul(sq, wn).unwrap();
        let root = g.sum(t).unwrap();
        (g.scalar(root), g.backward(root, p.params()).unwrap())
    };
    let (_, grads) = eval(&p);
    for name in ["z/mean", "z/log_std"] {
        for i in 0..3 {
            let bump = |d: f64| {
                let mut q = p.clone();
                let mut v = q.params().get(name).unwrap().clone();
                v.data_mut()[i] += d;
                q.params_mut().set(name, v).unwrap();
                eval(&q).0
            };
            let numeric = (bump(H) - bump(-H)) / (2.0 * H);
            let analytic = grads.get(name).unwrap().data()[i];
            assert!(rel_err(analytic, numeric) < 1e-4, "{name}[{i}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn sample_moments_match_posterior() {
    let layout = LatentLayout::joint(2).unwrap();
    let mut p = TaskPosterior::<f64>::new(0, &layout);
    p.set("z", &[1.5, -0.5], &[0.3f64.ln(), 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| p.sample("z", &mut rng).unwrap()).collect();
    for (c, (&mu, sd)) in [1.5, -0.5].iter().zip([0.3, 1.0]).enumerate() {
        let m = draws.iter().map(|d| d[c]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d[c] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = sd / (n as f64).sqrt();
        let se_sd = sd / (2.0 * n as f64).sqrt();
        assert!((m - mu).abs() < 4.0 * se_mean, "mean {m} vs {mu}");
        assert!((v.sqrt() - sd).abs() < 4.0 * se_sd, "std {} vs {sd}", v.sqrt());
    }
}

fn loss_value(model: &WorldModel<f64>, post: &TaskPosterior<f64>, data: &TaskData<f64>, seed: u64) -> ghp_core::objective::LossReport<f64> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = elbo_loss(
        &mut g,
        model.dynamics().member(0),
        model.reward().member(0),
        model.layout(),
        Some(post),
        &data.full_batch(post.task()),
        LossOptions { n_samples: 2, kl_scale: 0.5 },
        &mut rng,
    )
    .unwrap();
    t.report(&g)
}

#[test]
fn structured_reward_factor_leaves_dynamics_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let layout = structured_layout();
    let shape = ModelShape { state_dim: 2, action_dim: 1, dynamics_hidden: vec![5], reward_hidden: vec![5], ensemble_size: 1 };
    let mut model = WorldModel::new(layout.clone(), &shape, &mut rng).unwrap();
    scramble(&mut model, &mut rng);
    let data = random_data(&mut rng, 6, 2, 1);
    let mut p = TaskPosterior::new(0, &layout);
    let a = loss_value(&model, &p, &data, 5);
    p.set("goal", &[1.0, -2.0], &[0.3, 0.3]).unwrap();
    let b = loss_value(&model, &p, &data, 5);
    assert_eq!(a.dynamics_nll.to_bits(), b.dynamics_nll.to_bits());
    assert_ne!(a.reward_nll, b.reward_nll);
    p.set("env", &[0.5, 0.5], &[-0.2, 0.0]).unwrap();
    let c = loss_value(&model, &p, &data, 5);
    assert_eq!(b.reward_nll.to_bits(), c.reward_nll.to_bits());
    assert_ne!(b.dynamics_nll, c.dynamics_nll);
    let named: Vec<&str> = c.per_factor_kl.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(named, ["env", "goal"]);
}

#[test]
fn joint_latent_reaches_both_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let layout = LatentLayout::joint(2).unwrap();
    let shape = ModelShape { state_dim: 2, action_dim: 1, dynamics_hidden: vec![5], reward_hidden: vec![5], ensemble_size: 1 };
    let mut model = WorldModel::new(layout.clone(), &shape, &mut rng).unwrap();
    scramble(&mut model, &mut rng);
    let data = random_data(&mut rng, 6, 2, 1);
    let mut p = TaskPosterior::new(0, &layout);
    let a = loss_value(&model, &p, &data, 5);
    p.set("z", &[1.0, -2.0], &[0.0, 0.0]).unwrap();
    let b = loss_value(&model, &p, &data, 5);
    assert_ne!(a.dynamics_nll, b.dynamics_nll);
    assert_ne!(a.reward_nll, b.reward_nll);
}

#[test]
fn degenerate_structured_layout_reproduces_joint() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let joint = LatentLayout::joint(2).unwrap();
    let degenerate = LatentLayout::structured(vec![FactorSpec::new("z", 2, FactorKind::Shared)]).unwrap();
    let shape = ModelShape { state_dim: 2, action_dim: 1, dynamics_hidden: vec![4], reward_hidden: vec![3], ensemble_size: 1 };
    let mut model = WorldModel::new(joint.clone(), &shape, &mut rng).unwrap();
    scramble(&mut model, &mut rng);
    let data = random_data(&mut rng, 5, 2, 1);
    let mut pj = TaskPosterior::new(0, &joint);
    pj.set("z", &[0.3, -0.2], &[0.1, -0.4]).unwrap();
    let mut ps = TaskPosterior::new(0, &degenerate);
    ps.set("z", &[0.3, -0.2], &[0.1, -0.4]).unwrap();
    let batch = data.full_batch(0);
    let opts = LossOptions { n_samples: 2, kl_scale: 0.3 };
    let (dm, rm) = (model.dynamics().member(0), model.reward().member(0));
    let mut g1 = Graph::new();
    let t1 = loss_joint(&mut g1, dm, rm, &joint, &pj, &batch, opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut g2 = Graph::new();
    let t2 = loss_structured(&mut g2, dm, rm, &degenerate, &ps, &batch, opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(t1.report(&g1), t2.report(&g2));
}

#[test]
fn doubling_the_batch_doubles_the_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let layout = LatentLayout::joint(2).unwrap();
    let shape = ModelShape { state_dim: 2, action_dim: 1, dynamics_hidden: vec![4], reward_hidden: vec![3], ensemble_size: 1 };
    let mut model = WorldModel::new(layout.clone(), &shape, &mut rng).unwrap();
    scramble(&mut model, &mut rng);
    let data = random_data(&mut rng, 6, 2, 1);
    let mut p = TaskPosterior::new(0, &layout);
    p.set("z", &[0.3, -0.2], &[0.1, -0.4]).unwrap();
    let single = data.select(0, &[0, 1, 2, 3, 4, 5]);
    let double = data.select(0, &[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
    let eval = |b: &ghp_core::objective::Minibatch<f64>, scale: f64| {
        let mut g = Graph::new();
        let opts = LossOptions { n_samples: 2, kl_scale: scale };
        let t = loss_joint(&mut g, model.dynamics().member(0), model.reward().member(0), &layout, &p, b, opts, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        t.report(&g)
    };
    let (a, b) = (eval(&single, 0.25), eval(&double, 0.5));
    assert!((b.dynamics_nll - 2.0 * a.dynamics_nll).abs() < 1e-9);
    assert!((b.reward_nll - 2.0 * a.reward_nll).abs() < 1e-9);
    assert!((b.scaled_kl - 2.0 * a.scaled_kl).abs() < 1e-12);
}

/// Finite differences on the full loss over dynamics, reward and posterior
/// parameters, with latent noise held fixed by reseeding.
fn loss_gradient_check(layout: LatentLayout, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ModelShape { state_dim: 2, action_dim: 1, dynamics_hidden: vec![4, 4], reward_hidden: vec![3], ensemble_size: 1 };
    let mut model = WorldModel::new(layout.clone(), &shape, &mut rng).unwrap();
    scramble(&mut model, &mut rng);
    model.fit_normalizers([&random_data(&mut rng, 20, 2, 1)]).unwrap();
    let data = random_data(&mut rng, 5, 2, 1);
    let mut post = TaskPosterior::new(0, &layout);
    for f in layout.factors() {
        let mu: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ls: Vec<f64> = (0..f.dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        post.set(&f.name, &mu, &ls).unwrap();
    }
    let total = |m: &WorldModel<f64>, p: &TaskPosterior<f64>| loss_value(m, p, &data, 99).total;

    let mut g = Graph::new();
    let t = elbo_loss(
        &mut g,
        model.dynamics().member(0),
        model.reward().member(0),
        &layout,
        Some(&post),
        &data.full_batch(0),
        LossOptions { n_samples: 2, kl_scale: 0.5 },
        &mut ChaCha8Rng::seed_from_u64(99),
    )
    .unwrap();
    let grads = g.backward_all(t.total).unwrap();
    let gd = grads.for_store(model.dynamics().member(0).params());
    let gr = grads.for_store(model.reward().member(0).params());
    let gp = grads.for_store(post.params());

    // 8 random coordinates from each parameter group.
    let mut pick = ChaCha8Rng::seed_from_u64(seed + 1);
    for group in 0..3 {
        let names: Vec<String> = match group {
            0 => model.dynamics().member(0).params().names().map(str::to_string).collect(),
            1 => model.reward().member(0).params().names().map(str::to_string).collect(),
            _ => post.params().names().map(str::to_string).collect(),
        };
        for _ in 0..8 {
            let name = &names[pick.random_range(0..names.len())];
            let bump = |d: f64, i: usize| {
                let (mut m, mut p) = (model.clone(), post.clone());
                let store = match group {
                    0 => m.dynamics_mut().members_mut()[0].params_mut(),
                    1 => m.reward_mut().members_mut()[0].params_mut(),
                    _ => p.params_mut(),
                };
                let mut v = store.get(name).unwrap().clone();
                v.data_mut()[i] += d;
                store.set(name, v).unwrap();
                total(&m, &p)
            };
            let len = [&gd, &gr, &gp][group].get(name).unwrap().len();
            let i = pick.random_range(0..len);
            let numeric = (bump(H, i) - bump(-H, i)) / (2.0 * H);
            let analytic = [&gd, &gr, &gp][group].get(name).unwrap().data()[i];
            let e = rel_err(analytic, numeric);
            assert!(e <= 1e-3, "{:?} {name}[{i}]: {analytic} vs {numeric} (rel {e:e})", layout.mode());
        }
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    loss_gradient_check(LatentLayout::joint(3).unwrap(), 30);
}

#[test]
fn structured_loss_gradients_match_finite_differences() {
    loss_gradient_check(structured_layout(), 31);
}

/// Two tasks whose rewards have opposite signs: `r = +s` and `r = −s`.
fn signed_reward_tasks(rng: &mut ChaCha8Rng, n: usize, signs: [f64; 2]) -> BTreeMap<usize, TaskData<f64>> {
    let mut out = BTreeMap::new();
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (task, sign) in signs.into_iter().enumerate() {
        let sn: Vec<f64> = s.iter().zip(&a).map(|(s, a)| s + 0.1 * a).collect();
        let r: Vec<f64> = s.iter().map(|s| sign * s).collect();
        let d = TaskData::new(
            Array::matrix(n, 1, s.clone()).unwrap(),
            Array::matrix(n, 1, a.clone()).unwrap(),
            Array::matrix(n, 1, sn).unwrap(),
            Array::matrix(n, 1, r).unwrap(),
        )
        .unwrap();
        out.insert(task, d);
    }
    out
}

fn train_two_tasks(signs: [f64; 2], seed: u64) -> BTreeMap<usize, TaskPosterior<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = LatentLayout::joint(2).unwrap();
    let shape = ModelShape { state_dim: 1, action_dim: 1, dynamics_hidden: vec![8], reward_hidden: vec![16], ensemble_size: 2 };
    let mut model = WorldModel::new(layout.clone(), &shape, &mut rng).unwrap();
    let data = signed_reward_tasks(&mut rng, 100, signs);
    let mut posts: BTreeMap<usize, TaskPosterior<f64>> = data.keys().map(|&t| (t, TaskPosterior::new(t, &layout))).collect();
    let cfg = TrainConfig { epochs: 300, batch_size: 25, learning_rate: 5e-3, posterior_learning_rate: 5e-3, n_samples: 2 };
    let report = train_phase(&mut model, &mut posts, &data, &cfg, &mut rng).unwrap();
    assert!(report.final_loss.is_finite());
    posts
}

#[test]
fn conflicting_tasks_separate_posteriors() {
    let posts = train_two_tasks([1.0, -1.0], 40);
    let (a, b) = (posts[&0].mean("z").unwrap(), posts[&1].mean("z").unwrap());
    let gap = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap > 1.0, "posterior means {a:?} vs {b:?}");
}

#[test]
fn identical_tasks_share_a_posterior() {
    let posts = train_two_tasks([1.0, 1.0], 41);
    let (a, b) = (posts[&0].mean("z").unwrap(), posts[&1].mean("z").unwrap());
    let gap = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap < 0.2, "posterior means {a:?} vs {b:?}");
}

#[test]
fn training_touches_only_its_own_posteriors() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let layout = LatentLayout::joint(2).unwrap();
    let shape = ModelShape { state_dim: 1, action_dim: 1, dynamics_hidden: vec![4], reward_hidden: vec![4], ensemble_size: 1 };
    let mut model = WorldModel::new(layout.clone(), &shape, &mut rng).unwrap();
    let mut data = signed_reward_tasks(&mut rng, 20, [1.0, -1.0]);
    data.remove(&1);
    let mut posts: BTreeMap<usize, TaskPosterior<f64>> = [0, 1].iter().map(|&t| (t, TaskPosterior::new(t, &layout))).collect();
    let before = posts[&1].checksum();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    train_phase(&mut model, &mut posts, &data, &cfg, &mut rng).unwrap();
    assert_eq!(before, posts[&1].checksum());
    assert_ne!(TaskPosterior::<f64>::new(0, &layout).checksum(), posts[&0].checksum());
}

#[test]
fn members_end_up_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let layout = LatentLayout::none();
    let shape = ModelShape { state_dim: 1, action_dim: 1, dynamics_hidden: vec![4], reward_hidden: vec![4], ensemble_size: 3 };
    let mut model = WorldModel::new(layout, &shape, &mut rng).unwrap();
    let data = signed_reward_tasks(&mut rng, 30, [1.0, -1.0]);
    train_phase(&mut model, &mut BTreeMap::new(), &data, &TrainConfig { epochs: 3, ..TrainConfig::default() }, &mut rng).unwrap();
    let flat = |i: usize| -> Vec<f64> {
        model.dynamics().member(i).params().iter().flat_map(|(_, v)| v.data().to_vec()).collect()
    };
    for i in 0..3 {
        for j in i + 1..3 {
            let d: f64 = flat(i).iter().zip(flat(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d > 0.0);
        }
    }
}

/// Dynamics `s' = s + z + ε` with `ε ∼ N(0, 0.1²)` and a reward model that
/// ignores the latent, so the exact posterior over `z` is Gaussian.
struct Conjugate {
    model: WorldModel<f64>,
    data: TaskData<f64>,
    post_mean: f64,
    post_sd: f64,
    log_evidence: f64,
}

fn conjugate_setup(seed: u64) -> Conjugate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = LatentLayout::joint(1).unwrap();
    let shape = ModelShape { state_dim: 1, action_dim: 1, dynamics_hidden: vec![], reward_hidden: vec![], ensemble_size: 1 };
    let mut model = WorldModel::<f64>::new(layout, &shape, &mut rng).unwrap();
    let noise_var: f64 = 0.01;
    let raw = unbound_log_var(noise_var.ln(), LOG_VAR_MIN, LOG_VAR_MAX);
    let dm = &mut model.dynamics_mut().members_mut()[0];
    // Inputs are (s, a, z); the mean reads z only.
    dm.params_mut().set("out/w", Array::matrix(3, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
    dm.params_mut().set("out/b", Array::vector(vec![0.0, raw])).unwrap();

    let z_true = 0.8;
    let n = 50;
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps: Vec<f64> = (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let sn: Vec<f64> = s.iter().zip(&eps).map(|(s, e)| s + z_true + e).collect();
    let data = TaskData::new(
        Array::matrix(n, 1, s.clone()).unwrap(),
        Array::zeros(&[n, 1]),
        Array::matrix(n, 1, sn.clone()).unwrap(),
        Array::zeros(&[n, 1]),
    )
    .unwrap();
    let y: Vec<f64> = sn.iter().zip(&s).map(|(a, b)| a - b).collect();
    let nf = n as f64;
    let precision = 1.0 + nf / noise_var;
    let sum_y: f64 = y.iter().sum();
    let sum_y2: f64 = y.iter().map(|v| v * v).sum();
    let post_mean = sum_y / noise_var / precision;
    let post_sd = precision.powf(-0.5);
    let log_evidence = -0.5 * nf * (2.0 * std::f64::consts::PI * noise_var).ln()
        - 0.5 * (1.0 + nf / noise_var).ln()
        - 0.5 / noise_var * (sum_y2 - sum_y * sum_y / (noise_var + nf));
    Conjugate { model, data, post_mean, post_sd, log_evidence }
}

#[test]
fn conjugate_posterior_recovered() {
    let c = conjugate_setup(50);
    let mut post = TaskPosterior::new(0, c.model.layout());
    let before = c.model.checksum();
    // 2000 iterations as 20 consecutive adaptation calls.
    let cfg = InferenceConfig { n_samples: 32, ..InferenceConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        testtime_inference_step(&c.model, &mut post, &c.data, &cfg, &mut rng).unwrap();
    }
    assert_eq!(before, c.model.checksum());
    let mu = post.mean("z").unwrap()[0];
    let sd = post.std("z").unwrap()[0];
    assert!(((mu - c.post_mean) / c.post_mean).abs() < 0.05, "mean {mu} vs {}", c.post_mean);
    assert!(((sd - c.post_sd) / c.post_sd).abs() < 0.05, "std {sd} vs {}", c.post_sd);

    // The negative loss is a lower bound on the evidence; the reward
    // likelihood does not involve z and is added back.
    let evals: Vec<f64> = (0..400u64)
        .map(|seed| {
            let r = loss_value_unscaled(&c, &post, seed);
            -(r.dynamics_nll + r.scaled_kl)
        })
        .collect();
    let m = evals.iter().sum::<f64>() / evals.len() as f64;
    let se = (evals.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (evals.len() - 1) as f64 / evals.len() as f64).sqrt();
    assert!(m <= c.log_evidence + 3.0 * se, "ELBO {m} above evidence {}", c.log_evidence);
    assert!(c.log_evidence - m < 0.5, "ELBO {m} far below evidence {}", c.log_evidence);
}

fn loss_value_unscaled(c: &Conjugate, post: &TaskPosterior<f64>, seed: u64) -> ghp_core::objective::LossReport<f64> {
    let mut g = Graph::new();
    let t = elbo_loss(
        &mut g,
        c.model.dynamics().member(0),
        c.model.reward().member(0),
        c.model.layout(),
        Some(post),
        &c.data.full_batch(0),
        LossOptions { n_samples: 2, kl_scale: 1.0 },
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    t.report(&g)
}

#[test]
fn adaptation_is_reproducible_after_reset() {
    let c = conjugate_setup(51);
    let mut post = TaskPosterior::new(0, c.model.layout());
    let cfg = InferenceConfig::default();
    let run = |post: &mut TaskPosterior<f64>| {
        post.reset_to_prior();
        testtime_inference_step(&c.model, post, &c.data, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        post.checksum()
    };
    let first = run(&mut post);
    let second = run(&mut post);
    assert_eq!(first, second);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_scales_sum_to_one_per_epoch(n in 1usize..500, b in 1usize..128) {
        let scales = minibatch_kl_scales(n, b);
        prop_assert_eq!(scales.len(), n.div_ceil(b));
        prop_assert!((scales.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_report_sums(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = structured_layout();
        let shape = ModelShape { state_dim: 2, action_dim: 1, dynamics_hidden: vec![3], reward_hidden: vec![3], ensemble_size: 1 };
        let mut model = WorldModel::new(layout.clone(), &shape, &mut rng).unwrap();
        scramble(&mut model, &mut rng);
        let data = random_data(&mut rng, 4, 2, 1);
        let mut p = TaskPosterior::new(0, &layout);
        p.set("goal", &[rng.random_range(-1.0..1.0), 0.2], &[0.1, -0.3]).unwrap();
        let r = loss_value(&model, &p, &data, seed);
        prop_assert!((r.total - (r.dynamics_nll + r.reward_nll + r.scaled_kl)).abs() < 1e-9);
        let per: f64 = r.per_factor_kl.iter().map(|(_, v)| v).sum();
        prop_assert!((per - r.kl).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_for_any_posterior(mu in -3.0f64..3.0, ls in -3.0f64..2.0) {
        let layout = LatentLayout::joint(1).unwrap();
        let mut p = TaskPosterior::<f64>::new(0, &layout);
        p.set("z", &[mu], &[ls]).unwrap();
        let mut g = Graph::new();
        let (kl, _) = p.kl_to_prior(&mut g).unwrap();
        let expect = 0.5 * ((2.0 * ls).exp() + mu * mu - 1.0 - 2.0 * ls);
        prop_assert!(g.scalar(kl) >= 0.0);
        prop_assert!((g.scalar(kl) - expect).abs() < 1e-9);
    }
}
