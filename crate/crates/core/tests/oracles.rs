//! Checks against values computed independently of the code under test:
//! brute force, closed forms, sampling statistics and numeric gradients.

mod common;

use al_policy::baselines::select_random;
use al_policy::diff::{AdamState, NodeId, Tape, Tensor};
use al_policy::policy::sample_action;
use al_policy::svm::LinearSvm;
use al_policy::trainer::{
    collect_episode, episode_gradient, initial_checkpoint, smooth_gradients, standardize_group,
    train, train_from, TrainConfig,
};
use al_policy::{
    make_trial_split, seed, ActionMode, Checkpoint, Episode, Execution, ModelKind, PolicyModel,
};

use common::{literal, load, policy_objective_error, split, synthetic};

fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let expected = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - expected).abs() <= 3.0 * sigma
}

#[test]
fn initial_labels_are_uniform_within_each_class() {
    let ds = load("breast");
    let trials = 1000;
    let mut counts = vec![0usize; ds.len()];
    for t in 0..trials {
        let s = make_trial_split(&ds, t, 0).unwrap();
        for &i in &s.initial_labelled {
            counts[i] += 1;
        }
    }
    for class in [-1i8, 1] {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
        let expected = trials as f64 / members.len() as f64;
        let total: usize = members.iter().map(|&i| counts[i]).sum();
        assert_eq!(total, trials as usize, "one seed per class per trial");
        let chi2: f64 = members
            .iter()
            .map(|&i| (counts[i] as f64 - expected).powi(2) / expected)
            .sum();
        let df = (members.len() - 1) as f64;
        // chi-square with df degrees of freedom has mean df and variance 2 df
        assert!(
            (chi2 - df).abs() <= 3.0 * (2.0 * df).sqrt(),
            "class {class}: chi2 {chi2:.1} for df {df}"
        );
    }
}

#[test]
fn random_selection_is_uniform_over_a_four_instance_pool() {
    let ds = synthetic("four", 12, 2, 3);
    let s = make_trial_split(&ds, 0, 0).unwrap();
    let ep = Episode::new(&ds, &s, 1).unwrap();
    assert_eq!(ep.pool().len(), 4);
    let draws = 10_000;
    let mut counts = [0usize; 4];
    for k in 0..draws {
        counts[select_random(&ep, seed::derive(11, &[k])).unwrap()] += 1;
    }
    for c in counts {
        assert!(within_3_sigma(c, draws as usize, 0.25), "{counts:?}");
    }
}

#[test]
fn sampled_actions_follow_the_distribution() {
    let probs = [0.1, 0.2, 0.3, 0.4];
    let draws = 10_000;
    let mut counts = [0usize; 4];
    for k in 0..draws {
        counts[sample_action(&probs, ActionMode::Sample, k).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip(probs) {
        assert!(within_3_sigma(*c, draws as usize, p), "{counts:?}");
    }
}

/// Rows: two seeds, one query candidate close to the negative seed, test
/// points well inside each half.
fn reward_zero_fixture() -> (al_policy::Dataset, al_policy::TrialSplit) {
    let mut rows = vec![[0.0, 0.5], [1.0, 0.5], [0.1, 0.5], [0.9, 0.0], [0.05, 1.0]];
    let mut labels = vec![-1, 1, -1, 1, -1];
    for k in 0..6 {
        let v = 0.02 + 0.05 * k as f64;
        rows.push([v, 0.5]);
        labels.push(-1);
        rows.push([1.0 - v, 0.5]);
        labels.push(1);
    }
    let ds = literal("tiny", &rows, &labels);
    let test: Vec<usize> = (5..rows.len()).collect();
    (ds, split(&[0, 1, 2, 3, 4], &test, &[0, 1]))
}

#[test]
fn redundant_query_earns_zero_reward() {
    let (ds, s) = reward_zero_fixture();
    let (x, y) = (ds.features(), ds.labels());
    let svm = LinearSvm::default();
    let before = svm.fit(x, y, &[0, 1]).unwrap();
    let after = svm.fit(x, y, &[0, 1, 2]).unwrap();
    assert_eq!(before.predict(x.row(2)), -1, "the candidate is already predicted");
    for &i in &s.test {
        assert_eq!(before.predict(x.row(i)), after.predict(x.row(i)));
    }
    let mut ep = Episode::new(&ds, &s, 1).unwrap();
    let pos = ep.pool().iter().position(|&i| i == 2).unwrap();
    assert_eq!(ep.step(pos).unwrap(), 0.0);
}

#[test]
fn every_reward_matches_a_brute_force_refit() {
    let (ds, s) = reward_zero_fixture();
    let (x, y) = (ds.features(), ds.labels());
    let svm = LinearSvm::default();
    let ep = Episode::new(&ds, &s, 2).unwrap();
    let acc0 = svm.fit(x, y, &[0, 1]).unwrap().accuracy(x, y, &s.test).unwrap();
    for pos in 0..ep.pool().len() {
        let mut e = ep.clone();
        let inst = e.pool()[pos];
        let r = e.step(pos).unwrap();
        let acc1 = svm.fit(x, y, &[0, 1, inst]).unwrap().accuracy(x, y, &s.test).unwrap();
        assert_eq!(r, acc1 - acc0, "candidate {inst}");
        // count-based check that the accuracy is the fraction of correct labels
        let m = svm.fit(x, y, &[0, 1, inst]).unwrap();
        let correct = s.test.iter().filter(|&&i| m.predict(x.row(i)) == y[i]).count();
        assert_eq!(acc1, correct as f64 / s.test.len() as f64);
    }
}

#[test]
fn policy_objective_gradients_match_central_differences() {
    // each term on its own, then the training weights together
    for kind in [ModelKind::Meta, ModelKind::Single] {
        for (lp, h, r) in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.3, 0.005, 0.03)] {
            if kind == ModelKind::Single && lp == 0.0 && h == 0.0 {
                continue;
            }
            let rep = policy_objective_error(kind, lp, h, r, 5);
            assert!(
                rep.max_error < 1e-4,
                "{kind} weights ({lp}, {h}, {r}): relative error {:e}, {} kinks",
                rep.max_error,
                rep.kinks
            );
        }
    }
}

fn bandit_fixture() -> (al_policy::Dataset, al_policy::TrialSplit) {
    // seeds differ in both coordinates, only the first one carries the label
    let mut rows = vec![[0.1, 0.0], [0.9, 1.0], [0.1, 1.0], [0.9, 0.95]];
    let mut labels = vec![-1, 1, -1, 1];
    for i in 0..10 {
        for j in 0..5 {
            let x1 = 0.05 + 0.1 * i as f64;
            rows.push([x1, 0.25 * j as f64]);
            labels.push(if x1 < 0.5 { -1 } else { 1 });
        }
    }
    rows.push([0.0, 0.5]);
    labels.push(-1);
    rows.push([1.0, 0.5]);
    labels.push(1);
    let ds = literal("bandit", &rows, &labels);
    let test: Vec<usize> = (4..rows.len()).collect();
    (ds, split(&[0, 1, 2, 3], &test, &[0, 1]))
}

#[test]
fn policy_gradient_moves_toward_the_better_arm() {
    let (ds, s) = bandit_fixture();
    let probe = Episode::new(&ds, &s, 1).unwrap();
    assert_eq!(probe.pool(), &[2, 3]);
    let gain = |pos: usize| probe.clone().step(pos).unwrap();
    assert!(gain(0) > gain(1), "arm 0 gains {} vs {}", gain(0), gain(1));

    for kind in [ModelKind::Meta, ModelKind::Single] {
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            budget: 1,
            model: kind,
            ..TrainConfig::default()
        };
        let mut model = PolicyModel::init(kind, 2);
        let mut adam = AdamState::new(model.tensors(), cfg.lr);
        let p0 = model.probabilities(&probe.observe()).unwrap()[0];
        for it in 0..200u64 {
            let trajs: Vec<_> = (0..8u64)
                .map(|k| collect_episode(&model, &ds, &s, &cfg, seed::derive(it, &[k]), false).unwrap())
                .collect();
            let returns: Vec<f64> = trajs.iter().map(|t| t.rewards[0]).collect();
            let r_hat = standardize_group("bandit", &returns).unwrap();
            let mut total: Vec<Tensor> = model
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            for (t, r) in trajs.iter().zip(r_hat) {
                for (acc, g) in total.iter_mut().zip(episode_gradient(t, r)) {
                    acc.axpy(-1.0 / 8.0, &g);
                }
            }
            adam.update(&mut model.tensors_mut(), &total).unwrap();
        }
        let p1 = model.probabilities(&probe.observe()).unwrap()[0];
        assert!(p1 > p0, "{kind}: better arm {p0} -> {p1}");
    }
}

/// Ascends `weight * objective(probs, recon)` on one frozen observation and
/// returns the objective after every update.
fn frozen_ascent(
    model: &mut PolicyModel,
    obs: &al_policy::env::Observation,
    steps: usize,
    lr: f64,
    objective: impl Fn(&mut Tape, NodeId, Option<NodeId>) -> NodeId,
) -> Vec<f64> {
    let mut adam = AdamState::new(model.tensors(), lr);
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let fwd = model.forward(&mut tape, &bound, obs).unwrap();
        let f = objective(&mut tape, fwd.probs, fwd.recon);
        trace.push(tape.value(f).item());
        let grads = tape.backward(f).unwrap();
        let neg: Vec<Tensor> = bound
            .ids()
            .iter()
            .map(|&id| {
                let mut g = grads.wrt(&tape, id);
                g.scale_in_place(-1.0);
                g
            })
            .collect();
        adam.update(&mut model.tensors_mut(), &neg).unwrap();
    }
    trace
}

#[test]
fn entropy_term_flattens_a_peaked_distribution() {
    let ds = load("heart");
    let ep = Episode::new(&ds, &make_trial_split(&ds, 0, 0).unwrap(), 20).unwrap();
    let obs = ep.observe();
    for kind in [ModelKind::Meta, ModelKind::Single] {
        let mut model = PolicyModel::init(kind, 9);
        let last = PolicyModel::names(kind).iter().position(|n| *n == "trunk.w3").unwrap();
        let uniform = (obs.z_pool.rows() as f64).ln();
        let entropy = |m: &PolicyModel| -> f64 {
            let probs = m.probabilities(&obs).unwrap();
            -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
        };
        // sharpen just until the distribution is clearly non-uniform
        let mut doublings = 0;
        while entropy(&model) >= uniform - 1.0 {
            model.tensors_mut()[last].scale_in_place(2.0);
            doublings += 1;
            assert!(doublings < 30, "{kind}: could not sharpen the distribution");
        }
        let trace = frozen_ascent(&mut model, &obs, 50, 0.001, |tape, probs, _| {
            let nh = tape.neg_entropy(probs);
            tape.scale(nh, -1.0)
        });
        assert!(trace[50] > trace[0], "{kind}: entropy {} -> {}", trace[0], trace[50]);
    }
}

#[test]
fn reconstruction_term_alone_reduces_the_error() {
    let ds = load("heart");
    let ep = Episode::new(&ds, &make_trial_split(&ds, 0, 0).unwrap(), 20).unwrap();
    let obs = ep.observe();
    let mut model = PolicyModel::init(ModelKind::Meta, 9);
    let trace = frozen_ascent(&mut model, &obs, 100, 0.001, |tape, _, recon| {
        tape.scale(recon.expect("meta model reconstructs"), -1.0)
    });
    // trace holds -A
    assert!(-trace[100] < -trace[10], "A_10 {} A_100 {}", -trace[10], -trace[100]);
}

#[test]
fn collapsed_accumulators_equal_the_literal_recursion() {
    let ds = load("haberman");
    let s = make_trial_split(&ds, 2, 4).unwrap();
    for kind in [ModelKind::Meta, ModelKind::Single] {
        let cfg = TrainConfig {
            budget: 6,
            alpha: 0.3,
            model: kind,
            ..TrainConfig::default()
        };
        let model = PolicyModel::init(kind, 1);
        let traj = collect_episode(&model, &ds, &s, &cfg, 17, true).unwrap();
        let steps = traj.steps.as_ref().unwrap();
        for r_hat in [-1.7, 0.0, 0.4] {
            let per_step: Vec<Vec<Tensor>> = steps
                .iter()
                .map(|g| {
                    g.log_prob
                        .iter()
                        .zip(&g.aux)
                        .map(|(lp, aux)| {
                            let mut t = aux.clone();
                            t.axpy(r_hat, lp);
                            t
                        })
                        .collect()
                })
                .collect();
            let literal = smooth_gradients(&per_step, cfg.alpha).unwrap();
            let collapsed = episode_gradient(&traj, r_hat);
            for (a, b) in literal.iter().zip(&collapsed) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{kind} {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn smoothing_closed_forms() {
    let g = |v: f64| vec![Tensor::from_vec(1, 2, vec![v, -v]).unwrap()];
    // alpha = 1 keeps only the last step
    let out = smooth_gradients(&[g(3.0), g(5.0), g(-2.0)], 1.0).unwrap();
    assert_eq!(out[0].data(), &[-2.0, 2.0]);
    // one step is alpha g
    let out = smooth_gradients(&[g(4.0)], 0.25).unwrap();
    assert_eq!(out[0].data(), &[1.0, -1.0]);
    // a geometric sum otherwise
    let a: f64 = 0.1;
    let out = smooth_gradients(&[g(1.0), g(1.0), g(1.0)], a).unwrap();
    let want = a * (1.0 + (1.0 - a) + (1.0 - a).powi(2));
    assert!((out[0].data()[0] - want).abs() < 1e-15);
}

fn small_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        batch_episodes: 4,
        datasets_per_batch: 2,
        iterations: 3,
        budget: 3,
        base_seed: 21,
        model: kind,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_iterations_return_the_initial_state() {
    let sources = vec![load("heart"), load("haberman")];
    for kind in [ModelKind::Meta, ModelKind::Single] {
        let cfg = TrainConfig {
            iterations: 0,
            ..small_config(kind)
        };
        let out = train(&cfg, &sources, Execution::Sequential).unwrap();
        assert_eq!(out, initial_checkpoint(&cfg));
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let sources = vec![load("heart"), load("haberman"), load("liver")];
    for kind in [ModelKind::Meta, ModelKind::Single] {
        let cfg = small_config(kind);
        let a = train(&cfg, &sources, Execution::Sequential).unwrap();
        let b = train(&cfg, &sources, Execution::Sequential).unwrap();
        let c = train(&cfg, &sources, Execution::Parallel).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.to_bytes(), c.to_bytes());
        assert_ne!(a.model, initial_checkpoint(&cfg).model);
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let sources = vec![load("heart"), load("haberman")];
    let cfg = small_config(ModelKind::Meta);
    let whole = train(&cfg, &sources, Execution::Sequential).unwrap();
    let first = train(
        &TrainConfig {
            iterations: 1,
            ..cfg.clone()
        },
        &sources,
        Execution::Sequential,
    )
    .unwrap();
    // stored and reloaded between the two legs
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    first.save(&path).unwrap();
    let resumed = train_from(Checkpoint::load(&path).unwrap(), &cfg, &sources, Execution::Sequential, |_, _| Ok(()))
        .unwrap();
    assert_eq!(whole.to_bytes(), resumed.to_bytes());
}
