//! Multi-dataset REINFORCE training of a [`PolicyModel`].
//!
//! Each iteration samples a few source datasets, rolls out a group of fresh
//! episodes on each, standardizes the discounted returns within every group,
//! and takes one Adam ascent step on
//!
//! ```text
//! F = J - lambda1 * A + lambda2 * H
//! ```
//!
//! where `A` is the reconstruction error of the synthesized autoencoder and
//! `H` the entropy of the query distribution, both averaged over the steps of
//! an episode. Per-step gradients are exponentially smoothed within the
//! episode and the final smoothed value is the episode's contribution.
//!
//! Because the return coefficient is only known once the whole batch has been
//! rolled out, an episode keeps two smoothed accumulators, one for the
//! log-probability gradients and one for the auxiliary gradients. The
//! recursion is linear, so `R * logp_acc + aux_acc` equals the smoothed sum of
//! the per-step gradients `R * dlogp_t + daux_t`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;

use crate::checkpoint::Checkpoint;
use crate::data::{make_trial_split, Dataset, TrialSplit};
use crate::diff::{AdamState, Tape, Tensor};
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::policy::{sample_action, ActionMode, ModelKind, PolicyModel};
use crate::seed;

const INIT_TAG: u64 = 0x1417;
const SAMPLE_TAG: u64 = 0x5a3e;
const EPISODE_TAG: u64 = 0xe915;
const STD_EPS: f64 = 1e-8;
const DEGENERATE_STD: f64 = 1e-12;

/// Settings of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_episodes: usize,
    pub datasets_per_batch: usize,
    pub iterations: u64,
    pub budget: usize,
    pub base_seed: u64,
    pub model: ModelKind,
    /// Progress is logged every this many iterations (0 disables).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda1: 0.03,
            lambda2: 0.005,
            alpha: 0.005,
            lr: 0.001,
            batch_episodes: 32,
            datasets_per_batch: 4,
            iterations: 50_000,
            budget: 20,
            base_seed: 0,
            model: ModelKind::Meta,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "gamma",
        "lambda1",
        "lambda2",
        "alpha",
        "lr",
        "batch_episodes",
        "datasets_per_batch",
        "iterations",
        "budget",
        "seed",
        "model",
        "log_every",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "gamma" => self.gamma = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_episodes" => self.batch_episodes = parse(key, value)?,
            "datasets_per_batch" => self.datasets_per_batch = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "budget" => self.budget = parse(key, value)?,
            "seed" => self.base_seed = parse(key, value)?,
            "model" => self.model = value.trim().parse()?,
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in [`TrainConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("gamma", self.gamma.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_episodes", self.batch_episodes.to_string()),
            ("datasets_per_batch", self.datasets_per_batch.to_string()),
            ("iterations", self.iterations.to_string()),
            ("budget", self.budget.to_string()),
            ("seed", self.base_seed.to_string()),
            ("model", self.model.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (k, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.datasets_per_batch == 0 {
            return bad("datasets_per_batch must be positive".into());
        }
        if !self.batch_episodes.is_multiple_of(self.datasets_per_batch) {
            return bad(format!(
                "batch_episodes {} is not divisible by datasets_per_batch {}",
                self.batch_episodes, self.datasets_per_batch
            ));
        }
        if self.batch_episodes / self.datasets_per_batch < 2 {
            return bad("each dataset needs at least 2 episodes per batch".into());
        }
        if self.budget == 0 {
            return bad("budget must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 over the settings that influence the parameter updates.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k == "log_every" || k == "iterations" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    /// Episodes rolled out per sampled dataset when `available` sources
    /// exist.
    pub fn episodes_per_dataset(&self, available: usize) -> usize {
        let k = self.datasets_per_batch.min(available).max(1);
        self.batch_episodes / k
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Gradients of one decision step, kept only on request.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub log_prob: Vec<Tensor>,
    pub aux: Vec<Tensor>,
}

/// Everything one rollout contributes to an update.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dataset: String,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub acc_history: Vec<f64>,
    /// Entropy of the query distribution at each step.
    pub entropies: Vec<f64>,
    /// Reconstruction error at each step (zero for the single-model variant).
    pub recon: Vec<f64>,
    /// Smoothed log-probability gradients.
    pub log_prob_acc: Vec<Tensor>,
    /// Smoothed gradients of `(lambda2 H_t - lambda1 A_t) / T`.
    pub aux_acc: Vec<Tensor>,
    pub steps: Option<Vec<StepGradients>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn zeros_like(model: &PolicyModel) -> Vec<Tensor> {
    model
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect()
}

/// `acc <- (1 - alpha) acc + alpha g`
fn smooth_into(acc: &mut [Tensor], g: &[Tensor], alpha: f64) {
    for (a, gi) in acc.iter_mut().zip(g) {
        a.scale_in_place(1.0 - alpha);
        a.axpy(alpha, gi);
    }
}

/// Rolls out one stochastic episode and records the gradients needed for an
/// update. With `keep_steps` the raw per-step gradients are retained as well.
pub fn collect_episode(
    model: &PolicyModel,
    ds: &Dataset,
    split: &TrialSplit,
    cfg: &TrainConfig,
    rng_seed: u64,
    keep_steps: bool,
) -> Result<Trajectory> {
    let mut ep = Episode::new(ds, split, cfg.budget)?;
    let horizon = cfg.budget as f64;
    let want_aux = cfg.lambda1 != 0.0 || cfg.lambda2 != 0.0;
    let mut traj = Trajectory {
        dataset: ds.name().to_string(),
        actions: Vec::with_capacity(cfg.budget),
        rewards: Vec::with_capacity(cfg.budget),
        acc_history: Vec::new(),
        entropies: Vec::with_capacity(cfg.budget),
        recon: Vec::with_capacity(cfg.budget),
        log_prob_acc: zeros_like(model),
        aux_acc: zeros_like(model),
        steps: keep_steps.then(Vec::new),
    };
    while !ep.is_done() {
        let t = ep.steps() as u64;
        let obs = ep.observe();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let fwd = model.forward(&mut tape, &bound, &obs)?;
        let probs = tape.value(fwd.probs).data().to_vec();
        let action = sample_action(&probs, ActionMode::Sample, seed::derive(rng_seed, &[t]))?;

        let log_p = tape.log_pick(fwd.probs, 0, action)?;
        let neg_h = tape.neg_entropy(fwd.probs);
        traj.entropies.push(-tape.value(neg_h).item());
        traj.recon
            .push(fwd.recon.map_or(0.0, |r| tape.value(r).item()));

        let g_logp: Vec<Tensor> = {
            let grads = tape.backward(log_p)?;
            bound.ids().iter().map(|&id| grads.wrt(&tape, id)).collect()
        };
        let g_aux: Vec<Tensor> = if want_aux {
            // lambda2 H - lambda1 A, with H = -neg_h
            let mut aux = tape.scale(neg_h, -cfg.lambda2 / horizon);
            if let Some(r) = fwd.recon {
                let rec = tape.scale(r, -cfg.lambda1 / horizon);
                aux = tape.add(aux, rec)?;
            }
            let grads = tape.backward(aux)?;
            bound.ids().iter().map(|&id| grads.wrt(&tape, id)).collect()
        } else {
            zeros_like(model)
        };
        smooth_into(&mut traj.log_prob_acc, &g_logp, cfg.alpha);
        smooth_into(&mut traj.aux_acc, &g_aux, cfg.alpha);
        if let Some(steps) = traj.steps.as_mut() {
            steps.push(StepGradients {
                log_prob: g_logp,
                aux: g_aux,
            });
        }

        let reward = ep.step(action)?;
        traj.actions.push(action);
        traj.rewards.push(reward);
    }
    traj.acc_history = ep.acc_history().to_vec();
    Ok(traj)
}

/// `sum_t gamma^(t-1) r_t`
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for &r in rewards {
        total += g * r;
        g *= gamma;
    }
    total
}

/// `(R - mean) / (std + 1e-8)` within one group, using the population
/// standard deviation. A group whose spread is below `1e-12` maps to zeros.
pub fn standardize_group(group: &str, returns: &[f64]) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(Error::InsufficientGroup {
            group: group.to_string(),
            size: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; returns.len()]);
    }
    Ok(returns.iter().map(|r| (r - mean) / (std + STD_EPS)).collect())
}

/// Standardizes each `(name, returns)` group independently.
pub fn standardize_returns(groups: &[(&str, &[f64])]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|(name, r)| standardize_group(name, r))
        .collect()
}

/// The literal smoothing recursion `G_t = (1 - alpha) G_(t-1) + alpha g_t`
/// from `G_0 = 0`, returning `G_T`.
pub fn smooth_gradients(step_grads: &[Vec<Tensor>], alpha: f64) -> Result<Vec<Tensor>> {
    let first = step_grads.first().ok_or(Error::EmptyInput("smooth_gradients"))?;
    let mut acc: Vec<Tensor> = first
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    for g in step_grads {
        if g.len() != acc.len() {
            return Err(Error::Shape("steps carry different tensor counts".into()));
        }
        smooth_into(&mut acc, g, alpha);
    }
    Ok(acc)
}

/// Smoothed ascent direction of one episode for standardized return `r_hat`.
pub fn episode_gradient(traj: &Trajectory, r_hat: f64) -> Vec<Tensor> {
    traj.log_prob_acc
        .iter()
        .zip(&traj.aux_acc)
        .map(|(lp, aux)| {
            let mut g = aux.clone();
            g.axpy(r_hat, lp);
            g
        })
        .collect()
}

/// Per-iteration summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub iteration: u64,
    pub datasets: Vec<String>,
    pub mean_return: f64,
    pub mean_recon: f64,
    pub mean_entropy: f64,
}

impl fmt::Display for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter {} return {:.5} recon {:.5} entropy {:.5}",
            self.iteration, self.mean_return, self.mean_recon, self.mean_entropy
        )
    }
}

/// Fresh parameters and optimizer state for `cfg`.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Checkpoint {
    let model = PolicyModel::init(cfg.model, seed::derive(cfg.base_seed, &[INIT_TAG]));
    let adam = AdamState::new(model.tensors(), cfg.lr);
    Checkpoint {
        model,
        adam,
        iteration: 0,
        config_digest: cfg.digest(),
    }
}

/// Checks that every source can host training episodes.
fn check_sources(cfg: &TrainConfig, sources: &[Dataset]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Config("training needs at least one source dataset".into()));
    }
    if cfg.episodes_per_dataset(sources.len()) < 2 {
        return Err(Error::Config(format!(
            "{} episodes over {} datasets leaves fewer than 2 per group",
            cfg.batch_episodes,
            cfg.datasets_per_batch.min(sources.len())
        )));
    }
    for ds in sources {
        let split = make_trial_split(ds, 0, cfg.base_seed)?;
        Episode::new(ds, &split, cfg.budget)?;
    }
    Ok(())
}

/// One training iteration on `state`.
pub fn train_step(
    state: &mut Checkpoint,
    cfg: &TrainConfig,
    sources: &[Dataset],
    exec: Execution,
) -> Result<Progress> {
    let it = state.iteration;
    let k = cfg.datasets_per_batch.min(sources.len());
    let mut rng = seed::rng(seed::derive(cfg.base_seed, &[SAMPLE_TAG, it]));
    let mut chosen = sample(&mut rng, sources.len(), k).into_vec();
    chosen.sort_unstable();
    let per = cfg.episodes_per_dataset(sources.len());

    let jobs: Vec<(usize, u64)> = chosen
        .iter()
        .flat_map(|&d| (0..per as u64).map(move |slot| (d, slot)))
        .collect();
    let model = &state.model;
    let trajs = exec.try_map(&jobs, |&(d, slot)| {
        let ds = &sources[d];
        let s = seed::derive(
            cfg.base_seed,
            &[EPISODE_TAG, it, seed::name_tag(ds.name()), slot],
        );
        let split = make_trial_split(ds, slot, s)?;
        collect_episode(model, ds, &split, cfg, s, false)
    })?;

    let raw: Vec<f64> = trajs
        .iter()
        .map(|t| discounted_return(&t.rewards, cfg.gamma))
        .collect();
    let mut r_hat = Vec::with_capacity(raw.len());
    for (g, &d) in raw.chunks(per).zip(&chosen) {
        r_hat.extend(standardize_group(sources[d].name(), g)?);
    }

    let mut total = zeros_like(&state.model);
    for (traj, &r) in trajs.iter().zip(&r_hat) {
        for (acc, g) in total.iter_mut().zip(episode_gradient(traj, r)) {
            acc.axpy(1.0, &g);
        }
    }
    // Adam minimizes, so hand it the negated mean ascent direction.
    let scale = -1.0 / trajs.len() as f64;
    total.iter_mut().for_each(|g| g.scale_in_place(scale));
    let mut params = state.model.tensors_mut();
    state.adam.update(&mut params, &total)?;
    state.iteration += 1;

    let n = trajs.len() as f64;
    let mean = |f: &dyn Fn(&Trajectory) -> f64| trajs.iter().map(f).sum::<f64>() / n;
    let steps_mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(Progress {
        iteration: state.iteration,
        datasets: chosen.iter().map(|&d| sources[d].name().to_string()).collect(),
        mean_return: raw.iter().sum::<f64>() / n,
        mean_recon: mean(&|t| steps_mean(&t.recon)),
        mean_entropy: mean(&|t| steps_mean(&t.entropies)),
    })
}

/// Trains from scratch for `cfg.iterations` iterations.
pub fn train(cfg: &TrainConfig, sources: &[Dataset], exec: Execution) -> Result<Checkpoint> {
    train_from(initial_checkpoint(cfg), cfg, sources, exec, |_, _| Ok(()))
}

/// Continues from `state` until `cfg.iterations`, calling `on_iter` after
/// every update.
pub fn train_from<F>(
    mut state: Checkpoint,
    cfg: &TrainConfig,
    sources: &[Dataset],
    exec: Execution,
    mut on_iter: F,
) -> Result<Checkpoint>
where
    F: FnMut(&Progress, &Checkpoint) -> Result<()>,
{
    cfg.validate()?;
    if state.config_digest != cfg.digest() {
        return Err(Error::Config(
            "checkpoint was produced under different training settings".into(),
        ));
    }
    if state.model.kind() != cfg.model {
        return Err(Error::Config(format!(
            "checkpoint holds a {} model, config asks for {}",
            state.model.kind(),
            cfg.model
        )));
    }
    check_sources(cfg, sources)?;
    while state.iteration < cfg.iterations {
        let p = train_step(&mut state, cfg, sources, exec)?;
        if cfg.log_every > 0 && p.iteration % cfg.log_every == 0 {
            log::info!("{p}");
        }
        on_iter(&p, &state)?;
    }
    Ok(state)
}
