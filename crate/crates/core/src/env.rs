//! Pool-based active-learning episode.
//!
//! An [`Episode`] owns the labelled set, the unlabelled pool, the trial's test
//! split and the current base learner. Actions are positions in the current
//! pool; removing a queried instance keeps the remaining pool order, so "lowest
//! pool position" tie rules are stable across steps.

use crate::data::{Dataset, TrialSplit};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::svm::{logistic, LinearModel, LinearSvm};

pub const DEFAULT_BUDGET: usize = 20;

/// Number of expert-feature columns appended to each instance.
pub const EXPERT_FEATURES: usize = 2;

#[derive(Clone, Debug)]
pub struct Episode<'a> {
    ds: &'a Dataset,
    svm: LinearSvm,
    labelled: Vec<usize>,
    pool: Vec<usize>,
    test: Vec<usize>,
    model: LinearModel,
    acc_history: Vec<f64>,
    budget: usize,
    /// Euclidean distance from each pool instance to its nearest labelled
    /// instance, aligned with `pool`.
    nearest: Vec<f64>,
    queried: Vec<usize>,
}

impl<'a> Episode<'a> {
    pub fn new(ds: &'a Dataset, split: &TrialSplit, budget: usize) -> Result<Self> {
        Self::with_svm(ds, split, budget, LinearSvm::default())
    }

    pub fn with_svm(
        ds: &'a Dataset,
        split: &TrialSplit,
        budget: usize,
        svm: LinearSvm,
    ) -> Result<Self> {
        let labelled = split.initial_labelled.clone();
        let pool: Vec<usize> = split
            .pool
            .iter()
            .copied()
            .filter(|i| !labelled.contains(i))
            .collect();
        if budget > pool.len() {
            return Err(Error::InvalidBudget {
                budget,
                available: pool.len(),
            });
        }
        let x = ds.features();
        let model = svm.fit(x, ds.labels(), &labelled)?;
        let acc0 = model.accuracy(x, ds.labels(), &split.test)?;
        let nearest = pool
            .iter()
            .map(|&u| {
                labelled
                    .iter()
                    .map(|&l| distance(x.row(u), x.row(l)))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        Ok(Self {
            ds,
            svm,
            labelled,
            pool,
            test: split.test.clone(),
            model,
            acc_history: vec![acc0],
            budget,
            nearest,
            queried: Vec::with_capacity(budget),
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn labelled(&self) -> &[usize] {
        &self.labelled
    }

    /// Dataset indices of the unlabelled pool, in action order.
    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn acc_history(&self) -> &[f64] {
        &self.acc_history
    }

    /// Dataset indices queried so far, in query order.
    pub fn queried(&self) -> &[usize] {
        &self.queried
    }

    pub fn steps(&self) -> usize {
        self.acc_history.len() - 1
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn is_done(&self) -> bool {
        self.steps() >= self.budget || self.pool.is_empty()
    }

    /// Decision values of the current model on the pool, aligned with
    /// [`Episode::pool`].
    pub fn pool_decision_values(&self) -> Vec<f64> {
        let x = self.ds.features();
        self.pool.iter().map(|&i| self.model.score(x.row(i))).collect()
    }

    /// Distances from each pool instance to its nearest labelled instance.
    pub fn pool_min_distances(&self) -> &[f64] {
        &self.nearest
    }

    /// Expert features of the pool, `|U| x 2`: uncertainty `1 - 2|p - 1/2|`
    /// and farthest-first distance normalized by the pool maximum.
    pub fn expert_features(&self) -> Tensor {
        let scores = self.pool_decision_values();
        let max_d = self.nearest.iter().copied().fold(0.0, f64::max);
        let mut out = Tensor::zeros(self.pool.len(), EXPERT_FEATURES);
        for (r, (&s, &d)) in scores.iter().zip(&self.nearest).enumerate() {
            out.set(r, 0, uncertainty(s));
            out.set(r, 1, if max_d > 0.0 { d / max_d } else { 0.0 });
        }
        out
    }

    /// Raw features with expert features appended for the pool (`Z_u`) and the
    /// labelled set (`Z_l`), plus the current posterior of every row. Labelled
    /// instances have zero farthest-first distance by definition.
    pub fn observe(&self) -> Observation {
        let x = self.ds.features();
        let d = x.cols() + EXPERT_FEATURES;
        let xi = self.expert_features();
        let mut z_pool = Tensor::zeros(self.pool.len(), d);
        let mut post_pool = Vec::with_capacity(self.pool.len());
        for (r, &i) in self.pool.iter().enumerate() {
            let row = x.row(i);
            let s = self.model.score(row);
            post_pool.push(logistic(s));
            let dst = &mut z_pool.data_mut()[r * d..(r + 1) * d];
            dst[..row.len()].copy_from_slice(row);
            dst[row.len()] = xi.get(r, 0);
            dst[row.len() + 1] = xi.get(r, 1);
        }
        let mut z_labelled = Tensor::zeros(self.labelled.len(), d);
        let mut post_labelled = Vec::with_capacity(self.labelled.len());
        for (r, &i) in self.labelled.iter().enumerate() {
            let row = x.row(i);
            let s = self.model.score(row);
            post_labelled.push(logistic(s));
            let dst = &mut z_labelled.data_mut()[r * d..(r + 1) * d];
            dst[..row.len()].copy_from_slice(row);
            dst[row.len()] = uncertainty(s);
            dst[row.len() + 1] = 0.0;
        }
        Observation {
            z_pool,
            z_labelled,
            post_pool,
            post_labelled,
        }
    }

    /// Queries pool position `action`, refits, and returns
    /// `Acc_{t+1} - Acc_t`.
    pub fn step(&mut self, action: usize) -> Result<f64> {
        if self.is_done() {
            return Err(Error::EpisodeDone {
                steps: self.steps(),
            });
        }
        if action >= self.pool.len() {
            return Err(Error::InvalidAction {
                action,
                pool: self.pool.len(),
            });
        }
        let chosen = self.pool.remove(action);
        self.nearest.remove(action);
        self.labelled.push(chosen);
        self.queried.push(chosen);
        let x = self.ds.features();
        let new_row = x.row(chosen);
        for (d, &u) in self.nearest.iter_mut().zip(&self.pool) {
            *d = d.min(distance(x.row(u), new_row));
        }
        self.model = self.svm.fit(x, self.ds.labels(), &self.labelled)?;
        let acc = self.model.accuracy(x, self.ds.labels(), &self.test)?;
        let prev = *self.acc_history.last().expect("history starts non-empty");
        self.acc_history.push(acc);
        Ok(acc - prev)
    }
}

/// Snapshot of an episode state in the form the query networks consume.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `|U| x (d + 2)`
    pub z_pool: Tensor,
    /// `|L| x (d + 2)`
    pub z_labelled: Tensor,
    pub post_pool: Vec<f64>,
    pub post_labelled: Vec<f64>,
}

impl Observation {
    /// The two expert-feature columns of the pool rows.
    pub fn pool_expert_features(&self) -> Tensor {
        let (n, d) = self.z_pool.shape();
        let mut out = Tensor::zeros(n, EXPERT_FEATURES);
        for r in 0..n {
            out.set(r, 0, self.z_pool.get(r, d - 2));
            out.set(r, 1, self.z_pool.get(r, d - 1));
        }
        out
    }
}

/// `1 - 2 |sigma(s) - 1/2|`, in `[0, 1]`, maximal on the decision boundary.
pub fn uncertainty(score: f64) -> f64 {
    (1.0 - 2.0 * (logistic(score) - 0.5).abs()).clamp(0.0, 1.0)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
