//! Classic query strategies: random, uncertainty, farthest-first and
//! query-by-bagging. All ties resolve to the lowest pool position.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::{Dataset, TrialSplit};
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_COMMITTEE: usize = 5;
const BOOTSTRAP_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Random,
    Uncertainty,
    Dff,
    Qbb,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Uncertainty,
        StrategyKind::Dff,
        StrategyKind::Random,
        StrategyKind::Qbb,
    ];

    /// Column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Random => "RAND",
            StrategyKind::Uncertainty => "Uncertainty",
            StrategyKind::Dff => "DFF",
            StrategyKind::Qbb => "QBB",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::Random => "random",
            StrategyKind::Uncertainty => "uncertainty",
            StrategyKind::Dff => "dff",
            StrategyKind::Qbb => "qbb",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "rand" => Ok(StrategyKind::Random),
            "uncertainty" | "us" => Ok(StrategyKind::Uncertainty),
            "dff" => Ok(StrategyKind::Dff),
            "qbb" => Ok(StrategyKind::Qbb),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

fn nonempty(ep: &Episode<'_>) -> Result<()> {
    if ep.pool().is_empty() {
        Err(Error::EmptyPool)
    } else {
        Ok(())
    }
}

/// First index of the maximum under `key`; later equal keys never win.
fn first_argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub fn select_random(ep: &Episode<'_>, rng_seed: u64) -> Result<usize> {
    nonempty(ep)?;
    Ok(seed::rng(rng_seed).gen_range(0..ep.pool().len()))
}

/// Pool position with the smallest `|w.x + b|`.
pub fn select_uncertainty(ep: &Episode<'_>) -> Result<usize> {
    nonempty(ep)?;
    Ok(first_argmax(
        ep.pool_decision_values().into_iter().map(|v| -v.abs()),
    ))
}

/// Pool position farthest from its nearest labelled instance.
pub fn select_dff(ep: &Episode<'_>) -> Result<usize> {
    nonempty(ep)?;
    Ok(first_argmax(ep.pool_min_distances().iter().copied()))
}

/// Query-by-bagging with vote entropy. Ties fall back to the smallest
/// `|mean decision value|`, then to the lowest pool position.
pub fn select_qbb(ep: &Episode<'_>, committee_size: usize, rng_seed: u64) -> Result<usize> {
    nonempty(ep)?;
    if committee_size < 2 {
        return Err(Error::Config(format!(
            "committee size must be at least 2, got {committee_size}"
        )));
    }
    let ds = ep.dataset();
    let (x, y) = (ds.features(), ds.labels());
    let labelled = ep.labelled();
    let svm = crate::svm::LinearSvm::default();
    let mut rng = seed::rng(rng_seed);
    let n = ep.pool().len();
    let mut positive_votes = vec![0usize; n];
    let mut score_sum = vec![0.0; n];
    for _ in 0..committee_size {
        let mut sample: Vec<usize> = Vec::with_capacity(labelled.len());
        for _ in 0..BOOTSTRAP_RETRIES {
            sample.clear();
            sample.extend((0..labelled.len()).map(|_| labelled[rng.gen_range(0..labelled.len())]));
            let pos = sample.iter().filter(|&&i| y[i] == 1).count();
            if pos > 0 && pos < sample.len() {
                break;
            }
        }
        let pos = sample.iter().filter(|&&i| y[i] == 1).count();
        if pos == 0 || pos == sample.len() {
            sample.clear();
            sample.extend_from_slice(labelled);
        }
        let member = svm.fit(x, y, &sample)?;
        for (k, &u) in ep.pool().iter().enumerate() {
            let s = member.score(x.row(u));
            score_sum[k] += s;
            if s >= 0.0 {
                positive_votes[k] += 1;
            }
        }
    }
    let c = committee_size as f64;
    let entropy = |v: usize| {
        [v as f64 / c, (committee_size - v) as f64 / c]
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum::<f64>()
    };
    let mut best = 0;
    for k in 1..n {
        let (hk, hb) = (entropy(positive_votes[k]), entropy(positive_votes[best]));
        let (mk, mb) = (score_sum[k].abs() / c, score_sum[best].abs() / c);
        if hk > hb || (hk == hb && mk < mb) {
            best = k;
        }
    }
    Ok(best)
}

/// Picks the next action for `kind` at the current step.
pub fn select(kind: StrategyKind, ep: &Episode<'_>, step_seed: u64) -> Result<usize> {
    match kind {
        StrategyKind::Random => select_random(ep, step_seed),
        StrategyKind::Uncertainty => select_uncertainty(ep),
        StrategyKind::Dff => select_dff(ep),
        StrategyKind::Qbb => select_qbb(ep, DEFAULT_COMMITTEE, step_seed),
    }
}

/// Runs a whole episode driven by `kind` and returns `Acc_0..Acc_T`.
pub fn run_episode(
    ds: &Dataset,
    split: &TrialSplit,
    kind: StrategyKind,
    budget: usize,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    let mut ep = Episode::new(ds, split, budget)?;
    while !ep.is_done() {
        let a = select(kind, &ep, seed::derive(rng_seed, &[ep.steps() as u64]))?;
        ep.step(a)?;
    }
    Ok(ep.acc_history().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_trial_split;
    use crate::diff::Tensor;

    fn line_dataset() -> Dataset {
        let rows: Vec<[f64; 2]> = (0..40)
            .map(|i| [i as f64 / 39.0, ((i * 7) % 11) as f64 / 10.0])
            .collect();
        let labels = (0..40).map(|i| if i >= 20 { 1 } else { -1 }).collect();
        Dataset::new("line", Tensor::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn parse_and_display() {
        for k in StrategyKind::ALL {
            assert_eq!(k.to_string().parse::<StrategyKind>().unwrap(), k);
        }
        assert_eq!("US".parse::<StrategyKind>().unwrap(), StrategyKind::Uncertainty);
        assert!("quire".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn argmax_ties_take_first() {
        assert_eq!(first_argmax([0.5, 0.9, 0.9]), 1);
        assert_eq!(first_argmax([-0.5, -0.1, -0.9].map(|v: f64| -v.abs())), 1);
        assert_eq!(first_argmax([0.2_f64, -0.2].map(|v| -v.abs())), 0);
    }

    #[test]
    fn random_is_seeded() {
        let ds = line_dataset();
        let split = make_trial_split(&ds, 0, 1).unwrap();
        let ep = Episode::new(&ds, &split, 3).unwrap();
        let a = select_random(&ep, 77).unwrap();
        assert_eq!(a, select_random(&ep, 77).unwrap());
        assert!(a < ep.pool().len());
    }

    #[test]
    fn selectors_match_expert_feature_argmax() {
        let ds = line_dataset();
        for trial in 0..5 {
            let split = make_trial_split(&ds, trial, 11).unwrap();
            let mut ep = Episode::new(&ds, &split, 6).unwrap();
            while !ep.is_done() {
                let xi = ep.expert_features();
                let unc = (0..xi.rows()).map(|r| xi.get(r, 0));
                let dff = (0..xi.rows()).map(|r| xi.get(r, 1));
                let us = select_uncertainty(&ep).unwrap();
                let far = select_dff(&ep).unwrap();
                assert_eq!(xi.get(us, 0), xi.get(first_argmax(unc), 0));
                assert_eq!(far, first_argmax(dff));
                ep.step(us).unwrap();
            }
        }
    }

    #[test]
    fn qbb_is_deterministic_and_in_range() {
        let ds = line_dataset();
        let split = make_trial_split(&ds, 2, 2).unwrap();
        let mut ep = Episode::new(&ds, &split, 6).unwrap();
        for _ in 0..3 {
            ep.step(0).unwrap();
        }
        let a = select_qbb(&ep, 5, 99).unwrap();
        assert_eq!(a, select_qbb(&ep, 5, 99).unwrap());
        assert!(a < ep.pool().len());
        assert!(select_qbb(&ep, 1, 99).is_err());
    }

    #[test]
    fn qbb_with_unanimous_committee_picks_least_confident() {
        // Two labelled points only: every bootstrap that contains both classes
        // is the labelled set itself, so all members agree.
        let ds = line_dataset();
        let split = make_trial_split(&ds, 3, 3).unwrap();
        let ep = Episode::new(&ds, &split, 2).unwrap();
        assert_eq!(select_qbb(&ep, 5, 1).unwrap(), select_uncertainty(&ep).unwrap());
    }

    #[test]
    fn budget_zero_history_has_one_entry() {
        let ds = line_dataset();
        let split = make_trial_split(&ds, 0, 0).unwrap();
        let h = run_episode(&ds, &split, StrategyKind::Uncertainty, 0, 0).unwrap();
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn strategies_share_initial_accuracy() {
        let ds = line_dataset();
        let split = make_trial_split(&ds, 5, 5).unwrap();
        let r = run_episode(&ds, &split, StrategyKind::Random, 5, 1).unwrap();
        let u = run_episode(&ds, &split, StrategyKind::Uncertainty, 5, 1).unwrap();
        assert_eq!(r[0], u[0]);
        assert_eq!(r.len(), 6);
    }
}
