#![allow(dead_code)]

use std::path::PathBuf;

use al_policy::diff::Tensor;
use al_policy::{Dataset, Manifest, TrialSplit};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn manifest() -> Manifest {
    Manifest::from_file(&data_dir().join("manifest.txt")).expect("bundled manifest")
}

pub fn load(name: &str) -> Dataset {
    manifest().load(name).expect("bundled dataset")
}

/// Builds a dataset from literal rows. Include 0 and 1 in every column to keep
/// the rescaling an identity.
pub fn literal(name: &str, rows: &[[f64; 2]], labels: &[i8]) -> Dataset {
    Dataset::new(name, Tensor::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
}

pub fn split(pool: &[usize], test: &[usize], initial: &[usize]) -> TrialSplit {
    TrialSplit {
        trial_index: 0,
        pool: pool.to_vec(),
        test: test.to_vec(),
        initial_labelled: initial.to_vec(),
    }
}

/// `n` points in `d` dimensions, labelled by the sign of a fixed direction.
pub fn synthetic(name: &str, n: usize, d: usize, seed: u64) -> Dataset {
    use rand::Rng;
    let mut rng = al_policy::seed::rng(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = row.iter().enumerate().map(|(j, v)| (j as f64 + 1.0) * (v - 0.5)).sum();
        labels.push(if i % 2 == 0 || s > 0.3 { 1 } else { -1 });
        rows.push(row);
    }
    // keep both classes represented
    labels[1] = -1;
    labels[3] = -1;
    Dataset::new(name, Tensor::from_rows(&rows).unwrap(), labels).unwrap()
}

/// Reverse-mode against numeric gradients of a two-step policy objective
/// `sum_t w_lp log pi(a_t) + w_h H_t / T - w_r A_t / T`
/// on a 3-feature dataset (5 columns with the expert features) whose first
/// decision sees 8 pool instances.
pub fn policy_objective_error(
    kind: al_policy::ModelKind,
    w_lp: f64,
    w_h: f64,
    w_r: f64,
    seed: u64,
) -> al_policy::diff::FdReport {
    use al_policy::diff::{finite_diff_check_piecewise, NodeId, Tape};
    use al_policy::policy::{sample_action, Bound};
    use al_policy::{ActionMode, Episode, PolicyModel};

    let ds = synthetic("fd", 20, 3, seed);
    let split = al_policy::make_trial_split(&ds, 0, seed).unwrap();
    let mut ep = Episode::new(&ds, &split, 2).unwrap();
    assert_eq!(ep.pool().len(), 8);
    let model = PolicyModel::init(kind, seed);
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    while !ep.is_done() {
        let o = ep.observe();
        assert_eq!(o.z_pool.cols(), 5);
        let a = sample_action(&model.probabilities(&o).unwrap(), ActionMode::Sample, seed + ep.steps() as u64)
            .unwrap();
        ep.step(a).unwrap();
        obs.push(o);
        actions.push(a);
    }
    let horizon = obs.len() as f64;
    let build = |tape: &mut Tape, ids: &[NodeId]| {
        let bound = Bound::new(kind, ids.to_vec())?;
        let mut total: Option<NodeId> = None;
        for (o, &a) in obs.iter().zip(&actions) {
            let fwd = model.forward(tape, &bound, o)?;
            let lp = tape.log_pick(fwd.probs, 0, a)?;
            let lp = tape.scale(lp, w_lp);
            let nh = tape.neg_entropy(fwd.probs);
            let h = tape.scale(nh, -w_h / horizon);
            let mut term = tape.add(lp, h)?;
            if let Some(r) = fwd.recon {
                let r = tape.scale(r, -w_r / horizon);
                term = tape.add(term, r)?;
            }
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        Ok(total.expect("two steps"))
    };
    let params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    finite_diff_check_piecewise(build, &params, 1e-5).unwrap()
}
