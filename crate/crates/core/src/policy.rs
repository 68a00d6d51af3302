//! Query networks.
//!
//! The meta-network variant maps each row of a `d x 120` dimension embedding
//! through two small MLPs to obtain a `d x 100` encoder `W_e` and a `100 x d`
//! decoder `W_d`. Pool instances are encoded as `ReLU(z W_e)` and scored by a
//! trunk shared across rows (100 -> 50 -> 10 -> 1); a softmax over the pool
//! gives the query distribution. The single-model variant replaces the
//! synthesized encoder with a learned `2 x 100` matrix applied to the expert
//! features only.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diff::{NodeId, Tape, Tensor};
use crate::embed::{build_dimension_embedding, EMBED_DIM};
use crate::env::{Episode, Observation, EXPERT_FEATURES};
use crate::error::{Error, Result};
use crate::seed;

/// Width of the encoded instance representation.
pub const HIDDEN: usize = 100;
pub const META_HIDDEN: usize = 100;
pub const TRUNK: [usize; 4] = [HIDDEN, 50, 10, 1];

const PROB_TOLERANCE: f64 = 1e-6;

/// Glorot-uniform `fan_in x fan_out` matrix.
fn glorot(fan_in: usize, fan_out: usize, rng_seed: u64) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = seed::rng(rng_seed);
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("length matches shape")
}

/// Two-layer perceptron `in -> hidden (ReLU) -> out (linear)` with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    fn init(sizes: [usize; 3], rng_seed: u64) -> Self {
        Self {
            w1: glorot(sizes[0], sizes[1], seed::derive(rng_seed, &[0])),
            b1: Tensor::zeros(1, sizes[1]),
            w2: glorot(sizes[1], sizes[2], seed::derive(rng_seed, &[1])),
            b2: Tensor::zeros(1, sizes[2]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Encoder and decoder synthesizers.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    pub enc: Mlp,
    pub dec: Mlp,
}

impl MetaParams {
    pub fn init(rng_seed: u64) -> Self {
        let sizes = [EMBED_DIM, META_HIDDEN, HIDDEN];
        Self {
            enc: Mlp::init(sizes, seed::derive(rng_seed, &[0])),
            dec: Mlp::init(sizes, seed::derive(rng_seed, &[1])),
        }
    }
}

/// Row-shared scoring trunk `100 -> 50 -> 10 -> 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl PolicyParams {
    pub fn init(rng_seed: u64) -> Self {
        let s = |k| seed::derive(rng_seed, &[k]);
        Self {
            w1: glorot(TRUNK[0], TRUNK[1], s(0)),
            b1: Tensor::zeros(1, TRUNK[1]),
            w2: glorot(TRUNK[1], TRUNK[2], s(1)),
            b2: Tensor::zeros(1, TRUNK[2]),
            w3: glorot(TRUNK[2], TRUNK[3], s(2)),
            b3: Tensor::zeros(1, TRUNK[3]),
        }
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Meta-network synthesizes the encoder from the dataset embedding.
    Meta,
    /// One fixed encoder over the expert features only.
    Single,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Meta => "meta",
            ModelKind::Single => "single",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(ModelKind::Meta),
            "single" | "singlerl" => Ok(ModelKind::Single),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

/// All learnable tensors of a query network.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyModel {
    Meta { meta: MetaParams, trunk: PolicyParams },
    Single { input: Tensor, trunk: PolicyParams },
}

/// How the next query is chosen from the policy distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Argmax,
}

/// Parameter nodes bound on a tape, in [`PolicyModel::tensors`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
    kind: ModelKind,
}

impl Bound {
    /// Wraps nodes already placed on a tape, e.g. by a gradient checker.
    pub fn new(kind: ModelKind, ids: Vec<NodeId>) -> Result<Self> {
        let want = PolicyModel::names(kind).len();
        if ids.len() != want {
            return Err(Error::Shape(format!(
                "{kind} model binds {want} tensors, got {}",
                ids.len()
            )));
        }
        Ok(Self { ids, kind })
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Forward nodes of one decision.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `1 x N` query distribution.
    pub probs: NodeId,
    /// Mean squared reconstruction error; `None` for the single-model variant.
    pub recon: Option<NodeId>,
}

impl PolicyModel {
    pub fn init(kind: ModelKind, rng_seed: u64) -> Self {
        let trunk = PolicyParams::init(seed::derive(rng_seed, &[1]));
        match kind {
            ModelKind::Meta => PolicyModel::Meta {
                meta: MetaParams::init(seed::derive(rng_seed, &[0])),
                trunk,
            },
            ModelKind::Single => PolicyModel::Single {
                input: glorot(EXPERT_FEATURES, HIDDEN, seed::derive(rng_seed, &[0])),
                trunk,
            },
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            PolicyModel::Meta { .. } => ModelKind::Meta,
            PolicyModel::Single { .. } => ModelKind::Single,
        }
    }

    /// Tensor names in a fixed order, used by the optimizer and checkpoints.
    pub fn names(kind: ModelKind) -> Vec<&'static str> {
        let trunk = [
            "trunk.w1", "trunk.b1", "trunk.w2", "trunk.b2", "trunk.w3", "trunk.b3",
        ];
        let mut out = match kind {
            ModelKind::Meta => vec![
                "enc.w1", "enc.b1", "enc.w2", "enc.b2", "dec.w1", "dec.b1", "dec.w2", "dec.b2",
            ],
            ModelKind::Single => vec!["input.w"],
        };
        out.extend(trunk);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            PolicyModel::Meta { meta, trunk } => meta
                .enc
                .tensors()
                .into_iter()
                .chain(meta.dec.tensors())
                .chain(trunk.tensors())
                .collect(),
            PolicyModel::Single { input, trunk } => {
                std::iter::once(input).chain(trunk.tensors()).collect()
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PolicyModel::Meta { meta, trunk } => meta
                .enc
                .tensors_mut()
                .into_iter()
                .chain(meta.dec.tensors_mut())
                .chain(trunk.tensors_mut())
                .collect(),
            PolicyModel::Single { input, trunk } => {
                std::iter::once(input).chain(trunk.tensors_mut()).collect()
            }
        }
    }

    /// Rebuilds a model from tensors in [`PolicyModel::names`] order.
    pub fn from_tensors(kind: ModelKind, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::init(kind, 0);
        let slots = model.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "{kind} model has {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let ids = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            ids,
            kind: self.kind(),
        }
    }

    /// Records one decision on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, obs: &Observation) -> Result<Forward> {
        if obs.z_pool.rows() == 0 {
            return Err(Error::EmptyPool);
        }
        let p = &bound.ids;
        match bound.kind {
            ModelKind::Meta => {
                let emb = tape.constant(build_dimension_embedding(obs)?);
                let (we, wd) = meta_forward(tape, &p[..8], emb)?;
                let z = tape.constant(obs.z_pool.clone());
                let u = tape.matmul(z, we)?;
                let u = tape.relu(u);
                let probs = trunk_forward(tape, &p[8..], u)?;
                let zhat = tape.matmul(u, wd)?;
                let recon = tape.mse(zhat, z)?;
                Ok(Forward {
                    probs,
                    recon: Some(recon),
                })
            }
            ModelKind::Single => {
                if obs.z_pool.cols() < crate::env::EXPERT_FEATURES {
                    return Err(Error::Shape(format!(
                        "pool rows have {} columns, fewer than the expert features",
                        obs.z_pool.cols()
                    )));
                }
                let xi = tape.constant(obs.pool_expert_features());
                let u = tape.matmul(xi, p[0])?;
                let u = tape.relu(u);
                let probs = trunk_forward(tape, &p[1..], u)?;
                Ok(Forward { probs, recon: None })
            }
        }
    }

    /// Query distribution for an observation, without recording gradients.
    pub fn probabilities(&self, obs: &Observation) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &bound, obs)?;
        Ok(tape.value(fwd.probs).data().to_vec())
    }

    /// Chooses the next pool position for `ep`.
    pub fn act(&self, ep: &Episode<'_>, mode: ActionMode, rng_seed: u64) -> Result<usize> {
        let probs = self.probabilities(&ep.observe())?;
        sample_action(&probs, mode, rng_seed)
    }
}

/// Synthesized `(W_e, W_d)` nodes from a `d x 120` embedding node. `p` holds
/// the encoder then decoder MLP tensors.
pub fn meta_forward(tape: &mut Tape, p: &[NodeId], emb: NodeId) -> Result<(NodeId, NodeId)> {
    if p.len() != 8 {
        return Err(Error::Shape(format!("meta-network takes 8 tensors, got {}", p.len())));
    }
    if tape.value(emb).cols() != EMBED_DIM {
        return Err(Error::Shape(format!(
            "embedding has {} columns, expected {EMBED_DIM}",
            tape.value(emb).cols()
        )));
    }
    let we = mlp_forward(tape, &p[..4], emb)?;
    let wd = mlp_forward(tape, &p[4..], emb)?;
    let wd = tape.transpose(wd);
    Ok((we, wd))
}

fn mlp_forward(tape: &mut Tape, p: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = tape.matmul(x, p[0])?;
    let h = tape.add_bias(h, p[1])?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p[2])?;
    tape.add_bias(o, p[3])
}

/// Scores every row of the `N x 100` encoding and returns the `1 x N`
/// softmax.
pub fn trunk_forward(tape: &mut Tape, p: &[NodeId], u: NodeId) -> Result<NodeId> {
    if p.len() != 6 {
        return Err(Error::Shape(format!("trunk takes 6 tensors, got {}", p.len())));
    }
    if tape.value(u).rows() == 0 {
        return Err(Error::EmptyPool);
    }
    let mut h = u;
    for (k, layer) in p.chunks(2).enumerate() {
        h = tape.matmul(h, layer[0])?;
        h = tape.add_bias(h, layer[1])?;
        if k < 2 {
            h = tape.relu(h);
        }
    }
    let scores = tape.transpose(h);
    tape.row_softmax(scores)
}

/// Draws an index from `probs` (or takes the first maximum).
pub fn sample_action(probs: &[f64], mode: ActionMode, rng_seed: u64) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    match mode {
        ActionMode::Argmax => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        ActionMode::Sample => {
            let u: f64 = seed::rng(rng_seed).gen::<f64>() * total;
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    acc += p;
                    last = i;
                    if u < acc {
                        return Ok(i);
                    }
                }
            }
            Ok(last)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(n: usize, d: usize, s: u64) -> Observation {
        let mut rng = seed::rng(s);
        let mut m = |r: usize| {
            Tensor::from_vec(r, d, (0..r * d).map(|_| rng.gen::<f64>()).collect()).unwrap()
        };
        let (z_pool, z_labelled) = (m(n), m(3));
        Observation {
            z_pool,
            z_labelled,
            post_pool: (0..n).map(|i| i as f64 / n as f64).collect(),
            post_labelled: vec![0.1, 0.5, 0.9],
        }
    }

    #[test]
    fn shapes_and_names_line_up() {
        for kind in [ModelKind::Meta, ModelKind::Single] {
            let m = PolicyModel::init(kind, 3);
            assert_eq!(PolicyModel::names(kind).len(), m.tensors().len());
            let back = PolicyModel::from_tensors(kind, m.tensors().into_iter().cloned().collect());
            assert_eq!(back.unwrap(), m);
        }
        let m = PolicyModel::init(ModelKind::Meta, 3);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let emb = tape.constant(Tensor::zeros(3, EMBED_DIM));
        let (we, wd) = meta_forward(&mut tape, &b.ids()[..8], emb).unwrap();
        assert_eq!(tape.value(we).shape(), (3, HIDDEN));
        assert_eq!(tape.value(wd).shape(), (HIDDEN, 3));
    }

    #[test]
    fn singleton_pool_is_certain() {
        for kind in [ModelKind::Meta, ModelKind::Single] {
            let m = PolicyModel::init(kind, 1);
            let p = m.probabilities(&obs(1, 4, 2)).unwrap();
            assert_eq!(p, vec![1.0]);
        }
    }

    #[test]
    fn zero_meta_weights_give_zero_encoder() {
        let mut m = PolicyModel::init(ModelKind::Meta, 1);
        if let PolicyModel::Meta { meta, .. } = &mut m {
            for t in meta.enc.tensors_mut() {
                t.scale_in_place(0.0);
            }
        }
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let emb = tape.constant(build_dimension_embedding(&obs(5, 3, 1)).unwrap());
        let (we, _) = meta_forward(&mut tape, &b.ids()[..8], emb).unwrap();
        assert_eq!(tape.value(we).max_abs(), 0.0);
    }

    #[test]
    fn sample_action_examples() {
        assert_eq!(sample_action(&[1.0], ActionMode::Sample, 5).unwrap(), 0);
        assert_eq!(sample_action(&[0.2, 0.5, 0.3], ActionMode::Argmax, 0).unwrap(), 1);
        assert_eq!(sample_action(&[0.4, 0.2, 0.4], ActionMode::Argmax, 0).unwrap(), 0);
        assert_eq!(sample_action(&[0.0, 1.0, 0.0], ActionMode::Sample, 9).unwrap(), 1);
        for bad in [&[][..], &[0.5, 0.6], &[1.2, -0.2], &[f64::NAN, 1.0]] {
            assert!(matches!(
                sample_action(bad, ActionMode::Sample, 0),
                Err(Error::InvalidDistribution(_))
            ));
        }
        assert!(sample_action(&[0.5, 0.5 + 5e-7], ActionMode::Argmax, 0).is_ok());
    }

    #[test]
    fn empty_pool_is_rejected() {
        let m = PolicyModel::init(ModelKind::Meta, 0);
        let mut o = obs(3, 4, 0);
        o.z_pool = Tensor::zeros(0, 4);
        o.post_pool.clear();
        assert!(matches!(m.probabilities(&o), Err(Error::EmptyPool)));
    }
}
