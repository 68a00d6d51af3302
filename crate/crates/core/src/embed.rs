//! Dimension-wise dataset embedding.
//!
//! Each feature column `j` of the augmented data is described by a fixed
//! 120-vector: a 10-bin histogram of its values over the unlabelled pool, the
//! same over the labelled set, and a 10x10 joint histogram of (value bin,
//! posterior bin) over both sets together. Everything is a proportion, so the
//! embedding does not depend on how many instances there are.

use crate::diff::Tensor;
use crate::env::{Episode, Observation};
use crate::error::{Error, Result};

pub const BINS: usize = 10;
pub const REPRESENTATIVE: usize = BINS;
pub const DISCRIMINATIVE: usize = BINS * BINS;
/// Width of one dimension's embedding.
pub const EMBED_DIM: usize = 2 * REPRESENTATIVE + DISCRIMINATIVE;

const TOLERANCE: f64 = 1e-9;

/// `min(floor(10 v), 9)` for `v` in `[0, 1]` (with a small tolerance).
pub fn bin(v: f64) -> Result<usize> {
    if !(-TOLERANCE..=1.0 + TOLERANCE).contains(&v) {
        return Err(Error::Domain { value: v });
    }
    Ok(((v.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1))
}

/// Normalized 10-bin histogram; an empty input gives all zeros.
pub fn representative_embedding(values: &[f64]) -> Result<[f64; REPRESENTATIVE]> {
    let mut h = [0.0; REPRESENTATIVE];
    for &v in values {
        h[bin(v)?] += 1.0;
    }
    if !values.is_empty() {
        let n = values.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
    }
    Ok(h)
}

/// Normalized joint histogram, feature bin major: slot `10 f + p`.
pub fn discriminative_embedding(values: &[f64], posteriors: &[f64]) -> Result<[f64; DISCRIMINATIVE]> {
    if values.len() != posteriors.len() {
        return Err(Error::Shape(format!(
            "{} values but {} posteriors",
            values.len(),
            posteriors.len()
        )));
    }
    let mut h = [0.0; DISCRIMINATIVE];
    for (&v, &p) in values.iter().zip(posteriors) {
        h[BINS * bin(v)? + bin(p)?] += 1.0;
    }
    if !values.is_empty() {
        let n = values.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
    }
    Ok(h)
}

/// `d x 120` embedding of every column of the augmented pool and labelled
/// matrices.
pub fn build_dimension_embedding(obs: &Observation) -> Result<Tensor> {
    let (zu, zl) = (&obs.z_pool, &obs.z_labelled);
    if zu.cols() != zl.cols() {
        return Err(Error::Shape(format!(
            "pool has {} columns, labelled set has {}",
            zu.cols(),
            zl.cols()
        )));
    }
    if obs.post_pool.len() != zu.rows() || obs.post_labelled.len() != zl.rows() {
        return Err(Error::Shape("posterior count does not match rows".into()));
    }
    let d = zu.cols();
    let posteriors: Vec<f64> = obs
        .post_pool
        .iter()
        .chain(&obs.post_labelled)
        .copied()
        .collect();
    let mut out = Tensor::zeros(d, EMBED_DIM);
    let mut col_u = Vec::with_capacity(zu.rows());
    let mut col_l = Vec::with_capacity(zl.rows());
    let mut col_all = Vec::with_capacity(zu.rows() + zl.rows());
    for j in 0..d {
        col_u.clear();
        col_l.clear();
        col_all.clear();
        col_u.extend((0..zu.rows()).map(|r| zu.get(r, j)));
        col_l.extend((0..zl.rows()).map(|r| zl.get(r, j)));
        col_all.extend(col_u.iter().chain(&col_l));
        let row = &mut out.data_mut()[j * EMBED_DIM..(j + 1) * EMBED_DIM];
        row[..REPRESENTATIVE].copy_from_slice(&representative_embedding(&col_u)?);
        row[REPRESENTATIVE..2 * REPRESENTATIVE].copy_from_slice(&representative_embedding(&col_l)?);
        row[2 * REPRESENTATIVE..].copy_from_slice(&discriminative_embedding(&col_all, &posteriors)?);
    }
    Ok(out)
}

/// Embedding of an episode's current state.
pub fn embed_episode(ep: &Episode<'_>) -> Result<Tensor> {
    build_dimension_embedding(&ep.observe())
}
