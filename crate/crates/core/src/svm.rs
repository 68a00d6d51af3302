//! Class-balanced linear SVM trained by deterministic full-batch projected
//! subgradient descent.
//!
//! Objective over a labelled set `L`:
//!
//! ```text
//! lambda/2 |w|^2 + 1/|L| sum_i c(y_i) max(0, 1 - y_i (w.x_i + b)),   c(y) = |L| / (2 |L_y|)
//! ```
//!
//! Step size at iteration `t` is `1 / (lambda (t + 1))`, the weight vector is
//! projected onto the ball of radius `1/sqrt(lambda)`, the bias is not
//! regularized, and the lowest-objective iterate is returned.

use crate::data::Label;
use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `w.x + b`
    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "instance of length {} for a model of dimension {}",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(self.score(x))
    }

    #[inline]
    pub(crate) fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// Logistic link of the decision value.
    pub fn posterior(&self, x: &[f64]) -> Result<f64> {
        self.decision_value(x).map(logistic)
    }

    /// Sign prediction; a decision value of exactly zero predicts +1.
    pub fn predict(&self, x: &[f64]) -> Label {
        if self.score(x) >= 0.0 {
            1
        } else {
            -1
        }
    }

    /// Fraction of `rows` of `x` whose prediction matches `y`.
    pub fn accuracy(&self, x: &Tensor, y: &[Label], rows: &[usize]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "test features have {} columns, model has {}",
                x.cols(),
                self.dim()
            )));
        }
        let hits = rows
            .iter()
            .filter(|&&i| self.predict(x.row(i)) == y[i])
            .count();
        Ok(hits as f64 / rows.len() as f64)
    }
}

pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solver settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSvm {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for LinearSvm {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            iterations: 500,
        }
    }
}

impl LinearSvm {
    /// Fits on the instances `rows` of `x` (duplicates allowed, as in
    /// bootstrap resamples).
    pub fn fit(&self, x: &Tensor, y: &[Label], rows: &[usize]) -> Result<LinearModel> {
        let n_pos = rows.iter().filter(|&&i| y[i] == 1).count();
        let n_neg = rows.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::MissingClass);
        }
        let d = x.cols();
        // c(y) / |L| folded together
        let w_pos = 1.0 / (2.0 * n_pos as f64);
        let w_neg = 1.0 / (2.0 * n_neg as f64);
        let coef = |i: usize| if y[i] == 1 { w_pos } else { -w_neg };

        let radius = 1.0 / self.lambda.sqrt();
        let mut model = LinearModel::zeros(d);
        let mut best = model.clone();
        let mut best_obj = self.objective_with(&model, x, y, rows, w_pos, w_neg);
        let mut grad_w = vec![0.0; d];
        for t in 0..self.iterations {
            let eta = 1.0 / (self.lambda * (t as f64 + 1.0));
            grad_w
                .iter_mut()
                .zip(&model.weights)
                .for_each(|(g, w)| *g = self.lambda * w);
            let mut grad_b = 0.0;
            for &i in rows {
                let xi = x.row(i);
                let yi = f64::from(y[i]);
                if yi * model.score(xi) < 1.0 {
                    // coef already carries the sign of y
                    let c = coef(i);
                    grad_w.iter_mut().zip(xi).for_each(|(g, v)| *g -= c * v);
                    grad_b -= c;
                }
            }
            model
                .weights
                .iter_mut()
                .zip(&grad_w)
                .for_each(|(w, g)| *w -= eta * g);
            model.bias -= eta * grad_b;
            let norm = dot(&model.weights, &model.weights).sqrt();
            if norm > radius {
                let s = radius / norm;
                model.weights.iter_mut().for_each(|w| *w *= s);
            }
            let obj = self.objective_with(&model, x, y, rows, w_pos, w_neg);
            if obj < best_obj {
                best_obj = obj;
                best.clone_from(&model);
            }
        }
        Ok(best)
    }

    /// Regularized class-balanced hinge objective of `model` on `rows`.
    pub fn objective(&self, model: &LinearModel, x: &Tensor, y: &[Label], rows: &[usize]) -> f64 {
        let n_pos = rows.iter().filter(|&&i| y[i] == 1).count();
        let n_neg = rows.len() - n_pos;
        let w = |k: usize| 1.0 / (2.0 * k.max(1) as f64);
        self.objective_with(model, x, y, rows, w(n_pos), w(n_neg))
    }

    fn objective_with(
        &self,
        model: &LinearModel,
        x: &Tensor,
        y: &[Label],
        rows: &[usize],
        w_pos: f64,
        w_neg: f64,
    ) -> f64 {
        let reg = 0.5 * self.lambda * dot(&model.weights, &model.weights);
        let loss: f64 = rows
            .iter()
            .map(|&i| {
                let yi = f64::from(y[i]);
                let h = (1.0 - yi * model.score(x.row(i))).max(0.0);
                h * if y[i] == 1 { w_pos } else { w_neg }
            })
            .sum();
        reg + loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_points() -> (Tensor, Vec<Label>) {
        (
            Tensor::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap(),
            vec![-1, 1],
        )
    }

    #[test]
    fn symmetric_pair_separates_at_origin() {
        let (x, y) = two_points();
        let m = LinearSvm::default().fit(&x, &y, &[0, 1]).unwrap();
        assert_eq!(m.predict(&[0.9, 0.0]), 1);
        assert_eq!(m.predict(&[-0.9, 0.0]), -1);
        assert!(m.decision_value(&[0.0, 0.0]).unwrap().abs() < 1e-3);
    }

    #[test]
    fn duplicated_class_keeps_predictions() {
        let x = Tensor::from_rows(&[[-1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
        let y = vec![-1, 1, 1, 1];
        let svm = LinearSvm::default();
        let base = svm.fit(&x, &y, &[0, 1]).unwrap();
        let dup = svm.fit(&x, &y, &[0, 1, 2, 3]).unwrap();
        for probe in [[0.9, 0.0], [-0.9, 0.0], [0.2, 1.0], [-0.2, -3.0], [0.5, 0.5]] {
            assert_eq!(base.predict(&probe), dup.predict(&probe), "{probe:?}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let (x, _) = two_points();
        assert!(matches!(
            LinearSvm::default().fit(&x, &[1, 1], &[0, 1]),
            Err(Error::MissingClass)
        ));
    }

    #[test]
    fn decision_value_examples() {
        let m = LinearModel {
            weights: vec![0.0, 0.0],
            bias: 0.3,
        };
        assert_eq!(m.decision_value(&[5.0, -2.0]).unwrap(), 0.3);
        let m = LinearModel {
            weights: vec![1.0, -1.0],
            bias: 0.0,
        };
        assert_eq!(m.decision_value(&[0.5, 0.5]).unwrap(), 0.0);
        let m = LinearModel {
            weights: vec![2.0],
            bias: -1.0,
        };
        assert_eq!(m.decision_value(&[1.0]).unwrap(), 1.0);
        assert!(matches!(m.decision_value(&[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn posterior_examples() {
        let m = |b: f64| LinearModel {
            weights: vec![0.0],
            bias: b,
        };
        assert_eq!(m(0.0).posterior(&[1.0]).unwrap(), 0.5);
        assert!((m(1e6).posterior(&[1.0]).unwrap() - 1.0).abs() < 1e-9);
        for v in [0.1, 1.7, 12.0, 40.0] {
            let p = m(v).posterior(&[0.0]).unwrap();
            let q = m(-v).posterior(&[0.0]).unwrap();
            assert!((p + q - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn accuracy_examples() {
        let x = Tensor::from_rows(&[[1.0], [2.0], [-1.0], [-2.0]]).unwrap();
        let m = LinearModel {
            weights: vec![1.0],
            bias: 0.0,
        };
        let rows = [0, 1, 2, 3];
        assert_eq!(m.accuracy(&x, &[1, 1, -1, -1], &rows).unwrap(), 1.0);
        assert_eq!(m.accuracy(&x, &[-1, -1, 1, 1], &rows).unwrap(), 0.0);
        assert_eq!(m.accuracy(&x, &[1, 1, -1, 1], &rows).unwrap(), 0.75);
        assert!(matches!(m.accuracy(&x, &[1; 4], &[]), Err(Error::EmptyEvaluation)));
        let tie = LinearModel {
            weights: vec![0.0],
            bias: 0.0,
        };
        assert_eq!(tie.accuracy(&x, &[1, 1, 1, -1], &rows).unwrap(), 0.75);
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let x = Tensor::from_rows(&[[0.1, 0.9], [0.4, 0.2], [0.8, 0.7], [0.3, 0.3], [0.9, 0.1]])
            .unwrap();
        let y = vec![1, -1, 1, -1, -1];
        let svm = LinearSvm::default();
        let a = svm.fit(&x, &y, &[0, 1, 2, 3, 4]).unwrap();
        let b = svm.fit(&x, &y, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(a.bias.to_bits(), b.bias.to_bits());
        for (p, q) in a.weights.iter().zip(&b.weights) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}
