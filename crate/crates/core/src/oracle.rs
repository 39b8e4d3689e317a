//! Closed-form gradient norm of a bias-free linear softmax classifier.
//!
//! For `f(x) = softmax(W x)` with cross-entropy loss the gradient of row `j`
//! is `(p_j - 1{j = y}) x`, so the full gradient norm factors as
//! `sqrt(Σ_j (p_j - 1{j = y})²) · ‖x‖₂`. This module computes that product
//! directly and serves as an independent check on backpropagation.

use crate::error::{Error, Result};
use crate::nn::{self, ModelSpec, Params, Tensor2};
use crate::seed;
use rand::Rng;
use rand_distr::StandardNormal;

/// `softmax(W x)` with `W` of shape `classes × dim` and no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weight: Tensor2,
}

impl LinearModel {
    pub fn new(weight: Tensor2) -> Result<Self> {
        if weight.rows() < 2 || weight.cols() < 1 {
            return Err(Error::InvalidSpec(format!(
                "linear model needs >= 2 classes and >= 1 input, got {}x{}",
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(LinearModel { weight })
    }

    /// Views the first layer of a bias-free single-layer network.
    pub fn from_params(params: &nn::Params) -> Result<Self> {
        match params.layers.as_slice() {
            [layer] if layer.bias.is_empty() => LinearModel::new(layer.weight.clone()),
            _ => Err(Error::InvalidSpec(
                "expected a single bias-free layer".into(),
            )),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "linear model input",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let logits: Vec<f64> = (0..self.classes())
            .map(|j| nn::dot(self.weight.row(j), x))
            .collect();
        Ok(nn::softmax(&logits))
    }
}

/// `sqrt(Σ_j (p_j - 1{j = y})²)`: the factor multiplying `‖x‖₂`.
pub fn residual_norm(probs: &[f64], y: usize) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::ClassOutOfRange {
            class: y,
            classes: probs.len(),
        });
    }
    let s: f64 = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let r = if j == y { p - 1.0 } else { p };
            r * r
        })
        .sum();
    Ok(s.sqrt())
}

pub fn closed_form_grad_norm(model: &LinearModel, x: &[f64], y: usize) -> Result<f64> {
    let probs = model.probs(x)?;
    Ok(residual_norm(&probs, y)? * nn::sq_norm(x).sqrt())
}

/// Sample mean over `draws` of the residual-norm factor. Multiplying by
/// `‖x‖₂` gives the mean gradient norm over the same draws.
pub fn expected_grad_norm_factor(draws: &[LinearModel], x: &[f64], y: usize) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Empty("model draws"));
    }
    let mut total = 0.0;
    for model in draws {
        total += residual_norm(&model.probs(x)?, y)?;
    }
    Ok(total / draws.len() as f64)
}

/// A random check instance: He-initialized bias-free linear softmax params,
/// a standard normal input and a uniform label, all derived from `instance_seed`.
pub fn random_instance(classes: usize, dim: usize, instance_seed: u64) -> Result<(Params, Vec<f64>, usize)> {
    let params = nn::init_params(&ModelSpec::linear_softmax(dim, classes), instance_seed)?;
    let mut rng = seed::rng(seed::combine(instance_seed, &[1]));
    let x = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let y = rng.random_range(0..classes);
    Ok((params, x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn zero_model(c: usize, d: usize) -> LinearModel {
        LinearModel::new(Tensor2::zeros(c, d)).unwrap()
    }

    #[test]
    fn zero_weights_ten_classes() {
        let mut x = vec![0.0; 7];
        x[3] = 1.0;
        let v = closed_form_grad_norm(&zero_model(10, 7), &x, 4).unwrap();
        assert!((v - 0.9f64.sqrt()).abs() < 1e-12);
        assert!((v - 0.948_683).abs() < 1e-6);
    }

    #[test]
    fn zero_input_zero_norm() {
        let p = init_params(&ModelSpec::linear_softmax(5, 3), 1).unwrap();
        let m = LinearModel::from_params(&p).unwrap();
        for y in 0..3 {
            assert_eq!(closed_form_grad_norm(&m, &[0.0; 5], y).unwrap(), 0.0);
        }
    }

    #[test]
    fn one_hot_probs_give_zero() {
        assert_eq!(residual_norm(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
    }

    #[test]
    fn expected_factor_examples() {
        let x = [1.0, 0.0];
        let one = expected_grad_norm_factor(&[zero_model(10, 2)], &x, 0).unwrap();
        assert!((one - 0.9f64.sqrt()).abs() < 1e-12);
        let p = init_params(&ModelSpec::linear_softmax(2, 10), 4).unwrap();
        let m = LinearModel::from_params(&p).unwrap();
        let a = expected_grad_norm_factor(std::slice::from_ref(&m), &x, 3).unwrap();
        let b = expected_grad_norm_factor(&[m.clone(), m], &x, 3).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            expected_grad_norm_factor(&[], &x, 0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn factorization_depends_on_x_only_through_probs() {
        // g(p, y) computed from probs alone, times ‖x‖.
        let mut rng = seed::rng(17);
        for s in 0..50 {
            let p = init_params(&ModelSpec::linear_softmax(6, 4), s).unwrap();
            let m = LinearModel::from_params(&p).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = (s % 4) as usize;
            let probs = m.probs(&x).unwrap();
            let g: f64 = probs
                .iter()
                .enumerate()
                .map(|(j, p)| (p - f64::from(u8::from(j == y))).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let got = closed_form_grad_norm(&m, &x, y).unwrap();
            assert!((got - g * norm_x).abs() <= 1e-12 * got);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(LinearModel::new(Tensor2::zeros(1, 3)).is_err());
        let m = zero_model(3, 2);
        assert!(closed_form_grad_norm(&m, &[1.0], 0).is_err());
        assert!(closed_form_grad_norm(&m, &[1.0, 1.0], 3).is_err());
        let with_bias = init_params(&ModelSpec::mlp(vec![2, 3]), 0).unwrap();
        assert!(LinearModel::from_params(&with_bias).is_err());
    }
}
