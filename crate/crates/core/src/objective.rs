//! Negative mean of the elementwise product of two L2-normalized vectors,
//! its gradient, and the Adam update rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, norm, EmbeddingVector, NumericsError, Scalar, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    /// Output dimension the mean is taken over.
    pub n: usize,
}

impl LossValue {
    /// The unscaled cosine implied by this loss.
    pub fn cosine(&self) -> f64 {
        -self.value * self.n as f64
    }
}

fn check_pair<A: Scalar>(y_true: &[A], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(NumericsError::DimensionMismatch { expected: y_true.len(), got: y_pred.len() }.into());
    }
    if y_true.is_empty() {
        return Err(NumericsError::EmptyInput.into());
    }
    let nt = norm(y_true);
    if nt < NORM_EPS {
        return Err(NumericsError::ZeroNorm.into());
    }
    Ok(nt)
}

/// Loss and its gradient with respect to `y_pred`, with the prediction norm
/// floored at `NORM_EPS`. `grad` receives `scale * dloss/dy_pred`.
pub(crate) fn loss_and_grad_into<A: Scalar>(y_true: &[A], y_pred: &[f64], scale: f64, grad: &mut [f64]) -> Result<f64> {
    let nt = check_pair(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let np_raw = norm(y_pred);
    let np = np_raw.max(NORM_EPS);
    let c = dot(y_true, y_pred) / (nt * np);
    let loss = -c / n;
    if np_raw > NORM_EPS {
        // -(1/N) (t_hat - c p_hat) / |p|
        let k = -scale / (n * np);
        for ((g, t), p) in grad.iter_mut().zip(y_true).zip(y_pred) {
            *g = k * (t.to_f64() / nt - c * p / np);
        }
    } else {
        let k = -scale / (n * NORM_EPS);
        for (g, t) in grad.iter_mut().zip(y_true) {
            *g = k * t.to_f64() / nt;
        }
    }
    Ok(loss)
}

pub(crate) fn loss_slices<A: Scalar>(y_true: &[A], y_pred: &[f64]) -> Result<f64> {
    let nt = check_pair(y_true, y_pred)?;
    let np = norm(y_pred).max(NORM_EPS);
    Ok(-(dot(y_true, y_pred) / (nt * np)) / y_true.len() as f64)
}

pub fn cosine_loss(y_true: &EmbeddingVector, y_pred: &EmbeddingVector) -> Result<LossValue> {
    let value = loss_slices(y_true.as_slice(), y_pred.as_slice())?;
    Ok(LossValue { value, n: y_true.dim() })
}

/// Gradient of [`cosine_loss`] with respect to `y_pred`.
pub fn cosine_loss_grad(y_true: &EmbeddingVector, y_pred: &EmbeddingVector) -> Result<EmbeddingVector> {
    check_pair(y_true.as_slice(), y_pred.as_slice())?;
    if y_pred.norm() <= NORM_EPS {
        return Err(NumericsError::ZeroNorm.into());
    }
    let mut g = vec![0.0; y_true.dim()];
    loss_and_grad_into(y_true.as_slice(), y_pred.as_slice(), 1.0, &mut g)?;
    Ok(EmbeddingVector::new(g)?)
}

/// Mean of per-pair losses.
pub fn batch_loss(pairs: &[(EmbeddingVector, EmbeddingVector)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(NumericsError::EmptyInput.into());
    }
    let d = pairs[0].0.dim();
    let mut sum = 0.0;
    for (t, p) in pairs {
        if t.dim() != d {
            return Err(NumericsError::DimensionMismatch { expected: d, got: t.dim() }.into());
        }
        sum += cosine_loss(t, p)?.value;
    }
    Ok(sum / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected update of every tensor in `params`.
    pub fn step<P: Scalar>(&mut self, params: &mut [&mut [P]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "{} parameter tensors, {} gradients, state tracks {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(ObjectiveError::ShapeMismatch(format!(
                    "tensor {i}: {} parameters, {} gradients, state {}",
                    p.len(),
                    g.len(),
                    self.first_moment[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *pj = P::from_f64(pj.to_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
