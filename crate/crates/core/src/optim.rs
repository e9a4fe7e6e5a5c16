//! Parameter updates for [`ScoreParams`]: plain gradient descent or Adam.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::score::{LossGrad, ScoreParams};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Which parameter groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub mu: f64,
    pub logit: f64,
}

/// Per-client optimizer state. For plain gradient descent only the step
/// counter moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub steps: u64,
    m_mu: Array1<f64>,
    v_mu: Array1<f64>,
    m_logit: f64,
    v_logit: f64,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        Self {
            kind,
            steps: 0,
            m_mu: Array1::zeros(dim),
            v_mu: Array1::zeros(dim),
            m_logit: 0.0,
            v_logit: 0.0,
        }
    }

    /// One update. A zero step size leaves that group bitwise unchanged.
    pub fn apply(&mut self, params: &mut ScoreParams, grad: &LossGrad, eta: StepSizes) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                if eta.mu != 0.0 {
                    params.mu_hat.scaled_add(-eta.mu, &grad.grad_mu);
                }
                if eta.logit != 0.0 {
                    params.logit -= eta.logit * grad.grad_logit;
                }
            }
            OptimizerKind::Adam => {
                let k = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(k);
                let c2 = 1.0 - ADAM_BETA2.powi(k);
                if eta.mu != 0.0 {
                    for ((p, &g), (m, v)) in params
                        .mu_hat
                        .iter_mut()
                        .zip(grad.grad_mu.iter())
                        .zip(self.m_mu.iter_mut().zip(self.v_mu.iter_mut()))
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *p -= eta.mu * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
                if eta.logit != 0.0 {
                    let g = grad.grad_logit;
                    self.m_logit = ADAM_BETA1 * self.m_logit + (1.0 - ADAM_BETA1) * g;
                    self.v_logit = ADAM_BETA2 * self.v_logit + (1.0 - ADAM_BETA2) * g * g;
                    params.logit -=
                        eta.logit * (self.m_logit / c1) / ((self.v_logit / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        params.clamp_logit();
    }
}
