//! Federated diffusion training on a two-component symmetric Gaussian mixture.
//!
//! Every client draws data from `w_j N(mu, I) + (1 - w_j) N(-mu, I)`. The
//! shared mean `mu` plays the role of a backbone that is trained with
//! federated averaging; each client's mixing weight is a private scalar
//! embedding (stored as the logit `b = 0.5 * ln(w / (1 - w))`) that never
//! leaves the client. Training is gradient descent on the DDPM
//! noise-regression loss, whose minimiser coincides with the closed-form
//! score of the mixture.
//!
//! Module map:
//!
//! * [`mixture`]: ground-truth mixture, forward (OU) noising, exact score.
//! * [`score`]: the trainable one-layer score model, DDPM loss and gradients.
//! * [`estimators`]: moment estimator, EM oracle, mixing-weight MSE bound.
//! * [`federated`]: deterministic multi-client pre-training simulator.
//! * [`personalization`]: frozen-backbone embedding fine-tuning.
//! * [`sampler`]: reverse-time SDE sampling.
//! * [`metrics`]: score-estimation error and its scaling study.
//! * [`verify`]: the end-to-end check suite.

pub mod error;
pub mod estimators;
pub mod federated;
pub mod io;
pub mod metrics;
pub mod mixture;
pub mod optim;
pub mod personalization;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use mixture::{DiffusionSchedule, MixtureParams};
pub use score::{Minibatch, ScoreParams};
