//! Masked discrete diffusion training objectives, with exact enumeration
//! oracles.
//!
//! The crate tools up everything needed to study reweighted diffusion
//! objectives on small discrete state spaces where nothing has to be
//! approximated:
//!
//! - [`schedules`]: masking schedules `alpha_t` and log-SNR curves.
//! - [`weightings`]: the weighting-function catalog in both `w_hat(lambda)`
//!   and `w_tilde(t)` forms, total cross-entropy weights, and monotonicity
//!   certification.
//! - [`masked_process`]: per-token forward/posterior/reverse kernels with a
//!   brute-force Bayes oracle.
//! - [`denoiser`]: tabular and MLP denoisers with hand-written backprop.
//! - [`exact_engine`]: exact ELBOs, improved-bound ladders, and the two
//!   identities that connect reweighted objectives to them.
//! - [`trainer`]: Monte Carlo estimators and a small optimizer loop.
//! - [`sampler`]: ancestral sampling and total-variation comparison against
//!   the exact model marginal.
//! - [`gaussian_forms`]: closed-form Gaussian-diffusion quantities.
//!
//! See the `book/` guide for a narrative walk-through; its code snippets are
//! compiled as doc-tests from this crate.

pub mod denoiser;
pub mod exact_engine;
pub mod trainer;
pub mod masked_process;
pub mod normal;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod weightings;

pub use denoiser::{Denoiser, DenoiserDims, DenoiserKind, Gradient, Prediction};
pub use masked_process::{Token, TokenDist, TokenSeq};
pub use schedules::{GaussianLogSnr, Schedule, ScheduleRegistry};
pub use weightings::{Family, Side, WeightingSpec};
