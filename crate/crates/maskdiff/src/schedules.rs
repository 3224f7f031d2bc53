//! Masking schedules and log-SNR parameterizations.
//!
//! A masking schedule is a strictly decreasing map `t -> alpha_t` on `[0, 1]`
//! with `alpha_0 = 1` and `alpha_1 = 0`; `alpha_t` is the probability that a
//! token is still unmasked at time `t`. The masked log-SNR is
//! `lambda(t) = log(alpha_t / (1 - alpha_t))`.
//!
//! Gaussian-diffusion log-SNR curves (EDM, IDDPM/Sigmoid, FM) live here as
//! well since they share the time axis.

use std::fmt;
use std::sync::Arc;

use crate::normal;

/// Error for time arguments outside the schedule domain.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("time {t} outside domain [0, 1]")]
    OutOfDomain { t: f64 },
    #[error("log-SNR for {name} diverges at t = {t}")]
    EndpointDiverges { name: &'static str, t: f64 },
    #[error("no schedule registered under name {0:?}")]
    UnknownName(String),
}

type AlphaFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A masking schedule `alpha_t` with its analytic derivative.
///
/// Built-ins: cosine `alpha_t = 1 - cos(pi/2 * (1 - t))` and linear
/// `alpha_t = 1 - t`. Custom schedules are registered as an
/// `(alpha, alpha')` pair; the library never differentiates a user schedule
/// numerically outside of [`Schedule::validate`].
#[derive(Clone)]
pub struct Schedule {
    kind: ScheduleKind,
}

#[derive(Clone)]
enum ScheduleKind {
    Cosine,
    Linear,
    Custom {
        name: String,
        alpha: AlphaFn,
        alpha_prime: AlphaFn,
    },
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ScheduleKind::Cosine => write!(f, "Schedule::Cosine"),
            ScheduleKind::Linear => write!(f, "Schedule::Linear"),
            ScheduleKind::Custom { name, .. } => write!(f, "Schedule::Custom({name})"),
        }
    }
}

impl Schedule {
    pub fn cosine() -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
        }
    }

    pub fn linear() -> Self {
        Schedule {
            kind: ScheduleKind::Linear,
        }
    }

    /// Register a custom schedule from an `(alpha, alpha')` pair of closures.
    pub fn custom(
        name: impl Into<String>,
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Schedule {
            kind: ScheduleKind::Custom {
                name: name.into(),
                alpha: Arc::new(alpha),
                alpha_prime: Arc::new(alpha_prime),
            },
        }
    }

    /// Resolve a schedule by its CLI/config name: `"cosine"`, `"linear"` or
    /// `"custom:<name>"` looked up in `registry`.
    pub fn from_name(name: &str, registry: &ScheduleRegistry) -> Result<Self, ScheduleError> {
        match name {
            "cosine" => Ok(Schedule::cosine()),
            "linear" => Ok(Schedule::linear()),
            other => match other.strip_prefix("custom:") {
                Some(custom) => registry
                    .get(custom)
                    .ok_or_else(|| ScheduleError::UnknownName(other.to_string())),
                None => Err(ScheduleError::UnknownName(other.to_string())),
            },
        }
    }

    pub fn name(&self) -> String {
        match &self.kind {
            ScheduleKind::Cosine => "cosine".to_string(),
            ScheduleKind::Linear => "linear".to_string(),
            ScheduleKind::Custom { name, .. } => format!("custom:{name}"),
        }
    }

    /// `alpha_t`, the probability that a token is unmasked at time `t`.
    pub fn alpha(&self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    fn alpha_unchecked(&self, t: f64) -> f64 {
        match &self.kind {
            // 1 - cos(x) written as 2 sin^2(x/2) to keep precision near t = 1;
            // endpoints are pinned exactly so degenerate marginals stay exact.
            ScheduleKind::Cosine => {
                if t <= 0.0 {
                    1.0
                } else if t >= 1.0 {
                    0.0
                } else {
                    let half = std::f64::consts::FRAC_PI_4 * (1.0 - t);
                    (2.0 * half.sin() * half.sin()).clamp(0.0, 1.0)
                }
            }
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::Custom { alpha, .. } => alpha(t),
        }
    }

    /// Analytic derivative `alpha'(t)`; nonpositive for valid schedules.
    pub fn alpha_prime(&self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        Ok(self.alpha_prime_unchecked(t))
    }

    fn alpha_prime_unchecked(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Cosine => {
                -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * (1.0 - t)).sin()
            }
            ScheduleKind::Linear => -1.0,
            ScheduleKind::Custom { alpha_prime, .. } => alpha_prime(t),
        }
    }

    /// Masked log-SNR `lambda(t) = log(alpha_t / (1 - alpha_t))`.
    ///
    /// Returns `+inf` at `t = 0` and `-inf` at `t = 1`; the infinities are
    /// in-band values, not errors.
    pub fn log_snr(&self, t: f64) -> Result<f64, ScheduleError> {
        let alpha = self.alpha(t)?;
        if alpha >= 1.0 {
            return Ok(f64::INFINITY);
        }
        if alpha <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        Ok((alpha / (1.0 - alpha)).ln())
    }

    /// Grid-based sanity report: endpoints, monotonicity and agreement of the
    /// analytic derivative with a central finite difference.
    pub fn validate(&self, grid_size: usize) -> ValidationReport {
        let grid_size = grid_size.max(3);
        let alpha0 = self.alpha_unchecked(0.0);
        let alpha1 = self.alpha_unchecked(1.0);
        let endpoint_tol = 1e-12;

        let mut monotone = true;
        let mut first_violation = None;
        let mut prev_t = 0.0;
        let mut prev_alpha = alpha0;
        for i in 1..grid_size {
            let t = i as f64 / (grid_size - 1) as f64;
            let a = self.alpha_unchecked(t);
            if a >= prev_alpha && monotone {
                monotone = false;
                first_violation = Some((prev_t, t));
            }
            prev_t = t;
            prev_alpha = a;
        }

        // Central differences on interior points only; h keeps t +/- h in [0, 1].
        let h = 1e-6;
        let mut max_derivative_rel_err: f64 = 0.0;
        for i in 1..grid_size - 1 {
            let t = i as f64 / (grid_size - 1) as f64;
            let fd = (self.alpha_unchecked(t + h) - self.alpha_unchecked(t - h)) / (2.0 * h);
            let analytic = self.alpha_prime_unchecked(t);
            let rel = (analytic - fd).abs() / f64::max(1e-12, analytic.abs());
            max_derivative_rel_err = max_derivative_rel_err.max(rel);
        }

        let mut derivative_nonpositive = true;
        for i in 0..grid_size {
            let t = i as f64 / (grid_size - 1) as f64;
            if self.alpha_prime_unchecked(t) > 0.0 {
                derivative_nonpositive = false;
                break;
            }
        }

        ValidationReport {
            schedule: self.name(),
            grid_size,
            alpha_at_zero: alpha0,
            alpha_at_one: alpha1,
            endpoints_ok: (alpha0 - 1.0).abs() <= endpoint_tol && alpha1.abs() <= endpoint_tol,
            monotone,
            first_violation,
            derivative_nonpositive,
            max_derivative_rel_err,
            derivative_tol: 1e-6,
        }
    }
}

/// Outcome of [`Schedule::validate`]; failures are reported, never thrown.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    pub schedule: String,
    pub grid_size: usize,
    pub alpha_at_zero: f64,
    pub alpha_at_one: f64,
    pub endpoints_ok: bool,
    pub monotone: bool,
    /// First adjacent grid pair `(t_a, t_b)` with `alpha(t_a) <= alpha(t_b)`.
    pub first_violation: Option<(f64, f64)>,
    pub derivative_nonpositive: bool,
    pub max_derivative_rel_err: f64,
    pub derivative_tol: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.endpoints_ok
            && self.monotone
            && self.derivative_nonpositive
            && self.max_derivative_rel_err <= self.derivative_tol
    }
}

/// Named registry for custom schedules, consulted by `"custom:<name>"`.
#[derive(Clone, Default)]
pub struct ScheduleRegistry {
    entries: Vec<(String, Schedule)>,
}

impl ScheduleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        alpha_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) {
        let name = name.into();
        let schedule = Schedule::custom(name.clone(), alpha, alpha_prime);
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, schedule));
    }

    pub fn get(&self, name: &str) -> Option<Schedule> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.clone())
    }
}

/// Log-SNR curves of the continuous-diffusion weighting families.
///
/// IDDPM and Sigmoid share `lambda(t) = -2 log tan(pi t / 2)`; FM uses
/// `2 log((1 - t) / t)`; EDM uses the `N(2.4, 2.4^2)` quantile of `1 - t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianLogSnr {
    Edm,
    IddpmSigmoid,
    Fm,
}

impl GaussianLogSnr {
    pub fn log_snr(self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        match self {
            GaussianLogSnr::Edm => {
                if t <= 0.0 || t >= 1.0 {
                    return Err(ScheduleError::EndpointDiverges { name: "edm", t });
                }
                Ok(normal::edm_normal().quantile(1.0 - t).expect("p in (0,1)"))
            }
            GaussianLogSnr::IddpmSigmoid => {
                if t <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                if t >= 1.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(-2.0 * (std::f64::consts::FRAC_PI_2 * t).tan().ln())
            }
            GaussianLogSnr::Fm => {
                if t <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                if t >= 1.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                Ok(2.0 * ((1.0 - t) / t).ln())
            }
        }
    }

    /// Analytic `lambda'(t)`; strictly negative on (0, 1).
    pub fn log_snr_prime(self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        if t <= 0.0 || t >= 1.0 {
            return Err(ScheduleError::EndpointDiverges {
                name: self.name(),
                t,
            });
        }
        match self {
            // d/dt F^{-1}(1 - t) = -1 / pdf(F^{-1}(1 - t))
            GaussianLogSnr::Edm => {
                let lambda = self.log_snr(t)?;
                Ok(-1.0 / normal::edm_normal().pdf(lambda))
            }
            GaussianLogSnr::IddpmSigmoid => {
                Ok(-2.0 * std::f64::consts::PI / (std::f64::consts::PI * t).sin())
            }
            GaussianLogSnr::Fm => Ok(-2.0 / (t * (1.0 - t))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GaussianLogSnr::Edm => "edm",
            GaussianLogSnr::IddpmSigmoid => "iddpm_sigmoid",
            GaussianLogSnr::Fm => "fm",
        }
    }
}

pub(crate) fn check_time(t: f64) -> Result<(), ScheduleError> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        Err(ScheduleError::OutOfDomain { t })
    } else {
        Ok(())
    }
}
