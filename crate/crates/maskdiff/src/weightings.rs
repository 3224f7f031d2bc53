//! Weighting functions for reweighted diffusion objectives.
//!
//! Every family is evaluated in two forms:
//!
//! - `w_hat(lambda)`: the log-SNR form shared between Gaussian and masked
//!   diffusion (`sech`, `sigmoid`, `exp`, and the EDM normal-density form).
//! - `w_tilde(t)`: the time form. The masked side expands `w_hat` through
//!   `lambda(t) = log(alpha_t / (1 - alpha_t))`; the Gaussian side uses the
//!   closed forms tied to each family's own `lambda(t)`.
//!
//! The total cross-entropy weight of the masked objective is
//! `ce_weight(t) = w_tilde(t) * (-alpha'_t) / (1 - alpha_t)`. Where the
//! factors diverge at an endpoint, `ce_weight` uses the algebraically
//! cancelled form, so e.g. flow matching stays finite at `t = 1` on the
//! cosine schedule and simple weighting is exactly 1 everywhere.

use serde::{Deserialize, Serialize};

use crate::normal;
use crate::schedules::{GaussianLogSnr, Schedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeightingError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("simple weighting has no lambda form")]
    SimpleHasNoLambdaForm,
    #[error("simple weighting is defined only on the masked side")]
    SimpleIsMaskedOnly,
    #[error("unknown weighting name {0:?}")]
    UnknownName(String),
}

/// Whether a spec follows the Gaussian-diffusion table or the masked table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Gaussian,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Elbo,
    Edm,
    Iddpm,
    Sigmoid,
    Fm,
    Simple,
}

/// A weighting function: family, sigmoid offset `k`, and table side.
///
/// Constructors enforce that `Simple` only exists on the masked side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct WeightingSpec {
    family: Family,
    k: f64,
    side: Side,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    family: Family,
    #[serde(default)]
    k: f64,
    #[serde(default = "masked_side")]
    side: Side,
}

fn masked_side() -> Side {
    Side::Masked
}

impl TryFrom<RawSpec> for WeightingSpec {
    type Error = WeightingError;
    fn try_from(raw: RawSpec) -> Result<Self, WeightingError> {
        WeightingSpec::new(raw.family, raw.k, raw.side)
    }
}

impl From<WeightingSpec> for RawSpec {
    fn from(spec: WeightingSpec) -> RawSpec {
        RawSpec {
            family: spec.family,
            k: spec.k,
            side: spec.side,
        }
    }
}

impl WeightingSpec {
    pub fn new(family: Family, k: f64, side: Side) -> Result<Self, WeightingError> {
        if family == Family::Simple && side == Side::Gaussian {
            return Err(WeightingError::SimpleIsMaskedOnly);
        }
        Ok(WeightingSpec { family, k, side })
    }

    pub fn elbo(side: Side) -> Self {
        WeightingSpec {
            family: Family::Elbo,
            k: 0.0,
            side,
        }
    }

    pub fn edm(side: Side) -> Self {
        WeightingSpec {
            family: Family::Edm,
            k: 0.0,
            side,
        }
    }

    pub fn iddpm(side: Side) -> Self {
        WeightingSpec {
            family: Family::Iddpm,
            k: 0.0,
            side,
        }
    }

    /// Sigmoid weighting `sigmoid(-lambda + k)`; `k = 0` is the default used
    /// throughout the masked experiments.
    pub fn sigmoid(k: f64, side: Side) -> Self {
        WeightingSpec {
            family: Family::Sigmoid,
            k,
            side,
        }
    }

    pub fn fm(side: Side) -> Self {
        WeightingSpec {
            family: Family::Fm,
            k: 0.0,
            side,
        }
    }

    /// Simple weighting `w_tilde(t) = -(1 - alpha_t) / alpha'_t`; masked only.
    pub fn simple() -> Self {
        WeightingSpec {
            family: Family::Simple,
            k: 0.0,
            side: Side::Masked,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// Parse a CLI name: `elbo`, `edm`, `iddpm`, `sigmoid`, `sigmoid:<k>`,
    /// `fm` or `simple`.
    pub fn parse(name: &str, side: Side) -> Result<Self, WeightingError> {
        let lower = name.to_ascii_lowercase();
        match lower.as_str() {
            "elbo" => Ok(Self::elbo(side)),
            "edm" => Ok(Self::edm(side)),
            "iddpm" => Ok(Self::iddpm(side)),
            "sigmoid" => Ok(Self::sigmoid(0.0, side)),
            "fm" => Ok(Self::fm(side)),
            "simple" => Self::new(Family::Simple, 0.0, side),
            other => match other.strip_prefix("sigmoid:") {
                Some(k) => {
                    let k: f64 = k
                        .parse()
                        .map_err(|_| WeightingError::UnknownName(name.to_string()))?;
                    Ok(Self::sigmoid(k, side))
                }
                None => Err(WeightingError::UnknownName(name.to_string())),
            },
        }
    }

    pub fn label(&self) -> String {
        let side = match self.side {
            Side::Gaussian => "gaussian",
            Side::Masked => "masked",
        };
        match self.family {
            Family::Sigmoid => format!("sigmoid(k={})/{side}", self.k),
            Family::Elbo => format!("elbo/{side}"),
            Family::Edm => format!("edm/{side}"),
            Family::Iddpm => format!("iddpm/{side}"),
            Family::Fm => format!("fm/{side}"),
            Family::Simple => format!("simple/{side}"),
        }
    }

    /// `w_hat(lambda)`. Infinite `lambda` evaluates to the one-sided limit,
    /// never NaN. Simple has no lambda form and errors.
    pub fn w_hat(&self, lambda: f64) -> Result<f64, WeightingError> {
        match self.family {
            Family::Elbo => Ok(1.0),
            Family::Edm => Ok(ln_w_hat_edm(lambda).exp()),
            Family::Iddpm => Ok(sech_half(lambda)),
            Family::Sigmoid => Ok(stable_sigmoid(self.k - lambda)),
            Family::Fm => Ok((-lambda / 2.0).exp()),
            Family::Simple => Err(WeightingError::SimpleHasNoLambdaForm),
        }
    }

    /// `w_tilde(t)`. Endpoint divergences (FM and Simple at `t = 1`) come
    /// back as explicit infinities.
    pub fn w_tilde(&self, schedule: &Schedule, t: f64) -> Result<f64, WeightingError> {
        match self.side {
            Side::Masked => {
                let alpha = schedule.alpha(t)?;
                Ok(match self.family {
                    Family::Elbo => 1.0,
                    Family::Edm => ln_w_hat_edm(masked_lambda(alpha)).exp(),
                    Family::Iddpm => 2.0 * (alpha * (1.0 - alpha)).sqrt(),
                    Family::Sigmoid => {
                        (1.0 - alpha) / (1.0 - (1.0 - (-self.k).exp()) * alpha)
                    }
                    Family::Fm => ((1.0 - alpha) / alpha).sqrt(),
                    Family::Simple => (1.0 - alpha) / -schedule.alpha_prime(t)?,
                })
            }
            Side::Gaussian => {
                crate::schedules::check_time(t)?;
                Ok(match self.family {
                    Family::Elbo => 1.0,
                    Family::Edm => ln_w_hat_edm(edm_lambda_extended(t)).exp(),
                    Family::Iddpm => {
                        let half = std::f64::consts::FRAC_PI_2 * t;
                        2.0 * half.sin() * half.cos()
                    }
                    Family::Sigmoid => {
                        let tan = (std::f64::consts::FRAC_PI_2 * t).tan();
                        1.0 / (1.0 + (-self.k).exp() / (tan * tan))
                    }
                    Family::Fm => t / (1.0 - t),
                    Family::Simple => unreachable!("simple is masked-only by construction"),
                })
            }
        }
    }

    /// Total cross-entropy weight `w_tilde(t) * (-alpha'_t) / (1 - alpha_t)`,
    /// evaluated in cancelled form so no `inf * 0` arises:
    /// simple is the constant 1, FM uses `(-alpha') / sqrt(alpha (1 - alpha))`,
    /// sigmoid uses `(-alpha') / (1 - (1 - e^{-k}) alpha)`.
    pub fn ce_weight(&self, schedule: &Schedule, t: f64) -> Result<f64, WeightingError> {
        let alpha = schedule.alpha(t)?;
        let neg_alpha_prime = -schedule.alpha_prime(t)?;
        match self.side {
            Side::Masked => Ok(match self.family {
                Family::Simple => 1.0,
                Family::Elbo => neg_alpha_prime / (1.0 - alpha),
                Family::Sigmoid => {
                    neg_alpha_prime / (1.0 - (1.0 - (-self.k).exp()) * alpha)
                }
                Family::Fm => neg_alpha_prime / (alpha * (1.0 - alpha)).sqrt(),
                Family::Iddpm => 2.0 * neg_alpha_prime * (alpha / (1.0 - alpha)).sqrt(),
                Family::Edm => {
                    // Log-space keeps the Gaussian tail from turning into 0 * inf.
                    if alpha >= 1.0 || alpha <= 0.0 {
                        0.0
                    } else {
                        (ln_w_hat_edm(masked_lambda(alpha)) + neg_alpha_prime.ln()
                            - (1.0 - alpha).ln())
                        .exp()
                    }
                }
            }),
            Side::Gaussian => {
                let w = self.w_tilde(schedule, t)?;
                Ok(match self.family {
                    Family::Elbo => neg_alpha_prime / (1.0 - alpha),
                    Family::Edm => {
                        if alpha >= 1.0 || alpha <= 0.0 {
                            0.0
                        } else {
                            (ln_w_hat_edm(edm_lambda_extended(t)) + neg_alpha_prime.ln()
                                - (1.0 - alpha).ln())
                            .exp()
                        }
                    }
                    _ => w * neg_alpha_prime / (1.0 - alpha),
                })
            }
        }
    }

    /// Grid heuristic for whether `ce_weight` is integrable towards `t = 1`.
    ///
    /// Flags pairings like the Gaussian-side FM weighting on the linear
    /// schedule, where the weight grows like `1/(1 - t)` with nothing to
    /// cancel it.
    pub fn ce_weight_integrable(&self, schedule: &Schedule) -> bool {
        let probe = |k: i32| -> f64 {
            let eps = 2.0f64.powi(-k);
            let t = 1.0 - eps;
            match self.ce_weight(schedule, t) {
                Ok(v) if v.is_finite() => v * eps,
                _ => f64::INFINITY,
            }
        };
        let early = probe(8);
        let late = probe(24);
        if !late.is_finite() {
            return false;
        }
        // Integrable weights have ce * eps -> 0; a stalled ratio means the
        // weight grows at least like 1/(1 - t).
        late <= 0.25 * early + 1e-12
    }
}

fn masked_lambda(alpha: f64) -> f64 {
    if alpha >= 1.0 {
        f64::INFINITY
    } else if alpha <= 0.0 {
        f64::NEG_INFINITY
    } else {
        (alpha / (1.0 - alpha)).ln()
    }
}

// Table-1 EDM lambda with signed infinities at the endpoints.
fn edm_lambda_extended(t: f64) -> f64 {
    if t <= 0.0 {
        f64::INFINITY
    } else if t >= 1.0 {
        f64::NEG_INFINITY
    } else {
        GaussianLogSnr::Edm.log_snr(t).expect("interior t")
    }
}

/// `ln` of the EDM weighting `p_N(2.4, 2.4^2)(lambda) (e^{-lambda} + 0.25) / 0.25`.
///
/// The Gaussian factor always dominates, so both `lambda -> +inf` and
/// `lambda -> -inf` give `-inf` here (weight 0).
fn ln_w_hat_edm(lambda: f64) -> f64 {
    if !lambda.is_finite() {
        return f64::NEG_INFINITY;
    }
    let ln_pdf = normal::edm_normal().ln_pdf(lambda);
    let ln_poly = if lambda >= 0.0 {
        (4.0 * (-lambda).exp()).ln_1p()
    } else {
        4.0f64.ln() - lambda + (lambda.exp() / 4.0).ln_1p()
    };
    ln_pdf + ln_poly
}

fn sech_half(lambda: f64) -> f64 {
    let e = (-lambda.abs() / 2.0).exp();
    2.0 * e / (1.0 + e * e)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of grid-based monotonicity certification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub monotone: bool,
    /// First adjacent grid pair where `w_tilde` strictly decreases.
    pub first_violation: Option<(f64, f64)>,
}

/// Certify that `w_tilde` is nondecreasing across `grid` (strictly increasing
/// times inside `(0, 1)`).
pub fn check_monotone(
    spec: &WeightingSpec,
    schedule: &Schedule,
    grid: &[f64],
) -> Result<MonotoneReport, WeightingError> {
    let mut prev: Option<(f64, f64)> = None;
    for &t in grid {
        let w = spec.w_tilde(schedule, t)?;
        if let Some((pt, pw)) = prev {
            if pw > w {
                return Ok(MonotoneReport {
                    monotone: false,
                    first_violation: Some((pt, t)),
                });
            }
        }
        prev = Some((t, w));
    }
    Ok(MonotoneReport {
        monotone: true,
        first_violation: None,
    })
}

/// The default certification grid: 4096 uniform points on `[1e-4, 1 - 1e-3]`.
pub fn certification_grid() -> Vec<f64> {
    uniform_grid(1e-4, 1.0 - 1e-3, 4096)
}

/// `n` evenly spaced points from `a` to `b` inclusive.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Per-step weights `w_i` implied by `w_tilde` on the grid `t(i) = i / T`:
/// `w_1 = w_tilde(t(1))`, `w_i = w_tilde(t(i)) - w_tilde(t(i-1))`.
///
/// All increments are nonnegative exactly when `w_tilde` is nondecreasing on
/// the grid; negative entries are returned as-is.
pub fn implied_increments(
    spec: &WeightingSpec,
    schedule: &Schedule,
    steps: usize,
) -> Result<Vec<f64>, WeightingError> {
    assert!(steps >= 1);
    let mut out = Vec::with_capacity(steps);
    let mut prev = 0.0;
    for i in 1..=steps {
        let t = i as f64 / steps as f64;
        let w = spec.w_tilde(schedule, t)?;
        out.push(w - prev);
        prev = w;
    }
    Ok(out)
}

/// One row of an emitted weighting curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub t: f64,
    pub w_tilde: f64,
    pub w_hat_of_lambda: f64,
    pub ce_weight: f64,
}

/// A weighting curve sampled on a time grid, ready for CSV emission.
#[derive(Debug, Clone, Serialize)]
pub struct CurveTable {
    pub spec: String,
    pub schedule: String,
    pub grid: String,
    pub normalized: bool,
    pub rows: Vec<CurveRow>,
}

/// Sample `(w_tilde, w_hat(lambda(t)), ce_weight)` over `grid`.
///
/// With `normalize`, each weight column is divided by its maximum over the
/// grid, which is how the reference curves are plotted; the grid must then
/// stay within `[0, 0.999]`.
pub fn emit_curves(
    spec: &WeightingSpec,
    schedule: &Schedule,
    grid: &[f64],
    normalize: bool,
) -> Result<CurveTable, WeightingError> {
    assert!(grid.windows(2).all(|w| w[0] < w[1]), "grid must increase");
    if normalize {
        assert!(
            grid.iter().all(|&t| (0.0..=0.999).contains(&t)),
            "normalized grids live in [0, 0.999]"
        );
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &t in grid {
        let lambda = match spec.side() {
            Side::Masked => masked_lambda(schedule.alpha(t)?),
            Side::Gaussian => match spec.family() {
                Family::Edm => edm_lambda_extended(t),
                _ => GaussianLogSnr::IddpmSigmoid.log_snr(t).unwrap_or(f64::NAN),
            },
        };
        let lambda = match spec.family() {
            Family::Fm if spec.side() == Side::Gaussian => {
                GaussianLogSnr::Fm.log_snr(t).unwrap_or(f64::NAN)
            }
            _ => lambda,
        };
        let w_hat = match spec.family() {
            Family::Simple => f64::NAN,
            _ => spec.w_hat(lambda)?,
        };
        rows.push(CurveRow {
            t,
            w_tilde: spec.w_tilde(schedule, t)?,
            w_hat_of_lambda: w_hat,
            ce_weight: spec.ce_weight(schedule, t)?,
        });
    }
    if normalize {
        let max_of = |f: fn(&CurveRow) -> f64| {
            rows.iter()
                .map(f)
                .filter(|v| v.is_finite())
                .fold(0.0f64, f64::max)
        };
        let (mw, mh, mc) = (
            max_of(|r| r.w_tilde),
            max_of(|r| r.w_hat_of_lambda),
            max_of(|r| r.ce_weight),
        );
        for row in &mut rows {
            if mw > 0.0 {
                row.w_tilde /= mw;
            }
            if mh > 0.0 {
                row.w_hat_of_lambda /= mh;
            }
            if mc > 0.0 {
                row.ce_weight /= mc;
            }
        }
    }
    Ok(CurveTable {
        spec: spec.label(),
        schedule: schedule.name(),
        grid: format!(
            "{} points in [{}, {}]",
            grid.len(),
            grid.first().copied().unwrap_or(f64::NAN),
            grid.last().copied().unwrap_or(f64::NAN)
        ),
        normalized: normalize,
        rows,
    })
}

impl CurveTable {
    /// CSV with round-trip float formatting, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,w_tilde,w_hat_of_lambda,ce_weight\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.t, row.w_tilde, row.w_hat_of_lambda, row.ce_weight
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const COSINE_THIRD: f64 = 1.0 / 3.0; // alpha = 1/2 there

    #[test]
    fn w_hat_fixed_points() {
        let iddpm = WeightingSpec::iddpm(Side::Masked);
        assert_eq!(iddpm.w_hat(0.0).unwrap(), 1.0);
        let sigmoid = WeightingSpec::sigmoid(0.0, Side::Masked);
        assert_eq!(sigmoid.w_hat(0.0).unwrap(), 0.5);
        // e^{-log 3} = 1/3, cross-checked against the direct power.
        let fm = WeightingSpec::fm(Side::Masked);
        let lambda = 2.0 * 3.0f64.ln();
        assert!((fm.w_hat(lambda).unwrap() - 1.0 / 3.0).abs() <= 1e-15);
        assert!((fm.w_hat(lambda).unwrap() - 3.0f64.powf(-1.0)).abs() <= 1e-15);
    }

    #[test]
    fn w_hat_simple_unsupported() {
        assert_eq!(
            WeightingSpec::simple().w_hat(0.0),
            Err(WeightingError::SimpleHasNoLambdaForm)
        );
    }

    #[test]
    fn w_tilde_fixed_points() {
        let cosine = Schedule::cosine();
        let iddpm = WeightingSpec::iddpm(Side::Masked);
        assert!((iddpm.w_tilde(&cosine, COSINE_THIRD).unwrap() - 1.0).abs() <= 1e-12);

        // Simple on the linear schedule is -(1 - alpha)/alpha' = t.
        let linear = Schedule::linear();
        let simple = WeightingSpec::simple();
        for t in [0.0, 0.2, 0.5, 0.77, 1.0] {
            assert!((simple.w_tilde(&linear, t).unwrap() - t).abs() <= 1e-15);
        }

        // Gaussian-side FM is t / (1 - t).
        let fm = WeightingSpec::fm(Side::Gaussian);
        assert!((fm.w_tilde(&cosine, 0.25).unwrap() - 1.0 / 3.0).abs() <= 1e-15);
    }

    #[test]
    fn w_tilde_endpoint_divergence_is_infinite_not_nan() {
        let cosine = Schedule::cosine();
        for spec in [WeightingSpec::fm(Side::Masked), WeightingSpec::simple()] {
            let w = spec.w_tilde(&cosine, 1.0).unwrap();
            assert!(w.is_infinite() && w > 0.0, "{spec:?} gave {w}");
        }
        // EDM tails underflow to zero, never NaN.
        let edm = WeightingSpec::edm(Side::Masked);
        assert_eq!(edm.w_tilde(&cosine, 0.0).unwrap(), 0.0);
        assert_eq!(edm.w_tilde(&cosine, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn ce_weight_simple_is_exactly_one() {
        let simple = WeightingSpec::simple();
        let quadratic = Schedule::custom("sq", |t| (1.0 - t) * (1.0 - t), |t| 2.0 * t - 2.0);
        for schedule in [Schedule::cosine(), Schedule::linear(), quadratic] {
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                assert!((simple.ce_weight(&schedule, t).unwrap() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ce_weight_elbo_matches_definition() {
        let cosine = Schedule::cosine();
        let elbo = WeightingSpec::elbo(Side::Masked);
        for t in [0.1, 0.3, 0.7, 0.95] {
            let expect =
                -cosine.alpha_prime(t).unwrap() / (1.0 - cosine.alpha(t).unwrap());
            assert!((elbo.ce_weight(&cosine, t).unwrap() - expect).abs() <= 1e-14);
        }
    }

    #[test]
    fn ce_weight_sigmoid_vanishes_at_one() {
        let cosine = Schedule::cosine();
        let sigmoid = WeightingSpec::sigmoid(0.0, Side::Masked);
        let near_one = sigmoid.ce_weight(&cosine, 1.0 - 1e-6).unwrap();
        assert!(near_one <= 1e-5, "got {near_one}");
        assert_eq!(sigmoid.ce_weight(&cosine, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn ce_weight_fm_finite_at_one_on_cosine() {
        // The alpha' zero cancels the w_tilde blow-up; the limit is pi / sqrt(2).
        let cosine = Schedule::cosine();
        let fm = WeightingSpec::fm(Side::Masked);
        let limit = std::f64::consts::PI / 2.0f64.sqrt();
        let v = fm.ce_weight(&cosine, 1.0 - 1e-9).unwrap();
        assert!((v - limit).abs() <= 1e-4, "v={v} limit={limit}");
    }

    #[test]
    fn lambda_and_time_forms_agree_masked_side() {
        let cosine = Schedule::cosine();
        for spec in [
            WeightingSpec::elbo(Side::Masked),
            WeightingSpec::iddpm(Side::Masked),
            WeightingSpec::sigmoid(0.0, Side::Masked),
            WeightingSpec::sigmoid(1.3, Side::Masked),
            WeightingSpec::fm(Side::Masked),
        ] {
            for i in 1..=99 {
                let t = 0.01 * i as f64;
                let w_t = spec.w_tilde(&cosine, t).unwrap();
                let w_l = spec.w_hat(cosine.log_snr(t).unwrap()).unwrap();
                assert!(
                    (w_t - w_l).abs() <= 1e-9 * f64::max(1.0, w_t),
                    "{spec:?} t={t}: {w_t} vs {w_l}"
                );
            }
        }
    }

    #[test]
    fn lambda_and_time_forms_agree_gaussian_side() {
        let cosine = Schedule::cosine();
        for (spec, curve) in [
            (
                WeightingSpec::iddpm(Side::Gaussian),
                GaussianLogSnr::IddpmSigmoid,
            ),
            (
                WeightingSpec::sigmoid(0.0, Side::Gaussian),
                GaussianLogSnr::IddpmSigmoid,
            ),
            (
                WeightingSpec::sigmoid(-0.7, Side::Gaussian),
                GaussianLogSnr::IddpmSigmoid,
            ),
            (WeightingSpec::fm(Side::Gaussian), GaussianLogSnr::Fm),
        ] {
            for i in 1..=99 {
                let t = 0.01 * i as f64;
                let w_t = spec.w_tilde(&cosine, t).unwrap();
                let w_l = spec.w_hat(curve.log_snr(t).unwrap()).unwrap();
                assert!(
                    (w_t - w_l).abs() <= 1e-9 * f64::max(1.0, w_t),
                    "{spec:?} t={t}: {w_t} vs {w_l}"
                );
            }
        }
    }

    #[test]
    fn monotone_verdicts_on_cosine() {
        let cosine = Schedule::cosine();
        let grid = certification_grid();
        for (spec, expect) in [
            (WeightingSpec::elbo(Side::Masked), true),
            (WeightingSpec::sigmoid(0.0, Side::Masked), true),
            (WeightingSpec::fm(Side::Masked), true),
            (WeightingSpec::simple(), true),
            (WeightingSpec::iddpm(Side::Masked), false),
            (WeightingSpec::edm(Side::Masked), false),
        ] {
            let report = check_monotone(&spec, &cosine, &grid).unwrap();
            assert_eq!(report.monotone, expect, "{spec:?}: {report:?}");
        }
    }

    #[test]
    fn iddpm_violation_sits_at_the_alpha_half_peak() {
        // w_tilde = 2 sqrt(alpha(1-alpha)) peaks where alpha = 1/2, t = 1/3.
        let cosine = Schedule::cosine();
        let grid = uniform_grid(1e-3, 1.0 - 1e-3, 1000);
        let report =
            check_monotone(&WeightingSpec::iddpm(Side::Masked), &cosine, &grid).unwrap();
        let (a, b) = report.first_violation.expect("iddpm is not monotone");
        assert!(a > 0.30 && b < 0.38, "violation at ({a}, {b})");
    }

    #[test]
    fn edm_violation_sits_near_one() {
        let cosine = Schedule::cosine();
        let report = check_monotone(
            &WeightingSpec::edm(Side::Masked),
            &cosine,
            &certification_grid(),
        )
        .unwrap();
        let (a, _) = report.first_violation.expect("edm dips near t = 1");
        assert!(a > 0.7, "violation at t = {a}");
    }

    #[test]
    fn implied_increments_constant_and_signed_cases() {
        let cosine = Schedule::cosine();
        let elbo = implied_increments(&WeightingSpec::elbo(Side::Masked), &cosine, 4).unwrap();
        assert_eq!(elbo, vec![1.0, 0.0, 0.0, 0.0]);

        let simple = implied_increments(&WeightingSpec::simple(), &cosine, 8).unwrap();
        assert!(simple.iter().all(|&w| w >= 0.0));
        assert!(simple.last().unwrap().is_infinite());

        let iddpm = implied_increments(&WeightingSpec::iddpm(Side::Masked), &cosine, 8).unwrap();
        assert!(iddpm.iter().any(|&w| w < 0.0));
    }

    #[test]
    fn increments_telescope_back_to_w_tilde() {
        let cosine = Schedule::cosine();
        for spec in [
            WeightingSpec::iddpm(Side::Masked),
            WeightingSpec::sigmoid(0.4, Side::Masked),
            WeightingSpec::edm(Side::Masked),
        ] {
            let t_end = 1.0;
            let increments = implied_increments(&spec, &cosine, 16).unwrap();
            let total: f64 = increments.iter().sum();
            let expect = spec.w_tilde(&cosine, t_end).unwrap();
            assert!(
                (total - expect).abs() <= 1e-12 * f64::max(1.0, expect.abs()),
                "{spec:?}: {total} vs {expect}"
            );
        }
    }

    #[test]
    fn curves_elbo_normalized_is_flat() {
        let cosine = Schedule::cosine();
        let grid = uniform_grid(0.0, 0.999, 64);
        let table =
            emit_curves(&WeightingSpec::elbo(Side::Masked), &cosine, &grid, true).unwrap();
        assert!(table.rows.iter().all(|r| (r.w_tilde - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn curves_fm_peaks_at_the_right_edge() {
        let cosine = Schedule::cosine();
        let grid = uniform_grid(0.0, 0.999, 256);
        let table = emit_curves(&WeightingSpec::fm(Side::Masked), &cosine, &grid, true).unwrap();
        let last = table.rows.last().unwrap();
        assert!((last.w_tilde - 1.0).abs() <= 1e-12, "max must sit at 0.999");
        assert!(table.rows[..255].iter().all(|r| r.w_tilde < 1.0));
    }

    #[test]
    fn curves_simple_ce_column_is_one() {
        let cosine = Schedule::cosine();
        let grid = uniform_grid(0.0, 0.999, 100);
        let table = emit_curves(&WeightingSpec::simple(), &cosine, &grid, false).unwrap();
        assert!(table
            .rows
            .iter()
            .all(|r| (r.ce_weight - 1.0).abs() <= 1e-12));
        let csv = table.to_csv();
        assert!(csv.starts_with("t,w_tilde,w_hat_of_lambda,ce_weight\n"));
        assert_eq!(csv.lines().count(), 101);
        // Values round-trip through the decimal formatting.
        let line2 = csv.lines().nth(2).unwrap();
        let cols: Vec<&str> = line2.split(',').collect();
        let t: f64 = cols[0].parse().unwrap();
        assert_eq!(t, table.rows[1].t);
    }

    #[test]
    fn integrability_flags_the_uncancelled_pairing() {
        let linear = Schedule::linear();
        let cosine = Schedule::cosine();
        let fm_gauss = WeightingSpec::fm(Side::Gaussian);
        assert!(!fm_gauss.ce_weight_integrable(&linear));
        assert!(fm_gauss.ce_weight_integrable(&cosine));
        for spec in [
            WeightingSpec::elbo(Side::Masked),
            WeightingSpec::simple(),
            WeightingSpec::fm(Side::Masked),
            WeightingSpec::sigmoid(0.0, Side::Masked),
        ] {
            assert!(spec.ce_weight_integrable(&linear), "{spec:?}");
            assert!(spec.ce_weight_integrable(&cosine), "{spec:?}");
        }
    }

    #[test]
    fn simple_gaussian_is_rejected_everywhere() {
        assert!(WeightingSpec::new(Family::Simple, 0.0, Side::Gaussian).is_err());
        let parsed = WeightingSpec::parse("simple", Side::Gaussian);
        assert!(parsed.is_err());
        let json = r#"{"family":"simple","side":"gaussian"}"#;
        assert!(serde_json::from_str::<WeightingSpec>(json).is_err());
        let ok = r#"{"family":"sigmoid","k":0.25}"#;
        let spec: WeightingSpec = serde_json::from_str(ok).unwrap();
        assert_eq!(spec, WeightingSpec::sigmoid(0.25, Side::Masked));
    }
}
