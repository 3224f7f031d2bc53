//! Normal pdf/cdf/quantile used by the EDM weighting and log-SNR curve.
//!
//! The cdf is Hart's double-precision rational approximation; the quantile
//! starts from Acklam's rational approximation and is polished with Halley
//! steps on the cdf, which brings it to full double precision.

use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormalError {
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("standard deviation must be positive, got {0}")]
    BadSigma(f64),
}

/// A univariate normal distribution `N(mean, sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal {
    mean: f64,
    sd: f64,
}

impl Normal {
    pub fn new(mean: f64, sd: f64) -> Result<Self, NormalError> {
        if !(sd > 0.0) {
            return Err(NormalError::BadSigma(sd));
        }
        Ok(Normal { mean, sd })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        std_pdf(z) / self.sd
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - (self.sd * (2.0 * PI).sqrt()).ln()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        std_cdf((x - self.mean) / self.sd)
    }

    /// Inverse cdf; errors for `p` outside the open unit interval.
    pub fn quantile(&self, p: f64) -> Result<f64, NormalError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(NormalError::ProbabilityOutOfRange(p));
        }
        Ok(self.mean + self.sd * std_quantile(p))
    }
}

/// The `N(2.4, 2.4^2)` distribution of the EDM weighting.
pub fn edm_normal() -> Normal {
    Normal {
        mean: 2.4,
        sd: 2.4,
    }
}

/// `F^{-1}_{N(2.4, 2.4^2)}(p)`, the quantile the EDM log-SNR curve is built on.
pub fn normal_quantile(p: f64) -> Result<f64, NormalError> {
    edm_normal().quantile(p)
}

pub fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal cdf, Hart double-precision rational approximation.
///
/// Keeps full *relative* accuracy in the lower tail, which the quantile
/// refinement below depends on.
pub fn std_cdf(x: f64) -> f64 {
    let z = x.abs();
    let tail = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.071_067_811_865_475 {
            let mut num = 3.526_249_659_989_11e-2 * z + 0.700_383_064_443_688;
            num = num * z + 6.373_962_203_531_65;
            num = num * z + 33.912_866_078_383;
            num = num * z + 112.079_291_497_871;
            num = num * z + 221.213_596_169_931;
            num = num * z + 220.206_867_912_376;
            let mut den = 8.838_834_764_831_84e-2 * z + 1.755_667_163_182_64;
            den = den * z + 16.064_177_579_207;
            den = den * z + 86.780_732_202_946_1;
            den = den * z + 296.564_248_779_674;
            den = den * z + 637.333_633_378_831;
            den = den * z + 793.826_512_519_948;
            den = den * z + 440.413_735_824_752;
            e * num / den
        } else {
            let mut build = z + 0.65;
            build = z + 4.0 / build;
            build = z + 3.0 / build;
            build = z + 2.0 / build;
            build = z + 1.0 / build;
            e / build / 2.506_628_274_631_000_5
        }
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Standard normal quantile: Acklam's approximation plus two Halley steps.
pub fn std_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let mut x = acklam(p);
    // Halley refinement: u = (cdf(x) - p) / pdf(x); x <- x - u / (1 + x u / 2).
    for _ in 0..2 {
        let err = std_cdf(x) - p;
        let u = err * (2.0 * PI).sqrt() * (x * x / 2.0).exp();
        x -= u / (1.0 + x * u / 2.0);
    }
    x
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Simpson's rule on the standard normal pdf; oracle for cdf values.
    fn integrate_std_pdf(a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = std_pdf(a) + std_pdf(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * std_pdf(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn median_is_mean() {
        assert!((normal_quantile(0.5).unwrap() - 2.4).abs() <= 1e-12);
    }

    #[test]
    fn quantile_cdf_round_trip() {
        let n = edm_normal();
        let x = 3.7;
        assert!((n.quantile(n.cdf(x)).unwrap() - x).abs() <= 1e-9);
        // Whole +/- 5 sigma range around the mean.
        for i in 0..=100 {
            let x = 2.4 + 2.4 * (-5.0 + 0.1 * i as f64);
            let back = n.quantile(n.cdf(x)).unwrap();
            assert!(
                (back - x).abs() <= 1e-9 * f64::max(1.0, x.abs()),
                "x={x} back={back}"
            );
        }
    }

    #[test]
    fn one_sigma_point_matches_integration_oracle() {
        // cdf(mu + sigma) computed independently by quadrature of the pdf.
        let p = 0.5 + integrate_std_pdf(0.0, 1.0, 1 << 12);
        assert!((p - 0.841344746068543).abs() <= 1e-12);
        assert!((normal_quantile(p).unwrap() - 4.8).abs() <= 1e-9);
    }

    #[test]
    fn quantile_accuracy_deep_tails() {
        let n = edm_normal();
        // Implied x-space error |cdf(q(p)) - p| / pdf(q(p)) stays below 1e-9.
        let mut p = 1e-8;
        while p < 1.0 {
            let x = n.quantile(p).unwrap();
            let x_err = (n.cdf(x) - p).abs() / n.pdf(x);
            assert!(x_err <= 1e-9 * f64::max(1.0, x.abs()), "p={p} err={x_err}");
            p *= 3.7;
        }
        for p in [1.0 - 1e-8, 1.0 - 1e-6, 0.999, 0.841344746068543] {
            let x = n.quantile(p).unwrap();
            let x_err = (n.cdf(x) - p).abs() / n.pdf(x);
            assert!(x_err <= 1e-9 * f64::max(1.0, x.abs()), "p={p} err={x_err}");
        }
    }

    #[test]
    fn quantile_domain_errors() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(-0.2).is_err());
        assert!(normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn std_cdf_symmetry() {
        for z in [0.0, 0.31, 1.7, 3.3, 6.0, 9.5] {
            let s = std_cdf(z) + std_cdf(-z);
            assert!((s - 1.0).abs() <= 1e-14, "z={z} sum={s}");
        }
    }

    #[test]
    fn bad_sigma_rejected() {
        assert!(Normal::new(0.0, 0.0).is_err());
        assert!(Normal::new(0.0, -1.0).is_err());
    }
}
