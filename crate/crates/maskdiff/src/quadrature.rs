//! Composite Gauss-Legendre quadrature.
//!
//! Nodes are strictly interior, which matters here: several integrands are
//! finite limits of `inf * 0` expressions at the endpoints and must never be
//! evaluated at `t = 0` or `t = 1` exactly.

/// 8-point Gauss-Legendre nodes/weights on [-1, 1] (positive half; mirror for
/// the negative half).
const GL8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Integrate `f` over `[a, b]` with 8-point Gauss-Legendre on `panels`
/// uniform panels.
pub fn integrate(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + width * (p as f64 + 0.5);
        let half = width / 2.0;
        let mut acc = 0.0;
        for (node, weight) in GL8_NODES.iter().zip(GL8_WEIGHTS) {
            acc += weight * (f(mid + half * node) + f(mid - half * node));
        }
        total += acc * half;
    }
    total
}

/// Quadrature value plus a convergence verdict from panel doubling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub est_error: f64,
    pub converged: bool,
}

/// Integrate with panel doubling until the estimate settles to `tol`
/// (relative to `max(1, |value|)`) or the panel budget runs out; the
/// `converged` flag reports which happened. Non-integrable integrands show up
/// as estimates that keep drifting.
pub fn integrate_adaptive(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    start_panels: usize,
    max_panels: usize,
    tol: f64,
) -> Quadrature {
    let mut panels = start_panels.max(1);
    let mut value = integrate(f, a, b, panels);
    let mut est_error = f64::INFINITY;
    while panels * 2 <= max_panels {
        panels *= 2;
        let refined = integrate(f, a, b, panels);
        est_error = (refined - value).abs();
        value = refined;
        if est_error <= tol * f64::max(1.0, value.abs()) {
            return Quadrature {
                value,
                est_error,
                converged: true,
            };
        }
    }
    Quadrature {
        value,
        est_error,
        converged: est_error <= tol * f64::max(1.0, value.abs()),
    }
}
