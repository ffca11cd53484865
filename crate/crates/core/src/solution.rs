//! Manufactured exact solutions, closed-form Caputo derivatives of power
//! functions, and the analytic source terms of the 1D and 2D test problems.
//!
//! All exact solutions are separable, u = G(t) * Phi(x), with G a sum of
//! power terms c t^p (p > 1). The fractional part of the forcing is evaluated
//! with the order frozen at the evaluation time, matching the variable-order
//! operator where alpha(t) sits outside the history integral; this is what
//! makes the manufactured forcing exact.

use crate::error::{Result, SolverError};
use crate::kernel::{gamma, VariableOrder};

/// One temporal power term c * t^p.
#[derive(Debug, Clone, Copy)]
pub struct PowerTerm {
    pub coeff: f64,
    pub exponent: f64,
}

/// Spatial factor of a separable solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialProfile {
    /// Identically zero.
    Zero,
    /// sin x (used by small closed-form tests).
    PlainSine,
    /// (1 + cos(x)/4 + sin(2x)/5) sin(x), 2*pi periodic.
    Trig1d,
    /// (1 + cos(2 pi x)/4 + sin(2 pi y)/5) sin(2 pi x) sin(2 pi y), 1-periodic.
    Trig2d,
}

impl SpatialProfile {
    pub fn value(&self, p: [f64; 2]) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::PlainSine => p[0].sin(),
            Self::Trig1d => {
                let x = p[0];
                (1.0 + 0.25 * x.cos() + 0.2 * (2.0 * x).sin()) * x.sin()
            }
            Self::Trig2d => {
                let (x, y) = (p[0], p[1]);
                let tp = 2.0 * std::f64::consts::PI;
                (1.0 + 0.25 * (tp * x).cos() + 0.2 * (tp * y).sin())
                    * (tp * x).sin()
                    * (tp * y).sin()
            }
        }
    }

    pub fn gradient(&self, p: [f64; 2]) -> [f64; 2] {
        match self {
            Self::Zero => [0.0, 0.0],
            Self::PlainSine => [p[0].cos(), 0.0],
            Self::Trig1d => {
                let x = p[0];
                let a = 1.0 + 0.25 * x.cos() + 0.2 * (2.0 * x).sin();
                let ap = -0.25 * x.sin() + 0.4 * (2.0 * x).cos();
                [ap * x.sin() + a * x.cos(), 0.0]
            }
            Self::Trig2d => {
                let (x, y) = (p[0], p[1]);
                let tp = 2.0 * std::f64::consts::PI;
                let (sx, cx) = (tp * x).sin_cos();
                let (sy, cy) = (tp * y).sin_cos();
                let a = 1.0 + 0.25 * cx + 0.2 * sy;
                let ax = -0.25 * tp * sx;
                let ay = 0.2 * tp * cy;
                [
                    ax * sx * sy + a * tp * cx * sy,
                    ay * sx * sy + a * tp * sx * cy,
                ]
            }
        }
    }

    pub fn laplacian(&self, p: [f64; 2]) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::PlainSine => -p[0].sin(),
            Self::Trig1d => {
                let x = p[0];
                let a = 1.0 + 0.25 * x.cos() + 0.2 * (2.0 * x).sin();
                let ap = -0.25 * x.sin() + 0.4 * (2.0 * x).cos();
                let app = -0.25 * x.cos() - 0.8 * (2.0 * x).sin();
                app * x.sin() + 2.0 * ap * x.cos() - a * x.sin()
            }
            Self::Trig2d => {
                let (x, y) = (p[0], p[1]);
                let tp = 2.0 * std::f64::consts::PI;
                let (sx, cx) = (tp * x).sin_cos();
                let (sy, cy) = (tp * y).sin_cos();
                let a = 1.0 + 0.25 * cx + 0.2 * sy;
                let ax = -0.25 * tp * sx;
                let ay = 0.2 * tp * cy;
                let axx = -0.25 * tp * tp * cx;
                let ayy = -0.2 * tp * tp * sy;
                (axx + ayy) * sx * sy + 2.0 * (ax * tp * cx * sy + ay * tp * sx * cy)
                    - 2.0 * tp * tp * a * sx * sy
            }
        }
    }
}

/// A separable exact solution with everything the solver and the error norms
/// need in evaluable form.
#[derive(Debug, Clone)]
pub struct SolutionBundle {
    pub name: String,
    pub dim: usize,
    /// Temporal profile G(t) as a sum of power terms (exponents > 1).
    pub temporal: Vec<PowerTerm>,
    pub spatial: SpatialProfile,
    /// Natural periodic domain of the spatial profile.
    pub domain: [[f64; 2]; 2],
}

/// Caputo derivative of t^p with order beta in (1, 2) frozen at the
/// evaluation time: Gamma(p+1)/Gamma(p+1-beta) * t^(p-beta).
///
/// Requires p > 1 so the second derivative t^(p-2) is integrable against the
/// kernel. At t = 0 the value is 0 for p > beta.
pub fn caputo_power(p: f64, beta: f64, t: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(SolverError::InvalidArgument(format!(
            "caputo_power requires exponent p > 1, got {p}"
        )));
    }
    if !(beta > 1.0 && beta < 2.0) {
        return Err(SolverError::InvalidArgument(format!(
            "caputo_power requires order beta in (1, 2), got {beta}"
        )));
    }
    if t < 0.0 {
        return Err(SolverError::InvalidArgument("t must be >= 0".into()));
    }
    if t == 0.0 {
        if p > beta {
            return Ok(0.0);
        }
        return Err(SolverError::InvalidArgument(format!(
            "caputo_power of t^{p} at t = 0 is unbounded for p <= beta = {beta}"
        )));
    }
    Ok(gamma(p + 1.0)? / gamma(p + 1.0 - beta)? * t.powf(p - beta))
}

impl SolutionBundle {
    /// G(t) = t^2 + t^(7/2) + t^4/2 on the 1D trig profile.
    pub fn smooth_1d() -> Self {
        Self {
            name: "smooth1d".into(),
            dim: 1,
            temporal: vec![
                PowerTerm {
                    coeff: 1.0,
                    exponent: 2.0,
                },
                PowerTerm {
                    coeff: 1.0,
                    exponent: 3.5,
                },
                PowerTerm {
                    coeff: 0.5,
                    exponent: 4.0,
                },
            ],
            spatial: SpatialProfile::Trig1d,
            domain: [[0.0, 2.0 * std::f64::consts::PI], [0.0, 1.0]],
        }
    }

    /// u = t^(3/2) Phi(x); u_tt ~ t^(-1/2) is singular at the initial time.
    pub fn weak_singular_1d() -> Self {
        Self {
            name: "weak_singular1d".into(),
            dim: 1,
            temporal: vec![PowerTerm {
                coeff: 1.0,
                exponent: 1.5,
            }],
            spatial: SpatialProfile::Trig1d,
            domain: [[0.0, 2.0 * std::f64::consts::PI], [0.0, 1.0]],
        }
    }

    /// Same temporal profile as smooth_1d on the 2D trig profile.
    pub fn smooth_2d() -> Self {
        Self {
            name: "smooth2d".into(),
            dim: 2,
            temporal: vec![
                PowerTerm {
                    coeff: 1.0,
                    exponent: 2.0,
                },
                PowerTerm {
                    coeff: 1.0,
                    exponent: 3.5,
                },
                PowerTerm {
                    coeff: 0.5,
                    exponent: 4.0,
                },
            ],
            spatial: SpatialProfile::Trig2d,
            domain: [[0.0, 1.0], [0.0, 1.0]],
        }
    }

    /// u identically zero; f = 0 drives the zero-data invariance checks.
    pub fn zero(dim: usize) -> Self {
        let domain = if dim == 1 {
            [[0.0, 2.0 * std::f64::consts::PI], [0.0, 1.0]]
        } else {
            [[0.0, 1.0], [0.0, 1.0]]
        };
        Self {
            name: "zero".into(),
            dim,
            temporal: Vec::new(),
            spatial: SpatialProfile::Zero,
            domain,
        }
    }

    /// The full preset catalog.
    pub fn catalog() -> Vec<Self> {
        vec![
            Self::smooth_1d(),
            Self::weak_singular_1d(),
            Self::smooth_2d(),
            Self::zero(1),
        ]
    }

    pub fn preset(name: &str, dim: usize) -> Result<Self> {
        match (name, dim) {
            ("smooth", 1) => Ok(Self::smooth_1d()),
            ("smooth", 2) => Ok(Self::smooth_2d()),
            ("weak_singular", 1) => Ok(Self::weak_singular_1d()),
            ("zero", d) => Ok(Self::zero(d)),
            (other, d) => Err(SolverError::Config(format!(
                "no solution preset '{other}' in dimension {d} (expected smooth|weak_singular|zero)"
            ))),
        }
    }

    pub fn g(&self, t: f64) -> f64 {
        self.temporal
            .iter()
            .map(|p| p.coeff * t.powf(p.exponent))
            .sum()
    }

    pub fn g_prime(&self, t: f64) -> f64 {
        self.temporal
            .iter()
            .map(|p| p.coeff * p.exponent * t.powf(p.exponent - 1.0))
            .sum()
    }

    /// Second derivative of G; singular at t = 0 when an exponent is below 2.
    pub fn g_second(&self, t: f64) -> f64 {
        self.temporal
            .iter()
            .map(|p| p.coeff * p.exponent * (p.exponent - 1.0) * t.powf(p.exponent - 2.0))
            .sum()
    }

    pub fn u(&self, x: [f64; 2], t: f64) -> f64 {
        self.g(t) * self.spatial.value(x)
    }

    pub fn v(&self, x: [f64; 2], t: f64) -> f64 {
        self.g_prime(t) * self.spatial.value(x)
    }

    pub fn grad_u(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let g = self.g(t);
        let gr = self.spatial.gradient(x);
        [g * gr[0], g * gr[1]]
    }

    pub fn laplace_u(&self, x: [f64; 2], t: f64) -> f64 {
        self.g(t) * self.spatial.laplacian(x)
    }

    pub fn u_tt(&self, x: [f64; 2], t: f64) -> f64 {
        self.g_second(t) * self.spatial.value(x)
    }

    /// Variable-order Caputo derivative of u in time (order 1 + alpha(t)).
    pub fn fractional_term(&self, order: &VariableOrder, t: f64) -> Result<f64> {
        let beta = 1.0 + order.alpha(t);
        let mut acc = 0.0;
        for term in &self.temporal {
            acc += term.coeff * caputo_power(term.exponent, beta, t)?;
        }
        Ok(acc)
    }
}

/// Residual forcing of the wave equation for a bundle's exact solution:
/// f = u_tt + D_t^(1+alpha(t)) u - Lap u.
pub fn source_term(
    bundle: &SolutionBundle,
    order: &VariableOrder,
    x: [f64; 2],
    t: f64,
) -> Result<f64> {
    if bundle.spatial == SpatialProfile::Zero {
        return Ok(0.0);
    }
    let fractional = bundle.fractional_term(order, t)?;
    Ok(bundle.u_tt(x, t) + fractional * bundle.spatial.value(x) - bundle.laplace_u(x, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::OrderKind;
    use crate::reference;

    fn rng_stream(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed;
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn caputo_power_closed_forms() {
        // p=2, beta=1.5, t=1 -> 2/Gamma(1.5) (Beta-function identity).
        let v = caputo_power(2.0, 1.5, 1.0).unwrap();
        let expect = 2.0 / gamma(1.5).unwrap();
        assert!((v - expect).abs() / expect < 1e-13);
        // Oracle cross-check at the same point.
        let oracle = reference::caputo_wave_order_power(2.0, 1.5, 1.0);
        assert!((v - oracle).abs() < 1e-8);
        // t = 0 vanishes for p > beta.
        assert_eq!(caputo_power(3.5, 1.9, 0.0).unwrap(), 0.0);
        assert!(caputo_power(0.9, 1.5, 1.0).is_err());
    }

    #[test]
    fn caputo_power_matches_quadrature_oracle() {
        for p in [1.5, 2.0, 3.5, 4.0] {
            for beta in [1.1, 1.5, 1.9] {
                for t in [0.05, 0.4, 0.7, 1.0] {
                    let closed = caputo_power(p, beta, t).unwrap();
                    let oracle = reference::caputo_wave_order_power(p, beta, t);
                    assert!(
                        (closed - oracle).abs() < 1e-8 * closed.abs().max(1.0),
                        "p={p} beta={beta} t={t}: {closed} vs {oracle}"
                    );
                }
            }
        }
    }

    #[test]
    fn derivatives_consistent_with_finite_differences() {
        let eps = 1e-6;
        let mut rng = rng_stream(42);
        for bundle in [
            SolutionBundle::smooth_1d(),
            SolutionBundle::smooth_2d(),
            SolutionBundle::weak_singular_1d(),
        ] {
            for _ in 0..40 {
                let x = [
                    bundle.domain[0][0] + rng() * (bundle.domain[0][1] - bundle.domain[0][0]),
                    if bundle.dim == 2 { rng() } else { 0.0 },
                ];
                let t = 0.2 + 0.7 * rng();
                let scale = bundle.u(x, t).abs().max(1.0);
                // v = du/dt
                let fd_v = (bundle.u(x, t + eps) - bundle.u(x, t - eps)) / (2.0 * eps);
                assert!((fd_v - bundle.v(x, t)).abs() < 2e-5 * scale.max(fd_v.abs()));
                // u_tt
                let fd_tt = (bundle.u(x, t + eps) - 2.0 * bundle.u(x, t) + bundle.u(x, t - eps))
                    / (eps * eps);
                assert!(
                    (fd_tt - bundle.u_tt(x, t)).abs() < 1e-3 * fd_tt.abs().max(scale),
                    "u_tt mismatch: {fd_tt} vs {}",
                    bundle.u_tt(x, t)
                );
                // gradient and laplacian in x
                let gr = bundle.grad_u(x, t);
                let fd_gx = (bundle.u([x[0] + eps, x[1]], t) - bundle.u([x[0] - eps, x[1]], t))
                    / (2.0 * eps);
                assert!((fd_gx - gr[0]).abs() < 2e-5 * scale.max(fd_gx.abs()));
                let mut fd_lap = (bundle.u([x[0] + eps, x[1]], t) - 2.0 * bundle.u(x, t)
                    + bundle.u([x[0] - eps, x[1]], t))
                    / (eps * eps);
                if bundle.dim == 2 {
                    let fd_gy = (bundle.u([x[0], x[1] + eps], t) - bundle.u([x[0], x[1] - eps], t))
                        / (2.0 * eps);
                    assert!((fd_gy - gr[1]).abs() < 2e-5 * scale.max(fd_gy.abs()));
                    fd_lap += (bundle.u([x[0], x[1] + eps], t) - 2.0 * bundle.u(x, t)
                        + bundle.u([x[0], x[1] - eps], t))
                        / (eps * eps);
                }
                assert!(
                    (fd_lap - bundle.laplace_u(x, t)).abs() < 1e-3 * fd_lap.abs().max(scale),
                    "laplacian mismatch"
                );
            }
        }
    }

    #[test]
    fn source_closed_form_single_power() {
        // G = t^2, Phi = sin x, constant alpha:
        // f = 2 Phi + 2 t^(1-alpha)/Gamma(2-alpha) Phi + t^2 Phi.
        let bundle = SolutionBundle {
            name: "test".into(),
            dim: 1,
            temporal: vec![PowerTerm {
                coeff: 1.0,
                exponent: 2.0,
            }],
            spatial: SpatialProfile::PlainSine,
            domain: [[0.0, 2.0 * std::f64::consts::PI], [0.0, 1.0]],
        };
        let alpha = 0.4;
        let order = VariableOrder::new(OrderKind::Constant(alpha), 1.0).unwrap();
        for (x, t) in [(0.3, 0.5), (1.2, 0.9), (4.0, 0.1)] {
            let f = source_term(&bundle, &order, [x, 0.0], t).unwrap();
            let phi = x.sin();
            let expect = 2.0 * phi
                + 2.0 * t.powf(1.0 - alpha) / gamma(2.0 - alpha).unwrap() * phi
                + t * t * phi;
            assert!((f - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn source_at_zero_time_limit() {
        // Only the t^2 term of G survives in u_tt as t -> 0; for smooth
        // presets f(x, 0+) -> 2 Phi(x) + 0 - 0 (Laplacian term also vanishes
        // since G(0) = 0 and the fractional term since p > beta).
        let bundle = SolutionBundle::smooth_1d();
        let order = VariableOrder::new(OrderKind::ExpDecay, 1.0).unwrap();
        let x = [0.7, 0.0];
        let f = source_term(&bundle, &order, x, 0.0).unwrap();
        let expect = 2.0 * bundle.spatial.value(x);
        assert!((f - expect).abs() < 1e-13 * expect.abs());
    }

    #[test]
    fn weak_singularity_second_derivative() {
        let b = SolutionBundle::weak_singular_1d();
        let x = [1.1, 0.0];
        for t in [1e-2f64, 1e-4, 1e-6] {
            let expect = 0.75 * t.powf(-0.5) * b.spatial.value(x);
            assert!((b.u_tt(x, t) - expect).abs() < 1e-10 * expect.abs());
        }
    }

    #[test]
    fn residual_of_bundles_vanishes_with_quadrature_fractional_term() {
        // Substitute u into the wave equation with its own forcing, using the
        // quadrature oracle for the frozen-order fractional term.
        let mut rng = rng_stream(7);
        for (bundle, kind) in [
            (SolutionBundle::smooth_1d(), OrderKind::ExpDecay),
            (SolutionBundle::weak_singular_1d(), OrderKind::Sine),
            (SolutionBundle::smooth_2d(), OrderKind::Kink),
        ] {
            let order = VariableOrder::new(kind, 1.0).unwrap();
            for _ in 0..34 {
                let x = [
                    bundle.domain[0][0] + rng() * (bundle.domain[0][1] - bundle.domain[0][0]),
                    if bundle.dim == 2 { rng() } else { 0.0 },
                ];
                let t = 0.05 + 0.95 * rng();
                let beta = 1.0 + order.alpha(t);
                let frac_oracle: f64 = bundle
                    .temporal
                    .iter()
                    .map(|p| p.coeff * reference::caputo_wave_order_power(p.exponent, beta, t))
                    .sum();
                let residual = bundle.u_tt(x, t) + frac_oracle * bundle.spatial.value(x)
                    - bundle.laplace_u(x, t)
                    - source_term(&bundle, &order, x, t).unwrap();
                assert!(
                    residual.abs() < 1e-8 * (1.0 + bundle.u(x, t).abs()),
                    "{}: residual {residual:.3e} at t={t}",
                    bundle.name
                );
            }
        }
    }

    #[test]
    fn presets_satisfy_zero_initial_conditions_and_periodicity() {
        let smooth = SolutionBundle::smooth_1d();
        assert_eq!(smooth.g(0.0), 0.0);
        assert_eq!(smooth.g_prime(0.0), 0.0);
        let period = 2.0 * std::f64::consts::PI;
        for x in [0.0, 0.4, 2.0] {
            let a = smooth.spatial.value([x, 0.0]);
            let b = smooth.spatial.value([x + period, 0.0]);
            assert!((a - b).abs() < 1e-12);
        }
        let s2 = SolutionBundle::smooth_2d();
        for (x, y) in [(0.1, 0.2), (0.7, 0.9)] {
            let a = s2.spatial.value([x, y]);
            assert!((a - s2.spatial.value([x + 1.0, y])).abs() < 1e-12);
            assert!((a - s2.spatial.value([x, y + 1.0])).abs() < 1e-12);
        }
        assert_eq!(SolutionBundle::catalog().len(), 4);
    }
}
