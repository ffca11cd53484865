//! Variable-order temporal machinery: the order function alpha(t), the
//! per-step intermediate point sigma_m, the scaling s_m, the memory weights
//! c_i^(m) / a_i^(m), and executable weight diagnostics.
//!
//! The weights are the L2-1sigma construction evaluated with the order frozen
//! at t_{m+sigma_m}. They are recomputed in full at every level (O(m) work per
//! step, O(M^2) total) because both sigma_m and the frozen order change with
//! m; no caching across levels is valid for a genuinely variable order.

use crate::error::{Result, SolverError};
use rayon::prelude::*;

const SIGMA_TOL: f64 = 1e-15;
const SIGMA_MAX_ITER: usize = 100;

// ---------------------------------------------------------------------------
// Gamma function
// ---------------------------------------------------------------------------

/// Lanczos coefficients, g = 7, 9 terms (GSL set).
const LANCZOS_G: f64 = 7.0;
const LANCZOS_P: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma function for x in (0, 30], relative error below 1e-12.
///
/// Lanczos approximation; arguments below 1/2 are lifted through the
/// recurrence Gamma(x) = Gamma(x+1)/x, so no reflection is needed.
pub fn gamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x <= 30.0) {
        return Err(SolverError::InvalidArgument(format!(
            "gamma defined for x in (0, 30], got {x}"
        )));
    }
    Ok(gamma_unchecked(x))
}

fn gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        return gamma_unchecked(x + 1.0) / x;
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_P[0];
    for (i, p) in LANCZOS_P.iter().enumerate().skip(1) {
        acc += p / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * acc
}

// ---------------------------------------------------------------------------
// Order function
// ---------------------------------------------------------------------------

/// The catalog of order functions exercised by the experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrderKind {
    /// 0.1 + 0.8 exp(-t)
    ExpDecay,
    /// 0.9 - 0.5 t^2
    Quadratic,
    /// (2 + sin t) / 4
    Sine,
    /// 0.3 + 0.4 |t - 1/2|; Lipschitz but not C^1
    Kink,
    /// constant order
    Constant(f64),
}

impl OrderKind {
    pub fn parse(name: &str) -> Result<Self> {
        if let Some(rest) = name.strip_prefix("constant:") {
            let a: f64 = rest
                .parse()
                .map_err(|_| SolverError::Config(format!("bad constant order '{rest}'")))?;
            return Ok(Self::Constant(a));
        }
        match name {
            "exp_decay" => Ok(Self::ExpDecay),
            "quadratic" => Ok(Self::Quadratic),
            "sine" => Ok(Self::Sine),
            "kink" => Ok(Self::Kink),
            other => Err(SolverError::Config(format!(
                "unknown order preset '{other}' (expected exp_decay|quadratic|sine|kink|constant:<a>)"
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::ExpDecay => "exp_decay".into(),
            Self::Quadratic => "quadratic".into(),
            Self::Sine => "sine".into(),
            Self::Kink => "kink".into(),
            Self::Constant(a) => format!("constant:{a}"),
        }
    }
}

/// Time-dependent fractional order alpha : [0, T] -> (0, 1) with its
/// Lipschitz constant and range bounds on [0, T].
#[derive(Debug, Clone)]
pub struct VariableOrder {
    pub kind: OrderKind,
    pub t_final: f64,
    pub lipschitz: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl VariableOrder {
    pub fn new(kind: OrderKind, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(SolverError::InvalidArgument(
                "t_final must be positive".into(),
            ));
        }
        let (lipschitz, alpha_min, alpha_max) = match kind {
            OrderKind::ExpDecay => (0.8, 0.1 + 0.8 * (-t_final).exp(), 0.9),
            OrderKind::Quadratic => (t_final, 0.9 - 0.5 * t_final * t_final, 0.9),
            OrderKind::Sine => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                let max = if t_final >= half_pi {
                    0.75
                } else {
                    (2.0 + t_final.sin()) / 4.0
                };
                let min = if t_final >= 1.5 * std::f64::consts::PI {
                    0.25
                } else {
                    (0.5f64).min((2.0 + t_final.sin()) / 4.0)
                };
                (0.25, min, max)
            }
            OrderKind::Kink => {
                let max = if t_final <= 0.5 {
                    0.5
                } else {
                    (0.5f64).max(0.3 + 0.4 * (t_final - 0.5))
                };
                let min = if t_final <= 0.5 {
                    0.3 + 0.4 * (0.5 - t_final)
                } else {
                    0.3
                };
                (0.4, min, max)
            }
            OrderKind::Constant(a) => (0.0, a, a),
        };
        if !(alpha_min > 0.0 && alpha_max < 1.0) {
            return Err(SolverError::InvalidArgument(format!(
                "order {} leaves (0,1) on [0, {t_final}]: range [{alpha_min}, {alpha_max}]",
                kind.label()
            )));
        }
        Ok(Self {
            kind,
            t_final,
            lipschitz,
            alpha_min,
            alpha_max,
        })
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            OrderKind::ExpDecay => 0.1 + 0.8 * (-t).exp(),
            OrderKind::Quadratic => 0.9 - 0.5 * t * t,
            OrderKind::Sine => (2.0 + t.sin()) / 4.0,
            OrderKind::Kink => 0.3 + 0.4 * (t - 0.5).abs(),
            OrderKind::Constant(a) => a,
        }
    }

    /// Derivative of the order where it exists; `None` exactly at the kink.
    pub fn alpha_prime(&self, t: f64) -> Option<f64> {
        match self.kind {
            OrderKind::ExpDecay => Some(-0.8 * (-t).exp()),
            OrderKind::Quadratic => Some(-t),
            OrderKind::Sine => Some(t.cos() / 4.0),
            OrderKind::Kink => {
                if t == 0.5 {
                    None
                } else {
                    Some(if t > 0.5 { 0.4 } else { -0.4 })
                }
            }
            OrderKind::Constant(_) => Some(0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// sigma_m and s_m
// ---------------------------------------------------------------------------

/// Residual of the intermediate-point equation,
/// F(sigma) = sigma - (1 - alpha(t_m + sigma*tau)/2).
pub fn sigma_residual(order: &VariableOrder, m: usize, tau: f64, sigma: f64) -> f64 {
    let t = m as f64 * tau + sigma * tau;
    sigma - (1.0 - 0.5 * order.alpha(t))
}

/// Guard on the step size required for a unique root (and used by the
/// cumulative weight-variation argument).
pub fn check_step_size(order: &VariableOrder, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(SolverError::InvalidArgument("tau must be positive".into()));
    }
    if order.lipschitz * tau > 1.0 {
        return Err(SolverError::InvalidArgument(format!(
            "step size too large: L_alpha * tau = {} > 1 (uniqueness of sigma_m requires L_alpha*tau < 2; we enforce <= 1)",
            order.lipschitz * tau
        )));
    }
    Ok(())
}

/// Unique root sigma_m in (1/2, 1) of F(sigma) = 0.
///
/// Newton iteration from sigma = 3/4 with tolerance 1e-15; falls back to
/// bisection on (1/2, 1) when the derivative is unavailable or the iteration
/// stalls (the kink order is Lipschitz but not C^1).
pub fn solve_sigma(order: &VariableOrder, m: usize, tau: f64) -> Result<f64> {
    check_step_size(order, tau)?;
    let t_m = m as f64 * tau;
    let mut sigma = 0.75;
    let mut iters = 0usize;
    let newton_budget = 30usize;
    while iters < newton_budget {
        let f = sigma_residual(order, m, tau, sigma);
        if f.abs() <= SIGMA_TOL {
            return finalize_sigma(order, m, tau, sigma);
        }
        let fp = order
            .alpha_prime(t_m + sigma * tau)
            .map(|ap| 1.0 + 0.5 * tau * ap);
        match fp {
            Some(d) if d.abs() > 0.25 => sigma -= f / d,
            _ => break,
        }
        iters += 1;
    }
    // Bisection fallback: F(1/2) < 0 < F(1) since alpha in (0,1).
    let (mut lo, mut hi) = (0.5, 1.0);
    while iters < SIGMA_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let f = sigma_residual(order, m, tau, mid);
        if f.abs() <= SIGMA_TOL || (hi - lo) < 4.0 * f64::EPSILON {
            return finalize_sigma(order, m, tau, mid);
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }
    Err(SolverError::NumericalFailure(format!(
        "sigma iteration did not reach |F| <= 1e-15 within {SIGMA_MAX_ITER} iterations at m={m}"
    )))
}

fn finalize_sigma(order: &VariableOrder, m: usize, tau: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.5 || sigma >= 1.0 {
        return Err(SolverError::NumericalFailure(format!(
            "sigma_{m} = {sigma} escaped (1/2, 1)"
        )));
    }
    debug_assert!(sigma_residual(order, m, tau, sigma).abs() <= SIGMA_TOL);
    Ok(sigma)
}

/// Scaling s_m of the discrete fractional derivative.
///
/// m = 0 uses the half-point order alpha(tau/2); m >= 1 uses the order frozen
/// at t_m + sigma_m*tau.
pub fn compute_s(order: &VariableOrder, m: usize, tau: f64, sigma: f64) -> Result<f64> {
    if m == 0 {
        let a = order.alpha(0.5 * tau);
        Ok(2.0f64.powf(1.0 - a) * tau.powf(a) * gamma(2.0 - a)?)
    } else {
        let a = order.alpha(m as f64 * tau + sigma * tau);
        Ok(tau.powf(a) * gamma(2.0 - a)?)
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Denominator used in the i = m branch of the weight formula.
///
/// The companion branches divide their difference terms by 2-alpha; a
/// 2*alpha form of the last branch circulates as well. Both are selectable
/// so the choice is settled by executable evidence (weight monotonicity and
/// the linear-exactness identity) instead of by fiat. See
/// [`select_weight_variant`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightVariant {
    /// Divide the last-term difference by (2 - alpha), consistent with the
    /// other branches.
    TwoMinusAlpha,
    /// Divide by 2*alpha.
    TwoAlpha,
}

impl WeightVariant {
    pub fn label(&self) -> &'static str {
        match self {
            Self::TwoMinusAlpha => "two-minus-alpha",
            Self::TwoAlpha => "two-alpha",
        }
    }
}

/// Per-step temporal data: the intermediate point, the scaling and the memory
/// weight sequence at one time level.
#[derive(Debug, Clone)]
pub struct FractionalStep {
    pub level: usize,
    pub sigma: f64,
    /// Evaluation time of this step's equations (t_m + sigma*tau; tau/2 at m=0).
    pub t_star: f64,
    pub alpha_star: f64,
    pub s: f64,
    /// Raw weights c_0..c_m (c = [1] at the startup level).
    pub c: Vec<f64>,
    /// Normalized weights a_i = c_i / s_m.
    pub a: Vec<f64>,
}

impl FractionalStep {
    /// Data for the startup level m = 0: the scheme uses the single
    /// coefficient 1/s_0 on (v^1 - v^0), evaluated at t_{1/2} = tau/2.
    /// sigma_0 is computed for reporting but does not enter the stepping.
    pub fn startup(order: &VariableOrder, tau: f64) -> Result<Self> {
        let sigma = solve_sigma(order, 0, tau)?;
        let s = compute_s(order, 0, tau, sigma)?;
        Ok(Self {
            level: 0,
            sigma,
            t_star: 0.5 * tau,
            alpha_star: order.alpha(0.5 * tau),
            s,
            c: vec![1.0],
            a: vec![1.0 / s],
        })
    }
}

/// Memory weights at level m >= 1.
///
/// Evaluates the three-branch formula for c_i at the frozen order
/// alpha(t_{m+sigma_m}) and divides by s_m. The monotonicity relation
/// (strict decrease in i, positive lower bound on c_m) is checked on
/// every call; a violation is reported with the offending (m, i).
pub fn compute_weights(
    order: &VariableOrder,
    m: usize,
    tau: f64,
    variant: WeightVariant,
) -> Result<FractionalStep> {
    if m == 0 {
        return Err(SolverError::InvalidArgument(
            "compute_weights requires m >= 1; the startup level uses 1/s_0 directly".into(),
        ));
    }
    let sigma = solve_sigma(order, m, tau)?;
    let t_star = (m as f64 + sigma) * tau;
    let alpha = order.alpha(t_star);
    let s = compute_s(order, m, tau, sigma)?;

    // Power tables (j + sigma)^(1-alpha) and (j + sigma)^(2-alpha), j = 0..=m.
    let mut p1 = vec![0.0; m + 1];
    let mut p2 = vec![0.0; m + 1];
    for j in 0..=m {
        let base = j as f64 + sigma;
        let v = base.powf(1.0 - alpha);
        p1[j] = v;
        p2[j] = v * base;
    }

    let two_minus = 2.0 - alpha;
    let mut c = vec![0.0; m + 1];
    c[0] = (p2[1] - p2[0]) / two_minus - 0.5 * (p1[1] - p1[0]);
    for i in 1..m {
        c[i] = (p2[i + 1] - 2.0 * p2[i] + p2[i - 1]) / two_minus
            - 0.5 * (p1[i + 1] - 2.0 * p1[i] + p1[i - 1]);
    }
    let last_denom = match variant {
        WeightVariant::TwoMinusAlpha => two_minus,
        WeightVariant::TwoAlpha => 2.0 * alpha,
    };
    c[m] = 0.5 * (3.0 * p1[m] - p1[m - 1]) - (p2[m] - p2[m - 1]) / last_denom;

    check_monotonicity(&c, m, sigma, alpha)?;

    let a = c.iter().map(|&ci| ci / s).collect();
    Ok(FractionalStep {
        level: m,
        sigma,
        t_star,
        alpha_star: alpha,
        s,
        c,
        a,
    })
}

fn check_monotonicity(c: &[f64], m: usize, sigma: f64, alpha: f64) -> Result<()> {
    for i in 0..m {
        if !(c[i] > c[i + 1]) {
            return Err(SolverError::DiagnosticFailure {
                level: m,
                index: i,
                message: format!(
                    "weight monotonicity violated: c_{i} = {} <= c_{} = {}",
                    c[i],
                    i + 1,
                    c[i + 1]
                ),
            });
        }
    }
    let lower = (1.0 - alpha) / (2.0 * (m as f64 + sigma).powf(alpha));
    if !(c[m] > lower) {
        return Err(SolverError::DiagnosticFailure {
            level: m,
            index: m,
            message: format!("c_m = {} not above the lower bound {lower}", c[m]),
        });
    }
    Ok(())
}

/// Relative defect of the linear-exactness identity
/// tau * sum_i a_i^(m) = t_{m+sigma}^(1-alpha*) / Gamma(2-alpha*),
/// which holds exactly because the piecewise-quadratic construction
/// reproduces linear functions.
pub fn linear_exactness_defect(step: &FractionalStep, tau: f64) -> f64 {
    let exact = step.t_star.powf(1.0 - step.alpha_star) / gamma_unchecked(2.0 - step.alpha_star);
    let discrete = tau * step.a.iter().sum::<f64>();
    ((discrete - exact) / exact).abs()
}

/// Pick the i = m branch denominator by executable evidence: the variant must
/// pass both the monotonicity diagnostic and the linear-exactness identity on
/// probe levels. Returns the selected variant and a human-readable report for
/// the run log.
pub fn select_weight_variant(
    order: &VariableOrder,
    tau: f64,
    probe_levels: usize,
) -> Result<(WeightVariant, String)> {
    let probe = probe_levels.max(2);
    let mut verdicts = Vec::new();
    for variant in [WeightVariant::TwoMinusAlpha, WeightVariant::TwoAlpha] {
        let mut verdict = Ok(());
        for m in 1..=probe {
            match compute_weights(order, m, tau, variant) {
                Err(e) => {
                    verdict = Err(format!("{e}"));
                    break;
                }
                Ok(step) => {
                    let defect = linear_exactness_defect(&step, tau);
                    if defect > 1e-10 {
                        verdict = Err(format!(
                            "linear-exactness defect {defect:.3e} at m={m} exceeds 1e-10"
                        ));
                        break;
                    }
                }
            }
        }
        verdicts.push((variant, verdict));
    }
    let chosen = verdicts
        .iter()
        .find(|(_, v)| v.is_ok())
        .map(|(variant, _)| *variant)
        .ok_or_else(|| {
            SolverError::NumericalFailure(
                "neither last-weight variant passes the weight diagnostics".into(),
            )
        })?;
    let mut report = String::new();
    for (variant, verdict) in &verdicts {
        match verdict {
            Ok(()) => report.push_str(&format!(
                "last-weight variant '{}': passes monotonicity and linear exactness (m <= {probe})\n",
                variant.label()
            )),
            Err(why) => report.push_str(&format!(
                "last-weight variant '{}': rejected ({why})\n",
                variant.label()
            )),
        }
    }
    report.push_str(&format!("selected variant: {}", chosen.label()));
    Ok((chosen, report))
}

// ---------------------------------------------------------------------------
// History accumulation
// ---------------------------------------------------------------------------

/// Known part of the discrete memory term at level m:
/// sum_{i=0}^{m-1} a_{m-i} (v^{i+1} - v^i).
/// The a_0 (v^{m+1} - v^m) term involves the unknown and is handled by the
/// stepper.
pub fn history_sum(step: &FractionalStep, velocity_levels: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = step.level;
    if velocity_levels.len() != m + 1 {
        return Err(SolverError::InvalidArgument(format!(
            "history length {} does not match level m={m} (need m+1 entries)",
            velocity_levels.len()
        )));
    }
    let dofs = velocity_levels[0].len();
    if velocity_levels.iter().any(|v| v.len() != dofs) {
        return Err(SolverError::InvalidArgument(
            "velocity history entries have inconsistent lengths".into(),
        ));
    }
    let deltas: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            velocity_levels[i + 1]
                .iter()
                .zip(&velocity_levels[i])
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    Ok(history_sum_deltas(step, &deltas))
}

/// Same accumulation with the history stored as differences
/// delta_i = v^{i+1} - v^i (the stepper's storage layout).
pub fn history_sum_deltas(step: &FractionalStep, deltas: &[Vec<f64>]) -> Vec<f64> {
    let m = step.level;
    assert_eq!(deltas.len(), m, "delta history length must equal the level");
    if m == 0 {
        return Vec::new();
    }
    let dofs = deltas[0].len();
    // Fixed-size chunks with a sequential final reduction keep the result
    // bit-deterministic for any thread count.
    const CHUNK: usize = 128;
    if m * dofs < 1 << 14 {
        let mut out = vec![0.0; dofs];
        for i in 0..m {
            let w = step.a[m - i];
            for (o, d) in out.iter_mut().zip(&deltas[i]) {
                *o += w * d;
            }
        }
        return out;
    }
    let partials: Vec<Vec<f64>> = (0..m)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; dofs];
            for &i in chunk {
                let w = step.a[m - i];
                for (o, d) in acc.iter_mut().zip(&deltas[i]) {
                    *o += w * d;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; dofs];
    for p in partials {
        for (o, v) in out.iter_mut().zip(&p) {
            *o += v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Weight-variation diagnostics
// ---------------------------------------------------------------------------

/// Executable form of the cumulative weight-variation estimate.
#[derive(Debug, Clone)]
pub struct VariationReport {
    pub tau: f64,
    pub levels: usize,
    /// max over 2<=m<=M-1 and the shared-branch lags 0<=i<=m-2 of
    /// |a_i^(m) - a_i^(m-1)| / [tau (1 + |log((i+1)tau)|) ((i+1)tau)^(-alpha_max)].
    /// (At i = m-1 the shorter level evaluates its last-weight branch, a
    /// different formula, so that lag is excluded; the cumulative estimate
    /// below never involves it either since k >= 2.)
    pub ratio_stat: f64,
    pub ratio_at: (usize, usize),
    /// max over 2<=k<=n<=M-1 of tau * sum_{m=k}^{n} (a_{m-k}^(m) - a_{m-k}^(m-1))_+,
    /// reported raw (the bound is C5 * tau).
    pub cumulative_raw: f64,
    /// cumulative_raw / tau; bounded uniformly as tau decreases.
    pub cumulative_over_tau: f64,
}

/// Scan all levels up to M-1 and evaluate both variation statistics.
pub fn weight_variation_report(
    order: &VariableOrder,
    tau: f64,
    levels: usize,
    variant: WeightVariant,
) -> Result<VariationReport> {
    if levels < 3 {
        return Err(SolverError::InvalidArgument(
            "variation report needs at least 3 levels".into(),
        ));
    }
    let alpha_max = order.alpha_max;
    let mut prev = compute_weights(order, 1, tau, variant)?;
    let mut ratio_stat = 0.0f64;
    let mut ratio_at = (0, 0);
    // Positive-part accumulators per start level k; all addends are >= 0 so
    // the max over n is attained at the final level.
    let mut acc = vec![0.0f64; levels];
    for m in 2..levels {
        let cur = compute_weights(order, m, tau, variant)?;
        for i in 0..m - 1 {
            let diff = (cur.a[i] - prev.a[i]).abs();
            let r = (i as f64 + 1.0) * tau;
            let denom = tau * (1.0 + r.ln().abs()) * r.powf(-alpha_max);
            let ratio = diff / denom;
            if ratio > ratio_stat {
                ratio_stat = ratio;
                ratio_at = (m, i);
            }
        }
        for k in 2..=m {
            let i = m - k;
            let d = cur.a[i] - prev.a[i];
            if d > 0.0 {
                acc[k] += d;
            }
        }
        prev = cur;
    }
    let max_acc = acc.iter().cloned().fold(0.0f64, f64::max);
    Ok(VariationReport {
        tau,
        levels,
        ratio_stat,
        ratio_at,
        cumulative_raw: tau * max_acc,
        cumulative_over_tau: max_acc,
    })
}

/// The two bounded weight sums:
/// tau * sum_{i=1}^{m} (a_{i-1}^(i) - a_i^(i)) and tau * sum_{i=1}^{m} a_i^(i).
pub fn bounded_weight_sums(
    order: &VariableOrder,
    tau: f64,
    levels: usize,
    variant: WeightVariant,
) -> Result<(f64, f64)> {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for i in 1..=levels {
        let step = compute_weights(order, i, tau, variant)?;
        s1 += step.a[i - 1] - step.a[i];
        s2 += step.a[i];
    }
    Ok((tau * s1, tau * s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    fn order(kind: OrderKind) -> VariableOrder {
        VariableOrder::new(kind, 1.0).unwrap()
    }

    #[test]
    fn gamma_reference_values() {
        assert!((gamma(1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((gamma(0.5).unwrap() - std::f64::consts::PI.sqrt()).abs() < 1e-13);
        assert!((gamma(5.0).unwrap() - 24.0).abs() / 24.0 < 1e-13);
        // Gamma(4.5) by recurrence from Gamma(1.5) = sqrt(pi)/2.
        let g15 = std::f64::consts::PI.sqrt() / 2.0;
        let expect = 3.5 * 2.5 * 1.5 * g15;
        assert!((gamma(4.5).unwrap() - expect).abs() / expect < 1e-12);
        assert!(gamma(0.0).is_err());
        assert!(gamma(-1.0).is_err());
        assert!(gamma(31.0).is_err());
    }

    #[test]
    fn gamma_recurrence_over_domain() {
        let mut x = 0.05;
        while x < 29.0 {
            let lhs = gamma(x + 1.0).unwrap();
            let rhs = x * gamma(x).unwrap();
            assert!((lhs - rhs).abs() / rhs.abs() < 1e-12, "x = {x}");
            x += 0.173;
        }
    }

    #[test]
    fn order_presets_stay_in_unit_interval() {
        for kind in [
            OrderKind::ExpDecay,
            OrderKind::Quadratic,
            OrderKind::Sine,
            OrderKind::Kink,
            OrderKind::Constant(0.5),
        ] {
            let o = order(kind);
            let n = 10_000;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..=n {
                let t = i as f64 / n as f64;
                let a = o.alpha(t);
                assert!(a > 0.0 && a < 1.0, "{:?} at t={t}", kind);
                lo = lo.min(a);
                hi = hi.max(a);
            }
            assert!(
                lo >= o.alpha_min - 1e-12,
                "{kind:?}: {lo} < {}",
                o.alpha_min
            );
            assert!(
                hi <= o.alpha_max + 1e-12,
                "{kind:?}: {hi} > {}",
                o.alpha_max
            );
        }
    }

    #[test]
    fn order_lipschitz_bound_on_sampled_pairs() {
        for kind in [
            OrderKind::ExpDecay,
            OrderKind::Quadratic,
            OrderKind::Sine,
            OrderKind::Kink,
        ] {
            let o = order(kind);
            let n = 400;
            for i in 0..n {
                for j in (i + 1)..n.min(i + 40) {
                    let (s, t) = (i as f64 / n as f64, j as f64 / n as f64);
                    assert!(
                        (o.alpha(t) - o.alpha(s)).abs() <= o.lipschitz * (t - s) + 1e-14,
                        "{kind:?} at ({s},{t})"
                    );
                }
            }
        }
    }

    #[test]
    fn sigma_constant_order_closed_form() {
        // F is linear in sigma for constant order: sigma = 1 - alpha/2.
        let o = order(OrderKind::Constant(0.5));
        assert!((solve_sigma(&o, 0, 0.1).unwrap() - 0.75).abs() < 1e-15);
        let o = order(OrderKind::Constant(0.9));
        assert!((solve_sigma(&o, 3, 0.05).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn sigma_matches_bisection_oracle() {
        for kind in [OrderKind::ExpDecay, OrderKind::Sine, OrderKind::Kink] {
            let o = order(kind);
            for m in [0usize, 1, 5, 9] {
                let tau = 0.1;
                let newton = solve_sigma(&o, m, tau).unwrap();
                let bis = reference::bisection_sigma(&o, m, tau);
                assert!(
                    (newton - bis).abs() < 1e-14,
                    "{kind:?} m={m}: {newton} vs {bis}"
                );
                assert!(sigma_residual(&o, m, tau, newton).abs() <= 1e-15);
                assert!(newton > 0.5 && newton < 1.0);
            }
        }
    }

    #[test]
    fn sigma_rejects_oversized_step() {
        let o = order(OrderKind::ExpDecay); // L = 0.8
        assert!(matches!(
            solve_sigma(&o, 0, 1.3),
            Err(SolverError::InvalidArgument(_))
        ));
    }

    #[test]
    fn s_startup_closed_form() {
        let o = order(OrderKind::Constant(0.5));
        let tau = 0.01;
        let sigma = solve_sigma(&o, 0, tau).unwrap();
        let s0 = compute_s(&o, 0, tau, sigma).unwrap();
        let expect = 2.0f64.sqrt() * tau.sqrt() * gamma(1.5).unwrap();
        assert!((s0 - expect).abs() / expect < 1e-14);
    }

    #[test]
    fn s_general_level_closed_form() {
        let o = order(OrderKind::Sine);
        let (m, tau) = (3usize, 0.25);
        let sigma = solve_sigma(&o, m, tau).unwrap();
        let s = compute_s(&o, m, tau, sigma).unwrap();
        let a_star = o.alpha(m as f64 * tau + sigma * tau);
        let expect = tau.powf(a_star) * gamma(2.0 - a_star).unwrap();
        assert!((s - expect).abs() / expect < 1e-14);
    }

    #[test]
    fn s_small_alpha_limit() {
        let o = VariableOrder::new(OrderKind::Constant(1e-9), 1.0).unwrap();
        let sigma = solve_sigma(&o, 2, 0.1).unwrap();
        let s = compute_s(&o, 2, 0.1, sigma).unwrap();
        assert!((s - 1.0).abs() < 1e-7); // tau^0 * Gamma(2) = 1
    }

    #[test]
    fn constant_order_weights_match_independent_construction() {
        // Oracle: the a_s/b_s form of the constant-order weights, an
        // algebraically different route than the second-difference form.
        for alpha in [0.3, 0.5, 0.9] {
            let o = order(OrderKind::Constant(alpha));
            let tau = 0.02;
            for m in [1usize, 2, 7, 50] {
                let step = compute_weights(&o, m, tau, WeightVariant::TwoMinusAlpha).unwrap();
                let oracle = reference::alikhanov_constant_weights(alpha, step.sigma, m);
                for i in 0..=m {
                    assert!(
                        (step.c[i] - oracle[i]).abs() < 1e-12,
                        "alpha={alpha} m={m} i={i}: {} vs {}",
                        step.c[i],
                        oracle[i]
                    );
                }
            }
        }
    }

    #[test]
    fn two_alpha_variant_rejected_by_evidence() {
        let o = order(OrderKind::ExpDecay);
        let (variant, report) = select_weight_variant(&o, 0.01, 32).unwrap();
        assert_eq!(variant, WeightVariant::TwoMinusAlpha);
        assert!(report.contains("rejected"));
        // For mid-range orders the 2*alpha branch already breaks the
        // monotonicity relation at m = 1 (its c_1 goes negative).
        let mid = order(OrderKind::Constant(0.5));
        assert!(matches!(
            compute_weights(&mid, 1, 0.01, WeightVariant::TwoAlpha),
            Err(SolverError::DiagnosticFailure { .. })
        ));
        // And for every preset the evidence still selects the consistent
        // denominator.
        for kind in [OrderKind::Quadratic, OrderKind::Sine, OrderKind::Kink] {
            let o = order(kind);
            let (v, _) = select_weight_variant(&o, 0.01, 32).unwrap();
            assert_eq!(v, WeightVariant::TwoMinusAlpha, "{kind:?}");
        }
    }

    #[test]
    fn linear_exactness_all_presets() {
        for kind in [
            OrderKind::ExpDecay,
            OrderKind::Quadratic,
            OrderKind::Sine,
            OrderKind::Kink,
            OrderKind::Constant(0.42),
        ] {
            let o = order(kind);
            let tau = 1.0 / 200.0;
            // m = 0 form via s_0: tau / s_0 = t_{1/2}^(1-alpha) / Gamma(2-alpha).
            let s0 = FractionalStep::startup(&o, tau).unwrap();
            assert!(
                linear_exactness_defect(&s0, tau) < 1e-12,
                "{kind:?} startup"
            );
            for m in [1usize, 2, 3, 10, 50, 200] {
                let step = compute_weights(&o, m, tau, WeightVariant::TwoMinusAlpha).unwrap();
                let defect = linear_exactness_defect(&step, tau);
                assert!(defect < 1e-10, "{kind:?} m={m}: defect {defect:.3e}");
            }
        }
    }

    #[test]
    fn smooth_function_accuracy_cubic() {
        // Discrete operator applied to v(t) = t^3 vs the quadrature oracle at
        // t_{m+sigma}; the truncation bound is O(tau^(3-alpha*)), so the
        // measured rate under tau-halving must be at least 2.
        let o = order(OrderKind::ExpDecay);
        let t_end = 1.0;
        let mut errors = Vec::new();
        for mm in [16usize, 32, 64] {
            let tau = t_end / mm as f64;
            let m = mm - 1;
            let step = compute_weights(&o, m, tau, WeightVariant::TwoMinusAlpha).unwrap();
            let v: Vec<f64> = (0..=mm).map(|i| (i as f64 * tau).powi(3)).collect();
            let mut discrete = 0.0;
            for i in 0..=m {
                discrete += step.a[m - i] * (v[i + 1] - v[i]);
            }
            let exact = reference::caputo_first_order_power(3.0, step.alpha_star, step.t_star);
            errors.push((discrete - exact).abs());
        }
        let rate1 = (errors[0] / errors[1]).log2();
        let rate2 = (errors[1] / errors[2]).log2();
        assert!(rate1 >= 2.0 && rate2 >= 2.0, "rates {rate1:.3}, {rate2:.3}");
    }

    #[test]
    fn history_sum_trivial_cases() {
        let o = order(OrderKind::Sine);
        let step = compute_weights(&o, 1, 0.1, WeightVariant::TwoMinusAlpha).unwrap();
        // All history entries equal -> zero vector.
        let levels = vec![vec![2.0, -1.0], vec![2.0, -1.0]];
        let out = history_sum(&step, &levels).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        // m = 1: a_1 (v^1 - v^0).
        let levels = vec![vec![1.0, 0.0], vec![3.0, 2.0]];
        let out = history_sum(&step, &levels).unwrap();
        assert!((out[0] - step.a[1] * 2.0).abs() < 1e-15);
        assert!((out[1] - step.a[1] * 2.0).abs() < 1e-15);
        // Length mismatch rejected.
        assert!(history_sum(&step, &[vec![0.0]]).is_err());
    }

    #[test]
    fn history_sum_matches_naive_reference() {
        let o = order(OrderKind::ExpDecay);
        let m = 20;
        let tau = 0.01;
        let step = compute_weights(&o, m, tau, WeightVariant::TwoMinusAlpha).unwrap();
        // Deterministic pseudo-random history.
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let dofs = 37;
        let levels: Vec<Vec<f64>> = (0..=m)
            .map(|_| (0..dofs).map(|_| next()).collect())
            .collect();
        let fast = history_sum(&step, &levels).unwrap();
        let mut slow = vec![0.0; dofs];
        for i in 0..m {
            for j in 0..dofs {
                slow[j] += step.a[m - i] * (levels[i + 1][j] - levels[i][j]);
            }
        }
        for j in 0..dofs {
            assert!((fast[j] - slow[j]).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_order_weights_level_invariant() {
        let o = order(OrderKind::Constant(0.6));
        let tau = 0.01;
        let s8 = compute_weights(&o, 8, tau, WeightVariant::TwoMinusAlpha).unwrap();
        let s20 = compute_weights(&o, 20, tau, WeightVariant::TwoMinusAlpha).unwrap();
        assert_eq!(s8.sigma, s20.sigma);
        // Weights at equal lag agree for lags below the level.
        for i in 0..8 {
            assert!((s8.a[i] - s20.a[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn variation_vanishes_for_constant_order() {
        let o = order(OrderKind::Constant(0.7));
        let rep = weight_variation_report(&o, 0.01, 40, WeightVariant::TwoMinusAlpha).unwrap();
        assert!(rep.ratio_stat < 1e-11, "ratio {}", rep.ratio_stat);
        assert!(rep.cumulative_raw < 1e-13);
    }

    #[test]
    fn variation_bounded_under_refinement() {
        for kind in [OrderKind::ExpDecay, OrderKind::Sine, OrderKind::Kink] {
            let o = order(kind);
            let t_end = 1.0;
            let mut ratios = Vec::new();
            let mut cumul = Vec::new();
            for mm in [50usize, 100, 200] {
                let rep = weight_variation_report(
                    &o,
                    t_end / mm as f64,
                    mm,
                    WeightVariant::TwoMinusAlpha,
                )
                .unwrap();
                ratios.push(rep.ratio_stat);
                cumul.push(rep.cumulative_over_tau);
            }
            // Bounded (no blow-up) across tau-halving; allow mild wiggle.
            assert!(
                ratios[1] <= ratios[0] * 1.5 && ratios[2] <= ratios[0] * 1.5,
                "{kind:?} ratios {ratios:?}"
            );
            assert!(
                cumul[1] <= cumul[0] * 2.0 + 1e-12 && cumul[2] <= cumul[0] * 4.0 + 1e-12,
                "{kind:?} cumulative/tau {cumul:?}"
            );
        }
    }

    #[test]
    fn bounded_sums_do_not_grow_under_refinement() {
        let o = order(OrderKind::ExpDecay);
        let t_end = 1.0;
        let (d1, s1) =
            bounded_weight_sums(&o, t_end / 100.0, 99, WeightVariant::TwoMinusAlpha).unwrap();
        let (d2, s2) =
            bounded_weight_sums(&o, t_end / 200.0, 199, WeightVariant::TwoMinusAlpha).unwrap();
        assert!(d2 <= 2.0 * d1 + 1e-12, "difference sums {d1} -> {d2}");
        assert!(s2 <= 2.0 * s1 + 1e-12, "tail sums {s1} -> {s2}");
        assert!(d1 > 0.0 && s1 > 0.0);
    }
}
