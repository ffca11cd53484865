//! Gauss-Legendre quadrature and the orthonormal Legendre modal basis on the
//! reference element [-1, 1].
//!
//! All spatial operators, projections and error norms are built from these
//! tables. Tables are immutable after construction and safe to share across
//! threads.

use crate::error::{Result, SolverError};

/// Nodes and weights of an n-point Gauss-Legendre rule on [-1, 1].
///
/// Weights are strictly positive and sum to 2; an n-point rule integrates
/// polynomials of degree <= 2n-1 exactly.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Evaluate the Legendre polynomial P_n and its derivative at `x` by the
/// three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    let mut dp_prev = 0.0;
    let mut dp = 1.0;
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        let dp_next = ((2.0 * kf + 1.0) * (p + x * dp) - kf * dp_prev) / (kf + 1.0);
        p_prev = p;
        p = p_next;
        dp_prev = dp;
        dp = dp_next;
    }
    (p, dp)
}

/// n-point Gauss-Legendre rule, nodes strictly increasing in (-1, 1).
///
/// Nodes are found by Newton iteration on P_n with the classical asymptotic
/// initial guesses; accurate for n up to ~50.
pub fn gauss_rule(n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(SolverError::InvalidArgument(
            "gauss_rule requires n >= 1".into(),
        ));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Tricomi-style initial guess, then Newton to 1e-15.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 {
                let (p2, d2) = legendre_with_derivative(n, x);
                dp = d2;
                x -= p2 / d2;
                break;
            }
        }
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    // Enforce exact symmetry of the rule.
    for i in 0..n / 2 {
        let a = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -a;
        nodes[n - 1 - i] = a;
        let w = 0.5 * (weights[i] + weights[n - 1 - i]);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Orthonormal (scaled) Legendre modal basis of degree `q` on [-1, 1],
/// tabulated at the nodes of a quadrature rule.
///
/// The j-th function is sqrt((2j+1)/2) P_j, so the reference mass matrix is
/// the identity and the first function is the constant mode.
#[derive(Debug, Clone)]
pub struct BasisSpec {
    pub degree: usize,
    /// values[node][mode]
    pub values: Vec<Vec<f64>>,
    /// reference derivatives d/dr, same layout
    pub derivs: Vec<Vec<f64>>,
    /// traces at r = -1 and r = +1
    pub left_values: Vec<f64>,
    pub right_values: Vec<f64>,
    pub left_derivs: Vec<f64>,
    pub right_derivs: Vec<f64>,
}

/// Values and reference derivatives of all modes 0..=q at a point.
pub fn eval_modes(q: usize, r: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(q + 1);
    let mut p_prev = 1.0;
    let mut p = r;
    let mut dp_prev = 0.0;
    let mut dp = 1.0;
    for j in 0..=q {
        let scale = ((2 * j + 1) as f64 / 2.0).sqrt();
        let (pj, dpj) = match j {
            0 => (1.0, 0.0),
            1 => (r, 1.0),
            _ => (p, dp),
        };
        out.push((scale * pj, scale * dpj));
        if j >= 1 {
            let k = j as f64;
            let p_next = ((2.0 * k + 1.0) * r * p - k * p_prev) / (k + 1.0);
            let dp_next = ((2.0 * k + 1.0) * (p + r * dp) - k * dp_prev) / (k + 1.0);
            p_prev = p;
            p = p_next;
            dp_prev = dp;
            dp = dp_next;
        }
    }
    out
}

impl BasisSpec {
    pub fn new(degree: usize, rule: &QuadratureRule) -> Self {
        let dim = degree + 1;
        let mut values = Vec::with_capacity(rule.len());
        let mut derivs = Vec::with_capacity(rule.len());
        for &r in &rule.nodes {
            let modes = eval_modes(degree, r);
            values.push(modes.iter().map(|m| m.0).collect());
            derivs.push(modes.iter().map(|m| m.1).collect());
        }
        let left = eval_modes(degree, -1.0);
        let right = eval_modes(degree, 1.0);
        Self {
            degree,
            values,
            derivs,
            left_values: left.iter().map(|m| m.0).collect::<Vec<_>>(),
            right_values: right.iter().map(|m| m.0).collect::<Vec<_>>(),
            left_derivs: left.iter().map(|m| m.1).collect::<Vec<_>>(),
            right_derivs: right.iter().map(|m| m.1).collect::<Vec<_>>(),
        }
        .validate(dim)
    }

    fn validate(self, dim: usize) -> Self {
        debug_assert_eq!(self.left_values.len(), dim);
        self
    }

    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    /// Values and reference gradients of all basis functions at a point in
    /// [-1, 1]; the first entry is the constant mode.
    pub fn eval_at(&self, r: f64) -> Vec<(f64, f64)> {
        eval_modes(self.degree, r)
    }
}

/// Tensor-product rule on [-1,1]^2; weights sum to 4.
#[derive(Debug, Clone)]
pub struct TensorRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

pub fn tensor_rule(rule: &QuadratureRule) -> TensorRule {
    let n = rule.len();
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    // Row-major: y (second coordinate) outer, x inner.
    for j in 0..n {
        for i in 0..n {
            points.push([rule.nodes[i], rule.nodes[j]]);
            weights.push(rule.weights[i] * rule.weights[j]);
        }
    }
    TensorRule { points, weights }
}

/// 2D tensor-product mode value: product of the 1D mode values.
/// Mode layout is row-major: index = jy * (q+1) + jx.
pub fn tensor_mode_value(q: usize, jx: usize, jy: usize, r: [f64; 2]) -> f64 {
    let mx = eval_modes(q, r[0]);
    let my = eval_modes(q, r[1]);
    mx[jx].0 * my[jy].0
}
