//! Independent reference implementations used to validate the production
//! paths: a bisection root finder for sigma_m, the constant-order memory
//! weights in their a/b form, and an adaptive Gauss-Kronrod evaluation of the
//! Caputo integral for power functions.
//!
//! Nothing here is called by the solver itself; tests and the acceptance
//! suite compare against these routines.

use crate::kernel::{gamma, sigma_residual, VariableOrder};

/// Root of F(sigma) on (1/2, 1) by plain bisection.
pub fn bisection_sigma(order: &VariableOrder, m: usize, tau: f64) -> f64 {
    let (mut lo, mut hi) = (0.5f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sigma_residual(order, m, tau, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Constant-order L2-1sigma weights c_0..c_m assembled from the classical
/// a_s / b_s split:
///   a_0 = sigma^(1-alpha),  a_l = (l+sigma)^(1-alpha) - (l-1+sigma)^(1-alpha),
///   b_l = [(l+sigma)^(2-alpha) - (l-1+sigma)^(2-alpha)]/(2-alpha)
///         - [(l+sigma)^(1-alpha) + (l-1+sigma)^(1-alpha)]/2,
/// then c_0 = a_0 + b_1, c_s = a_s + b_{s+1} - b_s, c_m = a_m - b_m.
pub fn alikhanov_constant_weights(alpha: f64, sigma: f64, m: usize) -> Vec<f64> {
    let pw = |x: f64, e: f64| x.powf(e);
    let a = |l: usize| -> f64 {
        if l == 0 {
            pw(sigma, 1.0 - alpha)
        } else {
            pw(l as f64 + sigma, 1.0 - alpha) - pw(l as f64 - 1.0 + sigma, 1.0 - alpha)
        }
    };
    let b = |l: usize| -> f64 {
        let hi = l as f64 + sigma;
        let lo = l as f64 - 1.0 + sigma;
        (pw(hi, 2.0 - alpha) - pw(lo, 2.0 - alpha)) / (2.0 - alpha)
            - 0.5 * (pw(hi, 1.0 - alpha) + pw(lo, 1.0 - alpha))
    };
    if m == 0 {
        return vec![a(0)];
    }
    let mut c = vec![0.0; m + 1];
    c[0] = a(0) + b(1);
    for s in 1..m {
        c[s] = a(s) + b(s + 1) - b(s);
    }
    c[m] = a(m) - b(m);
    c
}

// ---------------------------------------------------------------------------
// Adaptive Gauss-Kronrod quadrature
// ---------------------------------------------------------------------------

// 15-point Kronrod extension of 7-point Gauss (positive abscissae).
const XGK: [f64; 8] = [
    0.991_455_371_120_813,
    0.949_107_912_342_759,
    0.864_864_423_359_769,
    0.741_531_185_599_394,
    0.586_087_235_467_691,
    0.405_845_151_377_397,
    0.207_784_955_007_898,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529,
    0.063_092_092_629_979,
    0.104_790_010_322_250,
    0.140_653_259_715_525,
    0.169_004_726_639_267,
    0.190_350_578_064_785,
    0.204_432_940_075_298,
    0.209_482_141_084_728,
];
const WG: [f64; 4] = [
    0.129_484_966_168_870,
    0.279_705_391_489_277,
    0.381_830_050_505_119,
    0.417_959_183_673_469,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    for (j, (&x, &wk)) in XGK.iter().zip(&WGK).enumerate() {
        let (flo, fhi) = (f(c - h * x), f(c + h * x));
        let pair = if x == 0.0 { flo } else { flo + fhi };
        kronrod += wk * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (h * kronrod, h * (kronrod - gauss).abs())
}

/// Adaptive bisection driven by the Gauss/Kronrod error estimate.
pub fn adaptive_quadrature<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
        let (val, err) = gk15(f, a, b);
        if err <= tol || depth >= 60 {
            return val;
        }
        let mid = 0.5 * (a + b);
        recurse(f, a, mid, 0.5 * tol, depth + 1) + recurse(f, mid, b, 0.5 * tol, depth + 1)
    }
    recurse(f, a, b, tol, 0)
}

/// I(a, nu, t) = int_0^t s^a (t - s)^(-nu) ds for a > -1, nu < 1.
///
/// Both endpoints are regularized with integer-power substitutions
/// (s = w^k near 0, t - s = w^j near t) so the adaptive rule sees a C^3
/// integrand; the splitting point is t/2.
pub fn power_kernel_integral(a: f64, nu: f64, t: f64, tol: f64) -> f64 {
    assert!(a > -1.0 && nu < 1.0, "integrand not integrable");
    if t == 0.0 {
        return 0.0;
    }
    let half = 0.5 * t;

    // Left part: s in [0, t/2]; substitute s = w^k so s^a ds = k w^(k(a+1)-1) dw.
    let k = ((4.0 / (a + 1.0)).ceil() as usize).clamp(1, 64) as f64;
    let left = adaptive_quadrature(
        &|w: f64| {
            let s = w.powf(k);
            k * w.powf(k * (a + 1.0) - 1.0) * (t - s).powf(-nu)
        },
        0.0,
        half.powf(1.0 / k),
        0.5 * tol,
    );

    // Right part: y = t - s in [0, t/2]; substitute y = w^j.
    let j = ((4.0 / (1.0 - nu)).ceil() as usize).clamp(1, 64) as f64;
    let right = adaptive_quadrature(
        &|w: f64| {
            let y = w.powf(j);
            j * w.powf(j * (1.0 - nu) - 1.0) * (t - y).powf(a)
        },
        0.0,
        half.powf(1.0 / j),
        0.5 * tol,
    );
    left + right
}

/// Caputo derivative of t^p with frozen order mu in (0, 1)
/// (first-derivative kernel), evaluated by quadrature.
pub fn caputo_first_order_power(p: f64, mu: f64, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    p * power_kernel_integral(p - 1.0, mu, t, 1e-12 * t.powf(p - mu).max(1e-4))
        / gamma(1.0 - mu).unwrap()
}

/// Caputo derivative of t^p with frozen order beta in (1, 2)
/// (second-derivative kernel), evaluated by quadrature.
pub fn caputo_wave_order_power(p: f64, beta: f64, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    p * (p - 1.0)
        * power_kernel_integral(p - 2.0, beta - 1.0, t, 1e-12 * t.powf(p - beta).max(1e-4))
        / gamma(2.0 - beta).unwrap()
}


// ---------------------------------------------------------------------------
// Dense-assembly reference solver (1D)
// ---------------------------------------------------------------------------

use crate::kernel::{compute_weights, FractionalStep, WeightVariant};
use crate::quadrature::{eval_modes, gauss_rule};
use crate::solution::{source_term, SolutionBundle};
use crate::space::FluxParams;
use nalgebra::{DMatrix, DVector};

/// Brute-force reference: global dense matrices assembled by direct
/// quadrature loops over elements and endpoint traces, dense LU solves per
/// step, naive history accumulation from stored velocity levels. Intended
/// for tiny periodic interval meshes only.
pub struct DenseReference1d {
    pub n: usize,
    pub q_u: usize,
    pub q_v: usize,
    h: f64,
    x0: f64,
    nu: usize,
    nv: usize,
    stiff_u: DMatrix<f64>,
    eq1_v: DMatrix<f64>,
    eq1_u: DMatrix<f64>,
    eq2_u: DMatrix<f64>,
    eq2_v: DMatrix<f64>,
    quad_nodes: Vec<f64>,
    quad_weights: Vec<f64>,
}

impl DenseReference1d {
    pub fn new(n: usize, bounds: [f64; 2], q_u: usize, q_v: usize, flux: FluxParams) -> Self {
        let h = (bounds[1] - bounds[0]) / n as f64;
        let (du, dv) = (q_u + 1, q_v + 1);
        let (nu, nv) = (n * du, n * dv);
        let rule = gauss_rule(q_u.max(q_v) + 6).unwrap();

        // Physical basis on one element: value sqrt(2/h) phi(r), derivative
        // gains 2/h.
        let nrm = (2.0 / h).sqrt();
        let mut stiff_u = DMatrix::zeros(nu, nu);
        let mut eq1_v = DMatrix::zeros(nu, nv);
        let mut eq2_u = DMatrix::zeros(nv, nu);
        for e in 0..n {
            for (p, &r) in rule.nodes.iter().enumerate() {
                let w = rule.weights[p] * 0.5 * h;
                let mu = eval_modes(q_u, r);
                let mv = eval_modes(q_v, r);
                for i in 0..du {
                    let di = nrm * (2.0 / h) * mu[i].1;
                    for j in 0..du {
                        let dj = nrm * (2.0 / h) * mu[j].1;
                        stiff_u[(e * du + i, e * du + j)] += w * di * dj;
                    }
                    for j in 0..dv {
                        let dj = nrm * (2.0 / h) * mv[j].1;
                        eq1_v[(e * du + i, e * dv + j)] += w * di * dj;
                    }
                }
                for i in 0..dv {
                    let di = nrm * (2.0 / h) * mv[i].1;
                    for j in 0..du {
                        let dj = nrm * (2.0 / h) * mu[j].1;
                        eq2_u[(e * dv + i, e * du + j)] += w * di * dj;
                    }
                }
            }
        }

        // Face terms: traces at the endpoints; minus side is the element to
        // the left of the face.
        let mut eq1_u = DMatrix::zeros(nu, nu);
        let mut eq2_v = DMatrix::zeros(nv, nv);
        let upl = eval_modes(q_u, 1.0);
        let upr = eval_modes(q_u, -1.0);
        let vpl = eval_modes(q_v, 1.0);
        let vpr = eval_modes(q_v, -1.0);
        let udx =
            |side: usize, j: usize| nrm * (2.0 / h) * if side == 0 { upl[j].1 } else { upr[j].1 };
        let vval = |side: usize, j: usize| nrm * if side == 0 { vpl[j].0 } else { vpr[j].0 };
        for f in 0..n {
            let el = f;
            let er = (f + 1) % n;
            let elem = [el, er];
            let sign = [1.0, -1.0]; // outward normal per side
            for a in 0..2 {
                // eq1: grad(phi).n (v* - v|a); v* = th v+ + (1-th) v- - zeta [du]
                for i in 0..du {
                    let ti = sign[a] * udx(a, i);
                    for b in 0..2 {
                        let cv = match (a, b) {
                            (0, 1) => flux.theta,
                            (0, 0) => -flux.theta,
                            (1, 0) => 1.0 - flux.theta,
                            _ => -(1.0 - flux.theta),
                        };
                        for j in 0..dv {
                            eq1_v[(elem[a] * du + i, elem[b] * dv + j)] += ti * cv * vval(b, j);
                        }
                        let cz = if b == 0 { -flux.zeta } else { flux.zeta };
                        for j in 0..du {
                            eq1_u[(elem[a] * du + i, elem[b] * du + j)] += ti * cz * udx(b, j);
                        }
                    }
                }
                // eq2: -psi (grad u)*.n with (grad u)* = (1-th)du+ + th du- - gamma [v]
                for i in 0..dv {
                    let ti = sign[a] * vval(a, i);
                    for b in 0..2 {
                        let cu = if b == 0 { flux.theta } else { 1.0 - flux.theta };
                        for j in 0..du {
                            eq2_u[(elem[a] * dv + i, elem[b] * du + j)] -= ti * cu * udx(b, j);
                        }
                        let cg = if b == 0 { -flux.gamma } else { flux.gamma };
                        for j in 0..dv {
                            eq2_v[(elem[a] * dv + i, elem[b] * dv + j)] -= ti * cg * vval(b, j);
                        }
                    }
                }
            }
        }

        Self {
            n,
            q_u,
            q_v,
            h,
            x0: bounds[0],
            nu,
            nv,
            stiff_u,
            eq1_v,
            eq1_u,
            eq2_u,
            eq2_v,
            quad_nodes: rule.nodes,
            quad_weights: rule.weights,
        }
    }

    fn source_vector(
        &self,
        bundle: &SolutionBundle,
        order: &crate::kernel::VariableOrder,
        t: f64,
    ) -> DVector<f64> {
        let dv = self.q_v + 1;
        let nrm = (2.0 / self.h).sqrt();
        let mut out = DVector::zeros(self.nv);
        for e in 0..self.n {
            for (p, &r) in self.quad_nodes.iter().enumerate() {
                let w = self.quad_weights[p] * 0.5 * self.h;
                let x = self.x0 + (e as f64 + 0.5 * (r + 1.0)) * self.h;
                let fv = source_term(bundle, order, [x, 0.0], t).unwrap();
                let mv = eval_modes(self.q_v, r);
                for j in 0..dv {
                    out[e * dv + j] += w * nrm * mv[j].0 * fv;
                }
            }
        }
        out
    }

    fn step_matrix(&self, ct: f64, sc: f64, mem: f64) -> DMatrix<f64> {
        let du = self.q_u + 1;
        let ntot = self.nu + self.nv;
        let mut m = DMatrix::zeros(ntot, ntot);
        for i in 0..self.nu {
            for j in 0..self.nu {
                m[(i, j)] = ct * self.stiff_u[(i, j)] - sc * self.eq1_u[(i, j)];
            }
            for j in 0..self.nv {
                m[(i, self.nu + j)] = -sc * self.eq1_v[(i, j)];
            }
        }
        for i in 0..self.nv {
            for j in 0..self.nu {
                m[(self.nu + i, j)] = sc * self.eq2_u[(i, j)];
            }
            for j in 0..self.nv {
                m[(self.nu + i, self.nu + j)] =
                    sc * self.eq2_v[(i, j)] + if i == j { ct + mem } else { 0.0 };
            }
        }
        // mean-value constraint rows on the constant u modes
        let dv = self.q_v + 1;
        for e in 0..self.n {
            let row = e * du;
            for j in 0..ntot {
                m[(row, j)] = 0.0;
            }
            m[(row, e * du)] = ct;
            m[(row, self.nu + e * dv)] = -sc;
        }
        m
    }

    /// Constant-order reference run from zero initial data (the manufactured
    /// bundles used by the equivalence check start at rest). Returns the
    /// final (u, v) coefficient vectors.
    pub fn run(
        &self,
        order: &crate::kernel::VariableOrder,
        bundle: &SolutionBundle,
        m_steps: usize,
        t_final: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let tau = t_final / m_steps as f64;
        let du = self.q_u + 1;
        let dv = self.q_v + 1;
        let mut u = DVector::<f64>::zeros(self.nu);
        let mut u_prev = DVector::<f64>::zeros(self.nu);
        let mut v_levels: Vec<DVector<f64>> = vec![DVector::zeros(self.nv)];

        // startup
        let step0 = FractionalStep::startup(order, tau).unwrap();
        let (ct, sc, mem) = (1.0 / tau, 0.5, 1.0 / step0.s);
        let mat = self.step_matrix(ct, sc, mem);
        let v0 = v_levels[0].clone();
        let mut rhs = DVector::zeros(self.nu + self.nv);
        let ru = ct * (&self.stiff_u * &u) + sc * (&self.eq1_v * &v0) + sc * (&self.eq1_u * &u);
        let rv = (ct + mem) * &v0 - sc * (&self.eq2_u * &u) - sc * (&self.eq2_v * &v0)
            + self.source_vector(bundle, order, 0.5 * tau);
        for i in 0..self.nu {
            rhs[i] = ru[i];
        }
        for e in 0..self.n {
            rhs[e * du] = ct * u[e * du] + sc * v0[e * dv];
        }
        for i in 0..self.nv {
            rhs[self.nu + i] = rv[i];
        }
        let sol = mat.lu().solve(&rhs).expect("reference startup solve");
        u_prev.copy_from(&u);
        u = sol.rows(0, self.nu).into_owned();
        v_levels.push(sol.rows(self.nu, self.nv).into_owned());

        for m in 1..m_steps {
            let step = compute_weights(order, m, tau, WeightVariant::TwoMinusAlpha).unwrap();
            let sigma = step.sigma;
            let (ct, sc, mem) = ((2.0 * sigma + 1.0) / (2.0 * tau), sigma, step.a[0]);
            let mat = self.step_matrix(ct, sc, mem);
            let v_m = v_levels[m].clone();
            let v_mm = v_levels[m - 1].clone();
            // naive double-loop history from stored levels
            let mut hist = DVector::<f64>::zeros(self.nv);
            for i in 0..m {
                let w = step.a[m - i];
                for k in 0..self.nv {
                    hist[k] += w * (v_levels[i + 1][k] - v_levels[i][k]);
                }
            }
            let comb =
                (4.0 * sigma / (2.0 * tau)) * &u - ((2.0 * sigma - 1.0) / (2.0 * tau)) * &u_prev;
            let ru = &self.stiff_u * comb
                + (1.0 - sigma) * (&self.eq1_v * &v_m)
                + (1.0 - sigma) * (&self.eq1_u * &u);
            let rv = (4.0 * sigma / (2.0 * tau)) * &v_m
                - ((2.0 * sigma - 1.0) / (2.0 * tau)) * &v_mm
                + step.a[0] * &v_m
                - hist
                - (1.0 - sigma) * (&self.eq2_u * &u)
                - (1.0 - sigma) * (&self.eq2_v * &v_m)
                + self.source_vector(bundle, order, step.t_star);
            let mut rhs = DVector::zeros(self.nu + self.nv);
            for i in 0..self.nu {
                rhs[i] = ru[i];
            }
            for e in 0..self.n {
                rhs[e * du] = (4.0 * sigma * u[e * du] - (2.0 * sigma - 1.0) * u_prev[e * du])
                    / (2.0 * tau)
                    + (1.0 - sigma) * v_m[e * dv];
            }
            for i in 0..self.nv {
                rhs[self.nu + i] = rv[i];
            }
            let sol = mat.lu().solve(&rhs).expect("reference step solve");
            u_prev.copy_from(&u);
            u = sol.rows(0, self.nu).into_owned();
            v_levels.push(sol.rows(self.nu, self.nv).into_owned());
        }
        (
            u.as_slice().to_vec(),
            v_levels.last().unwrap().as_slice().to_vec(),
        )
    }
}
