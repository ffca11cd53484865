//! The fully discrete scheme: the startup step, the general sigma-weighted
//! two-level step with the memory term, per-step linear solves, history
//! management and energy diagnostics.
//!
//! Per step the implicit system in the unknowns (u^{m+1}, v^{m+1}) is
//!   u rows:   ct * S_u U - sc * eq1(V, U)          = known levels
//!   mean row: ct * U_0  - sc * V_0                 = known levels
//!   v rows:   (ct + mem) * V + sc * eq2(U, V)      = known levels + memory + f
//! with (ct, sc, mem) = (1/tau, 1/2, 1/s_0) at startup and
//! ((2 sigma + 1)/(2 tau), sigma, a_0^(m)) afterwards. 1D systems are solved
//! by a periodic block-tridiagonal factorization rebuilt whenever the
//! multipliers change (cached for constant order); 2D uses matrix-free GMRES
//! with element-block Jacobi preconditioning.

use crate::error::{Result, SolverError};
use crate::kernel::{
    self, check_step_size, compute_weights, history_sum_deltas, select_weight_variant,
    FractionalStep, VariableOrder, WeightVariant,
};
use crate::linalg::{gmres, BlockTriFactor, BlockTriPeriodic};
use crate::solution::SolutionBundle;
use crate::space::{DgSpace, FieldRole, FieldVector};
use std::time::Instant;

/// Coefficient state at one time level plus everything the next step needs.
pub struct State {
    pub level: usize,
    pub t: f64,
    pub u: FieldVector,
    pub u_prev: FieldVector,
    pub v: FieldVector,
    pub v_prev: FieldVector,
    /// Velocity differences v^{i+1} - v^i for i = 0..level-1.
    pub history: Vec<Vec<f64>>,
    /// ||v^i||^2 for i = 0..level (feeds the energy tail sum).
    pub v_norms_sq: Vec<f64>,
    v_initial: Vec<f64>,
}

impl State {
    pub fn initial(space: &DgSpace, u0: FieldVector, v0: FieldVector) -> Self {
        let v_norm = space.l2_norm_sq(&v0);
        let v_initial = v0.data.clone();
        Self {
            level: 0,
            t: 0.0,
            u_prev: u0.clone(),
            u: u0,
            v_prev: v0.clone(),
            v: v0,
            history: Vec::new(),
            v_norms_sq: vec![v_norm],
            v_initial,
        }
    }

    /// Bookkeeping check: v^0 + sum of stored differences reproduces v^m.
    pub fn history_consistency_error(&self) -> f64 {
        let mut acc = self.v_initial.clone();
        for d in &self.history {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        acc.iter()
            .zip(&self.v.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Solver and diagnostic settings for a run.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub solver_tol: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
    /// Forced weight variant; `None` selects by executable evidence.
    pub weight_variant: Option<WeightVariant>,
    /// Abort on coercivity violations (they indicate an assembly bug).
    pub check_diagnostics: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            solver_tol: 1e-12,
            gmres_restart: 60,
            gmres_max_iter: 6000,
            weight_variant: None,
            check_diagnostics: true,
        }
    }
}

/// Per-level diagnostics and errors recorded during a run.
#[derive(Debug, Clone)]
pub struct LevelRow {
    pub m: usize,
    pub t: f64,
    /// sigma of the step that produced this level (sigma_0 for m = 1).
    pub sigma: f64,
    pub err_u: f64,
    pub err_v: f64,
    pub grad_u_norm: f64,
    pub v_norm: f64,
    pub energy_q: f64,
    pub bdiff_v_norm: f64,
    pub a_v: f64,
    pub a_grad_u: f64,
}

/// Both sides of the startup energy inequality (f = 0 form plus the forcing
/// term), recorded for every run.
#[derive(Debug, Clone, Copy)]
pub struct StartupEnergyCheck {
    pub lhs: f64,
    pub rhs: f64,
}

/// Result of a complete run.
pub struct RunResult {
    pub rows: Vec<LevelRow>,
    pub err_u_final: f64,
    pub err_v_final: f64,
    pub err_u_max: f64,
    pub err_v_max: f64,
    pub startup_energy: StartupEnergyCheck,
    pub max_energy: f64,
    pub initial_energy: f64,
    pub variant: WeightVariant,
    pub variant_report: String,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub max_sigma_residual: f64,
    pub solver_iterations: usize,
    pub wall_seconds: f64,
    pub state: State,
}

enum StepSolver {
    Direct {
        factor: BlockTriFactor,
    },
    Gmres {
        diag_lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
}

/// Drives the scheme for one (space, order, bundle) combination.
pub struct Stepper<'a> {
    pub space: &'a DgSpace,
    pub order: &'a VariableOrder,
    pub tau: f64,
    pub variant: WeightVariant,
    opts: SolveOptions,
    bundle: &'a SolutionBundle,
    /// Cached moments of the spatial profile and its Laplacian; the source is
    /// f(x, t) = a(t) Phi(x) + b(t) LapPhi(x) for separable bundles.
    phi_moment: Vec<f64>,
    lap_phi_moment: Vec<f64>,
    solver: Option<(f64, f64, f64, StepSolver)>,
    pub solver_iterations: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(
        space: &'a DgSpace,
        order: &'a VariableOrder,
        bundle: &'a SolutionBundle,
        tau: f64,
        m_steps: usize,
        opts: SolveOptions,
    ) -> Result<(Self, String)> {
        check_step_size(order, tau)?;
        // Probe levels must stay inside the run horizon: the order function
        // is only guaranteed to map into (0, 1) on [0, T].
        let probe = m_steps.saturating_sub(1).clamp(1, 16);
        let (variant, report) = match opts.weight_variant {
            Some(v) => (v, format!("last-weight variant forced: {}", v.label())),
            None if m_steps == 1 => (
                WeightVariant::TwoMinusAlpha,
                "single-step run: memory weights unused".to_string(),
            ),
            None => select_weight_variant(order, tau, probe)?,
        };
        let phi_moment = space.moment_v(&|x| bundle.spatial.value(x));
        let lap_phi_moment = space.moment_v(&|x| bundle.spatial.laplacian(x));
        Ok((
            Self {
                space,
                order,
                tau,
                variant,
                opts,
                bundle,
                phi_moment,
                lap_phi_moment,
                solver: None,
                solver_iterations: 0,
            },
            report,
        ))
    }

    /// Source moments at time t: the separable forcing (u_tt + fractional
    /// term - Laplacian) contracts to two cached moment vectors.
    fn source_moments(&self, t: f64) -> Result<Vec<f64>> {
        if self.bundle.temporal.is_empty() {
            return Ok(vec![0.0; self.space.dofs_v()]);
        }
        let a = self.bundle.g_second(t) + self.bundle.fractional_term(self.order, t)?;
        let b = -self.bundle.g(t);
        Ok(self
            .phi_moment
            .iter()
            .zip(&self.lap_phi_moment)
            .map(|(p, l)| a * p + b * l)
            .collect())
    }

    fn solver_for(&mut self, ct: f64, sc: f64, mem: f64) -> Result<&StepSolver> {
        let key_matches = matches!(&self.solver, Some((a, b, c, _))
            if *a == ct && *b == sc && *c == mem);
        if !key_matches {
            let solver = if self.space.mesh.dimension == 1 {
                let n = self.space.mesh.num_elements();
                let diag = self.space.step_diag_block(ct, sc, mem);
                let lower = self.space.step_neighbor_block(0, 1, 0, sc);
                let upper = self.space.step_neighbor_block(0, 0, 1, sc);
                let sys = BlockTriPeriodic {
                    n,
                    block: self.space.dim_u() + self.space.dim_v(),
                    lower: vec![lower; n],
                    diag: vec![diag; n],
                    upper: vec![upper; n],
                };
                StepSolver::Direct {
                    factor: sys.factor()?,
                }
            } else {
                let diag = self.space.step_diag_block(ct, sc, mem);
                StepSolver::Gmres { diag_lu: diag.lu() }
            };
            self.solver = Some((ct, sc, mem, solver));
        }
        Ok(&self.solver.as_ref().unwrap().3)
    }

    /// Solve the packed step system for (U, V).
    fn solve_step(
        &mut self,
        ct: f64,
        sc: f64,
        mem: f64,
        rhs_u: &[f64],
        rhs_v: &[f64],
    ) -> Result<(FieldVector, FieldVector)> {
        let space = self.space;
        let (du, dv) = (space.dim_u(), space.dim_v());
        let ne = space.mesh.num_elements();
        let tol = self.opts.solver_tol;
        let restart = self.opts.gmres_restart;
        let max_iter = self.opts.gmres_max_iter;
        let solver = self.solver_for(ct, sc, mem)?;
        match solver {
            StepSolver::Direct { factor } => {
                // Pack element-major [u_e | v_e].
                let s = du + dv;
                let mut rhs = vec![0.0; ne * s];
                for e in 0..ne {
                    rhs[e * s..e * s + du].copy_from_slice(&rhs_u[e * du..(e + 1) * du]);
                    rhs[e * s + du..(e + 1) * s].copy_from_slice(&rhs_v[e * dv..(e + 1) * dv]);
                }
                let x = factor.solve(&rhs)?;
                let mut u = vec![0.0; ne * du];
                let mut v = vec![0.0; ne * dv];
                for e in 0..ne {
                    u[e * du..(e + 1) * du].copy_from_slice(&x[e * s..e * s + du]);
                    v[e * dv..(e + 1) * dv].copy_from_slice(&x[e * s + du..(e + 1) * s]);
                }
                Ok((
                    FieldVector {
                        role: FieldRole::Displacement,
                        data: u,
                    },
                    FieldVector {
                        role: FieldRole::Velocity,
                        data: v,
                    },
                ))
            }
            StepSolver::Gmres { diag_lu } => {
                let nu = ne * du;
                let mut b = Vec::with_capacity(nu + ne * dv);
                b.extend_from_slice(rhs_u);
                b.extend_from_slice(rhs_v);
                let apply = |x: &[f64], out: &mut [f64]| {
                    let u = FieldVector {
                        role: FieldRole::Displacement,
                        data: x[..nu].to_vec(),
                    };
                    let v = FieldVector {
                        role: FieldRole::Velocity,
                        data: x[nu..].to_vec(),
                    };
                    let (ou, ov) = space.apply_step_system(ct, sc, mem, &u, &v).unwrap();
                    out[..nu].copy_from_slice(&ou.data);
                    out[nu..].copy_from_slice(&ov.data);
                };
                let s = du + dv;
                let precond = |r: &[f64], out: &mut [f64]| {
                    let mut local = nalgebra::DVector::zeros(s);
                    for e in 0..ne {
                        for i in 0..du {
                            local[i] = r[e * du + i];
                        }
                        for i in 0..dv {
                            local[du + i] = r[nu + e * dv + i];
                        }
                        let sol = diag_lu.solve(&local).expect("preconditioner block");
                        for i in 0..du {
                            out[e * du + i] = sol[i];
                        }
                        for i in 0..dv {
                            out[nu + e * dv + i] = sol[du + i];
                        }
                    }
                };
                let (x, stats) = gmres(apply, precond, &b, None, tol, restart, max_iter)?;
                self.solver_iterations += stats.iterations;
                Ok((
                    FieldVector {
                        role: FieldRole::Displacement,
                        data: x[..nu].to_vec(),
                    },
                    FieldVector {
                        role: FieldRole::Velocity,
                        data: x[nu..].to_vec(),
                    },
                ))
            }
        }
    }

    /// Startup step (m = 0): Crank-Nicolson-type averages with the memory
    /// coefficient 1/s_0 and the source sampled at t_{1/2}.
    pub fn startup_step(&mut self, state: State, step0: &FractionalStep) -> Result<State> {
        assert_eq!(state.level, 0, "startup_step requires level 0");
        let space = self.space;
        let tau = self.tau;
        let ct = 1.0 / tau;
        let sc = 0.5;
        let mem = 1.0 / step0.s;

        let eq1_known = space.apply_eq1_spatial(&state.v, &state.u)?;
        let stiff_u0 = space.apply_stiffness_u(&state.u)?;
        let mut rhs_u: Vec<f64> = stiff_u0
            .data
            .iter()
            .zip(&eq1_known.data)
            .map(|(s0, e1)| ct * s0 + sc * e1)
            .collect();
        let (du, dv) = (space.dim_u(), space.dim_v());
        for e in 0..space.mesh.num_elements() {
            rhs_u[e * du] = ct * state.u.data[e * du] + sc * state.v.data[e * dv];
        }
        let eq2_known = space.apply_eq2_spatial(&state.u, &state.v)?;
        let f_mom = self.source_moments(0.5 * tau)?;
        let rhs_v: Vec<f64> = state
            .v
            .data
            .iter()
            .zip(&eq2_known.data)
            .zip(&f_mom)
            .map(|((v0, e2), f)| (ct + mem) * v0 - sc * e2 + f)
            .collect();

        let (u1, v1) = self.solve_step(ct, sc, mem, &rhs_u, &rhs_v)?;
        let delta: Vec<f64> = v1
            .data
            .iter()
            .zip(&state.v.data)
            .map(|(a, b)| a - b)
            .collect();
        let mut norms = state.v_norms_sq;
        norms.push(space.l2_norm_sq(&v1));
        Ok(State {
            level: 1,
            t: tau,
            u_prev: state.u,
            u: u1,
            v_prev: state.v,
            v: v1,
            history: vec![delta],
            v_norms_sq: norms,
            v_initial: state.v_initial,
        })
    }

    /// General step m >= 1 with the three-level sigma-weighted stencil and
    /// the full memory term.
    pub fn general_step(&mut self, state: State, step: &FractionalStep) -> Result<State> {
        let m = state.level;
        assert!(m >= 1, "general_step requires level >= 1");
        if step.level != m {
            return Err(SolverError::InvalidArgument(format!(
                "weights at level {} do not match state level {m}",
                step.level
            )));
        }
        let space = self.space;
        let tau = self.tau;
        let sigma = step.sigma;
        let ct = (2.0 * sigma + 1.0) / (2.0 * tau);
        let sc = sigma;
        let a0 = step.a[0];

        // u rows: ct S_u U - sc eq1(V, U) =
        //   S_u (4 sigma u^m - (2 sigma - 1) u^{m-1}) / (2 tau)
        //   + (1 - sigma) eq1(v^m, u^m)
        let comb_u = FieldVector {
            role: FieldRole::Displacement,
            data: state
                .u
                .data
                .iter()
                .zip(&state.u_prev.data)
                .map(|(um, umm)| (4.0 * sigma * um - (2.0 * sigma - 1.0) * umm) / (2.0 * tau))
                .collect(),
        };
        let stiff_comb = space.apply_stiffness_u(&comb_u)?;
        let eq1_known = space.apply_eq1_spatial(&state.v, &state.u)?;
        let mut rhs_u: Vec<f64> = stiff_comb
            .data
            .iter()
            .zip(&eq1_known.data)
            .map(|(s, e1)| s + (1.0 - sigma) * e1)
            .collect();
        let (du, dv) = (space.dim_u(), space.dim_v());
        for e in 0..space.mesh.num_elements() {
            rhs_u[e * du] = (4.0 * sigma * state.u.data[e * du]
                - (2.0 * sigma - 1.0) * state.u_prev.data[e * du])
                / (2.0 * tau)
                + (1.0 - sigma) * state.v.data[e * dv];
        }

        // v rows: (ct + a_0) V + sc eq2(U, V) =
        //   (4 sigma v^m - (2 sigma - 1) v^{m-1}) / (2 tau) + a_0 v^m
        //   - history - (1 - sigma) eq2(u^m, v^m) + f(t_{m+sigma})
        let eq2_known = space.apply_eq2_spatial(&state.u, &state.v)?;
        let hist = history_sum_deltas(step, &state.history);
        let f_mom = self.source_moments(step.t_star)?;
        let rhs_v: Vec<f64> = (0..space.dofs_v())
            .map(|i| {
                (4.0 * sigma * state.v.data[i] - (2.0 * sigma - 1.0) * state.v_prev.data[i])
                    / (2.0 * tau)
                    + a0 * state.v.data[i]
                    - hist[i]
                    - (1.0 - sigma) * eq2_known.data[i]
                    + f_mom[i]
            })
            .collect();

        let (u_new, v_new) = self.solve_step(ct, sc, a0, &rhs_u, &rhs_v)?;
        let delta: Vec<f64> = v_new
            .data
            .iter()
            .zip(&state.v.data)
            .map(|(a, b)| a - b)
            .collect();
        let mut history = state.history;
        history.push(delta);
        let mut norms = state.v_norms_sq;
        norms.push(space.l2_norm_sq(&v_new));
        Ok(State {
            level: m + 1,
            t: (m + 1) as f64 * tau,
            u_prev: state.u,
            u: u_new,
            v_prev: state.v,
            v: v_new,
            history,
            v_norms_sq: norms,
            v_initial: state.v_initial,
        })
    }
}

/// The auxiliary energy functional
/// A(w^m) = (2s+1)||w^m||^2 - (2s-1)||w^{m-1}||^2 + (2s^2+s-1)||w^m - w^{m-1}||^2
/// evaluated from precomputed norms; coercive: A >= ||w^m||^2 / s.
pub fn energy_a(sigma_prev: f64, norm_sq: f64, prev_norm_sq: f64, diff_norm_sq: f64) -> f64 {
    (2.0 * sigma_prev + 1.0) * norm_sq - (2.0 * sigma_prev - 1.0) * prev_norm_sq
        + (2.0 * sigma_prev * sigma_prev + sigma_prev - 1.0) * diff_norm_sq
}

/// Per-level energy diagnostics (A for v and grad u, and the tail energy Q).
pub fn energy_diagnostics(
    space: &DgSpace,
    state: &State,
    sigma_prev: f64,
    weights: Option<&FractionalStep>,
    tau: f64,
) -> (f64, f64, f64) {
    let v_sq = space.l2_norm_sq(&state.v);
    let v_prev_sq = space.l2_norm_sq(&state.v_prev);
    let dv = FieldVector {
        role: FieldRole::Velocity,
        data: state
            .v
            .data
            .iter()
            .zip(&state.v_prev.data)
            .map(|(a, b)| a - b)
            .collect(),
    };
    let dv_sq = space.l2_norm_sq(&dv);
    let a_v = energy_a(sigma_prev, v_sq, v_prev_sq, dv_sq);

    let gu_sq = space.grad_norm_sq(&state.u);
    let gu_prev_sq = space.grad_norm_sq(&state.u_prev);
    let duf = FieldVector {
        role: FieldRole::Displacement,
        data: state
            .u
            .data
            .iter()
            .zip(&state.u_prev.data)
            .map(|(a, b)| a - b)
            .collect(),
    };
    let dgu_sq = space.grad_norm_sq(&duf);
    let a_gu = energy_a(sigma_prev, gu_sq, gu_prev_sq, dgu_sq);

    let mut q = a_v + a_gu;
    if let Some(step) = weights {
        // Q^{l} = A(v^l) + A(grad u^l) + 2 tau sum_{i=2}^{l} a_{l-i}^{(l-1)} ||v^i||^2
        let l = state.level;
        for i in 2..=l {
            q += 2.0 * tau * step.a[l - i] * state.v_norms_sq[i];
        }
    }
    (a_v, a_gu, q)
}

/// Full experiment: startup once, then general steps to the final time,
/// recording per-level errors, norms and energy diagnostics.
pub fn run(
    space: &DgSpace,
    order: &VariableOrder,
    bundle: &SolutionBundle,
    m_steps: usize,
    t_final: f64,
    opts: &SolveOptions,
) -> Result<RunResult> {
    run_with_initial(space, order, bundle, m_steps, t_final, opts, None)
}

/// Like [`run`] but optionally starting from explicitly supplied coefficient
/// data instead of the bundle's projected initial values (used by the f = 0
/// stability studies, where the forcing bundle is zero but the data is not).
pub fn run_with_initial(
    space: &DgSpace,
    order: &VariableOrder,
    bundle: &SolutionBundle,
    m_steps: usize,
    t_final: f64,
    opts: &SolveOptions,
    initial: Option<(FieldVector, FieldVector)>,
) -> Result<RunResult> {
    if m_steps == 0 {
        return Err(SolverError::InvalidArgument("m_steps must be >= 1".into()));
    }
    let wall = Instant::now();
    let tau = t_final / m_steps as f64;
    let (mut stepper, variant_report) =
        Stepper::new(space, order, bundle, tau, m_steps, opts.clone())?;

    // Projected initial data (the H1/L2 projection pair) unless overridden.
    let (u0, v0) = match initial {
        Some(pair) => pair,
        None => space.project_initial(&|x| bundle.u(x, 0.0), &|x| bundle.grad_u(x, 0.0), &|x| {
            bundle.v(x, 0.0)
        })?,
    };
    let initial_energy = space.grad_norm_sq(&u0) + space.l2_norm_sq(&v0);
    let mut state = State::initial(space, u0, v0);

    let step0 = FractionalStep::startup(order, tau)?;
    let mut sigma_min = step0.sigma;
    let mut sigma_max = step0.sigma;
    let mut max_sigma_residual = kernel::sigma_residual(order, 0, tau, step0.sigma).abs();

    // Startup energy bookkeeping (both sides of the first-step inequality).
    let grad_u0_sq = space.grad_norm_sq(&state.u);
    let v0_sq = space.l2_norm_sq(&state.v);
    let f_half_norm = if bundle.temporal.is_empty() {
        0.0
    } else {
        let a = bundle.g_second(0.5 * tau) + bundle.fractional_term(order, 0.5 * tau)?;
        let b = -bundle.g(0.5 * tau);
        space.l2_norm_of(&|x| a * bundle.spatial.value(x) + b * bundle.spatial.laplacian(x))
    };

    state = stepper.startup_step(state, &step0)?;

    let startup_energy = StartupEnergyCheck {
        lhs: space.grad_norm_sq(&state.u) + space.l2_norm_sq(&state.v),
        rhs: grad_u0_sq
            + (1.0 + 2.0 * tau / step0.s) * v0_sq
            + 0.5 * tau * step0.s * f_half_norm * f_half_norm,
    };

    let mut rows = Vec::with_capacity(m_steps);
    let mut err_u_max = 0.0f64;
    let mut err_v_max = 0.0f64;
    let mut max_energy = startup_energy.lhs;
    let mut prev_sigma = step0.sigma;

    let mut record = |state: &State,
                      sigma_step: f64,
                      sigma_prev: f64,
                      weights: Option<&FractionalStep>,
                      stepperref: &Stepper|
     -> Result<(f64, f64)> {
        let t = state.t;
        let gval = bundle.g(t);
        let gpval = bundle.g_prime(t);
        let err_u = space.error_norm(&state.u, &|x| gval * bundle.spatial.value(x), None);
        let err_v = space.error_norm(&state.v, &|x| gpval * bundle.spatial.value(x), None);
        let (a_v, a_gu, q) = energy_diagnostics(space, state, sigma_prev, weights, tau);
        if stepperref.opts.check_diagnostics {
            let v_sq = space.l2_norm_sq(&state.v);
            let gu_sq = space.grad_norm_sq(&state.u);
            let scale = (v_sq + gu_sq).max(1e-30);
            if a_v + 1e-9 * scale < v_sq / sigma_prev || a_gu + 1e-9 * scale < gu_sq / sigma_prev {
                return Err(SolverError::DiagnosticFailure {
                    level: state.level,
                    index: 0,
                    message: format!(
                        "energy coercivity violated: A_v={a_v}, ||v||^2/sigma={}",
                        v_sq / sigma_prev
                    ),
                });
            }
        }
        let bdiff = {
            let mut acc = 0.0;
            for (a, b) in state.v.data.iter().zip(&state.v_prev.data) {
                let d = (a - b) / tau;
                acc += d * d;
            }
            acc.sqrt()
        };
        rows.push(LevelRow {
            m: state.level,
            t,
            sigma: sigma_step,
            err_u,
            err_v,
            grad_u_norm: space.grad_norm_sq(&state.u).sqrt(),
            v_norm: space.l2_norm_sq(&state.v).sqrt(),
            energy_q: q,
            bdiff_v_norm: bdiff,
            a_v,
            a_grad_u: a_gu,
        });
        Ok((err_u, err_v))
    };

    let (eu, ev) = record(&state, step0.sigma, step0.sigma, None, &stepper)?;
    err_u_max = err_u_max.max(eu);
    err_v_max = err_v_max.max(ev);

    let consistency_stride = (m_steps / 8).max(1);
    for m in 1..m_steps {
        let step = compute_weights(order, m, tau, stepper.variant)?;
        sigma_min = sigma_min.min(step.sigma);
        sigma_max = sigma_max.max(step.sigma);
        max_sigma_residual =
            max_sigma_residual.max(kernel::sigma_residual(order, m, tau, step.sigma).abs());
        state = stepper.general_step(state, &step)?;
        let (eu, ev) = record(&state, step.sigma, prev_sigma, Some(&step), &stepper)?;
        err_u_max = err_u_max.max(eu);
        err_v_max = err_v_max.max(ev);
        max_energy = max_energy.max(space.grad_norm_sq(&state.u) + space.l2_norm_sq(&state.v));
        prev_sigma = step.sigma;
        if m % consistency_stride == 0 {
            let drift = state.history_consistency_error();
            if drift > 1e-12 * (1.0 + state.v.data.iter().fold(0.0f64, |a, &b| a.max(b.abs()))) {
                return Err(SolverError::DiagnosticFailure {
                    level: m,
                    index: 0,
                    message: format!("history bookkeeping drift {drift:.3e}"),
                });
            }
        }
    }

    let err_u_final = rows.last().map(|r| r.err_u).unwrap_or(0.0);
    let err_v_final = rows.last().map(|r| r.err_v).unwrap_or(0.0);
    Ok(RunResult {
        rows,
        err_u_final,
        err_v_final,
        err_u_max,
        err_v_max,
        startup_energy,
        max_energy,
        initial_energy,
        variant: stepper.variant,
        variant_report,
        sigma_min,
        sigma_max,
        max_sigma_residual,
        solver_iterations: stepper.solver_iterations,
        wall_seconds: wall.elapsed().as_secs_f64(),
        state,
    })
}
