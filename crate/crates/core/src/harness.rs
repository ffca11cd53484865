//! Experiment drivers: run configuration, convergence sweeps, the weak
//! initial-singularity study, weight diagnostics, and CSV artifacts.
//!
//! Configuration is a flat key=value text file; command-line overrides use
//! the same keys. Unknown keys are errors. Identical configurations produce
//! identical CSV numbers (iteration orders are fixed and nothing is seeded
//! from time); the wall_seconds column is the one measurement that varies
//! between runs.

use crate::error::{Result, SolverError};
use crate::kernel::{OrderKind, VariableOrder, WeightVariant};
use crate::mesh::build_mesh;
use crate::solution::SolutionBundle;
use crate::space::{assemble_space, DgSpace, FluxParams};
use crate::stepper::{run, RunResult, SolveOptions};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One experiment definition; every field is addressable as a config key.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dimension: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cells: usize,
    pub m_steps: usize,
    pub t_final: f64,
    pub q_u: usize,
    pub q_v: usize,
    pub theta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub order: OrderKind,
    pub solution: String,
    pub solver_tol: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dimension: 1,
            x_min: 0.0,
            x_max: 2.0 * std::f64::consts::PI,
            y_min: 0.0,
            y_max: 1.0,
            cells: 20,
            m_steps: 100,
            t_final: 1.0,
            q_u: 2,
            q_v: 1,
            theta: 0.0,
            gamma: 0.0,
            zeta: 0.0,
            order: OrderKind::ExpDecay,
            solution: "smooth".into(),
            solver_tol: 1e-12,
            output_dir: None,
        }
    }
}

/// Parse a flat key=value file ('#' starts a comment).
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SolverError::Config(format!(
                "line {}: expected key=value, got '{line}'",
                lineno + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Apply key=value pairs on top of this configuration; unknown keys are
    /// errors.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| SolverError::Config(format!("bad value for {k}: '{v}'")))
        }
        let mut domain_overridden = false;
        for (k, v) in pairs {
            match k.as_str() {
                "dimension" => self.dimension = num(k, v)?,
                "x_min" => {
                    self.x_min = num(k, v)?;
                    domain_overridden = true;
                }
                "x_max" => {
                    self.x_max = num(k, v)?;
                    domain_overridden = true;
                }
                "y_min" => {
                    self.y_min = num(k, v)?;
                    domain_overridden = true;
                }
                "y_max" => {
                    self.y_max = num(k, v)?;
                    domain_overridden = true;
                }
                "cells" => self.cells = num(k, v)?,
                "m_steps" => self.m_steps = num(k, v)?,
                "t_final" => self.t_final = num(k, v)?,
                "q_u" => self.q_u = num(k, v)?,
                "q_v" => self.q_v = num(k, v)?,
                "theta" => self.theta = num(k, v)?,
                "gamma" => self.gamma = num(k, v)?,
                "zeta" => self.zeta = num(k, v)?,
                "order" => self.order = OrderKind::parse(v)?,
                "solution" => self.solution = v.clone(),
                "solver_tol" => self.solver_tol = num(k, v)?,
                "output_dir" => self.output_dir = Some(PathBuf::from(v)),
                other => return Err(SolverError::Config(format!("unknown config key '{other}'"))),
            }
        }
        if !domain_overridden {
            self.reset_domain_to_preset()?;
        }
        Ok(())
    }

    /// Domain bounds follow the solution preset unless explicitly overridden.
    pub fn reset_domain_to_preset(&mut self) -> Result<()> {
        let bundle = SolutionBundle::preset(&self.solution, self.dimension)?;
        self.x_min = bundle.domain[0][0];
        self.x_max = bundle.domain[0][1];
        self.y_min = bundle.domain[1][0];
        self.y_max = bundle.domain[1][1];
        Ok(())
    }

    pub fn bundle(&self) -> Result<SolutionBundle> {
        SolutionBundle::preset(&self.solution, self.dimension)
    }

    pub fn order_fn(&self) -> Result<VariableOrder> {
        VariableOrder::new(self.order, self.t_final)
    }

    pub fn build_space(&self) -> Result<DgSpace> {
        let bounds: Vec<[f64; 2]> = vec![[self.x_min, self.x_max], [self.y_min, self.y_max]];
        let cells = vec![self.cells, self.cells];
        let mesh = build_mesh(self.dimension, &bounds, &cells)?;
        let flux = FluxParams::new(self.theta, self.gamma, self.zeta)?;
        assemble_space(mesh, self.q_u, self.q_v, flux)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            solver_tol: self.solver_tol,
            ..SolveOptions::default()
        }
    }

    fn label(&self) -> String {
        format!(
            "{}_{}_d{}_q{}{}_N{}_M{}",
            self.solution,
            self.order.label().replace(':', ""),
            self.dimension,
            self.q_u,
            self.q_v,
            self.cells,
            self.m_steps
        )
    }
}

/// Measured errors and orders of one run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub solution: String,
    pub order_label: String,
    pub dimension: usize,
    pub q_u: usize,
    pub q_v: usize,
    pub cells: usize,
    pub m_steps: usize,
    pub theta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub e_u: f64,
    pub e_v: f64,
    pub e_u_max: f64,
    pub e_v_max: f64,
    pub order_h: Option<f64>,
    pub order_tau: Option<f64>,
    pub wall_seconds: f64,
    pub solver_iterations: usize,
    pub optimal_pairing: bool,
    /// Spatial sweeps only: temporal error budget tau^2 < 10% of E_u.
    pub temporal_budget_ok: Option<bool>,
}

/// A set of run records plus the run-log lines accumulated on the way.
#[derive(Debug, Clone, Default)]
pub struct ErrorReport {
    pub rows: Vec<RunRecord>,
    pub log: Vec<String>,
}

/// Observed order between two errors under refinement ratio r > 1:
/// log(e_coarse/e_fine) / log(r).
pub fn observed_order(e_coarse: f64, e_fine: f64, ratio: f64) -> f64 {
    (e_coarse / e_fine).ln() / ratio.ln()
}

fn record_from(config: &RunConfig, res: &RunResult) -> RunRecord {
    RunRecord {
        solution: config.solution.clone(),
        order_label: config.order.label(),
        dimension: config.dimension,
        q_u: config.q_u,
        q_v: config.q_v,
        cells: config.cells,
        m_steps: config.m_steps,
        theta: config.theta,
        gamma: config.gamma,
        zeta: config.zeta,
        e_u: res.err_u_final,
        e_v: res.err_v_final,
        e_u_max: res.err_u_max,
        e_v_max: res.err_v_max,
        order_h: None,
        order_tau: None,
        wall_seconds: res.wall_seconds,
        solver_iterations: res.solver_iterations,
        optimal_pairing: FluxParams {
            theta: config.theta,
            gamma: config.gamma,
            zeta: config.zeta,
        }
        .optimal_pairing(),
        temporal_budget_ok: None,
    }
}

/// Execute a single configuration; writes the level-history CSV and a
/// one-row summary when an output directory is set.
pub fn run_single(config: &RunConfig) -> Result<(RunRecord, RunResult)> {
    let space = config.build_space()?;
    let order = config.order_fn()?;
    let bundle = config.bundle()?;
    let res = run(
        &space,
        &order,
        &bundle,
        config.m_steps,
        config.t_final,
        &config.solve_options(),
    )?;
    let record = record_from(config, &res);
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
        write_history_csv(&dir.join(format!("history_{}.csv", config.label())), &res)?;
        write_summary_csv(&dir.join("summary.csv"), std::slice::from_ref(&record))?;
    }
    Ok((record, res))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Spatial,
    Temporal,
    Simultaneous,
}

impl SweepKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "temporal" => Ok(Self::Temporal),
            "both" | "simultaneous" => Ok(Self::Simultaneous),
            other => Err(SolverError::Config(format!(
                "unknown sweep kind '{other}' (expected spatial|temporal|both)"
            ))),
        }
    }
}

/// Run a refinement sweep and compute observed orders between consecutive
/// levels. `levels` are cell counts (spatial), step counts (temporal) or
/// both at once (simultaneous).
pub fn run_sweep(kind: SweepKind, base: &RunConfig, levels: &[usize]) -> Result<ErrorReport> {
    if levels.len() < 2 {
        return Err(SolverError::Config(
            "a sweep needs at least 2 refinement levels".into(),
        ));
    }
    let mut report = ErrorReport::default();
    for (i, &lv) in levels.iter().enumerate() {
        let mut cfg = base.clone();
        match kind {
            SweepKind::Spatial => cfg.cells = lv,
            SweepKind::Temporal => cfg.m_steps = lv,
            SweepKind::Simultaneous => {
                cfg.cells = lv;
                cfg.m_steps = lv;
            }
        }
        let (mut record, res) = run_single(&cfg)?;
        if i == 0 {
            report.log.push(res.variant_report.clone());
        }
        if kind == SweepKind::Spatial {
            let tau = cfg.t_final / cfg.m_steps as f64;
            let ok = tau * tau < 0.1 * record.e_u.max(f64::MIN_POSITIVE);
            if !ok {
                report.log.push(format!(
                    "WARNING: temporal budget violated at N={lv}: tau^2 = {:.3e} vs 10% of E_u = {:.3e}",
                    tau * tau,
                    0.1 * record.e_u
                ));
            }
            record.temporal_budget_ok = Some(ok);
        }
        if i > 0 {
            let prev = &report.rows[i - 1];
            let ratio = lv as f64 / levels[i - 1] as f64;
            match kind {
                SweepKind::Spatial => {
                    record.order_h = Some(observed_order(prev.e_u, record.e_u, ratio))
                }
                SweepKind::Temporal => {
                    record.order_tau = Some(observed_order(prev.e_u, record.e_u, ratio))
                }
                SweepKind::Simultaneous => {
                    record.order_h = Some(observed_order(prev.e_v, record.e_v, ratio));
                    record.order_tau = record.order_h;
                }
            }
        }
        report.rows.push(record);
    }
    if let Some(dir) = &base.output_dir {
        std::fs::create_dir_all(dir)?;
        write_summary_csv(&dir.join("summary.csv"), &report.rows)?;
    }
    Ok(report)
}

/// Weak-singularity study: maximum-in-time errors over a list of step counts
/// plus the two time-history CSVs (error in v and backward difference of v).
pub fn run_weak_singularity(base: &RunConfig, m_list: &[usize]) -> Result<ErrorReport> {
    if base.solution != "weak_singular" {
        return Err(SolverError::Config(
            "the singular driver requires solution=weak_singular".into(),
        ));
    }
    let mut report = ErrorReport::default();
    for (i, &m) in m_list.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.m_steps = m;
        let (mut record, res) = run_single(&cfg)?;
        if let Some(dir) = &cfg.output_dir {
            write_time_history_csv(
                &dir.join(format!("singular_history_{}.csv", cfg.label())),
                &res,
            )?;
        }
        if i > 0 {
            let prev = &report.rows[i - 1];
            let ratio = m as f64 / m_list[i - 1] as f64;
            record.order_tau = Some(observed_order(prev.e_u_max, record.e_u_max, ratio));
        }
        // Where does the backward difference peak? Expected in the first few
        // percent of the steps for a t^(3/2) solution.
        let argmax = res
            .rows
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.bdiff_v_norm.total_cmp(&b.1.bdiff_v_norm))
            .map(|(i, _)| i)
            .unwrap_or(0);
        report.log.push(format!(
            "M={m}: max backward-difference at level {} of {} ({:.1}%)",
            argmax + 1,
            m,
            100.0 * (argmax + 1) as f64 / m as f64
        ));
        report.rows.push(record);
    }
    if let Some(dir) = &base.output_dir {
        std::fs::create_dir_all(dir)?;
        write_summary_csv(&dir.join("summary.csv"), &report.rows)?;
    }
    Ok(report)
}

/// Weight diagnostics over a list of step sizes: the ratio statistic and the
/// cumulative positive-variation statistic per tau.
pub fn run_weight_diagnostics(
    order: &VariableOrder,
    taus: &[f64],
    t_final: f64,
    out: Option<&Path>,
) -> Result<String> {
    let mut csv = String::from(
        "tau,levels,ratio_stat,ratio_at_m,ratio_at_i,cumulative_raw,cumulative_over_tau\n",
    );
    for &tau in taus {
        let levels = (t_final / tau).round() as usize;
        if levels < 3 {
            return Err(SolverError::Config(format!(
                "tau={tau} leaves fewer than 3 levels before t_final={t_final}"
            )));
        }
        let rep = crate::kernel::weight_variation_report(
            order,
            tau,
            levels,
            WeightVariant::TwoMinusAlpha,
        )?;
        writeln!(
            csv,
            "{:.12e},{},{:.12e},{},{},{:.12e},{:.12e}",
            rep.tau,
            rep.levels,
            rep.ratio_stat,
            rep.ratio_at.0,
            rep.ratio_at.1,
            rep.cumulative_raw,
            rep.cumulative_over_tau
        )
        .unwrap();
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, &csv)?;
    }
    Ok(csv)
}

/// Dump the weight table (m, i, c_i, a_i, sigma_m, s_m) up to a level.
pub fn dump_weights_csv(
    order: &VariableOrder,
    tau: f64,
    levels: usize,
    out: Option<&Path>,
) -> Result<String> {
    let mut csv = String::from("m,i,c_i,a_i,sigma_m,s_m\n");
    let s0 = crate::kernel::FractionalStep::startup(order, tau)?;
    writeln!(
        csv,
        "0,0,{:.12e},{:.12e},{:.12e},{:.12e}",
        s0.c[0], s0.a[0], s0.sigma, s0.s
    )
    .unwrap();
    for m in 1..=levels {
        let step = crate::kernel::compute_weights(order, m, tau, WeightVariant::TwoMinusAlpha)?;
        for i in 0..=m {
            writeln!(
                csv,
                "{m},{i},{:.12e},{:.12e},{:.12e},{:.12e}",
                step.c[i], step.a[i], step.sigma, step.s
            )
            .unwrap();
        }
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, &csv)?;
    }
    Ok(csv)
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

pub const SUMMARY_HEADER: &str = "preset,alpha,dim,q_u,q_v,N,M,theta,gamma,zeta,E_u,E_v,Eu_max,Ev_max,order_h,order_tau,wall_seconds";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Append-or-create the one-row-per-run summary CSV.
pub fn write_summary_csv(path: &Path, rows: &[RunRecord]) -> Result<()> {
    let mut body = String::new();
    let fresh = !path.exists();
    if fresh {
        body.push_str(SUMMARY_HEADER);
        body.push('\n');
    }
    for r in rows {
        writeln!(
            body,
            "{},{},{},{},{},{},{},{},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{},{},{:.3}",
            r.solution,
            r.order_label,
            r.dimension,
            r.q_u,
            r.q_v,
            r.cells,
            r.m_steps,
            r.theta,
            r.gamma,
            r.zeta,
            r.e_u,
            r.e_v,
            r.e_u_max,
            r.e_v_max,
            fmt_opt(r.order_h),
            fmt_opt(r.order_tau),
            r.wall_seconds
        )
        .unwrap();
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Per-level history of one run.
pub fn write_history_csv(path: &Path, res: &RunResult) -> Result<()> {
    let mut body =
        String::from("m,t,sigma,E_u,E_v,grad_u_norm,v_norm,energy_Q,backward_diff_norm\n");
    for r in &res.rows {
        writeln!(
            body,
            "{},{:.12e},{:.16e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.m,
            r.t,
            r.sigma,
            r.err_u,
            r.err_v,
            r.grad_u_norm,
            r.v_norm,
            r.energy_q,
            r.bdiff_v_norm
        )
        .unwrap();
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Figure-style time-history CSV for the weak-singularity study.
pub fn write_time_history_csv(path: &Path, res: &RunResult) -> Result<()> {
    let mut body = String::from("m,t,sigma,err_v_l2,bdiff_v_l2,energy_Q\n");
    for r in &res.rows {
        writeln!(
            body,
            "{},{:.12e},{:.16e},{:.12e},{:.12e},{:.12e}",
            r.m, r.t, r.sigma, r.err_v, r.bdiff_v_norm, r.energy_q
        )
        .unwrap();
    }
    std::fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_computation_recovers_synthetic_rates() {
        // e = C h^p sequences recover p to 1e-12 for any refinement ratio.
        for p in [0.5, 1.0, 1.97, 3.0, 5.25] {
            for r in [2.0, 1.5, 1.25] {
                let c = 3.7;
                let h1: f64 = 0.1;
                let h2 = h1 / r;
                let e1 = c * h1.powf(p);
                let e2 = c * h2.powf(p);
                let got = observed_order(e1, e2, r);
                assert!((got - p).abs() < 1e-12, "p={p} r={r}: {got}");
            }
        }
    }

    #[test]
    fn config_parsing_strict_keys() {
        let mut cfg = RunConfig::default();
        let pairs = parse_config_text(
            "# comment\n cells = 8 \n q_u=1\n q_v=0\n order=constant:0.5\n solution=zero\n m_steps=4\n",
        )
        .unwrap();
        cfg.apply_pairs(&pairs).unwrap();
        assert_eq!(cfg.cells, 8);
        assert_eq!(cfg.q_u, 1);
        assert!(matches!(cfg.order, OrderKind::Constant(a) if a == 0.5));
        let bad = parse_config_text("not_a_key=3\n").unwrap();
        assert!(matches!(
            cfg.apply_pairs(&bad),
            Err(SolverError::Config(ref m)) if m.contains("unknown config key")
        ));
        assert!(parse_config_text("garbage line\n").is_err());
    }

    #[test]
    fn zero_preset_run_reports_zero_errors() {
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(&[
            ("solution".into(), "zero".into()),
            ("cells".into(), "4".into()),
            ("m_steps".into(), "3".into()),
            ("q_u".into(), "1".into()),
            ("q_v".into(), "0".into()),
        ])
        .unwrap();
        let (record, _) = run_single(&cfg).unwrap();
        assert!(record.e_u <= 1e-13 && record.e_v <= 1e-13);
        assert!(record.e_u_max <= 1e-13);
    }

    #[test]
    fn sweep_attaches_orders_between_consecutive_rows() {
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(&[
            ("solution".into(), "smooth".into()),
            ("order".into(), "constant:0.5".into()),
            ("q_u".into(), "1".into()),
            ("q_v".into(), "0".into()),
            ("m_steps".into(), "60".into()),
        ])
        .unwrap();
        let report = run_sweep(SweepKind::Spatial, &cfg, &[6, 12]).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[0].order_h.is_none());
        let order = report.rows[1].order_h.unwrap();
        assert!(order > 1.0 && order < 3.0, "order {order}");
    }

    #[test]
    fn summary_csv_layout() {
        let dir = std::env::temp_dir().join(format!("fracwave_test_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(&[
            ("solution".into(), "zero".into()),
            ("cells".into(), "4".into()),
            ("m_steps".into(), "3".into()),
            ("q_u".into(), "1".into()),
            ("q_v".into(), "0".into()),
        ])
        .unwrap();
        cfg.output_dir = Some(dir.clone());
        run_single(&cfg).unwrap();
        let text = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SUMMARY_HEADER);
        let row = lines.next().unwrap();
        assert!(row.starts_with("zero,exp_decay,1,1,0,4,3,0,0,0,"));
        let _ = std::fs::remove_dir_all(&dir);
    }
}
