//! Command-line driver: single runs, convergence sweeps, the weak-singularity
//! study, and weight diagnostics. Exit codes: 0 success, 2 configuration
//! error, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use fracwave::harness::{
    self, dump_weights_csv, parse_config_text, run_single, run_sweep, run_weak_singularity,
    run_weight_diagnostics, ErrorReport, RunConfig, SweepKind,
};
use fracwave::kernel::{OrderKind, VariableOrder};
use fracwave::SolverError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fracwave",
    about = "Energy-based DG solver for variable-order time-fractional wave equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. --set cells=40.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand overrides mirroring config keys.
    #[arg(long)]
    dimension: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    m_steps: Option<usize>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    q_u: Option<usize>,
    #[arg(long)]
    q_v: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    /// Order preset: exp_decay | quadratic | sine | kink | constant:<a>.
    #[arg(long)]
    order: Option<String>,
    /// Solution preset: smooth | weak_singular | zero.
    #[arg(long)]
    solution: Option<String>,
    #[arg(long)]
    solver_tol: Option<f64>,
    /// Directory for CSV artifacts.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, SolverError> {
        let mut cfg = RunConfig::default();
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| SolverError::Config(format!("cannot read {}: {e}", path.display())))?;
            pairs.extend(parse_config_text(&text)?);
        }
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                SolverError::Config(format!("--set expects KEY=VALUE, got '{s}'"))
            })?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        macro_rules! flag {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    pairs.push((stringify!($field).into(), v.to_string()));
                }
            };
        }
        flag!(dimension);
        flag!(cells);
        flag!(m_steps);
        flag!(t_final);
        flag!(q_u);
        flag!(q_v);
        flag!(theta);
        flag!(gamma);
        flag!(zeta);
        flag!(order);
        flag!(solution);
        flag!(solver_tol);
        if let Some(dir) = &self.output_dir {
            pairs.push(("output_dir".into(), dir.display().to_string()));
        }
        cfg.apply_pairs(&pairs)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute a single run and report errors and diagnostics.
    Solve(ConfigArgs),
    /// Refinement sweep with observed convergence orders.
    Converge {
        #[command(flatten)]
        config: ConfigArgs,
        /// spatial | temporal | both
        #[arg(long)]
        kind: String,
        /// Comma-separated refinement levels (cells, steps, or both).
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
    },
    /// Weak initial-singularity study over a list of step counts.
    Singular {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated step counts.
        #[arg(long = "m-list", value_delimiter = ',')]
        m_list: Vec<usize>,
    },
    /// Dump memory weights or weight-variation diagnostics as CSV.
    Weights {
        /// Order preset.
        #[arg(long, default_value = "exp_decay")]
        order: String,
        #[arg(long, default_value_t = 1.0)]
        t_final: f64,
        /// Dump the weight table up to this level.
        #[arg(long)]
        levels: Option<usize>,
        /// Step size for the weight table dump.
        #[arg(long)]
        tau: Option<f64>,
        /// Emit the variation diagnostics for these step sizes instead.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_report(report: &ErrorReport) {
    for line in &report.log {
        println!("{line}");
    }
    println!("{}", harness::SUMMARY_HEADER);
    for r in &report.rows {
        println!(
            "{},{},{},{},{},{},{},{},{},{},{:.4e},{:.4e},{:.4e},{:.4e},{},{},{:.3}",
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
            r.order_h.map(|v| format!("{v:.3}")).unwrap_or_default(),
            r.order_tau.map(|v| format!("{v:.3}")).unwrap_or_default(),
            r.wall_seconds
        );
    }
}

fn dispatch(cli: Cli) -> Result<(), SolverError> {
    match cli.command {
        Command::Solve(args) => {
            let cfg = args.build()?;
            let (record, res) = run_single(&cfg)?;
            println!("{}", res.variant_report);
            println!(
                "optimal flux pairing theta(1-theta)=gamma*zeta: {}",
                record.optimal_pairing
            );
            println!(
                "sigma in [{:.6}, {:.6}], max |F(sigma)| = {:.2e}",
                res.sigma_min, res.sigma_max, res.max_sigma_residual
            );
            let report = ErrorReport {
                rows: vec![record],
                log: vec![],
            };
            print_report(&report);
            Ok(())
        }
        Command::Converge {
            config,
            kind,
            levels,
        } => {
            let cfg = config.build()?;
            let kind = SweepKind::parse(&kind)?;
            let report = run_sweep(kind, &cfg, &levels)?;
            print_report(&report);
            Ok(())
        }
        Command::Singular { config, m_list } => {
            let mut cfg = config.build()?;
            if cfg.solution == "smooth" {
                cfg.solution = "weak_singular".into();
                cfg.reset_domain_to_preset()?;
            }
            let report = run_weak_singularity(&cfg, &m_list)?;
            print_report(&report);
            Ok(())
        }
        Command::Weights {
            order,
            t_final,
            levels,
            tau,
            taus,
            out,
        } => {
            let kind = OrderKind::parse(&order)?;
            let vo = VariableOrder::new(kind, t_final)?;
            let csv = if !taus.is_empty() {
                run_weight_diagnostics(&vo, &taus, t_final, out.as_deref())?
            } else {
                let levels = levels.unwrap_or(16);
                let tau = tau.unwrap_or(t_final / (levels.max(1) as f64 + 1.0));
                dump_weights_csv(&vo, tau, levels, out.as_deref())?
            };
            if out.is_none() {
                print!("{csv}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SolverError::Config(_) | SolverError::InvalidArgument(_) => ExitCode::from(2),
                SolverError::NumericalFailure(_) | SolverError::DiagnosticFailure { .. } => {
                    ExitCode::from(3)
                }
                SolverError::Io(_) => ExitCode::from(1),
            }
        }
    }
}
