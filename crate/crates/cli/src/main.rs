use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use consensus_ppc::config::ExperimentConfig;
use consensus_ppc::experiment::{self, ReproduceOptions, SweepParam};
use consensus_ppc::sim::{self, Termination};
use consensus_ppc::Controller;

const OK: u8 = 0;
const USAGE: u8 = 1;
const BREACH: u8 = 2;
const MISS: u8 = 3;

const EXIT_CODES: &str = "Exit codes: 0 success, 1 usage or config error, 2 envelope breach, 3 acceptance criterion missed.";

#[derive(Parser)]
#[command(name = "consensus-ppc", version, about = "Simulate and verify stochastic consensus under prescribed-performance control")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file; the built-in six-agent reference setup when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Base seed of the noise streams (overrides sim.seed).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Number of realizations (overrides sim.realizations).
    #[arg(long, value_name = "N")]
    realizations: Option<usize>,
    /// Input law (overrides `controller`): none, thm1 (mean-square) or thm2 (almost-sure).
    #[arg(long, value_name = "none|thm1|thm2")]
    controller: Option<Controller>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one realization and write `trajectory.csv`.
    #[command(after_help = "trajectory.csv columns: t,x_1..x_n,xbar_1..xbar_m,xi_1..xi_m,rho_1..rho_m\n  \
        x_i agent positions; xbar_k relative position on edge k; xi_k transformed error; rho_k envelope.")]
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Realization index (selects the noise stream).
        #[arg(long, default_value_t = 0)]
        realization: u64,
    },
    /// Run the Monte Carlo ensemble and write `ensemble.csv`.
    #[command(after_help = "ensemble.csv columns: t,mean_sq_xbar,ci_halfwidth,mean_abs_xbar_1..mean_abs_xbar_m,breach_count\n  \
        mean_sq_xbar: E|xbar|^2 over paths still inside the envelopes; ci_halfwidth: 95% half-width;\n  \
        mean_abs_xbar_k: E|xbar_k|; breach_count: paths that left an envelope up to t.")]
    Ensemble {
        #[command(flatten)]
        common: Common,
    },
    /// Check the sufficient conditions and write `conditions.csv`.
    #[command(after_help = "conditions.csv columns: name,mode,margin,pass\n  \
        name: envelope-decay | convergence-rate | noise-robustness | almost-sure-margin\n  \
        mode: worst-case | worst-case-retained | trajectory; margin: eigenvalue minus threshold;\n  \
        pass: pass | fail | not-applicable | indeterminate.")]
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also run the ensemble and add trajectory-mode minima over its completed paths.
        #[arg(long)]
        trajectory: bool,
        /// Report the (gamma, kappa) pair with the largest kappa passing the worst-case checks.
        #[arg(long)]
        search: bool,
    },
    /// Evaluate the Lyapunov generator along the ensemble and write `analysis.csv`.
    #[command(after_help = "analysis.csv columns: t,V_mean,V_bound,LV_violations,beta_mean\n  \
        thm1: V = |xi|^2/2 + gamma |xbar|^2/2, V_bound its comparison envelope, LV_violations samples with LV > -kappa V + 1e-6;\n  \
        thm2: V = (|eta|^2/q)^(q/2), V_bound empty, LV_violations samples with LV > 1e-6;\n  \
        beta_mean: ensemble mean of beta(eta).")]
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// One ensemble per parameter value; writes `sweep.csv`.
    #[command(after_help = "sweep.csv columns: value,final_mean_sq,final_ci_halfwidth,decay_rate,t_below,t_below_lo,t_below_hi,\
        as_fraction,final_fraction,breaches,solver_failures\n  \
        t_below*: first sample time E|xbar|^2 (and its lower/upper CI edge) is below --threshold, NaN if never;\n  \
        as_fraction: share of paths with max|xbar_k| < delta on [T/2, T]; final_fraction: the same at T.")]
    Sweep {
        #[command(flatten)]
        common: Common,
        /// eps | k_g-scale | dt | N
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Level of E|xbar|^2 used for the crossing times.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run the four reference scenarios, condition report and integrator checks; grade every criterion.
    #[command(after_help = "Writes <out>/<scenario>/{ensemble.csv,trajectory_<r>.csv,analysis.csv}, conditions.csv, \
        summary.txt and plot.gp.\nScenarios: uncontrolled, almost-sure, mean-square (eps=1.5), mean-square-fast (eps=10).")]
    ReproducePaper {
        #[command(flatten)]
        common: Common,
        /// Realizations exported as trajectory CSVs per scenario.
        #[arg(long, default_value_t = 3)]
        trajectories: usize,
        /// Skip the gnuplot script.
        #[arg(long)]
        no_gnuplot: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::reference(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = common.realizations {
        config.realizations = n;
    }
    if let Some(c) = common.controller {
        config.controller = c;
    }
    config.validated().context("after command-line overrides")
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Simulate { common, realization } => {
            let config = load(&common)?;
            let model = config.model();
            let cfg = config.sim_config();
            cfg.validate(&model, config.controller)?;
            let record = sim::run_one(&model, config.controller, &cfg, realization);
            write(&common.out, "trajectory.csv", &experiment::trajectory_csv(&model, &record))?;
            match record.status {
                Termination::Completed => {
                    println!("completed {} samples", record.len());
                    Ok(OK)
                }
                Termination::EnvelopeBreach(b) => {
                    println!("envelope breach on edge {} at t={} (xbar={}, rho={})", b.edge + 1, b.t, b.xbar, b.rho);
                    Ok(BREACH)
                }
                Termination::SolverFailure { t } => anyhow::bail!("implicit solve failed at t={t}"),
            }
        }
        Command::Ensemble { common } => {
            let config = load(&common)?;
            let model = config.model();
            let cfg = config.sim_config();
            cfg.validate(&model, config.controller)?;
            let stats = sim::run_ensemble(&model, config.controller, &cfg);
            write(&common.out, "ensemble.csv", &experiment::ensemble_csv(&stats))?;
            let last = stats.times.len() - 1;
            println!(
                "N={} breaches={} solver_failures={} E|xbar(T)|^2={:e} +- {:e}",
                stats.realizations, stats.breaches, stats.solver_failures, stats.mean_sq[last], stats.ci_half_width[last]
            );
            Ok(if stats.breaches > 0 { BREACH } else { OK })
        }
        Command::Verify { common, trajectory, search } => {
            let config = load(&common)?;
            let minima = if trajectory { Some(experiment::trajectory_minima(&config)?) } else { None };
            let report = experiment::verify(&config, minima);
            for e in &report.entries {
                println!("{e}");
            }
            if search {
                let model = config.model();
                match consensus_ppc::conditions::search_gamma_kappa(
                    model.graph(),
                    model.ppc(),
                    model.diffusion().lipschitz(),
                    Default::default(),
                ) {
                    Some(s) => println!("search gamma={} kappa={}", s.gamma, s.kappa),
                    None => println!("search none"),
                }
            }
            write(&common.out, "conditions.csv", &report.to_csv())?;
            Ok(OK)
        }
        Command::Analyze { common } => {
            let config = load(&common)?;
            let a = &config.analysis;
            let table = experiment::analyze(&config.model(), config.controller, &config.sim_config(), a.gamma, a.kappa, a.q)?;
            write(&common.out, "analysis.csv", &table.to_csv())?;
            println!(
                "generator violations={} min_beta={:e} envelope_ok={} breaches={}",
                table.total_violations(),
                table.min_beta,
                table.envelope_ok.map_or("n/a".to_string(), |v| v.to_string()),
                table.breaches
            );
            Ok(if table.breaches > 0 { BREACH } else { OK })
        }
        Command::Sweep { common, param, values, threshold } => {
            let config = load(&common)?;
            let table = experiment::sweep(&config, param, &values, threshold)?;
            let csv = table.to_csv();
            write(&common.out, "sweep.csv", &csv)?;
            print!("{csv}");
            Ok(if table.breaches() > 0 { BREACH } else { OK })
        }
        Command::ReproducePaper { common, trajectories, no_gnuplot } => {
            let config = load(&common)?;
            let options = ReproduceOptions { realizations: None, seed: None, trajectories, gnuplot: !no_gnuplot };
            let result = experiment::reproduce(&config, &options)?;
            result.write(&common.out, options.gnuplot)?;
            print!("{}", result.summary());
            let failed = result.failed();
            if failed.is_empty() {
                return Ok(OK);
            }
            for c in failed {
                eprintln!("criterion {} missed: {}", c.id, c.title);
            }
            Ok(MISS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { OK });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(USAGE)
        }
    }
}
