//! Command-line surface: `simulate`, `scatter`, `rates`, `check`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::meanfield::{FieldMethod, TreeParams};
use crate::run::{self, THREADS_ENV};
use crate::Result;

#[derive(Debug, Parser)]
#[command(name = "riesz-kinetics", version, about = "Vlasov–Riesz mean-field simulator and scattering diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evolve the ensemble and write history.bin and fields.csv.
    Simulate(RunArgs),
    /// Compute wave operators, A_t, g, F and residuals from a stored history.
    Scatter(RunArgs),
    /// Fit decay rates and write report.json.
    Rates {
        /// Run directory.
        dir: PathBuf,
    },
    /// Run the fast invariant suite.
    Check,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output (run) directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long = "t-final")]
    pub t_final: Option<f64>,
    /// Barnes–Hut field evaluation.
    #[arg(long, conflicts_with = "direct")]
    pub tree: bool,
    /// Direct O(N²) summation.
    #[arg(long)]
    pub direct: bool,
    /// Opening angle (implies --tree).
    #[arg(long, conflicts_with = "direct")]
    pub theta: Option<f64>,
}

impl RunArgs {
    /// Config file (or, for `scatter`, the run directory's echoed config)
    /// with the flag overrides applied.
    pub fn resolve_config(&self, prefer_run_dir: bool) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.out) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(dir)) if prefer_run_dir && dir.join(run::CONFIG_TOML).exists() => {
                RunConfig::load(&dir.join(run::CONFIG_TOML))?
            }
            _ => RunConfig::default(),
        };
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(a) = self.alpha {
            cfg.kernel.alpha = a;
        }
        if let Some(e) = self.eta {
            cfg.data.eta = Some(e);
        }
        if let Some(t) = self.t_final {
            cfg.schedule.t_final = t;
        }
        if self.direct {
            cfg.field = FieldMethod::Direct;
        }
        if self.tree || self.theta.is_some() {
            let mut p = match cfg.field {
                FieldMethod::Tree(p) => p,
                FieldMethod::Direct => TreeParams::default(),
            };
            if let Some(th) = self.theta {
                p.theta = th;
            }
            cfg.field = FieldMethod::Tree(p);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn report(res: Result<()>) -> ExitCode {
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    match cli.command {
        Command::Simulate(args) => report((|| {
            let cfg = args.resolve_config(false)?;
            let dir = run::output_dir(&cfg, args.out.as_deref());
            let s = run::with_threads(cfg.threads, || run::simulate(&cfg, &dir))??;
            println!("simulated {} particles to t = {} in {}", s.n_particles, cfg.schedule.t_final, dir.display());
            Ok(())
        })()),
        Command::Scatter(args) => report((|| {
            let cfg = args.resolve_config(true)?;
            let dir = run::output_dir(&cfg, args.out.as_deref());
            let s = run::with_threads(cfg.threads, || run::scatter(&cfg, &dir))??;
            println!("scattering tables for {} seeds written to {}", s.n_seeds, dir.display());
            Ok(())
        })()),
        Command::Rates { dir } => report((|| {
            let r = run::rates(&dir)?;
            for e in &r.entries {
                let fitted = e.fitted_exponent.map_or("-".to_string(), |x| format!("{x:.3}"));
                let tag = if e.trivial { "TRIVIAL" } else if e.pass { "PASS" } else { "FAIL" };
                println!("{tag:7} {:16} predicted {:7.3} fitted {fitted}", e.quantity, e.predicted_exponent);
            }
            Ok(())
        })()),
        Command::Check => {
            let lines = run::check();
            for l in &lines {
                println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
            }
            if lines.iter().all(|l| l.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
