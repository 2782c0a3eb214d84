use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use difflab_core::harness::{self, ExperimentConfig, JOBS_ENV};
use difflab_core::samplers::run_batch_with_jobs;
use difflab_core::schedule::{DEFAULT_C0, DEFAULT_C1, DEFAULT_C_CLIP};
use difflab_core::{
    analytic_report, GaussianMixture, SamplerKind, Schedule, ScheduleParams, ScoreModel,
};

#[derive(Parser)]
#[command(name = "difflab", version, about = "Diffusion sampler laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the schedule coefficients for one horizon.
    Schedule {
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long, default_value_t = DEFAULT_C0)]
        c0: f64,
        #[arg(long, default_value_t = DEFAULT_C1)]
        c1: f64,
        #[arg(long, default_value_t = DEFAULT_C_CLIP)]
        cclip: f64,
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run n trajectories with exact scores and write the Y_1 samples.
    Sample {
        #[arg(long)]
        sampler: SamplerKind,
        #[arg(long)]
        target: PathBuf,
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable the clipped correction of the accelerated sampler.
        #[arg(long)]
        no_clip: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = JOBS_ENV)]
        jobs: Option<usize>,
        #[command(flatten)]
        constants: Constants,
    },
    /// Closed-form KL and TV bound for a Gaussian target.
    Analytic {
        #[arg(long)]
        sampler: SamplerKind,
        #[arg(long)]
        target: PathBuf,
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        constants: Constants,
    },
    /// Run a grid of cells from a JSON config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = JOBS_ENV)]
        jobs: Option<usize>,
    },
}

#[derive(Args)]
struct Constants {
    #[arg(long, default_value_t = DEFAULT_C0)]
    c0: f64,
    #[arg(long, default_value_t = DEFAULT_C1)]
    c1: f64,
    #[arg(long, default_value_t = DEFAULT_C_CLIP)]
    cclip: f64,
}

impl Constants {
    fn schedule(&self, horizon: usize, dim: usize) -> Result<Schedule> {
        let params = ScheduleParams::new(horizon, dim).with_constants(self.c0, self.c1, self.cclip);
        Schedule::build(params).context("building schedule")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_target(path: &Path) -> Result<GaussianMixture> {
    GaussianMixture::load(path).with_context(|| format!("loading target {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Schedule {
            horizon,
            c0,
            c1,
            cclip,
            d,
            out,
        } => {
            let s = Constants { c0, c1, cclip }.schedule(horizon, d)?;
            harness::write_schedule_csv(create(&out)?, &s)?;
        }
        Command::Sample {
            sampler,
            target,
            horizon,
            n,
            seed,
            no_clip,
            out,
            jobs,
            constants,
        } => {
            let kind = if no_clip {
                sampler.without_clip()
            } else {
                sampler
            };
            let target = load_target(&target)?;
            let s = constants.schedule(horizon, target.dim())?;
            target.validate_second_moment(horizon)?;
            let model = ScoreModel::exact(&target, &s)?;
            let batch =
                run_batch_with_jobs(kind, &s, &model, n, seed, harness::resolve_jobs(jobs))?;
            harness::write_trajectories_csv(create(&out)?, &batch)?;
        }
        Command::Analytic {
            sampler,
            target,
            horizon,
            out,
            constants,
        } => {
            let target = load_target(&target)?;
            let s = constants.schedule(horizon, target.dim())?;
            let model = ScoreModel::exact(&target, &s)?;
            let report = analytic_report(&s, &model, sampler)?;
            harness::write_analytic_csv(create(&out)?, &report)?;
        }
        Command::Sweep { config, jobs } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let report = harness::run_sweep(&cfg, harness::resolve_jobs(jobs))?;
            let failed = report.rows.iter().filter(|r| r.failure.is_some()).count();
            eprintln!(
                "wrote {} rows ({failed} failed) to {}",
                report.rows.len(),
                cfg.out.display()
            );
            for (kind, fit) in &report.fitted_slopes {
                eprintln!(
                    "{kind}: slope {:.3} ± {:.3} (R² {:.4})",
                    fit.slope, fit.stderr, fit.r_squared
                );
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
