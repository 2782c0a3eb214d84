//! Sweeps over (sampler, horizon, score error), CSV persistence and
//! log-log rate fitting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{analytic_report, AnalyticReport};
use crate::error::{Error, Result};
use crate::metrics::{self, MIN_SLICED_SAMPLES};
use crate::rng::RandomStream;
use crate::samplers::{run_batch, SamplerKind, TrajectoryBatch};
use crate::schedule::{Schedule, ScheduleParams, DEFAULT_C0, DEFAULT_C1, DEFAULT_C_CLIP};
use crate::score::{DeltaSpec, ScoreConfig, ScoreModeKind};
use crate::targets::GaussianMixture;

pub const JOBS_ENV: &str = "DIFFLAB_JOBS";

pub const SWEEP_HEADER: &str =
    "sampler,T,d,eps_score,kl_analytic,tv_bound,sliced_tv,moment_kl,clip_rate,seed,wallclock_ms";

const SCORE_STREAM_TAG: u64 = 1;
const DIRECTION_STREAM_TAG: u64 = 2;

fn default_c0() -> f64 {
    DEFAULT_C0
}
fn default_c1() -> f64 {
    DEFAULT_C1
}
fn default_c_clip() -> f64 {
    DEFAULT_C_CLIP
}
fn default_n_dirs() -> usize {
    metrics::DEFAULT_DIRECTIONS
}
fn default_eps_mc() -> usize {
    4096
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConstants {
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c_clip")]
    pub cclip: f64,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        Self {
            c0: DEFAULT_C0,
            c1: DEFAULT_C1,
            cclip: DEFAULT_C_CLIP,
        }
    }
}

impl ScheduleConstants {
    pub fn params(&self, horizon: usize, dim: usize) -> ScheduleParams {
        ScheduleParams::new(horizon, dim).with_constants(self.c0, self.c1, self.cclip)
    }
}

/// Score settings for a sweep. `grid`, when present, lists the offset
/// magnitudes (offset mode) or relative factors (relative mode) to sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepScoreConfig {
    #[serde(flatten)]
    pub base: ScoreConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
}

impl SweepScoreConfig {
    pub fn variants(&self) -> Result<Vec<ScoreConfig>> {
        let Some(grid) = &self.grid else {
            return Ok(vec![self.base.clone()]);
        };
        if grid.is_empty() {
            return Err(Error::ConfigInvalid("score grid is empty".into()));
        }
        grid.iter()
            .map(|&v| match self.base.mode {
                ScoreModeKind::Exact => Err(Error::ConfigInvalid(
                    "score grid needs offset or relative mode".into(),
                )),
                ScoreModeKind::Offset => Ok(ScoreConfig {
                    mode: ScoreModeKind::Offset,
                    delta: Some(DeltaSpec::Constant(v)),
                    rho: None,
                }),
                ScoreModeKind::Relative => Ok(ScoreConfig {
                    mode: ScoreModeKind::Relative,
                    delta: None,
                    rho: Some(v),
                }),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub target: PathBuf,
    #[serde(default)]
    pub schedule: ScheduleConstants,
    #[serde(rename = "T_grid")]
    pub t_grid: Vec<usize>,
    pub samplers: Vec<SamplerKind>,
    #[serde(default)]
    pub score: SweepScoreConfig,
    pub n: usize,
    #[serde(default = "default_n_dirs")]
    pub n_dirs: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Monte Carlo draws per step for relative-mode `ε_t`.
    #[serde(default = "default_eps_mc")]
    pub eps_mc_samples: usize,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative `target` and `out` paths resolve against
    /// the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let Some(dir) = path.parent() {
            if cfg.target.is_relative() {
                cfg.target = dir.join(&cfg.target);
            }
            if cfg.out.is_relative() {
                cfg.out = dir.join(&cfg.out);
            }
        }
        Ok(cfg)
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(json).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_grid.is_empty() {
            return Err(Error::ConfigInvalid("T_grid is empty".into()));
        }
        if let Some(t) = self.t_grid.iter().find(|t| **t < 4) {
            return Err(Error::ConfigInvalid(format!(
                "horizon {t} in T_grid is below 4"
            )));
        }
        if self.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ConfigInvalid(
                "T_grid must be strictly increasing".into(),
            ));
        }
        if self.samplers.is_empty() {
            return Err(Error::ConfigInvalid("no samplers listed".into()));
        }
        if self.n < 1 {
            return Err(Error::ConfigInvalid("n must be at least 1".into()));
        }
        if self.n_dirs < 1 {
            return Err(Error::ConfigInvalid("n_dirs must be at least 1".into()));
        }
        self.score.variants()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sampler: SamplerKind,
    pub horizon: usize,
    pub dim: usize,
    pub eps_score: f64,
    pub kl_analytic: Option<f64>,
    pub tv_bound: Option<f64>,
    pub sliced_tv: Option<f64>,
    pub moment_kl: Option<f64>,
    pub clip_rate: Option<f64>,
    pub seed: u64,
    pub wallclock_ms: u128,
    pub failure: Option<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepRow {
    /// Every column except `wallclock_ms`.
    pub fn data_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.sampler,
            self.horizon,
            self.dim,
            self.eps_score,
            opt(self.kl_analytic),
            opt(self.tv_bound),
            opt(self.sliced_tv),
            opt(self.moment_kl),
            opt(self.clip_rate),
            self.seed
        )
    }

    /// The CSV line(s) for this row, newline-terminated. Failed cells carry a
    /// trailing `# failed,...` comment.
    pub fn to_csv(&self) -> String {
        let mut line = format!("{},{}\n", self.data_fields(), self.wallclock_ms);
        if let Some(reason) = &self.failure {
            let reason = reason.replace(['\n', ','], " ");
            line.push_str(&format!(
                "# failed,{},{},{},{reason}\n",
                self.sampler, self.horizon, self.eps_score
            ));
        }
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub fitted_slopes: BTreeMap<SamplerKind, SlopeFit>,
}

/// Ordinary least squares of `ln value` on `ln T`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    if let Some((index, &(_, value))) = points
        .iter()
        .enumerate()
        .find(|(_, p)| p.1.is_nan() || p.1 <= 0.0)
    {
        return Err(Error::NonpositiveValue { index, value });
    }
    if let Some((index, &(t, _))) = points
        .iter()
        .enumerate()
        .find(|(_, p)| p.0.is_nan() || p.0 <= 0.0)
    {
        return Err(Error::NonpositiveValue { index, value: t });
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParams("all horizons are equal".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let syy: f64 = ys.iter().map(|y| (y - y_mean).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (ss_res / (n - 2.0) / sxx).sqrt();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 0.0 };
    Ok(SlopeFit {
        slope,
        stderr,
        r_squared,
    })
}

#[derive(Debug, Clone)]
struct Cell {
    sampler: SamplerKind,
    horizon: usize,
    score: ScoreConfig,
}

fn cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let variants = cfg.score.variants()?;
    let mut out = Vec::new();
    for &sampler in &cfg.samplers {
        for &horizon in &cfg.t_grid {
            for score in &variants {
                out.push(Cell {
                    sampler,
                    horizon,
                    score: score.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Nominal `ε_score` for a cell before the model exists; used on failed rows.
fn nominal_eps(score: &ScoreConfig) -> f64 {
    match (score.mode, &score.delta, score.rho) {
        (ScoreModeKind::Offset, Some(DeltaSpec::Constant(d)), _) => *d,
        (ScoreModeKind::Offset, Some(DeltaSpec::PerStep(v)), _) => {
            (v.iter().map(|d| d * d).sum::<f64>() / v.len().max(1) as f64).sqrt()
        }
        _ => f64::NAN,
    }
}

fn run_cell(cfg: &ExperimentConfig, target: &GaussianMixture, cell: &Cell) -> SweepRow {
    let start = Instant::now();
    let mut row = SweepRow {
        sampler: cell.sampler,
        horizon: cell.horizon,
        dim: target.dim(),
        eps_score: if cell.score.mode == ScoreModeKind::Exact {
            0.0
        } else {
            nominal_eps(&cell.score)
        },
        kl_analytic: None,
        tv_bound: None,
        sliced_tv: None,
        moment_kl: None,
        clip_rate: None,
        seed: cfg.seed,
        wallclock_ms: 0,
        failure: None,
    };
    if let Err(e) = fill_cell(cfg, target, cell, &mut row) {
        row.failure = Some(e.to_string());
    }
    row.wallclock_ms = start.elapsed().as_millis();
    row
}

fn fill_cell(
    cfg: &ExperimentConfig,
    target: &GaussianMixture,
    cell: &Cell,
    row: &mut SweepRow,
) -> Result<()> {
    let schedule = Schedule::build(cfg.schedule.params(cell.horizon, target.dim()))?;
    target.validate_second_moment(cell.horizon)?;
    let model = cell.score.build(target, &schedule)?;
    let mut eps_stream = RandomStream::new(RandomStream::derive_seed(cfg.seed, SCORE_STREAM_TAG));
    row.eps_score = model.eps_score(cfg.eps_mc_samples, &mut eps_stream)?.value;

    if target.is_gaussian() {
        let AnalyticReport { kl, tv_bound, .. } = analytic_report(&schedule, &model, cell.sampler)?;
        row.kl_analytic = Some(kl);
        row.tv_bound = Some(tv_bound);
    }

    let batch = run_batch(cell.sampler, &schedule, &model, cfg.n, cfg.seed)?;
    row.clip_rate = Some(batch.clip_rate());
    let law = model.marginal(1)?;
    if batch.len() >= MIN_SLICED_SAMPLES {
        let mut dirs = RandomStream::new(RandomStream::derive_seed(cfg.seed, DIRECTION_STREAM_TAG));
        row.sliced_tv = Some(metrics::sliced_tv(&batch, law, cfg.n_dirs, &mut dirs)?.mean);
    }
    if batch.len() > target.dim() + 1 {
        row.moment_kl = metrics::moment_kl(&batch, law).ok();
    }
    Ok(())
}

/// Per-sampler slopes over successful exact-score cells. Uses the analytic
/// KL when every such cell has it, otherwise the sliced TV.
pub fn fit_sweep_slopes(rows: &[SweepRow]) -> BTreeMap<SamplerKind, SlopeFit> {
    let mut by_sampler: BTreeMap<SamplerKind, Vec<&SweepRow>> = BTreeMap::new();
    for row in rows
        .iter()
        .filter(|r| r.failure.is_none() && r.eps_score == 0.0)
    {
        by_sampler.entry(row.sampler).or_default().push(row);
    }
    by_sampler
        .into_iter()
        .filter_map(|(sampler, rows)| {
            let metric = |r: &SweepRow| {
                if rows.iter().all(|r| r.kl_analytic.is_some()) {
                    r.kl_analytic
                } else {
                    r.sliced_tv
                }
            };
            let points: Option<Vec<(f64, f64)>> = rows
                .iter()
                .map(|r| metric(r).map(|v| (r.horizon as f64, v)))
                .collect();
            let fit = fit_slope(&points?).ok()?;
            Some((sampler, fit))
        })
        .collect()
}

pub fn slope_lines(slopes: &BTreeMap<SamplerKind, SlopeFit>) -> String {
    slopes
        .iter()
        .map(|(k, f)| format!("# slope,{k},{},{},{}\n", f.slope, f.stderr, f.r_squared))
        .collect()
}

/// Runs every cell of `cfg` on `jobs` threads and writes the CSV to `cfg.out`.
///
/// Rows are appended and flushed one at a time in grid order, whatever order
/// the cells finish in.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepReport> {
    cfg.validate()?;
    let target = GaussianMixture::load(&cfg.target)?;
    let cells = cells(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::ConfigInvalid(e.to_string()))?;

    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(&cfg.out)?);
    writeln!(out, "{SWEEP_HEADER}")?;
    out.flush()?;

    let (tx, rx) = mpsc::channel::<(usize, SweepRow)>();
    let mut rows: Vec<SweepRow> = Vec::with_capacity(cells.len());
    std::thread::scope(|scope| -> Result<()> {
        let target = &target;
        let cells = &cells;
        let pool = &pool;
        scope.spawn(move || {
            pool.install(|| {
                cells
                    .par_iter()
                    .enumerate()
                    .for_each_with(tx, |tx, (i, cell)| {
                        let _ = tx.send((i, run_cell(cfg, target, cell)));
                    })
            })
        });

        let mut pending = BTreeMap::new();
        for (i, row) in rx {
            pending.insert(i, row);
            while let Some(row) = pending.remove(&rows.len()) {
                out.write_all(row.to_csv().as_bytes())?;
                out.flush()?;
                rows.push(row);
            }
        }
        Ok(())
    })?;

    let fitted_slopes = fit_sweep_slopes(&rows);
    out.write_all(slope_lines(&fitted_slopes).as_bytes())?;
    out.flush()?;
    Ok(SweepReport {
        rows,
        fitted_slopes,
    })
}

/// `--jobs` if given, else `DIFFLAB_JOBS`, else the available parallelism.
pub fn resolve_jobs(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var(JOBS_ENV).ok()?.trim().parse().ok())
        .filter(|j| *j > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `t,alpha,alpha_bar,sigma,clip_radius`; the `t = 1` row leaves the last two empty.
pub fn write_schedule_csv<W: Write>(mut w: W, s: &Schedule) -> Result<()> {
    writeln!(w, "t,alpha,alpha_bar,sigma,clip_radius")?;
    writeln!(w, "1,{},{},,", s.alpha(1), s.alpha_bar(1))?;
    for t in 2..=s.horizon() {
        writeln!(
            w,
            "{t},{},{},{},{}",
            s.alpha(t),
            s.alpha_bar(t),
            s.sigma(t),
            s.clip_radius(t)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One row per trajectory, columns `y1_0..y1_{d-1}`, then `# clip_activations=<n>`.
pub fn write_trajectories_csv<W: Write>(mut w: W, batch: &TrajectoryBatch) -> Result<()> {
    let header: Vec<String> = (0..batch.dim()).map(|k| format!("y1_{k}")).collect();
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for row in batch.outputs.row_iter() {
        line.clear();
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    writeln!(w, "# clip_activations={}", batch.clip_activations)?;
    w.flush()?;
    Ok(())
}

/// `sampler,T,d,kl,tv_bound` header and row, then `# kl_reverse=<v>`.
pub fn write_analytic_csv<W: Write>(mut w: W, report: &AnalyticReport) -> Result<()> {
    writeln!(w, "sampler,T,d,kl,tv_bound")?;
    writeln!(
        w,
        "{},{},{},{},{}",
        report.kind, report.horizon, report.dim, report.kl, report.tv_bound
    )?;
    writeln!(w, "# kl_reverse={}", report.kl_reverse)?;
    w.flush()?;
    Ok(())
}
