//! Error-scaling studies: simulate, fit and score over a grid of problem
//! sizes, then summarize across trials and fit log-log slopes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputation::{impute_pipeline, ImputeConfig};
use crate::model::{norm_2inf, Dims};
use crate::optimizer::pgd_fit_shared;
use crate::sampler::{generate_spd_interaction, gibbs_sample, simulate_measurement_study, GibbsConfig, StudySeeds};
use crate::seeding::derive_seed;
use crate::{Bounds, Dataset};

const TRUTH_TAG: u64 = 0x7472_7574_68;
const DATA_TAG: u64 = 0x6461_7461;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    ThetaMatrixVsN,
    ThetaVectorVsN,
    DeltaVVsN,
    SharedRecovery,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::ThetaMatrixVsN => "theta_matrix_vs_n",
            Study::ThetaVectorVsN => "theta_vector_vs_n",
            Study::DeltaVVsN => "delta_v_vs_n",
            Study::SharedRecovery => "shared_recovery",
        }
    }

    /// Metrics recorded for every cell, in output order.
    pub fn metrics(self) -> [&'static str; 3] {
        match self {
            Study::SharedRecovery => ["theta_matrix_2inf", "phi_l2", "final_loss"],
            _ => ["theta_matrix_2inf", "max_field_mse", "max_delta_v_sq"],
        }
    }

    /// The metric whose scaling the study is about.
    pub fn primary_metric(self) -> &'static str {
        match self {
            Study::ThetaMatrixVsN | Study::SharedRecovery => "theta_matrix_2inf",
            Study::ThetaVectorVsN => "max_field_mse",
            Study::DeltaVVsN => "max_delta_v_sq",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub p: usize,
    pub p_v: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub study: Study,
    pub grid: Vec<GridPoint>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub bounds: Bounds,
    #[serde(default = "default_kappa")]
    pub target_kappa: f64,
    #[serde(default)]
    pub fit: ImputeConfig,
    #[serde(default)]
    pub gibbs: GibbsConfig,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_trials() -> usize {
    5
}

fn default_kappa() -> f64 {
    0.15
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::invalid("the grid is empty"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        self.bounds.check()?;
        self.fit.fit.check()?;
        self.fit.unit_fit.check()?;
        self.gibbs.check()
    }

    /// The `n` grid `2^lo ..= 2^hi` at one `(p, p_v)`.
    pub fn powers_of_two(p: usize, p_v: usize, lo: u32, hi: u32) -> Vec<GridPoint> {
        (lo..=hi).map(|k| GridPoint { p, p_v, n: 1 << k }).collect()
    }

    /// Truth seed of a trial; shared by every `n` at the same `(p, p_v)`.
    pub fn truth_seed(&self, cell: &GridPoint, trial: usize) -> u64 {
        derive_seed(self.master_seed, &[TRUTH_TAG, cell.p as u64, cell.p_v as u64, trial as u64])
    }

    pub fn data_seed(&self, cell: &GridPoint, trial: usize) -> u64 {
        derive_seed(self.master_seed, &[DATA_TAG, cell.p as u64, cell.p_v as u64, cell.n as u64, trial as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub study: String,
    pub p: usize,
    pub p_v: usize,
    pub n: usize,
    pub trial: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub p: usize,
    pub p_v: usize,
    pub n: usize,
    pub trial: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub p: usize,
    pub p_v: usize,
    pub n: usize,
    pub trial: usize,
    pub truth: u64,
    pub data: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: ExperimentConfig,
    pub seeds: Vec<CellSeeds>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub records: Vec<Record>,
    pub failures: Vec<CellFailure>,
    pub provenance: Provenance,
}

fn run_cell(cfg: &ExperimentConfig, cell: &GridPoint, trial: usize) -> Result<[f64; 3]> {
    let seeds = StudySeeds { truth: cfg.truth_seed(cell, trial), data: cfg.data_seed(cell, trial) };
    match cfg.study {
        Study::SharedRecovery => {
            let truth = generate_spd_interaction(cell.p, cell.p_v, &cfg.bounds, cfg.target_kappa, seeds.truth)?;
            let gibbs = GibbsConfig { seed: seeds.data, ..cfg.gibbs.clone() };
            let x = gibbs_sample(&truth.joint, cell.n, cfg.bounds.x_max, &gibbs)?;
            let data = Dataset::new(x, Dims::outcomes_only(cell.p, cell.n)?, cfg.bounds.x_max)?;
            let (phi, theta, report) = pgd_fit_shared(&data, &cfg.bounds, &cfg.fit.fit)?;
            let diff = &theta.view() - &truth.joint.interaction.view();
            let dphi = &phi - &truth.joint.phi;
            Ok([norm_2inf(diff.view())?, dphi.dot(&dphi).sqrt(), report.final_loss])
        }
        _ => {
            let (data, truth) =
                simulate_measurement_study(cell.p, cell.p_v, cell.n, &cfg.bounds, cfg.target_kappa, seeds, &cfg.gibbs)?;
            let r = impute_pipeline(&data, &truth.clean_mask, &cfg.bounds, &cfg.fit, Some(&truth))?;
            let m = r.metrics.expect("truth supplied");
            Ok([m.theta_matrix_2inf, m.max_field_mse, m.max_delta_v_sq])
        }
    }
}

/// Runs every grid point and trial. A failing cell records `NaN` for its
/// metrics and an entry in `failures`; the study continues.
pub fn run_study(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.check()?;
    let jobs: Vec<(GridPoint, usize)> =
        cfg.grid.iter().flat_map(|c| (0..cfg.trials).map(move |t| (*c, t))).collect();
    let outcomes: Vec<Result<[f64; 3]>> = jobs.par_iter().map(|(cell, trial)| run_cell(cfg, cell, *trial)).collect();
    let names = cfg.study.metrics();
    let mut records = Vec::with_capacity(jobs.len() * names.len());
    let mut failures = Vec::new();
    let mut seeds = Vec::with_capacity(jobs.len());
    for ((cell, trial), outcome) in jobs.iter().zip(outcomes) {
        let values = match outcome {
            Ok(v) => v,
            Err(e) => {
                failures.push(CellFailure { p: cell.p, p_v: cell.p_v, n: cell.n, trial: *trial, error: e.to_string() });
                [f64::NAN; 3]
            }
        };
        for (metric, value) in names.iter().zip(values) {
            records.push(Record {
                study: cfg.study.name().to_string(),
                p: cell.p,
                p_v: cell.p_v,
                n: cell.n,
                trial: *trial,
                metric: metric.to_string(),
                value,
            });
        }
        seeds.push(CellSeeds {
            p: cell.p,
            p_v: cell.p_v,
            n: cell.n,
            trial: *trial,
            truth: cfg.truth_seed(cell, *trial),
            data: cfg.data_seed(cell, *trial),
        });
    }
    Ok(ExperimentResult {
        records,
        failures,
        provenance: Provenance { config: cfg.clone(), seeds, version: env!("CARGO_PKG_VERSION").to_string() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub study: String,
    pub p: usize,
    pub p_v: usize,
    pub n: usize,
    pub metric: String,
    pub mean: f64,
    /// Standard error of the mean across trials.
    pub std_error: f64,
    /// Trials with a finite value.
    pub count: usize,
}

/// Mean and standard error per grid point and metric, in first-seen order.
/// Non-finite values are skipped.
pub fn summarize(records: &[Record]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize, usize, usize, String)> = Vec::new();
    for r in records {
        let k = (r.study.clone(), r.p, r.p_v, r.n, r.metric.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(study, p, p_v, n, metric)| {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.study == study && r.p == p && r.p_v == p_v && r.n == n && r.metric == metric)
                .map(|r| r.value)
                .filter(|v| v.is_finite())
                .collect();
            let count = vals.len();
            let mean = if count == 0 { f64::NAN } else { vals.iter().sum::<f64>() / count as f64 };
            let std_error = if count < 2 {
                f64::NAN
            } else {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
                (var / count as f64).sqrt()
            };
            SummaryRow { study, p, p_v, n, metric, mean, std_error, count }
        })
        .collect()
}

/// Ordinary least squares of `log y` on `log x`: `(slope, intercept)`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::invalid("slope fit needs strictly positive finite points"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|l| l.0).sum::<f64>() / m;
    let my = logs.iter().map(|l| l.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|l| (l.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs at least two distinct x values"));
    }
    let sxy: f64 = logs.iter().map(|l| (l.0 - mx) * (l.1 - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub study: String,
    pub p: usize,
    pub p_v: usize,
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
}

/// Slope of the mean of `metric` against `n` for every `(p, p_v)` with at
/// least two usable grid points.
pub fn slopes_vs_n(summary: &[SummaryRow], metric: &str) -> Vec<SlopeRow> {
    let mut groups: Vec<(String, usize, usize)> = Vec::new();
    for s in summary.iter().filter(|s| s.metric == metric) {
        let k = (s.study.clone(), s.p, s.p_v);
        if !groups.contains(&k) {
            groups.push(k);
        }
    }
    groups
        .into_iter()
        .filter_map(|(study, p, p_v)| {
            let pts: Vec<(f64, f64)> = summary
                .iter()
                .filter(|s| s.metric == metric && s.study == study && s.p == p && s.p_v == p_v)
                .filter(|s| s.mean > 0.0 && s.mean.is_finite())
                .map(|s| (s.n as f64, s.mean))
                .collect();
            let (slope, intercept) = fit_slope(&pts).ok()?;
            Some(SlopeRow { study, p, p_v, metric: metric.to_string(), slope, intercept })
        })
        .collect()
}
