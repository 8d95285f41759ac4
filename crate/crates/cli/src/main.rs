use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use unitfield::diagnostics::{diagnose, DiagnosticsConfig};
use unitfield::harness::{run_study, slopes_vs_n, summarize, ExperimentConfig};
use unitfield::imputation::{impute_pipeline, ImputeConfig};
use unitfield::inference::{estimate_counterfactuals, CounterfactualConfig};
use unitfield::io::{self, ModelSpec};
use unitfield::optimizer::{pgd_fit, FitConfig};
use unitfield::sampler::{simulate_measurement_study, GibbsConfig, StudySeeds};
use unitfield::seeding::derive_seed;
use unitfield::{Bounds, ExtendedParams};

/// Overrides the configured seed of any subcommand.
const SEED_ENV: &str = "UNITFIELD_SEED";

#[derive(Parser)]
#[command(name = "unitfield", version, about = "Unit-level exponential-family fits, imputation and studies")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a measurement-error study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Jointly fit the interaction matrix and every unit field.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the fit report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate measurement errors of the units flagged as corrupted.
    Impute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Simulation truth; adds error metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Counterfactual mean outcomes under alternative interventions.
    Counterfactual {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long)]
        alt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Estimated measurement errors; covariates become observed minus these.
        #[arg(long)]
        delta_v: Option<PathBuf>,
    },
    /// Assumption diagnostics of a fit.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        bounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an error-scaling study.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per grid point means and standard errors.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        provenance: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulateConfig {
    p: usize,
    p_v: usize,
    n: usize,
    bounds: Bounds,
    #[serde(default = "default_kappa")]
    target_kappa: f64,
    #[serde(default)]
    gibbs: GibbsConfig,
    #[serde(default)]
    seed: u64,
}

fn default_kappa() -> f64 {
    0.15
}

#[derive(Serialize)]
struct Provenance<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a C,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    derived_seeds: Vec<(&'a str, u64)>,
}

fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}='{v}' is not a u64"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn load_or_default<T: Default + serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    Ok(match path {
        Some(p) => io::read_json(p)?,
        None => T::default(),
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(config: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let mut cfg: SimulateConfig = io::read_json(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let seeds = StudySeeds { truth: derive_seed(cfg.seed, &[1]), data: derive_seed(cfg.seed, &[2]) };
    let (data, truth) =
        simulate_measurement_study(cfg.p, cfg.p_v, cfg.n, &cfg.bounds, cfg.target_kappa, seeds, &cfg.gibbs)?;
    create_dir(out_dir)?;
    let dims = data.dims();
    let spec = ModelSpec {
        alpha: cfg.bounds.alpha,
        beta: cfg.bounds.beta,
        x_max: cfg.bounds.x_max,
        p_v: dims.p_v,
        p_a: dims.p_a,
        p_y: dims.p_y,
        support: Some(data.support()),
    };
    io::write_dataset(&out_dir.join("data.csv"), &data)?;
    io::write_mask(&out_dir.join("mask.csv"), &truth.clean_mask)?;
    io::write_truth(&out_dir.join("truth.json"), &truth)?;
    io::write_json(&out_dir.join("bounds.json"), &spec)?;
    let prov = Provenance {
        command: "simulate",
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: &cfg,
        derived_seeds: vec![("truth", seeds.truth), ("data", seeds.data)],
    };
    io::write_json(&out_dir.join("provenance.json"), &prov)?;
    Ok(())
}

fn fit(data: &Path, bounds: &Path, out: &Path, config: &Option<PathBuf>, report: &Option<PathBuf>) -> anyhow::Result<()> {
    let spec: ModelSpec = io::read_json(bounds)?;
    let mut cfg: FitConfig = load_or_default(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let data = io::read_dataset(data, &spec)?;
    let (params, rep) = pgd_fit(&data, &spec.bounds()?, &cfg)?;
    io::write_fit(out, &params)?;
    if let Some(path) = report {
        io::write_json(path, &rep)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ImputeOutput<'a> {
    kappa: f64,
    warnings: &'a [String],
    phi_hat: Vec<f64>,
    stage_one: &'a unitfield::optimizer::FitReport,
    metrics: &'a Option<unitfield::imputation::ImputationMetrics>,
}

fn impute(
    data: &Path,
    mask: &Path,
    bounds: &Path,
    out_dir: &Path,
    config: &Option<PathBuf>,
    truth: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let spec: ModelSpec = io::read_json(bounds)?;
    let mut cfg: ImputeConfig = load_or_default(config)?;
    if let Some(seed) = seed_override()? {
        cfg.fit.seed = seed;
        cfg.unit_fit.seed = seed;
    }
    let data = io::read_dataset(data, &spec)?;
    let mask = io::read_mask(mask)?;
    let truth = truth.as_deref().map(io::read_truth).transpose()?;
    let r = impute_pipeline(&data, &mask, &spec.bounds()?, &cfg, truth.as_ref())?;
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(out_dir)?;
    let params = ExtendedParams::new(r.theta_hat.clone(), r.fields.clone())?;
    io::write_fit(&out_dir.join("fit.json"), &params)?;
    io::write_matrix_csv(&out_dir.join("delta_v.csv"), "dv", r.delta_v_hat.view())?;
    let out = ImputeOutput {
        kappa: r.kappa,
        warnings: &r.warnings,
        phi_hat: r.phi_hat.to_vec(),
        stage_one: &r.stage_one,
        metrics: &r.metrics,
    };
    io::write_json(&out_dir.join("metrics.json"), &out)?;
    Ok(())
}

fn counterfactual(
    fit: &Path,
    data: &Path,
    bounds: &Path,
    alt: &Path,
    out: &Path,
    config: &Option<PathBuf>,
    delta_v: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let spec: ModelSpec = io::read_json(bounds)?;
    let mut cfg: CounterfactualConfig = load_or_default(config)?;
    if let Some(seed) = seed_override()? {
        cfg.gibbs.seed = seed;
    }
    let params = io::read_fit(fit)?;
    let data = io::read_dataset(data, &spec)?;
    let alt = io::read_matrix_csv(alt, "a")?;
    let covariates: Option<Array2<f64>> = match delta_v {
        Some(path) => {
            let dv = io::read_matrix_csv(path, "dv")?;
            let observed = data.x().slice(s![.., data.dims().covariates()]).to_owned();
            if dv.dim() != observed.dim() {
                bail!("{} is {:?}, expected {:?}", path.display(), dv.dim(), observed.dim());
            }
            Some(observed - dv)
        }
        None => None,
    };
    let mu = estimate_counterfactuals(&params, &data, alt.view(), covariates.as_ref().map(|c| c.view()), &cfg)?;
    io::write_matrix_csv(out, "mu", mu.view())?;
    Ok(())
}

fn diagnose_cmd(fit: &Path, bounds: &Path, out: &Path, config: &Option<PathBuf>) -> anyhow::Result<()> {
    let spec: ModelSpec = io::read_json(bounds)?;
    let mut cfg: DiagnosticsConfig = load_or_default(config)?;
    if let Some(seed) = seed_override()? {
        cfg.gibbs.seed = seed;
    }
    let params = io::read_fit(fit)?;
    let report = diagnose(&params, spec.x_max, &cfg)?;
    io::write_json(out, &report)?;
    Ok(())
}

#[derive(Serialize)]
struct BenchProvenance<'a> {
    provenance: &'a unitfield::harness::Provenance,
    failures: &'a [unitfield::harness::CellFailure],
    slopes: Vec<unitfield::harness::SlopeRow>,
}

fn bench(config: &Path, out: &Path, summary: &Option<PathBuf>, provenance: &Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg: ExperimentConfig = io::read_json(config)?;
    if let Some(seed) = seed_override()? {
        cfg.master_seed = seed;
    }
    let result = run_study(&cfg)?;
    for f in &result.failures {
        eprintln!("cell p={} p_v={} n={} trial={} failed: {}", f.p, f.p_v, f.n, f.trial, f.error);
    }
    io::write_rows_csv(out, &result.records)?;
    let rows = summarize(&result.records);
    if let Some(path) = summary {
        io::write_rows_csv(path, &rows)?;
    }
    if let Some(path) = provenance {
        let prov = BenchProvenance {
            provenance: &result.provenance,
            failures: &result.failures,
            slopes: slopes_vs_n(&rows, cfg.study.primary_metric()),
        };
        io::write_json(path, &prov)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    match &cli.command {
        Command::Simulate { config, out_dir } => simulate(config, out_dir),
        Command::Fit { data, bounds, out, config, report } => fit(data, bounds, out, config, report),
        Command::Impute { data, mask, bounds, out_dir, config, truth } => {
            impute(data, mask, bounds, out_dir, config, truth)
        }
        Command::Counterfactual { fit, data, bounds, alt, out, config, delta_v } => {
            counterfactual(fit, data, bounds, alt, out, config, delta_v)
        }
        Command::Diagnose { fit, bounds, out, config } => diagnose_cmd(fit, bounds, out, config),
        Command::Bench { config, out, summary, provenance } => bench(config, out, summary, provenance),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<unitfield::Error>() {
        Some(e) if e.is_numeric() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
