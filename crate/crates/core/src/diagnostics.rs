//! Computable checks of the modelling assumptions: the smallest eigenvalue
//! of the conditional autocorrelation of the centred statistics, the
//! Dobrushin coupling bound, and a proper-loss probe.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::expected_loss_quadrature;
use crate::model::centering_constants;
use crate::optimizer::{project_population, project_unit_fields};
use crate::quadrature::GaussLegendre;
use crate::sampler::{gibbs_sample, GibbsConfig};
use crate::seeding::{derive_seed, stream_rng};
use crate::{Bounds, ExtendedParams, JointParams, PopulationMatrix, UnitFields};

/// Largest dimension for tensor quadrature of the autocorrelation.
pub const MAX_QUADRATURE_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum LambdaMethod {
    Quadrature { nodes: usize },
    MonteCarlo { gibbs: GibbsConfig, n_samples: usize },
}

impl Default for LambdaMethod {
    fn default() -> Self {
        LambdaMethod::Quadrature { nodes: 48 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub value: f64,
    pub method: MethodTag,
    /// Zero for quadrature; batch standard error for Monte Carlo.
    pub std_error: f64,
}

/// `x~ = (x_t, 2 x_{-t} x_t, x_t^2 - c2)`.
fn statistic(x: &[f64], t: usize, c2: f64, out: &mut [f64]) {
    let p = x.len();
    out[0] = x[t];
    let mut k = 1;
    for (u, &xu) in x.iter().enumerate() {
        if u != t {
            out[k] = 2.0 * xu * x[t];
            k += 1;
        }
    }
    out[p] = x[t] * x[t] - c2;
}

fn min_eig(m: &Array2<f64>) -> f64 {
    let k = m.nrows();
    let dm = DMatrix::from_fn(k, k, |r, c| 0.5 * (m[[r, c]] + m[[c, r]]));
    SymmetricEigen::new(dm).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn log_density(field: ArrayView1<'_, f64>, theta: ArrayView2<'_, f64>, x: &[f64]) -> f64 {
    let p = x.len();
    let mut s = 0.0;
    for t in 0..p {
        let mut inner = 0.0;
        for u in 0..p {
            inner += theta[[t, u]] * x[u];
        }
        s += x[t] * (field[t] + inner);
    }
    s
}

/// Autocorrelation `E[x~ x~^T]` under `exp(field^T x + x^T Theta x)` by
/// tensor quadrature.
pub fn autocorrelation_quadrature(
    field: ArrayView1<'_, f64>,
    population: &PopulationMatrix,
    t: usize,
    x_max: f64,
    nodes: usize,
) -> Result<Array2<f64>> {
    let p = check_inputs(field, population, t)?;
    if p > MAX_QUADRATURE_DIM {
        return Err(Error::UnsupportedDimension(format!(
            "quadrature autocorrelation needs p <= {MAX_QUADRATURE_DIM}, got {p}"
        )));
    }
    let (_, c2) = centering_constants(x_max)?;
    let rule = GaussLegendre::new(nodes)?;
    let theta = population.view();
    let mut peak = f64::NEG_INFINITY;
    rule.for_each_tensor_point(p, x_max, |x, _| peak = peak.max(log_density(field, theta, x)));
    let mut z = 0.0;
    let mut acc = Array2::<f64>::zeros((p + 1, p + 1));
    let mut v = vec![0.0; p + 1];
    rule.for_each_tensor_point(p, x_max, |x, w| {
        let f = w * (log_density(field, theta, x) - peak).exp();
        z += f;
        statistic(x, t, c2, &mut v);
        for r in 0..=p {
            for c in 0..=p {
                acc[[r, c]] += f * v[r] * v[c];
            }
        }
    });
    if !(z > 0.0) {
        return Err(Error::NumericUnderflow("autocorrelation normalizer vanished".into()));
    }
    Ok(acc / z)
}

fn check_inputs(field: ArrayView1<'_, f64>, population: &PopulationMatrix, t: usize) -> Result<usize> {
    let p = population.p();
    if field.len() != p {
        return Err(Error::invalid(format!("field has {} entries, expected {p}", field.len())));
    }
    if t >= p {
        return Err(Error::invalid(format!("coordinate {t} out of range for p={p}")));
    }
    Ok(p)
}

fn autocorrelation_of_draws(draws: ArrayView2<'_, f64>, t: usize, c2: f64) -> Array2<f64> {
    let p = draws.ncols();
    let mut acc = Array2::<f64>::zeros((p + 1, p + 1));
    let mut v = vec![0.0; p + 1];
    for row in draws.rows() {
        statistic(row.as_slice().expect("standard layout"), t, c2, &mut v);
        for r in 0..=p {
            for c in 0..=p {
                acc[[r, c]] += v[r] * v[c];
            }
        }
    }
    acc / draws.nrows() as f64
}

/// Smallest eigenvalue of the autocorrelation of the centred statistics of
/// coordinate `t`.
pub fn lambda_min_check(
    field: ArrayView1<'_, f64>,
    population: &PopulationMatrix,
    t: usize,
    x_max: f64,
    method: &LambdaMethod,
) -> Result<LambdaEstimate> {
    Ok(lambda_min_all(field, population, &[t], x_max, method)?.remove(0))
}

/// As [`lambda_min_check`] for several coordinates, sharing the draws.
pub fn lambda_min_all(
    field: ArrayView1<'_, f64>,
    population: &PopulationMatrix,
    coords: &[usize],
    x_max: f64,
    method: &LambdaMethod,
) -> Result<Vec<LambdaEstimate>> {
    for &t in coords {
        check_inputs(field, population, t)?;
    }
    match method {
        LambdaMethod::Quadrature { nodes } => coords
            .iter()
            .map(|&t| {
                let m = autocorrelation_quadrature(field, population, t, x_max, *nodes)?;
                Ok(LambdaEstimate { value: min_eig(&m), method: MethodTag::Quadrature, std_error: 0.0 })
            })
            .collect(),
        LambdaMethod::MonteCarlo { gibbs, n_samples } => {
            let (_, c2) = centering_constants(x_max)?;
            let joint = JointParams::new(field.to_owned(), population.view().to_owned())?;
            let draws = gibbs_sample(&joint, *n_samples, x_max, gibbs)?;
            let per = gibbs.samples_per_chain;
            let batches = n_samples / per;
            Ok(coords
                .iter()
                .map(|&t| {
                    let value = min_eig(&autocorrelation_of_draws(draws.view(), t, c2));
                    let std_error = if batches >= 2 {
                        let vals: Vec<f64> = (0..batches)
                            .map(|b| {
                                min_eig(&autocorrelation_of_draws(draws.slice(s![b * per..(b + 1) * per, ..]), t, c2))
                            })
                            .collect();
                        let mean = vals.iter().sum::<f64>() / batches as f64;
                        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
                        (var / batches as f64).sqrt()
                    } else {
                        f64::NAN
                    };
                    LambdaEstimate { value, method: MethodTag::MonteCarlo, std_error }
                })
                .collect())
        }
    }
}

/// Spectral norm of a symmetric matrix.
fn spectral_norm_symmetric(m: ArrayView2<'_, f64>) -> f64 {
    let p = m.nrows();
    if p == 0 {
        return 0.0;
    }
    let dm = DMatrix::from_fn(p, p, |r, c| m[[r, c]]);
    SymmetricEigen::new(dm).eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Coupling bound `2 sqrt(2) x_max^2 ||abs(Theta)||_op` and whether it is at most 1/2.
pub fn dobrushin_bound(population: &PopulationMatrix, x_max: f64) -> (f64, bool) {
    let abs = population.view().mapv(f64::abs);
    let value = 2.0 * std::f64::consts::SQRT_2 * x_max * x_max * spectral_norm_symmetric(abs.view());
    (value, value <= 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProperLossReport {
    pub value_at_truth: f64,
    /// Smallest `L(perturbed) - L(truth)`.
    pub min_gap: f64,
    /// Central-difference gradient norm at the truth.
    pub gradient_norm: f64,
    pub n_perturb: usize,
}

/// Expected loss at the truth against random feasible perturbations of
/// entrywise size up to `magnitude`.
pub fn proper_loss_probe(
    truth: &ExtendedParams,
    bounds: &Bounds,
    n_perturb: usize,
    magnitude: f64,
    nodes: usize,
    seed: u64,
) -> Result<ProperLossReport> {
    if !(magnitude >= 0.0) {
        return Err(Error::invalid("magnitude must be nonnegative"));
    }
    let (n, p) = (truth.n(), truth.p());
    let x_max = bounds.x_max;
    let base = expected_loss_quadrature(truth, truth, x_max, nodes)?;
    let mut rng = stream_rng(derive_seed(seed, &[0x70726f70]), 0);
    let mut min_gap = f64::INFINITY;
    for _ in 0..n_perturb {
        let cand = if magnitude == 0.0 {
            truth.clone()
        } else {
            let mut d = Array2::from_shape_fn((p, p), |_| rng.random_range(-magnitude..=magnitude));
            for t in 0..p {
                for u in 0..t {
                    d[[t, u]] = d[[u, t]];
                }
            }
            let pop = project_population((&truth.population.view() + &d).view(), bounds, 20)?;
            let du = Array2::from_shape_fn((n, p), |_| rng.random_range(-magnitude..=magnitude));
            let units = project_unit_fields((&truth.units.view() + &du).view(), bounds.alpha);
            ExtendedParams::new(pop, UnitFields::new(units)?)?
        };
        min_gap = min_gap.min(expected_loss_quadrature(&cand, truth, x_max, nodes)? - base);
    }
    let gradient_norm = fd_gradient_norm(truth, x_max, nodes)?;
    Ok(ProperLossReport { value_at_truth: base, min_gap, gradient_norm, n_perturb })
}

/// Central differences of the expected loss over every free coordinate of
/// the candidate, evaluated at the truth.
pub fn fd_gradient_norm(truth: &ExtendedParams, x_max: f64, nodes: usize) -> Result<f64> {
    const H: f64 = 1e-5;
    let (n, p) = (truth.n(), truth.p());
    let eval = |pop: Array2<f64>, units: Array2<f64>| -> Result<f64> {
        let cand = ExtendedParams::new(PopulationMatrix::new(pop)?, UnitFields::new(units)?)?;
        expected_loss_quadrature(&cand, truth, x_max, nodes)
    };
    let mut sq = 0.0;
    for t in 0..p {
        for u in t..p {
            let shift = |sign: f64| {
                let mut m = truth.population.view().to_owned();
                m[[t, u]] += sign * H;
                if t != u {
                    m[[u, t]] += sign * H;
                }
                m
            };
            let g = (eval(shift(1.0), truth.units.view().to_owned())?
                - eval(shift(-1.0), truth.units.view().to_owned())?)
                / (2.0 * H);
            sq += g * g;
        }
    }
    for i in 0..n {
        for t in 0..p {
            let shift = |sign: f64| {
                let mut m = truth.units.view().to_owned();
                m[[i, t]] += sign * H;
                m
            };
            let g = (eval(truth.population.view().to_owned(), shift(1.0))?
                - eval(truth.population.view().to_owned(), shift(-1.0))?)
                / (2.0 * H);
            sq += g * g;
        }
    }
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    /// Unit fields swept (the first ones in order).
    pub max_units: usize,
    /// Used when `p` is small enough.
    pub nodes: usize,
    /// Used otherwise.
    pub gibbs: GibbsConfig,
    pub mc_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        let gibbs = GibbsConfig { burn_in: 200, thin: 2, grid_nodes: 128, samples_per_chain: 256, seed: 0 };
        DiagnosticsConfig { max_units: 4, nodes: 32, gibbs, mc_samples: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// Smallest estimate over the swept `(unit, t)` pairs.
    pub lambda_min: LambdaEstimate,
    pub lambda_min_unit: usize,
    pub lambda_min_coordinate: usize,
    pub dobrushin_value: f64,
    pub dobrushin_pass: bool,
    pub notes: Vec<String>,
}

/// Sweeps the first `max_units` fitted fields over every coordinate.
pub fn diagnose(fit: &ExtendedParams, x_max: f64, cfg: &DiagnosticsConfig) -> Result<DiagnosticsReport> {
    let (n, p) = (fit.n(), fit.p());
    if n == 0 || p == 0 {
        return Err(Error::invalid("nothing to diagnose"));
    }
    let units = n.min(cfg.max_units.max(1));
    let coords: Vec<usize> = (0..p).collect();
    let mut best: Option<(LambdaEstimate, usize, usize)> = None;
    for i in 0..units {
        let method = if p <= MAX_QUADRATURE_DIM {
            LambdaMethod::Quadrature { nodes: cfg.nodes }
        } else {
            LambdaMethod::MonteCarlo {
                gibbs: GibbsConfig { seed: derive_seed(cfg.gibbs.seed, &[i as u64]), ..cfg.gibbs.clone() },
                n_samples: cfg.mc_samples,
            }
        };
        let est = lambda_min_all(fit.units.row(i), &fit.population, &coords, x_max, &method)?;
        for (t, e) in est.into_iter().enumerate() {
            if best.as_ref().is_none_or(|b| e.value < b.0.value) {
                best = Some((e, i, t));
            }
        }
    }
    let (lambda_min, unit, coordinate) = best.expect("at least one unit and coordinate");
    let (dobrushin_value, dobrushin_pass) = dobrushin_bound(&fit.population, x_max);
    let mut notes = vec![format!(
        "lambda_min is a spot check over the first {units} unit fields and all {p} coordinates, not a certificate"
    )];
    if !dobrushin_pass {
        notes.push(format!("coupling bound {dobrushin_value:.4} exceeds 1/2"));
    }
    Ok(DiagnosticsReport {
        lambda_min,
        lambda_min_unit: unit,
        lambda_min_coordinate: coordinate,
        dobrushin_value,
        dobrushin_pass,
        notes,
    })
}

/// Rayleigh quotient `v^T M v / v^T v`.
pub fn rayleigh_quotient(m: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    let mv: Array1<f64> = m.dot(&v);
    v.dot(&mv) / v.dot(&v)
}
