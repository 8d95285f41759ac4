//! Synthetic data: systematic-scan Gibbs sampling of truncated pairwise
//! densities, random positive definite interaction matrices, and the
//! additive measurement-error study design.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputation::BasisMatrix;
use crate::model::{validate_population, Dims};
use crate::{Bounds, Dataset, JointParams};
use crate::seeding::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Nodes of the per-coordinate inverse-CDF table.
    pub grid_nodes: usize,
    /// Retained draws per independent chain; fixes the chain layout so the
    /// output does not depend on the worker count.
    pub samples_per_chain: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig { burn_in: 500, thin: 10, seed: 0, grid_nodes: 512, samples_per_chain: 64 }
    }
}

impl GibbsConfig {
    pub fn check(&self) -> Result<()> {
        if self.grid_nodes < 64 {
            return Err(Error::invalid(format!("grid_nodes must be >= 64, got {}", self.grid_nodes)));
        }
        if self.thin == 0 || self.samples_per_chain == 0 {
            return Err(Error::invalid("thin and samples_per_chain must be positive"));
        }
        Ok(())
    }
}

/// Unnormalized per-coordinate conditional `x -> exp(eta x + q x^2)`.
pub fn conditional_density_unnorm(eta: f64, q: f64, x_max: f64) -> impl Fn(f64) -> f64 {
    move |x: f64| {
        debug_assert!(x.abs() <= x_max);
        (eta * x + q * x * x).exp()
    }
}

/// Piecewise-linear inverse CDF of `exp(eta x + q x^2)` on a uniform grid,
/// cumulated with the trapezoid rule. Buffers are reused across builds.
#[derive(Debug, Clone)]
pub struct InverseCdf {
    x_max: f64,
    step: f64,
    cdf: Vec<f64>,
    built_for: Option<(f64, f64)>,
}

impl InverseCdf {
    pub fn new(grid_nodes: usize, x_max: f64) -> Self {
        InverseCdf { x_max, step: 2.0 * x_max / (grid_nodes - 1) as f64, cdf: vec![0.0; grid_nodes], built_for: None }
    }

    fn node(&self, k: usize) -> f64 {
        -self.x_max + k as f64 * self.step
    }

    pub fn build(&mut self, eta: f64, q: f64) -> Result<()> {
        if !eta.is_finite() || !q.is_finite() {
            return Err(Error::NumericUnderflow(format!("non-finite conditional ({eta}, {q})")));
        }
        if self.built_for == Some((eta, q)) {
            return Ok(());
        }
        self.built_for = None;
        let log_density = |x: f64| eta * x + q * x * x;
        let mut peak = log_density(-self.x_max).max(log_density(self.x_max));
        if q < 0.0 {
            let vertex = -eta / (2.0 * q);
            if vertex.abs() < self.x_max {
                peak = peak.max(log_density(vertex));
            }
        }
        let m = self.cdf.len();
        let mut prev = (log_density(self.node(0)) - peak).exp();
        self.cdf[0] = 0.0;
        for k in 1..m {
            let cur = (log_density(self.node(k)) - peak).exp();
            self.cdf[k] = self.cdf[k - 1] + 0.5 * self.step * (prev + cur);
            prev = cur;
        }
        let total = self.cdf[m - 1];
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NumericUnderflow(format!(
                "conditional ({eta}, {q}) has normalization {total}"
            )));
        }
        for c in self.cdf.iter_mut() {
            *c /= total;
        }
        self.built_for = Some((eta, q));
        Ok(())
    }

    /// Table CDF at `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= -self.x_max {
            return 0.0;
        }
        if x >= self.x_max {
            return 1.0;
        }
        let pos = (x + self.x_max) / self.step;
        let k = (pos.floor() as usize).min(self.cdf.len() - 2);
        let frac = pos - k as f64;
        self.cdf[k] + frac * (self.cdf[k + 1] - self.cdf[k])
    }

    /// Inverse of the table CDF at `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1) - 1;
        let (lo, hi) = (self.cdf[k], self.cdf[k + 1]);
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        (self.node(k) + frac.clamp(0.0, 1.0) * self.step).clamp(-self.x_max, self.x_max)
    }

    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

/// One draw from `exp(eta x + q x^2)` on `[-x_max, x_max]`.
pub fn sample_coord(
    eta: f64,
    q: f64,
    x_max: f64,
    grid_nodes: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if grid_nodes < 2 || !(x_max > 0.0) {
        return Err(Error::invalid("need x_max > 0 and at least two grid nodes"));
    }
    let mut table = InverseCdf::new(grid_nodes, x_max);
    table.build(eta, q)?;
    Ok(table.draw(rng))
}

fn run_chain(
    params: &JointParams,
    x_max: f64,
    cfg: &GibbsConfig,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let p = params.p();
    let phi = &params.phi;
    let theta = params.interaction.view();
    let mut table = InverseCdf::new(cfg.grid_nodes, x_max);
    let mut state: Vec<f64> = (0..p).map(|_| rng.random_range(-x_max..x_max)).collect();
    let mut sweep = |state: &mut Vec<f64>, rng: &mut ChaCha8Rng| -> Result<()> {
        for t in 0..p {
            let mut s = 0.0;
            for u in 0..p {
                if u != t {
                    s += theta[[t, u]] * state[u];
                }
            }
            table.build(phi[t] + 2.0 * s, theta[[t, t]])?;
            state[t] = table.draw(rng);
        }
        Ok(())
    };
    for _ in 0..cfg.burn_in {
        sweep(&mut state, rng)?;
    }
    let mut out = Array2::zeros((draws, p));
    for r in 0..draws {
        for _ in 0..cfg.thin {
            sweep(&mut state, rng)?;
        }
        for (t, &v) in state.iter().enumerate() {
            out[[r, t]] = v;
        }
    }
    Ok(out)
}

/// `n_samples` approximate draws from `exp(phi^T w + w^T Phi w)` on
/// `[-x_max, x_max]^p`.
///
/// Draws come from independent chains of `samples_per_chain` retained
/// states each; chain `c` uses stream `c` of `cfg.seed`.
pub fn gibbs_sample(
    params: &JointParams,
    n_samples: usize,
    x_max: f64,
    cfg: &GibbsConfig,
) -> Result<Array2<f64>> {
    cfg.check()?;
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    if !(x_max > 0.0) {
        return Err(Error::invalid("x_max must be positive"));
    }
    let per = cfg.samples_per_chain;
    let chains = n_samples.div_ceil(per);
    let blocks: Vec<Result<Array2<f64>>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let draws = per.min(n_samples - c * per);
            let mut rng = stream_rng(cfg.seed, c as u64);
            run_chain(params, x_max, cfg, draws, &mut rng)
        })
        .collect();
    let mut out = Array2::zeros((n_samples, params.p()));
    for (c, block) in blocks.into_iter().enumerate() {
        let block = block?;
        let start = c * per;
        out.slice_mut(s![start..start + block.nrows(), ..]).assign(&block);
    }
    Ok(out)
}

/// Truth for the simulation studies.
#[derive(Debug, Clone)]
pub struct GeneratedTruth {
    pub joint: JointParams,
    pub kappa: f64,
    pub attempts: usize,
    /// Largest number of nonzeros in a row of the interaction matrix.
    pub max_row_l0: usize,
}

/// Margin of the row l1 budget reserved for the diagonal shift.
const DIAGONAL_SHIFT_FRACTION: f64 = 0.1;

/// Maps a symmetric positive semidefinite matrix into the feasible set and
/// makes it positive definite, in one pass: clip entries to `alpha`, scale
/// so the largest row l1 norm is `(1 - f) beta`, then add `f beta I`.
///
/// Fails when the clipped, scaled matrix has an eigenvalue below `-f beta`.
pub fn rescale_to_bounds(m: &Array2<f64>, bounds: &Bounds) -> Result<Array2<f64>> {
    let shift = DIAGONAL_SHIFT_FRACTION * bounds.beta;
    let clipped = m.mapv(|v| v.clamp(-bounds.alpha, bounds.alpha));
    let max_row = clipped
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if !(max_row > 0.0) {
        return Err(Error::invalid("cannot rescale a zero matrix"));
    }
    let mut out = clipped * ((bounds.beta - shift) / max_row);
    let p = out.nrows();
    for t in 0..p {
        out[[t, t]] += shift;
    }
    if min_eigenvalue(&out) <= 0.0 {
        return Err(Error::invalid("rescaled matrix is not positive definite"));
    }
    out.mapv_inplace(|v| v.clamp(-bounds.alpha, bounds.alpha));
    Ok(out)
}

pub(crate) fn min_eigenvalue(m: &Array2<f64>) -> f64 {
    let p = m.nrows();
    let dm = DMatrix::from_fn(p, p, |r, c| m[[r, c]]);
    SymmetricEigen::new(dm).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn random_psd(p: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // A = D + N with a dominant diagonal and about one off-diagonal entry per column
    let density = (1.0 / p as f64).min(1.0);
    let a = Array2::from_shape_fn((p, p), |(r, c)| {
        if r == c {
            rng.random_range(1.5..2.0)
        } else if rng.random::<f64>() < density {
            let z: f64 = StandardNormal.sample(rng);
            0.3 * z
        } else {
            0.0
        }
    });
    let mut m = a.t().dot(&a);
    // exact symmetry
    for t in 0..p {
        for u in t + 1..p {
            let v = 0.5 * (m[[t, u]] + m[[u, t]]);
            m[[t, u]] = v;
            m[[u, t]] = v;
        }
    }
    m
}

/// Truth `(phi = 1, Phi)` with `Phi` positive definite and feasible for
/// `bounds`; retries up to 50 seeds until the basis conditioning for `p_v`
/// corrupted covariates reaches `target_kappa`.
pub fn generate_spd_interaction(
    p: usize,
    p_v: usize,
    bounds: &Bounds,
    target_kappa: f64,
    seed: u64,
) -> Result<GeneratedTruth> {
    const ATTEMPTS: usize = 50;
    if p == 0 || p_v > p {
        return Err(Error::invalid(format!("need p >= 1 and p_v <= p, got p={p}, p_v={p_v}")));
    }
    bounds.check()?;
    let phi = Array1::ones(p);
    let mut best: Option<GeneratedTruth> = None;
    for attempt in 0..ATTEMPTS {
        let mut rng = stream_rng(seed, attempt as u64);
        let Ok(m) = rescale_to_bounds(&random_psd(p, &mut rng), bounds) else {
            continue;
        };
        if !validate_population(m.view(), bounds).is_feasible() {
            continue;
        }
        let joint = JointParams::new(phi.clone(), m)?;
        let kappa = BasisMatrix::build(joint.phi.view(), joint.interaction.view(), p_v)?.kappa;
        let max_row_l0 = joint
            .interaction
            .view()
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|v| **v != 0.0).count())
            .max()
            .unwrap_or(0);
        let candidate = GeneratedTruth { joint, kappa, attempts: attempt + 1, max_row_l0 };
        if kappa >= target_kappa {
            return Ok(candidate);
        }
        if best.as_ref().is_none_or(|b| kappa > b.kappa) {
            best = Some(candidate);
        }
    }
    Err(Error::GenerationFailure {
        attempts: ATTEMPTS,
        best_kappa: best.map_or(f64::NAN, |b| b.kappa),
    })
}

/// Ground truth of a measurement-error study.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub joint: JointParams,
    pub dims: Dims,
    pub x_max: f64,
    pub kappa: f64,
    /// `n x p_v`; zero rows exactly for clean units.
    pub delta_v: Array2<f64>,
    pub clean_mask: Vec<bool>,
    /// Draws before the covariate corruption.
    pub latent: Array2<f64>,
}

impl SimTruth {
    /// True field of unit `i`: `phi - 2 Phi_{v,.}^T delta_v_i`.
    pub fn unit_field(&self, i: usize) -> Array1<f64> {
        let mut field = self.joint.phi.clone();
        let theta = self.joint.interaction.view();
        for (j, &dv) in self.delta_v.row(i).iter().enumerate() {
            field.scaled_add(-2.0 * dv, &theta.row(j));
        }
        field
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySeeds {
    pub truth: u64,
    pub data: u64,
}

/// Measurement-error study: `n` Gibbs draws from the truth, with the
/// covariates of units `0..n/2` shifted by `Uniform[0.9, 1]^{p_v}` noise.
///
/// The observed dataset is validated against `[-(x_max + 1), x_max + 1]`
/// since shifted covariates leave the model support.
pub fn simulate_measurement_study(
    p: usize,
    p_v: usize,
    n: usize,
    bounds: &Bounds,
    target_kappa: f64,
    seeds: StudySeeds,
    gibbs: &GibbsConfig,
) -> Result<(Dataset, SimTruth)> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::invalid(format!("n must be positive and even, got {n}")));
    }
    if p_v >= p || (p - p_v) % 2 != 0 {
        return Err(Error::invalid(format!("need p_v < p and p - p_v even, got p={p}, p_v={p_v}")));
    }
    let half = (p - p_v) / 2;
    let dims = Dims::new(p_v, half, half, n)?;
    let truth = generate_spd_interaction(p, p_v, bounds, target_kappa, seeds.truth)?;
    let cfg = GibbsConfig { seed: seeds.data, ..gibbs.clone() };
    let latent = gibbs_sample(&truth.joint, n, bounds.x_max, &cfg)?;

    // stream past any chain index
    let mut rng = stream_rng(seeds.data, u64::MAX);
    let corrupted = n / 2;
    let delta_v = Array2::from_shape_fn((n, p_v), |(i, _)| {
        if i < corrupted {
            rng.random_range(0.9..=1.0)
        } else {
            0.0
        }
    });
    let mut x = latent.clone();
    x.slice_mut(s![.., ..p_v]).zip_mut_with(&delta_v, |a, &d| *a += d);
    let clean_mask = (0..n).map(|i| i >= corrupted).collect();
    let data = Dataset::with_support(x, dims, bounds.x_max, bounds.x_max + 1.0)?;
    Ok((
        data,
        SimTruth { joint: truth.joint, dims, x_max: bounds.x_max, kappa: truth.kappa, delta_v, clean_mask, latent },
    ))
}
