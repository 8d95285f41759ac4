//! Unit-level conditional outcome models and counterfactual means.
//!
//! For unit `i` under intervention `a_alt` the outcomes follow
//! `exp(psi^T y + y^T Psi y)` on `[-x_max, x_max]^{p_y}` with
//! `psi = theta_i^(y) + 2 Phi^(v,y)^T v_i + 2 Phi^(a,y)^T a_alt` and
//! `Psi = Phi^(y,y)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dims;
use crate::quadrature::GaussLegendre;
use crate::sampler::{gibbs_sample, GibbsConfig};
use crate::seeding::derive_seed;
use crate::{Dataset, ExtendedParams, JointParams, PopulationMatrix};

/// Largest outcome dimension handled by tensor quadrature.
pub const MAX_QUADRATURE_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeConditional {
    pub psi: Array1<f64>,
    pub psi_mat: Array2<f64>,
    pub x_max: f64,
}

impl OutcomeConditional {
    pub fn new(psi: Array1<f64>, psi_mat: Array2<f64>, x_max: f64) -> Result<Self> {
        let q = psi.len();
        if psi_mat.dim() != (q, q) {
            return Err(Error::invalid(format!("Psi is {:?}, expected {q}x{q}", psi_mat.dim())));
        }
        if !(x_max > 0.0 && x_max.is_finite()) {
            return Err(Error::invalid("x_max must be positive and finite"));
        }
        if psi.iter().chain(psi_mat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("conditional parameters must be finite"));
        }
        for t in 0..q {
            for u in 0..t {
                if psi_mat[[t, u]] != psi_mat[[u, t]] {
                    return Err(Error::invalid("Psi must be symmetric"));
                }
            }
        }
        Ok(OutcomeConditional { psi, psi_mat, x_max })
    }

    pub fn p_y(&self) -> usize {
        self.psi.len()
    }

    fn exponent(&self, y: &[f64]) -> f64 {
        let q = self.p_y();
        let mut s = 0.0;
        for t in 0..q {
            let mut inner = 0.0;
            for u in 0..q {
                inner += self.psi_mat[[t, u]] * y[u];
            }
            s += y[t] * (self.psi[t] + inner);
        }
        s
    }
}

/// Assembles the outcome conditional of one unit.
pub fn conditional_outcome_params(
    theta_unit: ArrayView1<'_, f64>,
    population: &PopulationMatrix,
    v: ArrayView1<'_, f64>,
    a_alt: ArrayView1<'_, f64>,
    dims: &Dims,
    x_max: f64,
) -> Result<OutcomeConditional> {
    let p = dims.p();
    if theta_unit.len() != p || population.p() != p {
        return Err(Error::invalid(format!(
            "field has {} entries and interaction is {}x{}, dims expect {p}",
            theta_unit.len(),
            population.p(),
            population.p()
        )));
    }
    if v.len() != dims.p_v || a_alt.len() != dims.p_a {
        return Err(Error::invalid(format!(
            "got {} covariates and {} interventions, dims expect {} and {}",
            v.len(),
            a_alt.len(),
            dims.p_v,
            dims.p_a
        )));
    }
    let theta = population.view();
    let (cov, int, out) = (dims.covariates(), dims.interventions(), dims.outcomes());
    let mut psi = theta_unit.slice(s![out.clone()]).to_owned();
    psi += &(theta.slice(s![cov, out.clone()]).t().dot(&v) * 2.0);
    psi += &(theta.slice(s![int, out.clone()]).t().dot(&a_alt) * 2.0);
    let psi_mat = theta.slice(s![out.clone(), out]).to_owned();
    OutcomeConditional::new(psi, psi_mat, x_max)
}

/// `E[y]` by tensor Gauss–Legendre quadrature with `nodes` points per axis.
pub fn mean_outcome_quadrature(cond: &OutcomeConditional, nodes: usize) -> Result<Array1<f64>> {
    Ok(quadrature_moments(cond, nodes)?.0)
}

/// Mean and normalizing constant.
pub fn quadrature_moments(cond: &OutcomeConditional, nodes: usize) -> Result<(Array1<f64>, f64)> {
    let q = cond.p_y();
    if q > MAX_QUADRATURE_DIM {
        return Err(Error::UnsupportedDimension(format!(
            "quadrature handles at most {MAX_QUADRATURE_DIM} outcomes, got {q}; use the Gibbs estimate"
        )));
    }
    let rule = GaussLegendre::new(nodes)?;
    let mut peak = f64::NEG_INFINITY;
    rule.for_each_tensor_point(q, cond.x_max, |y, _| peak = peak.max(cond.exponent(y)));
    let mut z = 0.0;
    let mut first = vec![0.0; q];
    rule.for_each_tensor_point(q, cond.x_max, |y, w| {
        let f = w * (cond.exponent(y) - peak).exp();
        z += f;
        for (acc, &yt) in first.iter_mut().zip(y) {
            *acc += f * yt;
        }
    });
    let log_z = z.ln() + peak;
    if !(z > 0.0) || !log_z.is_finite() {
        return Err(Error::NumericUnderflow(format!("outcome normalizer is {z} (log {log_z})")));
    }
    Ok((first.into_iter().map(|m| m / z).collect(), log_z.exp()))
}

/// Monte Carlo estimate of `E[y]` with batch-means standard errors, one
/// batch per chain.
pub fn mean_outcome_gibbs(
    cond: &OutcomeConditional,
    mc: &GibbsConfig,
    n_samples: usize,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if n_samples < 100 {
        return Err(Error::invalid(format!("need at least 100 samples, got {n_samples}")));
    }
    let joint = JointParams::new(cond.psi.clone(), cond.psi_mat.clone())?;
    let draws = gibbs_sample(&joint, n_samples, cond.x_max, mc)?;
    let mean = draws.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let per = mc.samples_per_chain;
    let full = n_samples / per;
    let q = cond.p_y();
    let stderr = if full >= 2 {
        let batch_means: Vec<Array1<f64>> = (0..full)
            .map(|b| draws.slice(s![b * per..(b + 1) * per, ..]).mean_axis(ndarray::Axis(0)).expect("nonempty"))
            .collect();
        let centre = batch_means.iter().fold(Array1::<f64>::zeros(q), |acc, m| acc + m) / full as f64;
        let var = batch_means.iter().fold(Array1::<f64>::zeros(q), |acc, m| acc + (m - &centre).mapv(|d| d * d))
            / (full - 1) as f64;
        var.mapv(|v| (v / full as f64).sqrt())
    } else {
        // a single batch: fall back to the iid formula
        let var = draws.var_axis(ndarray::Axis(0), 1.0);
        var.mapv(|v| (v / n_samples as f64).sqrt())
    };
    Ok((mean, stderr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    /// Quadrature nodes per outcome axis.
    pub nodes: usize,
    /// Sampler settings when there are more outcomes than quadrature allows.
    pub gibbs: GibbsConfig,
    pub mc_samples: usize,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        // few long chains: the outcome blocks are small and mix quickly
        let gibbs = GibbsConfig { burn_in: 100, thin: 2, grid_nodes: 128, samples_per_chain: 256, seed: 0 };
        CounterfactualConfig { nodes: 64, gibbs, mc_samples: 2048 }
    }
}

/// Counterfactual mean outcomes of every unit under `alt_interventions`
/// (`n x p_a`). Covariates come from the data unless `covariates`
/// (`n x p_v`, e.g. imputed values) is given.
pub fn estimate_counterfactuals(
    fit: &ExtendedParams,
    data: &Dataset,
    alt_interventions: ArrayView2<'_, f64>,
    covariates: Option<ArrayView2<'_, f64>>,
    cfg: &CounterfactualConfig,
) -> Result<Array2<f64>> {
    let dims = data.dims();
    let n = data.n();
    if fit.n() != n || fit.p() != data.p() {
        return Err(Error::invalid(format!(
            "fit has {} units of dimension {}, data has {n} of dimension {}",
            fit.n(),
            fit.p(),
            data.p()
        )));
    }
    if alt_interventions.dim() != (n, dims.p_a) {
        return Err(Error::invalid(format!(
            "interventions are {:?}, expected ({n}, {})",
            alt_interventions.dim(),
            dims.p_a
        )));
    }
    if let Some(c) = covariates {
        if c.dim() != (n, dims.p_v) {
            return Err(Error::invalid(format!("covariates are {:?}, expected ({n}, {})", c.dim(), dims.p_v)));
        }
    }
    let rows: Vec<Result<Array1<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let v = match &covariates {
                Some(c) => c.row(i),
                None => data.row(i).slice_move(s![dims.covariates()]),
            };
            let cond = conditional_outcome_params(
                fit.units.row(i),
                &fit.population,
                v,
                alt_interventions.row(i),
                &dims,
                data.x_max(),
            )?;
            if cond.p_y() <= MAX_QUADRATURE_DIM {
                mean_outcome_quadrature(&cond, cfg.nodes)
            } else {
                let mc = GibbsConfig { seed: derive_seed(cfg.gibbs.seed, &[i as u64]), ..cfg.gibbs.clone() };
                Ok(mean_outcome_gibbs(&cond, &mc, cfg.mc_samples)?.0)
            }
        })
        .collect();
    let mut out = Array2::zeros((n, dims.p_y));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row?);
    }
    Ok(out)
}
