//! Measurement-error imputation.
//!
//! Clean units share the field `phi`, so stage one fits `(phi, Phi)` on
//! them with tied fields. A corrupted unit's field is
//! `phi - 2 sum_j dv_j Phi_j`, a combination of the columns of
//! `B = [phi, -2 Phi_1, ..., -2 Phi_{p_v}]` with coefficients `[1; dv]`;
//! stage three fits those coefficients per unit.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::UnitObjective;
use crate::model::{mse, norm_2inf};
use crate::optimizer::{
    pgd_fit_shared, project_unit_fields, projected_descent, Descent, FitConfig, FitReport, Problem,
};
use crate::sampler::SimTruth;
use crate::{Bounds, Dataset, PopulationMatrix, UnitFields};

/// Basis `B` of corrupted-unit fields and its conditioning `kappa = lambda_min(B^T B) / p`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub b: Array2<f64>,
    pub kappa: f64,
}

impl BasisMatrix {
    pub fn build(phi: ArrayView1<'_, f64>, interaction: ArrayView2<'_, f64>, p_v: usize) -> Result<Self> {
        let p = phi.len();
        if interaction.dim() != (p, p) {
            return Err(Error::invalid(format!(
                "interaction is {:?}, expected {p}x{p}",
                interaction.dim()
            )));
        }
        if p_v > p {
            return Err(Error::invalid(format!("p_v = {p_v} exceeds p = {p}")));
        }
        let mut b = Array2::zeros((p, p_v + 1));
        b.column_mut(0).assign(&phi);
        for j in 0..p_v {
            b.column_mut(j + 1).assign(&interaction.row(j).mapv(|v| -2.0 * v));
        }
        let k = p_v + 1;
        let gram = DMatrix::from_fn(k, k, |r, c| b.column(r).dot(&b.column(c)));
        let lambda_min = SymmetricEigen::new(gram).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(BasisMatrix { b, kappa: lambda_min.max(0.0) / p as f64 })
    }

    pub fn p_v(&self) -> usize {
        self.b.ncols() - 1
    }

    /// `B a`.
    pub fn combine(&self, coefficients: ArrayView1<'_, f64>) -> Array1<f64> {
        self.b.dot(&coefficients)
    }
}

/// Estimates for one corrupted unit.
#[derive(Debug, Clone)]
pub struct UnitImputation {
    /// `[1; dv_hat]`.
    pub coefficients: Array1<f64>,
    pub delta_v: Array1<f64>,
    /// Exactly `B * coefficients`.
    pub field: Array1<f64>,
    pub report: FitReport,
}

/// Minimizes the unit loss of `x_i` over fields `B [1; c]` with `|c_j| <= alpha`.
pub fn fit_measurement_error(
    basis: &BasisMatrix,
    x_i: ArrayView1<'_, f64>,
    population: &PopulationMatrix,
    bounds: &Bounds,
    x_max: f64,
    cfg: &FitConfig,
) -> Result<UnitImputation> {
    let p_v = basis.p_v();
    let objective = UnitObjective::new(population, x_i, x_max)?;
    if basis.b.nrows() != objective.p() {
        return Err(Error::invalid("basis and observation dimensions differ"));
    }
    let with_lead = |free: ArrayView1<'_, f64>| {
        let mut a = Array1::ones(p_v + 1);
        a.slice_mut(s![1..]).assign(&free);
        a
    };
    let free_basis = basis.b.slice(s![.., 1..]);
    let alpha = bounds.alpha;
    let problem = Problem {
        weights: vec![1.0],
        eval: Box::new(|blocks: &[Array2<f64>]| {
            let field = basis.combine(with_lead(blocks[0].row(0)).view());
            let (v, g) = objective.value_and_gradient(field.view())?;
            let grad = free_basis.t().dot(&Array1::from(g));
            Ok((v, vec![grad.insert_axis(ndarray::Axis(0))]))
        }),
        project: Box::new(move |blocks: Vec<Array2<f64>>| Ok(vec![project_unit_fields(blocks[0].view(), alpha)])),
    };
    let Descent { point, report } = projected_descent(&problem, vec![Array2::zeros((1, p_v))], cfg)?;
    let coefficients = with_lead(point[0].row(0));
    let field = basis.combine(coefficients.view());
    Ok(UnitImputation { delta_v: coefficients.slice(s![1..]).to_owned(), coefficients, field, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeConfig {
    /// Stage-one fit on the clean units.
    pub fit: FitConfig,
    /// Per-unit coefficient fits.
    pub unit_fit: FitConfig,
    /// Below this `kappa` a conditioning warning is emitted.
    pub kappa_threshold: f64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig { fit: FitConfig::default(), unit_fit: FitConfig::default(), kappa_threshold: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationMetrics {
    /// `||Theta_hat - Phi*||_{2,inf}`
    pub theta_matrix_2inf: f64,
    /// `max_i MSE(theta_hat_i, theta*_i)`
    pub max_field_mse: f64,
    /// `max_i ||dv_hat_i - dv_i||^2`
    pub max_delta_v_sq: f64,
    /// `||phi_hat - phi*||_2`
    pub phi_l2: f64,
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub phi_hat: Array1<f64>,
    pub theta_hat: PopulationMatrix,
    pub fields: UnitFields,
    /// `n x p_v`; zero rows for clean units.
    pub delta_v_hat: Array2<f64>,
    pub kappa: f64,
    pub warnings: Vec<String>,
    pub stage_one: FitReport,
    pub metrics: Option<ImputationMetrics>,
}

/// Errors of an imputation against the simulation truth.
pub fn imputation_metrics(result: &ImputationResult, truth: &SimTruth) -> Result<ImputationMetrics> {
    let n = result.fields.n();
    if truth.delta_v.nrows() != n || truth.joint.p() != result.phi_hat.len() {
        return Err(Error::invalid("truth does not match the imputation shape"));
    }
    let diff = &result.theta_hat.view() - &truth.joint.interaction.view();
    let mut max_field_mse = 0.0f64;
    let mut max_delta_v_sq = 0.0f64;
    for i in 0..n {
        max_field_mse = max_field_mse.max(mse(result.fields.row(i), truth.unit_field(i).view())?);
        let d = &result.delta_v_hat.row(i) - &truth.delta_v.row(i);
        max_delta_v_sq = max_delta_v_sq.max(d.dot(&d));
    }
    let dphi = &result.phi_hat - &truth.joint.phi;
    Ok(ImputationMetrics {
        theta_matrix_2inf: norm_2inf(diff.view())?,
        max_field_mse,
        max_delta_v_sq,
        phi_l2: dphi.dot(&dphi).sqrt(),
    })
}

/// Full pipeline: tied fit on clean units, basis construction, and a
/// coefficient fit for every corrupted unit. Clean units get `phi_hat` and
/// a zero measurement error.
pub fn impute_pipeline(
    data: &Dataset,
    clean_mask: &[bool],
    bounds: &Bounds,
    cfg: &ImputeConfig,
    truth: Option<&SimTruth>,
) -> Result<ImputationResult> {
    let n = data.n();
    if clean_mask.len() != n {
        return Err(Error::invalid(format!("mask has {} entries for {n} units", clean_mask.len())));
    }
    let clean: Vec<usize> = (0..n).filter(|&i| clean_mask[i]).collect();
    if clean.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 clean units, got {}", clean.len())));
    }
    let clean_data = data.select_units(&clean)?;
    let (phi_hat, theta_hat, stage_one) = pgd_fit_shared(&clean_data, bounds, &cfg.fit)?;

    let p_v = data.dims().p_v;
    let basis = BasisMatrix::build(phi_hat.view(), theta_hat.view(), p_v)?;
    let mut warnings = Vec::new();
    if basis.kappa < cfg.kappa_threshold {
        warnings.push(format!(
            "basis conditioning kappa = {:.4} is below the threshold {}; measurement-error estimates may be unreliable",
            basis.kappa, cfg.kappa_threshold
        ));
    }

    let per_unit: Vec<Result<Option<UnitImputation>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if clean_mask[i] {
                Ok(None)
            } else {
                fit_measurement_error(&basis, data.row(i), &theta_hat, bounds, data.x_max(), &cfg.unit_fit).map(Some)
            }
        })
        .collect();
    let p = data.p();
    let mut fields = Array2::zeros((n, p));
    let mut delta_v_hat = Array2::zeros((n, p_v));
    for (i, unit) in per_unit.into_iter().enumerate() {
        match unit? {
            None => fields.row_mut(i).assign(&phi_hat),
            Some(u) => {
                fields.row_mut(i).assign(&u.field);
                delta_v_hat.row_mut(i).assign(&u.delta_v);
            }
        }
    }
    let mut result = ImputationResult {
        phi_hat,
        theta_hat,
        fields: UnitFields::new(fields)?,
        delta_v_hat,
        kappa: basis.kappa,
        warnings,
        stage_one,
        metrics: None,
    };
    if let Some(truth) = truth {
        result.metrics = Some(imputation_metrics(&result, truth)?);
    }
    Ok(result)
}
