mod common;

use common::*;
use ndarray::{array, s, Array1, Array2};
use rand::Rng;
use unitfield::imputation::{
    fit_measurement_error, imputation_metrics, impute_pipeline, BasisMatrix, ImputeConfig,
};
use unitfield::loss::UnitObjective;
use unitfield::optimizer::FitConfig;
use unitfield::quadrature::GaussLegendre;
use unitfield::sampler::{simulate_measurement_study, GibbsConfig, StudySeeds};
use unitfield::{Bounds, PopulationMatrix};

#[test]
fn kappa_matches_jacobi_eigenvalues() {
    let mut r = rng(9);
    for _ in 0..10 {
        let p = r.random_range(2..8);
        let p_v = r.random_range(0..p);
        let phi = Array1::from_shape_fn(p, |_| r.random_range(-2.0..2.0));
        let theta = symmetric_matrix(&mut r, p, 1.0);
        let basis = BasisMatrix::build(phi.view(), theta.view(), p_v).unwrap();
        let gram = basis.b.t().dot(&basis.b);
        let oracle = jacobi_eigenvalues(&gram)[0].max(0.0) / p as f64;
        assert!((basis.kappa - oracle).abs() < 1e-10, "{} vs {oracle}", basis.kappa);
        assert_eq!(basis.b.ncols(), p_v + 1);
    }
    let basis = BasisMatrix::build(array![1.0, 1.0, 1.0].view(), Array2::eye(3).view(), 1).unwrap();
    assert_eq!(basis.b, array![[1.0, -2.0], [1.0, 0.0], [1.0, 0.0]]);
}

fn toy() -> (Array1<f64>, PopulationMatrix, Bounds) {
    let theta = array![[0.6, 0.3], [0.3, 0.5]];
    (array![1.0, 1.0], PopulationMatrix::new(theta).unwrap(), Bounds::new(6.0, 4.0, 1.0).unwrap())
}

#[test]
fn single_coefficient_fit_matches_golden_section() {
    let (phi, pop, bounds) = toy();
    let basis = BasisMatrix::build(phi.view(), pop.view(), 1).unwrap();
    let rule = GaussLegendre::new(8).unwrap();
    let nodes = rule.nodes();
    for x in [array![nodes[1], nodes[6]], array![nodes[3], nodes[2]], array![-0.2, 0.9]] {
        let fit = fit_measurement_error(&basis, x.view(), &pop, &bounds, 1.0, &FitConfig::default()).unwrap();
        let objective = UnitObjective::new(&pop, x.view(), 1.0).unwrap();
        let f = |c: f64| objective.value(basis.combine(array![1.0, c].view()).view()).unwrap();
        let oracle = golden_section(f, -6.0, 6.0, 1e-10);
        assert!((fit.delta_v[0] - oracle).abs() < 1e-4, "x={x}: {} vs {oracle}", fit.delta_v[0]);
        assert_eq!(fit.coefficients[0], 1.0);
        assert_eq!(fit.field, basis.combine(fit.coefficients.view()));
    }
}

/// Expected unit loss of field `B [1; c]` when `x` follows the model with field `B [1; dv]`.
fn idealized_objective(basis: &BasisMatrix, pop: &PopulationMatrix, dv: f64, c: f64) -> f64 {
    let rule = GaussLegendre::new(48).unwrap();
    let truth = basis.combine(array![1.0, dv].view());
    let field = basis.combine(array![1.0, c].view());
    let theta = pop.view();
    let (mut z, mut acc) = (0.0, 0.0);
    rule.for_each_tensor_point(2, 1.0, |x, w| {
        let xv = array![x[0], x[1]];
        let density = (truth.dot(&xv) + xv.dot(&theta.dot(&xv))).exp() * w;
        let loss = UnitObjective::new(pop, xv.view(), 1.0).unwrap().value(field.view()).unwrap();
        z += density;
        acc += density * loss;
    });
    acc / z
}

#[test]
fn idealized_unit_objective_is_minimized_at_the_true_error() {
    let (phi, pop, _) = toy();
    let basis = BasisMatrix::build(phi.view(), pop.view(), 1).unwrap();
    for dv in [0.0, 0.95] {
        let grid: Vec<f64> = (0..=800).map(|k| -2.0 + k as f64 * 0.005).collect();
        let best = grid
            .iter()
            .copied()
            .min_by(|a, b| idealized_objective(&basis, &pop, dv, *a).total_cmp(&idealized_objective(&basis, &pop, dv, *b)))
            .unwrap();
        assert!((best - dv).abs() <= 0.005 + 1e-12, "dv={dv}: grid minimum at {best}");
    }
}

fn small_study(p: usize, p_v: usize, n: usize, seed: u64) -> (unitfield::Dataset, unitfield::sampler::SimTruth, Bounds) {
    let bounds = Bounds::new(6.0, 4.0, 1.0).unwrap();
    let seeds = StudySeeds { truth: seed, data: seed + 100 };
    let (data, truth) = simulate_measurement_study(p, p_v, n, &bounds, 0.15, seeds, &GibbsConfig::default()).unwrap();
    (data, truth, bounds)
}

#[test]
fn pipeline_structure() {
    let (data, truth, bounds) = small_study(8, 2, 256, 4);
    let cfg = ImputeConfig::default();
    let result = impute_pipeline(&data, &truth.clean_mask, &bounds, &cfg, Some(&truth)).unwrap();
    let basis = BasisMatrix::build(result.phi_hat.view(), result.theta_hat.view(), 2).unwrap();
    assert_eq!(basis.kappa, result.kappa);
    for i in 0..256 {
        if truth.clean_mask[i] {
            assert!(result.delta_v_hat.row(i).iter().all(|&v| v == 0.0));
            assert_eq!(result.fields.row(i), result.phi_hat);
        } else {
            let mut a = Array1::ones(3);
            a.slice_mut(s![1..]).assign(&result.delta_v_hat.row(i));
            assert_eq!(result.fields.row(i), basis.combine(a.view()));
        }
    }
    let m = result.metrics.clone().unwrap();
    assert_eq!(m, imputation_metrics(&result, &truth).unwrap());
    assert!(m.theta_matrix_2inf.is_finite() && m.max_field_mse.is_finite() && m.max_delta_v_sq.is_finite());
}

#[test]
fn all_clean_units_and_gates() {
    let (data, truth, bounds) = small_study(6, 2, 64, 2);
    let cfg = ImputeConfig { kappa_threshold: 1e6, ..ImputeConfig::default() };
    let result = impute_pipeline(&data, &vec![true; 64], &bounds, &cfg, None).unwrap();
    assert!(result.delta_v_hat.iter().all(|&v| v == 0.0));
    assert!(!result.warnings.is_empty());
    assert!(result.metrics.is_none());

    let mut mask = vec![false; 64];
    mask[0] = true;
    assert!(impute_pipeline(&data, &mask, &bounds, &cfg, None).is_err());
    assert!(impute_pipeline(&data, &truth.clean_mask[..10], &bounds, &cfg, None).is_err());
}

// Known failure: observed covariates live on a shifted support, so the unit
// loss is not proper in those coordinates and single-observation estimates
// spread over the whole alpha box. Run with `--ignored` to reproduce.
#[test]
#[ignore = "known failure: single-observation error estimates spread beyond [0, 1.5]"]
fn corrupted_units_recover_errors_inside_the_envelope() {
    let (data, truth, bounds) = small_study(64, 4, 1024, 10);
    let result = impute_pipeline(&data, &truth.clean_mask, &bounds, &ImputeConfig::default(), None).unwrap();
    let outside: Vec<f64> = (0..1024)
        .filter(|&i| !truth.clean_mask[i])
        .flat_map(|i| result.delta_v_hat.row(i).to_vec())
        .filter(|v| !(0.0..=1.5).contains(v))
        .collect();
    assert!(outside.is_empty(), "{} of 2048 entries outside [0, 1.5]", outside.len());
}
