mod common;

use common::*;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use unitfield::model::validate;
use unitfield::optimizer::{pgd_fit, project_l1_ball, project_population, project_unit_fields, FitConfig};
use unitfield::Bounds;

/// Grid search for the nearest point of the l1 ball, refined around the
/// incumbent until the grid spacing drops below `tol`.
fn l1_grid_oracle(v: &[f64], radius: f64, tol: f64) -> Vec<f64> {
    let d = v.len();
    let per_axis = 41usize;
    let mut centre = vec![0.0; d];
    let mut half = radius;
    loop {
        let step = 2.0 * half / (per_axis - 1) as f64;
        let mut best = (f64::INFINITY, centre.clone());
        let total = per_axis.pow(d as u32);
        for k in 0..total {
            let mut idx = k;
            let mut c = vec![0.0; d];
            for (j, cj) in c.iter_mut().enumerate() {
                *cj = centre[j] - half + (idx % per_axis) as f64 * step;
                idx /= per_axis;
            }
            if c.iter().map(|x| x.abs()).sum::<f64>() > radius {
                continue;
            }
            let dist: f64 = c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        centre = best.1;
        if step < tol {
            return centre;
        }
        half = 2.0 * step;
    }
}

#[test]
fn l1_ball_matches_grid_oracle() {
    let mut r = rng(17);
    let mut cases: Vec<(Vec<f64>, f64)> = vec![(vec![3.0, 3.0], 4.0), (vec![5.0, 0.0, 0.0], 1.0)];
    for _ in 0..10 {
        let d = r.random_range(2..=3);
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        cases.push((v, r.random_range(0.2..2.5)));
    }
    for (v, radius) in cases {
        let ours = project_l1_ball(Array1::from(v.clone()).view(), radius).unwrap();
        let oracle = l1_grid_oracle(&v, radius, 1e-6);
        let err = ours.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "v={v:?} r={radius}: {ours} vs {oracle:?}");
    }
    assert_eq!(project_l1_ball(array![3.0, 3.0].view(), 4.0).unwrap(), array![2.0, 2.0]);
    assert_eq!(project_l1_ball(array![1.0, -1.0].view(), 4.0).unwrap(), array![1.0, -1.0]);
    assert!(project_l1_ball(array![1.0].view(), -1.0).is_err());
}

#[test]
fn unit_field_projection_is_entrywise_nearest() {
    let mut r = rng(3);
    let m = uniform_matrix(&mut r, 5, 4, 10.0);
    let out = project_unit_fields(m.view(), 6.0);
    for (&a, &b) in m.iter().zip(&out) {
        // nearest point of [-6, 6] by scanning candidates
        let best = (-600..=600)
            .map(|k| k as f64 / 100.0)
            .chain([a.clamp(-6.0, 6.0)])
            .min_by(|x, y| (x - a).abs().total_cmp(&(y - a).abs()))
            .unwrap();
        assert!((b - best).abs() < 1e-12);
    }
}

/// Exact Euclidean projection onto symmetric matrices with `|X_tu| <= alpha`
/// and row l1 norms `<= beta`, by projected gradient ascent on the
/// multipliers of the row constraints. For fixed multipliers the inner
/// problem separates into clipped soft-thresholds.
fn exact_population_projection(m: &Array2<f64>, alpha: f64, beta: f64) -> Array2<f64> {
    let p = m.nrows();
    let s = (m + &m.t()) * 0.5;
    let primal = |lambda: &[f64]| {
        Array2::from_shape_fn((p, p), |(t, u)| {
            let shrink = if t == u { lambda[t] } else { 0.5 * (lambda[t] + lambda[u]) };
            let v = s[[t, u]];
            (v.signum() * (v.abs() - shrink).max(0.0)).clamp(-alpha, alpha)
        })
    };
    let mut lambda = vec![0.0; p];
    for _ in 0..2_000_000 {
        let x = primal(&lambda);
        let mut moved = 0.0f64;
        for t in 0..p {
            let g = x.row(t).iter().map(|v| v.abs()).sum::<f64>() - beta;
            let next = (lambda[t] + 0.05 * g).max(0.0);
            moved = moved.max((next - lambda[t]).abs());
            lambda[t] = next;
        }
        if moved < 1e-15 {
            break;
        }
    }
    primal(&lambda)
}

#[test]
fn population_projection_matches_exact_oracle() {
    let mut r = rng(29);
    let bounds = Bounds::new(1.0, 1.5, 1.0).unwrap();
    for _ in 0..10 {
        let m = uniform_matrix(&mut r, 3, 3, 2.0);
        let oracle = exact_population_projection(&m, 1.0, 1.5);
        assert!(validate_pop(&oracle, &bounds, 1e-9));
        let ours = project_population(m.view(), &bounds, 500).unwrap();
        let dist = (&ours.view() - &oracle).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dist < 1e-4, "distance {dist}\n{m}\n{}\n{oracle}", ours.view());
    }
}

fn validate_pop(m: &Array2<f64>, b: &Bounds, slack: f64) -> bool {
    m.iter().all(|v| v.abs() <= b.alpha + slack)
        && m.rows().into_iter().all(|r| r.iter().map(|v| v.abs()).sum::<f64>() <= b.beta + slack)
        && max_abs_diff(m, &m.t().to_owned()) == 0.0
}

#[test]
fn population_projection_examples() {
    let bounds = Bounds::new(6.0, 20.0, 1.0).unwrap();
    let feasible = array![[1.0, 0.5], [0.5, -2.0]];
    assert_eq!(project_population(feasible.view(), &bounds, 5).unwrap().view(), feasible);
    let m = array![[8.0, 0.0], [0.0, 1.0]];
    assert_eq!(project_population(m.view(), &bounds, 5).unwrap().view(), array![[6.0, 0.0], [0.0, 1.0]]);
}

#[test]
fn every_iterate_is_feasible() {
    let mut r = rng(41);
    let bounds = Bounds::new(0.5, 0.8, 1.0).unwrap();
    let data = uniform_data(&mut r, 6, 5, 1.0);
    for k in 1..=25 {
        let cfg = FitConfig { max_iters: k, tol_grad: 0.0, tol_obj: 0.0, ..FitConfig::default() };
        let (params, report) = pgd_fit(&data, &bounds, &cfg).unwrap();
        let v = validate(&params, &bounds);
        assert!(v.is_feasible(), "iterate {k}: {:?}", v.violations);
        assert!(report.feasible);
        assert!(report.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projectors_are_idempotent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = r.random_range(1..=6);
        let alpha = r.random_range(0.1..3.0);
        let beta = r.random_range(0.1..4.0);
        let bounds = Bounds::new(alpha, beta, 1.0).unwrap();

        let m = uniform_matrix(&mut r, 4, p, 5.0);
        let once = project_unit_fields(m.view(), alpha);
        prop_assert!(max_abs_diff(&once, &project_unit_fields(once.view(), alpha)) <= 1e-12);

        let v = Array1::from_shape_fn(p, |_| r.random_range(-5.0..5.0));
        let once = project_l1_ball(v.view(), beta).unwrap();
        let twice = project_l1_ball(once.view(), beta).unwrap();
        prop_assert!(max_abs_diff1(&once, &twice) <= 1e-12);

        let m = uniform_matrix(&mut r, p, p, 5.0);
        let once = project_population(m.view(), &bounds, 5).unwrap();
        let twice = project_population(once.view(), &bounds, 5).unwrap();
        prop_assert!(max_abs_diff(&once.view().to_owned(), &twice.view().to_owned()) <= 1e-12);
        prop_assert!(validate_pop(&once.view().to_owned(), &bounds, 1e-12));
    }
}
