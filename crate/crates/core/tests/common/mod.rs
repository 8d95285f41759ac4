#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use unitfield::model::Dims;
use unitfield::{Bounds, Dataset, ExtendedParams, PopulationMatrix, UnitFields};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, h: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-h..=h))
}

/// Symmetric matrix with entries in `[-h, h]`.
pub fn symmetric_matrix(rng: &mut ChaCha8Rng, p: usize, h: f64) -> Array2<f64> {
    let mut m = Array2::zeros((p, p));
    for t in 0..p {
        for u in t..p {
            let v = rng.random_range(-h..=h);
            m[[t, u]] = v;
            m[[u, t]] = v;
        }
    }
    m
}

/// Random point of the feasible set: entries bounded by `alpha`, rows
/// rescaled into the `beta` ball.
pub fn feasible_params(rng: &mut ChaCha8Rng, n: usize, p: usize, bounds: &Bounds) -> ExtendedParams {
    let mut m = symmetric_matrix(rng, p, bounds.alpha);
    let worst = m.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    if worst > bounds.beta {
        m *= 0.999 * bounds.beta / worst;
    }
    let units = uniform_matrix(rng, n, p, bounds.alpha);
    ExtendedParams::new(PopulationMatrix::new(m).unwrap(), UnitFields::new(units).unwrap()).unwrap()
}

pub fn uniform_data(rng: &mut ChaCha8Rng, n: usize, p: usize, x_max: f64) -> Dataset {
    let x = uniform_matrix(rng, n, p, x_max);
    Dataset::new(x, Dims::outcomes_only(p, n).unwrap(), x_max).unwrap()
}

pub fn data_from(x: Array2<f64>, x_max: f64) -> Dataset {
    let (n, p) = x.dim();
    Dataset::new(x, Dims::outcomes_only(p, n).unwrap(), x_max).unwrap()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff1(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[[i, j]].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}
