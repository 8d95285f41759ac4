//! The pooled convex loss over all units and coordinates, its gradient,
//! and the per-node / per-unit decompositions.
//!
//! For unit `i` and coordinate `t` the loss term is `exp(e_it)` with
//!
//! ```text
//! e_it = -(theta_it + 2 sum_{u != t} Theta_tu x_iu) x_it - Theta_tt (x_it^2 - x_max^2 / 3)
//! ```
//!
//! and the loss is `(1/n) sum_i sum_t exp(e_it)`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{centering_constants, Dataset, ExtendedParams, PopulationMatrix};
use crate::quadrature::GaussLegendre;
use crate::scalar::Scalar;
use crate::summation::pairwise_sum_by;

/// Partial derivatives of the loss, shaped like [`ExtendedParams`].
///
/// `d_population[t][u]` (t != u) is the derivative with respect to the single
/// shared entry `Theta_tu = Theta_ut`, so it collects the terms of both node
/// `t` and node `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient<T> {
    pub d_population: Array2<T>,
    pub d_units: Array2<T>,
}

/// Data-dependent quantities reused across loss evaluations.
#[derive(Debug)]
pub struct LossContext<'a, T> {
    data: &'a Dataset<T>,
    /// `x_it^2 - x_max^2/3`
    centered_sq: Array2<T>,
}

fn check_shapes<T: Scalar>(params: &ExtendedParams<T>, data: &Dataset<T>) -> Result<()> {
    if params.p() != data.p() || params.n() != data.n() {
        return Err(Error::invalid(format!(
            "parameters are for n={}, p={} but data has n={}, p={}",
            params.n(),
            params.p(),
            data.n(),
            data.p()
        )));
    }
    Ok(())
}

fn overflow_check<T: Scalar>(e: T, unit: usize, node: usize) -> Result<T> {
    if e.is_finite() && e.abs() <= T::exp_limit() {
        Ok(e)
    } else {
        Err(Error::NumericOverflow { unit, node, exponent: e.as_f64() })
    }
}

impl<'a, T: Scalar> LossContext<'a, T> {
    pub fn new(data: &'a Dataset<T>) -> Self {
        let (_, c2) = centering_constants(data.x_max()).expect("dataset support validated");
        let centered_sq = data.x().mapv(|v| v * v - c2);
        LossContext { data, centered_sq }
    }

    pub fn data(&self) -> &Dataset<T> {
        self.data
    }

    /// Exponents of unit `i` for every coordinate.
    fn unit_exponents(
        &self,
        i: usize,
        fields: ArrayView1<'_, T>,
        theta: ArrayView2<'_, T>,
    ) -> Result<Vec<T>> {
        let x = self.data.row(i);
        let p = x.len();
        let two = T::lit(2.0);
        (0..p)
            .map(|t| {
                let mut s = T::zero();
                for u in 0..p {
                    if u != t {
                        s += theta[[t, u]] * x[u];
                    }
                }
                let e = -(fields[t] + two * s) * x[t] - theta[[t, t]] * self.centered_sq[[i, t]];
                overflow_check(e, i, t)
            })
            .collect()
    }

    /// `n x p` matrix of exponents; errors name the first offending unit.
    pub fn exponents(&self, params: &ExtendedParams<T>) -> Result<Array2<T>> {
        check_shapes(params, self.data)?;
        let theta = params.population.view();
        let fields = params.units.view();
        let rows: Vec<Result<Vec<T>>> = (0..self.data.n())
            .into_par_iter()
            .map(|i| self.unit_exponents(i, fields.row(i), theta))
            .collect();
        let mut out = Array2::zeros((self.data.n(), self.data.p()));
        for (i, row) in rows.into_iter().enumerate() {
            for (t, e) in row?.into_iter().enumerate() {
                out[[i, t]] = e;
            }
        }
        Ok(out)
    }

    fn weights(&self, params: &ExtendedParams<T>) -> Result<Array2<T>> {
        Ok(self.exponents(params)?.mapv(T::exp))
    }

    pub fn value(&self, params: &ExtendedParams<T>) -> Result<T> {
        let w = self.weights(params)?;
        Ok(total_over_units(&w))
    }

    pub fn node(&self, t: usize, params: &ExtendedParams<T>) -> Result<T> {
        if t >= self.data.p() {
            return Err(Error::invalid(format!("node {t} out of range for p={}", self.data.p())));
        }
        let w = self.weights(params)?;
        let n = self.data.n();
        Ok(pairwise_sum_by(n, &|i| w[[i, t]]) / T::from_usize_exact(n))
    }

    pub fn value_and_gradient(&self, params: &ExtendedParams<T>) -> Result<(T, LossGradient<T>)> {
        let w = self.weights(params)?;
        let value = total_over_units(&w);
        let n = self.data.n();
        let p = self.data.p();
        let inv_n = T::one() / T::from_usize_exact(n);
        let two = T::lit(2.0);
        let x = self.data.x();

        let d_units = Array2::from_shape_fn((n, p), |(i, t)| -inv_n * x[[i, t]] * w[[i, t]]);

        // column-major copies so the per-entry sums over units stream contiguously
        let xt = x.t().as_standard_layout().into_owned();
        let wt = w.t().as_standard_layout().into_owned();
        let sqt = self.centered_sq.t().as_standard_layout().into_owned();
        let upper: Vec<Vec<T>> = (0..p)
            .into_par_iter()
            .map(|t| {
                let xt_row = xt.row(t);
                let wt_row = wt.row(t);
                let mut row = Vec::with_capacity(p - t);
                let sq = sqt.row(t);
                row.push(-inv_n * pairwise_sum_by(n, &|i| sq[i] * wt_row[i]));
                for u in t + 1..p {
                    let xu = xt.row(u);
                    let wu = wt.row(u);
                    let s = pairwise_sum_by(n, &|i| xt_row[i] * xu[i] * (wt_row[i] + wu[i]));
                    row.push(-two * inv_n * s);
                }
                row
            })
            .collect();
        let mut d_population = Array2::zeros((p, p));
        for (t, row) in upper.into_iter().enumerate() {
            for (k, v) in row.into_iter().enumerate() {
                let u = t + k;
                d_population[[t, u]] = v;
                d_population[[u, t]] = v;
            }
        }
        Ok((value, LossGradient { d_population, d_units }))
    }
}

fn total_over_units<T: Scalar>(w: &Array2<T>) -> T {
    let (n, p) = w.dim();
    let flat = w.as_slice().expect("standard layout");
    pairwise_sum_by(n * p, &|k| flat[k]) / T::from_usize_exact(n)
}

/// The pooled loss `L`.
pub fn loss_value<T: Scalar>(params: &ExtendedParams<T>, data: &Dataset<T>) -> Result<T> {
    LossContext::new(data).value(params)
}

/// The `t`-th auxiliary objective; these sum to [`loss_value`].
pub fn loss_node<T: Scalar>(t: usize, params: &ExtendedParams<T>, data: &Dataset<T>) -> Result<T> {
    LossContext::new(data).node(t, params)
}

/// Loss of unit `i` with its field replaced by `field`; averaging over
/// units recovers [`loss_value`].
pub fn loss_unit<T: Scalar>(
    i: usize,
    field: ArrayView1<'_, T>,
    population: &PopulationMatrix<T>,
    data: &Dataset<T>,
) -> Result<T> {
    if i >= data.n() {
        return Err(Error::invalid(format!("unit {i} out of range for n={}", data.n())));
    }
    UnitObjective::new(population, data.row(i), data.x_max())?.value(field)
}

pub fn gradient<T: Scalar>(params: &ExtendedParams<T>, data: &Dataset<T>) -> Result<LossGradient<T>> {
    Ok(LossContext::new(data).value_and_gradient(params)?.1)
}

/// Loss of a single unit as a function of its field, the interaction matrix held fixed.
///
/// With `offset_t = 2 sum_{u != t} Theta_tu x_u x_t + Theta_tt (x_t^2 - x_max^2/3)`
/// the objective is `sum_t exp(-field_t x_t - offset_t)`.
#[derive(Debug, Clone)]
pub struct UnitObjective<T> {
    x: Vec<T>,
    offset: Vec<T>,
}

impl<T: Scalar> UnitObjective<T> {
    pub fn new(population: &PopulationMatrix<T>, x: ArrayView1<'_, T>, x_max: T) -> Result<Self> {
        let p = population.p();
        if x.len() != p {
            return Err(Error::invalid(format!("observation has {} entries, expected {p}", x.len())));
        }
        let (_, c2) = centering_constants(x_max)?;
        let theta = population.view();
        let two = T::lit(2.0);
        let offset = (0..p)
            .map(|t| {
                let mut s = T::zero();
                for u in 0..p {
                    if u != t {
                        s += theta[[t, u]] * x[u];
                    }
                }
                two * s * x[t] + theta[[t, t]] * (x[t] * x[t] - c2)
            })
            .collect();
        Ok(UnitObjective { x: x.to_vec(), offset })
    }

    pub fn p(&self) -> usize {
        self.x.len()
    }

    pub fn x(&self) -> &[T] {
        &self.x
    }

    fn terms(&self, field: ArrayView1<'_, T>) -> Result<Vec<T>> {
        if field.len() != self.p() {
            return Err(Error::invalid("field length does not match unit dimension"));
        }
        (0..self.p())
            .map(|t| overflow_check(-field[t] * self.x[t] - self.offset[t], 0, t).map(T::exp))
            .collect()
    }

    pub fn value(&self, field: ArrayView1<'_, T>) -> Result<T> {
        let w = self.terms(field)?;
        Ok(pairwise_sum_by(w.len(), &|t| w[t]))
    }

    /// Value and gradient with respect to the field.
    pub fn value_and_gradient(&self, field: ArrayView1<'_, T>) -> Result<(T, Vec<T>)> {
        let w = self.terms(field)?;
        let value = pairwise_sum_by(w.len(), &|t| w[t]);
        let grad = w.iter().zip(&self.x).map(|(&wt, &xt)| -xt * wt).collect();
        Ok((value, grad))
    }
}

/// Expected loss of `candidate` when every unit's observation is drawn from
/// the model `truth` restricted to `[-x_max, x_max]^p`, by tensor
/// Gauss–Legendre quadrature with `nodes` points per axis.
pub fn expected_loss_quadrature(
    candidate: &ExtendedParams<f64>,
    truth: &ExtendedParams<f64>,
    x_max: f64,
    nodes: usize,
) -> Result<f64> {
    let p = truth.p();
    if p > 2 {
        return Err(Error::UnsupportedDimension(format!(
            "expected loss quadrature supports p <= 2, got p={p}"
        )));
    }
    if nodes < 8 {
        return Err(Error::invalid(format!("need at least 8 quadrature nodes, got {nodes}")));
    }
    if candidate.p() != p || candidate.n() != truth.n() {
        return Err(Error::invalid("candidate and truth shapes differ"));
    }
    let (_, c2) = centering_constants(x_max)?;
    let rule = GaussLegendre::new(nodes)?;
    let n = truth.n();
    let mut total = 0.0;
    for i in 0..n {
        let field = truth.units.row(i);
        let th = truth.population.view();
        let cf = candidate.units.row(i);
        let ct = candidate.population.view();
        let mut points = Vec::new();
        rule.for_each_tensor_point(p, x_max, |x, w| {
            let mut log_density = 0.0;
            for t in 0..p {
                log_density += field[t] * x[t];
                for u in 0..p {
                    log_density += x[t] * th[[t, u]] * x[u];
                }
            }
            let mut l = 0.0;
            for t in 0..p {
                let mut s = 0.0;
                for u in 0..p {
                    if u != t {
                        s += ct[[t, u]] * x[u];
                    }
                }
                l += (-(cf[t] + 2.0 * s) * x[t] - ct[[t, t]] * (x[t] * x[t] - c2)).exp();
            }
            points.push((w, log_density, l));
        });
        let shift = points.iter().map(|&(_, ld, _)| ld).fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut num) = (0.0, 0.0);
        for (w, ld, l) in points {
            let d = w * (ld - shift).exp();
            z += d;
            num += d * l;
        }
        total += num / z;
    }
    Ok(total / n as f64)
}
