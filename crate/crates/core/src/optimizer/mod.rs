//! Projected gradient descent over the product of the field box and the
//! interaction-matrix set, with backtracking step sizes.

mod projection;

pub use projection::{project_l1_ball, project_population, project_unit_fields};

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossContext, LossGradient, UnitObjective};
use crate::model::{validate, Bounds, Dataset, ExtendedParams, PopulationMatrix, UnitFields};
use crate::scalar::Scalar;
use crate::summation::pairwise_sum_by;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub step_init: f64,
    pub tol_grad: f64,
    pub tol_obj: f64,
    pub backtrack_factor: f64,
    pub dykstra_rounds: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iters: 2000,
            step_init: 1.0,
            tol_grad: 1e-7,
            tol_obj: 1e-10,
            backtrack_factor: 0.5,
            dykstra_rounds: 5,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn check(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::invalid("backtrack_factor must lie in (0, 1)"));
        }
        if !(self.step_init > 0.0) || !(self.tol_grad >= 0.0) || !(self.tol_obj >= 0.0) {
            return Err(Error::invalid("step_init must be positive and tolerances nonnegative"));
        }
        if self.dykstra_rounds == 0 {
            return Err(Error::invalid("dykstra_rounds must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientMap,
    ObjectiveDecrease,
    MaxIterations,
    StepUnderflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_map_norm: f64,
    pub stop_reason: StopReason,
    pub feasible: bool,
    /// Loss at the start and after every accepted step.
    pub loss_trace: Vec<f64>,
}

/// Objective over a list of matrix blocks.
///
/// Each block carries a metric weight `w_b`: the inner product is
/// `sum_b w_b <a_b, c_b>` and `eval` returns the gradient in that metric
/// (the partial derivatives divided by `w_b`).
pub(crate) struct Problem<'a, T> {
    pub weights: Vec<T>,
    pub eval: Box<dyn Fn(&[Array2<T>]) -> Result<(T, Vec<Array2<T>>)> + Sync + 'a>,
    pub project: Box<dyn Fn(Vec<Array2<T>>) -> Result<Vec<Array2<T>>> + Sync + 'a>,
}

pub(crate) struct Descent<T> {
    pub point: Vec<Array2<T>>,
    pub report: FitReport,
}

fn weighted_dot<T: Scalar>(weights: &[T], a: &[Array2<T>], b: &[Array2<T>]) -> T {
    weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&w, (x, y))| {
            let xs = x.as_slice().expect("standard layout");
            let ys = y.as_slice().expect("standard layout");
            w * pairwise_sum_by(xs.len(), &|k| xs[k] * ys[k])
        })
        .fold(T::zero(), |acc, v| acc + v)
}

/// Projected gradient descent with Armijo backtracking on the gradient
/// mapping. Each iteration first tries `min(step_init, eta_prev / factor)`.
pub(crate) fn projected_descent<T: Scalar>(
    problem: &Problem<'_, T>,
    start: Vec<Array2<T>>,
    cfg: &FitConfig,
) -> Result<Descent<T>> {
    cfg.check()?;
    let factor = T::lit(cfg.backtrack_factor);
    let step_init = T::lit(cfg.step_init);
    let tiny_step = T::lit(1e-30);
    let two = T::lit(2.0);
    let slack = T::lit(4.0) * T::epsilon();

    let fail = |iteration: usize, err: Error, trace: &[T]| match err {
        e @ (Error::NumericOverflow { .. } | Error::NumericUnderflow(_)) => Error::NonFiniteObjective {
            iteration,
            cause: e.to_string(),
            trace: trace.iter().map(|v| v.as_f64()).collect(),
        },
        other => other,
    };

    let mut x = start;
    let mut trace: Vec<T> = Vec::new();
    let (mut f, mut g) = (problem.eval)(&x).map_err(|e| fail(0, e, &trace))?;
    if !f.is_finite() {
        return Err(fail(0, Error::NumericUnderflow(format!("initial loss {f}")), &trace));
    }
    trace.push(f);
    let mut eta = step_init;
    let mut grad_map = T::infinity();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    'outer: for k in 1..=cfg.max_iters {
        eta = (eta / factor).min(step_init);
        loop {
            let trial: Vec<Array2<T>> =
                x.iter().zip(&g).map(|(xb, gb)| xb - &(gb * eta)).collect();
            let y = (problem.project)(trial)?;
            let d: Vec<Array2<T>> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let d_sq = weighted_dot(&problem.weights, &d, &d);
            if d_sq == T::zero() {
                grad_map = T::zero();
                stop = StopReason::GradientMap;
                break 'outer;
            }
            let (fy, gy) = (problem.eval)(&y).map_err(|e| fail(k, e, &trace))?;
            if !fy.is_finite() {
                return Err(fail(k, Error::NumericUnderflow(format!("loss {fy}")), &trace));
            }
            let model = f + weighted_dot(&problem.weights, &g, &d) + d_sq / (two * eta);
            if fy <= f && fy <= model + slack * f.abs() {
                let decrease = f - fy;
                grad_map = d_sq.sqrt() / eta;
                x = y;
                f = fy;
                g = gy;
                trace.push(f);
                iterations = k;
                if grad_map <= T::lit(cfg.tol_grad) {
                    stop = StopReason::GradientMap;
                    break 'outer;
                }
                if decrease <= T::lit(cfg.tol_obj) {
                    stop = StopReason::ObjectiveDecrease;
                    break 'outer;
                }
                break;
            }
            eta = eta * factor;
            if eta < tiny_step {
                stop = StopReason::StepUnderflow;
                break 'outer;
            }
        }
    }

    Ok(Descent {
        point: x,
        report: FitReport {
            iterations,
            final_loss: f.as_f64(),
            grad_map_norm: grad_map.as_f64(),
            stop_reason: stop,
            feasible: true,
            loss_trace: trace.iter().map(|v| v.as_f64()).collect(),
        },
    })
}

/// Gradient of a symmetric-matrix function in the Frobenius metric: the
/// derivative with respect to the shared entry `(t, u)` is split equally
/// between the two mirrored positions.
fn frobenius_gradient<T: Scalar>(d_population: &Array2<T>) -> Array2<T> {
    let half = T::lit(0.5);
    Array2::from_shape_fn(d_population.dim(), |(t, u)| {
        if t == u {
            d_population[[t, u]]
        } else {
            d_population[[t, u]] * half
        }
    })
}

fn split_gradient<T: Scalar>(g: LossGradient<T>) -> (Array2<T>, Array2<T>) {
    (frobenius_gradient(&g.d_population), g.d_units)
}

/// Joint fit of the interaction matrix and every unit field, started from zero.
///
/// The unit block has metric weight `1/n`, so each unit field steps along
/// the gradient of that unit's own loss.
pub fn pgd_fit<T: Scalar>(
    data: &Dataset<T>,
    bounds: &Bounds<T>,
    cfg: &FitConfig,
) -> Result<(ExtendedParams<T>, FitReport)> {
    bounds.check()?;
    let ctx = LossContext::new(data);
    let (n, p) = (data.n(), data.p());
    let rounds = cfg.dykstra_rounds;
    let n_t = T::from_usize_exact(n);
    let problem = Problem {
        weights: vec![T::one(), T::one() / n_t],
        eval: Box::new(|blocks: &[Array2<T>]| {
            let params = ExtendedParams {
                population: PopulationMatrix::from_symmetric(blocks[0].clone()),
                units: UnitFields::new(blocks[1].clone())?,
            };
            let (v, g) = ctx.value_and_gradient(&params)?;
            let (gp, gu) = split_gradient(g);
            Ok((v, vec![gp, gu * n_t]))
        }),
        project: Box::new(move |blocks: Vec<Array2<T>>| {
            let pop = project_population(blocks[0].view(), bounds, rounds)?.into_inner();
            let units = project_unit_fields(blocks[1].view(), bounds.alpha);
            Ok(vec![pop, units])
        }),
    };
    let start = vec![Array2::zeros((p, p)), Array2::zeros((n, p))];
    let Descent { mut point, mut report } = projected_descent(&problem, start, cfg)?;
    let units = point.pop().expect("two blocks");
    let pop = point.pop().expect("two blocks");
    let params = ExtendedParams {
        population: PopulationMatrix::from_symmetric(pop),
        units: UnitFields::new(units)?,
    };
    report.feasible = validate(&params, bounds).is_feasible();
    Ok((params, report))
}

/// Fit with every unit tied to one field `phi`.
///
/// The field steps along the average of the per-unit loss gradients, which
/// matches `pgd_fit` step for step when every unit holds the same row.
pub fn pgd_fit_shared<T: Scalar>(
    data: &Dataset<T>,
    bounds: &Bounds<T>,
    cfg: &FitConfig,
) -> Result<(Array1<T>, PopulationMatrix<T>, FitReport)> {
    bounds.check()?;
    let ctx = LossContext::new(data);
    let (n, p) = (data.n(), data.p());
    let rounds = cfg.dykstra_rounds;
    let problem = Problem {
        weights: vec![T::one(), T::one()],
        eval: Box::new(|blocks: &[Array2<T>]| {
            let params = ExtendedParams {
                population: PopulationMatrix::from_symmetric(blocks[0].clone()),
                units: UnitFields::tied(blocks[1].row(0), n),
            };
            let (v, g) = ctx.value_and_gradient(&params)?;
            let (gp, gu) = split_gradient(g);
            let mean = Array2::from_shape_fn((1, p), |(_, t)| pairwise_sum_by(n, &|i| gu[[i, t]]));
            Ok((v, vec![gp, mean]))
        }),
        project: Box::new(move |blocks: Vec<Array2<T>>| {
            let pop = project_population(blocks[0].view(), bounds, rounds)?.into_inner();
            let field = project_unit_fields(blocks[1].view(), bounds.alpha);
            Ok(vec![pop, field])
        }),
    };
    let start = vec![Array2::zeros((p, p)), Array2::zeros((1, p))];
    let Descent { mut point, mut report } = projected_descent(&problem, start, cfg)?;
    let phi = point.pop().expect("two blocks").index_axis_move(Axis(0), 0);
    let pop = PopulationMatrix::from_symmetric(point.pop().expect("two blocks"));
    let params = ExtendedParams { population: pop.clone(), units: UnitFields::tied(phi.view(), 1) };
    report.feasible = validate(&params, bounds).is_feasible();
    Ok((phi, pop, report))
}

/// Minimizes one unit's loss over its field in the `alpha` box, starting at zero.
pub fn fit_unit_field<T: Scalar>(
    objective: &UnitObjective<T>,
    bounds: &Bounds<T>,
    cfg: &FitConfig,
) -> Result<(Array1<T>, FitReport)> {
    let p = objective.p();
    let alpha = bounds.alpha;
    let problem = Problem {
        weights: vec![T::one()],
        eval: Box::new(|blocks: &[Array2<T>]| {
            let (v, g) = objective.value_and_gradient(blocks[0].row(0))?;
            Ok((v, vec![Array2::from_shape_vec((1, p), g).expect("length p")]))
        }),
        project: Box::new(move |blocks: Vec<Array2<T>>| {
            Ok(vec![project_unit_fields(blocks[0].view(), alpha)])
        }),
    };
    let Descent { mut point, report } = projected_descent(&problem, vec![Array2::zeros((1, p))], cfg)?;
    Ok((point.pop().expect("one block").index_axis_move(Axis(0), 0), report))
}

/// Second stage: every unit field refit independently with the interaction
/// matrix fixed at `theta_hat`.
pub fn fit_unit_fields<T: Scalar>(
    theta_hat: &PopulationMatrix<T>,
    data: &Dataset<T>,
    bounds: &Bounds<T>,
    cfg: &FitConfig,
) -> Result<UnitFields<T>> {
    bounds.check()?;
    cfg.check()?;
    if theta_hat.p() != data.p() {
        return Err(Error::invalid("interaction matrix does not match data dimension"));
    }
    let rows: Vec<Result<Array1<T>>> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let obj = UnitObjective::new(theta_hat, data.row(i), data.x_max())?;
            Ok(fit_unit_field(&obj, bounds, cfg)?.0)
        })
        .collect();
    let mut out = Array2::zeros((data.n(), data.p()));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row?);
    }
    UnitFields::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::loss_value;
    use crate::model::Dims;
    use ndarray::array;

    fn bounds() -> Bounds<f64> {
        Bounds::new(2.0, 3.0, 1.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().check().is_ok());
        assert!(FitConfig { max_iters: 0, ..Default::default() }.check().is_err());
        assert!(FitConfig { backtrack_factor: 1.0, ..Default::default() }.check().is_err());
        let json = serde_json::to_string(&FitConfig::default()).unwrap();
        let back: FitConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, FitConfig::default());
        let partial: FitConfig = serde_json::from_str(r#"{"max_iters": 7}"#).unwrap();
        assert_eq!(partial.max_iters, 7);
        assert_eq!(partial.step_init, 1.0);
    }

    #[test]
    fn scalar_unit_field_is_at_the_box_edge() {
        let pop = PopulationMatrix::zeros(1);
        for (x, want) in [(0.4, 2.0), (-0.7, -2.0)] {
            let obj = UnitObjective::new(&pop, array![x].view(), 1.0).unwrap();
            let (field, _) = fit_unit_field(&obj, &bounds(), &FitConfig::default()).unwrap();
            assert!((field[0] - want).abs() < 1e-12, "x={x}: {}", field[0]);
        }
    }

    #[test]
    fn zero_observation_keeps_zero_field() {
        let d = Dataset::new(array![[0.0, 0.0], [0.5, -0.5]], Dims::outcomes_only(2, 2).unwrap(), 1.0).unwrap();
        let f = fit_unit_fields(&PopulationMatrix::zeros(2), &d, &bounds(), &FitConfig::default()).unwrap();
        assert_eq!(f.row(0), array![0.0, 0.0]);
        assert_eq!(f.row(1), array![2.0, -2.0]);
    }

    #[test]
    fn fit_descends_from_zero() {
        let d = Dataset::new(
            array![[0.1, -0.4, 0.9], [0.3, 0.2, -1.0], [-0.6, 0.5, 0.05]],
            Dims::outcomes_only(3, 3).unwrap(),
            1.0,
        )
        .unwrap();
        let (params, report) = pgd_fit(&d, &bounds(), &FitConfig::default()).unwrap();
        assert!(report.feasible);
        assert!(report.final_loss <= 3.0);
        assert_eq!(report.final_loss, loss_value(&params, &d).unwrap());
        assert!(report.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
