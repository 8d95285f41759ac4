//! Euclidean projections onto the feasible parameter sets.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::{Bounds, PopulationMatrix};
use crate::scalar::Scalar;

/// Entrywise clip to `[-alpha, alpha]`.
pub fn project_unit_fields<T: Scalar>(m: ArrayView2<'_, T>, alpha: T) -> Array2<T> {
    m.mapv(|v| v.max(-alpha).min(alpha))
}

/// Projection onto `{c : ||c||_1 <= radius}` by sorting magnitudes and
/// soft-thresholding at the level that makes the l1 norm exactly `radius`.
pub fn project_l1_ball<T: Scalar>(v: ArrayView1<'_, T>, radius: T) -> Result<Array1<T>> {
    if !(radius >= T::zero()) {
        return Err(Error::invalid(format!("l1 radius must be nonnegative, got {radius}")));
    }
    let l1 = v.iter().fold(T::zero(), |acc, x| acc + x.abs());
    if l1 <= radius {
        return Ok(v.to_owned());
    }
    if radius == T::zero() {
        return Ok(Array1::zeros(v.len()));
    }
    let mut mags: Vec<T> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cumsum = T::zero();
    let mut threshold = T::zero();
    for (j, &m) in mags.iter().enumerate() {
        cumsum += m;
        let candidate = (cumsum - radius) / T::from_usize_exact(j + 1);
        if m > candidate {
            threshold = candidate;
        } else {
            break;
        }
    }
    Ok(v.mapv(|x| x.signum() * (x.abs() - threshold).max(T::zero())))
}

fn symmetrize<T: Scalar>(m: &mut Array2<T>) {
    let p = m.nrows();
    let half = T::lit(0.5);
    for t in 0..p {
        for u in t + 1..p {
            let v = (m[[t, u]] + m[[u, t]]) * half;
            m[[t, u]] = v;
            m[[u, t]] = v;
        }
    }
}

fn project_rows_l1<T: Scalar>(m: &Array2<T>, beta: T) -> Array2<T> {
    let mut out = m.clone();
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(m.axis_iter(Axis(0))) {
        dst.assign(&project_l1_ball(src, beta).expect("beta positive"));
    }
    out
}

/// Makes a symmetric matrix exactly feasible: clip entries to `alpha`, then
/// shrink entry `(t, u)` by `min(s_t, s_u)` where `s_t` rescales row `t` to
/// l1 norm `beta`. Symmetry is preserved and every row ends inside the ball.
fn enforce_feasible<T: Scalar>(m: &mut Array2<T>, bounds: &Bounds<T>) {
    symmetrize(m);
    m.mapv_inplace(|v| v.max(-bounds.alpha).min(bounds.alpha));
    let scale: Vec<T> = m
        .axis_iter(Axis(0))
        .map(|row| {
            let l1 = row.iter().fold(T::zero(), |acc, v| acc + v.abs());
            if l1 > bounds.beta {
                bounds.beta / l1
            } else {
                T::one()
            }
        })
        .collect();
    if scale.iter().all(|&s| s == T::one()) {
        return;
    }
    let p = m.nrows();
    for t in 0..p {
        for u in 0..p {
            m[[t, u]] = m[[t, u]] * scale[t].min(scale[u]);
        }
    }
}

/// Approximate projection onto symmetric matrices with entries in
/// `[-alpha, alpha]` and row l1 norms at most `beta`.
///
/// Runs `rounds` Dykstra cycles over the three sets (symmetric matrices,
/// entry box, row-wise l1 balls) and finishes with a pass that makes the
/// result exactly feasible. Feasible inputs are returned unchanged.
pub fn project_population<T: Scalar>(
    m: ArrayView2<'_, T>,
    bounds: &Bounds<T>,
    rounds: usize,
) -> Result<PopulationMatrix<T>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!("interaction matrix must be square, got {:?}", m.dim())));
    }
    bounds.check()?;
    let shape = m.dim();
    let mut x = m.to_owned();
    let mut inc_sym = Array2::<T>::zeros(shape);
    let mut inc_box = Array2::<T>::zeros(shape);
    let mut inc_row = Array2::<T>::zeros(shape);
    for _ in 0..rounds {
        let mut y = &x + &inc_sym;
        symmetrize(&mut y);
        inc_sym = &x + &inc_sym - &y;

        let shifted = &y + &inc_box;
        let z = shifted.mapv(|v| v.max(-bounds.alpha).min(bounds.alpha));
        inc_box = shifted - &z;

        let shifted = &z + &inc_row;
        let next = project_rows_l1(&shifted, bounds.beta);
        inc_row = shifted - &next;
        x = next;
    }
    enforce_feasible(&mut x, bounds);
    Ok(PopulationMatrix::from_symmetric(x))
}
