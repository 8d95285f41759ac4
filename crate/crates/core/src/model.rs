//! Domain types, constraint sets, centering constants and error metrics.
//!
//! Column layout of every `p`-dimensional quantity is fixed: covariates
//! occupy `0..p_v`, interventions `p_v..p_v + p_a`, outcomes the remainder.

use std::fmt;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest asymmetry `max |M - M^T|` silently removed on ingestion.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Constraint constants of the feasible parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds<T> {
    /// Entrywise bound on fields and interactions.
    pub alpha: T,
    /// Row l1 bound on the interaction matrix (diagonal included).
    pub beta: T,
    /// Half-width of the support `[-x_max, x_max]`.
    pub x_max: T,
}

impl<T: Scalar> Bounds<T> {
    pub fn new(alpha: T, beta: T, x_max: T) -> Result<Self> {
        let b = Bounds { alpha, beta, x_max };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("x_max", self.x_max)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Block sizes and unit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub p_v: usize,
    pub p_a: usize,
    pub p_y: usize,
    pub n: usize,
}

impl Dims {
    pub fn new(p_v: usize, p_a: usize, p_y: usize, n: usize) -> Result<Self> {
        let d = Dims { p_v, p_a, p_y, n };
        d.check()?;
        Ok(d)
    }

    /// All columns treated as outcomes.
    pub fn outcomes_only(p: usize, n: usize) -> Result<Self> {
        Self::new(0, 0, p, n)
    }

    pub fn check(&self) -> Result<()> {
        if self.p() == 0 {
            return Err(Error::invalid("p = p_v + p_a + p_y must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p_v + self.p_a + self.p_y
    }

    pub fn covariates(&self) -> Range<usize> {
        0..self.p_v
    }

    pub fn interventions(&self) -> Range<usize> {
        self.p_v..self.p_v + self.p_a
    }

    pub fn outcomes(&self) -> Range<usize> {
        self.p_v + self.p_a..self.p()
    }

    pub fn with_n(self, n: usize) -> Self {
        Dims { n, ..self }
    }
}

/// Uniform-distribution means of `x` and `x^2` on `[-x_max, x_max]`.
pub fn centering_constants<T: Scalar>(x_max: T) -> Result<(T, T)> {
    if !(x_max > T::zero()) || !x_max.is_finite() {
        return Err(Error::invalid(format!("x_max must be positive, got {x_max}")));
    }
    Ok((T::zero(), x_max * x_max / T::lit(3.0)))
}

/// Mean squared error `p^{-1} sum_t (a_t - b_t)^2`.
pub fn mse<T: Scalar>(estimate: ArrayView1<'_, T>, target: ArrayView1<'_, T>) -> Result<T> {
    if estimate.len() != target.len() {
        return Err(Error::invalid(format!(
            "mse length mismatch: {} vs {}",
            estimate.len(),
            target.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::invalid("mse of empty vectors"));
    }
    let ss = estimate
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .fold(T::zero(), |acc, v| acc + v);
    Ok(ss / T::from_usize_exact(estimate.len()))
}

/// Largest row l2 norm, `||M||_{2,inf}`.
pub fn norm_2inf<T: Scalar>(m: ArrayView2<'_, T>) -> Result<T> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::invalid("(2,inf) norm of an empty matrix"));
    }
    Ok(m.axis_iter(Axis(0))
        .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt())
        .fold(T::zero(), T::max))
}

fn max_asymmetry<T: Scalar>(m: ArrayView2<'_, T>) -> T {
    let p = m.nrows();
    let mut worst = T::zero();
    for t in 0..p {
        for u in t + 1..p {
            worst = worst.max((m[[t, u]] - m[[u, t]]).abs());
        }
    }
    worst
}

/// Accepts a square matrix that is symmetric up to round-off and returns
/// its exactly symmetric part.
pub(crate) fn ingest_symmetric<T: Scalar>(m: Array2<T>, what: &str) -> Result<Array2<T>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!("{what} must be square, got {:?}", m.dim())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    let asym = max_asymmetry(m.view());
    if asym > T::lit(SYMMETRY_TOLERANCE) {
        return Err(Error::invalid(format!("{what} is not symmetric (max asymmetry {asym})")));
    }
    let mut out = m;
    let p = out.nrows();
    for t in 0..p {
        for u in t + 1..p {
            let v = (out[[t, u]] + out[[u, t]]) / T::lit(2.0);
            out[[t, u]] = v;
            out[[u, t]] = v;
        }
    }
    Ok(out)
}

/// The shared symmetric interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMatrix<T>(Array2<T>);

impl<T: Scalar> PopulationMatrix<T> {
    pub fn new(m: Array2<T>) -> Result<Self> {
        Ok(PopulationMatrix(ingest_symmetric(m, "interaction matrix")?))
    }

    pub fn zeros(p: usize) -> Self {
        PopulationMatrix(Array2::zeros((p, p)))
    }

    /// Caller guarantees exact symmetry.
    pub(crate) fn from_symmetric(m: Array2<T>) -> Self {
        debug_assert_eq!(max_asymmetry(m.view()), T::zero());
        PopulationMatrix(m)
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.0.view()
    }

    pub fn get(&self, t: usize, u: usize) -> T {
        self.0[[t, u]]
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }
}

/// Per-unit external fields; row `i` is the field of unit `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFields<T>(Array2<T>);

impl<T: Scalar> UnitFields<T> {
    pub fn new(m: Array2<T>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("unit fields have non-finite entries"));
        }
        Ok(UnitFields(m))
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        UnitFields(Array2::zeros((n, p)))
    }

    /// Every unit carries the same field.
    pub fn tied(field: ArrayView1<'_, T>, n: usize) -> Self {
        let p = field.len();
        let mut m = Array2::zeros((n, p));
        for mut row in m.rows_mut() {
            row.assign(&field);
        }
        UnitFields(m)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn p(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.0.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.0.row(i)
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }
}

/// Interaction matrix together with every unit field: the full optimization variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedParams<T> {
    pub population: PopulationMatrix<T>,
    pub units: UnitFields<T>,
}

impl<T: Scalar> ExtendedParams<T> {
    pub fn new(population: PopulationMatrix<T>, units: UnitFields<T>) -> Result<Self> {
        if population.p() != units.p() {
            return Err(Error::invalid(format!(
                "interaction matrix is {p}x{p} but unit fields have {} columns",
                units.p(),
                p = population.p()
            )));
        }
        Ok(ExtendedParams { population, units })
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        ExtendedParams { population: PopulationMatrix::zeros(p), units: UnitFields::zeros(n, p) }
    }

    pub fn n(&self) -> usize {
        self.units.n()
    }

    pub fn p(&self) -> usize {
        self.population.p()
    }
}

/// Observation matrix, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    x: Array2<T>,
    dims: Dims,
    x_max: T,
    support: T,
}

impl<T: Scalar> Dataset<T> {
    /// Entries must lie in the model support `[-x_max, x_max]`.
    pub fn new(x: Array2<T>, dims: Dims, x_max: T) -> Result<Self> {
        Self::with_support(x, dims, x_max, x_max)
    }

    /// Observations validated against a wider box `[-support, support]`
    /// while the loss keeps centering with the model support `x_max`.
    pub fn with_support(x: Array2<T>, dims: Dims, x_max: T, support: T) -> Result<Self> {
        dims.check()?;
        centering_constants(x_max)?;
        if support < x_max {
            return Err(Error::invalid("validation support narrower than model support"));
        }
        if x.dim() != (dims.n, dims.p()) {
            return Err(Error::invalid(format!(
                "data is {:?} but dims give {}x{}",
                x.dim(),
                dims.n,
                dims.p()
            )));
        }
        if let Some(((i, t), v)) =
            x.indexed_iter().find(|(_, v)| !v.is_finite() || v.abs() > support)
        {
            return Err(Error::invalid(format!(
                "observation ({i}, {t}) = {v} outside [-{support}, {support}]"
            )));
        }
        Ok(Dataset { x, dims, x_max, support })
    }

    pub fn n(&self) -> usize {
        self.dims.n
    }

    pub fn p(&self) -> usize {
        self.dims.p()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn x_max(&self) -> T {
        self.x_max
    }

    pub fn support(&self) -> T {
        self.support
    }

    pub fn x(&self) -> ArrayView2<'_, T> {
        self.x.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.x.row(i)
    }

    /// Dataset restricted to the given units, in the given order.
    pub fn select_units(&self, units: &[usize]) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::invalid("empty unit selection"));
        }
        if let Some(&bad) = units.iter().find(|&&i| i >= self.n()) {
            return Err(Error::invalid(format!("unit {bad} out of range")));
        }
        let x = self.x.select(Axis(0), units);
        Ok(Dataset { x, dims: self.dims.with_n(units.len()), x_max: self.x_max, support: self.support })
    }
}

/// Natural parameters `(phi, Phi)` of a joint pairwise density.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams<T> {
    pub phi: Array1<T>,
    pub interaction: PopulationMatrix<T>,
}

impl<T: Scalar> JointParams<T> {
    pub fn new(phi: Array1<T>, interaction: Array2<T>) -> Result<Self> {
        let interaction = PopulationMatrix::new(interaction)?;
        if phi.len() != interaction.p() {
            return Err(Error::invalid("phi length does not match interaction matrix"));
        }
        Ok(JointParams { phi, interaction })
    }

    pub fn p(&self) -> usize {
        self.phi.len()
    }

    /// The same model seen as every unit sharing the field `phi`.
    pub fn as_extended(&self, n: usize) -> ExtendedParams<T> {
        ExtendedParams {
            population: self.interaction.clone(),
            units: UnitFields::tied(self.phi.view(), n),
        }
    }
}

/// A single violated constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Asymmetry { row: usize, col: usize, magnitude: f64 },
    InteractionEntry { row: usize, col: usize, value: f64, bound: f64 },
    RowL1 { row: usize, norm: f64, bound: f64 },
    FieldEntry { unit: usize, node: usize, value: f64, bound: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Asymmetry { row, col, magnitude } => {
                write!(f, "interaction ({row},{col}) asymmetric by {magnitude:e}")
            }
            Violation::InteractionEntry { row, col, value, bound } => {
                write!(f, "interaction ({row},{col}) = {value} exceeds {bound}")
            }
            Violation::RowL1 { row, norm, bound } => {
                write!(f, "interaction row {row} has l1 norm {norm} > {bound}")
            }
            Violation::FieldEntry { unit, node, value, bound } => {
                write!(f, "field ({unit},{node}) = {value} exceeds {bound}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Row l1 sums are accepted up to this many ulps of `beta` per column.
const ROW_SLACK_ULPS: f64 = 4.0;

/// Lists every violated constraint of the product set (fields in the
/// `alpha` box, interaction symmetric, entry-bounded and row-l1-bounded).
pub fn validate<T: Scalar>(params: &ExtendedParams<T>, bounds: &Bounds<T>) -> FeasibilityReport {
    let mut report = validate_population(params.population.view(), bounds);
    let alpha = bounds.alpha;
    for ((unit, node), &v) in params.units.view().indexed_iter() {
        if !(v.abs() <= alpha) {
            report.violations.push(Violation::FieldEntry {
                unit,
                node,
                value: v.as_f64(),
                bound: alpha.as_f64(),
            });
        }
    }
    report
}

/// Constraint check for a bare interaction matrix.
pub fn validate_population<T: Scalar>(m: ArrayView2<'_, T>, bounds: &Bounds<T>) -> FeasibilityReport {
    let mut violations = Vec::new();
    let p = m.nrows();
    for t in 0..p {
        for u in t + 1..p {
            let d = (m[[t, u]] - m[[u, t]]).abs();
            if d > T::zero() || d.is_nan() {
                violations.push(Violation::Asymmetry { row: t, col: u, magnitude: d.as_f64() });
            }
        }
    }
    for ((row, col), &v) in m.indexed_iter() {
        if !(v.abs() <= bounds.alpha) {
            violations.push(Violation::InteractionEntry {
                row,
                col,
                value: v.as_f64(),
                bound: bounds.alpha.as_f64(),
            });
        }
    }
    let slack = T::one() + T::lit(ROW_SLACK_ULPS) * T::from_usize_exact(p.max(1)) * T::epsilon();
    for (row, r) in m.axis_iter(Axis(0)).enumerate() {
        let norm = r.iter().fold(T::zero(), |acc, v| acc + v.abs());
        if !(norm <= bounds.beta * slack) {
            violations.push(Violation::RowL1 { row, norm: norm.as_f64(), bound: bounds.beta.as_f64() });
        }
    }
    FeasibilityReport { violations }
}
