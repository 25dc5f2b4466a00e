//! Parametrized state and channel families with derivative oracles.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix};
use crate::quantum::{self, DensityOperator, HermitianOperator, KrausChannel};

/// Central finite-difference step used whenever no analytic derivative exists.
pub const FD_STEP: f64 = 1e-5;
/// Step for second derivatives taken by differencing first derivatives.
pub const FD_STEP_SECOND: f64 = 1e-4;
/// Eigenvalues below this fraction of the largest are treated as kernel.
pub const KERNEL_THRESHOLD: f64 = 1e-10;
/// Kernel-block entries above this mean no SLD exists.
pub const M2_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterRegion {
    lower: Vec<f64>,
    upper: Vec<f64>,
    margin: f64,
    radius: Option<f64>,
}

impl ParameterRegion {
    pub fn new(bounds: Vec<(f64, f64)>, margin: f64) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidConfig("parameter region needs at least one coordinate".into()));
        }
        if !(margin >= 0.0) {
            return Err(Error::InvalidConfig(format!("margin {margin} must be non-negative")));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig(format!("coordinate {i}: bounds [{lo}, {hi}] are not an interval")));
            }
            if 2.0 * margin >= hi - lo {
                return Err(Error::InvalidConfig(format!("coordinate {i}: margin {margin} swallows the interval")));
            }
        }
        let (lower, upper) = bounds.into_iter().unzip();
        Ok(Self { lower, upper, margin, radius: None })
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::new(vec![(lo, hi)], 1e-3).expect("valid interval")
    }

    /// Additionally restricts the region to the open ball `‖θ‖ < radius`.
    pub fn with_ball(mut self, radius: f64) -> Self {
        self.radius = Some(radius);
        self
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn m(&self) -> usize {
        self.lower.len()
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.m()
            && theta.iter().all(|t| t.is_finite())
            && theta.iter().zip(&self.lower).all(|(t, lo)| t > lo)
            && theta.iter().zip(&self.upper).all(|(t, hi)| t < hi)
            && self.radius.is_none_or(|r| norm(theta) < r)
    }

    /// Projects onto `[lower + margin, upper - margin]` (and the shrunken
    /// ball when present).
    pub fn clip(&self, theta: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&t, (&lo, &hi))| {
                let t = if t.is_finite() { t } else { 0.5 * (lo + hi) };
                t.clamp(lo + self.margin, hi - self.margin)
            })
            .collect();
        if let Some(r) = self.radius {
            let limit = r - self.margin;
            let n = norm(&out);
            if n > limit {
                out.iter_mut().for_each(|t| *t *= limit / n);
            }
        }
        out
    }

    /// Validates membership and returns the clipped point.
    pub fn admit(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.m() {
            return Err(Error::DimensionMismatch { expected: self.m(), found: theta.len() });
        }
        if !self.contains(theta) {
            return Err(Error::OutsideRegion { theta: theta.to_vec() });
        }
        Ok(self.clip(theta))
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Intersection of two boxes with the same dimension.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        if self.m() != other.m() {
            return Err(Error::DimensionMismatch { expected: self.m(), found: other.m() });
        }
        let bounds = (0..self.m())
            .map(|i| (self.lower[i].max(other.lower[i]), self.upper[i].min(other.upper[i])))
            .collect();
        let mut region = Self::new(bounds, self.margin.max(other.margin))?;
        region.radius = match (self.radius, other.radius) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        Ok(region)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub type StateFn = Arc<dyn Fn(&[f64]) -> Result<DensityOperator> + Send + Sync>;
pub type DerivativeFn = Arc<dyn Fn(&[f64], usize) -> Result<HermitianOperator> + Send + Sync>;
pub type ChannelFn = Arc<dyn Fn(&[f64]) -> Result<KrausChannel> + Send + Sync>;
pub type ChoiDerivativeFn = Arc<dyn Fn(&[f64], usize) -> Result<HermitianOperator> + Send + Sync>;

/// Which closed form, if any, stands behind a model. Used to pick
/// specialised preliminary estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    QubitZ,
    QubitPhase { r: f64 },
    BlochEquator,
    Product,
    Power { copies: usize },
    Regularized,
    User,
    Custom,
}

/// A family `θ ↦ ρ_θ` over a parameter region.
#[derive(Clone)]
pub struct StateModel {
    name: String,
    kind: ModelKind,
    region: ParameterRegion,
    dim: usize,
    state_fn: StateFn,
    derivative_fn: Option<DerivativeFn>,
    fd_step: f64,
}

impl fmt::Debug for StateModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateModel")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("region", &self.region)
            .field("dim", &self.dim)
            .field("analytic_derivative", &self.derivative_fn.is_some())
            .finish()
    }
}

impl StateModel {
    pub fn new(
        name: impl Into<String>,
        region: ParameterRegion,
        dim: usize,
        state_fn: impl Fn(&[f64]) -> Result<DensityOperator> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ModelKind::Custom,
            region,
            dim,
            state_fn: Arc::new(state_fn),
            derivative_fn: None,
            fd_step: FD_STEP,
        }
    }

    pub fn with_derivative(
        mut self,
        derivative_fn: impl Fn(&[f64], usize) -> Result<HermitianOperator> + Send + Sync + 'static,
    ) -> Self {
        self.derivative_fn = Some(Arc::new(derivative_fn));
        self
    }

    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_region(mut self, region: ParameterRegion) -> Self {
        self.region = region;
        self
    }

    pub fn without_analytic_derivative(mut self) -> Self {
        self.derivative_fn = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn region(&self) -> &ParameterRegion {
        &self.region
    }

    pub fn m(&self) -> usize {
        self.region.m()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn has_analytic_derivative(&self) -> bool {
        self.derivative_fn.is_some()
    }

    pub fn state(&self, theta: &[f64]) -> Result<DensityOperator> {
        let theta = self.region.admit(theta)?;
        (self.state_fn)(&theta)
    }

    /// Evaluates the state function without region checks.
    pub(crate) fn state_raw(&self, theta: &[f64]) -> Result<DensityOperator> {
        (self.state_fn)(theta)
    }

    pub fn derivative(&self, theta: &[f64], i: usize) -> Result<HermitianOperator> {
        derivative(self, theta, i)
    }

    pub fn derivatives(&self, theta: &[f64]) -> Result<Vec<HermitianOperator>> {
        (0..self.m()).map(|i| derivative(self, theta, i)).collect()
    }

    /// Central finite difference regardless of any analytic closure.
    pub fn finite_difference(&self, theta: &[f64], i: usize) -> Result<HermitianOperator> {
        let theta = self.region.admit(theta)?;
        self.fd_at(&theta, i)
    }

    fn fd_at(&self, theta: &[f64], i: usize) -> Result<HermitianOperator> {
        if i >= self.m() {
            return Err(Error::InvalidParameter(format!("coordinate {i} out of range")));
        }
        let h = self.fd_step;
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let diff = (self.state_fn)(&plus)?.matrix() - (self.state_fn)(&minus)?.matrix();
        Ok(HermitianOperator::from_hermitian(diff.unscale(2.0 * h)))
    }

    /// `∂_i ∂_j ρ_θ` by central differencing of first derivatives.
    pub fn second_derivative(&self, theta: &[f64], i: usize, j: usize) -> Result<HermitianOperator> {
        let theta = self.region.admit(theta)?;
        let h = FD_STEP_SECOND;
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += h;
        minus[j] -= h;
        let first = |t: &[f64]| -> Result<HermitianOperator> {
            match &self.derivative_fn {
                Some(d) => d(t, i),
                None => self.fd_at(t, i),
            }
        };
        let diff = first(&plus)?.matrix() - first(&minus)?.matrix();
        Ok(HermitianOperator::from_hermitian(diff.unscale(2.0 * h)))
    }
}

/// `∂_i ρ_θ`: the analytic closure when present, otherwise a central
/// difference with the model's step.
pub fn derivative(model: &StateModel, theta: &[f64], i: usize) -> Result<HermitianOperator> {
    if i >= model.m() {
        return Err(Error::InvalidParameter(format!("coordinate {i} out of range for m = {}", model.m())));
    }
    let theta = model.region.admit(theta)?;
    match &model.derivative_fn {
        Some(d) => d(&theta, i),
        None => model.fd_at(&theta, i),
    }
}

pub fn qubit_z() -> StateModel {
    StateModel::new("qubit-z", ParameterRegion::interval(-1.0, 1.0), 2, |t| DensityOperator::bloch([0.0, 0.0, t[0]]))
        .with_derivative(|_, _| Ok(HermitianOperator::from_hermitian(linalg::pauli_z().scale(0.5))))
        .with_kind(ModelKind::QubitZ)
}

/// `e^{-iθσ_z/2} (I + r σ_x)/2 e^{iθσ_z/2}`.
pub fn qubit_phase(r: f64) -> Result<StateModel> {
    if !(0.0..=1.0).contains(&r) || r == 0.0 {
        return Err(Error::InvalidParameter(format!("qubit-phase radius {r} outside (0, 1]")));
    }
    let pi = std::f64::consts::PI;
    Ok(StateModel::new(format!("qubit-phase(r={r})"), ParameterRegion::interval(-pi, pi), 2, move |t| {
        DensityOperator::bloch([r * t[0].cos(), r * t[0].sin(), 0.0])
    })
    .with_derivative(move |t, _| {
        let m = linalg::pauli_x().scale(-r * t[0].sin()) + linalg::pauli_y().scale(r * t[0].cos());
        Ok(HermitianOperator::from_hermitian(m.scale(0.5)))
    })
    .with_kind(ModelKind::QubitPhase { r }))
}

/// `(I + θ¹σ_x + θ²σ_y)/2` on the open unit disk.
pub fn bloch_equator() -> StateModel {
    let region = ParameterRegion::new(vec![(-1.0, 1.0), (-1.0, 1.0)], 1e-3).expect("valid box").with_ball(1.0);
    StateModel::new("bloch-equator", region, 2, |t| DensityOperator::bloch([t[0], t[1], 0.0]))
        .with_derivative(|_, i| {
            let m = if i == 0 { linalg::pauli_x() } else { linalg::pauli_y() };
            Ok(HermitianOperator::from_hermitian(m.scale(0.5)))
        })
        .with_kind(ModelKind::BlochEquator)
}

/// `ρ_θ = ρ_θ^a ⊗ ρ_θ^b` with a shared parameter.
pub fn product(a: &StateModel, b: &StateModel) -> Result<StateModel> {
    let region = a.region.intersect(&b.region)?;
    let (ma, mb) = (a.clone(), b.clone());
    let (da, db) = (a.clone(), b.clone());
    let analytic = a.has_analytic_derivative() && b.has_analytic_derivative();
    let model = StateModel::new(format!("product({},{})", a.name, b.name), region, a.dim * b.dim, move |t| {
        Ok(ma.state_raw(t)?.tensor(&mb.state_raw(t)?))
    })
    .with_kind(ModelKind::Product);
    if !analytic {
        return Ok(model);
    }
    Ok(model.with_derivative(move |t, i| {
        let (ra, rb) = (da.state_raw(t)?, db.state_raw(t)?);
        let (pa, pb) = (
            da.derivative_fn.as_ref().expect("analytic")(t, i)?,
            db.derivative_fn.as_ref().expect("analytic")(t, i)?,
        );
        Ok(pa.tensor(&rb.as_hermitian()).add(&ra.as_hermitian().tensor(&pb)))
    }))
}

/// `ρ_θ^{⊗copies}` with the product-rule derivative.
pub fn tensor_power(model: &StateModel, copies: usize) -> Result<StateModel> {
    if copies == 0 {
        return Err(Error::InvalidParameter("tensor power needs at least one copy".into()));
    }
    if copies == 1 {
        return Ok(model.clone());
    }
    let base = model.clone();
    let deriv_base = model.clone();
    let dim = model.dim.pow(copies as u32);
    let out = StateModel::new(format!("{}^{copies}", model.name), model.region.clone(), dim, move |t| {
        let rho = base.state_raw(t)?;
        let mut acc = rho.clone();
        for _ in 1..copies {
            acc = acc.tensor(&rho);
        }
        Ok(acc)
    })
    .with_kind(ModelKind::Power { copies });
    Ok(out.with_derivative(move |t, i| {
        let rho = deriv_base.state_raw(t)?.as_hermitian();
        let d = match &deriv_base.derivative_fn {
            Some(f) => f(t, i)?,
            None => deriv_base.fd_at(t, i)?,
        };
        let mut total = HermitianOperator::zeros(rho.dim().pow(copies as u32));
        for slot in 0..copies {
            let mut term = if slot == 0 { d.clone() } else { rho.clone() };
            for k in 1..copies {
                term = term.tensor(if k == slot { &d } else { &rho });
            }
            total = total.add(&term);
        }
        Ok(total)
    }))
}

/// User model sampled on a one-dimensional θ-grid; linear interpolation
/// between knots, derivatives always by finite differences.
pub fn from_grid(thetas: Vec<f64>, states: Vec<DensityOperator>, region: Option<ParameterRegion>) -> Result<StateModel> {
    if thetas.len() < 2 || thetas.len() != states.len() {
        return Err(Error::InvalidGrid(format!(
            "grid needs at least two knots with one state each ({} thetas, {} states)",
            thetas.len(),
            states.len()
        )));
    }
    if thetas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidGrid("grid thetas must be strictly increasing".into()));
    }
    let dim = states[0].dim();
    if let Some(bad) = states.iter().find(|s| s.dim() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, found: bad.dim() });
    }
    let region = match region {
        Some(r) => r,
        None => ParameterRegion::new(vec![(thetas[0], thetas[thetas.len() - 1])], 1e-3)?,
    };
    if region.m() != 1 {
        return Err(Error::InvalidConfig("grid models are one-dimensional".into()));
    }
    let (lo, hi) = (thetas[0], thetas[thetas.len() - 1]);
    if region.lower()[0] < lo || region.upper()[0] > hi {
        return Err(Error::InvalidConfig("region extends beyond the grid".into()));
    }
    Ok(StateModel::new("user-grid", region, dim, move |t| {
        let x = t[0].clamp(lo, hi);
        let k = match thetas.iter().position(|&knot| knot >= x) {
            Some(0) => 1,
            Some(k) => k,
            None => thetas.len() - 1,
        };
        let w = (x - thetas[k - 1]) / (thetas[k] - thetas[k - 1]);
        states[k - 1].mix(&states[k], w)
    })
    .with_kind(ModelKind::User))
}

/// User model `ρ_θ = Σ_terms Π_i (θ^i)^{p_i} C_term`; derivatives by
/// finite differences.
pub fn from_polynomial(terms: Vec<(Vec<u32>, CMatrix)>, region: ParameterRegion) -> Result<StateModel> {
    let m = region.m();
    let first = terms.first().ok_or_else(|| Error::InvalidConfig("polynomial has no terms".into()))?;
    let dim = first.1.nrows();
    for (powers, coeff) in &terms {
        if powers.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: powers.len() });
        }
        if coeff.nrows() != dim || coeff.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: coeff.nrows() });
        }
    }
    let model = StateModel::new("user-polynomial", region, dim, move |t| {
        let mut acc = CMatrix::zeros(dim, dim);
        for (powers, coeff) in &terms {
            let w: f64 = powers.iter().zip(t).map(|(&p, &x)| x.powi(p as i32)).product();
            acc += coeff.scale(w);
        }
        DensityOperator::new(acc)
    })
    .with_kind(ModelKind::User);
    model.state(&model.region.center())?;
    Ok(model)
}

/// `ρ_{θ,ε} = (1-ε) ρ_θ + ε σ` for strictly positive `σ`.
pub fn regularize_model(model: &StateModel, eps: f64, sigma: &DensityOperator) -> Result<StateModel> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("regularization weight {eps} outside (0, 1)")));
    }
    if sigma.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, found: sigma.dim() });
    }
    let min = sigma.min_eigenvalue();
    if min <= 1e-12 {
        return Err(Error::StateNotPositive { min_eigenvalue: min });
    }
    let base = model.clone();
    let sigma_state = sigma.clone();
    let mut out = StateModel::new(format!("regularized({},{eps})", model.name), model.region.clone(), model.dim, move |t| {
        base.state_raw(t)?.mix(&sigma_state, eps)
    })
    .with_kind(ModelKind::Regularized);
    if let Some(d) = model.derivative_fn.clone() {
        out = out.with_derivative(move |t, i| Ok(d(t, i)?.scale(1.0 - eps)));
    }
    Ok(out)
}

/// Per-coordinate solvability of `∂_iρ = (Lρ + ρL)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct M2Check {
    pub m2_ok: Vec<bool>,
    /// Max-abs entry of the kernel–kernel block of `∂_iρ`, per coordinate.
    pub kernel_entries: Vec<f64>,
    pub rank: usize,
}

pub fn check_m2(model: &StateModel, theta: &[f64]) -> Result<M2Check> {
    let rho = model.state(theta)?;
    let (values, vectors) = linalg::hermitian_eigen(rho.matrix());
    let lmax = values.iter().cloned().fold(0.0, f64::max);
    let kernel: Vec<usize> = (0..values.len()).filter(|&k| values[k] < KERNEL_THRESHOLD * lmax).collect();
    let mut m2_ok = Vec::with_capacity(model.m());
    let mut kernel_entries = Vec::with_capacity(model.m());
    for i in 0..model.m() {
        let d = derivative(model, theta, i)?;
        let rotated = vectors.adjoint() * d.matrix() * &vectors;
        let mut worst: f64 = 0.0;
        for &j in &kernel {
            for &k in &kernel {
                worst = worst.max(rotated[(j, k)].norm());
            }
        }
        m2_ok.push(worst < M2_TOL);
        kernel_entries.push(worst);
    }
    Ok(M2Check { m2_ok, kernel_entries, rank: values.len() - kernel.len() })
}

/// Numeric counterparts of the model regularity constants.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityDiagnostics {
    /// Max trace norm of first and second derivatives over the grid.
    pub a1_estimate: f64,
    pub max_first_derivative_norm: f64,
    pub max_second_derivative_norm: f64,
    /// AND over the grid, per coordinate.
    pub m2_ok: Vec<bool>,
    pub grid_points: usize,
    pub notes: Vec<String>,
}

/// Evenly spaced one-dimensional grid including both endpoints.
pub fn grid_1d(lo: f64, hi: f64, step: f64) -> Result<Vec<Vec<f64>>> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::InvalidGrid(format!("grid {lo}:{hi}:{step} is empty")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| vec![lo + k as f64 * step]).collect())
}

pub fn estimate_regularity(model: &StateModel, grid: &[Vec<f64>]) -> Result<RegularityDiagnostics> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("no grid points".into()));
    }
    let mut first: f64 = 0.0;
    let mut second: f64 = 0.0;
    let mut m2_ok = vec![true; model.m()];
    let mut notes = Vec::new();
    for theta in grid {
        for i in 0..model.m() {
            first = first.max(derivative(model, theta, i)?.trace_norm());
            for j in 0..model.m() {
                second = second.max(model.second_derivative(theta, i, j)?.trace_norm());
            }
        }
        let check = check_m2(model, theta)?;
        for (i, ok) in check.m2_ok.iter().enumerate() {
            if !ok {
                if m2_ok[i] {
                    notes.push(format!("no SLD for coordinate {i} at θ = {theta:?}"));
                }
                m2_ok[i] = false;
            }
        }
    }
    if !model.has_analytic_derivative() {
        notes.push("derivatives by central finite differences".into());
    }
    Ok(RegularityDiagnostics {
        a1_estimate: first.max(second),
        max_first_derivative_norm: first,
        max_second_derivative_norm: second,
        m2_ok,
        grid_points: grid.len(),
        notes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelKind {
    Depolarizing,
    PhaseUnitary,
    Custom,
}

/// A family `θ ↦ Λ_θ` with Choi-matrix derivatives.
#[derive(Clone)]
pub struct ChannelModel {
    name: String,
    kind: ChannelKind,
    region: ParameterRegion,
    input_dim: usize,
    output_dim: usize,
    channel_fn: ChannelFn,
    choi_derivative_fn: Option<ChoiDerivativeFn>,
}

impl fmt::Debug for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChannelModel")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("region", &self.region)
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .finish()
    }
}

impl ChannelModel {
    pub fn new(
        name: impl Into<String>,
        region: ParameterRegion,
        input_dim: usize,
        output_dim: usize,
        channel_fn: impl Fn(&[f64]) -> Result<KrausChannel> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ChannelKind::Custom,
            region,
            input_dim,
            output_dim,
            channel_fn: Arc::new(channel_fn),
            choi_derivative_fn: None,
        }
    }

    pub fn with_choi_derivative(
        mut self,
        f: impl Fn(&[f64], usize) -> Result<HermitianOperator> + Send + Sync + 'static,
    ) -> Self {
        self.choi_derivative_fn = Some(Arc::new(f));
        self
    }

    pub fn with_kind(mut self, kind: ChannelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ChannelKind {
        &self.kind
    }

    pub fn region(&self) -> &ParameterRegion {
        &self.region
    }

    pub fn m(&self) -> usize {
        self.region.m()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn channel(&self, theta: &[f64]) -> Result<KrausChannel> {
        let theta = self.region.admit(theta)?;
        (self.channel_fn)(&theta)
    }

    pub fn choi(&self, theta: &[f64]) -> Result<HermitianOperator> {
        Ok(quantum::choi(&self.channel(theta)?))
    }

    /// `Choi(∂_i Λ_θ)`: analytic when available, else a central difference.
    pub fn choi_derivative(&self, theta: &[f64], i: usize) -> Result<HermitianOperator> {
        if i >= self.m() {
            return Err(Error::InvalidParameter(format!("coordinate {i} out of range")));
        }
        let theta = self.region.admit(theta)?;
        if let Some(f) = &self.choi_derivative_fn {
            return f(&theta, i);
        }
        let mut plus = theta.clone();
        let mut minus = theta;
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let diff = quantum::choi(&(self.channel_fn)(&plus)?).into_matrix()
            - quantum::choi(&(self.channel_fn)(&minus)?).into_matrix();
        Ok(HermitianOperator::from_hermitian(diff.unscale(2.0 * FD_STEP)))
    }

    /// The state family `θ ↦ Λ_θ(probe)`.
    pub fn output_model(&self, probe: &DensityOperator) -> Result<StateModel> {
        if probe.dim() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: probe.dim() });
        }
        let cm = self.clone();
        let cm_d = self.clone();
        let (p1, p2) = (probe.clone(), probe.clone());
        let dout = self.output_dim;
        Ok(StateModel::new(format!("{}-output", self.name), self.region.clone(), self.output_dim, move |t| {
            (cm.channel_fn)(t)?.apply_state(&p1)
        })
        .with_derivative(move |t, i| {
            let d = match &cm_d.choi_derivative_fn {
                Some(f) => f(t, i)?,
                None => {
                    let mut plus = t.to_vec();
                    let mut minus = t.to_vec();
                    plus[i] += FD_STEP;
                    minus[i] -= FD_STEP;
                    let diff = quantum::choi(&(cm_d.channel_fn)(&plus)?).into_matrix()
                        - quantum::choi(&(cm_d.channel_fn)(&minus)?).into_matrix();
                    HermitianOperator::from_hermitian(diff.unscale(2.0 * FD_STEP))
                }
            };
            Ok(HermitianOperator::from_hermitian(apply_choi(d.matrix(), p2.matrix(), dout)))
        }))
    }
}

/// Applies the linear map with Choi matrix `choi` (input ⊗ output order)
/// to `rho`: `Σ_jk ρ_jk · block(j, k)`.
pub fn apply_choi(choi: &CMatrix, rho: &CMatrix, output_dim: usize) -> CMatrix {
    let din = rho.nrows();
    let mut out = CMatrix::zeros(output_dim, output_dim);
    for j in 0..din {
        for k in 0..din {
            let block = choi.view((j * output_dim, k * output_dim), (output_dim, output_dim));
            out += block * rho[(j, k)];
        }
    }
    out
}

pub fn depolarizing() -> ChannelModel {
    ChannelModel::new("depolarizing", ParameterRegion::interval(0.0, 1.0), 2, 2, |t| KrausChannel::depolarizing(t[0]))
        .with_choi_derivative(|_, _| {
            // Choi(Λ_p) = (1-p)·Choi(id) + p·I/2
            let id_choi = quantum::choi(&KrausChannel::identity(2)).into_matrix();
            Ok(HermitianOperator::from_hermitian(linalg::identity(4).scale(0.5) - id_choi))
        })
        .with_kind(ChannelKind::Depolarizing)
}

/// `ρ ↦ U_θ ρ U_θ†` with `U_θ = diag(1, e^{iθ})`.
pub fn phase_unitary() -> ChannelModel {
    let pi = std::f64::consts::PI;
    ChannelModel::new("phase-unitary", ParameterRegion::interval(-pi, pi), 2, 2, |t| {
        KrausChannel::unitary(phase_gate(t[0]))
    })
    .with_choi_derivative(|t, _| {
        // Choi = v v† with v = |00⟩ + e^{iθ}|11⟩
        let mut v = nalgebra::DVector::zeros(4);
        v[0] = c(1.0, 0.0);
        v[3] = c(t[0].cos(), t[0].sin());
        let mut dv = nalgebra::DVector::zeros(4);
        dv[3] = c(-t[0].sin(), t[0].cos());
        let d = &dv * v.adjoint() + &v * dv.adjoint();
        Ok(HermitianOperator::from_hermitian(d))
    })
    .with_kind(ChannelKind::PhaseUnitary)
}

pub fn phase_gate(theta: f64) -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(theta.cos(), theta.sin())])
}

/// A built-in family: either a state model or a channel model.
#[derive(Debug, Clone)]
pub enum Model {
    State(StateModel),
    Channel(ChannelModel),
}

impl Model {
    pub fn into_state(self) -> Result<StateModel> {
        match self {
            Model::State(s) => Ok(s),
            Model::Channel(c) => Err(Error::InvalidConfig(format!("`{}` is a channel family, not a state model", c.name))),
        }
    }

    pub fn into_channel(self) -> Result<ChannelModel> {
        match self {
            Model::Channel(c) => Ok(c),
            Model::State(s) => Err(Error::InvalidConfig(format!("`{}` is a state model, not a channel family", s.name))),
        }
    }
}

pub const BUILTIN_NAMES: [&str; 6] = ["qubit-z", "qubit-phase", "bloch-equator", "product", "depolarizing", "phase-unitary"];

/// Looks up a built-in family. `params` is a JSON object: `{"r": 0.9}` for
/// `qubit-phase`, `{"a": <model cfg>, "b": <model cfg>}` for `product`.
pub fn builtin_model(name: &str, params: &Value) -> Result<Model> {
    let params = match params {
        Value::Null => BTreeMap::new(),
        Value::Object(map) => map.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        other => return Err(Error::InvalidParameter(format!("params must be an object, got {other}"))),
    };
    let number = |key: &str, default: f64| -> Result<f64> {
        match params.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| Error::InvalidParameter(format!("`{key}` must be a number"))),
        }
    };
    let reject_unknown = |allowed: &[&str]| -> Result<()> {
        match params.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::InvalidParameter(format!("unknown parameter `{k}` for `{name}`"))),
            None => Ok(()),
        }
    };
    match name {
        "qubit-z" => {
            reject_unknown(&[])?;
            Ok(Model::State(qubit_z()))
        }
        "qubit-phase" => {
            reject_unknown(&["r"])?;
            Ok(Model::State(qubit_phase(number("r", 1.0)?)?))
        }
        "bloch-equator" => {
            reject_unknown(&[])?;
            Ok(Model::State(bloch_equator()))
        }
        "product" => {
            reject_unknown(&["a", "b"])?;
            let part = |key: &str| -> Result<StateModel> {
                let cfg = params.get(key).ok_or_else(|| Error::InvalidParameter(format!("product needs `{key}`")))?;
                let name = cfg
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::InvalidParameter(format!("product `{key}` needs a name")))?;
                builtin_model(name, cfg.get("params").unwrap_or(&Value::Null))?.into_state()
            };
            Ok(Model::State(product(&part("a")?, &part("b")?)?))
        }
        "depolarizing" => {
            reject_unknown(&[])?;
            Ok(Model::Channel(depolarizing()))
        }
        "phase-unitary" => {
            reject_unknown(&[])?;
            Ok(Model::Channel(phase_unitary()))
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}
