//! SLD operators, Fisher information and locally unbiased estimators.

use std::fmt;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, RMatrix, C64};
use crate::models::{self, StateModel};
use crate::quantum::{self, HermitianOperator, Povm, NULL_BRANCH};

/// Scores above this on a zero-probability outcome break the support
/// condition.
pub const SCORE_TOL: f64 = 1e-12;
/// Finite-difference step for B-matrix checks.
pub const B_STEP: f64 = 1e-4;
/// Eigenvalue sums below this are treated as the kernel in SLD solves.
pub const SLD_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherKind {
    Classical,
    Sld,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    pub matrix: RMatrix,
    pub kind: FisherKind,
}

impl FisherMatrix {
    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        rows(&self.matrix)
    }
}

pub fn rows(m: &RMatrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Outcome probabilities and their θ-derivatives; `dprobs[i][ω]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeLaw {
    pub probs: Vec<f64>,
    pub dprobs: Vec<Vec<f64>>,
}

/// A finite-outcome measurement whose outcome law is computable from a
/// model. Outcomes are addressed by index `0..outcome_count()`.
pub trait Measurement: Send + Sync + fmt::Debug {
    fn outcome_count(&self) -> usize;

    fn law(&self, model: &StateModel, theta: &[f64]) -> Result<OutcomeLaw>;

    /// Probabilities only; implementations may skip derivative work.
    fn probabilities(&self, model: &StateModel, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.law(model, theta)?.probs)
    }

    fn outcome_name(&self, index: usize) -> String {
        index.to_string()
    }
}

impl Measurement for Povm {
    fn outcome_count(&self) -> usize {
        self.len()
    }

    fn law(&self, model: &StateModel, theta: &[f64]) -> Result<OutcomeLaw> {
        let rho = model.state(theta)?;
        let probs = quantum::outcome_distribution(&rho, self)?;
        let dprobs = model
            .derivatives(theta)?
            .iter()
            .map(|d| self.elements().map(|m| linalg::trace_product(d.matrix(), m.matrix())).collect())
            .collect();
        Ok(OutcomeLaw { probs, dprobs })
    }

    fn probabilities(&self, model: &StateModel, theta: &[f64]) -> Result<Vec<f64>> {
        quantum::outcome_distribution(&model.state(theta)?, self)
    }

    fn outcome_name(&self, index: usize) -> String {
        self.outcomes()[index].label.to_string()
    }
}

/// Draws outcome indices from a fixed distribution.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    dist: WeightedIndex<f64>,
}

impl OutcomeSampler {
    pub fn new(probs: &[f64]) -> Result<Self> {
        WeightedIndex::new(probs)
            .map(|dist| Self { dist })
            .map_err(|e| Error::InvalidParameter(format!("outcome law is not a distribution: {e}")))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

/// A measurement paired with an outcome-indexed estimate table.
#[derive(Debug, Clone)]
pub struct Estimator {
    measurement: Arc<dyn Measurement>,
    values: Vec<Vec<f64>>,
    value_bound: Option<f64>,
}

impl Estimator {
    pub fn new(measurement: Arc<dyn Measurement>, values: Vec<Vec<f64>>, value_bound: Option<f64>) -> Result<Self> {
        if values.len() != measurement.outcome_count() {
            return Err(Error::DimensionMismatch { expected: measurement.outcome_count(), found: values.len() });
        }
        let m = values.first().map_or(0, Vec::len);
        if let Some(bad) = values.iter().find(|v| v.len() != m) {
            return Err(Error::DimensionMismatch { expected: m, found: bad.len() });
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("estimator takes non-finite values".into()));
        }
        Ok(Self { measurement, values, value_bound })
    }

    /// `T(ω) ≡ value` on every outcome.
    pub fn constant(measurement: Arc<dyn Measurement>, value: &[f64]) -> Self {
        let values = vec![value.to_vec(); measurement.outcome_count()];
        Self { measurement, values, value_bound: Some(0.0) }
    }

    pub fn measurement(&self) -> &Arc<dyn Measurement> {
        &self.measurement
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, outcome: usize) -> &[f64] {
        &self.values[outcome]
    }

    pub fn value_bound(&self) -> Option<f64> {
        self.value_bound
    }

    pub fn m(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Largest pairwise distance between estimate values.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.values {
            for b in &self.values {
                d = d.max(distance(a, b));
            }
        }
        d
    }

    /// `E_θ[T]` and `B_{ij} = ∂_j E_θ[T^i]` from the analytic outcome law.
    pub fn moments(&self, model: &StateModel, theta: &[f64]) -> Result<(Vec<f64>, RMatrix)> {
        let law = self.measurement.law(model, theta)?;
        Ok((self.mean_under(&law.probs), self.b_from(&law)))
    }

    fn mean_under(&self, probs: &[f64]) -> Vec<f64> {
        let mut mean = vec![0.0; self.m()];
        for (p, v) in probs.iter().zip(&self.values) {
            for (acc, x) in mean.iter_mut().zip(v) {
                *acc += p * x;
            }
        }
        mean
    }

    fn b_from(&self, law: &OutcomeLaw) -> RMatrix {
        let m = self.m();
        let mut b = RMatrix::zeros(m, m);
        for (j, dp) in law.dprobs.iter().enumerate() {
            for (w, v) in self.values.iter().enumerate() {
                for i in 0..m {
                    b[(i, j)] += dp[w] * v[i];
                }
            }
        }
        b
    }

    /// `E_θ[T]`.
    pub fn mean(&self, model: &StateModel, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mean_under(&self.measurement.probabilities(model, theta)?))
    }

    /// B matrix by central differences of `E_θ[T]` with step `B_STEP`.
    pub fn b_matrix_fd(&self, model: &StateModel, theta: &[f64]) -> Result<RMatrix> {
        let m = self.m();
        let mut b = RMatrix::zeros(m, m);
        for j in 0..model.m() {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[j] += B_STEP;
            minus[j] -= B_STEP;
            let (ep, em) = (self.mean(model, &plus)?, self.mean(model, &minus)?);
            for i in 0..m {
                b[(i, j)] = (ep[i] - em[i]) / (2.0 * B_STEP);
            }
        }
        Ok(b)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetric logarithmic derivative `L_i` solving `∂_iρ = (Lρ + ρL)/2`.
pub fn sld(model: &StateModel, theta: &[f64], i: usize) -> Result<HermitianOperator> {
    let check = models::check_m2(model, theta)?;
    if !check.m2_ok.get(i).copied().unwrap_or(true) {
        return Err(Error::M2Violated { coordinate: i, kernel_entry: check.kernel_entries[i] });
    }
    let rho = model.state(theta)?;
    let d = models::derivative(model, theta, i)?;
    Ok(sld_from(rho.matrix(), d.matrix()))
}

fn sld_from(rho: &CMatrix, d: &CMatrix) -> HermitianOperator {
    let (values, vectors) = linalg::hermitian_eigen(rho);
    let rotated = vectors.adjoint() * d * &vectors;
    let n = values.len();
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let s = values[j] + values[k];
            if s > SLD_CUTOFF {
                l[(j, k)] = rotated[(j, k)] * C64::new(2.0 / s, 0.0);
            }
        }
    }
    HermitianOperator::from_hermitian(linalg::symmetrize(&(&vectors * l * vectors.adjoint())))
}

/// `J^S_{ij} = Re tr(ρ L_i L_j)`.
pub fn qfi_sld(model: &StateModel, theta: &[f64]) -> Result<FisherMatrix> {
    let m = model.m();
    let slds: Vec<HermitianOperator> = (0..m).map(|i| sld(model, theta, i)).collect::<Result<_>>()?;
    let rho = model.state(theta)?;
    let mut j = RMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = linalg::trace_product(rho.matrix(), &(slds[a].matrix() * slds[b].matrix()));
            j[(a, b)] = v;
            j[(b, a)] = v;
        }
    }
    Ok(FisherMatrix { matrix: j, kind: FisherKind::Sld })
}

/// Per-outcome score vectors `l(ω)`; outcomes off the support are flagged
/// and carry a zero score.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDerivative {
    pub values: Vec<Vec<f64>>,
    pub flagged: Vec<bool>,
    pub probs: Vec<f64>,
}

pub fn log_derivative(model: &StateModel, theta: &[f64], measurement: &dyn Measurement) -> Result<LogDerivative> {
    let law = measurement.law(model, theta)?;
    log_derivative_from(&law, model.m())
}

pub(crate) fn log_derivative_from(law: &OutcomeLaw, m: usize) -> Result<LogDerivative> {
    let count = law.probs.len();
    let mut values = vec![vec![0.0; m]; count];
    let mut flagged = vec![false; count];
    for w in 0..count {
        let p = law.probs[w];
        if p < NULL_BRANCH {
            flagged[w] = true;
            for i in 0..m {
                let score = law.dprobs[i][w];
                if score.abs() >= SCORE_TOL {
                    return Err(Error::SingularSupport { outcome: w, score });
                }
            }
            continue;
        }
        for (i, v) in values[w].iter_mut().enumerate() {
            *v = law.dprobs[i][w] / p;
        }
    }
    Ok(LogDerivative { values, flagged, probs: law.probs.clone() })
}

/// `J_{ij} = Σ_ω ∂_ip(ω) ∂_jp(ω) / p(ω)` over the support.
pub fn classical_fisher(model: &StateModel, theta: &[f64], measurement: &dyn Measurement) -> Result<FisherMatrix> {
    let l = log_derivative(model, theta, measurement)?;
    Ok(fisher_from_scores(&l, model.m()))
}

fn fisher_from_scores(l: &LogDerivative, m: usize) -> FisherMatrix {
    let mut j = RMatrix::zeros(m, m);
    for (p, v) in l.probs.iter().zip(&l.values) {
        for a in 0..m {
            for b in 0..m {
                j[(a, b)] += p * v[a] * v[b];
            }
        }
    }
    FisherMatrix { matrix: (&j + j.transpose()) * 0.5, kind: FisherKind::Classical }
}

/// `T(ω) = θ + J⁻¹ l(ω)`: the minimum-variance locally unbiased estimator
/// for a fixed measurement.
pub fn locally_unbiased_estimator(
    model: &StateModel,
    theta: &[f64],
    measurement: Arc<dyn Measurement>,
) -> Result<Estimator> {
    let theta = model.region().admit(theta)?;
    let l = log_derivative(model, &theta, measurement.as_ref())?;
    let j = fisher_from_scores(&l, model.m());
    let inv = linalg::gated_inverse(&j.matrix).map_err(|condition| Error::SingularFisher { condition })?;
    let values = l
        .values
        .iter()
        .map(|score| {
            let shift = &inv * nalgebra::DVector::from_column_slice(score);
            theta.iter().zip(shift.iter()).map(|(t, s)| t + s).collect()
        })
        .collect();
    let mut est = Estimator::new(measurement, values, None)?;
    est.value_bound = Some(est.diameter());
    Ok(est)
}

/// `T' = B⁻¹(T − E_{θ₀}[T]) + θ₀`.
pub fn rebias_estimator(est: &Estimator, model: &StateModel, theta0: &[f64]) -> Result<Estimator> {
    let theta0 = model.region().admit(theta0)?;
    let (mean, b) = est.moments(model, &theta0)?;
    let inv = linalg::gated_inverse(&b).map_err(|condition| Error::SingularB { condition })?;
    let values = est
        .values
        .iter()
        .map(|v| {
            let centered = nalgebra::DVector::from_iterator(v.len(), v.iter().zip(&mean).map(|(x, e)| x - e));
            let shifted = &inv * centered;
            theta0.iter().zip(shifted.iter()).map(|(t, s)| t + s).collect()
        })
        .collect();
    let mut out = Estimator::new(est.measurement.clone(), values, None)?;
    out.value_bound = Some(out.diameter());
    Ok(out)
}

/// Replaces every value farther than `radius` from `theta` by `theta`.
pub fn truncate_estimator(est: &Estimator, theta: &[f64], radius: f64) -> Result<Estimator> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("truncation radius {radius} must be positive")));
    }
    if theta.len() != est.m() {
        return Err(Error::DimensionMismatch { expected: est.m(), found: theta.len() });
    }
    let values = est
        .values
        .iter()
        .map(|v| if distance(v, theta) > radius { theta.to_vec() } else { v.clone() })
        .collect();
    let mut out = Estimator::new(est.measurement.clone(), values, None)?;
    out.value_bound = Some(out.diameter().min(2.0 * radius));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport {
    pub theta: Vec<f64>,
    pub mse: RMatrix,
    pub variance: RMatrix,
    pub bias: Vec<f64>,
    pub b_matrix: RMatrix,
    /// `n · Tr(G · mse)`.
    pub weighted_cost: f64,
    pub weighted_cost_stderr: f64,
    pub n: usize,
    /// Zero for exact enumeration.
    pub trials: usize,
    /// Per-entry standard error of `mse`; zero for exact enumeration.
    pub stderr: RMatrix,
}

/// Exact moments of `est` at `theta` by enumerating outcomes.
pub fn evaluate_exact(est: &Estimator, model: &StateModel, theta: &[f64], g: &RMatrix) -> Result<EstimationReport> {
    let m = est.m();
    if g.nrows() != m || g.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, found: g.nrows() });
    }
    let theta = model.region().admit(theta)?;
    let law = est.measurement.law(model, &theta)?;
    let mean = est.mean_under(&law.probs);
    let mut mse = RMatrix::zeros(m, m);
    let mut variance = RMatrix::zeros(m, m);
    for (p, v) in law.probs.iter().zip(&est.values) {
        for a in 0..m {
            for b in 0..m {
                mse[(a, b)] += p * (v[a] - theta[a]) * (v[b] - theta[b]);
                variance[(a, b)] += p * (v[a] - mean[a]) * (v[b] - mean[b]);
            }
        }
    }
    let bias: Vec<f64> = mean.iter().zip(&theta).map(|(e, t)| e - t).collect();
    Ok(EstimationReport {
        weighted_cost: linalg::real_trace_product(g, &mse),
        weighted_cost_stderr: 0.0,
        b_matrix: est.b_from(&law),
        theta,
        mse,
        variance,
        bias,
        n: 1,
        trials: 0,
        stderr: RMatrix::zeros(m, m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{bloch_equator, qubit_phase, qubit_z};
    use proptest::prelude::{any, prop_assert, prop_assume, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(a: f64, b: f64) -> CMatrix {
        let z = C64::new(0.0, 0.0);
        CMatrix::from_row_slice(2, 2, &[C64::new(a, 0.0), z, z, C64::new(b, 0.0)])
    }

    fn close(a: &CMatrix, b: &CMatrix, tol: f64) -> bool {
        linalg::max_abs(&(a - b)) < tol
    }

    #[test]
    fn sld_examples() {
        assert!(close(sld(&qubit_z(), &[0.0], 0).unwrap().matrix(), &linalg::pauli_z(), 1e-14));
        assert!(close(sld(&qubit_z(), &[0.3], 0).unwrap().matrix(), &diag(1.0 / 1.3, -1.0 / 0.7), 1e-12));
        let phase = qubit_phase(1.0).unwrap();
        let l = sld(&phase, &[0.0], 0).unwrap();
        assert!(close(l.matrix(), &linalg::pauli_y(), 1e-12));
        let rho = phase.state(&[0.0]).unwrap();
        let residual = (l.matrix() * rho.matrix() + rho.matrix() * l.matrix()).scale(0.5)
            - models::derivative(&phase, &[0.0], 0).unwrap().matrix();
        assert!(linalg::max_abs(&residual) < 1e-8);
    }

    #[test]
    fn qfi_examples() {
        assert!((qfi_sld(&qubit_z(), &[0.0]).unwrap().matrix[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((qfi_sld(&qubit_z(), &[0.3]).unwrap().matrix[(0, 0)] - 1.0 / 0.91).abs() < 1e-12);
        assert!((qfi_sld(&qubit_phase(0.9).unwrap(), &[0.0]).unwrap().matrix[(0, 0)] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn classical_fisher_examples() {
        let z = Povm::pauli_z();
        assert!((classical_fisher(&qubit_z(), &[0.3], &z).unwrap().matrix[(0, 0)] - 1.0 / 0.91).abs() < 1e-12);
        assert!(classical_fisher(&qubit_z(), &[0.0], &Povm::pauli_x()).unwrap().matrix[(0, 0)].abs() < 1e-15);
        let j = classical_fisher(&qubit_phase(0.9).unwrap(), &[0.0], &Povm::pauli_y()).unwrap();
        assert!((j.matrix[(0, 0)] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn log_derivative_examples() {
        let z = Povm::pauli_z();
        let l = log_derivative(&qubit_z(), &[0.0], &z).unwrap();
        assert_eq!(l.values, vec![vec![1.0], vec![-1.0]]);
        let l = log_derivative(&qubit_z(), &[0.3], &z).unwrap();
        assert!((l.values[0][0] - 1.0 / 1.3).abs() < 1e-12 && (l.values[1][0] + 1.0 / 0.7).abs() < 1e-12);
        let l = log_derivative(&qubit_z(), &[0.0], &Povm::pauli_x()).unwrap();
        assert!(l.values.iter().all(|v| v[0].abs() < 1e-15));
    }

    #[test]
    fn singular_support_is_detected() {
        // diag(1-θ, θ) at θ = 0 puts zero weight on |1⟩ while the score is 1.
        let model = StateModel::new("edge", models::ParameterRegion::interval(-0.5, 0.5).with_margin(0.0), 2, |t| {
            crate::quantum::DensityOperator::new(diag(1.0 - t[0], t[0]))
        })
        .with_derivative(|_, _| Ok(HermitianOperator::new(diag(-1.0, 1.0)).unwrap()));
        assert!(matches!(
            classical_fisher(&model, &[0.0], &Povm::pauli_z()),
            Err(Error::SingularSupport { outcome: 1, .. })
        ));
        assert!(matches!(sld(&model, &[0.0], 0), Err(Error::M2Violated { .. })));
    }

    #[test]
    fn lue_examples() {
        let z: Arc<dyn Measurement> = Arc::new(Povm::pauli_z());
        for theta in [0.0, 0.3] {
            let est = locally_unbiased_estimator(&qubit_z(), &[theta], z.clone()).unwrap();
            assert!((est.value(0)[0] - 1.0).abs() < 1e-12 && (est.value(1)[0] + 1.0).abs() < 1e-12);
        }
        let x: Arc<dyn Measurement> = Arc::new(Povm::pauli_x());
        assert!(matches!(locally_unbiased_estimator(&qubit_z(), &[0.0], x), Err(Error::SingularFisher { .. })));
    }

    #[test]
    fn rebias_examples() {
        let z: Arc<dyn Measurement> = Arc::new(Povm::pauli_z());
        let lue = locally_unbiased_estimator(&qubit_z(), &[0.3], z.clone()).unwrap();
        let again = rebias_estimator(&lue, &qubit_z(), &[0.3]).unwrap();
        for (a, b) in lue.values().iter().zip(again.values()) {
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
        let doubled = Estimator::new(z.clone(), vec![vec![2.0], vec![-2.0]], None).unwrap();
        let fixed = rebias_estimator(&doubled, &qubit_z(), &[0.0]).unwrap();
        assert!((fixed.value(0)[0] - 1.0).abs() < 1e-12 && (fixed.value(1)[0] + 1.0).abs() < 1e-12);
        let constant = Estimator::constant(z, &[0.0]);
        assert!(matches!(rebias_estimator(&constant, &qubit_z(), &[0.0]), Err(Error::SingularB { .. })));
    }

    #[test]
    fn truncate_examples() {
        let z: Arc<dyn Measurement> = Arc::new(Povm::pauli_z());
        let est = Estimator::new(z.clone(), vec![vec![1.0], vec![-1.0]], None).unwrap();
        assert_eq!(truncate_estimator(&est, &[0.0], 5.0).unwrap().values(), est.values());
        assert_eq!(truncate_estimator(&est, &[0.0], 0.5).unwrap().values(), &[vec![0.0], vec![0.0]]);
        let lopsided = Estimator::new(z, vec![vec![1.0], vec![-3.0]], None).unwrap();
        let t = truncate_estimator(&lopsided, &[0.0], 2.0).unwrap();
        assert_eq!(t.values(), &[vec![1.0], vec![0.0]]);
        assert!(t.value_bound().unwrap() <= 4.0);
    }

    #[test]
    fn evaluate_exact_examples() {
        let g = RMatrix::identity(1, 1);
        let z: Arc<dyn Measurement> = Arc::new(Povm::pauli_z());
        let lue = locally_unbiased_estimator(&qubit_z(), &[0.3], z.clone()).unwrap();
        let r = evaluate_exact(&lue, &qubit_z(), &[0.3], &g).unwrap();
        assert!((r.variance[(0, 0)] - 0.91).abs() < 1e-12 && (r.mse[(0, 0)] - 0.91).abs() < 1e-12);
        assert!(r.bias[0].abs() < 1e-12 && (r.b_matrix[(0, 0)] - 1.0).abs() < 1e-12);
        let constant = Estimator::constant(z.clone(), &[0.3]);
        let r = evaluate_exact(&constant, &qubit_z(), &[0.3], &g).unwrap();
        assert_eq!(r.mse[(0, 0)], 0.0);
        assert_eq!(r.b_matrix[(0, 0)], 0.0);
        let pm = Estimator::new(z, vec![vec![1.0], vec![-1.0]], None).unwrap();
        assert!((evaluate_exact(&pm, &qubit_z(), &[0.0], &g).unwrap().mse[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lue_b_matrix_by_finite_difference() {
        let model = bloch_equator();
        let theta = [0.2, 0.1];
        let six: Arc<dyn Measurement> = Arc::new(Povm::pauli_six());
        let lue = locally_unbiased_estimator(&model, &theta, six).unwrap();
        let b = lue.b_matrix_fd(&model, &theta).unwrap();
        assert!(linalg::max_abs_real(&(b - RMatrix::identity(2, 2))) < 1e-6);
        let r = evaluate_exact(&lue, &model, &theta, &RMatrix::identity(2, 2)).unwrap();
        assert!(r.bias.iter().all(|b| b.abs() < 1e-10));
    }

    fn random_vector(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn quad(a: &RMatrix, v: &[f64]) -> f64 {
        let v = nalgebra::DVector::from_column_slice(v);
        (v.transpose() * a * &v)[(0, 0)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn crb_dominance(seed in any::<u64>(), outcomes in 4usize..=6, two in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (model, theta) = if two { (bloch_equator(), vec![0.2, 0.1]) } else { (qubit_z(), vec![0.3]) };
            let povm = Povm::random(2, outcomes, &mut rng);
            let cf = classical_fisher(&model, &theta, &povm).unwrap();
            let qf = qfi_sld(&model, &theta).unwrap();
            for _ in 0..20 {
                let v = random_vector(&mut rng, model.m());
                prop_assert!(quad(&cf.matrix, &v) <= quad(&qf.matrix, &v) + 1e-9);
            }
        }

        #[test]
        fn scores_reproduce_fisher(seed in any::<u64>(), outcomes in 2usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = bloch_equator();
            let theta = [0.2, 0.1];
            let povm = Povm::random(2, outcomes, &mut rng);
            let l = log_derivative(&model, &theta, &povm).unwrap();
            let mean: Vec<f64> = (0..2).map(|i| l.probs.iter().zip(&l.values).map(|(p, v)| p * v[i]).sum()).collect();
            prop_assert!(mean.iter().all(|e| e.abs() < 1e-10));
            let j = classical_fisher(&model, &theta, &povm).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    let e: f64 = l.probs.iter().zip(&l.values).map(|(p, v)| p * v[a] * v[b]).sum();
                    prop_assert!((e - j.matrix[(a, b)]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn lue_variance_is_inverse_fisher(seed in any::<u64>(), outcomes in 3usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = bloch_equator();
            let theta = [0.2, 0.1];
            let povm = Povm::random(2, outcomes, &mut rng);
            let j = classical_fisher(&model, &theta, &povm).unwrap();
            prop_assume!(linalg::condition_number(&j.matrix) < 1e6);
            let lue = locally_unbiased_estimator(&model, &theta, Arc::new(povm)).unwrap();
            let r = evaluate_exact(&lue, &model, &theta, &RMatrix::identity(2, 2)).unwrap();
            let inv = j.matrix.clone().try_inverse().unwrap();
            prop_assert!(linalg::max_abs_real(&(&r.variance - &inv)) < 1e-9 * (1.0 + linalg::max_abs_real(&inv)));
        }

        #[test]
        fn rebias_restores_local_unbiasedness(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = bloch_equator();
            let theta0 = [0.2, 0.1];
            let povm: Arc<dyn Measurement> = Arc::new(Povm::random(2, 5, &mut rng));
            let values: Vec<Vec<f64>> = (0..5).map(|_| random_vector(&mut rng, 2)).collect();
            let est = Estimator::new(povm, values, None).unwrap();
            let (_, b) = est.moments(&model, &theta0).unwrap();
            prop_assume!(linalg::condition_number(&b) < 1e4);
            let fixed = rebias_estimator(&est, &model, &theta0).unwrap();
            let (mean, b) = fixed.moments(&model, &theta0).unwrap();
            prop_assert!(mean.iter().zip(&theta0).all(|(e, t)| (e - t).abs() < 1e-8));
            let fd = fixed.b_matrix_fd(&model, &theta0).unwrap();
            prop_assert!(linalg::max_abs_real(&(b - RMatrix::identity(2, 2))) < 1e-8);
            prop_assert!(linalg::max_abs_real(&(fd - RMatrix::identity(2, 2))) < 1e-5);
        }
    }
}
