//! Finite-dimensional quantum objects: Hermitian operators, density
//! operators, POVMs, instruments in Kraus form and channels.
//!
//! Constructors symmetrize and clip small numerical defects and reject
//! anything beyond [`REJECT_TOL`].

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMatrix, C64};

/// Violations larger than this are rejected rather than repaired.
pub const REJECT_TOL: f64 = 1e-8;
/// Probabilities below this are clipped to zero.
pub const PROB_CLIP: f64 = 1e-12;
/// Conditioning on a branch below this probability is refused.
pub const NULL_BRANCH: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    matrix: CMatrix,
}

impl HermitianOperator {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::InvalidOperator(format!(
                "expected a non-empty square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidOperator("non-finite entry".into()));
        }
        let defect = linalg::hermiticity_defect(&matrix);
        if defect > REJECT_TOL {
            return Err(Error::InvalidOperator(format!("not Hermitian (defect {defect:e})")));
        }
        Ok(Self { matrix: linalg::symmetrize(&matrix) })
    }

    /// Symmetrizes without checking; for matrices Hermitian by construction.
    pub(crate) fn from_hermitian(matrix: CMatrix) -> Self {
        Self { matrix: linalg::symmetrize(&matrix) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: linalg::identity(dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { matrix: CMatrix::zeros(dim, dim) }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::hermitian_eigenvalues(&self.matrix)
    }

    pub fn trace_norm(&self) -> f64 {
        linalg::trace_norm(&self.matrix)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { matrix: self.matrix.scale(s) }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self { matrix: &self.matrix + &other.matrix }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self { matrix: &self.matrix - &other.matrix }
    }

    pub fn tensor(&self, other: &Self) -> Self {
        Self { matrix: tensor(&self.matrix, &other.matrix) }
    }

    /// Real part of `tr(self · other)`.
    pub fn expectation(&self, other: &CMatrix) -> f64 {
        linalg::trace_product(&self.matrix, other)
    }

    pub fn partial_trace(&self, dims: &[usize], keep: &[usize]) -> Result<Self> {
        Ok(Self::from_hermitian(partial_trace(&self.matrix, dims, keep)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    matrix: CMatrix,
}

impl DensityOperator {
    /// Validates and repairs: symmetrizes, clips eigenvalues below zero and
    /// renormalizes to unit trace. Defects above [`REJECT_TOL`] are errors.
    pub fn new(matrix: CMatrix) -> Result<Self> {
        let herm = HermitianOperator::new(matrix)?;
        let tr = herm.trace();
        if (tr - 1.0).abs() > REJECT_TOL {
            return Err(Error::InvalidOperator(format!("trace {tr} is not 1")));
        }
        let (values, vectors) = linalg::hermitian_eigen(herm.matrix());
        let min = values.first().copied().unwrap_or(0.0);
        if min < -REJECT_TOL {
            return Err(Error::InvalidOperator(format!("negative eigenvalue {min:e}")));
        }
        let matrix = if min < 0.0 {
            let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
            let total: f64 = clipped.iter().sum();
            let diag = CMatrix::from_diagonal(&DVector::from_iterator(
                clipped.len(),
                clipped.iter().map(|v| c(v / total, 0.0)),
            ));
            linalg::symmetrize(&(&vectors * diag * vectors.adjoint()))
        } else {
            herm.into_matrix().unscale(tr)
        };
        Ok(Self { matrix })
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self { matrix: linalg::identity(dim).unscale(dim as f64) }
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalized) vector.
    pub fn pure(amplitudes: &[C64]) -> Result<Self> {
        let v = DVector::from_column_slice(amplitudes);
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidOperator("zero state vector".into()));
        }
        let v = v.unscale(norm);
        Self::new(&v * v.adjoint())
    }

    /// Qubit state `(I + r·σ) / 2`; requires `|r| ≤ 1`.
    pub fn bloch(r: [f64; 3]) -> Result<Self> {
        let m = (linalg::identity(2)
            + linalg::pauli_x().scale(r[0])
            + linalg::pauli_y().scale(r[1])
            + linalg::pauli_z().scale(r[2]))
        .scale(0.5);
        Self::new(m)
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::hermitian_eigenvalues(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.matrix)
    }

    pub fn as_hermitian(&self) -> HermitianOperator {
        HermitianOperator { matrix: self.matrix.clone() }
    }

    pub fn tensor(&self, other: &Self) -> Self {
        Self { matrix: tensor(&self.matrix, &other.matrix) }
    }

    pub fn partial_trace(&self, dims: &[usize], keep: &[usize]) -> Result<Self> {
        Self::new(partial_trace(&self.matrix, dims, keep)?)
    }

    /// Convex combination `(1 - w) self + w other`.
    pub fn mix(&self, other: &Self, w: f64) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Self::new(self.matrix.scale(1.0 - w) + other.matrix.scale(w))
    }

    /// Haar-ish random full-rank state from a Ginibre matrix.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let g = random_complex_matrix(dim, dim, rng);
        let m = &g * g.adjoint();
        let tr = m.trace().re;
        Self { matrix: linalg::symmetrize(&m.unscale(tr)) }
    }
}

/// Kronecker product; `dim = dim(a) · dim(b)`.
pub fn tensor(a: &CMatrix, b: &CMatrix) -> CMatrix {
    linalg::kron(a, b)
}

/// Partial trace keeping the subsystems listed in `keep` (in their original
/// order). Subsystem 0 is the most significant tensor factor.
pub fn partial_trace(op: &CMatrix, dims: &[usize], keep: &[usize]) -> Result<CMatrix> {
    let total: usize = dims.iter().product();
    if op.nrows() != op.ncols() || op.nrows() != total {
        return Err(Error::DimensionMismatch { expected: total, found: op.nrows() });
    }
    let mut keep_sorted: Vec<usize> = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();
    if keep_sorted.iter().any(|&k| k >= dims.len()) {
        return Err(Error::InvalidParameter(format!(
            "subsystem index out of range for {} subsystems",
            dims.len()
        )));
    }
    let kept_dim: usize = keep_sorted.iter().map(|&k| dims[k]).product();
    let is_kept: Vec<bool> = (0..dims.len()).map(|k| keep_sorted.contains(&k)).collect();

    // digit decomposition, most significant subsystem first
    let split = |mut index: usize| -> (usize, usize) {
        let mut kept = 0;
        let mut kept_scale = 1;
        let mut traced = 0;
        let mut traced_scale = 1;
        for s in (0..dims.len()).rev() {
            let digit = index % dims[s];
            index /= dims[s];
            if is_kept[s] {
                kept += digit * kept_scale;
                kept_scale *= dims[s];
            } else {
                traced += digit * traced_scale;
                traced_scale *= dims[s];
            }
        }
        (kept, traced)
    };
    let parts: Vec<(usize, usize)> = (0..total).map(split).collect();
    let mut out = CMatrix::zeros(kept_dim, kept_dim);
    for r in 0..total {
        let (kr, tr) = parts[r];
        for col in 0..total {
            let (kc, tc) = parts[col];
            if tr == tc {
                out[(kr, kc)] += op[(r, col)];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PovmOutcome {
    pub label: i64,
    pub element: HermitianOperator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Povm {
    outcomes: Vec<PovmOutcome>,
}

impl Povm {
    pub fn new(outcomes: Vec<(i64, CMatrix)>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidPovm("no outcomes".into()));
        }
        let dim = outcomes[0].1.nrows();
        let mut sum = CMatrix::zeros(dim, dim);
        let mut checked = Vec::with_capacity(outcomes.len());
        for (label, m) in outcomes {
            if m.nrows() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: m.nrows() });
            }
            let element = HermitianOperator::new(m).map_err(|e| Error::InvalidPovm(e.to_string()))?;
            let min = linalg::min_eigenvalue(element.matrix());
            if min < -REJECT_TOL {
                return Err(Error::InvalidPovm(format!("element {label} has eigenvalue {min:e}")));
            }
            if checked.iter().any(|o: &PovmOutcome| o.label == label) {
                return Err(Error::InvalidPovm(format!("duplicate label {label}")));
            }
            sum += element.matrix();
            checked.push(PovmOutcome { label, element });
        }
        let defect = linalg::max_abs(&(sum - linalg::identity(dim)));
        if defect > REJECT_TOL {
            return Err(Error::InvalidPovm(format!("elements do not sum to identity (defect {defect:e})")));
        }
        Ok(Self { outcomes: checked })
    }

    /// Labels `0..k` in order.
    pub fn from_elements(elements: Vec<CMatrix>) -> Result<Self> {
        Self::new(elements.into_iter().enumerate().map(|(i, m)| (i as i64, m)).collect())
    }

    /// Single-outcome POVM `{I}`.
    pub fn trivial(dim: usize) -> Self {
        Self { outcomes: vec![PovmOutcome { label: 0, element: HermitianOperator::identity(dim) }] }
    }

    /// Rank-one projectors onto the columns of a unitary.
    pub fn projective(basis: &CMatrix) -> Result<Self> {
        let elements = (0..basis.ncols())
            .map(|k| {
                let v = basis.column(k).into_owned();
                &v * v.adjoint()
            })
            .collect();
        Self::from_elements(elements)
    }

    /// Two-outcome projective measurement `(I ± n·σ)/2` along a Bloch
    /// direction; label 0 is the `+` outcome.
    pub fn qubit_axis(n: [f64; 3]) -> Result<Self> {
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidPovm("zero measurement axis".into()));
        }
        let sigma = (linalg::pauli_x().scale(n[0]) + linalg::pauli_y().scale(n[1]) + linalg::pauli_z().scale(n[2]))
            .unscale(norm);
        let id = linalg::identity(2);
        Self::from_elements(vec![(&id + &sigma).scale(0.5), (&id - &sigma).scale(0.5)])
    }

    /// Unsharp two-outcome measurement `(I ± s n·σ)/2`, `0 < s ≤ 1`.
    pub fn weak_axis(n: [f64; 3], strength: f64) -> Result<Self> {
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(Error::InvalidPovm(format!("strength {strength} outside (0, 1]")));
        }
        let sharp = Self::qubit_axis(n)?;
        let id = linalg::identity(2).scale(0.5 * (1.0 - strength));
        Self::from_elements(sharp.outcomes.iter().map(|o| o.element.matrix().scale(strength) + &id).collect())
    }

    pub fn pauli_x() -> Self {
        Self::qubit_axis([1.0, 0.0, 0.0]).expect("valid axis")
    }

    pub fn pauli_y() -> Self {
        Self::qubit_axis([0.0, 1.0, 0.0]).expect("valid axis")
    }

    pub fn pauli_z() -> Self {
        Self::qubit_axis([0.0, 0.0, 1.0]).expect("valid axis")
    }

    /// Six-outcome Pauli POVM with weight 1/3 per axis; labels 0..6 are
    /// `x+, x-, y+, y-, z+, z-`.
    pub fn pauli_six() -> Self {
        let mut elements = Vec::with_capacity(6);
        for axis in [Self::pauli_x(), Self::pauli_y(), Self::pauli_z()] {
            for o in axis.outcomes {
                elements.push(o.element.matrix().scale(1.0 / 3.0));
            }
        }
        Self::from_elements(elements).expect("Pauli POVM resolves identity")
    }

    /// Random POVM: random PSD seeds normalized by `S^{-1/2} A_k S^{-1/2}`.
    pub fn random<R: Rng + ?Sized>(dim: usize, outcomes: usize, rng: &mut R) -> Self {
        let seeds: Vec<CMatrix> = (0..outcomes)
            .map(|_| {
                let g = random_complex_matrix(dim, dim, rng);
                &g * g.adjoint()
            })
            .collect();
        let sum = seeds.iter().fold(CMatrix::zeros(dim, dim), |acc, a| acc + a);
        let w = linalg::inv_sqrt_pd(&sum);
        let elements = seeds.iter().map(|a| linalg::symmetrize(&(&w * a * &w))).collect();
        Self::from_elements(elements).expect("normalized POVM")
    }

    /// Product POVM; outcome `(a, b)` gets index `a * len(other) + b` and the
    /// same value as its label.
    pub fn tensor(&self, other: &Self) -> Self {
        let mut outcomes = Vec::with_capacity(self.len() * other.len());
        for (i, a) in self.outcomes.iter().enumerate() {
            for (j, b) in other.outcomes.iter().enumerate() {
                outcomes.push(PovmOutcome {
                    label: (i * other.len() + j) as i64,
                    element: a.element.tensor(&b.element),
                });
            }
        }
        Self { outcomes }
    }

    pub fn outcomes(&self) -> &[PovmOutcome] {
        &self.outcomes
    }

    pub fn elements(&self) -> impl Iterator<Item = &HermitianOperator> {
        self.outcomes.iter().map(|o| &o.element)
    }

    pub fn labels(&self) -> Vec<i64> {
        self.outcomes.iter().map(|o| o.label).collect()
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.outcomes[0].element.dim()
    }

    /// Max-abs deviation of `Σ M_ω` from the identity.
    pub fn completeness_defect(&self) -> f64 {
        let sum = self.elements().fold(CMatrix::zeros(self.dim(), self.dim()), |acc, e| acc + e.matrix());
        linalg::max_abs(&(sum - linalg::identity(self.dim())))
    }
}

/// `p(ω) = tr(ρ M_ω)`, clipped at zero and renormalized.
pub fn outcome_distribution(rho: &DensityOperator, povm: &Povm) -> Result<Vec<f64>> {
    if rho.dim() != povm.dim() {
        return Err(Error::DimensionMismatch { expected: povm.dim(), found: rho.dim() });
    }
    let raw: Vec<f64> = povm.elements().map(|m| linalg::trace_product(rho.matrix(), m.matrix())).collect();
    Ok(normalize_probabilities(raw))
}

pub(crate) fn normalize_probabilities(raw: Vec<f64>) -> Vec<f64> {
    let clipped: Vec<f64> = raw.into_iter().map(|p| if p < PROB_CLIP { 0.0 } else { p }).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return clipped;
    }
    clipped.into_iter().map(|p| p / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentBranch {
    pub label: i64,
    pub kraus: Vec<CMatrix>,
}

/// Finite-outcome instrument stored as Kraus operators per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Instrument {
    dim: usize,
    branches: Vec<InstrumentBranch>,
}

impl Instrument {
    pub fn new(branches: Vec<(i64, Vec<CMatrix>)>) -> Result<Self> {
        let dim = branches
            .iter()
            .flat_map(|(_, ks)| ks.first())
            .map(|k| k.ncols())
            .next()
            .ok_or_else(|| Error::InvalidInstrument("no Kraus operators".into()))?;
        let mut sum = CMatrix::zeros(dim, dim);
        let mut out = Vec::with_capacity(branches.len());
        for (label, kraus) in branches {
            if out.iter().any(|b: &InstrumentBranch| b.label == label) {
                return Err(Error::InvalidInstrument(format!("duplicate label {label}")));
            }
            for k in &kraus {
                if k.nrows() != dim || k.ncols() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found: k.nrows().max(k.ncols()) });
                }
                sum += k.adjoint() * k;
            }
            out.push(InstrumentBranch { label, kraus });
        }
        let defect = linalg::max_abs(&(sum - linalg::identity(dim)));
        if defect > REJECT_TOL {
            return Err(Error::InvalidInstrument(format!("not trace preserving (defect {defect:e})")));
        }
        Ok(Self { dim, branches: out })
    }

    /// Lüders instrument `ρ ↦ √M ρ √M` for each POVM element.
    pub fn luders(povm: &Povm) -> Self {
        let branches = povm
            .outcomes()
            .iter()
            .map(|o| InstrumentBranch { label: o.label, kraus: vec![linalg::sqrt_psd(o.element.matrix())] })
            .collect();
        Self { dim: povm.dim(), branches }
    }

    /// Single-branch instrument realizing a channel; label 0.
    pub fn from_channel(channel: &KrausChannel) -> Result<Self> {
        if channel.input_dim() != channel.output_dim() {
            return Err(Error::DimensionMismatch { expected: channel.input_dim(), found: channel.output_dim() });
        }
        Self::new(vec![(0, channel.kraus().to_vec())])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn branches(&self) -> &[InstrumentBranch] {
        &self.branches
    }

    pub fn labels(&self) -> Vec<i64> {
        self.branches.iter().map(|b| b.label).collect()
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn branch(&self, label: i64) -> Result<&InstrumentBranch> {
        self.branches.iter().find(|b| b.label == label).ok_or(Error::UnknownLabel(label))
    }

    /// Unnormalized post-measurement operator for one branch.
    pub fn apply_branch(&self, label: i64, rho: &CMatrix) -> Result<CMatrix> {
        if rho.nrows() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: rho.nrows() });
        }
        let branch = self.branch(label)?;
        Ok(apply_kraus(&branch.kraus, rho))
    }

    /// Sum over every branch: the instrument's total channel applied to `ρ`.
    pub fn apply_total(&self, rho: &CMatrix) -> CMatrix {
        self.branches
            .iter()
            .fold(CMatrix::zeros(self.dim, self.dim), |acc, b| acc + apply_kraus(&b.kraus, rho))
    }

    /// Induced POVM `Σ_k K_k† K_k` per branch.
    pub fn induced_povm(&self) -> Povm {
        let outcomes = self
            .branches
            .iter()
            .map(|b| {
                let e = b.kraus.iter().fold(CMatrix::zeros(self.dim, self.dim), |acc, k| acc + k.adjoint() * k);
                PovmOutcome { label: b.label, element: HermitianOperator::from_hermitian(e) }
            })
            .collect();
        Povm { outcomes }
    }
}

pub(crate) fn apply_kraus(kraus: &[CMatrix], rho: &CMatrix) -> CMatrix {
    let rows = kraus.first().map(|k| k.nrows()).unwrap_or(rho.nrows());
    kraus.iter().fold(CMatrix::zeros(rows, rows), |acc, k| acc + k * rho * k.adjoint())
}

/// Probability of `label` and the normalized a posteriori state.
pub fn posterior_state(rho: &DensityOperator, inst: &Instrument, label: i64) -> Result<(f64, DensityOperator)> {
    let out = inst.apply_branch(label, rho.matrix())?;
    let p = out.trace().re;
    if p < NULL_BRANCH {
        return Err(Error::ZeroProbabilityBranch { label });
    }
    Ok((p, DensityOperator::new(out.unscale(p))?))
}

/// Completely positive trace-preserving map in Kraus form.
#[derive(Debug, Clone, PartialEq)]
pub struct KrausChannel {
    input_dim: usize,
    output_dim: usize,
    kraus: Vec<CMatrix>,
}

impl KrausChannel {
    pub fn new(kraus: Vec<CMatrix>) -> Result<Self> {
        let first = kraus.first().ok_or_else(|| Error::InvalidChannel("no Kraus operators".into()))?;
        let (output_dim, input_dim) = (first.nrows(), first.ncols());
        let mut sum = CMatrix::zeros(input_dim, input_dim);
        for k in &kraus {
            if k.nrows() != output_dim || k.ncols() != input_dim {
                return Err(Error::InvalidChannel("Kraus operators have inconsistent shapes".into()));
            }
            sum += k.adjoint() * k;
        }
        let defect = linalg::max_abs(&(sum - linalg::identity(input_dim)));
        if defect > REJECT_TOL {
            return Err(Error::InvalidChannel(format!("not trace preserving (defect {defect:e})")));
        }
        Ok(Self { input_dim, output_dim, kraus })
    }

    pub fn identity(dim: usize) -> Self {
        Self { input_dim: dim, output_dim: dim, kraus: vec![linalg::identity(dim)] }
    }

    pub fn unitary(u: CMatrix) -> Result<Self> {
        Self::new(vec![u])
    }

    /// Qubit depolarizing channel `ρ ↦ (1-p)ρ + p I/2`, `p ∈ [0, 1]`.
    pub fn depolarizing(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("depolarizing strength {p} outside [0, 1]")));
        }
        let a = (1.0 - 0.75 * p).sqrt();
        let b = (0.25 * p).sqrt();
        Self::new(vec![
            linalg::identity(2).scale(a),
            linalg::pauli_x().scale(b),
            linalg::pauli_y().scale(b),
            linalg::pauli_z().scale(b),
        ])
    }

    /// Kraus operators from a PSD Choi matrix (input ⊗ output ordering).
    pub fn from_choi(choi: &CMatrix, input_dim: usize, output_dim: usize) -> Result<Self> {
        if choi.nrows() != input_dim * output_dim {
            return Err(Error::DimensionMismatch { expected: input_dim * output_dim, found: choi.nrows() });
        }
        let (values, vectors) = linalg::hermitian_eigen(choi);
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        if values.first().copied().unwrap_or(0.0) < -REJECT_TOL * scale {
            return Err(Error::InvalidChannel("Choi matrix is not positive semidefinite".into()));
        }
        let mut kraus = Vec::new();
        for (k, &lambda) in values.iter().enumerate() {
            if lambda <= 1e-14 * scale {
                continue;
            }
            let v = vectors.column(k);
            // v = Σ_j |j⟩ ⊗ K|j⟩ / √λ, so K[o, j] = √λ · v[j·d_out + o]
            let mut op = CMatrix::zeros(output_dim, input_dim);
            for j in 0..input_dim {
                for o in 0..output_dim {
                    op[(o, j)] = v[j * output_dim + o] * lambda.sqrt();
                }
            }
            kraus.push(op);
        }
        Self::new(kraus)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn kraus(&self) -> &[CMatrix] {
        &self.kraus
    }

    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        if rho.nrows() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: rho.nrows() });
        }
        Ok(apply_kraus(&self.kraus, rho))
    }

    pub fn apply_state(&self, rho: &DensityOperator) -> Result<DensityOperator> {
        DensityOperator::new(self.apply(rho.matrix())?)
    }

    /// `Λ ⊗ id_K` acting on `H ⊗ K`.
    pub fn extend(&self, ancilla_dim: usize) -> Self {
        let id = linalg::identity(ancilla_dim);
        Self {
            input_dim: self.input_dim * ancilla_dim,
            output_dim: self.output_dim * ancilla_dim,
            kraus: self.kraus.iter().map(|k| tensor(k, &id)).collect(),
        }
    }

    pub fn compose(&self, after: &Self) -> Result<Self> {
        if after.input_dim != self.output_dim {
            return Err(Error::DimensionMismatch { expected: self.output_dim, found: after.input_dim });
        }
        let mut kraus = Vec::with_capacity(self.kraus.len() * after.kraus.len());
        for a in &after.kraus {
            for k in &self.kraus {
                kraus.push(a * k);
            }
        }
        Ok(Self { input_dim: self.input_dim, output_dim: after.output_dim, kraus })
    }
}

/// Unnormalized Choi matrix `Σ_jk |j⟩⟨k| ⊗ Λ(|j⟩⟨k|)`, trace = input dim.
pub fn choi(ch: &KrausChannel) -> HermitianOperator {
    let (din, dout) = (ch.input_dim, ch.output_dim);
    let mut out = CMatrix::zeros(din * dout, din * dout);
    for k in &ch.kraus {
        let mut v = DVector::<C64>::zeros(din * dout);
        for j in 0..din {
            for o in 0..dout {
                v[j * dout + o] = k[(o, j)];
            }
        }
        out += &v * v.adjoint();
    }
    HermitianOperator::from_hermitian(out)
}

pub(crate) fn random_complex_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re, im)
    })
}
