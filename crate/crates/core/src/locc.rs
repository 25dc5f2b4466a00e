//! Two-party product models: identifiability projectors, the combined
//! variance lower bound and a brute-force local-measurement search.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fisher::{self, Estimator, Measurement};
use crate::linalg::{self, RMatrix};
use crate::models::{self, StateModel};
use crate::quantum::Povm;

/// Relative eigenvalue cutoff for projector supports and null spaces.
const SUPPORT_CUTOFF: f64 = 1e-10;

/// `ρ_θ = ρ_θ^a ⊗ ρ_θ^b` with a shared parameter.
#[derive(Debug, Clone)]
pub struct ProductModel {
    a: StateModel,
    b: StateModel,
    joint: StateModel,
}

impl ProductModel {
    pub fn new(a: StateModel, b: StateModel) -> Result<Self> {
        let joint = models::product(&a, &b)?;
        Ok(Self { a, b, joint })
    }

    pub fn party_a(&self) -> &StateModel {
        &self.a
    }

    pub fn party_b(&self) -> &StateModel {
        &self.b
    }

    pub fn joint(&self) -> &StateModel {
        &self.joint
    }

    pub fn m(&self) -> usize {
        self.joint.m()
    }
}

/// Orthogonal projector onto the directions `v` with `Σ v^i ∂_iρ ≠ 0`.
pub fn identifiability_projector(model: &StateModel, theta: &[f64]) -> Result<RMatrix> {
    let d = model.derivatives(theta)?;
    let m = model.m();
    let mut gram = RMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = linalg::trace_product(d[i].matrix(), d[j].matrix());
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(support_projector(&gram))
}

fn support_projector(a: &RMatrix) -> RMatrix {
    let (values, vectors) = linalg::symmetric_eigen(a);
    let top = values.iter().cloned().fold(0.0, f64::max);
    let mut p = RMatrix::zeros(a.nrows(), a.ncols());
    if top <= 0.0 {
        return p;
    }
    for (k, &v) in values.iter().enumerate() {
        if v > SUPPORT_CUTOFF * top {
            let col = vectors.column(k);
            p += col * col.transpose();
        }
    }
    p
}

/// `Tr G · (Πa Va⁺ Πa + Πb Vb⁺ Πb)⁺` with Moore–Penrose inverses.
pub fn locc_variance_bound(va: &RMatrix, vb: &RMatrix, pa: &RMatrix, pb: &RMatrix, g: &RMatrix) -> Result<f64> {
    let m = g.nrows();
    for x in [va, vb, pa, pb, g] {
        if x.nrows() != m || x.ncols() != m {
            return Err(Error::DimensionMismatch { expected: m, found: x.nrows() });
        }
    }
    let info = pa * linalg::pinv(va) * pa + pb * linalg::pinv(vb) * pb;
    let info = (&info + info.transpose()) * 0.5;
    let (values, vectors) = linalg::symmetric_eigen(&info);
    let top = values.iter().cloned().fold(0.0, f64::max);
    let g_scale = linalg::max_abs_real(g).max(f64::MIN_POSITIVE);
    for (k, &v) in values.iter().enumerate() {
        if v <= SUPPORT_CUTOFF * top || top <= 0.0 {
            let dir = vectors.column(k).into_owned();
            if (g * &dir).norm() > SUPPORT_CUTOFF * g_scale {
                return Err(Error::UnidentifiableDirection { direction: dir.iter().copied().collect() });
            }
        }
    }
    Ok(linalg::real_trace_product(g, &linalg::pinv(&info)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoccBound {
    pub bound: f64,
    pub projector_a: RMatrix,
    pub projector_b: RMatrix,
    /// `(Πa J^S_a Πa)⁺`.
    pub va: RMatrix,
    pub vb: RMatrix,
}

/// The bound with `V^x` the inverse SLD Fisher information of party `x`
/// restricted to its identifiable directions.
pub fn product_bound(pm: &ProductModel, theta: &[f64], g: &RMatrix) -> Result<LoccBound> {
    let party = |model: &StateModel| -> Result<(RMatrix, RMatrix)> {
        let p = identifiability_projector(model, theta)?;
        let j = fisher::qfi_sld(model, theta)?.matrix;
        Ok((linalg::pinv(&(&p * j * &p)), p))
    };
    let (va, pa) = party(&pm.a)?;
    let (vb, pb) = party(&pm.b)?;
    let bound = locc_variance_bound(&va, &vb, &pa, &pb, g)?;
    Ok(LoccBound { bound, projector_a: pa, projector_b: pb, va, vb })
}

/// Orientation grid for projective qubit measurements: polar angles
/// `kπ/polar` and azimuths `2πl/azimuth`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchGrid {
    pub polar: usize,
    pub azimuth: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self { polar: 36, azimuth: 36 }
    }
}

impl SearchGrid {
    pub fn square(points: usize) -> Self {
        Self { polar: points, azimuth: points }
    }

    pub fn axes(&self) -> Result<Vec<[f64; 3]>> {
        if self.polar == 0 || self.azimuth == 0 {
            return Err(Error::InvalidGrid("search grid has no orientations".into()));
        }
        let pi = std::f64::consts::PI;
        let mut axes = Vec::with_capacity(self.polar * self.azimuth);
        for k in 0..self.polar {
            let t = k as f64 * pi / self.polar as f64;
            for l in 0..self.azimuth {
                let p = 2.0 * pi * l as f64 / self.azimuth as f64;
                axes.push([t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]);
            }
        }
        Ok(axes)
    }
}

#[derive(Debug, Clone)]
pub struct LoSearchResult {
    /// `Tr G · V` of the best local pair, from exact enumeration.
    pub best_cost: f64,
    pub axis_a: [f64; 3],
    pub axis_b: [f64; 3],
    /// `S = F^a(ξ^a) + F^b(ξ^b) + θ₀` on the product POVM.
    pub estimator: Estimator,
}

struct AxisInfo {
    axis: [f64; 3],
    povm: Povm,
    fisher: [f64; 4],
    scores: Vec<Vec<f64>>,
}

/// Inverse and `Tr G·J⁻¹` for `m ≤ 2`, stored row-major in a 2×2 block.
fn small_cost(j: &[f64; 4], g: &[f64; 4], m: usize) -> Option<(f64, [f64; 4])> {
    if m == 1 {
        if !(j[0] > 0.0) || j[0] < 1e-12 {
            return None;
        }
        let inv = [1.0 / j[0], 0.0, 0.0, 0.0];
        return Some((g[0] * inv[0], inv));
    }
    let det = j[0] * j[3] - j[1] * j[2];
    let scale = j[0].abs().max(j[3].abs()).max(f64::MIN_POSITIVE);
    if !(det > 1e-12 * scale * scale) {
        return None;
    }
    let inv = [j[3] / det, -j[1] / det, -j[2] / det, j[0] / det];
    let cost = g[0] * inv[0] + g[1] * inv[2] + g[2] * inv[1] + g[3] * inv[3];
    Some((cost, inv))
}

/// Exhaustive search over pairs of projective qubit measurements. Each
/// pair uses `S = θ₀ + (J_a + J_b)⁻¹ (l_a + l_b)`, the locally unbiased
/// estimator of the product POVM; ties go to the lowest grid index.
pub fn brute_force_lo_search(pm: &ProductModel, theta: &[f64], g: &RMatrix, grid: SearchGrid) -> Result<LoSearchResult> {
    let m = pm.m();
    if m > 2 {
        return Err(Error::InvalidConfig(format!("local search supports m ≤ 2, got m = {m}")));
    }
    if pm.a.dim() != 2 || pm.b.dim() != 2 {
        return Err(Error::InvalidConfig("local search needs qubit parties".into()));
    }
    if g.nrows() != m || g.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, found: g.nrows() });
    }
    let theta = pm.joint.region().admit(theta)?;
    let axes = grid.axes()?;
    let gm = pack(g, m);
    let party = |model: &StateModel| -> Result<Vec<AxisInfo>> {
        axes.iter()
            .map(|&axis| {
                let povm = Povm::qubit_axis(axis)?;
                let l = fisher::log_derivative(model, &theta, &povm)?;
                let fisher = pack(&fisher::classical_fisher(model, &theta, &povm)?.matrix, m);
                Ok(AxisInfo { axis, povm, fisher, scores: l.values })
            })
            .collect()
    };
    let (infos_a, infos_b) = (party(&pm.a)?, party(&pm.b)?);
    let mut best: Option<(f64, usize, usize, [f64; 4])> = None;
    for (ia, a) in infos_a.iter().enumerate() {
        for (ib, b) in infos_b.iter().enumerate() {
            let j = [a.fisher[0] + b.fisher[0], a.fisher[1] + b.fisher[1], a.fisher[2] + b.fisher[2], a.fisher[3] + b.fisher[3]];
            if let Some((cost, inv)) = small_cost(&j, &gm, m) {
                if best.is_none_or(|(c, ..)| cost < c) {
                    best = Some((cost, ia, ib, inv));
                }
            }
        }
    }
    let (_, ia, ib, inv) = best.ok_or(Error::SingularFisher { condition: f64::INFINITY })?;
    let (a, b) = (&infos_a[ia], &infos_b[ib]);
    let povm = a.povm.tensor(&b.povm);
    let mut values = Vec::with_capacity(povm.len());
    for sa in &a.scores {
        for sb in &b.scores {
            let l: Vec<f64> = sa.iter().zip(sb).map(|(x, y)| x + y).collect();
            values.push(
                (0..m).map(|i| theta[i] + (0..m).map(|k| inv[2 * i + k] * l[k]).sum::<f64>()).collect::<Vec<f64>>(),
            );
        }
    }
    let measurement: Arc<dyn Measurement> = Arc::new(povm);
    let estimator = Estimator::new(measurement, values, None)?;
    let report = fisher::evaluate_exact(&estimator, &pm.joint, &theta, g)?;
    Ok(LoSearchResult {
        best_cost: linalg::real_trace_product(g, &report.variance),
        axis_a: a.axis,
        axis_b: b.axis,
        estimator,
    })
}

fn pack(a: &RMatrix, m: usize) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..m {
        for j in 0..m {
            out[2 * i + j] = a[(i, j)];
        }
    }
    out
}
