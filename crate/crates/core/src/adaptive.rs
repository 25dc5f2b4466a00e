//! Round-based adaptive measurement schedules, exact outcome-tree
//! enumeration and the reductions of adaptive estimators to per-sample
//! ones.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fisher::{Estimator, Measurement, OutcomeLaw};
use crate::linalg::{self, CMatrix, RMatrix};
use crate::models::StateModel;
use crate::quantum::{DensityOperator, Instrument, NULL_BRANCH};

/// Enumeration refuses trees with more leaves than this.
pub const PATH_LIMIT: u128 = 1_000_000;
/// Finite-difference step for the Leibniz identity.
pub const LEIBNIZ_STEP: f64 = 1e-4;

/// `(round, sample, completed-round history) → instrument`. Rounds and
/// samples are zero-based; the history holds every outcome of earlier
/// rounds in round-major, sample-minor order.
pub type ChooseFn = Arc<dyn Fn(usize, usize, &[i64]) -> Result<Instrument> + Send + Sync>;

#[derive(Clone)]
pub struct AdaptiveSchedule {
    n_samples: usize,
    rounds: usize,
    dim: usize,
    choose: ChooseFn,
}

impl fmt::Debug for AdaptiveSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdaptiveSchedule")
            .field("n_samples", &self.n_samples)
            .field("rounds", &self.rounds)
            .field("dim", &self.dim)
            .finish()
    }
}

impl AdaptiveSchedule {
    pub fn new(
        n_samples: usize,
        rounds: usize,
        dim: usize,
        choose: impl Fn(usize, usize, &[i64]) -> Result<Instrument> + Send + Sync + 'static,
    ) -> Result<Self> {
        if n_samples == 0 || rounds == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one sample and one round".into()));
        }
        Ok(Self { n_samples, rounds, dim, choose: Arc::new(choose) })
    }

    /// One round, sample `κ` measured by `instruments[κ]`.
    pub fn product(instruments: Vec<Instrument>) -> Result<Self> {
        let dim = instruments.first().map(Instrument::dim).unwrap_or(0);
        let n = instruments.len();
        Self::new(n, 1, dim, move |_, k, _| Ok(instruments[k].clone()))
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn choose(&self, round: usize, sample: usize, history: &[i64]) -> Result<Instrument> {
        let inst = (self.choose)(round, sample, history)?;
        if inst.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: inst.dim() });
        }
        Ok(inst)
    }

    /// Leaf count along the all-first-branch path, a cheap size estimate.
    fn first_path_size(&self) -> Result<u128> {
        let mut history = Vec::new();
        let mut size: u128 = 1;
        for level in 0..self.n_samples * self.rounds {
            let (r, k) = (level / self.n_samples, level % self.n_samples);
            let inst = self.choose(r, k, &history[..r * self.n_samples])?;
            size = size.saturating_mul(inst.len() as u128);
            history.push(inst.branches()[0].label);
        }
        Ok(size)
    }

    /// Enumerates every outcome path with its per-sample effect operators.
    pub fn tree(&self) -> Result<ScheduleTree> {
        let estimate = self.first_path_size()?;
        if estimate > PATH_LIMIT {
            return Err(Error::TreeTooLarge { paths: estimate, limit: PATH_LIMIT });
        }
        let mut tree = ScheduleTree {
            n_samples: self.n_samples,
            rounds: self.rounds,
            dim: self.dim,
            labels: Vec::new(),
            effects: Vec::new(),
        };
        let mut kraus = vec![vec![linalg::identity(self.dim)]; self.n_samples];
        let mut labels = Vec::with_capacity(self.n_samples * self.rounds);
        self.descend(&mut labels, &mut kraus, &mut tree)?;
        Ok(tree)
    }

    fn descend(&self, labels: &mut Vec<i64>, kraus: &mut [Vec<CMatrix>], tree: &mut ScheduleTree) -> Result<()> {
        let level = labels.len();
        if level == self.n_samples * self.rounds {
            if tree.labels.len() as u128 >= PATH_LIMIT {
                return Err(Error::TreeTooLarge { paths: PATH_LIMIT + 1, limit: PATH_LIMIT });
            }
            let effects = kraus
                .iter()
                .map(|ks| ks.iter().fold(CMatrix::zeros(self.dim, self.dim), |acc, p| acc + p.adjoint() * p))
                .collect();
            tree.labels.push(labels.clone());
            tree.effects.push(effects);
            return Ok(());
        }
        let (r, k) = (level / self.n_samples, level % self.n_samples);
        let inst = self.choose(r, k, &labels[..r * self.n_samples])?;
        for branch in inst.branches() {
            let extended: Vec<CMatrix> =
                branch.kraus.iter().flat_map(|kr| kraus[k].iter().map(move |p| kr * p)).collect();
            let saved = std::mem::replace(&mut kraus[k], extended);
            labels.push(branch.label);
            let res = self.descend(labels, kraus, tree);
            labels.pop();
            kraus[k] = saved;
            res?;
        }
        Ok(())
    }
}

/// Structural outcome tree: every path (depth-first, round-major order)
/// with the effect operator each sample contributes. Path probability is
/// `Π_κ tr(E_κ ρ_κ)`.
#[derive(Debug, Clone)]
pub struct ScheduleTree {
    n_samples: usize,
    rounds: usize,
    dim: usize,
    labels: Vec<Vec<i64>>,
    effects: Vec<Vec<CMatrix>>,
}

impl ScheduleTree {
    pub fn path_count(&self) -> usize {
        self.labels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[Vec<i64>] {
        &self.labels
    }

    /// `tr(E_κ ρ_κ)` per path and sample.
    fn factors(&self, states: &[&CMatrix]) -> Vec<Vec<f64>> {
        self.effects
            .iter()
            .map(|es| es.iter().zip(states).map(|(e, s)| linalg::trace_product(e, s).max(0.0)).collect())
            .collect()
    }

    /// Joint path law with sample `κ` in state `states[κ]`.
    pub fn probabilities(&self, states: &[&CMatrix]) -> Result<Vec<f64>> {
        if states.len() != self.n_samples {
            return Err(Error::DimensionMismatch { expected: self.n_samples, found: states.len() });
        }
        if let Some(bad) = states.iter().find(|s| s.nrows() != self.dim) {
            return Err(Error::DimensionMismatch { expected: self.dim, found: bad.nrows() });
        }
        Ok(self.factors(states).iter().map(|f| f.iter().product()).collect())
    }

    /// Law and derivative when only the samples in `live` depend on θ
    /// (state `rho`, derivatives `drho`) and the rest sit at `frozen`.
    fn law_with(&self, rho: &CMatrix, drho: &[CMatrix], frozen: &CMatrix, live: &[bool]) -> OutcomeLaw {
        let states: Vec<&CMatrix> = live.iter().map(|&l| if l { rho } else { frozen }).collect();
        let factors = self.factors(&states);
        let probs: Vec<f64> = factors.iter().map(|f| f.iter().product()).collect();
        let dprobs = drho
            .iter()
            .map(|d| {
                self.effects
                    .iter()
                    .zip(&factors)
                    .map(|(es, f)| {
                        (0..self.n_samples)
                            .filter(|&k| live[k])
                            .map(|k| {
                                let others: f64 = (0..self.n_samples).filter(|&j| j != k).map(|j| f[j]).product();
                                linalg::trace_product(&es[k], d) * others
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect();
        OutcomeLaw { probs, dprobs }
    }
}

/// The schedule run on `n` copies of the model state; outcomes are paths.
#[derive(Debug, Clone)]
pub struct ScheduleMeasurement {
    tree: Arc<ScheduleTree>,
}

impl ScheduleMeasurement {
    pub fn new(schedule: &AdaptiveSchedule) -> Result<Self> {
        Ok(Self { tree: Arc::new(schedule.tree()?) })
    }

    pub fn from_tree(tree: Arc<ScheduleTree>) -> Self {
        Self { tree }
    }

    pub fn tree(&self) -> &Arc<ScheduleTree> {
        &self.tree
    }
}

fn model_state(model: &StateModel, theta: &[f64], dim: usize) -> Result<(CMatrix, Vec<CMatrix>)> {
    if model.dim() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: model.dim() });
    }
    let rho = model.state(theta)?.matrix().clone();
    let d = model.derivatives(theta)?.into_iter().map(|h| h.into_matrix()).collect();
    Ok((rho, d))
}

impl Measurement for ScheduleMeasurement {
    fn outcome_count(&self) -> usize {
        self.tree.path_count()
    }

    fn law(&self, model: &StateModel, theta: &[f64]) -> Result<OutcomeLaw> {
        let (rho, d) = model_state(model, theta, self.tree.dim)?;
        Ok(self.tree.law_with(&rho, &d, &rho, &vec![true; self.tree.n_samples]))
    }

    fn probabilities(&self, model: &StateModel, theta: &[f64]) -> Result<Vec<f64>> {
        let rho = model.state(theta)?;
        self.tree.probabilities(&vec![rho.matrix(); self.tree.n_samples])
    }

    fn outcome_name(&self, index: usize) -> String {
        format!("{:?}", self.tree.labels[index])
    }
}

/// Exact joint law of a schedule under a fixed state assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeTree {
    pub labels: Vec<Vec<i64>>,
    pub probs: Vec<f64>,
    /// Paths dropped because their probability is below the null-branch
    /// threshold.
    pub pruned: usize,
}

impl OutcomeTree {
    pub fn probability_of(&self, labels: &[i64]) -> f64 {
        self.labels.iter().position(|l| l == labels).map_or(0.0, |i| self.probs[i])
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

pub fn enumerate(schedule: &AdaptiveSchedule, states: &[DensityOperator]) -> Result<OutcomeTree> {
    let tree = schedule.tree()?;
    let probs = tree.probabilities(&states.iter().map(DensityOperator::matrix).collect::<Vec<_>>())?;
    let mut out = OutcomeTree { labels: Vec::new(), probs: Vec::new(), pruned: 0 };
    for (labels, p) in tree.labels.into_iter().zip(probs) {
        if p < NULL_BRANCH {
            out.pruned += 1;
        } else {
            out.labels.push(labels);
            out.probs.push(p);
        }
    }
    Ok(out)
}

/// Instrument `ω` followed by instrument `followup(ω)`. Branch `k` of the
/// result corresponds to `pairs[k] = (ω, ω′)` and carries label `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedInstrument {
    pub instrument: Instrument,
    pub pairs: Vec<(i64, i64)>,
}

impl ComposedInstrument {
    pub fn label_of(&self, first: i64, second: i64) -> Option<i64> {
        self.pairs.iter().position(|&p| p == (first, second)).map(|k| k as i64)
    }
}

pub fn compose_adaptive(
    first: &Instrument,
    followup: impl Fn(i64) -> Result<Instrument>,
) -> Result<ComposedInstrument> {
    let mut branches = Vec::new();
    let mut pairs = Vec::new();
    for b in first.branches() {
        let next = followup(b.label)?;
        if next.dim() != first.dim() {
            return Err(Error::DimensionMismatch { expected: first.dim(), found: next.dim() });
        }
        for nb in next.branches() {
            let kraus = nb.kraus.iter().flat_map(|k2| b.kraus.iter().map(move |k1| k2 * k1)).collect();
            branches.push((pairs.len() as i64, kraus));
            pairs.push((b.label, nb.label));
        }
    }
    Ok(ComposedInstrument { instrument: Instrument::new(branches)?, pairs })
}

/// Per-path conditional expectation of `values` given the key each path
/// maps to.
fn conditional_means(keys: &[Vec<i64>], probs: &[f64], values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = values.first().map_or(0, Vec::len);
    let mut groups: HashMap<&[i64], (f64, Vec<f64>)> = HashMap::new();
    for ((key, p), v) in keys.iter().zip(probs).zip(values) {
        let entry = groups.entry(key.as_slice()).or_insert_with(|| (0.0, vec![0.0; m]));
        entry.0 += p;
        for (acc, x) in entry.1.iter_mut().zip(v) {
            *acc += p * x;
        }
    }
    keys.iter()
        .map(|key| {
            let (mass, sum) = &groups[key.as_slice()];
            if *mass > 0.0 {
                sum.iter().map(|s| s / mass).collect()
            } else {
                vec![0.0; m]
            }
        })
        .collect()
}

fn expectation(probs: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
    let m = values.first().map_or(0, Vec::len);
    let mut out = vec![0.0; m];
    for (p, v) in probs.iter().zip(values) {
        for (acc, x) in out.iter_mut().zip(v) {
            *acc += p * x;
        }
    }
    out
}

fn second_moment(probs: &[f64], a: &[Vec<f64>], b: &[Vec<f64>]) -> RMatrix {
    let m = a.first().map_or(0, Vec::len);
    let mut out = RMatrix::zeros(m, m);
    for ((p, x), y) in probs.iter().zip(a).zip(b) {
        for i in 0..m {
            for j in 0..m {
                out[(i, j)] += p * x[i] * y[j];
            }
        }
    }
    out
}

fn check_values(tree: &ScheduleTree, values: &[Vec<f64>], m: usize) -> Result<()> {
    if values.len() != tree.path_count() {
        return Err(Error::DimensionMismatch { expected: tree.path_count(), found: values.len() });
    }
    if let Some(bad) = values.iter().find(|v| v.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, found: bad.len() });
    }
    Ok(())
}

/// Finite-difference residual of the Leibniz rule
/// `∂E_θ[T] = ∂E_θ E_{θ₀}[T|𝔅] + ∂E_{θ₀} E_θ[T|𝔅]` at `θ = θ₀`, where `𝔅`
/// is generated by the outcomes up to round `round`, sample `sample`
/// (both one-based). Maximum over coordinates and estimate components.
pub fn leibniz_check(
    tree: &ScheduleTree,
    values: &[Vec<f64>],
    model: &StateModel,
    theta0: &[f64],
    round: usize,
    sample: usize,
) -> Result<f64> {
    check_values(tree, values, model.m())?;
    if round == 0 || round > tree.rounds || sample == 0 || sample > tree.n_samples {
        return Err(Error::InvalidParameter(format!("no position (round {round}, sample {sample}) in the schedule")));
    }
    let theta0 = model.region().admit(theta0)?;
    let prefix = (round - 1) * tree.n_samples + sample;
    let keys: Vec<Vec<i64>> = tree.labels.iter().map(|l| l[..prefix].to_vec()).collect();
    let law_at = |theta: &[f64]| -> Result<Vec<f64>> {
        let rho = model.state(theta)?;
        tree.probabilities(&vec![rho.matrix(); tree.n_samples])
    };
    let p0 = law_at(&theta0)?;
    let c0 = conditional_means(&keys, &p0, values);
    let mut worst: f64 = 0.0;
    for i in 0..model.m() {
        let mut plus = theta0.clone();
        let mut minus = theta0.clone();
        plus[i] += LEIBNIZ_STEP;
        minus[i] -= LEIBNIZ_STEP;
        let (pp, pm) = (law_at(&plus)?, law_at(&minus)?);
        let (cp, cm) = (conditional_means(&keys, &pp, values), conditional_means(&keys, &pm, values));
        let total = sub(&expectation(&pp, values), &expectation(&pm, values));
        let outer = sub(&expectation(&pp, &c0), &expectation(&pm, &c0));
        let inner = sub(&expectation(&p0, &cp), &expectation(&p0, &cm));
        for a in 0..model.m() {
            worst = worst.max((total[a] - outer[a] - inner[a]).abs() / (2.0 * LEIBNIZ_STEP));
        }
    }
    Ok(worst)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Per-sample estimator pieces `F_κ` indexed by path of the schedule tree.
#[derive(Debug, Clone)]
pub struct LocalComponents {
    pub tree: Arc<ScheduleTree>,
    pub theta0: Vec<f64>,
    /// `f[κ][path]`.
    pub f: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionReport {
    /// Covariance of the adaptive estimator at `θ₀`.
    pub v_e: RMatrix,
    /// `Σ_κ V[F_κ]`.
    pub v_f: RMatrix,
    /// Minimum eigenvalue of `V[E] − V[F]`.
    pub psd_gap: f64,
    /// Max-abs entry of `B[S] − I`.
    pub b_error: f64,
    /// Max `|E_{θ₀}[F_κ]|`.
    pub mean_error: f64,
    /// Max-abs entry of `E[f_{r,κ} f_{r',κ'}ᵀ]` over distinct index pairs.
    pub orthogonality: f64,
}

#[derive(Debug, Clone)]
pub struct FakeEnsemble {
    pub components: LocalComponents,
    pub report: ReductionReport,
}

/// Tolerances on the input's local unbiasedness.
const BIAS_TOL: f64 = 1e-8;
const B_TOL: f64 = 1e-6;

/// Splits a locally unbiased adaptive estimator into per-sample pieces
/// `F_κ = Σ_r (E[T|z_{r−1}, z_{r,κ}] − E[T|z_{r−1}])` evaluated at `θ₀`.
pub fn fake_ensemble_reduce(
    tree: Arc<ScheduleTree>,
    values: &[Vec<f64>],
    model: &StateModel,
    theta0: &[f64],
) -> Result<FakeEnsemble> {
    let m = model.m();
    check_values(&tree, values, m)?;
    let theta0 = model.region().admit(theta0)?;
    let (rho0, d0) = model_state(model, &theta0, tree.dim)?;
    let min = linalg::min_eigenvalue(&rho0);
    if min <= 1e-12 {
        return Err(Error::StateNotPositive { min_eigenvalue: min });
    }
    let n = tree.n_samples;
    let law = tree.law_with(&rho0, &d0, &rho0, &vec![true; n]);
    let p0 = &law.probs;
    let mean = expectation(p0, values);
    let bias_error = mean.iter().zip(&theta0).map(|(e, t)| (e - t).abs()).fold(0.0, f64::max);
    let mut b_error: f64 = 0.0;
    for (j, dp) in law.dprobs.iter().enumerate() {
        let col = expectation(dp, values);
        for (i, v) in col.iter().enumerate() {
            b_error = b_error.max((v - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    if bias_error > BIAS_TOL || b_error > B_TOL {
        return Err(Error::NotLocallyUnbiased { bias_error, b_error });
    }

    let mut pieces: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::with_capacity(tree.rounds); n];
    for r in 0..tree.rounds {
        let base: Vec<Vec<i64>> = tree.labels.iter().map(|l| l[..r * n].to_vec()).collect();
        let before = conditional_means(&base, p0, values);
        for (k, per_sample) in pieces.iter_mut().enumerate() {
            let keys: Vec<Vec<i64>> = tree
                .labels
                .iter()
                .map(|l| {
                    let mut key = l[..r * n].to_vec();
                    key.push(l[r * n + k]);
                    key
                })
                .collect();
            let after = conditional_means(&keys, p0, values);
            per_sample.push(after.iter().zip(&before).map(|(a, b)| sub(a, b)).collect());
        }
    }
    let f: Vec<Vec<Vec<f64>>> = pieces
        .iter()
        .map(|rounds| {
            (0..tree.path_count())
                .map(|path| {
                    let mut acc = vec![0.0; m];
                    for piece in rounds {
                        for (a, x) in acc.iter_mut().zip(&piece[path]) {
                            *a += x;
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();

    let centered: Vec<Vec<f64>> = values.iter().map(|v| sub(v, &mean)).collect();
    let v_e = second_moment(p0, &centered, &centered);
    let v_f = f.iter().fold(RMatrix::zeros(m, m), |acc, fk| acc + second_moment(p0, fk, fk));
    let gap = &v_e - &v_f;
    let psd_gap = linalg::min_symmetric_eigenvalue(&gap);
    let mean_error = f.iter().flat_map(|fk| expectation(p0, fk)).map(f64::abs).fold(0.0, f64::max);

    let flat: Vec<&Vec<Vec<f64>>> = pieces.iter().flatten().collect();
    let mut orthogonality: f64 = 0.0;
    for a in 0..flat.len() {
        for b in 0..flat.len() {
            if a != b {
                orthogonality = orthogonality.max(linalg::max_abs_real(&second_moment(p0, flat[a], flat[b])));
            }
        }
    }

    let mut b_s = RMatrix::zeros(m, m);
    for (k, fk) in f.iter().enumerate() {
        let live: Vec<bool> = (0..n).map(|j| j == k).collect();
        let fake = tree.law_with(&rho0, &d0, &rho0, &live);
        for (j, dp) in fake.dprobs.iter().enumerate() {
            for (i, v) in expectation(dp, fk).iter().enumerate() {
                b_s[(i, j)] += v;
            }
        }
    }
    let b_error = linalg::max_abs_real(&(b_s - RMatrix::identity(m, m)));

    Ok(FakeEnsemble {
        components: LocalComponents { tree, theta0, f },
        report: ReductionReport { v_e, v_f, psd_gap, b_error, mean_error, orthogonality },
    })
}

/// Sample `x` uniformly from `1..=n`, run fake ensemble `x` and report
/// `n·F_x(y) + θ₀`. Outcome index is `x·paths + path`.
#[derive(Debug, Clone)]
pub struct RandomizedFake {
    tree: Arc<ScheduleTree>,
    theta0: Vec<f64>,
}

impl Measurement for RandomizedFake {
    fn outcome_count(&self) -> usize {
        self.tree.n_samples * self.tree.path_count()
    }

    fn law(&self, model: &StateModel, theta: &[f64]) -> Result<OutcomeLaw> {
        let (rho, d) = model_state(model, theta, self.tree.dim)?;
        let rho0 = model.state(&self.theta0)?.matrix().clone();
        let n = self.tree.n_samples;
        let mut probs = Vec::with_capacity(self.outcome_count());
        let mut dprobs = vec![Vec::with_capacity(self.outcome_count()); d.len()];
        for x in 0..n {
            let live: Vec<bool> = (0..n).map(|j| j == x).collect();
            let fake = self.tree.law_with(&rho, &d, &rho0, &live);
            probs.extend(fake.probs.iter().map(|p| p / n as f64));
            for (acc, dp) in dprobs.iter_mut().zip(&fake.dprobs) {
                acc.extend(dp.iter().map(|v| v / n as f64));
            }
        }
        Ok(OutcomeLaw { probs, dprobs })
    }
}

pub fn randomize_single_sample(components: &LocalComponents) -> Result<Estimator> {
    let n = components.f.len();
    let values = components
        .f
        .iter()
        .flat_map(|fk| fk.iter().map(|v| v.iter().zip(&components.theta0).map(|(x, t)| n as f64 * x + t).collect()))
        .collect();
    let measurement = RandomizedFake { tree: components.tree.clone(), theta0: components.theta0.clone() };
    Estimator::new(Arc::new(measurement), values, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::{evaluate_exact, locally_unbiased_estimator, rebias_estimator};
    use crate::models::qubit_z;
    use crate::quantum::{posterior_state, Povm};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn luders(p: Povm) -> Instrument {
        Instrument::luders(&p)
    }

    fn z_state(t: f64) -> DensityOperator {
        DensityOperator::bloch([0.0, 0.0, t]).unwrap()
    }

    /// Two samples, two rounds: weak z on both, then a sharper z when the
    /// first-round outcomes agree and a sharp z otherwise.
    fn binary_schedule() -> AdaptiveSchedule {
        AdaptiveSchedule::new(2, 2, 2, |r, _, h| {
            Ok(match r {
                0 => luders(Povm::weak_axis([0.0, 0.0, 1.0], 0.6)?),
                _ if h[0] == h[1] => luders(Povm::weak_axis([0.0, 0.0, 1.0], 0.8)?),
                _ => luders(Povm::pauli_z()),
            })
        })
        .unwrap()
    }

    fn random_lu_values(tree: &Arc<ScheduleTree>, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meas: Arc<dyn Measurement> = Arc::new(ScheduleMeasurement::from_tree(tree.clone()));
        let raw: Vec<Vec<f64>> = (0..tree.path_count()).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let est = Estimator::new(meas, raw, None).unwrap();
        rebias_estimator(&est, &qubit_z(), &[0.3]).unwrap().values().to_vec()
    }

    #[test]
    fn compose_examples() {
        let z = luders(Povm::pauli_z());
        let x = luders(Povm::pauli_x());
        let c = compose_adaptive(&z, |_| Ok(x.clone())).unwrap();
        let half = DensityOperator::maximally_mixed(2);
        for b in c.instrument.branches() {
            let p = c.instrument.apply_branch(b.label, half.matrix()).unwrap().trace().re;
            assert!((p - 0.25).abs() < 1e-15);
        }
        let c = compose_adaptive(&z, |w| Ok(if w == 0 { z.clone() } else { x.clone() })).unwrap();
        let rho = z_state(0.3);
        let prob = |a, b| {
            let l = c.label_of(a, b).unwrap();
            c.instrument.apply_branch(l, rho.matrix()).unwrap().trace().re
        };
        assert!((prob(0, 0) - 0.65).abs() < 1e-15 && prob(0, 1).abs() < 1e-15);
        assert!((prob(1, 0) - 0.175).abs() < 1e-15 && (prob(1, 1) - 0.175).abs() < 1e-15);
        let trivial = luders(Povm::trivial(2));
        let c = compose_adaptive(&z, |_| Ok(trivial.clone())).unwrap();
        for (k, &(w, _)) in c.pairs.iter().enumerate() {
            let joint = c.instrument.apply_branch(k as i64, rho.matrix()).unwrap();
            assert!(linalg::max_abs(&(joint - z.apply_branch(w, rho.matrix()).unwrap())) < 1e-15);
        }
    }

    #[test]
    fn enumerate_examples() {
        let single = AdaptiveSchedule::product(vec![luders(Povm::pauli_z())]).unwrap();
        let t = enumerate(&single, &[z_state(0.3)]).unwrap();
        assert_eq!(t.labels, vec![vec![0], vec![1]]);
        assert!((t.probs[0] - 0.65).abs() < 1e-15 && (t.probs[1] - 0.35).abs() < 1e-15);

        let pair = AdaptiveSchedule::product(vec![luders(Povm::pauli_z()), luders(Povm::pauli_z())]).unwrap();
        let t = enumerate(&pair, &[z_state(0.3), z_state(-0.2)]).unwrap();
        assert_eq!(t.labels.len(), 4);
        assert!((t.probability_of(&[0, 1]) - 0.65 * 0.6).abs() < 1e-15);

        let z = luders(Povm::pauli_z());
        let x = luders(Povm::pauli_x());
        let (zc, xc) = (z.clone(), x.clone());
        let adaptive =
            AdaptiveSchedule::new(1, 2, 2, move |r, _, h| Ok(if r == 0 || h[0] == 0 { zc.clone() } else { xc.clone() }))
                .unwrap();
        let t = enumerate(&adaptive, &[z_state(0.3)]).unwrap();
        assert_eq!(t.pruned, 1);
        let c = compose_adaptive(&z, |w| Ok(if w == 0 { z.clone() } else { x.clone() })).unwrap();
        for (k, &(a, b)) in c.pairs.iter().enumerate() {
            let p = c.instrument.apply_branch(k as i64, z_state(0.3).matrix()).unwrap().trace().re;
            assert!((p - t.probability_of(&[a, b])).abs() < 1e-12);
        }
        assert!((t.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tree_too_large_is_rejected() {
        let s = AdaptiveSchedule::new(20, 1, 2, |_, _, _| Ok(Instrument::luders(&Povm::pauli_z()))).unwrap();
        assert!(matches!(s.tree(), Err(Error::TreeTooLarge { .. })));
    }

    #[test]
    fn leibniz_examples() {
        let model = qubit_z();
        let single = AdaptiveSchedule::product(vec![luders(Povm::pauli_z())]).unwrap();
        let tree = single.tree().unwrap();
        let values = vec![vec![1.0], vec![-1.0]];
        assert!(leibniz_check(&tree, &values, &model, &[0.3], 1, 1).unwrap() < 1e-10);

        let pair = AdaptiveSchedule::product(vec![luders(Povm::pauli_z()), luders(Povm::pauli_z())]).unwrap();
        let tree = pair.tree().unwrap();
        let additive: Vec<Vec<f64>> =
            tree.labels().iter().map(|l| vec![l.iter().map(|&x| if x == 0 { 0.5 } else { -0.5 }).sum()]).collect();
        assert!(leibniz_check(&tree, &additive, &model, &[0.3], 1, 1).unwrap() < 1e-6);

        let tree = Arc::new(binary_schedule().tree().unwrap());
        let values = random_lu_values(&tree, 5);
        for (r, k) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!(leibniz_check(&tree, &values, &model, &[0.3], r, k).unwrap() < 5e-4);
        }
    }

    #[test]
    fn fake_ensemble_fixed_point() {
        let model = qubit_z();
        let z = luders(Povm::pauli_z());
        let pair = AdaptiveSchedule::product(vec![z.clone(), z]).unwrap();
        let tree = Arc::new(pair.tree().unwrap());
        // T = θ₀ + F₁(z₁) + F₂(z₂) with per-sample locally unbiased pieces.
        let lue = locally_unbiased_estimator(&model, &[0.3], Arc::new(Povm::pauli_z())).unwrap();
        let piece = |w: i64| 0.5 * (lue.value(w as usize)[0] - 0.3);
        let values: Vec<Vec<f64>> = tree.labels().iter().map(|l| vec![0.3 + piece(l[0]) + piece(l[1])]).collect();
        let fe = fake_ensemble_reduce(tree.clone(), &values, &model, &[0.3]).unwrap();
        for (k, fk) in fe.components.f.iter().enumerate() {
            for (path, v) in fk.iter().enumerate() {
                assert!((v[0] - piece(tree.labels()[path][k])).abs() < 1e-12);
            }
        }
        assert!(linalg::max_abs_real(&(&fe.report.v_e - &fe.report.v_f)) < 1e-12);
    }

    #[test]
    fn fake_ensemble_on_adaptive_schedule() {
        let model = qubit_z();
        let tree = Arc::new(binary_schedule().tree().unwrap());
        assert_eq!(tree.path_count(), 16);
        let values = random_lu_values(&tree, 17);
        let fe = fake_ensemble_reduce(tree.clone(), &values, &model, &[0.3]).unwrap();
        let r = &fe.report;
        assert!(r.psd_gap >= -1e-10);
        assert!(r.b_error < 1e-6);
        assert!(r.orthogonality < 1e-12);
        assert!(r.mean_error < 1e-12);

        let doubled: Vec<Vec<f64>> = values.iter().map(|v| vec![2.0 * v[0] - 0.3]).collect();
        assert!(matches!(
            fake_ensemble_reduce(tree, &doubled, &model, &[0.3]),
            Err(Error::NotLocallyUnbiased { .. })
        ));
    }

    fn scaled_components(scales: &[f64]) -> LocalComponents {
        let z = luders(Povm::pauli_z());
        let sched = AdaptiveSchedule::product(vec![z; scales.len()]).unwrap();
        let tree = Arc::new(sched.tree().unwrap());
        // qubit-z at θ₀ = 0: outcomes ±1 equally likely.
        let f = scales
            .iter()
            .enumerate()
            .map(|(k, &c)| tree.labels().iter().map(|l| vec![if l[k] == 0 { c } else { -c }]).collect())
            .collect();
        LocalComponents { tree, theta0: vec![0.0], f }
    }

    #[test]
    fn randomization_examples() {
        let g = RMatrix::identity(1, 1);
        let model = qubit_z();
        let cases: [(&[f64], f64); 3] =
            [(&[0.5f64.sqrt(), 0.5f64.sqrt()], 2.0), (&[1.0], 1.0), (&[0.2f64.sqrt(), 0.3f64.sqrt(), 0.5f64.sqrt()], 3.0)];
        for (scales, expected) in cases {
            let comps = scaled_components(scales);
            let est = randomize_single_sample(&comps).unwrap();
            let report = evaluate_exact(&est, &model, &[0.0], &g).unwrap();
            assert!((report.variance[(0, 0)] - expected).abs() < 1e-12, "{scales:?}");
            assert!(report.bias[0].abs() < 1e-12);
        }
        let comps = scaled_components(&[1.0]);
        let est = randomize_single_sample(&comps).unwrap();
        assert_eq!(est.values(), &[vec![1.0], vec![-1.0]]);
    }

    #[test]
    fn randomized_estimator_is_locally_unbiased() {
        let model = qubit_z();
        let tree = Arc::new(binary_schedule().tree().unwrap());
        let values = random_lu_values(&tree, 3);
        let fe = fake_ensemble_reduce(tree, &values, &model, &[0.3]).unwrap();
        let est = randomize_single_sample(&fe.components).unwrap();
        let r = evaluate_exact(&est, &model, &[0.3], &RMatrix::identity(1, 1)).unwrap();
        assert!(r.bias[0].abs() < 1e-10);
        assert!((r.b_matrix[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((r.variance[(0, 0)] - 2.0 * fe.report.v_f[(0, 0)]).abs() < 1e-12);
    }

    fn random_instrument(rng: &mut ChaCha8Rng) -> Instrument {
        let k = rng.random_range(2..=3);
        Instrument::luders(&Povm::random(2, k, rng))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn random_schedules_are_normalized(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table: Vec<Instrument> = (0..8).map(|_| random_instrument(&mut rng)).collect();
            let sched = AdaptiveSchedule::new(2, 2, 2, move |r, k, h| {
                let idx = (r * 2 + k + h.iter().map(|&x| x as usize).sum::<usize>()) % table.len();
                Ok(table[idx].clone())
            }).unwrap();
            let states = [DensityOperator::random(2, &mut rng), DensityOperator::random(2, &mut rng)];
            let t = enumerate(&sched, &states).unwrap();
            prop_assert!((t.total() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn posterior_mixture_matches_total_channel(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instrument(&mut rng);
            let rho = DensityOperator::random(2, &mut rng);
            let mut mix = CMatrix::zeros(2, 2);
            for b in inst.branches() {
                if let Ok((p, post)) = posterior_state(&rho, &inst, b.label) {
                    mix += post.matrix().scale(p);
                }
            }
            prop_assert!(linalg::max_abs(&(mix - inst.apply_total(rho.matrix()))) < 1e-12);
        }

        #[test]
        fn compose_matches_sequential_sampling(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let first = random_instrument(&mut rng);
            let follow: Vec<Instrument> = (0..3).map(|_| random_instrument(&mut rng)).collect();
            let rho = DensityOperator::random(2, &mut rng);
            let c = compose_adaptive(&first, |w| Ok(follow[w as usize % 3].clone())).unwrap();
            let mut total = 0.0;
            for (k, &(a, b)) in c.pairs.iter().enumerate() {
                let joint = c.instrument.apply_branch(k as i64, rho.matrix()).unwrap().trace().re;
                let (p1, post) = posterior_state(&rho, &first, a).unwrap();
                let (p2, _) = posterior_state(&post, &follow[a as usize % 3], b).unwrap();
                prop_assert!((joint - p1 * p2).abs() < 1e-12);
                total += joint;
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
