//! Two-step adaptive estimation: preliminary tomography on `n0` samples,
//! then a locally unbiased estimator tuned at the preliminary estimate,
//! averaged over `n2` blocks of `n1` copies.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fisher::{self, EstimationReport, Estimator, Measurement, OutcomeSampler};
use crate::linalg::{self, CMatrix, RMatrix};
use crate::models::{self, ModelKind, StateModel};
use crate::quantum::Povm;

/// Largest `n2` with `ceil(n2^{3/4}) + n1·n2 ≤ n`; returns `(n0, n2)` with
/// the slack absorbed into `n0`.
pub fn allocate(n: usize, n1: usize) -> Result<(usize, usize)> {
    if n1 == 0 || n < 1 + n1 {
        return Err(Error::Infeasible { n, n1 });
    }
    let mut n2 = (n - 1) / n1;
    while n2 >= 1 {
        if ceil_three_quarters(n2) + n1 * n2 <= n {
            return Ok((n - n1 * n2, n2));
        }
        n2 -= 1;
    }
    Err(Error::Infeasible { n, n1 })
}

/// Smallest `c` with `c⁴ ≥ k³`, i.e. `ceil(k^{3/4})` in exact arithmetic.
pub fn ceil_three_quarters(k: usize) -> usize {
    let target = (k as u128).pow(3);
    let mut c = (k as f64).powf(0.75).floor().max(0.0) as u128;
    while c > 0 && (c - 1).pow(4) >= target {
        c -= 1;
    }
    while c.pow(4) < target {
        c += 1;
    }
    c as usize
}

/// An informationally complete POVM on `dim` dimensions: tensor powers of
/// the six-outcome Pauli POVM for qubit registers, otherwise normalized
/// projectors onto `|j⟩`, `|j⟩+|k⟩` and `|j⟩+i|k⟩`.
pub fn tomography_povm(dim: usize) -> Povm {
    if dim.is_power_of_two() && dim >= 2 {
        let mut povm = Povm::pauli_six();
        let mut d = 2;
        while d < dim {
            povm = povm.tensor(&Povm::pauli_six());
            d *= 2;
        }
        return povm;
    }
    let mut seeds = Vec::new();
    let unit = |j: usize| {
        let mut v = nalgebra::DVector::zeros(dim);
        v[j] = linalg::c(1.0, 0.0);
        v
    };
    for j in 0..dim {
        seeds.push(unit(j));
        for k in j + 1..dim {
            seeds.push((unit(j) + unit(k)).unscale(2f64.sqrt()));
            seeds.push((unit(j) + unit(k) * linalg::c(0.0, 1.0)).unscale(2f64.sqrt()));
        }
    }
    let projectors: Vec<CMatrix> = seeds.iter().map(|v| v * v.adjoint()).collect();
    let sum = projectors.iter().fold(CMatrix::zeros(dim, dim), |acc, p| acc + p);
    let w = linalg::inv_sqrt_pd(&sum);
    Povm::from_elements(projectors.iter().map(|p| linalg::symmetrize(&(&w * p * &w))).collect())
        .expect("normalized tomography POVM")
}

#[derive(Debug, Clone)]
enum Readout {
    /// Closed-form Bloch-vector fit for the qubit built-ins.
    Bloch(ModelKind),
    LeastSquares,
}

/// Preliminary POVM plus a projection of empirical frequencies into the
/// parameter region.
#[derive(Debug, Clone)]
pub struct PreliminaryEstimator {
    povm: Povm,
    model: StateModel,
    readout: Readout,
}

impl PreliminaryEstimator {
    /// Pauli tomography with a Bloch readout for qubit built-ins, otherwise
    /// tomography plus least squares.
    pub fn for_model(model: &StateModel) -> Result<Self> {
        let readout = match model.kind() {
            kind @ (ModelKind::QubitZ | ModelKind::QubitPhase { .. } | ModelKind::BlochEquator) => {
                Readout::Bloch(kind.clone())
            }
            _ => Readout::LeastSquares,
        };
        let est = Self { povm: tomography_povm(model.dim()), model: model.clone(), readout };
        est.check_identifiable()?;
        Ok(est)
    }

    /// User-supplied POVM with least-squares projection.
    pub fn with_povm(model: &StateModel, povm: Povm) -> Result<Self> {
        if povm.dim() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), found: povm.dim() });
        }
        let est = Self { povm, model: model.clone(), readout: Readout::LeastSquares };
        est.check_identifiable()?;
        Ok(est)
    }

    pub fn povm(&self) -> &Povm {
        &self.povm
    }

    fn check_identifiable(&self) -> Result<()> {
        let m = self.model.m();
        let law = self.povm.law(&self.model, &self.model.region().center())?;
        let mut gram = RMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                gram[(i, j)] = law.dprobs[i].iter().zip(&law.dprobs[j]).map(|(a, b)| a * b).sum();
            }
        }
        let (values, _) = linalg::symmetric_eigen(&gram);
        let top = values.last().copied().unwrap_or(0.0);
        let rank = values.iter().filter(|&&v| v > 1e-10 * top && v > 0.0).count();
        if rank < m {
            return Err(Error::IdentifiabilityFailure { rank, m });
        }
        Ok(())
    }

    /// θ̂ from empirical outcome frequencies, always inside the region.
    pub fn estimate(&self, frequencies: &[f64]) -> Result<Vec<f64>> {
        if frequencies.len() != self.povm.len() {
            return Err(Error::DimensionMismatch { expected: self.povm.len(), found: frequencies.len() });
        }
        let region = self.model.region();
        match &self.readout {
            Readout::Bloch(kind) => {
                let r: Vec<f64> = (0..3).map(|a| 3.0 * (frequencies[2 * a] - frequencies[2 * a + 1])).collect();
                let raw = match kind {
                    ModelKind::QubitZ => vec![r[2]],
                    ModelKind::QubitPhase { .. } => vec![if r[0] == 0.0 && r[1] == 0.0 { 0.0 } else { r[1].atan2(r[0]) }],
                    _ => vec![r[0], r[1]],
                };
                Ok(region.clip(&raw))
            }
            Readout::LeastSquares => self.least_squares(frequencies),
        }
    }

    pub fn estimate_from_counts(&self, counts: &[usize]) -> Result<Vec<f64>> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidParameter("no preliminary samples".into()));
        }
        let f: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        self.estimate(&f)
    }

    fn residual(&self, theta: &[f64], f: &[f64]) -> Result<f64> {
        let p = self.povm.probabilities(&self.model, theta)?;
        Ok(p.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// Grid search for a starting point, then damped Gauss–Newton.
    fn least_squares(&self, f: &[f64]) -> Result<Vec<f64>> {
        let region = self.model.region();
        let m = region.m();
        let per_axis = ((4096f64).powf(1.0 / m as f64).floor() as usize).clamp(2, 41);
        let mut best = region.center();
        let mut best_cost = self.residual(&best, f)?;
        let mut index = vec![0usize; m];
        loop {
            let theta: Vec<f64> = (0..m)
                .map(|i| {
                    let lo = region.lower()[i] + region.margin();
                    let hi = region.upper()[i] - region.margin();
                    lo + (hi - lo) * index[i] as f64 / (per_axis - 1) as f64
                })
                .collect();
            let theta = region.clip(&theta);
            let cost = self.residual(&theta, f)?;
            if cost < best_cost {
                best = theta;
                best_cost = cost;
            }
            let mut k = 0;
            while k < m {
                index[k] += 1;
                if index[k] < per_axis {
                    break;
                }
                index[k] = 0;
                k += 1;
            }
            if k == m {
                break;
            }
        }
        let mut damping = 1e-6;
        for _ in 0..50 {
            let law = self.povm.law(&self.model, &best)?;
            let r: Vec<f64> = law.probs.iter().zip(f).map(|(p, q)| q - p).collect();
            let mut jtj = RMatrix::zeros(m, m);
            let mut jtr = nalgebra::DVector::zeros(m);
            for i in 0..m {
                jtr[i] = law.dprobs[i].iter().zip(&r).map(|(d, x)| d * x).sum();
                for j in 0..m {
                    jtj[(i, j)] = law.dprobs[i].iter().zip(&law.dprobs[j]).map(|(a, b)| a * b).sum();
                }
            }
            let mut improved = false;
            while damping < 1e6 {
                let step = linalg::pinv(&(&jtj + RMatrix::identity(m, m) * damping)) * &jtr;
                let trial = region.clip(&best.iter().zip(step.iter()).map(|(t, s)| t + s).collect::<Vec<_>>());
                let cost = self.residual(&trial, f)?;
                if cost < best_cost {
                    let converged = best_cost - cost < 1e-15 * (1.0 + best_cost);
                    best = trial;
                    best_cost = cost;
                    damping = (damping * 0.1).max(1e-12);
                    improved = !converged;
                    break;
                }
                damping *= 10.0;
            }
            if !improved {
                break;
            }
        }
        Ok(best)
    }
}

pub type LueFactory = Arc<dyn Fn(&[f64]) -> Result<Estimator> + Send + Sync>;

/// SLD-eigenbasis measurement with the locally unbiased estimator for
/// scalar models; Pauli-tomography LUE otherwise.
pub fn default_lue_factory(block_model: &StateModel) -> LueFactory {
    let model = block_model.clone();
    if model.m() == 1 {
        Arc::new(move |theta0: &[f64]| {
            let l = fisher::sld(&model, theta0, 0)?;
            let (_, basis) = linalg::hermitian_eigen(l.matrix());
            let povm: Arc<dyn Measurement> = Arc::new(Povm::projective(&basis)?);
            fisher::locally_unbiased_estimator(&model, theta0, povm)
        })
    } else {
        let povm: Arc<dyn Measurement> = Arc::new(tomography_povm(model.dim()));
        Arc::new(move |theta0: &[f64]| fisher::locally_unbiased_estimator(&model, theta0, povm.clone()))
    }
}

#[derive(Clone)]
pub struct TwoStepConfig {
    pub n: usize,
    pub n1: usize,
    pub seed: u64,
    pub lue_factory: LueFactory,
    pub preliminary: PreliminaryEstimator,
    /// `ρ_θ^{⊗n1}`; the block estimator's measurement acts on this model.
    pub block_model: StateModel,
}

impl fmt::Debug for TwoStepConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TwoStepConfig")
            .field("n", &self.n)
            .field("n1", &self.n1)
            .field("seed", &self.seed)
            .field("preliminary", &self.preliminary)
            .field("block_model", &self.block_model)
            .finish()
    }
}

impl TwoStepConfig {
    pub fn new(model: &StateModel, n: usize, n1: usize, seed: u64) -> Result<Self> {
        allocate(n, n1)?;
        let block_model = models::tensor_power(model, n1)?;
        Ok(Self {
            n,
            n1,
            seed,
            lue_factory: default_lue_factory(&block_model),
            preliminary: PreliminaryEstimator::for_model(model)?,
            block_model,
        })
    }

    pub fn with_factory(mut self, factory: LueFactory) -> Self {
        self.lue_factory = factory;
        self
    }

    pub fn with_preliminary(mut self, preliminary: PreliminaryEstimator) -> Self {
        self.preliminary = preliminary;
        self
    }

    /// `(n0, n2)`.
    pub fn allocation(&self) -> Result<(usize, usize)> {
        allocate(self.n, self.n1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub estimate: Vec<f64>,
    pub theta0: Vec<f64>,
    /// The factory failed at `theta0` and the estimate fell back to it.
    pub flagged: bool,
}

/// Independent RNG stream for one Monte Carlo trial.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// One run of the two-step estimator at `theta_true`.
pub fn run_two_step<R: Rng + ?Sized>(
    model: &StateModel,
    theta_true: &[f64],
    cfg: &TwoStepConfig,
    rng: &mut R,
) -> Result<TrialOutcome> {
    let (n0, n2) = cfg.allocation()?;
    let prelim = &cfg.preliminary;
    let sampler = OutcomeSampler::new(&prelim.povm.probabilities(model, theta_true)?)?;
    let mut counts = vec![0usize; prelim.povm.len()];
    for _ in 0..n0 {
        counts[sampler.sample(rng)] += 1;
    }
    let theta0 = prelim.estimate_from_counts(&counts)?;
    let est = match (cfg.lue_factory)(&theta0) {
        Ok(est) => est,
        Err(_) => return Ok(TrialOutcome { estimate: theta0.clone(), theta0, flagged: true }),
    };
    let sampler = OutcomeSampler::new(&est.measurement().probabilities(&cfg.block_model, theta_true)?)?;
    let mut sum = vec![0.0; est.m()];
    for _ in 0..n2 {
        for (acc, v) in sum.iter_mut().zip(est.value(sampler.sample(rng))) {
            *acc += v;
        }
    }
    let estimate = sum.into_iter().map(|s| s / n2 as f64).collect();
    Ok(TrialOutcome { estimate, theta0, flagged: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub report: EstimationReport,
    pub per_trial_estimates: Vec<Vec<f64>>,
    pub ks_stat: Option<f64>,
    pub n0: usize,
    pub n1: usize,
    pub n2: usize,
    pub flagged_trials: usize,
}

/// Runs `trials` independent two-step estimates. Trial `k` draws from
/// stream `k` of the configured seed, so results do not depend on
/// `workers` (0 means the rayon default).
pub fn monte_carlo(
    model: &StateModel,
    theta_true: &[f64],
    cfg: &TwoStepConfig,
    trials: usize,
    g: &RMatrix,
    workers: usize,
) -> Result<McResult> {
    if trials < 2 {
        return Err(Error::InvalidParameter(format!("monte carlo needs at least 2 trials, got {trials}")));
    }
    let m = model.m();
    if g.nrows() != m || g.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, found: g.nrows() });
    }
    let theta = model.region().admit(theta_true)?;
    let (n0, n2) = cfg.allocation()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<TrialOutcome> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|k| run_two_step(model, &theta, cfg, &mut trial_rng(cfg.seed, k as u64)))
            .collect::<Result<Vec<_>>>()
    })?;
    let estimates: Vec<Vec<f64>> = outcomes.iter().map(|o| o.estimate.clone()).collect();
    let report = sample_report(&estimates, &theta, g, cfg.n);
    let mut result = McResult {
        report,
        per_trial_estimates: estimates,
        ks_stat: None,
        n0,
        n1: cfg.n1,
        n2,
        flagged_trials: outcomes.iter().filter(|o| o.flagged).count(),
    };
    if m == 1 {
        result.ks_stat = normality_ks(&result, model, &theta).ok();
    }
    Ok(result)
}

/// Empirical moments of i.i.d. estimates around `theta`. `b_matrix` is not
/// observable from samples and is reported as NaN.
pub fn sample_report(estimates: &[Vec<f64>], theta: &[f64], g: &RMatrix, n: usize) -> EstimationReport {
    let m = theta.len();
    let trials = estimates.len();
    let tf = trials as f64;
    let mut mean = vec![0.0; m];
    let mut mse = RMatrix::zeros(m, m);
    for t in estimates {
        for a in 0..m {
            mean[a] += t[a] / tf;
            for b in 0..m {
                mse[(a, b)] += (t[a] - theta[a]) * (t[b] - theta[b]) / tf;
            }
        }
    }
    let bias: Vec<f64> = mean.iter().zip(theta).map(|(e, t)| e - t).collect();
    let mut variance = mse.clone();
    for a in 0..m {
        for b in 0..m {
            variance[(a, b)] -= bias[a] * bias[b];
        }
    }
    let mut stderr = RMatrix::zeros(m, m);
    let mut cost_terms = Vec::with_capacity(trials);
    for t in estimates {
        let e: Vec<f64> = t.iter().zip(theta).map(|(x, y)| x - y).collect();
        let mut cost = 0.0;
        for a in 0..m {
            for b in 0..m {
                let dev = e[a] * e[b] - mse[(a, b)];
                stderr[(a, b)] += dev * dev;
                cost += g[(b, a)] * e[a] * e[b];
            }
        }
        cost_terms.push(cost);
    }
    let denom = (tf - 1.0).max(1.0);
    stderr.iter_mut().for_each(|s| *s = (*s / denom).sqrt() / tf.sqrt());
    let cost_mean = cost_terms.iter().sum::<f64>() / tf;
    let cost_var = cost_terms.iter().map(|c| (c - cost_mean).powi(2)).sum::<f64>() / denom;
    EstimationReport {
        theta: theta.to_vec(),
        weighted_cost: n as f64 * linalg::real_trace_product(g, &mse),
        weighted_cost_stderr: n as f64 * cost_var.sqrt() / tf.sqrt(),
        mse,
        variance,
        bias,
        b_matrix: RMatrix::from_element(m, m, f64::NAN),
        n,
        trials,
        stderr,
    }
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `samples` and
/// the standard normal CDF.
pub fn ks_statistic(samples: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let f = normal.cdf(z);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// KS statistic of `√n (T − θ) / √V` against N(0, 1), with `V` the inverse
/// SLD Fisher information of one copy.
pub fn normality_ks(mc: &McResult, model: &StateModel, theta: &[f64]) -> Result<f64> {
    if model.m() != 1 {
        return Err(Error::MultiparameterUnsupported(model.m()));
    }
    let j = fisher::qfi_sld(model, theta)?.matrix[(0, 0)];
    if !(j > 0.0) {
        return Err(Error::SingularFisher { condition: f64::INFINITY });
    }
    let scale = (mc.report.n as f64 * j).sqrt();
    let z: Vec<f64> = mc.per_trial_estimates.iter().map(|t| (t[0] - theta[0]) * scale).collect();
    Ok(ks_statistic(&z))
}
