//! Channel-family estimation: interiority of the linearized family, its
//! extreme-point decomposition, interleaved schemes and the scaling
//! experiment contrasting product probes with GHZ probes.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::fisher::{Estimator, FisherKind, FisherMatrix, Measurement, OutcomeSampler};
use crate::linalg::{self, c, CMatrix, RMatrix};
use crate::models::{self, ChannelKind, ChannelModel, StateModel};
use crate::quantum::{self, DensityOperator, KrausChannel, Povm};
use crate::twostep::{self, TwoStepConfig};

/// Choi eigenvalues above `-CP_TOL` count as completely positive.
pub const CP_TOL: f64 = 1e-10;
/// Mixture weights at or below this are on the boundary.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// `Choi(Λ_θ) + Σ u^i Choi(∂_iΛ_θ)`.
fn linearized_choi(base: &CMatrix, derivs: &[CMatrix], u: &[f64]) -> CMatrix {
    derivs.iter().zip(u).fold(base.clone(), |acc, (d, &s)| acc + d.scale(s))
}

fn choi_and_derivatives(cm: &ChannelModel, theta: &[f64]) -> Result<(CMatrix, Vec<CMatrix>)> {
    let base = cm.choi(theta)?.into_matrix();
    let derivs = (0..cm.m()).map(|i| cm.choi_derivative(theta, i).map(|d| d.into_matrix())).collect::<Result<_>>()?;
    Ok((base, derivs))
}

/// True when the linearized family stays completely positive on the ℓ₁
/// ball of radius `eps` around `theta`; checked at the `2m` vertices.
pub fn interiority_check(cm: &ChannelModel, theta: &[f64], eps: f64) -> Result<bool> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("radius {eps} must be positive")));
    }
    let (base, derivs) = choi_and_derivatives(cm, theta)?;
    for i in 0..cm.m() {
        for sign in [1.0, -1.0] {
            let mut u = vec![0.0; cm.m()];
            u[i] = sign * eps;
            if linalg::min_eigenvalue(&linearized_choi(&base, &derivs, &u)) < -CP_TOL {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Vertices `θ₀ ± eps·e_i` of the ℓ₁ ball with the channels of the
/// linearized family there, and affine weights reproducing every point
/// of the ball as a mixture.
#[derive(Debug, Clone)]
pub struct ExtremeDecomposition {
    pub theta0: Vec<f64>,
    pub eps: f64,
    /// Ordered `θ₀ + eps·e_0, θ₀ − eps·e_0, θ₀ + eps·e_1, …`.
    pub vertices: Vec<Vec<f64>>,
    pub components: Vec<KrausChannel>,
    input_dim: usize,
    output_dim: usize,
    base_choi: CMatrix,
    derivative_chois: Vec<CMatrix>,
}

impl ExtremeDecomposition {
    pub fn m(&self) -> usize {
        self.theta0.len()
    }

    /// `p(x_i±) = 1/(2m) ± (θ^i − θ₀^i)/(2 eps)`.
    pub fn weights(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let m = self.m();
        if theta.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: theta.len() });
        }
        let uniform = 1.0 / (2 * m) as f64;
        Ok((0..m)
            .flat_map(|i| {
                let delta = (theta[i] - self.theta0[i]) / (2.0 * self.eps);
                [uniform + delta, uniform - delta]
            })
            .collect())
    }

    /// `∂_j p(x)`, constant in θ.
    pub fn weight_derivatives(&self) -> Vec<Vec<f64>> {
        let m = self.m();
        (0..m)
            .map(|j| {
                (0..m)
                    .flat_map(|i| {
                        let s = if i == j { 1.0 / (2.0 * self.eps) } else { 0.0 };
                        [s, -s]
                    })
                    .collect()
            })
            .collect()
    }

    /// `Σ_x p(x) Choi(Λ_x)`.
    pub fn mixture_choi(&self, theta: &[f64]) -> Result<CMatrix> {
        let w = self.weights(theta)?;
        let d = self.input_dim * self.output_dim;
        Ok(self.components.iter().zip(&w).fold(CMatrix::zeros(d, d), |acc, (ch, &p)| acc + quantum::choi(ch).matrix().scale(p)))
    }

    /// `Choi(Λ_{θ₀}) + Σ (θ^i − θ₀^i) Choi(∂_iΛ_{θ₀})`.
    pub fn linearized_choi(&self, theta: &[f64]) -> Result<CMatrix> {
        if theta.len() != self.m() {
            return Err(Error::DimensionMismatch { expected: self.m(), found: theta.len() });
        }
        let u: Vec<f64> = theta.iter().zip(&self.theta0).map(|(t, t0)| t - t0).collect();
        Ok(linearized_choi(&self.base_choi, &self.derivative_chois, &u))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
}

pub fn extreme_decomposition(cm: &ChannelModel, theta0: &[f64], eps: f64) -> Result<ExtremeDecomposition> {
    if !interiority_check(cm, theta0, eps)? {
        return Err(Error::NotInterior);
    }
    let theta0 = cm.region().admit(theta0)?;
    let (base, derivs) = choi_and_derivatives(cm, &theta0)?;
    let m = cm.m();
    let mut vertices = Vec::with_capacity(2 * m);
    let mut components = Vec::with_capacity(2 * m);
    for i in 0..m {
        for sign in [1.0, -1.0] {
            let mut u = vec![0.0; m];
            u[i] = sign * eps;
            let choi = linalg::symmetrize(&linearized_choi(&base, &derivs, &u));
            components.push(KrausChannel::from_choi(&choi, cm.input_dim(), cm.output_dim())?);
            vertices.push(theta0.iter().zip(&u).map(|(t, d)| t + d).collect());
        }
    }
    Ok(ExtremeDecomposition {
        theta0,
        eps,
        vertices,
        components,
        input_dim: cm.input_dim(),
        output_dim: cm.output_dim(),
        base_choi: base,
        derivative_chois: derivs,
    })
}

/// Fisher information of the mixture weights `{p_θ(x)}`.
pub fn multinomial_fisher(ed: &ExtremeDecomposition, theta: &[f64]) -> Result<FisherMatrix> {
    let w = ed.weights(theta)?;
    if let Some((index, &weight)) = w.iter().enumerate().find(|(_, &p)| p <= WEIGHT_FLOOR) {
        return Err(Error::BoundaryWeight { index, weight });
    }
    let dw = ed.weight_derivatives();
    let m = ed.m();
    let mut j = RMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            j[(a, b)] = (0..w.len()).map(|x| dw[a][x] * dw[b][x] / w[x]).sum();
        }
    }
    Ok(FisherMatrix { matrix: j, kind: FisherKind::Classical })
}

/// Outcome of the randomization-equivalence test.
#[derive(Debug, Clone, PartialEq)]
pub struct Chi2Result {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Samples `x ~ p_θ`, applies `Λ_x` to `probe` and measures `povm`; compares
/// the counts with the outcome law of the linearized channel at `θ`.
pub fn randomization_chi2<R: Rng + ?Sized>(
    ed: &ExtremeDecomposition,
    theta: &[f64],
    probe: &DensityOperator,
    povm: &Povm,
    shots: usize,
    rng: &mut R,
) -> Result<Chi2Result> {
    if probe.dim() != ed.input_dim {
        return Err(Error::DimensionMismatch { expected: ed.input_dim, found: probe.dim() });
    }
    let mixer = OutcomeSampler::new(&ed.weights(theta)?)?;
    let per_component: Vec<OutcomeSampler> = ed
        .components
        .iter()
        .map(|ch| OutcomeSampler::new(&quantum::outcome_distribution(&ch.apply_state(probe)?, povm)?))
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; povm.len()];
    for _ in 0..shots {
        counts[per_component[mixer.sample(rng)].sample(rng)] += 1;
    }
    let target = DensityOperator::new(models::apply_choi(&ed.linearized_choi(theta)?, probe.matrix(), ed.output_dim))?;
    let expected = quantum::outcome_distribution(&target, povm)?;
    let mut statistic = 0.0;
    let mut cells = 0usize;
    for (&o, &p) in counts.iter().zip(&expected) {
        let e = p * shots as f64;
        if e > 0.0 {
            statistic += (o as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    let dof = cells.saturating_sub(1).max(1);
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(Chi2Result { statistic, dof, p_value: chi.sf(statistic) })
}

/// `n` uses of a channel on the first factor of `H ⊗ K`, separated by
/// interleaving channels on `H ⊗ K`, then a final measurement.
#[derive(Debug, Clone)]
pub struct InterleavedScheme {
    pub input: DensityOperator,
    pub ancilla_dim: usize,
    pub interleavers: Vec<KrausChannel>,
    pub povm: Povm,
}

impl InterleavedScheme {
    pub fn new(input: DensityOperator, ancilla_dim: usize, interleavers: Vec<KrausChannel>, povm: Povm) -> Result<Self> {
        let d = input.dim();
        for x in &interleavers {
            if x.input_dim() != d || x.output_dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: x.input_dim() });
            }
        }
        if povm.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: povm.dim() });
        }
        if ancilla_dim == 0 || !d.is_multiple_of(ancilla_dim) {
            return Err(Error::InvalidConfig(format!("ancilla dimension {ancilla_dim} does not divide {d}")));
        }
        Ok(Self { input, ancilla_dim, interleavers, povm })
    }

    pub fn uses(&self) -> usize {
        self.interleavers.len() + 1
    }

    pub fn final_state(&self, cm: &ChannelModel, theta: &[f64]) -> Result<DensityOperator> {
        let dim = self.input.dim() / self.ancilla_dim;
        if cm.input_dim() != dim || cm.output_dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: cm.input_dim() });
        }
        let ext = cm.channel(theta)?.extend(self.ancilla_dim);
        let mut rho = ext.apply_state(&self.input)?;
        for x in &self.interleavers {
            rho = ext.apply_state(&x.apply_state(&rho)?)?;
        }
        Ok(rho)
    }

    /// The family `θ ↦` final state, with finite-difference derivatives.
    pub fn output_model(&self, cm: &ChannelModel) -> StateModel {
        let scheme = self.clone();
        let family = cm.clone();
        StateModel::new(format!("{}-interleaved", cm.name()), cm.region().clone(), self.input.dim(), move |t| {
            scheme.final_state(&family, t)
        })
    }

    pub fn outcome_distribution(&self, cm: &ChannelModel, theta: &[f64]) -> Result<Vec<f64>> {
        quantum::outcome_distribution(&self.final_state(cm, theta)?, &self.povm)
    }

    /// Pairs the final measurement with an outcome-indexed estimate table.
    pub fn estimator(&self, values: Vec<Vec<f64>>) -> Result<Estimator> {
        let m: Arc<dyn Measurement> = Arc::new(self.povm.clone());
        Estimator::new(m, values, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    ProductProbe,
    GhzProbe,
    SequentialFeedback,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::ProductProbe => "product-probe",
            Strategy::GhzProbe => "ghz-probe",
            Strategy::SequentialFeedback => "sequential-feedback",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product-probe" => Ok(Strategy::ProductProbe),
            "ghz-probe" => Ok(Strategy::GhzProbe),
            "sequential-feedback" => Ok(Strategy::SequentialFeedback),
            other => Err(Error::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub strategy: Strategy,
    pub ns: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// GHZ shots per trial.
    pub ghz_shots: usize,
    pub workers: usize,
}

impl ScalingConfig {
    pub fn new(strategy: Strategy, ns: Vec<usize>, trials: usize, seed: u64) -> Self {
        Self { strategy, ns, trials, seed, ghz_shots: 1000, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ScalingRow {
    pub family: String,
    pub theta: f64,
    pub strategy: String,
    pub n: usize,
    pub trials: usize,
    pub mse: f64,
    pub n_mse: f64,
    pub n2_mse: f64,
    /// Standard error of `mse`.
    pub stderr: f64,
}

fn binomial<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<u64> {
    Binomial::new(n as u64, p.clamp(0.0, 1.0))
        .map(|b| b.sample(rng))
        .map_err(|e| Error::InvalidParameter(e.to_string()))
}

/// Product probe `|+⟩` with alternating σ_x / σ_y readout: `atan2(ȳ, x̄)`.
fn phase_product_estimate<R: Rng + ?Sized>(theta: f64, uses: usize, rng: &mut R) -> Result<f64> {
    let nx = uses.div_ceil(2);
    let ny = uses / 2;
    let x = 2.0 * binomial(nx, 0.5 * (1.0 + theta.cos()), rng)? as f64 / nx as f64 - 1.0;
    let y = if ny == 0 { 0.0 } else { 2.0 * binomial(ny, 0.5 * (1.0 + theta.sin()), rng)? as f64 / ny as f64 - 1.0 };
    Ok(y.atan2(x))
}

/// One trial of the chosen strategy with `n` channel uses per probe.
fn scaling_trial<R: Rng + ?Sized>(
    cm: &ChannelModel,
    theta: f64,
    n: usize,
    cfg: &ScalingConfig,
    two_step: Option<&(StateModel, TwoStepConfig)>,
    rng: &mut R,
) -> Result<f64> {
    match (cfg.strategy, cm.kind()) {
        (Strategy::ProductProbe, ChannelKind::Depolarizing) => {
            // |0⟩ probe, σ_z readout: P(flip) = p/2.
            Ok(2.0 * binomial(n, theta / 2.0, rng)? as f64 / n as f64)
        }
        (Strategy::ProductProbe, ChannelKind::PhaseUnitary) => phase_product_estimate(theta, n, rng),
        (Strategy::GhzProbe, ChannelKind::PhaseUnitary) => {
            let pre_uses = ((n as f64).sqrt().ceil() as usize).max(1) * cfg.ghz_shots;
            let pre = phase_product_estimate(theta, pre_uses, rng)?;
            // Offset the readout so the working point sits at the steepest slope.
            let nf = n as f64;
            let phase = nf * theta + std::f64::consts::FRAC_PI_2 - nf * pre;
            let plus = binomial(cfg.ghz_shots, 0.5 * (1.0 + phase.cos()), rng)? as f64 / cfg.ghz_shots as f64;
            let cos_hat = (2.0 * plus - 1.0).clamp(-1.0, 1.0);
            Ok(pre + (cos_hat.acos() - std::f64::consts::FRAC_PI_2) / nf)
        }
        (Strategy::SequentialFeedback, ChannelKind::Depolarizing | ChannelKind::PhaseUnitary) => {
            let (model, ts) = two_step.expect("two-step config prepared");
            Ok(twostep::run_two_step(model, &[theta], ts, rng)?.estimate[0])
        }
        (strategy, _) => Err(Error::StrategyUnsupported { strategy: strategy.to_string(), family: cm.name().to_string() }),
    }
}

fn probe_for(cm: &ChannelModel) -> Result<DensityOperator> {
    match cm.kind() {
        ChannelKind::PhaseUnitary => DensityOperator::bloch([1.0, 0.0, 0.0]),
        _ => DensityOperator::bloch([0.0, 0.0, 1.0]),
    }
}

/// Monte Carlo MSE of a strategy for every `n` in `cfg.ns`. Trial `k` at
/// the `i`-th `n` draws from stream `(i << 32) | k` of the seed.
pub fn scaling_experiment(cm: &ChannelModel, theta: f64, cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    if cfg.ns.is_empty() {
        return Err(Error::InvalidConfig("no sample sizes given".into()));
    }
    if cfg.trials < 2 {
        return Err(Error::InvalidConfig(format!("scaling needs at least 2 trials, got {}", cfg.trials)));
    }
    if cfg.ns.contains(&0) {
        return Err(Error::InvalidConfig("sample sizes must be positive".into()));
    }
    if cm.m() != 1 {
        return Err(Error::MultiparameterUnsupported(cm.m()));
    }
    let supported = matches!(
        (cfg.strategy, cm.kind()),
        (Strategy::ProductProbe | Strategy::SequentialFeedback, ChannelKind::Depolarizing | ChannelKind::PhaseUnitary)
            | (Strategy::GhzProbe, ChannelKind::PhaseUnitary)
    );
    if !supported {
        return Err(Error::StrategyUnsupported { strategy: cfg.strategy.to_string(), family: cm.name().to_string() });
    }
    if cfg.strategy == Strategy::GhzProbe && cfg.ghz_shots == 0 {
        return Err(Error::InvalidConfig("ghz-probe needs at least one shot per trial".into()));
    }
    cm.region().admit(&[theta])?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut rows = Vec::with_capacity(cfg.ns.len());
    for (idx, &n) in cfg.ns.iter().enumerate() {
        let two_step = if cfg.strategy == Strategy::SequentialFeedback {
            let model = cm.output_model(&probe_for(cm)?)?;
            let ts = TwoStepConfig::new(&model, n, 1, cfg.seed)?;
            Some((model, ts))
        } else {
            None
        };
        let errors: Vec<f64> = pool.install(|| {
            (0..cfg.trials)
                .into_par_iter()
                .map(|k| {
                    let mut rng = twostep::trial_rng(cfg.seed, ((idx as u64) << 32) | k as u64);
                    scaling_trial(cm, theta, n, cfg, two_step.as_ref(), &mut rng).map(|est| (est - theta).powi(2))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let tf = cfg.trials as f64;
        let mse = errors.iter().sum::<f64>() / tf;
        let var = errors.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (tf - 1.0);
        let nf = n as f64;
        rows.push(ScalingRow {
            family: cm.name().to_string(),
            theta,
            strategy: cfg.strategy.to_string(),
            n,
            trials: cfg.trials,
            mse,
            n_mse: nf * mse,
            n2_mse: nf * nf * mse,
            stderr: (var / tf).sqrt(),
        });
    }
    Ok(rows)
}

/// Per-use CRB of the `|0⟩`-probe σ_z readout of the depolarizing family:
/// `4q(1−q)` with `q = p/2`.
pub fn depolarizing_product_crb(p: f64) -> f64 {
    let q = p / 2.0;
    4.0 * q * (1.0 - q)
}

/// `(|0…0⟩ + |1…1⟩)/√2` on `qubits` qubits.
pub fn ghz_state(qubits: usize) -> Result<DensityOperator> {
    let dim = 1usize << qubits;
    let mut amps = vec![c(0.0, 0.0); dim];
    amps[0] = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    amps[dim - 1] = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    DensityOperator::pure(&amps)
}

/// Swap of two qubits as a channel.
pub fn swap_channel() -> KrausChannel {
    let mut u = CMatrix::zeros(4, 4);
    for (a, b) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
        u[(a, b)] = c(1.0, 0.0);
    }
    KrausChannel::unitary(u).expect("swap is unitary")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::qfi_sld;
    use crate::models::{depolarizing, phase_unitary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interiority_examples() {
        assert!(interiority_check(&depolarizing(), &[0.5], 0.1).unwrap());
        for t in [-1.0, 0.0, 0.4, 2.5] {
            assert!(!interiority_check(&phase_unitary(), &[t], 1e-3).unwrap());
        }
        assert!(!interiority_check(&depolarizing(), &[0.01], 0.1).unwrap());
    }

    #[test]
    fn interior_ball_is_completely_positive() {
        let cm = depolarizing();
        let ed = extreme_decomposition(&cm, &[0.5], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let t = 0.5 + rng.random_range(-0.1..0.1);
            assert!(linalg::min_eigenvalue(&ed.linearized_choi(&[t]).unwrap()) >= -1e-9);
        }
    }

    #[test]
    fn decomposition_examples() {
        let cm = depolarizing();
        let ed = extreme_decomposition(&cm, &[0.5], 0.1).unwrap();
        assert_eq!(ed.weights(&[0.5]).unwrap(), vec![0.5, 0.5]);
        let w = ed.weights(&[0.53]).unwrap();
        assert!((w[0] - 0.65).abs() < 1e-12 && (w[1] - 0.35).abs() < 1e-12);
        let mix = ed.mixture_choi(&[0.55]).unwrap();
        let exact = cm.choi(&[0.55]).unwrap().into_matrix();
        assert!(linalg::max_abs(&(mix - exact)) < 1e-10);
        assert!(matches!(extreme_decomposition(&phase_unitary(), &[0.4], 1e-3), Err(Error::NotInterior)));
    }

    #[test]
    fn multinomial_examples() {
        let cm = depolarizing();
        let ed = extreme_decomposition(&cm, &[0.5], 0.1).unwrap();
        assert!((multinomial_fisher(&ed, &[0.5]).unwrap().matrix[(0, 0)] - 100.0).abs() < 1e-9);
        assert!(matches!(multinomial_fisher(&ed, &[0.6]), Err(Error::BoundaryWeight { .. })));
        let ed = extreme_decomposition(&cm, &[0.5], 0.2).unwrap();
        assert!((multinomial_fisher(&ed, &[0.5]).unwrap().matrix[(0, 0)] - 25.0).abs() < 1e-9);
    }

    #[test]
    fn randomization_equivalence() {
        let cm = depolarizing();
        let ed = extreme_decomposition(&cm, &[0.5], 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..5 {
            let povm = Povm::random(2, 4, &mut rng);
            let probe = DensityOperator::random(2, &mut rng);
            let r = randomization_chi2(&ed, &[0.54], &probe, &povm, 100_000, &mut rng).unwrap();
            assert!(r.p_value > 0.01, "{r:?}");
        }
    }

    #[test]
    fn ghz_interleaved_cross_check() {
        let scheme = InterleavedScheme::new(ghz_state(2).unwrap(), 2, vec![swap_channel()], tomography()).unwrap();
        assert_eq!(scheme.uses(), 2);
        let model = scheme.output_model(&phase_unitary());
        let j = qfi_sld(&model, &[0.4]).unwrap().matrix[(0, 0)];
        assert!((j - 4.0).abs() < 1e-6, "{j}");
        let rho = scheme.final_state(&phase_unitary(), &[0.4]).unwrap();
        let phase = rho.matrix()[(3, 0)];
        assert!((phase.arg() - 0.8).abs() < 1e-12);
    }

    fn tomography() -> Povm {
        Povm::pauli_six().tensor(&Povm::pauli_six())
    }

    #[test]
    fn scaling_examples() {
        let cfg = ScalingConfig::new(Strategy::ProductProbe, vec![8, 16, 32, 64], 400, 5);
        let rows = scaling_experiment(&depolarizing(), 0.5, &cfg).unwrap();
        let crb = depolarizing_product_crb(0.5);
        for r in &rows {
            assert!((r.n_mse - crb).abs() <= 3.0 * r.n as f64 * r.stderr, "{r:?}");
        }
        let cfg = ScalingConfig::new(Strategy::GhzProbe, vec![4, 8, 16], 200, 5);
        let rows = scaling_experiment(&phase_unitary(), 0.4, &cfg).unwrap();
        for w in rows.windows(2) {
            let ratio = w[1].n2_mse / w[0].n2_mse;
            assert!((0.5..=2.0).contains(&ratio), "{rows:?}");
        }
        let empty = ScalingConfig::new(Strategy::ProductProbe, vec![], 10, 1);
        assert!(matches!(scaling_experiment(&depolarizing(), 0.5, &empty), Err(Error::InvalidConfig(_))));
        let ghz = ScalingConfig::new(Strategy::GhzProbe, vec![4], 10, 1);
        assert!(matches!(scaling_experiment(&depolarizing(), 0.5, &ghz), Err(Error::StrategyUnsupported { .. })));
    }

    #[test]
    fn sequential_feedback_runs() {
        let cfg = ScalingConfig::new(Strategy::SequentialFeedback, vec![16, 64], 50, 3);
        let rows = scaling_experiment(&depolarizing(), 0.5, &cfg).unwrap();
        assert!(rows.iter().all(|r| r.n_mse.is_finite() && r.n_mse >= 0.2 * depolarizing_product_crb(0.5)));
    }

    #[test]
    fn scaling_is_seed_deterministic() {
        let mut a = ScalingConfig::new(Strategy::ProductProbe, vec![8], 50, 9);
        a.workers = 1;
        let mut b = a.clone();
        b.workers = 3;
        assert_eq!(scaling_experiment(&phase_unitary(), 0.4, &a).unwrap(), scaling_experiment(&phase_unitary(), 0.4, &b).unwrap());
    }
}
