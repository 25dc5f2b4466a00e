//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use qestlab::adaptive::{self, AdaptiveSchedule, LocalComponents, ScheduleMeasurement, ScheduleTree};
use qestlab::channel::{self, ScalingConfig, Strategy};
use qestlab::fisher::{self, Estimator, Measurement};
use qestlab::linalg::{self, CMatrix, RMatrix};
use qestlab::locc::{self, ProductModel, SearchGrid};
use qestlab::models::{self, StateModel};
use qestlab::quantum::{self, DensityOperator, Instrument, Povm};
use qestlab::twostep::{self, TwoStepConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn fisher_correctness() -> Check {
    let z = models::qubit_z();
    let mut worst: f64 = 0.0;
    for (t, want) in [(0.0, 1.0), (0.3, 1.098901099), (0.9, 5.263157895)] {
        let j = fisher::qfi_sld(&z, &[t]).map_err(err)?.matrix[(0, 0)];
        worst = worst.max((j - want).abs().min((j - 1.0 / (1.0 - t * t)).abs()));
    }
    let phase = models::qubit_phase(0.9).map_err(err)?;
    let jp = fisher::qfi_sld(&phase, &[0.4]).map_err(err)?.matrix[(0, 0)];
    worst = worst.max((jp - 0.81).abs());
    ensure(worst <= 1e-9, format!("max deviation {worst:.2e}"))
}

fn random_direction(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

fn quadratic(j: &RMatrix, v: &[f64]) -> f64 {
    let m = v.len();
    (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).map(|(a, b)| v[a] * j[(a, b)] * v[b]).sum()
}

fn crb_dominance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let equator = models::bloch_equator();
    let pair = models::product(&equator, &equator).map_err(err)?;
    let cases: [(&StateModel, Vec<f64>); 2] = [(&equator, vec![0.3, 0.2]), (&pair, vec![0.2, -0.4])];
    let mut worst = f64::NEG_INFINITY;
    for (model, theta) in cases {
        let js = fisher::qfi_sld(model, &theta).map_err(err)?.matrix;
        for _ in 0..100 {
            let k = rng.random_range(2..=6);
            let povm = Povm::random(model.dim(), k, &mut rng);
            let jc = fisher::classical_fisher(model, &theta, &povm).map_err(err)?.matrix;
            for _ in 0..20 {
                let v = random_direction(model.m(), &mut rng);
                worst = worst.max(quadratic(&jc, &v) - quadratic(&js, &v));
            }
        }
    }
    ensure(worst <= 1e-9, format!("max vᵀ(J_C − J_S)v = {worst:.2e} over 4000 pairs"))
}

fn lue_optimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = models::bloch_equator();
    let theta = [0.3, 0.2];
    let g = RMatrix::identity(2, 2);
    let (mut var_err, mut b_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let povm = Povm::random(2, 4, &mut rng);
        let meas: Arc<dyn Measurement> = Arc::new(povm.clone());
        let est = fisher::locally_unbiased_estimator(&model, &theta, meas).map_err(err)?;
        let report = fisher::evaluate_exact(&est, &model, &theta, &g).map_err(err)?;
        let jinv = linalg::pinv(&fisher::classical_fisher(&model, &theta, &povm).map_err(err)?.matrix);
        var_err = var_err.max(linalg::max_abs_real(&(&report.variance - jinv)));
        let b = est.b_matrix_fd(&model, &theta).map_err(err)?;
        b_err = b_err.max(linalg::max_abs_real(&(b - RMatrix::identity(2, 2))));
    }
    ensure(var_err <= 1e-9 && b_err <= 1e-6, format!("|V − J⁻¹| {var_err:.2e}, |B − I| {b_err:.2e}"))
}

struct TwoStepRun {
    n_mse: f64,
    stderr: f64,
    bias_norm: f64,
    ks: Option<f64>,
    n2: usize,
}

fn two_step_run() -> std::result::Result<TwoStepRun, String> {
    let model = models::qubit_z();
    let cfg = TwoStepConfig::new(&model, 4096, 1, 20_240_601).map_err(err)?;
    let mc = twostep::monte_carlo(&model, &[0.3], &cfg, 2000, &RMatrix::identity(1, 1), 1).map_err(err)?;
    let r = &mc.report;
    Ok(TwoStepRun {
        n_mse: r.weighted_cost,
        stderr: r.weighted_cost_stderr,
        bias_norm: r.bias.iter().map(|b| b * b).sum::<f64>().sqrt(),
        ks: mc.ks_stat,
        n2: mc.n2,
    })
}

fn achievability(run: &std::result::Result<TwoStepRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let tol = (3.0 * run.stderr).max(0.05);
    let dev = (run.n_mse - 0.91).abs();
    ensure(
        dev <= tol && run.bias_norm <= 0.02,
        format!(
            "n·MSE {:.4} (target 0.91, tol {tol:.4}), n2·MSE {:.4}, bias {:.2e}",
            run.n_mse,
            run.n_mse * run.n2 as f64 / 4096.0,
            run.bias_norm
        ),
    )
}

fn normality(run: &std::result::Result<TwoStepRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let ks = run.ks.ok_or("no KS statistic")?;
    ensure(ks <= 0.05, format!("KS {ks:.4}"))
}

fn luders(p: Povm) -> Instrument {
    Instrument::luders(&p)
}

fn weak_z(s: f64) -> Instrument {
    luders(Povm::weak_axis([0.0, 0.0, 1.0], s).expect("valid strength"))
}

/// Two samples, two rounds: weak z on both, then a sharper z when the
/// first-round outcomes agree and a sharp z otherwise.
fn binary_schedule() -> AdaptiveSchedule {
    AdaptiveSchedule::new(2, 2, 2, |r, _, h| {
        Ok(match r {
            0 => weak_z(0.6),
            _ if h[0] == h[1] => weak_z(0.8),
            _ => luders(Povm::pauli_z()),
        })
    })
    .expect("valid schedule")
}

fn joint(a: &Instrument, b: &Instrument) -> Instrument {
    let mut branches = Vec::new();
    for ba in a.branches() {
        for bb in b.branches() {
            let ops: Vec<CMatrix> =
                ba.kraus.iter().flat_map(|ka| bb.kraus.iter().map(move |kb| linalg::kron(ka, kb))).collect();
            branches.push((ba.label * 2 + bb.label, ops));
        }
    }
    Instrument::new(branches).expect("product instrument")
}

fn adaptive_composition() -> Check {
    let schedule = binary_schedule();
    let rho = models::qubit_z().state(&[0.3]).map_err(err)?;
    let tree = adaptive::enumerate(&schedule, &[rho.clone(), rho.clone()]).map_err(err)?;
    let first = joint(&weak_z(0.6), &weak_z(0.6));
    let composed = adaptive::compose_adaptive(&first, |w| {
        let (h0, h1) = (w / 2, w % 2);
        let second = if h0 == h1 { weak_z(0.8) } else { luders(Povm::pauli_z()) };
        Ok(joint(&second, &second))
    })
    .map_err(err)?;
    let rho2 = rho.tensor(&rho);
    let (mut composed_err, mut sequential_err): (f64, f64) = (0.0, 0.0);
    let mut total = 0.0;
    for (k, &(w1, w2)) in composed.pairs.iter().enumerate() {
        let path = [w1 / 2, w1 % 2, w2 / 2, w2 % 2];
        let p = composed.instrument.apply_branch(k as i64, rho2.matrix()).map_err(err)?.trace().re;
        total += p;
        composed_err = composed_err.max((p - tree.probability_of(&path)).abs());
        let mut seq = 1.0;
        for sample in 0..2 {
            let (p1, post) = quantum::posterior_state(&rho, &weak_z(0.6), path[sample]).map_err(err)?;
            let second = schedule.choose(1, sample, &path[..2]).map_err(err)?;
            let p2 = if p1 > 0.0 { quantum::outcome_distribution(&post, &second.induced_povm()).map_err(err)? } else { vec![0.0; 2] };
            seq *= p1 * p2[path[2 + sample] as usize];
        }
        sequential_err = sequential_err.max((seq - tree.probability_of(&path)).abs());
    }
    ensure(
        composed_err <= 1e-12 && sequential_err <= 1e-12 && (total - 1.0).abs() <= 1e-12 && (tree.total() - 1.0).abs() <= 1e-12,
        format!("composed {composed_err:.2e}, sequential {sequential_err:.2e}, total−1 {:.2e}", total - 1.0),
    )
}

fn random_lu_values(tree: &Arc<ScheduleTree>, seed: u64) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meas: Arc<dyn Measurement> = Arc::new(ScheduleMeasurement::from_tree(tree.clone()));
    let raw: Vec<Vec<f64>> = (0..tree.path_count()).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let est = Estimator::new(meas, raw, None).map_err(err)?;
    Ok(fisher::rebias_estimator(&est, &models::qubit_z(), &[0.3]).map_err(err)?.values().to_vec())
}

fn leibniz_rule() -> Check {
    let tree = Arc::new(binary_schedule().tree().map_err(err)?);
    let values = random_lu_values(&tree, 5)?;
    let mut worst: f64 = 0.0;
    for (r, k) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        worst = worst.max(adaptive::leibniz_check(&tree, &values, &models::qubit_z(), &[0.3], r, k).map_err(err)?);
    }
    ensure(worst < 5e-4, format!("max residual {worst:.2e}"))
}

fn semi_classical_reduction() -> Check {
    let tree = Arc::new(binary_schedule().tree().map_err(err)?);
    let values = random_lu_values(&tree, 17)?;
    let fe = adaptive::fake_ensemble_reduce(tree, &values, &models::qubit_z(), &[0.3]).map_err(err)?;
    let r = &fe.report;
    ensure(
        r.psd_gap >= -1e-10 && r.b_error <= 1e-6 && r.orthogonality <= 1e-12,
        format!("min eig(V[E]−V[F]) {:.2e}, |B−I| {:.2e}, E[ff′ᵀ] {:.2e}", r.psd_gap, r.b_error, r.orthogonality),
    )
}

fn scaled_components(scales: &[f64]) -> std::result::Result<LocalComponents, String> {
    let sched = AdaptiveSchedule::product(vec![luders(Povm::pauli_z()); scales.len()]).map_err(err)?;
    let tree = Arc::new(sched.tree().map_err(err)?);
    let f = scales
        .iter()
        .enumerate()
        .map(|(k, &c)| tree.labels().iter().map(|l| vec![if l[k] == 0 { c } else { -c }]).collect())
        .collect();
    Ok(LocalComponents { tree, theta0: vec![0.0], f })
}

fn single_sample_randomization() -> Check {
    let g = RMatrix::identity(1, 1);
    let model = models::qubit_z();
    let cases: [&[f64]; 3] = [&[0.5f64.sqrt(), 0.5f64.sqrt()], &[1.0], &[0.2f64.sqrt(), 0.3f64.sqrt(), 0.5f64.sqrt()]];
    let mut worst: f64 = 0.0;
    for scales in cases {
        let comps = scaled_components(scales)?;
        let n = scales.len() as f64;
        let v_s: f64 = scales.iter().map(|c| c * c).sum();
        let est = adaptive::randomize_single_sample(&comps).map_err(err)?;
        let report = fisher::evaluate_exact(&est, &model, &[0.0], &g).map_err(err)?;
        worst = worst.max((report.variance[(0, 0)] - n * v_s).abs());
    }
    ensure(worst <= 1e-12, format!("max |V[T′] − n·V[S]| {worst:.2e} over 3 instances"))
}

fn locc_bound() -> Check {
    let pm = ProductModel::new(models::qubit_z(), models::qubit_z()).map_err(err)?;
    let g = RMatrix::identity(1, 1);
    let bound = locc::product_bound(&pm, &[0.3], &g).map_err(err)?.bound;
    let search = locc::brute_force_lo_search(&pm, &[0.3], &g, SearchGrid::default()).map_err(err)?;
    let exact = (1.0 - 0.09) / 2.0;
    ensure(
        (bound - exact).abs() <= 1e-9 && search.best_cost >= bound - 1e-9 && search.best_cost <= 1.05 * bound,
        format!("bound {bound:.12}, search {:.12}", search.best_cost),
    )
}

fn channel_interiority() -> Check {
    let dep = models::depolarizing();
    let phase = models::phase_unitary();
    let inside = channel::interiority_check(&dep, &[0.5], 0.1).map_err(err)?;
    let edge = channel::interiority_check(&dep, &[0.01], 0.1).map_err(err)?;
    let unitary = channel::interiority_check(&phase, &[0.4], 1e-3).map_err(err)?;
    let ed = channel::extreme_decomposition(&dep, &[0.5], 0.1).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut min_p = f64::INFINITY;
    for _ in 0..5 {
        let povm = Povm::random(2, 4, &mut rng);
        let probe = DensityOperator::random(2, &mut rng);
        min_p = min_p.min(channel::randomization_chi2(&ed, &[0.54], &probe, &povm, 100_000, &mut rng).map_err(err)?.p_value);
    }
    ensure(
        inside && !edge && !unitary && min_p > 0.01,
        format!("p=0.5 {inside}, p=0.01 {edge}, phase {unitary}, min χ² p-value {min_p:.3}"),
    )
}

fn scaling_contrast() -> Check {
    let crb = channel::depolarizing_product_crb(0.5);
    let product = ScalingConfig::new(Strategy::ProductProbe, vec![8, 16, 32, 64], 2000, 7);
    let rows = channel::scaling_experiment(&models::depolarizing(), 0.5, &product).map_err(err)?;
    let flat = rows.iter().all(|r| (r.n_mse - crb).abs() <= 3.0 * r.n as f64 * r.stderr && r.n_mse >= 0.2 * crb);
    let ghz = ScalingConfig::new(Strategy::GhzProbe, vec![4, 8, 16], 2000, 7);
    let grows = channel::scaling_experiment(&models::phase_unitary(), 0.4, &ghz).map_err(err)?;
    let ratios: Vec<f64> = grows.windows(2).map(|w| w[1].n2_mse / w[0].n2_mse).collect();
    let heisenberg = ratios.iter().all(|r| (0.5..=2.0).contains(r));
    let n_mse: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.n_mse)).collect();
    let rs: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    ensure(flat && heisenberg, format!("product n·MSE [{}] vs {crb}, GHZ n²·MSE ratios [{}]", n_mse.join(", "), rs.join(", ")))
}

fn main() {
    let mut failures = 0;
    let mut report = |index: usize, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let over = budget.is_some_and(|b| elapsed > b);
        let (status, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over time budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("criterion {index:>2} {status} {name}: {detail} [{:.2} s]", elapsed.as_secs_f64());
    };
    let secs = |s: u64| Some(Duration::from_secs(s));
    report(1, "fisher correctness", secs(1), &mut fisher_correctness);
    report(2, "CRB dominance", secs(5), &mut crb_dominance);
    report(3, "optimal estimator at fixed POVM", secs(5), &mut lue_optimality);
    let start = Instant::now();
    let run = two_step_run();
    let run_time = start.elapsed();
    let two_step_budget = Duration::from_secs(60).checked_sub(run_time);
    report(4, "two-step achievability", two_step_budget, &mut || achievability(&run));
    report(5, "asymptotic normality", two_step_budget, &mut || normality(&run));
    report(6, "adaptive composition", None, &mut adaptive_composition);
    report(7, "Leibniz rule", None, &mut leibniz_rule);
    report(8, "semi-classical reduction", secs(1), &mut semi_classical_reduction);
    report(9, "single-sample randomization", None, &mut single_sample_randomization);
    report(10, "LOCC bound", secs(30), &mut locc_bound);
    report(11, "channel interiority", None, &mut channel_interiority);
    report(12, "scaling contrast", secs(120), &mut scaling_contrast);
    println!("two-step run time {:.2} s", run_time.as_secs_f64());
    println!("{} of 12 criteria failed", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
