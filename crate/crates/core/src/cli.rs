//! Command-line front end. `run` parses arguments, dispatches to the
//! library and maps failures to exit codes: 2 for configuration errors,
//! 3 for numerical ones.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::adaptive::{self, ScheduleMeasurement};
use crate::channel::{self, ScalingConfig, Strategy};
use crate::config;
use crate::error::{Error, Result};
use crate::fisher::{self, Measurement};
use crate::linalg::RMatrix;
use crate::locc::{self, ProductModel, SearchGrid};
use crate::models::{self, StateModel};
use crate::twostep::{self, TwoStepConfig};

pub const SEED_ENV: &str = "QESTLAB_SEED";

#[derive(Parser, Debug)]
#[command(name = "qestlab", version, about = "Quantum parameter estimation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Output {
    /// Write results here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct PointArgs {
    /// Built-in model name or model config file.
    #[arg(long)]
    model: String,
    /// Comma-separated parameter values.
    #[arg(long, allow_hyphen_values = true)]
    theta: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// SLD quantum Fisher information.
    Qfi {
        #[command(flatten)]
        point: PointArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Classical Fisher information of a POVM.
    Cfi {
        #[command(flatten)]
        point: PointArgs,
        #[arg(long)]
        povm: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Locally unbiased estimator of a POVM and its covariance.
    Lue {
        #[command(flatten)]
        point: PointArgs,
        #[arg(long)]
        povm: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Monte Carlo experiments.
    Simulate {
        #[command(subcommand)]
        kind: SimulateCommand,
    },
    /// Adaptive schedules.
    Adaptive {
        #[command(subcommand)]
        kind: AdaptiveCommand,
    },
    /// Bounds for local operations on product models.
    Locc {
        #[command(subcommand)]
        kind: LoccCommand,
    },
    /// Channel-family estimation.
    Channel {
        #[command(subcommand)]
        kind: ChannelCommand,
    },
    /// Regularity diagnostics of a one-parameter model over a grid.
    Regcheck {
        #[arg(long)]
        model: String,
        #[arg(long, allow_hyphen_values = true)]
        from: f64,
        #[arg(long, allow_hyphen_values = true)]
        to: f64,
        #[arg(long)]
        step: f64,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Subcommand, Debug)]
enum SimulateCommand {
    /// Two-step estimator: preliminary estimate, then locally unbiased blocks.
    TwoStep {
        #[command(flatten)]
        point: PointArgs,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        n1: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Cost weight file, or `identity`.
        #[arg(long, default_value = "identity")]
        g: String,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Subcommand, Debug)]
enum AdaptiveCommand {
    /// Leibniz rule and semi-classical reduction checks on a schedule.
    Verify {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, allow_hyphen_values = true)]
        theta0: String,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Subcommand, Debug)]
enum LoccCommand {
    /// Lower bound on the weighted cost of local strategies.
    Bound {
        #[arg(long)]
        model_a: String,
        #[arg(long)]
        model_b: String,
        #[arg(long, allow_hyphen_values = true)]
        theta: String,
        #[arg(long, default_value = "identity")]
        g: String,
        #[command(flatten)]
        output: Output,
    },
    /// Grid search over projective local measurements of two qubits.
    Search {
        #[arg(long, default_value = "qubit-z")]
        model_a: String,
        #[arg(long, default_value = "qubit-z")]
        model_b: String,
        #[arg(long, default_value = "0.3", allow_hyphen_values = true)]
        theta: String,
        #[arg(long, default_value = "identity")]
        g: String,
        /// Points per angle.
        #[arg(long, default_value_t = 36)]
        grid: usize,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Subcommand, Debug)]
enum ChannelCommand {
    /// Whether the linearized family is completely positive on a ball.
    Interior {
        #[arg(long)]
        family: String,
        #[arg(long, allow_hyphen_values = true)]
        theta: String,
        #[arg(long)]
        eps: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Mean square error against the number of channel uses.
    Scaling {
        #[arg(long)]
        family: String,
        #[arg(long, allow_hyphen_values = true)]
        theta: f64,
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value = "8,16,32,64")]
        ns: String,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        ghz_shots: usize,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[command(flatten)]
        output: Output,
    },
}

enum Artifact {
    Json(Value),
    Csv(String),
}

impl Artifact {
    fn render(&self) -> String {
        match self {
            Artifact::Json(v) => {
                let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
                s.push('\n');
                s
            }
            Artifact::Csv(s) => s.clone(),
        }
    }
}

/// Parses `args` (program name first) and runs the command. Results go to
/// `stdout` unless `--out` is given; diagnostics go to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    let output = output_of(&cli.command);
    let started = Instant::now();
    if let Some(out) = &output.out {
        if out.exists() && !output.force {
            let _ = writeln!(stderr, "error: {} exists; pass --force to overwrite", out.display());
            return 2;
        }
    }
    let result = dispatch(&cli.command);
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let code = match result {
        Ok(artifact) => match write_artifact(&artifact, &output, stdout) {
            Ok(()) => 0,
            Err(e) => {
                let _ = writeln!(stderr, "error: {e}");
                2
            }
        },
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_config_error() {
                2
            } else {
                3
            }
        }
    };
    if let Some(out) = &output.out {
        let manifest = json!({
            "args": args.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
            "wall_clock_seconds": started.elapsed().as_secs_f64(),
            "status": status,
            "exit_code": code,
        });
        let path = manifest_path(out);
        let text = serde_json::to_string_pretty(&manifest).expect("json values serialize") + "\n";
        if let Err(e) = std::fs::write(&path, text) {
            let _ = writeln!(stderr, "warning: cannot write {}: {e}", path.display());
        }
    }
    code
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn write_artifact(artifact: &Artifact, output: &Output, stdout: &mut dyn Write) -> Result<()> {
    let text = artifact.render();
    match &output.out {
        None => stdout.write_all(text.as_bytes())?,
        Some(path) => {
            let mut file = OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(output.force)
                .create_new(!output.force)
                .open(path)?;
            file.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn output_of(cmd: &Command) -> Output {
    match cmd {
        Command::Qfi { output, .. }
        | Command::Cfi { output, .. }
        | Command::Lue { output, .. }
        | Command::Regcheck { output, .. }
        | Command::Simulate { kind: SimulateCommand::TwoStep { output, .. } }
        | Command::Adaptive { kind: AdaptiveCommand::Verify { output, .. } }
        | Command::Locc { kind: LoccCommand::Bound { output, .. } | LoccCommand::Search { output, .. } }
        | Command::Channel { kind: ChannelCommand::Interior { output, .. } | ChannelCommand::Scaling { output, .. } } => {
            output.clone()
        }
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}=`{v}` is not a u64"))),
        Err(_) => Err(Error::InvalidConfig(format!("stochastic commands need --seed or {SEED_ENV}"))),
    }
}

fn state_model(arg: &str) -> Result<StateModel> {
    config::load_model(arg)?.into_state()
}

fn theta_list(text: &str) -> Result<Vec<f64>> {
    config::parse_list(text)
}

fn matrix_json(m: &RMatrix) -> Value {
    json!(fisher::rows(m))
}

/// Shortest round-trip representation.
fn csv_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        "nan".to_string()
    }
}

fn dispatch(cmd: &Command) -> Result<Artifact> {
    match cmd {
        Command::Qfi { point, .. } => {
            let model = state_model(&point.model)?;
            let j = fisher::qfi_sld(&model, &theta_list(&point.theta)?)?;
            Ok(Artifact::Json(json!({"matrix": j.rows(), "kind": j.kind})))
        }
        Command::Cfi { point, povm, .. } => {
            let model = state_model(&point.model)?;
            let povm = config::load_povm(povm)?;
            let j = fisher::classical_fisher(&model, &theta_list(&point.theta)?, &povm)?;
            Ok(Artifact::Json(json!({"matrix": j.rows(), "kind": j.kind})))
        }
        Command::Lue { point, povm, .. } => {
            let model = state_model(&point.model)?;
            let theta = theta_list(&point.theta)?;
            let povm: Arc<dyn Measurement> = Arc::new(config::load_povm(povm)?);
            let est = fisher::locally_unbiased_estimator(&model, &theta, povm)?;
            let g = RMatrix::identity(model.m(), model.m());
            let report = fisher::evaluate_exact(&est, &model, &theta, &g)?;
            Ok(Artifact::Json(json!({
                "matrix": matrix_json(&report.variance),
                "kind": "lue-covariance",
                "values": est.values(),
                "b_matrix": matrix_json(&report.b_matrix),
            })))
        }
        Command::Simulate { kind: SimulateCommand::TwoStep { point, n, n1, trials, seed, g, workers, .. } } => {
            let seed = seed_or_env(*seed)?;
            let model = state_model(&point.model)?;
            let theta = theta_list(&point.theta)?;
            let g = config::load_weight(g, model.m())?;
            let cfg = TwoStepConfig::new(&model, *n, *n1, seed)?;
            let mc = twostep::monte_carlo(&model, &theta, &cfg, *trials, &g, *workers)?;
            let r = &mc.report;
            let bias_norm = r.bias.iter().map(|b| b * b).sum::<f64>().sqrt();
            let mut csv = String::from(
                "model,theta,n,n0,n1,n2,trials,seed,n_mse_trace,stderr,bias_norm,ks_stat,flagged_trials\n",
            );
            let theta_field = theta.iter().map(|t| csv_float(*t)).collect::<Vec<_>>().join(";");
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                model.name(),
                theta_field,
                n,
                mc.n0,
                mc.n1,
                mc.n2,
                trials,
                seed,
                csv_float(r.weighted_cost),
                csv_float(r.weighted_cost_stderr),
                csv_float(bias_norm),
                mc.ks_stat.map(csv_float).unwrap_or_default(),
                mc.flagged_trials,
            ));
            Ok(Artifact::Csv(csv))
        }
        Command::Adaptive { kind: AdaptiveCommand::Verify { schedule, model, theta0, .. } } => {
            let cfg = config::parse_schedule(&config::read_json(schedule)?)?;
            let model = state_model(model)?;
            let theta0 = theta_list(theta0)?;
            let measurement = ScheduleMeasurement::new(&cfg.schedule)?;
            let tree = measurement.tree().clone();
            let values = match cfg.estimator {
                Some(v) => v,
                None => fisher::locally_unbiased_estimator(&model, &theta0, Arc::new(measurement))?.values().to_vec(),
            };
            let mut leibniz: f64 = 0.0;
            for round in 1..=tree.rounds() {
                for sample in 1..=tree.n_samples() {
                    leibniz = leibniz.max(adaptive::leibniz_check(&tree, &values, &model, &theta0, round, sample)?);
                }
            }
            let reduced = adaptive::fake_ensemble_reduce(tree.clone(), &values, &model, &theta0)?;
            let r = &reduced.report;
            Ok(Artifact::Json(json!({
                "leibniz_residual": leibniz,
                "psd_gap": r.psd_gap,
                "b_error": r.b_error,
                "mean_error": r.mean_error,
                "orthogonality": r.orthogonality,
                "paths": tree.path_count(),
            })))
        }
        Command::Locc { kind: LoccCommand::Bound { model_a, model_b, theta, g, .. } } => {
            let pm = ProductModel::new(state_model(model_a)?, state_model(model_b)?)?;
            let g = config::load_weight(g, pm.m())?;
            let b = locc::product_bound(&pm, &theta_list(theta)?, &g)?;
            Ok(Artifact::Json(json!({
                "bound": b.bound,
                "projectors": {"a": matrix_json(&b.projector_a), "b": matrix_json(&b.projector_b)},
            })))
        }
        Command::Locc { kind: LoccCommand::Search { model_a, model_b, theta, g, grid, .. } } => {
            let pm = ProductModel::new(state_model(model_a)?, state_model(model_b)?)?;
            let g = config::load_weight(g, pm.m())?;
            let r = locc::brute_force_lo_search(&pm, &theta_list(theta)?, &g, SearchGrid::square(*grid))?;
            Ok(Artifact::Json(json!({"best_cost": r.best_cost, "axes": {"a": r.axis_a, "b": r.axis_b}})))
        }
        Command::Channel { kind: ChannelCommand::Interior { family, theta, eps, .. } } => {
            let cm = config::load_model(family)?.into_channel()?;
            let interior = channel::interiority_check(&cm, &theta_list(theta)?, *eps)?;
            Ok(Artifact::Json(json!({"interior": interior})))
        }
        Command::Channel {
            kind: ChannelCommand::Scaling { family, theta, strategy, ns, trials, seed, ghz_shots, workers, .. },
        } => {
            let seed = seed_or_env(*seed)?;
            let cm = config::load_model(family)?.into_channel()?;
            let mut cfg = ScalingConfig::new(strategy.parse::<Strategy>()?, config::parse_list(ns)?, *trials, seed);
            cfg.ghz_shots = *ghz_shots;
            cfg.workers = *workers;
            let rows = channel::scaling_experiment(&cm, *theta, &cfg)?;
            let mut csv = String::from("family,theta,strategy,n,trials,mse,n_mse,n2_mse,stderr\n");
            for r in rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.family,
                    csv_float(r.theta),
                    r.strategy,
                    r.n,
                    r.trials,
                    csv_float(r.mse),
                    csv_float(r.n_mse),
                    csv_float(r.n2_mse),
                    csv_float(r.stderr),
                ));
            }
            Ok(Artifact::Csv(csv))
        }
        Command::Regcheck { model, from, to, step, .. } => {
            let model = state_model(model)?;
            if model.m() != 1 {
                return Err(Error::MultiparameterUnsupported(model.m()));
            }
            let grid = models::grid_1d(*from, *to, *step)?;
            let d = models::estimate_regularity(&model, &grid)?;
            Ok(Artifact::Json(json!({
                "a1_estimate": d.a1_estimate,
                "max_first_derivative_norm": d.max_first_derivative_norm,
                "max_second_derivative_norm": d.max_second_derivative_norm,
                "m2_ok": d.m2_ok,
                "grid_points": d.grid_points,
                "notes": d.notes,
            })))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("qestlab").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn qfi_output() {
        let (code, out, _) = run_capture(&["qfi", "--model", "qubit-z", "--theta", "0.3"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert!((v["matrix"][0][0].as_f64().unwrap() - 1.0 / 0.91).abs() < 1e-9);
        assert_eq!(v["kind"], "sld");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&["qfi", "--model", "nope", "--theta", "0.3"]).0, 2);
        assert_eq!(run_capture(&["qfi", "--model", "qubit-z", "--theta", "3"]).0, 2);
        assert_eq!(run_capture(&["channel", "interior", "--family", "qubit-z", "--theta", "0.3", "--eps", "0.1"]).0, 2);
        assert_eq!(run_capture(&["--help"]).0, 0);
    }

    #[test]
    fn channel_and_locc() {
        let (code, out, _) = run_capture(&["channel", "interior", "--family", "depolarizing", "--theta", "0.5", "--eps", "0.1"]);
        assert_eq!(code, 0);
        assert_eq!(serde_json::from_str::<Value>(&out).unwrap()["interior"], true);
        let (code, out, _) =
            run_capture(&["locc", "bound", "--model-a", "qubit-z", "--model-b", "qubit-z", "--theta", "0.3"]);
        assert_eq!(code, 0);
        assert!((serde_json::from_str::<Value>(&out).unwrap()["bound"].as_f64().unwrap() - 0.455).abs() < 1e-9);
    }

    #[test]
    fn two_step_is_deterministic_across_workers() {
        let args = |w: &'static str| {
            ["simulate", "two-step", "--model", "qubit-z", "--theta", "0.3", "--n", "128", "--trials", "20", "--seed", "42", "--workers", w]
        };
        let (c1, a, _) = run_capture(&args("1"));
        let (c2, b, _) = run_capture(&args("3"));
        assert_eq!((c1, c2), (0, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn out_is_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("q.json");
        let path = out.to_str().unwrap();
        assert_eq!(run_capture(&["qfi", "--model", "qubit-z", "--theta", "0.3", "--out", path]).0, 0);
        assert!(manifest_path(&out).exists());
        assert_eq!(run_capture(&["qfi", "--model", "qubit-z", "--theta", "0.3", "--out", path]).0, 2);
        assert_eq!(run_capture(&["qfi", "--model", "qubit-z", "--theta", "0.3", "--out", path, "--force"]).0, 0);
    }
}
