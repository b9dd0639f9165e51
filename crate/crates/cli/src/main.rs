use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hopf_hybrid::dataset::{atomic_write, read_dataset, write_dataset};
use hopf_hybrid::model::{
    bifurcation_diagram, evaluate_model, predicted_observables, write_diagram_csv,
    write_series_csv, HybridModel,
};
use hopf_hybrid::normal_form::stability_matched_radius;
use hopf_hybrid::reference_systems::{
    make_aero_dataset, make_vdp_dataset, AeroDatasetConfig, VdpDatasetConfig,
};
use hopf_hybrid::speed_model::predict_timeseries;
use hopf_hybrid::training::{leave_one_out, train_full, FoldOutcome, TrainingConfig};
use hopf_hybrid::Error;

/// Identify hybrid models of Hopf-bifurcating systems from limit-cycle data
/// and export their predictions as plot-ready CSV files.
#[derive(Parser)]
#[command(name = "hopf-hybrid", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, ValueEnum)]
enum SystemKind {
    Vdp,
    Aero,
}

#[derive(Copy, Clone, ValueEnum)]
enum Stability {
    Stable,
    Unstable,
}

impl Stability {
    fn is_stable(self) -> bool {
        matches!(self, Stability::Stable)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a reference system into a training dataset.
    GenData {
        #[arg(long, value_enum)]
        system: SystemKind,
        /// Directory for the record CSVs and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Parameter values to record, comma separated (default: the
        /// system's standard set).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Option<Vec<f64>>,
        /// Sampling interval in seconds.
        #[arg(long)]
        dt: Option<f64>,
        /// Seconds of data per record.
        #[arg(long)]
        record: Option<f64>,
        /// Transient time discarded before recording (vdp only).
        #[arg(long)]
        settle: Option<f64>,
        /// Also observe the aerodynamic lag state (aero only).
        #[arg(long)]
        include_flow_state: bool,
    },
    /// Fit a hybrid model to a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration file, JSON or TOML.
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in configuration for a reference system.
        #[arg(long, value_enum)]
        preset: Option<SystemKind>,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Training report file (default: next to the model).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample the model's cycle branches over a parameter range.
    PredictBifurcation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        mu_min: f64,
        #[arg(long, allow_negative_numbers = true)]
        mu_max: f64,
        /// Number of equally spaced parameter values.
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the predicted cycle at one parameter value.
    PredictOrbit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        mu: f64,
        #[arg(long, value_enum)]
        stability: Stability,
        /// Phase samples around the cycle (default: the training value).
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate the model's phase dynamics into a time series.
    PredictTimeseries {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        mu: f64,
        #[arg(long, value_enum)]
        stability: Stability,
        /// End time in seconds (default: five predicted periods).
        #[arg(long)]
        tmax: Option<f64>,
        /// Output sampling interval (default: 1/200 of the period).
        #[arg(long)]
        dt: Option<f64>,
        /// Initial observed point "z1,z2" the phase is matched to
        /// (default: the cycle point at angle zero).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        init: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refit the model once per record with that record held out.
    CrossValidate {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration file, JSON or TOML.
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in configuration for a reference system.
        #[arg(long, value_enum)]
        preset: Option<SystemKind>,
        /// Output report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute every reported metric of a model against a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output metrics file.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A command failure carrying its exit code: 2 for usage and input
/// problems, 3 for an aborted training run, 4 for a branch that does not
/// exist at the requested parameter value.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn training(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

fn core_failure(e: Error) -> Failure {
    let code = match e {
        Error::MissingBranch { .. } => 4,
        _ => 2,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData {
            system,
            out,
            mu,
            dt,
            record,
            settle,
            include_flow_state,
        } => gen_data(system, &out, mu, dt, record, settle, include_flow_state),
        Cmd::Train {
            data,
            config,
            preset,
            out,
            report,
        } => train(&data, config, preset, &out, report),
        Cmd::PredictBifurcation {
            model,
            mu_min,
            mu_max,
            steps,
            out,
        } => predict_bifurcation(&model, mu_min, mu_max, steps, &out),
        Cmd::PredictOrbit {
            model,
            mu,
            stability,
            points,
            out,
        } => predict_orbit(&model, mu, stability, points, &out),
        Cmd::PredictTimeseries {
            model,
            mu,
            stability,
            tmax,
            dt,
            init,
            out,
        } => predict_ts(&model, mu, stability, tmax, dt, init, &out),
        Cmd::CrossValidate {
            data,
            config,
            preset,
            out,
        } => cross_validate(&data, config, preset, &out),
        Cmd::Eval { model, data, out } => eval(&model, &data, &out),
    }
}

fn positive(name: &str, v: f64) -> Result<f64, Failure> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Failure::input(format!(
            "--{name} must be a positive number, got {v}"
        )))
    }
}

fn gen_data(
    system: SystemKind,
    out: &Path,
    mu: Option<Vec<f64>>,
    dt: Option<f64>,
    record: Option<f64>,
    settle: Option<f64>,
    include_flow_state: bool,
) -> Result<(), Failure> {
    if let Some(list) = &mu {
        if list.is_empty() || list.iter().any(|v| !v.is_finite()) {
            return Err(Failure::input(
                "--mu needs a comma-separated list of finite values",
            ));
        }
    }
    let ds = match system {
        SystemKind::Vdp => {
            if include_flow_state {
                return Err(Failure::input(
                    "--include-flow-state only applies to --system aero",
                ));
            }
            let mut cfg = VdpDatasetConfig::default();
            if let Some(list) = mu {
                cfg.mu_values = list;
            }
            if let Some(v) = dt {
                cfg.dt = positive("dt", v)?;
            }
            if let Some(v) = record {
                cfg.record_time = positive("record", v)?;
            }
            if let Some(v) = settle {
                if !v.is_finite() || v < 0.0 {
                    return Err(Failure::input(format!(
                        "--settle must be non-negative, got {v}"
                    )));
                }
                cfg.settle_time = v;
            }
            make_vdp_dataset(&cfg).map_err(core_failure)?
        }
        SystemKind::Aero => {
            if settle.is_some() {
                return Err(Failure::input("--settle only applies to --system vdp"));
            }
            let mut cfg = AeroDatasetConfig::default();
            if let Some(list) = mu {
                cfg.stable_mu = list.clone();
                cfg.unstable_mu = list;
            }
            if let Some(v) = dt {
                cfg.dt = positive("dt", v)?;
            }
            if let Some(v) = record {
                cfg.record_time = positive("record", v)?;
            }
            cfg.include_flow_state = include_flow_state;
            make_aero_dataset(&cfg).map_err(core_failure)?
        }
    };
    write_dataset(out, &ds).map_err(core_failure)?;
    println!("wrote {} records to {}", ds.records.len(), out.display());
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainingConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let cfg: TrainingConfig = if is_toml {
        toml::from_str(&text)
            .map_err(|e| Failure::input(format!("config {}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text)
            .map_err(|e| Failure::input(format!("config {}: {e}", path.display())))?
    };
    Ok(cfg)
}

fn resolve_config(
    config: Option<PathBuf>,
    preset: Option<SystemKind>,
) -> Result<TrainingConfig, Failure> {
    let cfg = match (config, preset) {
        (Some(path), None) => load_config(&path)?,
        (None, Some(SystemKind::Vdp)) => TrainingConfig::vdp(),
        (None, Some(SystemKind::Aero)) => TrainingConfig::aero(),
        _ => unreachable!("clap enforces exactly one of --config and --preset"),
    };
    cfg.validate()
        .map_err(|e| Failure::input(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::input(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn train(
    data: &Path,
    config: Option<PathBuf>,
    preset: Option<SystemKind>,
    out: &Path,
    report: Option<PathBuf>,
) -> Result<(), Failure> {
    let ds = read_dataset(data).map_err(core_failure)?;
    let cfg = resolve_config(config, preset)?;
    let report_path = report.unwrap_or_else(|| out.with_extension("report.json"));
    let (fit, rep) = train_full(&ds, &cfg);
    write_json(&report_path, &rep)?;
    let model = fit.map_err(|e| {
        Failure::training(format!(
            "training aborted: {e} (partial report written to {})",
            report_path.display()
        ))
    })?;
    model.save(out).map_err(core_failure)?;
    println!(
        "model written to {}, report to {}",
        out.display(),
        report_path.display()
    );
    if let (Some(mu0), Some(a2)) = (rep.mu0, rep.a2) {
        println!("identified mu0 = {mu0:.6}, a2 = {a2:.6}");
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<HybridModel, Failure> {
    HybridModel::load(path)
        .map_err(|e| Failure::input(format!("cannot load model {}: {e}", path.display())))
}

fn predict_bifurcation(
    model: &Path,
    mu_min: f64,
    mu_max: f64,
    steps: usize,
    out: &Path,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let diagram = bifurcation_diagram(&model, mu_min, mu_max, steps).map_err(core_failure)?;
    write_diagram_csv(out, &diagram).map_err(core_failure)?;
    if !diagram.has_branch_rows() {
        return Err(Failure::input(format!(
            "no cycle exists for mu in [{mu_min}, {mu_max}]; wrote boundary markers only to {}",
            out.display()
        )));
    }
    println!("wrote {} rows to {}", diagram.rows.len(), out.display());
    Ok(())
}

fn predict_orbit(
    model: &Path,
    mu: f64,
    stability: Stability,
    points: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let n = points.unwrap_or(model.config.n_points);
    if n == 0 {
        return Err(Failure::input("--points must be at least 1"));
    }
    let (theta, rows) =
        predicted_observables(&model, mu, stability.is_stable(), n).map_err(core_failure)?;
    write_series_csv(out, "theta", &theta, &rows, mu).map_err(core_failure)?;
    println!("wrote {n} points to {}", out.display());
    Ok(())
}

fn predict_ts(
    model: &Path,
    mu: f64,
    stability: Stability,
    tmax: Option<f64>,
    dt: Option<f64>,
    init: Option<Vec<f64>>,
    out: &Path,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let stable = stability.is_stable();
    let p = &model.normal_form;
    let r = stability_matched_radius(p, mu, stable).ok_or_else(|| {
        core_failure(Error::MissingBranch {
            mu,
            wanted: if stable { "stable" } else { "unstable" },
        })
    })?;
    let period = model.speed.period(r, mu).map_err(core_failure)?;
    let tmax = match tmax {
        Some(v) => positive("tmax", v)?,
        None => 5.0 * period,
    };
    let dt = match dt {
        Some(v) => positive("dt", v)?,
        None => period / 200.0,
    };
    // Tolerate tmax/dt landing a hair under an integer.
    let n = (tmax / dt + 1e-9).floor() as usize;
    let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let z_init = match init {
        Some(v) => {
            if v.len() != 2 || v.iter().any(|x| !x.is_finite()) {
                return Err(Failure::input(
                    "--init needs two comma-separated finite values, e.g. --init 1.2,-0.3",
                ));
            }
            [v[0], v[1]]
        }
        None => model.map.forward(r, 0.0, mu),
    };
    let ts = predict_timeseries(
        &model.map,
        p,
        &model.speed,
        &model.aux,
        mu,
        stable,
        z_init,
        &t,
        model.config.n_points,
    )
    .map_err(core_failure)?;
    write_series_csv(out, "t", &ts.t, &ts.z, mu).map_err(core_failure)?;
    println!("wrote {} samples to {}", ts.t.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct CrossValidationReport {
    config: TrainingConfig,
    n_folds: usize,
    n_succeeded: usize,
    folds: Vec<FoldOutcome>,
}

fn cross_validate(
    data: &Path,
    config: Option<PathBuf>,
    preset: Option<SystemKind>,
    out: &Path,
) -> Result<(), Failure> {
    let ds = read_dataset(data).map_err(core_failure)?;
    let cfg = resolve_config(config, preset)?;
    let folds = leave_one_out(&ds, &cfg).map_err(core_failure)?;
    let n_succeeded = folds.iter().filter(|f| f.error.is_none()).count();
    let report = CrossValidationReport {
        config: cfg,
        n_folds: folds.len(),
        n_succeeded,
        folds,
    };
    write_json(out, &report)?;
    if n_succeeded == 0 {
        return Err(Failure::training(format!(
            "all {} folds failed; details in {}",
            report.n_folds,
            out.display()
        )));
    }
    println!(
        "{n_succeeded} of {} folds succeeded; report written to {}",
        report.n_folds,
        out.display()
    );
    Ok(())
}

fn eval(model: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let model = load_model(model)?;
    let ds = read_dataset(data).map_err(core_failure)?;
    let metrics = evaluate_model(&model, &ds).map_err(core_failure)?;
    write_json(out, &metrics)?;
    println!(
        "shape loss {:.6e}, speed loss {:.6e}; metrics written to {}",
        metrics.shape_loss,
        metrics.speed_loss,
        out.display()
    );
    Ok(())
}
