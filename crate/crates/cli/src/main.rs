use clap::{Args, Parser, Subcommand, ValueEnum};
use se3ham::certifier::{certify_ratio, synthesize_gains, CertifierError};
use se3ham::diagnostics::identity_report;
use se3ham::disturbance::{sample_dataset_realizations, DisturbanceRealization, StructuredFeatures};
use se3ham::geometry::GeneralizedCoord;
use se3ham::harness::{run_open_loop, run_tracking, ExperimentConfig, HarnessError, RunLog, RunStatus, Sidecar, Vehicle};
use se3ham::learning::{
    generate_dataset, train, DatasetConfig, FeatureModel, LearnableModel, LearningError, ModelFile, TrainConfig,
    TrajectoryDataset,
};
use serde_json::json;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "se3ham", version, about = "SE(3) Hamiltonian simulation, adaptive tracking, certification and learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set sim.horizon=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureKind {
    Full,
    Wind,
    WindThrust,
    Network,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop simulation under a constant input.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop tracking run; writes a CSV log and a JSON sidecar.
    Track {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        adapt: Option<OnOff>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a JSONL trajectory dataset from the true plant.
    GenerateData {
        /// Config providing `vehicle.*`; must describe a quadrotor.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        environments: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        /// Keep all rotors at full efficiency.
        #[arg(long)]
        wind_only: bool,
    },
    /// Fit a model to a dataset by rolling out the learned dynamics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        substeps: usize,
        #[arg(long, value_enum, default_value = "wind")]
        features: FeatureKind,
        /// Hidden width of the network feature map.
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        /// Number of network features.
        #[arg(long, default_value_t = 6)]
        p: usize,
        /// Initial inertia diagonal; defaults to the nominal vehicle.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        inertia: Option<Vec<f64>>,
        #[arg(long)]
        freeze_inertia: bool,
        #[arg(long)]
        freeze_gain: bool,
        #[arg(long)]
        freeze_features: bool,
    },
    /// Evaluate the Lyapunov certificate for the configured gains.
    Certify {
        #[command(flatten)]
        config: ConfigArgs,
        /// Search for certified gains by doubling.
        #[arg(long)]
        synthesize: bool,
        /// Also write the JSON report to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Summarize a tracking log.
    Report {
        /// CSV log written by `track`; its sidecar is `<log>.json`.
        #[arg(long)]
        log: PathBuf,
        /// Emit the identity report instead of error statistics.
        #[arg(long)]
        identities: bool,
        /// Gnuplot-ready error table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Other(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            e if e.is_usage() => Failure::Usage(e.to_string()),
            HarnessError::Dynamics(_) | HarnessError::Adaptation(_) => Failure::Numerical(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<LearningError> for Failure {
    fn from(e: LearningError) -> Self {
        match e {
            LearningError::InvalidConfig(_) | LearningError::InvalidDataset(_) | LearningError::DimensionMismatch { .. } => {
                Failure::Usage(e.to_string())
            }
            LearningError::DivergedLoss { .. } | LearningError::Dynamics(_) => Failure::Numerical(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<CertifierError> for Failure {
    fn from(e: CertifierError) -> Self {
        match e {
            CertifierError::SynthesisFailed { .. } | CertifierError::SingularMass => Failure::Numerical(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_error(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            Ok(ExperimentConfig::parse(&text)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = load_config(self.config.as_deref())?;
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn status_result(status: &RunStatus) -> Result<(), Failure> {
    match status {
        RunStatus::Completed => Ok(()),
        RunStatus::NumericalFailure { t, message } => Err(Failure::Numerical(format!("numerical failure at t = {t}: {message}"))),
    }
}

fn simulate(config: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let cfg = config.load()?;
    let log = run_open_loop(&cfg)?;
    let mut w = create(out)?;
    log.write_csv(&mut w)?;
    w.flush().map_err(|e| io_error(out, e))?;
    write_json(
        &sidecar_path(out),
        &json!({ "config": cfg, "input": log.input, "status": log.status, "rows": log.rows.len() }),
    )?;
    status_result(&log.status)
}

fn track(config: &ConfigArgs, adapt: Option<OnOff>, out: &Path) -> Result<(), Failure> {
    let mut cfg = config.load()?;
    if let Some(a) = adapt {
        cfg.adaptation.enabled = matches!(a, OnOff::On);
    }
    let log = run_tracking(&cfg)?;
    let mut w = create(out)?;
    log.write_csv(&mut w)?;
    w.flush().map_err(|e| io_error(out, e))?;
    let sidecar = sidecar_path(out);
    let mut w = create(&sidecar)?;
    log.write_sidecar(&mut w)?;
    w.flush().map_err(|e| io_error(&sidecar, e))?;
    let s = log.summary();
    println!(
        "rows {}  final |p - p*| {:e}  steady-state max {:e}  rms {:e}",
        s.rows, s.final_position_error, s.steady_state_position_error, s.rms_position_error
    );
    status_result(&log.status)
}

#[allow(clippy::too_many_arguments)]
fn generate(
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    environments: Option<usize>,
    samples: Option<usize>,
    steps: Option<usize>,
    dt: Option<f64>,
    wind_only: bool,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let truth = match cfg.vehicle.build()? {
        Vehicle::Quadrotor(q) => q,
        Vehicle::RigidBody(_) => return Err(Failure::Usage("generate-data needs a quadrotor vehicle".into())),
    };
    let mut dcfg = DatasetConfig { seed, ..Default::default() };
    dcfg.environments = environments.unwrap_or(dcfg.environments);
    dcfg.samples_per_env = samples.unwrap_or(dcfg.samples_per_env);
    dcfg.steps = steps.unwrap_or(dcfg.steps);
    dcfg.dt = dt.unwrap_or(dcfg.dt);
    let mut realizations = sample_dataset_realizations(seed);
    if dcfg.environments > realizations.len() {
        return Err(Failure::Usage(format!("at most {} environments are available", realizations.len())));
    }
    realizations.truncate(dcfg.environments);
    if wind_only {
        realizations = realizations
            .into_iter()
            .map(|r| DisturbanceRealization::new(r.wind, [1.0; 4]))
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let data = generate_dataset(&truth, &realizations, &dcfg)?;
    let mut w = create(out)?;
    data.write_jsonl(&mut w)?;
    w.flush().map_err(|e| io_error(out, e))?;
    write_json(
        &sidecar_path(out),
        &json!({ "dataset": dcfg, "vehicle": cfg.vehicle, "realizations": realizations }),
    )?;
    println!("{} samples in {} environments", data.len(), data.environments());
    Ok(())
}

fn feature_model(kind: FeatureKind, p: usize, hidden: usize, seed: u64) -> Result<FeatureModel, Failure> {
    let structured = |f: StructuredFeatures| Ok(FeatureModel::Structured { features: f });
    match kind {
        FeatureKind::Full => structured(StructuredFeatures::full()),
        FeatureKind::Wind => structured(StructuredFeatures::wind()),
        FeatureKind::WindThrust => structured(StructuredFeatures::by_name("wind_thrust").expect("known feature set")),
        FeatureKind::Network => {
            if p == 0 || hidden == 0 {
                return Err(Failure::Usage("--p and --hidden must be positive".into()));
            }
            Ok(FeatureModel::network(p, hidden, seed))
        }
    }
}

fn train_cmd(cmd: &Command) -> Result<(), Failure> {
    let Command::Train {
        data,
        out,
        iters,
        seed,
        lr,
        substeps,
        features,
        hidden,
        p,
        inertia,
        freeze_inertia,
        freeze_gain,
        freeze_features,
    } = cmd
    else {
        unreachable!()
    };
    let dataset = TrajectoryDataset::read_jsonl(open(data)?)?;
    let diag = match inertia {
        Some(v) => [v[0], v[1], v[2]],
        None => se3ham::vehicle::DEFAULT_INERTIA_DIAG,
    };
    let model = LearnableModel::new(diag, feature_model(*features, *p, *hidden, *seed)?, dataset.environments())?;
    let cfg = TrainConfig {
        lr: *lr,
        iters: *iters,
        seed: *seed,
        substeps: *substeps,
        freeze_inertia: *freeze_inertia,
        freeze_gain: *freeze_gain,
        freeze_features: *freeze_features,
    };
    let outcome = train(&model, &dataset, &cfg)?;
    let file = ModelFile {
        config: cfg,
        model: outcome.model,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.best_loss,
    };
    write_json(out, &file)?;
    println!(
        "loss {:e} -> {:e} (best at iteration {})",
        outcome.initial_loss, outcome.best_loss, outcome.best_iteration
    );
    Ok(())
}

fn certify_cmd(config: &ConfigArgs, synthesize: bool, json_out: Option<&Path>) -> Result<(), Failure> {
    let cfg = config.load()?;
    let vehicle = cfg.vehicle.build()?;
    let mass = vehicle.model().mass_matrix(&GeneralizedCoord::identity());
    let domain = cfg.domain()?;
    let a = &cfg.adaptation.gains;
    let c_ratio = match cfg.certify.c_ratio {
        Some(c) => c,
        None => {
            if a.cp != a.cr || a.cv != a.cw {
                return Err(CertifierError::UnequalAdaptationGains { cp: a.cp, cr: a.cr, cv: a.cv, cw: a.cw }.into());
            }
            a.cp / a.cv
        }
    };
    let value = if synthesize || cfg.certify.synthesize {
        let s = synthesize_gains(&mass, &domain, c_ratio, &cfg.gains)?;
        println!("{}", s.report.to_text());
        println!("doublings: {}", s.doublings);
        serde_json::to_value(&s)
    } else {
        let r = certify_ratio(&cfg.gains, c_ratio, &mass, &domain)?;
        println!("{}", r.to_text());
        serde_json::to_value(&r)
    }
    .map_err(|e| Failure::Other(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&value).map_err(|e| Failure::Other(e.to_string()))?);
    if let Some(p) = json_out {
        write_json(p, &value)?;
    }
    Ok(())
}

fn report(log_path: &Path, identities: bool, out: Option<&Path>) -> Result<(), Failure> {
    let side_path = sidecar_path(log_path);
    let sidecar: Sidecar = serde_json::from_reader(open(&side_path)?).map_err(|e| Failure::Usage(format!("{}: {e}", side_path.display())))?;
    let log = RunLog::read(open(log_path)?, &sidecar)?;
    let text = if identities {
        let r = identity_report(&log).map_err(|e| Failure::Numerical(e.to_string()))?;
        serde_json::to_string_pretty(&r)
    } else {
        serde_json::to_string_pretty(&log.summary())
    }
    .map_err(|e| Failure::Other(e.to_string()))?;
    println!("{text}");
    if let Some(p) = out {
        let mut w = create(p)?;
        let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            writeln!(w, "# t position_error e_p e_r e_v e_w p_e lyapunov")?;
            for r in &log.rows {
                writeln!(w, "{} {} {} {} {} {} {} {}", r.t, r.position_error(), r.e_p, r.e_r, r.e_v, r.e_w, r.p_e, r.lyapunov)?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| io_error(p, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { config, out } => simulate(config, out),
        Command::Track { config, adapt, out } => track(config, *adapt, out),
        Command::GenerateData {
            config,
            out,
            seed,
            environments,
            samples,
            steps,
            dt,
            wind_only,
        } => generate(config.as_deref(), out, *seed, *environments, *samples, *steps, *dt, *wind_only),
        cmd @ Command::Train { .. } => train_cmd(cmd),
        Command::Certify { config, synthesize, json } => certify_cmd(config, *synthesize, json.as_deref()),
        Command::Report { log, identities, out } => report(log, *identities, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("se3ham: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
