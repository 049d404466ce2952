use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dris_covert::config::ScenarioConfig;
use dris_covert::detector::{calibrate_threshold, evaluate, FittedDetector};
use dris_covert::flow::FlowModel;
use dris_covert::harness::{
    emit_csv, run_elements_sweep, run_power_sweep, run_samples_sweep, run_validation, sjnr_pair,
    PointData, SweepResult,
};
use dris_covert::statkit::SeedStream;
use dris_covert::Error;

#[derive(Parser)]
#[command(name = "dris-covert", version, about = "Covert-detection simulator with a disco RIS")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (`section.key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed, overrides `seeds.root`
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path, overrides the configured one
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Target false-alarm rate, overrides `detector.alpha`
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-checks; exit 1 if any fails
    Validate,
    /// MDR and SJNR versus transmit power
    SweepPower,
    /// MDR and SJNR versus number of surface elements
    SweepElements,
    /// MDR and SJNR versus samples per statistic
    SweepSamples,
    /// Fit the unsupervised detector at `power.train_dbm` and save its flow
    Train,
    /// Evaluate a saved flow at `power.train_dbm`
    Eval {
        /// Model file, defaults to `output.model`
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print the resolved configuration
    DumpConfig,
}

enum Failure {
    Validation,
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::parse_file(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = cli.alpha {
        cfg.detector.alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_results(results: &[SweepResult], cfg: &ScenarioConfig, path: &Path) -> Result<(), Failure> {
    emit_csv(results, cfg, path)?;
    for r in results {
        eprintln!("{} = {}: {:.1} s", r.sweep_var, r.sweep_value, r.wall_seconds);
    }
    eprintln!("wrote {} rows to {}", results.len(), path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Validate => {
            let report = run_validation(&cfg);
            print!("{report}");
            if !report.passed() {
                return Err(Failure::Validation);
            }
        }
        Command::SweepPower => {
            write_results(&run_power_sweep(&cfg)?, &cfg, &out_path(cli, &cfg.csv_path))?
        }
        Command::SweepElements => {
            write_results(&run_elements_sweep(&cfg)?, &cfg, &out_path(cli, &cfg.csv_path))?
        }
        Command::SweepSamples => {
            write_results(&run_samples_sweep(&cfg)?, &cfg, &out_path(cli, &cfg.csv_path))?
        }
        Command::Train => {
            let scen = cfg.scenario(cfg.train_dbm)?;
            let data = PointData::new(&cfg, &scen, cfg.detector.samples_per_statistic, train_seed(&cfg))?;
            let det = data.fit_unsupervised(&scen)?;
            let path = out_path(cli, &cfg.model_path);
            det.flow().save(&path)?;
            eprintln!(
                "saved flow to {} (threshold {} at alpha {})",
                path.display(),
                det.threshold(),
                cfg.detector.alpha
            );
        }
        Command::Eval { model } => {
            let model_path = model.clone().unwrap_or_else(|| PathBuf::from(&cfg.model_path));
            let flow = FlowModel::load(&model_path)?;
            let scen = cfg.scenario(cfg.train_dbm)?;
            let seed = train_seed(&cfg);
            let data = PointData::new(&cfg, &scen, cfg.detector.samples_per_statistic, seed)?;
            let mut gen = SeedStream::new(data.train_config("flow-unsup").seed).rng("calibrate", 0);
            let cal = calibrate_threshold(
                &flow,
                data.null(),
                cfg.detector.alpha,
                cfg.detector.threshold_samples,
                &mut gen,
            )?;
            let det = FittedDetector::from_parts(flow, *data.null(), cal)?;
            let rep = evaluate(&det, &data.eval_h0(&scen)?.concat(&data.eval_h1(&scen)?))?;
            let (mdr, far) = match (rep.mdr, rep.far) {
                (Some(m), Some(f)) => (m, f),
                _ => return Err(Failure::Runtime("empty evaluation set".into())),
            };
            let (sjnr_sim_db, sjnr_theory_db) = sjnr_pair(&cfg, &scen, &SeedStream::new(seed))?;
            let row = SweepResult {
                sweep_var: "eval_p0_dbm".into(),
                sweep_value: cfg.train_dbm,
                mdr_unsup: mdr,
                mdr_sup: None,
                mdr_no_dris: None,
                far_target: cfg.detector.alpha,
                far_empirical: far,
                sjnr_sim_db,
                sjnr_theory_db,
                seed,
                wall_seconds: 0.0,
            };
            write_results(&[row], &cfg, &out_path(cli, &cfg.csv_path))?;
        }
        Command::DumpConfig => {
            let text = cfg.dump();
            match &cli.out {
                Some(p) => std::fs::write(p, text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn train_seed(cfg: &ScenarioConfig) -> u64 {
    SeedStream::new(cfg.seed).child_seed("train", 0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation) => ExitCode::from(1),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
