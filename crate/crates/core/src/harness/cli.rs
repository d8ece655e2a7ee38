//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::{DatasetSource, ExperimentConfig};
use super::experiment::{load_corpus, run_experiment, train_members, write_corpus, RunOptions};
use super::report::{self, ConfidenceReport};
use super::weights::load_model;
use crate::cam::{compute_cam, export_overlay};
use crate::data::{write_synth_patient, CohortSpec};
use crate::ensemble::{ConfidenceMode, SmoothingKernel};
use crate::error::{Error, Result};
use crate::net::{gradient_check, GRADIENT_CHECK_STEP};
use crate::signal::{NoMotionPolicy, PatientId};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "pdstate",
    version,
    about = "Motor-state classification from wrist accelerometry"
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the experiment and the network seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the channel divisor.
    #[arg(long)]
    width_scale: Option<f64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.net.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(ws) = self.width_scale {
            config.net.width_scale = ws;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort as raw/label CSV pairs.
    Synth {
        #[arg(long)]
        patients: u32,
        #[arg(long)]
        minutes: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Cohort parameters (JSON); the flags above override it.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Resample, window and filter a CSV directory; writes a per-patient summary.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// No-motion variance threshold in G^2.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train (or load from cache) every network an experiment needs.
    Train(ExperimentArgs),
    /// Run an experiment and write all reports.
    Evaluate(ExperimentArgs),
    /// Run an experiment and print accuracy per smoothing kernel.
    SweepSmoothing {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Comma-separated kernel widths, `Inf` for the whole day.
        #[arg(long, value_delimiter = ',')]
        kernels: Option<Vec<SmoothingKernel>>,
    },
    /// Run an experiment and print accuracy by confidence band.
    ConfidenceReport {
        #[command(flatten)]
        experiment: ExperimentArgs,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Export a class activation map overlay for one window.
    Cam {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Weight file to explain.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        patient: u32,
        #[arg(long)]
        minute: u32,
        /// Class index: 0 OFF, 1 ON, 2 DYS.
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// SVG path; the CSV sidecar is written beside it.
        #[arg(long)]
        svg: PathBuf,
    },
    /// Finite-difference check of a small network's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64.0)]
        width_scale: f64,
        #[arg(long, default_value_t = GRADIENT_CHECK_STEP)]
        step: f64,
    },
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a failed run, 2 on a usage error.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_kind(&e));
            1
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::DegenerateBatch(_) => "degenerate_batch",
        Error::LabelOutOfRange { .. } => "label",
        Error::InsufficientData(_) => "insufficient_data",
        Error::Precondition(_) => "precondition",
        Error::Config(_) => "config",
        Error::Architecture(_) => "architecture",
        Error::NoEligibleModels(_) => "no_eligible_models",
        Error::Corrupt { .. } => "corrupt",
        Error::Interrupted(_) => "interrupted",
        Error::Parse { .. } => "parse",
        Error::Io { .. } => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            patients,
            minutes,
            seed,
            out,
            cohort,
        } => {
            let mut spec = match cohort {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Parse {
                        source_name: path.display().to_string(),
                        reason: e.to_string(),
                    })?
                }
                None => CohortSpec::default(),
            };
            spec.patients = patients;
            spec.minutes = minutes;
            spec.seed = seed;
            create_dir(&out)?;
            for profile in spec.profiles()? {
                write_synth_patient(&profile, minutes, &out)?;
            }
            println!("wrote {patients} patients of {minutes} minutes to {}", out.display());
            Ok(0)
        }
        Command::Preprocess { data, out, threshold } => {
            let no_motion = match threshold {
                Some(t) => NoMotionPolicy::with_threshold(t)?,
                None => NoMotionPolicy::default(),
            };
            let config = ExperimentConfig {
                dataset: DatasetSource::CsvDir(data),
                no_motion,
                ..ExperimentConfig::default()
            };
            let corpus = load_corpus(&config)?;
            create_dir(&out)?;
            let path = out.join("corpus.csv");
            write_corpus(&path, &corpus.rows)?;
            print!("{}", fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
            Ok(0)
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let (trained, loaded) = train_members(&config, RunOptions::default())?;
            println!("{trained} networks trained, {loaded} loaded from cache");
            Ok(0)
        }
        Command::Evaluate(args) => {
            let config = args.resolve()?;
            let bundle = run_experiment(&config)?;
            println!("patient,windows,accuracy_pct");
            for s in &bundle.per_patient {
                println!("{},{},{:.2}", s.patient, s.windows, 100.0 * s.accuracy);
            }
            println!(
                "All,{},{:.2}",
                bundle.per_patient.iter().map(|s| s.windows).sum::<usize>(),
                100.0 * bundle.overall
            );
            println!("reports written to {}", bundle.output_dir.display());
            Ok(0)
        }
        Command::SweepSmoothing { experiment, kernels } => {
            let mut config = experiment.resolve()?;
            if let Some(k) = kernels {
                config.smoothing = k;
            }
            let bundle = run_experiment(&config)?;
            if bundle.smoothing.is_empty() {
                return Err(Error::Config(format!(
                    "{} produces no per-window ensemble predictions",
                    config.kind.as_str()
                )));
            }
            println!("kernel_min,accuracy_pct");
            for s in &bundle.smoothing {
                println!("{},{:.2}", s.kernel, 100.0 * s.accuracy());
            }
            Ok(0)
        }
        Command::ConfidenceReport { experiment, fraction } => {
            let mut config = experiment.resolve()?;
            if let Some(f) = fraction {
                config.confidence_fraction = f;
            }
            let bundle = run_experiment(&config)?;
            let report = bundle.confidence.ok_or_else(|| {
                Error::Config(format!(
                    "{} produces no per-window ensemble predictions",
                    config.kind.as_str()
                ))
            })?;
            print_confidence(&report);
            Ok(0)
        }
        Command::Cam {
            experiment,
            weights,
            patient,
            minute,
            class,
            svg,
        } => {
            let config = experiment.resolve()?;
            let params = load_model(&weights, &config.net)?;
            let corpus = load_corpus(&config)?;
            let window = corpus
                .records
                .iter()
                .filter(|r| r.patient_id() == PatientId(patient))
                .flat_map(|r| r.windows())
                .find(|w| w.minute_index == minute)
                .ok_or_else(|| {
                    Error::InsufficientData(format!("no kept window for patient {patient} minute {minute}"))
                })?;
            let cam = compute_cam(&params, window)?;
            if let Some(dir) = svg.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            export_overlay(window, &cam, class, &svg)?;
            println!("wrote {} and {}", svg.display(), svg.with_extension("csv").display());
            Ok(0)
        }
        Command::Gradcheck {
            seed,
            width_scale,
            step,
        } => {
            let err = gradient_check(width_scale, seed, step)?;
            println!("max relative error {err:.3e}");
            Ok(if err < GRADCHECK_TOLERANCE { 0 } else { 1 })
        }
    }
}

fn print_confidence(report: &ConfidenceReport) {
    println!("mode,band,windows,accuracy_pct");
    for mode in ConfidenceMode::ALL {
        for b in report.bands_for(mode) {
            println!(
                "{},{:.0}-{:.0},{},{:.2}",
                mode.as_str(),
                100.0 * b.lo_fraction,
                100.0 * b.hi_fraction,
                b.windows,
                100.0 * b.accuracy()
            );
        }
    }
    let nonincreasing = report::bands_nonincreasing(report.bands_for(ConfidenceMode::Logit));
    println!("logit bands nonincreasing: {nonincreasing}");
    match report.interpolation_accuracy() {
        Some(a) => println!("interpolation accuracy (eligible patients): {:.2}", 100.0 * a),
        None => println!("interpolation accuracy: no eligible patients"),
    }
}
