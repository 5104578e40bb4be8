//! Command line: generate synthetic data, train a cascade, run detection,
//! and evaluate, all driven by one TOML-shaped configuration.

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use landmark_cascade::cascade::{detect, train_cascade, CascadeModel};
use landmark_cascade::dataio::Dataset;
use landmark_cascade::eval::{evaluate_model_at_precision, iteration_errors};
use landmark_cascade::model_io::{load_model, save_model};
use landmark_cascade::seeds;
use landmark_cascade::synth::generate_synthetic_dataset;
use landmark_cascade_cli::{apply_overrides, config_keys_help, load_config, RunConfig};
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

const DETECT_TAG: u64 = 0x434c_4944_4554_4301;

#[derive(Parser, Debug)]
#[command(name = "landmark-cascade", version, about = "Occlusion-aware facial landmark detector")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set cascade.iterations=2.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the master seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 or omitted uses all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        /// Output record file; images are written next to it.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train a cascade model on a dataset.
    Train {
        /// Training records (JSONL with images alongside).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Where to write the trained model.
        #[arg(long, value_name = "FILE")]
        model_out: PathBuf,
        /// Print per-iteration training-set errors to stderr.
        #[arg(long)]
        trace: bool,
    },
    /// Run detection over a dataset's images and face boxes.
    Detect {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Output JSONL, one detection per input record.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Evaluate a model against a labeled dataset.
    Eval {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Also write per-sample errors as CSV.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Precision floor for the occlusion recall metric.
        #[arg(long, default_value_t = 0.8)]
        precision: f64,
    },
}

/// Exit code 2 for configuration and usage problems, 1 for runtime
/// failures.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<landmark_cascade_cli::ConfigError> for CliError {
    fn from(e: landmark_cascade_cli::ConfigError) -> Self {
        CliError::Usage(e.message)
    }
}

impl From<landmark_cascade::Error> for CliError {
    fn from(e: landmark_cascade::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Serialize)]
struct DetectionRecord<'a> {
    index: usize,
    image: &'a str,
    landmarks: Vec<[f64; 2]>,
    visibility: Vec<f64>,
    occluded: Vec<bool>,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let base = load_config(cli.config.as_deref())?;
    let mut config = apply_overrides(&base, &cli.set)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn check_landmarks(model: &CascadeModel, dataset: &Dataset) -> Result<(), CliError> {
    let data_d = dataset.landmark_count()?;
    if model.landmarks() != data_d {
        return Err(CliError::Runtime(format!(
            "model expects {} landmarks but the dataset has {data_d}",
            model.landmarks()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(workers) = cli.workers {
        if workers > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global()
                .map_err(|e| CliError::Usage(format!("cannot configure {workers} workers: {e}")))?;
        }
    }
    let config = effective_config(&cli)?;

    match &cli.command {
        Command::Synth { out } => {
            let synth_cfg = config.synth_config();
            eprintln!(
                "generating {} samples with {} landmarks (seed {})",
                synth_cfg.samples, synth_cfg.landmarks, synth_cfg.seed
            );
            let mut dataset = generate_synthetic_dataset(&synth_cfg)?;
            // Image files are namespaced by the record file's stem so
            // sibling datasets in one directory cannot overwrite each
            // other's images.
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
            for (i, rec) in dataset.records.iter_mut().enumerate() {
                rec.image = format!("{stem}_img/{i:05}.pgm");
            }
            dataset.save(out)?;
            eprintln!("wrote {} samples to {}", dataset.len(), out.display());
        }
        Command::Train {
            data,
            model_out,
            trace,
        } => {
            let dataset = Dataset::load(data)?;
            let cascade_cfg = config.cascade_config();
            eprintln!(
                "loaded {} samples; training {} iterations with {} copies each (seed {})",
                dataset.len(),
                cascade_cfg.iterations,
                cascade_cfg.augment_copies,
                config.seed
            );
            let model = train_cascade(&dataset, &cascade_cfg, config.seed)?;
            if *trace {
                let errors = iteration_errors(&dataset, &model, config.seed)?;
                for (t, e) in errors.iter().enumerate() {
                    if t == 0 {
                        eprintln!("training-set error at initialization: {e:.6}");
                    } else {
                        eprintln!("training-set error after iteration {t}: {e:.6}");
                    }
                }
            }
            save_model(&model, model_out)?;
            eprintln!("wrote model to {}", model_out.display());
        }
        Command::Detect { data, model, out } => {
            let dataset = Dataset::load(data)?;
            let model = load_model(model)?;
            check_landmarks(&model, &dataset)?;
            let file = std::fs::File::create(out)?;
            let mut w = std::io::BufWriter::new(file);
            for (i, rec) in dataset.records.iter().enumerate() {
                let det_seed = seeds::derive(config.seed, DETECT_TAG, i as u64);
                let det = detect(&dataset.images[i], &rec.face_box, &model, det_seed)?;
                let row = DetectionRecord {
                    index: i,
                    image: &rec.image,
                    landmarks: det.landmarks.points.iter().map(|p| [p.x, p.y]).collect(),
                    visibility: det.visibility,
                    occluded: det.occluded,
                };
                let line = serde_json::to_string(&row)
                    .map_err(|e| CliError::Runtime(format!("cannot encode detection: {e}")))?;
                writeln!(w, "{line}")?;
            }
            w.flush()?;
            eprintln!("wrote {} detections to {}", dataset.len(), out.display());
        }
        Command::Eval {
            data,
            model,
            csv,
            precision,
        } => {
            let dataset = Dataset::load(data)?;
            let model = load_model(model)?;
            check_landmarks(&model, &dataset)?;
            let report = evaluate_model_at_precision(&dataset, &model, config.seed, *precision)?;
            print!("{}", report.text_table());
            if let Some(path) = csv {
                std::fs::write(path, report.csv())?;
                eprintln!("wrote per-sample errors to {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = config_keys_help();
    let command = Cli::command().after_long_help(help.clone()).after_help(help);
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
