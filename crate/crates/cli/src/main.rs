use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scod_annotate::AnnotatorConfig;
use scribble_cod::data::{save_sample, synth_generate, validate_dataset, DatasetManifest};
use scribble_cod::metrics::EvalResolution;
use scribble_cod::pipeline::{device_from_env, eval_cmd, infer, DataSource, TrainConfig, Trainer};

/// Scribble-supervised camouflaged object detection.
///
/// Exit status: 0 on success, 1 for invalid input or configuration, 2 for
/// runtime failures. `SCOD_DEVICE` selects the compute device (`cpu`).
#[derive(Debug, Parser)]
#[command(name = "scod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a TOML config; writes checkpoints and a step log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print the default training config as TOML.
    Defaults,
    /// Predict a map for every image in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Evaluate at `size × size` instead of ground-truth resolution.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value = "dataset")]
        label: String,
    },
    /// Serve the annotation tool's HTTP API for one dataset split.
    Annotate {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value = "train")]
        split: String,
        /// Built annotation UI to serve at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Write a synthetic camouflage dataset split.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 320)]
        size: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Check every split under a dataset root.
    Validate {
        #[arg(long)]
        root: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<scribble_cod::Error> for Failure {
    fn from(e: scribble_cod::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, resume } => {
            let config = TrainConfig::load(&config)?;
            let device = device_from_env()?;
            let mut trainer = match resume {
                Some(ckpt) => {
                    let manifest = DatasetManifest::open(&config.dataset_root, &config.train_split)?;
                    Trainer::resume(config, DataSource::Disk(manifest), &ckpt, &device)?
                }
                None => Trainer::from_config(config, &device)?,
            };
            let meta = trainer.run()?;
            println!(
                "finished at step {} (epoch {}); checkpoint {}",
                meta.step,
                meta.epoch,
                trainer.checkpoint_path("final").display()
            );
        }
        Command::Defaults => {
            print!("{}", TrainConfig::default().to_toml()?);
        }
        Command::Infer { ckpt, input, out } => {
            let device = device_from_env()?;
            let report = infer(&ckpt, &input, &out, &device)?;
            println!("wrote {} map(s), skipped {}", report.written, report.skipped.len());
            for (path, reason) in &report.skipped {
                println!("  skipped {}: {reason}", path.display());
            }
        }
        Command::Eval {
            pred,
            gt,
            size,
            csv,
            json,
            label,
        } => {
            let resolution = size.map_or(EvalResolution::Native, EvalResolution::Square);
            let report = eval_cmd(&pred, &gt, resolution)?;
            print!("{}", report.table(&label));
            if let Some(path) = csv {
                report.write_csv(&path)?;
            }
            if let Some(path) = json {
                report.write_json(&path)?;
            }
        }
        Command::Annotate {
            root,
            port,
            host,
            split,
            static_dir,
        } => {
            if !root.is_dir() {
                return Err(Failure::Validation(format!("{} is not a directory", root.display())));
            }
            let config = AnnotatorConfig {
                root,
                split,
                static_dir,
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
            runtime.block_on(async {
                let addr = SocketAddr::new(host, port);
                let listener = scod_annotate::bind(addr)
                    .await
                    .map_err(|e| Failure::Runtime(format!("cannot listen on {addr}: {e}")))?;
                scod_annotate::serve(listener, config)
                    .await
                    .map_err(|e| Failure::Runtime(e.to_string()))
            })?;
        }
        Command::Synth {
            out,
            count,
            seed,
            size,
            split,
        } => {
            if count == 0 {
                return Err(Failure::Validation("count must be at least 1".into()));
            }
            let samples = synth_generate(seed, count, size)?;
            let manifest = DatasetManifest::new(&out, &split, samples.iter().map(|s| s.id.clone()).collect());
            for s in &samples {
                save_sample(&manifest, s)?;
            }
            manifest.write()?;
            println!("wrote {count} sample(s) to {}", manifest.split_dir().display());
        }
        Command::Validate { root } => {
            let report = validate_dataset(&root)?;
            for v in &report.violations {
                println!("{v}");
            }
            println!(
                "{} split(s), {} sample(s), {} violation(s)",
                report.splits.len(),
                report.samples_checked,
                report.violations.len()
            );
            if !report.is_clean() {
                return Err(Failure::Validation("dataset has violations".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
