use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saliency_pp::calibration::Stage;
use saliency_pp::io::RunConfig;
use saliency_pp::pipeline::{self, SynthParams};
use saliency_pp::{Error, Result};

#[derive(Parser)]
#[command(name = "saliency-pp", version, about = "Evaluate saliency models as spatial point processes")]
struct Cli {
    /// Worker threads; defaults to the config value, then to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the output directory of the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset and report every violation.
    Validate { config: PathBuf },
    /// Fit a reference model.
    Baseline {
        #[command(subcommand)]
        kind: BaselineKind,
    },
    /// Fit the map-to-density conversion of one model.
    Calibrate {
        config: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "blur")]
        stage: Stage,
    },
    /// Bits/fixation, factor contributions and percent explained per model.
    Eval { config: PathBuf },
    /// Ratio, information-gain and difference maps plus the gain scatter.
    Maps {
        config: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, num_args = 1..)]
        images: Vec<String>,
    },
    /// AUC and KL metrics, raw and rescaled, with correlations.
    Metrics { config: PathBuf },
    /// Fit the self-excitation model on top of a calibrated model.
    Temporal {
        config: PathBuf,
        #[arg(long)]
        model: String,
    },
    /// Generate synthetic fixation data.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
}

#[derive(Subcommand)]
enum BaselineKind {
    Histogram { config: PathBuf },
    Gold { config: PathBuf },
}

#[derive(Subcommand)]
enum SynthKind {
    Spatial { params: PathBuf },
    Temporal { params: PathBuf },
}

impl Cli {
    fn config(&self, path: &PathBuf) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(path)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        Ok(cfg)
    }

    fn synth_params(&self, path: &PathBuf) -> Result<SynthParams> {
        let mut p = SynthParams::load(path)?;
        if let Some(dir) = &self.output_dir {
            p.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            p.seed = seed;
        }
        Ok(p)
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn with_config(cli: &Cli, path: &PathBuf, f: impl FnOnce(&RunConfig) -> Result<serde_json::Value>) -> Result<serde_json::Value> {
    let cfg = cli.config(path)?;
    set_jobs(cfg.jobs)?;
    f(&cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Validate { config } => with_config(cli, config, pipeline::validate),
        Command::Baseline { kind } => match kind {
            BaselineKind::Histogram { config } => with_config(cli, config, pipeline::baseline_histogram),
            BaselineKind::Gold { config } => with_config(cli, config, pipeline::baseline_gold),
        },
        Command::Calibrate { config, model, stage } => {
            with_config(cli, config, |cfg| pipeline::calibrate(cfg, model, *stage))
        }
        Command::Eval { config } => with_config(cli, config, pipeline::eval),
        Command::Maps { config, model, images } => with_config(cli, config, |cfg| pipeline::maps(cfg, model, images)),
        Command::Metrics { config } => with_config(cli, config, pipeline::metrics),
        Command::Temporal { config, model } => with_config(cli, config, |cfg| pipeline::temporal(cfg, model)),
        Command::Synth { kind } => {
            set_jobs(cli.jobs)?;
            match kind {
                SynthKind::Spatial { params } => pipeline::synth(&cli.synth_params(params)?, false),
                SynthKind::Temporal { params } => pipeline::synth(&cli.synth_params(params)?, true),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let body = serde_json::json!({ "error": "Usage", "message": e.render().to_string().trim_end() });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("serializable");
            // a closed stdout (e.g. piped into `head`) is not a failure of the run
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
