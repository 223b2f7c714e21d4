//! Command-line interface. Every subcommand takes `--config`, `--seed` and
//! `--out`; without `--config` a run directory's saved config is reused.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::AppResult;
use crate::pipeline::{self, AblationKind, Run, CONFIG_FILE};
use crate::synth::{write_pair, PairSizes};

#[derive(Debug, Parser)]
#[command(name = "srood", version, about = "Out-of-distribution detection by eroding and repairing inputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, default_value = "srood-run")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the perceptual feature network on the train split.
    FitPhi(Common),
    /// Train the repairing network.
    Train(Common),
    /// Choose the test-time erosion on the validation splits.
    SelectErosion(Common),
    /// Resolve the decision threshold from ID validation scores.
    Calibrate(Common),
    /// Score both test splits.
    Score(Common),
    /// Score the test splits and write the AUROC report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also fit a labelled classifier head and report its baselines.
        #[arg(long)]
        baselines: bool,
    },
    /// Run an ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of loss, offset, variant.
        #[arg(long)]
        kind: String,
    },
    /// Decoder smoothness and latent displacement diagnostics.
    Diagnose(Common),
    /// Re-emit the report with histograms and image grids.
    Report(Common),
    /// Generate the synthetic digits/clothing pair with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        val: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

fn resolve(common: &Common) -> AppResult<Run> {
    let saved = common.out.join(CONFIG_FILE);
    let mut cfg = match (&common.config, saved.is_file()) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, true) => ExperimentConfig::load(&saved)?,
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Run::new(cfg, &common.out)
}

fn say(out: &Path, what: &str) {
    println!("{what} -> {}", out.display());
}

fn execute(command: Command) -> AppResult<()> {
    match command {
        Command::FitPhi(c) => {
            let run = resolve(&c)?;
            pipeline::fit_phi_stage(&run)?;
            say(&run.path(pipeline::PHI_FILE), "perceptual network");
        }
        Command::Train(c) => {
            let run = resolve(&c)?;
            pipeline::train_stage(&run)?;
            say(&run.path(pipeline::REPAIRER_FILE), "repairer");
        }
        Command::SelectErosion(c) => {
            let run = resolve(&c)?;
            let sel = pipeline::select_stage(&run)?;
            println!("selected {} (index {})", sel.op, sel.index);
        }
        Command::Calibrate(c) => {
            let run = resolve(&c)?;
            println!("threshold {:?}", pipeline::calibrate_stage(&run)?);
        }
        Command::Score(c) => {
            let run = resolve(&c)?;
            pipeline::score_stage(&run)?;
            say(&run.path(pipeline::SCORES_FILE), "scores");
        }
        Command::Evaluate { common, baselines } => {
            let run = resolve(&common)?;
            let report = pipeline::evaluate_stage(&run, baselines)?;
            print!("{}", crate::report::report_text(&report));
        }
        Command::Ablate { common, kind } => {
            let kind: AblationKind = kind.parse()?;
            let run = resolve(&common)?;
            let table = pipeline::ablate_stage(&run, kind)?;
            print!("{}", crate::report::ablation_text(&table));
        }
        Command::Diagnose(c) => {
            let run = resolve(&c)?;
            let (id, ood) = pipeline::diagnose_stage(&run)?;
            println!("lip_g id {:.4} ood {:.4}", id.lip_g_estimate, ood.lip_g_estimate);
        }
        Command::Report(c) => {
            let run = resolve(&c)?;
            for p in pipeline::report_stage(&run)? {
                println!("{}", p.display());
            }
        }
        Command::Synth { out, seed, train, val, test, size } => {
            let manifest = write_pair(&out, PairSizes { train, val, test }, size, seed)?;
            say(&manifest, "manifest");
        }
    }
    Ok(())
}

/// Parses `argv` and runs the command. Failures print one `error: ...`
/// line to stderr and return a nonzero code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
