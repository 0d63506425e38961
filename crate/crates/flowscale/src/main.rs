use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use flowscale::config::PERCEPTUAL_WEIGHT;
use flowscale::{cmd_evaluate, cmd_generate, cmd_sample, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "flowscale", version, about = "Conditional normalizing flows for downscaling gridded fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the command's random draws.
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus of random fields.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of fields.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a conditional flow on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus manifest.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Add the sample-MSE term with the default weight.
        #[arg(long)]
        perceptual: bool,
        /// Continue from the state checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw high-resolution samples for one low-resolution grid.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Low-resolution CNFG grid.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Score bicubic and flow variants on a test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Test manifest.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Checkpoint for `cnf` and `cnf+constraint`.
        #[arg(long)]
        cnf: Option<PathBuf>,
        /// Checkpoint for `cnf+perceptual`.
        #[arg(long)]
        perceptual: Option<PathBuf>,
        /// Comma-separated variants.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Generate { common, count } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.data_seed = s;
            }
            if let Some(n) = count {
                cfg.num_fields = n;
            }
            cfg.validate()?;
            let m = cmd_generate(&cfg, common.force)?;
            println!("wrote {} fields to {}", m.files.len(), cfg.out.display());
        }
        Command::Train {
            common,
            corpus,
            epochs,
            perceptual,
            resume,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if corpus.is_some() {
                cfg.corpus = corpus;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if perceptual {
                cfg.train.perceptual_weight = PERCEPTUAL_WEIGHT;
            }
            cfg.validate()?;
            let o = cmd_train(&cfg, common.force, resume)?;
            for r in &o.log.records {
                println!("{r}");
            }
            println!("final checkpoint {}", o.final_checkpoint.display());
        }
        Command::Sample {
            common,
            checkpoint,
            input,
            tau,
            n,
        } => {
            let cfg = load(&common)?;
            let seed = common.seed.unwrap_or(cfg.sample_seed);
            let s = cmd_sample(&checkpoint, &input, tau, n, seed, &cfg.out, common.force)?;
            println!("wrote {} samples to {}", s.len(), cfg.out.display());
        }
        Command::Evaluate {
            common,
            test,
            cnf,
            perceptual,
            variants,
            tau,
            n,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.sample_seed = s;
            }
            if test.is_some() {
                cfg.test_manifest = test;
            }
            if cnf.is_some() {
                cfg.cnf_checkpoint = cnf;
            }
            if perceptual.is_some() {
                cfg.perceptual_checkpoint = perceptual;
            }
            if let Some(v) = variants {
                cfg.set(0, "variants", &v)?;
            }
            if let Some(t) = tau {
                cfg.tau = t;
            }
            if let Some(n) = n {
                cfg.ensemble_n = n;
            }
            cfg.validate()?;
            let reports = cmd_evaluate(&cfg, common.force)?;
            print!("{}", flowscale::output::metrics_csv(&reports));
        }
    }
    Ok(())
}
