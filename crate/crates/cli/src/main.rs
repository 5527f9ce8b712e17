use std::path::PathBuf;

use anyhow::{Context, Result};
use cardioalign::align::LocalMode;
use cardioalign::config::RunConfig;
use cardioalign::model::Modality;
use cardioalign::run::{cmd_eval, cmd_pretrain, cmd_synth, cmd_train_joint, EvalSource, EvalTask, JointInputs};
use clap::{Parser, Subcommand};

/// Paired signal/clip contrastive training on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "cardioalign", version)]
struct Cli {
    /// Flat `key = value` config file; see `cardioalign config`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (for `synth`, the dataset directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory read by training and evaluation.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Override one config key, e.g. `--set beta=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print per-epoch summaries to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth {
        #[arg(long, default_value_t = 320)]
        n: usize,
    },
    /// Masked-autoencoder pretraining of one encoder.
    Pretrain {
        #[arg(long)]
        modality: Modality,
    },
    /// Joint global and local contrastive training.
    TrainJoint {
        /// Start from random encoders instead of pretraining checkpoints.
        #[arg(long)]
        no_smp: bool,
        #[arg(long)]
        local_mode: Option<LocalMode>,
        #[arg(long)]
        ecg_checkpoint: Option<PathBuf>,
        #[arg(long)]
        cmr_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out subjects.
    Eval {
        #[arg(long)]
        task: EvalTask,
        /// Checkpoint stem (without extension); defaults to `<out>/joint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate freshly initialized encoders instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
    },
    /// Print the resolved configuration.
    Config,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::desk(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("`--set {kv}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.dataset = d.clone();
    }
    if let Command::TrainJoint { local_mode: Some(m), .. } = &cli.command {
        cfg.local_mode = *m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Synth { n } => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            cmd_synth(&cfg, *n, &dir)?;
            println!("wrote {n} subjects to {}", dir.display());
        }
        Command::Pretrain { modality } => {
            let stem = cmd_pretrain(&cfg, *modality, cli.verbose)?;
            println!("checkpoint {}", stem.display());
        }
        Command::TrainJoint { no_smp, ecg_checkpoint, cmr_checkpoint, .. } => {
            let inputs = JointInputs { no_smp: *no_smp, ecg_checkpoint: ecg_checkpoint.clone(), cmr_checkpoint: cmr_checkpoint.clone() };
            let stem = cmd_train_joint(&cfg, &inputs, cli.verbose)?;
            println!("checkpoint {}", stem.display());
        }
        Command::Eval { task, checkpoint, random_init } => {
            let source = if *random_init {
                EvalSource::RandomInit
            } else {
                EvalSource::Checkpoint(checkpoint.clone().unwrap_or_else(|| cardioalign::run::joint_stem(&cfg.out)))
            };
            let out = cmd_eval(&cfg, *task, &source)?;
            if let Some(r) = &out.retrieval {
                for (name, p) in &r.phenotypes {
                    println!("{name}: P@1 {:.3} (random {:.3}) mean rank {:.1}", p.precision_at[&1], p.random_precision_at[&1], p.mean_rank);
                }
            }
            if let Some(r) = &out.regression {
                for (name, p) in &r.phenotypes {
                    println!("{name}: R2 {:.3}", p.r2);
                }
            }
            if let Some(h) = &out.heatmap {
                println!("mean diag score {:.3} over {} subjects", h.mean_diag_score, h.subjects.len());
            }
            println!("reports in {}", cfg.out.join("eval").display());
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}
