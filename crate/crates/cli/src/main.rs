use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ladmim::eval;
use ladmim::lavit::TargetMode;
use ladmim::pipeline::{self, PipelineError};
use ladmim::RunConfig;

/// Two-stage logical/structural anomaly detection on a synthetic benchmark.
///
/// Exit status: 0 success, 1 invalid configuration or other failure,
/// 2 missing prerequisite stage, 3 training divergence.
#[derive(Parser, Debug)]
#[command(name = "ladmim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; unspecified fields take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Sets the data, init, mask and eval seeds together.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports. Without --data the
    /// dataset lives in OUT/data.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// LAViT prediction target.
    #[arg(long, global = true)]
    target: Option<TargetMode>,
    /// Random masks per image when scoring.
    #[arg(long, global = true, value_name = "N")]
    n_masks: Option<usize>,
    /// Fraction of tokens masked.
    #[arg(long, global = true, value_name = "F")]
    mask_ratio: Option<f64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the hierarchical VQ tokenizer (stage one).
    TrainHvq,
    /// Train LAViT against the frozen tokenizer (stage two).
    TrainLavit,
    /// Score the test split and write report.json and scores.csv.
    Eval,
    /// Train and evaluate LAViT for each prediction target.
    Ablate {
        /// Targets to compare (default: all four).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<TargetMode>,
    },
    /// Codebook usage, collision and redundancy per object kind.
    Diagnose,
    /// gen-data, train-hvq, train-lavit and eval in sequence.
    Run,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn resolve(c: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
        cfg.data_dir = o.join("data");
    }
    if let Some(d) = &c.data {
        cfg.data_dir = d.clone();
    }
    if let Some(t) = c.target {
        cfg.target = t;
    }
    if let Some(n) = c.n_masks {
        cfg.n_masks = n;
    }
    if let Some(r) = c.mask_ratio {
        cfg.mask_ratio = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &eval::ScoreReport) {
    print!("{}", eval::summary_table(r));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = resolve(&cli.common)?;
    let verbose = |m: &str| eprintln!("{m}");
    let log: pipeline::Log = if cli.common.quiet { &pipeline::quiet } else { &verbose };
    match cli.command {
        Command::GenData => {
            let m = pipeline::cmd_gen_data(&cfg)?;
            println!("wrote {} images to {}", m.images.len(), cfg.data_dir.display());
        }
        Command::TrainHvq => {
            let t = pipeline::cmd_train_hvq(&cfg, log)?;
            println!(
                "HVQ reconstruction MSE {:.5} -> {:.5}; checkpoint {}",
                t.log.initial_recon_mse,
                t.log.epoch_recon_mse.last().copied().unwrap_or(t.log.initial_recon_mse),
                pipeline::hvq_checkpoint_path(&cfg).display()
            );
        }
        Command::TrainLavit => {
            let t = pipeline::cmd_train_lavit(&cfg, cfg.target, log)?;
            println!(
                "LAViT[{}] final loss {:.5}; checkpoint {}",
                cfg.target,
                t.log.epoch_loss.last().copied().unwrap_or(f64::NAN),
                pipeline::lavit_checkpoint_path(&cfg, cfg.target).display()
            );
        }
        Command::Eval => print_report(&pipeline::cmd_eval(&cfg)?),
        Command::Ablate { modes } => {
            let modes = if modes.is_empty() { TargetMode::ALL.to_vec() } else { modes };
            print_report(&pipeline::cmd_ablate(&cfg, &modes, log)?);
        }
        Command::Diagnose => {
            let r = pipeline::cmd_diagnose(&cfg)?;
            for l in &r.layers {
                println!(
                    "layer {}: perplexity {:.2}, dead codes {}, collision {:.2}, redundancy {:.2}",
                    l.layer, l.perplexity, l.dead_codes, l.collision, l.mean_redundancy
                );
            }
        }
        Command::Run => print_report(&pipeline::run_all(&cfg, log)?),
        Command::ShowConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
