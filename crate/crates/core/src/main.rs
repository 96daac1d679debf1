use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use transception::attention::AttentionKind;
use transception::config::RunConfig;
use transception::harness::{self, BENCH_DIM, BENCH_TOKENS, CHECKPOINT_FILE, EVAL_CORPUS_DIR};
use transception::model::{ModelConfig, Scale, Variant};

#[derive(Parser)]
#[command(name = "transception", about = "Segmentation experiments at desk scale")]
struct Cli {
    /// key=value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// effformer, s, rm, rmi or full.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Bridge layer arrangement, e.g. cttt, tttt or para. Needs the full variant.
    #[arg(long, global = true)]
    bridge: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoint, loss CSV and metrics.
    Train,
    /// Score a checkpoint on a cached corpus.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Score the corpus masks against themselves.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Finite-difference gradient check, all variants unless --variant is given.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Flop scaling of the attention kernels.
    Bench {
        #[arg(long, value_delimiter = ',', default_values = ["factorized", "channel", "token"])]
        kinds: Vec<AttentionKind>,
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = BENCH_DIM)]
        dim: usize,
    },
    /// Shape trace of one forward pass.
    Shapes {
        /// Model preset; overrides the config file.
        #[arg(long)]
        scale: Option<Scale>,
        /// Input height and width; defaults to the configured image size.
        #[arg(long)]
        size: Option<usize>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(v) = cli.variant {
        cfg.model.set_variant(v);
    }
    if let Some(b) = &cli.bridge {
        if !cfg.model.use_bridge() {
            bail!("--bridge {b} needs the full variant, not {}", cfg.model.variant);
        }
        cfg.set("bridge", b)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let cfg = run_config(&cli)?;
    match &cli.command {
        Command::Train => {
            let steps = cfg.steps;
            let outcome = harness::cmd_train(&cfg, |r| {
                if r.step % 50 == 0 || r.step + 1 == steps {
                    eprintln!("step {:>5}  lr {:.5}  loss {:.5}", r.step, r.lr, r.loss);
                }
            })?;
            print!("{}", outcome.report.summary());
            println!("wrote {} in {:.1}s", outcome.out.display(), outcome.seconds);
        }
        Command::Eval {
            checkpoint,
            corpus,
            ground_truth,
        } => {
            let ck = checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
            let data = corpus.clone().unwrap_or_else(|| cfg.out.join(EVAL_CORPUS_DIR));
            let report = harness::cmd_eval(&ck, &data, Some(&cfg.out), *ground_truth)?;
            print!("{}", report.summary());
        }
        Command::Gradcheck { tol } => {
            let variants = match cli.variant {
                Some(v) => vec![v],
                None => Variant::ALL.to_vec(),
            };
            let runs = harness::cmd_gradcheck(&variants, cfg.seed, *tol)?;
            print!("{}", harness::render_gradcheck(&runs));
            return Ok(status(runs.iter().all(|r| r.report.passed())));
        }
        Command::Bench { kinds, tokens, dim } => {
            let tokens = if tokens.is_empty() { BENCH_TOKENS.to_vec() } else { tokens.clone() };
            let report = harness::cmd_bench(kinds, &tokens, *dim, cfg.seed)?;
            print!("{}", report.render());
            return Ok(status(report.passed()));
        }
        Command::Shapes { scale, size } => {
            let model = match scale {
                Some(s) => ModelConfig::preset(*s, cfg.model.variant),
                None => cfg.model.clone(),
            };
            let size = size.unwrap_or(model.image_size);
            let report = harness::cmd_shapes(&model, size, cfg.seed)?;
            print!("{}", report.render());
            return Ok(status(report.passed()));
        }
    }
    Ok(ExitCode::SUCCESS)
}
