//! Experiment commands behind the command-line tool. Each returns a report
//! value; the binary only prints it and sets the exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attention::{log_log_slope, measure_attention, AttentionKind};
use crate::config::RunConfig;
use crate::data::{collate, load_corpus, save_corpus, synth_corpus, Sample};
use crate::encoder::stage_shapes;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::loss::seg_loss;
use crate::metrics::MetricsReport;
use crate::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig, ShapeTrace, Variant};
use crate::nn::{Ctx, Mode};
use crate::train::{evaluate, score, train, History, StepRecord};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.tcck";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const EVAL_CORPUS_DIR: &str = "eval_corpus";

/// Training and report samples for a run.
pub fn prepare_corpus(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut all = match &cfg.corpus {
        Some(dir) => load_corpus(dir)?,
        None => {
            let s = cfg.model.image_size;
            synth_corpus(cfg.seed, cfg.samples, s, s, cfg.model.num_classes)?
        }
    };
    if cfg.holdout >= all.len() {
        return Err(Error::Config(format!(
            "`holdout` {} leaves no training samples out of {}",
            cfg.holdout,
            all.len()
        )));
    }
    if cfg.holdout == 0 {
        return Ok((all.clone(), all));
    }
    let held = all.split_off(all.len() - cfg.holdout);
    Ok((all, held))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub report: MetricsReport,
    pub out: PathBuf,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> PathBuf {
        self.out.join(CHECKPOINT_FILE)
    }

    pub fn eval_corpus(&self) -> PathBuf {
        self.out.join(EVAL_CORPUS_DIR)
    }
}

/// Train from `cfg`, then write the canonical config, checkpoint, loss CSV,
/// metrics CSV, summary and the report samples into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig, on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (train_set, eval_set) = prepare_corpus(cfg)?;
    let (mut store, model) = build_model(&cfg.model, cfg.seed)?;
    let history = train(&mut store, &model, &train_set, &cfg.train_config()?, on_step)?;
    let report = evaluate(&store, &model, &eval_set)?;
    let seconds = start.elapsed().as_secs_f64();

    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &cfg.model, &store)?;
    fs::write(out.join(LOSS_FILE), history.to_csv())?;
    fs::write(out.join(METRICS_FILE), report.to_csv())?;
    fs::write(out.join(SUMMARY_FILE), report.summary())?;
    let eval_dir = out.join(EVAL_CORPUS_DIR);
    if eval_dir.exists() {
        fs::remove_dir_all(&eval_dir)?;
    }
    save_corpus(&eval_dir, &eval_set)?;
    Ok(TrainOutcome {
        history,
        report,
        out,
        seconds,
    })
}

/// Score a checkpoint on a cached corpus. With `ground_truth` the masks are
/// scored against themselves instead of the model's predictions.
pub fn cmd_eval(checkpoint: &Path, corpus: &Path, out: Option<&Path>, ground_truth: bool) -> Result<MetricsReport> {
    let (cfg, store, model) = load_checkpoint(checkpoint)?;
    let samples = load_corpus(corpus)?;
    let report = if ground_truth {
        let truth: Vec<Vec<u8>> = samples.iter().map(|s| s.mask.clone()).collect();
        score(&truth, &samples, cfg.num_classes)?
    } else {
        evaluate(&store, &model, &samples)?
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval_metrics.csv"), report.to_csv())?;
        fs::write(dir.join("eval_summary.txt"), report.summary())?;
    }
    Ok(report)
}

/// Batch size of the gradient check.
pub const GRADCHECK_BATCH: usize = 4;

/// Finite-difference check of every parameter of `variant` at desk scale,
/// through the training loss on a synthetic batch.
pub fn gradcheck_variant(variant: Variant, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk(variant);
    let (mut store, model) = build_model(&cfg, seed)?;
    let s = cfg.image_size;
    let samples = synth_corpus(seed, GRADCHECK_BATCH, s, s, cfg.num_classes)?;
    let (images, mask) = collate(&samples.iter().collect::<Vec<_>>())?;
    grad_check(
        &mut store,
        Mode::Train,
        |cx| {
            let x = cx.input(images.clone());
            let logits = model.forward(cx, x)?;
            seg_loss(cx, logits, &mask)
        },
        opts,
    )
}

#[derive(Debug, Clone)]
pub struct GradCheckRun {
    pub variant: Variant,
    pub report: GradCheckReport,
    pub seconds: f64,
}

pub fn cmd_gradcheck(variants: &[Variant], seed: u64, tol: f64) -> Result<Vec<GradCheckRun>> {
    let opts = GradCheckOptions {
        tol,
        seed,
        ..Default::default()
    };
    variants
        .iter()
        .map(|&variant| {
            let start = Instant::now();
            let report = gradcheck_variant(variant, seed, &opts)?;
            Ok(GradCheckRun {
                variant,
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn render_gradcheck(runs: &[GradCheckRun]) -> String {
    let mut s = String::new();
    for r in runs {
        let status = if r.report.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(
            s,
            "variant {}  tensors {}  probes {}  max_rel_err {:.3e}  tol {:.0e}  {status}  ({:.1}s)",
            r.variant,
            r.report.checks.len(),
            r.report.probes(),
            r.report.max_rel_err(),
            r.report.tol,
            r.seconds
        );
        s.push_str(&r.report.module_table(2));
        s.push('\n');
    }
    s
}

/// Acceptable log-log slopes of counted flops against token count.
pub fn slope_band(kind: AttentionKind) -> (f64, f64) {
    match kind {
        AttentionKind::TokenAware => (1.6, 2.3),
        AttentionKind::Factorized | AttentionKind::ChannelAware => (0.8, 1.3),
    }
}

pub const BENCH_TOKENS: [usize; 7] = [64, 128, 256, 512, 1024, 2048, 4096];
pub const BENCH_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kind: AttentionKind,
    pub tokens: usize,
    pub reduction: usize,
    pub flops: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<(AttentionKind, f64)>,
    /// Token-aware flops at reduction 2 over reduction 1, at the largest token count.
    pub reduction_ratio: Option<f64>,
}

impl BenchReport {
    pub fn slopes_pass(&self) -> bool {
        self.slopes.iter().all(|&(k, s)| {
            let (lo, hi) = slope_band(k);
            (lo..=hi).contains(&s)
        })
    }

    pub fn reduction_passes(&self) -> bool {
        self.reduction_ratio.is_none_or(|r| (r - 0.5).abs() <= 0.05)
    }

    pub fn passed(&self) -> bool {
        self.slopes_pass() && self.reduction_passes()
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<14} {:>7} {:>3} {:>14} {:>10}\n", "kind", "tokens", "r", "flops", "seconds");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>7} {:>3} {:>14} {:>10.4}",
                r.kind.to_string(),
                r.tokens,
                r.reduction,
                r.flops,
                r.seconds
            );
        }
        for &(k, slope) in &self.slopes {
            let (lo, hi) = slope_band(k);
            let ok = if (lo..=hi).contains(&slope) { "pass" } else { "FAIL" };
            let _ = writeln!(s, "slope {:<14} {slope:.3}  band [{lo}, {hi}]  {ok}", k.to_string());
        }
        if let Some(r) = self.reduction_ratio {
            let ok = if self.reduction_passes() { "pass" } else { "FAIL" };
            let _ = writeln!(s, "token-aware flops r=2 / r=1: {r:.4}  target 0.5 +- 10%  {ok}");
        }
        s
    }
}

pub fn cmd_bench(kinds: &[AttentionKind], tokens: &[usize], dim: usize, seed: u64) -> Result<BenchReport> {
    if tokens.len() < 2 {
        return Err(Error::Config("bench needs at least two token counts".into()));
    }
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &kind in kinds {
        let mut flops = Vec::new();
        for &n in tokens {
            let (f, secs) = measure_attention(kind, n, dim, 1, seed)?;
            flops.push(f as f64);
            rows.push(BenchRow {
                kind,
                tokens: n,
                reduction: 1,
                flops: f,
                seconds: secs,
            });
        }
        let xs: Vec<f64> = tokens.iter().map(|&n| n as f64).collect();
        slopes.push((kind, log_log_slope(&xs, &flops)));
    }
    let mut reduction_ratio = None;
    if kinds.contains(&AttentionKind::TokenAware) {
        let n = *tokens.iter().filter(|&&n| n % 2 == 0).max().unwrap_or(&tokens[0]);
        let (f2, secs) = measure_attention(AttentionKind::TokenAware, n, dim, 2, seed)?;
        let f1 = rows
            .iter()
            .find(|r| r.kind == AttentionKind::TokenAware && r.tokens == n)
            .map(|r| r.flops)
            .unwrap_or(1);
        rows.push(BenchRow {
            kind: AttentionKind::TokenAware,
            tokens: n,
            reduction: 2,
            flops: f2,
            seconds: secs,
        });
        reduction_ratio = Some(f2 as f64 / f1 as f64);
    }
    Ok(BenchReport {
        rows,
        slopes,
        reduction_ratio,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRow {
    pub name: String,
    pub got: Vec<usize>,
    pub expected: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ShapeReport {
    pub size: usize,
    pub base_dim: usize,
    pub rows: Vec<ShapeRow>,
}

impl ShapeReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.got == r.expected)
    }

    pub fn render(&self) -> String {
        let mut s = format!("input {0}x{0}, C = {1}\n", self.size, self.base_dim);
        let _ = writeln!(s, "{:<16} {:<22} {:<22}", "tensor", "shape", "expected");
        for r in &self.rows {
            let ok = if r.got == r.expected { "" } else { "  MISMATCH" };
            let _ = writeln!(s, "{:<16} {:<22} {:<22}{ok}", r.name, format!("{:?}", r.got), format!("{:?}", r.expected));
        }
        s
    }
}

/// Expected shape of every traced tensor of a batch-1 `size × size` forward pass.
pub fn expected_shapes(cfg: &ModelConfig, size: usize) -> Vec<(String, Vec<usize>)> {
    let st = stage_shapes(cfg.encoder.base_dim, size, size);
    let with_batch = |s: [usize; 3]| vec![1, s[0], s[1], s[2]];
    let mut out = vec![("input".to_string(), vec![1, cfg.encoder.in_channels, size, size])];
    for (i, s) in st.iter().enumerate() {
        out.push((format!("encoder.y{}", i + 1), with_batch(*s)));
    }
    if cfg.use_bridge() {
        for (i, s) in st.iter().enumerate() {
            out.push((format!("bridge.o{}", i + 1), with_batch(*s)));
        }
    }
    for j in 1..=3 {
        out.push((format!("decoder.stage{j}"), with_batch(st[3 - j])));
    }
    out.push(("logits".to_string(), vec![1, cfg.num_classes, size, size]));
    out
}

/// Trace a forward pass of a `size × size` image through the model of `cfg`.
pub fn cmd_shapes(cfg: &ModelConfig, size: usize, seed: u64) -> Result<ShapeReport> {
    cfg.validate()?;
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!(
            "input size {size} must be a positive multiple of 32"
        )));
    }
    let (store, model) = build_model(cfg, seed)?;
    let mut cx = Ctx::inference(&store, Mode::Eval);
    let x = cx.input(crate::tensor::Tensor::full(&[1, cfg.encoder.in_channels, size, size], 0.5));
    let mut trace = ShapeTrace::new();
    model.forward_traced(&mut cx, x, Some(&mut trace))?;
    let expected = expected_shapes(cfg, size);
    let rows = expected
        .into_iter()
        .map(|(name, exp)| {
            let got = trace
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| s.clone())
                .unwrap_or_default();
            ShapeRow {
                name,
                got,
                expected: exp,
            }
        })
        .collect();
    Ok(ShapeReport {
        size,
        base_dim: cfg.encoder.base_dim,
        rows,
    })
}
