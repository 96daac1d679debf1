//! Training and evaluation loops.

use std::fmt::Write as _;

use crate::data::{augment, collate, Sample};
use crate::error::{Error, Result};
use crate::loss::seg_loss;
use crate::metrics::MetricsReport;
use crate::model::{argmax_mask, Model};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::optim::{Optimizer, OptimizerKind, Schedule};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub augment: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// `step,lr,loss` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{}", r.step, r.lr, r.loss);
        }
        s
    }
}

/// Trailing moving average with window `k`; empty when fewer than `k` values.
pub fn moving_average(xs: &[f64], k: usize) -> Vec<f64> {
    if k == 0 || xs.len() < k {
        return Vec::new();
    }
    xs.windows(k).map(|w| w.iter().sum::<f64>() / k as f64).collect()
}

fn check_labels(corpus: &[Sample], num_classes: usize) -> Result<()> {
    for (i, s) in corpus.iter().enumerate() {
        if let Some(v) = s.mask.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Config(format!(
                "sample {i} has label {v} but the model predicts {num_classes} classes"
            )));
        }
    }
    Ok(())
}

/// Draws batches from reshuffled passes over the corpus.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn next(&mut self, rng: &mut Rng, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

/// Run `cfg.steps` optimizer steps. Parameters and running statistics are
/// rounded to f32 after every step so a checkpoint holds them exactly.
/// `on_step` sees each record as it is produced.
pub fn train(
    store: &mut ParamStore,
    model: &Model,
    corpus: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<History> {
    if corpus.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("training needs samples and batch_size >= 1".into()));
    }
    check_labels(corpus, model.cfg.num_classes)?;
    let mut rng = Rng::new(cfg.seed);
    let mut batcher = Batcher {
        order: (0..corpus.len()).collect(),
        pos: corpus.len(),
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut history = History::default();
    for step in 0..cfg.steps {
        let idx = batcher.next(&mut rng, cfg.batch_size);
        let augmented: Vec<Sample>;
        let batch: Vec<&Sample> = if cfg.augment {
            augmented = idx.iter().map(|&i| augment(&corpus[i], &mut rng)).collect();
            augmented.iter().collect()
        } else {
            idx.iter().map(|&i| &corpus[i]).collect()
        };
        let (images, mask) = collate(&batch)?;
        let out = (|| {
            let mut cx = Ctx::new(store, Mode::Train);
            let x = cx.input(images);
            let logits = model.forward(&mut cx, x)?;
            let loss = seg_loss(&mut cx, logits, &mask)?;
            cx.backward(loss)
        })()
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                msg: format!("non-finite value in {op}"),
            },
            e => e,
        })?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("loss is {}", out.loss),
            });
        }
        if let Some(pos) = out.grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
            return Err(Error::Diverged {
                step,
                msg: format!("non-finite gradient for `{}`", store.params()[pos].name),
            });
        }
        let lr = cfg.schedule.lr(step);
        opt.step(store, &out.grads, lr)?;
        store.apply_stat_updates(out.stat_updates);
        store.round_to_f32();
        let rec = StepRecord {
            step,
            lr,
            loss: out.loss,
        };
        on_step(&rec);
        history.steps.push(rec);
    }
    Ok(history)
}

pub const EVAL_BATCH: usize = 8;

/// Predicted label maps, in corpus order.
pub fn predict(store: &ParamStore, model: &Model, corpus: &[Sample]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = collate(&refs)?;
        let mut cx = Ctx::inference(store, Mode::Eval);
        let x = cx.input(images);
        let logits = model.forward(&mut cx, x)?;
        out.extend(argmax_mask(cx.value(logits)));
    }
    Ok(out)
}

pub fn score(preds: &[Vec<u8>], corpus: &[Sample], num_classes: usize) -> Result<MetricsReport> {
    let first = corpus.first().ok_or_else(|| Error::Config("empty corpus".into()))?;
    let pairs: Vec<(&[u8], &[u8])> = preds
        .iter()
        .zip(corpus)
        .map(|(p, s)| (p.as_slice(), s.mask.as_slice()))
        .collect();
    MetricsReport::compute(&pairs, first.height(), first.width(), num_classes)
}

pub fn evaluate(store: &ParamStore, model: &Model, corpus: &[Sample]) -> Result<MetricsReport> {
    check_labels(corpus, model.cfg.num_classes)?;
    let preds = predict(store, model, corpus)?;
    score(&preds, corpus, model.cfg.num_classes)
}

/// Snapshot of every parameter value, for bitwise comparisons.
pub fn param_snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.params().iter().map(|p| p.value.clone()).collect()
}
