//! Training objective: half cross-entropy, half soft Dice.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1e-5;

/// `[B, K, H, W]` one-hot encoding of `mask`.
pub fn one_hot(mask: &[u8], b: usize, k: usize, h: usize, w: usize) -> Result<Tensor> {
    if mask.len() != b * h * w {
        return Err(Error::shape("one_hot", &[mask.len()], &[b, h, w]));
    }
    let mut t = Tensor::zeros(&[b, k, h, w]);
    for (i, &m) in mask.iter().enumerate() {
        if m as usize >= k {
            return Err(Error::Metric(format!("label {m} out of range for {k} classes")));
        }
        let (n, p) = (i / (h * w), i % (h * w));
        t.data_mut()[(n * k + m as usize) * h * w + p] = 1.0;
    }
    Ok(t)
}

/// Sum over every axis except 1, keeping a `[1, K, 1, 1]` shape.
fn per_class_sum(cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let x = cx.tape.sum_axis(x, 0)?;
    let x = cx.tape.sum_axis(x, 2)?;
    cx.tape.sum_axis(x, 3)
}

/// Pixel-mean cross-entropy of `logits` against `mask`.
pub fn cross_entropy(cx: &mut Ctx<'_>, logits: Var, target: &Tensor) -> Result<Var> {
    let pixels = target.numel() / target.shape()[1];
    let logp = cx.tape.log_softmax(logits, 1)?;
    let t = cx.input(target.clone());
    let picked = cx.tape.mul(logp, t)?;
    let total = cx.tape.sum(picked)?;
    cx.tape.scale(total, -1.0 / pixels as f64)
}

/// `1 − mean_k (2 Σ p·y + s) / (Σ p + Σ y + s)` over all classes, with sums
/// taken over the whole batch.
pub fn soft_dice(cx: &mut Ctx<'_>, logits: Var, target: &Tensor) -> Result<Var> {
    let p = cx.tape.softmax(logits, 1)?;
    let t = cx.input(target.clone());
    let py = cx.tape.mul(p, t)?;
    let inter = per_class_sum(cx, py)?;
    let num = cx.tape.scale(inter, 2.0)?;
    let num = cx.tape.add_scalar(num, DICE_SMOOTH)?;
    let sp = per_class_sum(cx, p)?;
    let sy = per_class_sum(cx, t)?;
    let den = cx.tape.add(sp, sy)?;
    let den = cx.tape.add_scalar(den, DICE_SMOOTH)?;
    let ratio = cx.tape.div(num, den)?;
    let m = cx.tape.mean(ratio)?;
    let neg = cx.tape.scale(m, -1.0)?;
    cx.tape.add_scalar(neg, 1.0)
}

/// `0.5 · CE + 0.5 · soft Dice` for `[B, K, H, W]` logits.
pub fn seg_loss(cx: &mut Ctx<'_>, logits: Var, mask: &[u8]) -> Result<Var> {
    let s = cx.shape(logits);
    if s.len() != 4 {
        return Err(Error::invalid("seg_loss", format!("logits must be [B, K, H, W], got {s:?}")));
    }
    let target = one_hot(mask, s[0], s[1], s[2], s[3])?;
    let ce = cross_entropy(cx, logits, &target)?;
    let dice = soft_dice(cx, logits, &target)?;
    let sum = cx.tape.add(ce, dice)?;
    cx.tape.scale(sum, 0.5)
}
