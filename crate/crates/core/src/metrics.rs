//! Segmentation metrics: Dice, 95th-percentile Hausdorff distance and the
//! binary confusion-matrix rates.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Per-class confusion counts of one prediction against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &[u8], truth: &[u8], class: u8) -> Result<Self> {
        check_len(pred, truth)?;
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn check_len(a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("masks have {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)` for the pixels labelled `class`; 1 when both are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    let c = Confusion::of(pred, truth, class)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { (2 * c.tp) as f64 / denom as f64 })
}

/// Pixels of `class` with a 4-neighbour outside the class. Pixels on the
/// image edge count as boundary.
pub fn boundary(mask: &[u8], h: usize, w: usize, class: u8) -> Vec<(usize, usize)> {
    let inside = |y: usize, x: usize| mask[y * w + x] == class;
    let mut eroded = vec![false; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            eroded[y * w + x] =
                inside(y, x) && inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1);
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) != eroded[y * w + x] {
                out.push((y, x));
            }
        }
    }
    out
}

/// Distance from every point of `from` to its nearest point of `to`.
fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            let best = to
                .iter()
                .map(|&(v, u)| {
                    let dy = y.abs_diff(v);
                    let dx = x.abs_diff(u);
                    dy * dy + dx * dx
                })
                .min()
                .unwrap_or(usize::MAX);
            (best as f64).sqrt()
        })
        .collect()
}

/// Percentile with linear interpolation between closest ranks
/// (position `q·(n−1)` in the sorted values).
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(values[lo] + (values[hi] - values[lo]) * (pos - lo as f64))
}

/// 95th percentile of the boundary-to-boundary distances in both directions,
/// from exact pairwise distances. `None` when either class set is empty.
pub fn hd95(pred: &[u8], truth: &[u8], h: usize, w: usize, class: u8) -> Result<Option<f64>> {
    check_len(pred, truth)?;
    if pred.len() != h * w {
        return Err(Error::Metric(format!("{} pixels for a {h}x{w} mask", pred.len())));
    }
    let a = boundary(pred, h, w, class);
    let b = boundary(truth, h, w, class);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let mut d = directed_distances(&a, &b);
    d.extend(directed_distances(&b, &a));
    Ok(percentile(&mut d, 0.95))
}

/// Sensitivity, specificity and accuracy of a binary prediction. A rate
/// whose denominator is zero is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryRates {
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: f64,
}

impl BinaryRates {
    pub fn from_confusion(c: &Confusion) -> Self {
        let ratio = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
        BinaryRates {
            se: ratio(c.tp, c.tp + c.fn_),
            sp: ratio(c.tn, c.tn + c.fp),
            acc: (c.tp + c.tn) as f64 / c.total().max(1) as f64,
        }
    }
}

pub fn binary_confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion> {
    if let Some(v) = pred.iter().chain(truth).find(|&&v| v > 1) {
        return Err(Error::Metric(format!("binary masks expected, found label {v}")));
    }
    Confusion::of(pred, truth, 1)
}

pub fn se_sp_acc(pred: &[u8], truth: &[u8]) -> Result<BinaryRates> {
    Ok(BinaryRates::from_confusion(&binary_confusion(pred, truth)?))
}

/// Scores of one foreground class on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub sample_id: usize,
    pub class: u8,
    pub dice: f64,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub rows: Vec<ClassScore>,
    /// Indexed by foreground class − 1.
    pub class_dice: Vec<f64>,
    /// Mean over samples where the distance is defined.
    pub class_hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    /// Pixel-pooled rates over all samples; binary tasks only.
    pub binary: Option<BinaryRates>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    /// Score predicted masks against the truth, one `(pred, truth)` per sample.
    pub fn compute(pairs: &[(&[u8], &[u8])], h: usize, w: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Metric("need a background and at least one foreground class".into()));
        }
        let mut rows = Vec::new();
        let mut pooled = Confusion::default();
        for (i, &(pred, truth)) in pairs.iter().enumerate() {
            if let Some(v) = pred.iter().chain(truth).find(|&&v| v as usize >= num_classes) {
                return Err(Error::Metric(format!("label {v} out of range for {num_classes} classes")));
            }
            for class in 1..num_classes as u8 {
                rows.push(ClassScore {
                    sample_id: i,
                    class,
                    dice: dice_score(pred, truth, class)?,
                    hd95: hd95(pred, truth, h, w, class)?,
                });
            }
            if num_classes == 2 {
                pooled.merge(&binary_confusion(pred, truth)?);
            }
        }
        let per_class = |c: u8| rows.iter().filter(move |r| r.class == c);
        let class_dice: Vec<f64> = (1..num_classes as u8)
            .map(|c| mean(per_class(c).map(|r| r.dice)).unwrap_or(1.0))
            .collect();
        let class_hd95: Vec<Option<f64>> = (1..num_classes as u8)
            .map(|c| mean(per_class(c).filter_map(|r| r.hd95)))
            .collect();
        Ok(MetricsReport {
            num_classes,
            mean_dice: mean(class_dice.iter().copied()).unwrap_or(1.0),
            mean_hd95: mean(class_hd95.iter().flatten().copied()),
            class_dice,
            class_hd95,
            rows,
            binary: (num_classes == 2).then(|| BinaryRates::from_confusion(&pooled)),
        })
    }

    /// `sample_id,class,dice,hd95`; an undefined distance is written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,class,dice,hd95\n");
        for r in &self.rows {
            let hd = r.hd95.map_or("NA".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{}", r.sample_id, r.class, r.dice, hd);
        }
        s
    }

    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let samples = self.rows.len() / (self.num_classes - 1).max(1);
        let _ = writeln!(s, "samples    {samples}");
        let _ = writeln!(s, "mean_dice  {:.4}", self.mean_dice);
        let _ = writeln!(s, "mean_hd95  {}", opt(self.mean_hd95));
        for (i, (d, h)) in self.class_dice.iter().zip(&self.class_hd95).enumerate() {
            let _ = writeln!(s, "class {:<4} dice {:.4}  hd95 {}", i + 1, d, opt(*h));
        }
        if let Some(b) = self.binary {
            let _ = writeln!(s, "SE {}  SP {}  ACC {:.4}", opt(b.se), opt(b.sp), b.acc);
        }
        s
    }
}
