//! Synthetic segmentation corpus, augmentation and the per-sample cache format.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One image with its per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H·W` labels.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &m in &self.mask {
            c[m as usize] += 1;
        }
        c
    }
}

/// Allowed per-image area fraction of every foreground class.
pub const CLASS_FRACTION: (f64, f64) = (0.02, 0.6);

/// Mean colour of each class; class 0 is background.
const PALETTE: [[f64; 3]; 9] = [
    [0.15, 0.15, 0.2],
    [0.85, 0.3, 0.25],
    [0.25, 0.8, 0.35],
    [0.3, 0.35, 0.9],
    [0.9, 0.85, 0.3],
    [0.8, 0.3, 0.85],
    [0.3, 0.85, 0.85],
    [0.95, 0.6, 0.2],
    [0.6, 0.6, 0.6],
];

fn paint_shape(mask: &mut [u8], h: usize, w: usize, class: u8, rng: &mut Rng) {
    let cy = rng.range(0.15, 0.85) * h as f64;
    let cx = rng.range(0.15, 0.85) * w as f64;
    let ry = rng.range(0.12, 0.3) * h as f64;
    let rx = rng.range(0.12, 0.3) * w as f64;
    let ellipse = rng.uniform() < 0.5;
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let inside = if ellipse {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            if inside {
                mask[y * w + x] = class;
            }
        }
    }
}

fn render(mask: &[u8], h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let jitter: Vec<[f64; 3]> = PALETTE
        .iter()
        .map(|c| c.map(|v| (v + rng.range(-0.05, 0.05)).clamp(0.0, 1.0)))
        .collect();
    let mut img = Tensor::zeros(&[3, h, w]);
    for ch in 0..3 {
        for p in 0..h * w {
            let base = jitter[mask[p] as usize % PALETTE.len()][ch];
            img.data_mut()[ch * h * w + p] = (base + 0.05 * rng.normal()).clamp(0.0, 1.0);
        }
    }
    img
}

/// `n` images with one randomly placed ellipse or rectangle per foreground
/// class, coloured by class plus noise. Masks are resampled until every
/// foreground class covers a fraction of the image within [`CLASS_FRACTION`].
pub fn synth_corpus(seed: u64, n: usize, h: usize, w: usize, num_classes: usize) -> Result<Vec<Sample>> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Config("corpus needs at least one non-empty sample".into()));
    }
    if !(2..=PALETTE.len()).contains(&num_classes) {
        return Err(Error::Config(format!(
            "synthetic corpus supports 2 to {} classes, got {num_classes}",
            PALETTE.len()
        )));
    }
    let mut root = Rng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            for _ in 0..10_000 {
                let mut mask = vec![0u8; h * w];
                for c in 1..num_classes {
                    paint_shape(&mut mask, h, w, c as u8, &mut rng);
                }
                let s = Sample {
                    image: Tensor::zeros(&[1, 1, 1]),
                    mask,
                };
                let counts = s.class_counts(num_classes);
                let ok = counts[1..].iter().all(|&c| {
                    let f = c as f64 / (h * w) as f64;
                    f >= CLASS_FRACTION.0 && f <= CLASS_FRACTION.1
                });
                if ok {
                    let image = render(&s.mask, h, w, &mut rng);
                    return Ok(Sample { image, mask: s.mask });
                }
            }
            Err(Error::Config(format!(
                "could not place {} classes on a {h}x{w} image",
                num_classes - 1
            )))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    Rot90,
    Contrast,
    Noise,
    Blur,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 6] = [
        Self::HFlip,
        Self::VFlip,
        Self::Rot90,
        Self::Contrast,
        Self::Noise,
        Self::Blur,
    ];

    pub fn is_geometric(self) -> bool {
        matches!(self, Self::HFlip | Self::VFlip | Self::Rot90)
    }
}

/// Move every pixel with `f(y, x) -> (y', x')` into a `h' × w'` grid.
fn remap(s: &Sample, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Sample {
    let (h, w) = (s.height(), s.width());
    let mut image = Tensor::zeros(&[3, out_h, out_w]);
    let mut mask = vec![0u8; out_h * out_w];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = f(y, x);
            mask[ty * out_w + tx] = s.mask[y * w + x];
            for c in 0..3 {
                image.data_mut()[(c * out_h + ty) * out_w + tx] = s.image.data()[(c * h + y) * w + x];
            }
        }
    }
    Sample { image, mask }
}

pub fn hflip(s: &Sample) -> Sample {
    let w = s.width();
    remap(s, s.height(), w, |y, x| (y, w - 1 - x))
}

pub fn vflip(s: &Sample) -> Sample {
    let h = s.height();
    remap(s, h, s.width(), |y, x| (h - 1 - y, x))
}

/// Counter-clockwise quarter turn.
pub fn rot90(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    remap(s, w, h, |y, x| (w - 1 - x, y))
}

/// `0.5 + α (v − 0.5)`, clamped.
pub fn contrast(s: &Sample, alpha: f64) -> Sample {
    Sample {
        image: s.image.map(|v| (0.5 + alpha * (v - 0.5)).clamp(0.0, 1.0)),
        mask: s.mask.clone(),
    }
}

pub fn gaussian_noise(s: &Sample, sigma: f64, rng: &mut Rng) -> Sample {
    let mut image = s.image.clone();
    for v in image.data_mut() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    Sample {
        image,
        mask: s.mask.clone(),
    }
}

/// Separable 3-tap Gaussian blur with replicated borders.
pub fn gaussian_blur(s: &Sample, sigma: f64) -> Sample {
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let (h, w) = (s.height(), s.width());
    let src = s.image.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = Tensor::zeros(s.image.shape());
    for c in 0..3 {
        let plane = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                tmp[plane + y * w + x] = (0..3).map(|t| k[t] * src[plane + y * w + xs[t]]).sum();
            }
        }
        for y in 0..h {
            let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
            for x in 0..w {
                out.data_mut()[plane + y * w + x] = (0..3).map(|t| k[t] * tmp[plane + ys[t] * w + x]).sum();
            }
        }
    }
    Sample {
        image: out,
        mask: s.mask.clone(),
    }
}

pub fn apply_op(s: &Sample, op: AugmentOp, rng: &mut Rng) -> Sample {
    match op {
        AugmentOp::HFlip => hflip(s),
        AugmentOp::VFlip => vflip(s),
        AugmentOp::Rot90 if s.height() == s.width() => rot90(s),
        AugmentOp::Rot90 => vflip(&hflip(s)),
        AugmentOp::Contrast => contrast(s, rng.range(0.75, 1.25)),
        AugmentOp::Noise => gaussian_noise(s, 0.03, rng),
        AugmentOp::Blur => gaussian_blur(s, rng.range(0.5, 1.0)),
    }
}

/// One to four distinct operations in random order.
pub fn choose_ops(rng: &mut Rng) -> Vec<AugmentOp> {
    let count = 1 + rng.below(4);
    let mut ops = AugmentOp::ALL.to_vec();
    rng.shuffle(&mut ops);
    ops.truncate(count);
    ops
}

pub fn augment(s: &Sample, rng: &mut Rng) -> Sample {
    choose_ops(rng).into_iter().fold(s.clone(), |acc, op| apply_op(&acc, op, rng))
}

/// Stack samples into a `[B, 3, H, W]` image batch and a flat label vector.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(Error::shape("collate", first.image.shape(), s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(&[samples.len(), 3, h, w], data)?, mask))
}

const SAMPLE_MAGIC: &[u8; 4] = b"TCSM";

/// `TCSM`, the image tensor, then the mask as an `[H, W]` tensor of labels.
pub fn write_sample<W: Write>(w: &mut W, s: &Sample) -> Result<()> {
    w.write_all(SAMPLE_MAGIC)?;
    s.image.write_to(w)?;
    let m = Tensor::new(&[s.height(), s.width()], s.mask.iter().map(|&v| v as f64).collect())?;
    m.write_to(w)
}

pub fn read_sample<R: Read>(r: &mut R) -> Result<Sample> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Integrity("sample truncated".into()))?;
    if &magic != SAMPLE_MAGIC {
        return Err(Error::Integrity("bad sample magic".into()));
    }
    let image = Tensor::read_from(r)?;
    let m = Tensor::read_from(r)?;
    if image.rank() != 3 || image.shape()[0] != 3 || m.shape() != &image.shape()[1..] {
        return Err(Error::Integrity(format!(
            "sample image {:?} does not match mask {:?}",
            image.shape(),
            m.shape()
        )));
    }
    let mask = m
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v < 256.0 && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Integrity(format!("invalid label {v}")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Sample { image, mask })
}

pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("sample_{index:05}.tcsm"))
}

pub fn save_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let mut w = BufWriter::new(File::create(sample_path(dir, i))?);
        write_sample(&mut w, s)?;
        w.flush()?;
    }
    Ok(())
}

/// Load `sample_*.tcsm` files in index order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tcsm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no samples in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| read_sample(&mut BufReader::new(File::open(p)?)))
        .collect()
}
