//! Evaluation metrics: PSNR, SSIM, mean angular error, aligned absolute mean
//! relative error, and WHDR over synthesized pairwise judgments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Map;

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Default WHDR equality threshold.
pub const WHDR_DELTA: f64 = 0.10;
/// Allowed deviation from unit length for normal maps.
pub const UNIT_TOLERANCE: f64 = 1e-3;

pub fn psnr(pred: &Map, gt: &Map, range: f64) -> Result<f64> {
    pred.ensure_same_shape(gt, "psnr")?;
    if pred.is_empty() {
        return Err(Error::invalid("psnr of empty maps"));
    }
    let mse = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP))
}

fn gray(m: &Map) -> Vec<f64> {
    let hw = m.pixels();
    (0..hw)
        .map(|i| (0..m.channels).map(|c| m.data[c * hw + i] as f64).sum::<f64>() / m.channels as f64)
        .collect()
}

fn gaussian_1d() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h x w` image.
fn filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|j| k[j] * img[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of the channel-mean gray images on unit range, over every
/// fully contained 11x11 Gaussian window.
pub fn ssim(pred: &Map, gt: &Map) -> Result<f64> {
    pred.ensure_same_shape(gt, "ssim")?;
    let (h, w) = (pred.height, pred.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let (a, b) = (gray(pred), gray(gt));
    let k = gaussian_1d();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let mu_a = filter(&a, h, w, &k);
    let mu_b = filter(&b, h, w, &k);
    let e_aa = filter(&sq(&a), h, w, &k);
    let e_bb = filter(&sq(&b), h, w, &k);
    let e_ab = filter(&ab, h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// Mean angle in degrees between unit normals over masked pixels.
pub fn angular_error(pred: &Map, gt: &Map, mask: &Map) -> Result<f64> {
    pred.ensure_same_shape(gt, "angular error")?;
    if pred.channels != 3 || mask.channels != 1 || (mask.height, mask.width) != (pred.height, pred.width) {
        return Err(Error::invalid("angular error needs 3-channel normals and a 1-channel mask of equal size"));
    }
    let hw = pred.pixels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..hw {
        if mask.data[i] <= 0.5 {
            continue;
        }
        let p = [0, 1, 2].map(|c| pred.data[c * hw + i] as f64);
        let g = [0, 1, 2].map(|c| gt.data[c * hw + i] as f64);
        for (name, v) in [("prediction", p), ("ground truth", g)] {
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if (len - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!("{name} normal at pixel {i} has length {len}")));
            }
        }
        let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0, 1.0);
        sum += dot.acos().to_degrees();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("angular error over an empty mask"));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Amre {
    pub value: f64,
    pub scale: f64,
    pub shift: f64,
    /// The prediction was constant on the mask; scale-only alignment was used.
    pub degenerate: bool,
}

/// Mean `|d - gt| / gt` over masked pixels, optionally after least-squares
/// scale-and-shift alignment of the prediction.
pub fn amre(pred: &Map, gt: &Map, mask: &Map, align: bool) -> Result<Amre> {
    pred.ensure_same_shape(gt, "amre")?;
    if pred.channels != 1 || mask.channels != 1 || (mask.height, mask.width) != (pred.height, pred.width) {
        return Err(Error::invalid("amre needs 1-channel depth maps and mask of equal size"));
    }
    let pairs: Vec<(f64, f64)> = (0..pred.len())
        .filter(|i| mask.data[*i] > 0.5)
        .map(|i| (pred.data[i] as f64, gt.data[i] as f64))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("amre over an empty mask"));
    }
    if let Some((_, g)) = pairs.iter().find(|(_, g)| !(*g > 0.0)) {
        return Err(Error::invalid(format!("ground-truth depth {g} must be positive")));
    }
    let n = pairs.len() as f64;
    let (mut scale, mut shift, mut degenerate) = (1.0, 0.0, false);
    if align {
        let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let var = pairs.iter().map(|p| (p.0 - mp).powi(2)).sum::<f64>();
        let cov = pairs.iter().map(|p| (p.0 - mp) * (p.1 - mg)).sum::<f64>();
        let spread = pairs.iter().map(|p| p.0 * p.0).sum::<f64>();
        if var <= 1e-12 * spread.max(1e-300) {
            degenerate = true;
            let pg = pairs.iter().map(|p| p.0 * p.1).sum::<f64>();
            scale = if spread > 0.0 { pg / spread } else { 0.0 };
        } else {
            scale = cov / var;
            shift = mg - scale * mp;
        }
    }
    let value = pairs.iter().map(|(p, g)| (scale * p + shift - g).abs() / g).sum::<f64>() / n;
    Ok(Amre {
        value,
        scale,
        shift,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    ADarker,
    BDarker,
    Equal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    /// `(y, x)` of the first pixel.
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub label: Label,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgmentSet {
    pub judgments: Vec<Judgment>,
    pub delta: f64,
}

fn luminance(m: &Map, (y, x): (usize, usize)) -> f64 {
    (0..m.channels).map(|c| m.get(c, y, x) as f64).sum::<f64>() / m.channels as f64
}

/// Label implied by two luminances under threshold `delta`, or `None` when
/// either is non-positive.
pub fn classify(la: f64, lb: f64, delta: f64) -> Option<Label> {
    if !(la > 0.0 && lb > 0.0) {
        return None;
    }
    Some(if lb / la > 1.0 + delta {
        Label::ADarker
    } else if la / lb > 1.0 + delta {
        Label::BDarker
    } else {
        Label::Equal
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Whdr {
    pub value: f64,
    /// Pairs skipped because a predicted luminance was zero.
    pub skipped: usize,
}

/// Weighted fraction of judgments the predicted albedo disagrees with.
pub fn whdr(pred_albedo: &Map, set: &JudgmentSet) -> Result<Whdr> {
    let (h, w) = (pred_albedo.height, pred_albedo.width);
    let mut wrong = 0.0;
    let mut total = 0.0;
    let mut skipped = 0;
    for j in &set.judgments {
        if j.a.0 >= h || j.a.1 >= w || j.b.0 >= h || j.b.1 >= w {
            return Err(Error::invalid(format!("judgment pixel outside {h}x{w}")));
        }
        if !(j.weight > 0.0) {
            return Err(Error::invalid("judgment weights must be positive"));
        }
        match classify(luminance(pred_albedo, j.a), luminance(pred_albedo, j.b), set.delta) {
            None => skipped += 1,
            Some(l) => {
                total += j.weight;
                if l != j.label {
                    wrong += j.weight;
                }
            }
        }
    }
    Ok(Whdr {
        value: if total > 0.0 { wrong / total } else { 0.0 },
        skipped,
    })
}

/// Sample `n_pairs` distinct-pixel pairs (restricted to the mask, when given)
/// and label them from ground-truth luminance. Weights are 1.
pub fn synthesize_judgments(gt_albedo: &Map, mask: Option<&Map>, n_pairs: usize, seed: u64, delta: f64) -> JudgmentSet {
    let w = gt_albedo.width;
    let valid: Vec<(usize, usize)> = (0..gt_albedo.pixels())
        .map(|i| (i / w, i % w))
        .filter(|&(y, x)| mask.is_none_or(|m| m.get(0, y, x) > 0.5) && luminance(gt_albedo, (y, x)) > 0.0)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut judgments = Vec::with_capacity(n_pairs);
    if valid.len() >= 2 {
        while judgments.len() < n_pairs {
            let i = rng.random_range(0..valid.len());
            let j = rng.random_range(0..valid.len());
            if i == j {
                continue;
            }
            let (a, b) = (valid[i], valid[j]);
            let label = classify(luminance(gt_albedo, a), luminance(gt_albedo, b), delta).expect("positive luminance");
            judgments.push(Judgment { a, b, label, weight: 1.0 });
        }
    }
    JudgmentSet { judgments, delta }
}
