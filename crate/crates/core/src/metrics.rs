//! Saliency evaluation: MAE, adaptive-threshold F-measure (beta^2 = 0.3),
//! and the structure measure (alpha = 0.5 object/region blend with the
//! original all-foreground / all-background special cases).

use serde::{Deserialize, Serialize};

use crate::error::{EgcError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub s_measure: f64,
    pub f_measure: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub s_measure: f64,
    pub f_measure: f64,
    pub mae: f64,
    pub frames: Vec<FrameMetrics>,
}

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Result<Self> {
        if frames.is_empty() {
            return Err(EgcError::DegenerateInput("no frames to aggregate".into()));
        }
        let n = frames.len() as f64;
        Ok(Self {
            s_measure: frames.iter().map(|f| f.s_measure).sum::<f64>() / n,
            f_measure: frames.iter().map(|f| f.f_measure).sum::<f64>() / n,
            mae: frames.iter().map(|f| f.mae).sum::<f64>() / n,
        frames,
        })
    }
}

fn check_same_dims(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(EgcError::Shape(format!(
            "pred {:?} vs gt {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same_dims(pred, gt)?;
    let n = pred.len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / n)
}

/// Adaptive-threshold F-measure: binarize at min(2*mean(pred), 1 - 1e-6),
/// then F = 1.3 P R / (0.3 P + R), zero when precision and recall vanish.
pub fn f_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same_dims(pred, gt)?;
    let gt_count = gt.data().iter().filter(|&&v| v > 0.5).count();
    if gt_count == 0 {
        return Err(EgcError::DegenerateInput(
            "F-measure undefined for empty ground truth".into(),
        ));
    }
    let mean: f64 = pred.data().iter().map(|&v| v as f64).sum::<f64>() / pred.len() as f64;
    let threshold = (2.0 * mean).min(1.0 - 1e-6);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let bin = p as f64 > threshold;
        let pos = g > 0.5;
        match (bin, pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    let beta_sq = 0.3;
    Ok((1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall))
}

fn mean_of(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, n)
}

/// Sample standard deviation (N-1), zero for regions of size <= 1.
fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() <= 1 {
        return 0.0;
    }
    let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    var.sqrt()
}

fn object_similarity(region: &[f64]) -> f64 {
    let (x, n) = mean_of(region.iter().cloned());
    if n == 0 {
        return 0.0;
    }
    let sigma = sample_std(region, x);
    2.0 * x / (x * x + 1.0 + sigma)
}

fn s_object(pred: &Tensor, gt: &Tensor) -> f64 {
    let fg: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g > 0.5)
        .map(|(&p, _)| p as f64)
        .collect();
    let bg: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g <= 0.5)
        .map(|(&p, _)| 1.0 - p as f64)
        .collect();
    let mu = fg.len() as f64 / pred.len() as f64;
    mu * object_similarity(&fg) + (1.0 - mu) * object_similarity(&bg)
}

fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let x = pred.iter().sum::<f64>() / n as f64;
    let y = gt.iter().sum::<f64>() / n as f64;
    let (mut sx, mut sy, mut sxy) = (0.0f64, 0.0, 0.0);
    if n > 1 {
        for i in 0..n {
            let dx = pred[i] - x;
            let dy = gt[i] - y;
            sx += dx * dx;
            sy += dy * dy;
            sxy += dx * dy;
        }
        sx /= (n - 1) as f64;
        sy /= (n - 1) as f64;
        sxy /= (n - 1) as f64;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Centroid-based four-block split; returns (cut_row, cut_col), both at
/// least 1 and at most dim-1 so every block is non-empty.
fn gt_centroid_cuts(gt: &Tensor) -> (usize, usize) {
    let (h, w) = (gt.dims()[0], gt.dims()[1]);
    let mut sum_r = 0.0f64;
    let mut sum_c = 0.0f64;
    let mut count = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            if gt.at2(r, c) > 0.5 {
                sum_r += r as f64;
                sum_c += c as f64;
                count += 1.0;
            }
        }
    }
    let cut_r = ((sum_r / count + 1.0).round() as usize).clamp(1, h - 1);
    let cut_c = ((sum_c / count + 1.0).round() as usize).clamp(1, w - 1);
    (cut_r, cut_c)
}

fn block(t: &Tensor, r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
    for r in r0..r1 {
        for c in c0..c1 {
            out.push(t.at2(r, c) as f64);
        }
    }
    out
}

fn s_region(pred: &Tensor, gt: &Tensor) -> f64 {
    let (h, w) = (gt.dims()[0], gt.dims()[1]);
    let (cut_r, cut_c) = gt_centroid_cuts(gt);
    let total = (h * w) as f64;
    let blocks = [
        (0, cut_r, 0, cut_c),
        (0, cut_r, cut_c, w),
        (cut_r, h, 0, cut_c),
        (cut_r, h, cut_c, w),
    ];
    let mut q = 0.0f64;
    for (r0, r1, c0, c1) in blocks {
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / total;
        let pb = block(pred, r0, r1, c0, c1);
        let gb = block(gt, r0, r1, c0, c1);
        q += weight * region_ssim(&pb, &gb);
    }
    q
}

/// Structure measure with alpha = 0.5.
pub fn s_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same_dims(pred, gt)?;
    if pred.rank() != 2 {
        return Err(EgcError::Shape(format!(
            "s_measure needs rank-2 maps, got {:?}",
            pred.dims()
        )));
    }
    let mu = gt.data().iter().filter(|&&v| v > 0.5).count() as f64 / gt.len() as f64;
    let x = pred.data().iter().map(|&v| v as f64).sum::<f64>() / pred.len() as f64;
    let q = if mu == 0.0 {
        1.0 - x
    } else if mu == 1.0 {
        x
    } else {
        0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt)
    };
    Ok(q.max(0.0))
}

pub fn frame_metrics(pred: &Tensor, gt: &Tensor) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        s_measure: s_measure(pred, gt)?,
        f_measure: f_measure(pred, gt)?,
        mae: mae(pred, gt)?,
    })
}
