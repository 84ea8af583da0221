//! Synthetic desk-scale video scenes: a single rectangular or elliptical
//! object moving linearly with border reflection, per-pixel feature columns
//! drawn around class means, plus ground-truth masks, scribbles, and
//! fixation heatmaps with an early-frame lock-on drift.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EgcError, Result};
use crate::numerics::Tensor;
use crate::pse::positional_encoding_2d;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames_per_video: usize,
    pub num_objects: usize,
    pub object_speed: f32,
    pub object_width: f32,
    pub object_height: f32,
    pub feature_separation: f32,
    /// Strength of a deterministic per-pixel sinusoidal component mixed into
    /// the feature columns. Zero keeps columns purely class mean + noise;
    /// positive values give the features a location signature.
    pub position_strength: f32,
    /// Norm of a per-video offset added to the foreground mean, drawn from
    /// the video seed. Zero makes every video share one foreground cluster;
    /// positive values give each video its own foreground signature.
    pub class_jitter: f32,
    pub fixation_sigma: f32,
    pub fixation_lock_frames: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 256,
            frames_per_video: 12,
            num_objects: 1,
            object_speed: 1.0,
            object_width: 12.0,
            object_height: 9.0,
            feature_separation: 2.0,
            position_strength: 0.0,
            class_jitter: 0.0,
            fixation_sigma: 2.0,
            fixation_lock_frames: 3,
            noise_std: 0.25,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || self.channels == 0
            || self.frames_per_video == 0
            || self.fixation_lock_frames == 0
        {
            return Err(EgcError::Config("scene counts must be positive".into()));
        }
        if self.num_objects != 1 {
            return Err(EgcError::Config(
                "exactly one salient object per video is supported".into(),
            ));
        }
        if self.feature_separation < 0.0 {
            return Err(EgcError::Config("feature_separation must be >= 0".into()));
        }
        if self.object_width > self.width as f32 || self.object_height > self.height as f32 {
            return Err(EgcError::Config(format!(
                "object {}x{} larger than frame {}x{}",
                self.object_width, self.object_height, self.width, self.height
            )));
        }
        if self.object_width < 2.0 || self.object_height < 2.0 {
            return Err(EgcError::Config("object extents must be >= 2 px".into()));
        }
        if !(self.fixation_sigma > 0.0) {
            return Err(EgcError::Config("fixation_sigma must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(EgcError::Config("noise_std must be >= 0".into()));
        }
        if self.class_jitter < 0.0 {
            return Err(EgcError::Config("class_jitter must be >= 0".into()));
        }
        if self.position_strength != 0.0 && self.channels % 4 != 0 {
            return Err(EgcError::Config(
                "position_strength needs channels divisible by 4".into(),
            ));
        }
        Ok(())
    }
}

/// One frame: features, ground truth, scribbles, fixation.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub features: Tensor,    // C x H x W
    pub gt_mask: Tensor,     // H x W in {0,1}
    pub scribble_fg: Tensor, // H x W in {0,1}
    pub scribble_bg: Tensor, // H x W in {0,1}
    pub fixation: Tensor,    // H x W in [0,1]
}

#[derive(Debug, Clone)]
pub struct VideoSample {
    pub video_id: u64,
    pub frames: Vec<FrameSample>,
}

/// Class mean for foreground (+) or background (-): +-(sep/2) along a fixed
/// alternating-sign unit direction.
pub fn class_mean(channels: usize, separation: f32, foreground: bool) -> Vec<f32> {
    let sign = if foreground { 1.0f32 } else { -1.0 };
    let unit = 1.0 / (channels as f32).sqrt();
    (0..channels)
        .map(|c| {
            let alt = if c % 2 == 0 { 1.0f32 } else { -1.0 };
            sign * (separation / 2.0) * alt * unit
        })
        .collect()
}

enum ObjectShape {
    Rect,
    Ellipse,
}

/// Fold a coordinate into [lo, hi] with mirror reflection.
fn reflect(mut x: f32, lo: f32, hi: f32) -> f32 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let span = hi - lo;
    let mut t = (x - lo) % (2.0 * span);
    if t < 0.0 {
        t += 2.0 * span;
    }
    x = if t <= span { lo + t } else { lo + 2.0 * span - t };
    x
}

pub fn generate_scene(cfg: &SceneConfig, video_id: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let shape = if rng.gen_bool(0.5) {
        ObjectShape::Rect
    } else {
        ObjectShape::Ellipse
    };
    let half_w = cfg.object_width / 2.0;
    let half_h = cfg.object_height / 2.0;
    let lo_x = half_w;
    let hi_x = w as f32 - 1.0 - half_w;
    let lo_y = half_h;
    let hi_y = h as f32 - 1.0 - half_h;
    let mut cx = rng.gen_range(lo_x..=hi_x.max(lo_x));
    let mut cy = rng.gen_range(lo_y..=hi_y.max(lo_y));
    let angle = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let (vx, vy) = (angle.cos() * cfg.object_speed, angle.sin() * cfg.object_speed);

    let mut mu_fg = class_mean(c, cfg.feature_separation, true);
    let mu_bg = class_mean(c, cfg.feature_separation, false);
    if cfg.class_jitter > 0.0 {
        // per-video foreground signature, drawn after the motion parameters
        let mut jitter: Vec<f32> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let norm = (jitter.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt();
        if norm > 0.0 {
            for (m, j) in mu_fg.iter_mut().zip(&mut jitter) {
                *j = (*j as f64 / norm) as f32 * cfg.class_jitter;
                *m += *j;
            }
        }
    }

    // Per-pixel positional components, shared across frames. Each channel is
    // centered to zero spatial mean so the positional signature of a region
    // and of its complement cancel instead of sharing a common offset.
    let pos_field = if cfg.position_strength != 0.0 {
        let hw = h * w;
        let mut field = vec![0.0f32; c * hw];
        for r in 0..h {
            for col in 0..w {
                let pe = positional_encoding_2d(col as f64, r as f64, c)?;
                for (ch, &v) in pe.e_pos.data().iter().enumerate() {
                    field[ch * hw + r * w + col] = cfg.position_strength * v;
                }
            }
        }
        for ch in 0..c {
            let mean: f32 =
                (field[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32;
            for v in &mut field[ch * hw..(ch + 1) * hw] {
                *v -= mean;
            }
        }
        Some(field)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    for frame_idx in 0..cfg.frames_per_video {
        let gt_mask = rasterize(&shape, cx, cy, half_w, half_h, h, w);
        if gt_mask.data().iter().all(|&v| v == 0.0) {
            return Err(EgcError::Numeric(
                "object rasterized to an empty mask".into(),
            ));
        }

        let hw = h * w;
        let mut features = vec![0.0f32; c * hw];
        for p in 0..hw {
            let fg = gt_mask.data()[p] > 0.5;
            let mu = if fg { &mu_fg } else { &mu_bg };
            for ch in 0..c {
                let noise: f32 = rng.sample(StandardNormal);
                let mut v = mu[ch] + cfg.noise_std * noise;
                if let Some(field) = &pos_field {
                    v += field[ch * hw + p];
                }
                features[ch * hw + p] = v;
            }
        }

        let fixation = synth_fixation(&gt_mask, frame_idx, cfg)?;
        let scr_seed = cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(frame_idx as u64);
        let (scribble_fg, scribble_bg) = synth_scribble(&gt_mask, scr_seed)?;

        frames.push(FrameSample {
            features: Tensor::new(vec![c, h, w], features)?,
            gt_mask,
            scribble_fg,
            scribble_bg,
            fixation,
        });

        cx = reflect(cx + vx, lo_x, hi_x.max(lo_x));
        cy = reflect(cy + vy, lo_y, hi_y.max(lo_y));
    }

    Ok(VideoSample { video_id, frames })
}

fn rasterize(
    shape: &ObjectShape,
    cx: f32,
    cy: f32,
    half_w: f32,
    half_h: f32,
    h: usize,
    w: usize,
) -> Tensor {
    let mut mask = Tensor::zeros(vec![h, w]);
    for r in 0..h {
        for col in 0..w {
            let dx = col as f32 - cx;
            let dy = r as f32 - cy;
            let inside = match shape {
                ObjectShape::Rect => dx.abs() <= half_w && dy.abs() <= half_h,
                ObjectShape::Ellipse => {
                    let nx = dx / half_w;
                    let ny = dy / half_h;
                    nx * nx + ny * ny <= 1.0
                }
            };
            if inside {
                mask.data_mut()[r * w + col] = 1.0;
            }
        }
    }
    mask
}

/// Centroid of a binary mask (pixel-count weighted).
pub fn mask_centroid(mask: &Tensor) -> Result<(f64, f64)> {
    crate::pse::fixation_centroid(mask)
}

/// Isotropic Gaussian heatmap, peak-normalized to 1, centered on a point
/// drifting linearly from the frame center to the object centroid over the
/// first `fixation_lock_frames` frames.
pub fn synth_fixation(gt_mask: &Tensor, frame_idx: usize, cfg: &SceneConfig) -> Result<Tensor> {
    let (h, w) = (gt_mask.dims()[0], gt_mask.dims()[1]);
    if gt_mask.data().iter().all(|&v| v == 0.0) {
        return Err(EgcError::DegenerateInput("empty ground-truth mask".into()));
    }
    let (ox, oy) = mask_centroid(gt_mask)?;
    let center_x = (w as f64 - 1.0) / 2.0;
    let center_y = (h as f64 - 1.0) / 2.0;
    let alpha = (frame_idx as f64 / cfg.fixation_lock_frames as f64).min(1.0);
    let px = center_x + alpha * (ox - center_x);
    let py = center_y + alpha * (oy - center_y);

    let two_sigma_sq = 2.0 * (cfg.fixation_sigma as f64) * (cfg.fixation_sigma as f64);
    let mut data = vec![0.0f32; h * w];
    let mut peak = 0.0f32;
    for r in 0..h {
        for c in 0..w {
            let d2 = (c as f64 - px).powi(2) + (r as f64 - py).powi(2);
            let v = (-d2 / two_sigma_sq).exp() as f32;
            data[r * w + c] = v;
            peak = peak.max(v);
        }
    }
    if peak <= 0.0 {
        return Err(EgcError::Numeric("fixation peak underflowed".into()));
    }
    for v in &mut data {
        *v /= peak;
    }
    Tensor::new(vec![h, w], data)
}

/// Random 4-connected self-avoiding path of length >= 3 strictly inside a
/// region, covering at most 20% of it.
fn scribble_walk(
    region: &[usize],
    in_region: &[bool],
    w: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    let region_size = region.len();
    let max_len = region_size / 5; // 20% cap
    let target = (region_size / 10).clamp(3, max_len.max(3)).min(max_len);
    if target < 3 {
        return None;
    }
    for _attempt in 0..32 {
        let start = region[rng.gen_range(0..region_size)];
        let mut path = vec![start];
        let mut visited = vec![false; w * h];
        visited[start] = true;
        while path.len() < target {
            let p = *path.last().expect("path is non-empty");
            let (r, c) = (p / w, p % w);
            let mut next = [0usize; 4];
            let mut n_next = 0;
            if r > 0 && in_region[p - w] && !visited[p - w] {
                next[n_next] = p - w;
                n_next += 1;
            }
            if r + 1 < h && in_region[p + w] && !visited[p + w] {
                next[n_next] = p + w;
                n_next += 1;
            }
            if c > 0 && in_region[p - 1] && !visited[p - 1] {
                next[n_next] = p - 1;
                n_next += 1;
            }
            if c + 1 < w && in_region[p + 1] && !visited[p + 1] {
                next[n_next] = p + 1;
                n_next += 1;
            }
            if n_next == 0 {
                break;
            }
            let chosen = next[rng.gen_range(0..n_next)];
            visited[chosen] = true;
            path.push(chosen);
        }
        if path.len() >= 3 {
            return Some(path);
        }
    }
    None
}

/// Foreground and background scribbles for a ground-truth mask.
pub fn synth_scribble(gt_mask: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
    if gt_mask.rank() != 2 {
        return Err(EgcError::Shape(format!(
            "mask must be rank-2, got {:?}",
            gt_mask.dims()
        )));
    }
    let (h, w) = (gt_mask.dims()[0], gt_mask.dims()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut draw = |want_fg: bool| -> Result<Tensor> {
        let in_region: Vec<bool> = gt_mask
            .data()
            .iter()
            .map(|&v| (v > 0.5) == want_fg)
            .collect();
        let region: Vec<usize> = (0..h * w).filter(|&p| in_region[p]).collect();
        // A length-3 path within the 20% coverage cap needs >= 15 pixels.
        if region.len() < 15 {
            return Err(EgcError::DegenerateInput(format!(
                "{} region has {} px, too small for a scribble",
                if want_fg { "foreground" } else { "background" },
                region.len()
            )));
        }
        let path = scribble_walk(&region, &in_region, w, h, &mut rng).ok_or_else(|| {
            EgcError::DegenerateInput("region admits no length-3 connected path".into())
        })?;
        let mut t = Tensor::zeros(vec![h, w]);
        for p in path {
            t.data_mut()[p] = 1.0;
        }
        Ok(t)
    };

    let fg = draw(true)?;
    let bg = draw(false)?;
    Ok((fg, bg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;
    use crate::pse::fixation_centroid;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            channels: 16,
            frames_per_video: 6,
            seed: 9,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn static_object_keeps_identical_masks() {
        let cfg = SceneConfig {
            object_speed: 0.0,
            ..small_cfg()
        };
        let video = generate_scene(&cfg, 0).unwrap();
        let first = video.frames[0].gt_mask.data().to_vec();
        for f in &video.frames {
            assert_eq!(f.gt_mask.data(), &first[..]);
        }
    }

    #[test]
    fn determinism_is_bitwise() {
        let cfg = small_cfg();
        let a = generate_scene(&cfg, 3).unwrap();
        let b = generate_scene(&cfg, 3).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.features.data(), fb.features.data());
            assert_eq!(fa.gt_mask.data(), fb.gt_mask.data());
            assert_eq!(fa.scribble_fg.data(), fb.scribble_fg.data());
            assert_eq!(fa.scribble_bg.data(), fb.scribble_bg.data());
            assert_eq!(fa.fixation.data(), fb.fixation.data());
        }
    }

    #[test]
    fn noiseless_features_are_the_class_means() {
        let cfg = SceneConfig {
            noise_std: 0.0,
            feature_separation: 2.0,
            ..small_cfg()
        };
        let video = generate_scene(&cfg, 0).unwrap();
        let f = &video.frames[0];
        let (c, hw) = (cfg.channels, cfg.height * cfg.width);
        let col = |p: usize| -> Tensor {
            Tensor::from_vec((0..c).map(|ch| f.features.data()[ch * hw + p]).collect())
        };
        let fg_p: Vec<usize> = (0..hw).filter(|&p| f.gt_mask.data()[p] > 0.5).collect();
        let bg_p: Vec<usize> = (0..hw).filter(|&p| f.gt_mask.data()[p] <= 0.5).collect();
        // every fg column identical
        let first = col(fg_p[0]);
        for &p in &fg_p[1..] {
            assert_eq!(col(p).data(), first.data());
        }
        // cosine(fg, bg) by direct evaluation: means are antipodal
        let got = cosine(&col(fg_p[0]), &col(bg_p[0])).unwrap();
        let mu_fg = Tensor::from_vec(class_mean(c, 2.0, true));
        let mu_bg = Tensor::from_vec(class_mean(c, 2.0, false));
        let want = cosine(&mu_fg, &mu_bg).unwrap();
        assert!((got - want).abs() < 1e-6);
        assert!((want + 1.0).abs() < 1e-6);
    }

    #[test]
    fn scribbles_respect_containment_and_coverage() {
        let cfg = small_cfg();
        let video = generate_scene(&cfg, 0).unwrap();
        for f in &video.frames {
            let gt = f.gt_mask.data();
            let mut fg_count = 0usize;
            let mut scr_fg = 0usize;
            let mut scr_bg = 0usize;
            for p in 0..gt.len() {
                if f.scribble_fg.data()[p] > 0.5 {
                    scr_fg += 1;
                    assert!(gt[p] > 0.5, "fg scribble left the object");
                }
                if f.scribble_bg.data()[p] > 0.5 {
                    scr_bg += 1;
                    assert!(gt[p] <= 0.5, "bg scribble entered the object");
                }
                assert!(
                    !(f.scribble_fg.data()[p] > 0.5 && f.scribble_bg.data()[p] > 0.5),
                    "scribbles overlap"
                );
                if gt[p] > 0.5 {
                    fg_count += 1;
                }
            }
            assert!(scr_fg >= 3);
            assert!(scr_bg >= 3);
            assert!(scr_fg as f64 <= 0.2 * fg_count as f64);
            assert!(scr_bg as f64 <= 0.2 * (gt.len() - fg_count) as f64);
        }
    }

    #[test]
    fn scribble_rejects_tiny_region() {
        let mut gt = Tensor::zeros(vec![8, 8]);
        gt.data_mut()[0] = 1.0;
        gt.data_mut()[1] = 1.0;
        assert!(matches!(
            synth_scribble(&gt, 1),
            Err(EgcError::DegenerateInput(_))
        ));
    }

    #[test]
    fn fixation_drift_reaches_centroid_after_lock() {
        let cfg = small_cfg();
        let video = generate_scene(&cfg, 0).unwrap();
        for (idx, f) in video.frames.iter().enumerate() {
            let (fx, fy) = fixation_centroid(&f.fixation).unwrap();
            if idx >= cfg.fixation_lock_frames {
                let (ox, oy) = mask_centroid(&f.gt_mask).unwrap();
                let drift = ((fx - ox).powi(2) + (fy - oy).powi(2)).sqrt();
                assert!(drift <= 0.5, "frame {idx}: drift {drift}");
                // inside the gt bounding box
                let (h, w) = (cfg.height, cfg.width);
                let mut min_r = h;
                let mut max_r = 0;
                let mut min_c = w;
                let mut max_c = 0;
                for r in 0..h {
                    for c in 0..w {
                        if f.gt_mask.at2(r, c) > 0.5 {
                            min_r = min_r.min(r);
                            max_r = max_r.max(r);
                            min_c = min_c.min(c);
                            max_c = max_c.max(c);
                        }
                    }
                }
                assert!(fy >= min_r as f64 - 1e-9 && fy <= max_r as f64 + 1e-9);
                assert!(fx >= min_c as f64 - 1e-9 && fx <= max_c as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn fixation_lock_interpolation() {
        // Static object away from the frame center; probe the drift path.
        let cfg = SceneConfig {
            object_speed: 0.0,
            fixation_lock_frames: 4,
            seed: 21,
            ..small_cfg()
        };
        let video = generate_scene(&cfg, 0).unwrap();
        let gt = &video.frames[0].gt_mask;
        let (ox, oy) = mask_centroid(gt).unwrap();
        let center_x = (cfg.width as f64 - 1.0) / 2.0;
        let center_y = (cfg.height as f64 - 1.0) / 2.0;

        // frame 0: peak at frame center regardless of object location
        let f0 = synth_fixation(gt, 0, &cfg).unwrap();
        let (x0, y0) = fixation_centroid(&f0).unwrap();
        assert!((x0 - center_x).abs() < 0.5 && (y0 - center_y).abs() < 0.5);

        // frame L/2: peak at the midpoint of the center-to-centroid segment
        let fm = synth_fixation(gt, 2, &cfg).unwrap();
        let (xm, ym) = fixation_centroid(&fm).unwrap();
        let want_x = center_x + 0.5 * (ox - center_x);
        let want_y = center_y + 0.5 * (oy - center_y);
        assert!((xm - want_x).abs() < 0.5, "{xm} vs {want_x}");
        assert!((ym - want_y).abs() < 0.5, "{ym} vs {want_y}");
    }

    #[test]
    fn fixation_rejects_empty_mask() {
        let gt = Tensor::zeros(vec![8, 8]);
        assert!(matches!(
            synth_fixation(&gt, 0, &small_cfg()),
            Err(EgcError::DegenerateInput(_))
        ));
    }

    #[test]
    fn oversized_object_is_a_config_error() {
        let cfg = SceneConfig {
            object_width: 40.0,
            ..small_cfg()
        };
        assert!(matches!(
            generate_scene(&cfg, 0),
            Err(EgcError::Config(_))
        ));
    }

    #[test]
    fn separability_precondition_holds() {
        // feature_separation >= 4 * noise_std: fg/bg columns less aligned
        // than fg/fg columns on average.
        let cfg = SceneConfig {
            feature_separation: 2.0,
            noise_std: 0.5,
            ..small_cfg()
        };
        let video = generate_scene(&cfg, 0).unwrap();
        let f = &video.frames[0];
        let (c, hw) = (cfg.channels, cfg.height * cfg.width);
        let col = |p: usize| -> Tensor {
            Tensor::from_vec((0..c).map(|ch| f.features.data()[ch * hw + p]).collect())
        };
        let fg_p: Vec<usize> = (0..hw).filter(|&p| f.gt_mask.data()[p] > 0.5).collect();
        let bg_p: Vec<usize> = (0..hw).filter(|&p| f.gt_mask.data()[p] <= 0.5).collect();
        let mut cross = 0.0;
        let mut within = 0.0;
        let n = 40.min(fg_p.len() - 1);
        for i in 0..n {
            cross += cosine(&col(fg_p[i]), &col(bg_p[i])).unwrap();
            within += cosine(&col(fg_p[i]), &col(fg_p[i + 1])).unwrap();
        }
        assert!(
            cross / (n as f64) < within / (n as f64),
            "cross {cross} within {within}"
        );
    }
}
