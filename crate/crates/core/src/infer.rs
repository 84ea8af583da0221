//! Online frame-by-frame inference: a per-video memory bank of query
//! embeddings, shifted-cosine matching with a 0.1 confidence gate, and
//! scribble-free query selection by mask-activation margin.

use serde::{Deserialize, Serialize};

use crate::error::{EgcError, Result};
use crate::numerics::{cosine, sigmoid_scalar, Tensor};
use crate::pse::{fixation_centroid, positional_encoding_2d};
use crate::scenegen::{FrameSample, VideoSample};
use crate::trainer::{ModelParams, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub match_threshold: f64,
    pub max_bank_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            match_threshold: 0.1,
            max_bank_size: 4096,
        }
    }
}

/// Per-video store of prediction embeddings; starts empty, append-only.
#[derive(Debug, Clone, Default)]
pub struct InferenceBank {
    entries: Vec<Tensor>,
    max_size: usize,
}

impl InferenceBank {
    pub fn new(max_size: usize) -> Self {
        Self {
            entries: Vec::new(),
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn push(&mut self, v: Tensor) {
        if self.entries.len() < self.max_size {
            self.entries.push(v);
        } else {
            log::warn!("inference bank full ({}), dropping entry", self.max_size);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub mask: Tensor,
    pub embedding: Tensor,
    pub matched_index: Option<usize>,
    pub confidence: f64,
    pub bank_size: usize,
    pub skipped: Option<String>,
}

/// Shifted cosine similarity mapping [-1, 1] onto [0, 1].
pub fn match_score(pred_embedding: &Tensor, bank_entry: &Tensor) -> Result<f64> {
    Ok((cosine(pred_embedding, bank_entry)? + 1.0) / 2.0)
}

/// Scribble-free forward pass: masks for every query, selection by the
/// highest mean activation margin |2 M - 1|. The prediction embedding is
/// the mask-weighted mean feature column, unit-normalized; an all-off mask
/// falls back to the plain column mean so a prediction is still emitted.
fn test_time_select(
    frame: &FrameSample,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(usize, Tensor, Tensor)> {
    let dims = frame.features.dims();
    if dims.len() != 3 {
        return Err(EgcError::Shape(format!(
            "features must be C x H x W, got {dims:?}"
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let hw = h * w;
    let d = cfg.embed_dim;
    let n_q = cfg.n_queries;

    let e_pos = if cfg.use_pos {
        let (x, y) = match fixation_centroid(&frame.fixation) {
            Ok(cst) => cst,
            Err(EgcError::DegenerateInput(_)) => {
                log::warn!("all-zero fixation at test time, using frame center");
                ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
            }
            Err(e) => return Err(e),
        };
        positional_encoding_2d(x, y, d)?.e_pos
    } else {
        Tensor::zeros(vec![d])
    };

    let scale = 1.0 / (c as f64).sqrt();
    let feat = frame.features.data();
    let mut best_idx = 0usize;
    let mut best_margin = f64::NEG_INFINITY;
    let mut best_mask = vec![0.0f32; hw];

    let mut u = vec![0.0f64; c];
    let mut mask = vec![0.0f32; hw];
    for i in 0..n_q {
        let off = params.query_offsets.row(i);
        let q: Vec<f32> = (0..d)
            .map(|j| {
                let sem = if cfg.use_sem {
                    params.values.e_sem.data()[j]
                } else {
                    0.0
                };
                e_pos.data()[j] + sem + off[j]
            })
            .collect();
        for ch in 0..c {
            let prow = params.values.mask_p.row(ch);
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += prow[j] as f64 * q[j] as f64;
            }
            u[ch] = acc;
        }
        let mut margin = 0.0f64;
        for p in 0..hw {
            let mut z = 0.0f64;
            for ch in 0..c {
                z += u[ch] * feat[ch * hw + p] as f64;
            }
            let m = sigmoid_scalar(z * scale);
            mask[p] = m as f32;
            margin += (2.0 * m - 1.0).abs();
        }
        margin /= hw as f64;
        if margin > best_margin {
            best_margin = margin;
            best_idx = i;
            best_mask.copy_from_slice(&mask);
        }
    }

    // pooled feature of the winning mask
    let mass: f64 = best_mask.iter().map(|&m| m as f64).sum();
    let mut pooled = vec![0.0f64; c];
    if mass >= 1e-8 {
        for p in 0..hw {
            let m = best_mask[p] as f64;
            for ch in 0..c {
                pooled[ch] += m * feat[ch * hw + p] as f64;
            }
        }
        for v in &mut pooled {
            *v /= mass;
        }
    } else {
        log::warn!("selected mask has no mass, pooling uniformly");
        for p in 0..hw {
            for ch in 0..c {
                pooled[ch] += feat[ch * hw + p] as f64;
            }
        }
        for v in &mut pooled {
            *v /= hw as f64;
        }
    }
    let embedding = crate::numerics::l2_normalize(&Tensor::from_vec(
        pooled.iter().map(|&v| v as f32).collect(),
    ))?;
    Ok((
        best_idx,
        Tensor::new(vec![h, w], best_mask)?,
        embedding,
    ))
}

/// Predict one frame and update the bank under the confidence gate: a match
/// above the threshold reuses the bank entry, anything else appends the new
/// embedding.
pub fn infer_frame(
    frame: &FrameSample,
    params: &ModelParams,
    cfg: &TrainConfig,
    icfg: &InferConfig,
    bank: &mut InferenceBank,
) -> Result<FramePrediction> {
    let (c, h, w) = (
        frame.features.dims()[0],
        frame.features.dims()[1],
        frame.features.dims()[2],
    );
    let (_, mask, embedding) = match test_time_select(frame, params, cfg) {
        Ok(out) => out,
        Err(EgcError::DegenerateInput(reason)) => {
            log::warn!("frame skipped at inference: {reason}");
            return Ok(FramePrediction {
                mask: Tensor::zeros(vec![h, w]),
                embedding: Tensor::zeros(vec![c]),
                matched_index: None,
                confidence: 0.0,
                bank_size: bank.len(),
                skipped: Some(reason),
            });
        }
        Err(e) => return Err(e),
    };

    let mut matched_index = None;
    let mut confidence = 0.0f64;
    if !bank.is_empty() {
        let mut best_j = 0usize;
        let mut best_f = f64::NEG_INFINITY;
        for (j, entry) in bank.entries().iter().enumerate() {
            let f = match_score(&embedding, entry)?;
            if f > best_f {
                best_f = f;
                best_j = j;
            }
        }
        confidence = best_f;
        if best_f > icfg.match_threshold {
            matched_index = Some(best_j);
        }
    }
    if matched_index.is_none() {
        bank.push(embedding.clone());
    }
    Ok(FramePrediction {
        mask,
        embedding,
        matched_index,
        confidence,
        bank_size: bank.len(),
        skipped: None,
    })
}

/// Frame-by-frame prediction over one video with a fresh bank.
pub fn infer_video(
    video: &VideoSample,
    params: &ModelParams,
    cfg: &TrainConfig,
    icfg: &InferConfig,
) -> Result<Vec<FramePrediction>> {
    if video.frames.is_empty() {
        return Err(EgcError::Config("cannot infer an empty video".into()));
    }
    let mut bank = InferenceBank::new(icfg.max_bank_size);
    let mut out = Vec::with_capacity(video.frames.len());
    for frame in &video.frames {
        out.push(infer_frame(frame, params, cfg, icfg, &mut bank)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};
    use crate::testutil::{random_unit, rng};

    fn scene() -> SceneConfig {
        SceneConfig {
            height: 16,
            width: 16,
            channels: 16,
            frames_per_video: 5,
            object_width: 8.0,
            object_height: 6.0,
            seed: 77,
            ..SceneConfig::default()
        }
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            embed_dim: 16,
            n_queries: 4,
            proj_dim: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn match_score_extremes_and_symmetry() {
        let mut r = rng(1);
        let a = random_unit(&mut r, 8);
        assert_eq!(match_score(&a, &a).unwrap(), 1.0);
        let neg = Tensor::from_vec(a.data().iter().map(|v| -v).collect());
        assert_eq!(match_score(&a, &neg).unwrap(), 0.0);

        let e1 = Tensor::from_vec(vec![1.0, 0.0]);
        let e2 = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(match_score(&e1, &e2).unwrap(), 0.5);

        let b = random_unit(&mut r, 8);
        let ab = match_score(&a, &b).unwrap();
        let ba = match_score(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
    }

    #[test]
    fn match_score_rejects_zero_norm() {
        let z = Tensor::zeros(vec![4]);
        let u = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            match_score(&z, &u),
            Err(EgcError::DegenerateInput(_))
        ));
    }

    #[test]
    fn first_frame_populates_empty_bank() {
        let video = generate_scene(&scene(), 0).unwrap();
        let cfg = train_cfg();
        let params = ModelParams::init(16, &cfg);
        let icfg = InferConfig::default();
        let mut bank = InferenceBank::new(icfg.max_bank_size);
        let pred = infer_frame(&video.frames[0], &params, &cfg, &icfg, &mut bank).unwrap();
        assert_eq!(bank.len(), 1);
        assert!(pred.matched_index.is_none());
        assert_eq!(pred.bank_size, 1);
    }

    #[test]
    fn repeated_frame_matches_with_full_confidence() {
        let video = generate_scene(&scene(), 0).unwrap();
        let cfg = train_cfg();
        let params = ModelParams::init(16, &cfg);
        let icfg = InferConfig::default();
        let mut bank = InferenceBank::new(icfg.max_bank_size);
        let frame = &video.frames[0];
        let first = infer_frame(frame, &params, &cfg, &icfg, &mut bank).unwrap();
        assert!(first.matched_index.is_none());
        for _ in 0..3 {
            let pred = infer_frame(frame, &params, &cfg, &icfg, &mut bank).unwrap();
            assert_eq!(pred.confidence, 1.0);
            assert_eq!(pred.matched_index, Some(0));
            assert_eq!(bank.len(), 1);
        }
    }

    #[test]
    fn adversarial_low_confidence_appends() {
        let video = generate_scene(&scene(), 0).unwrap();
        let cfg = train_cfg();
        let params = ModelParams::init(16, &cfg);
        let icfg = InferConfig::default();

        // learn the frame's embedding, then seed a bank with its negation so
        // the match score is exactly 0
        let mut probe_bank = InferenceBank::new(8);
        let pred = infer_frame(&video.frames[0], &params, &cfg, &icfg, &mut probe_bank).unwrap();
        let negated = Tensor::from_vec(pred.embedding.data().iter().map(|v| -v).collect());
        let mut bank = InferenceBank::new(8);
        bank.push(negated);

        let again = infer_frame(&video.frames[0], &params, &cfg, &icfg, &mut bank).unwrap();
        assert_eq!(again.confidence, 0.0);
        assert!(again.confidence <= icfg.match_threshold);
        assert!(again.matched_index.is_none());
        assert_eq!(bank.len(), 2, "low-confidence prediction must be appended");
    }

    #[test]
    fn video_inference_bounds_bank_and_is_deterministic() {
        let video = generate_scene(&scene(), 0).unwrap();
        let cfg = train_cfg();
        let params = ModelParams::init(16, &cfg);
        let icfg = InferConfig::default();
        let a = infer_video(&video, &params, &cfg, &icfg).unwrap();
        let b = infer_video(&video, &params, &cfg, &icfg).unwrap();
        assert_eq!(a.len(), video.frames.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.mask.data(), pb.mask.data());
            assert_eq!(pa.confidence.to_bits(), pb.confidence.to_bits());
            assert_eq!(pa.matched_index, pb.matched_index);
        }
        let final_size = a.last().unwrap().bank_size;
        assert!(final_size <= video.frames.len());
    }

    #[test]
    fn single_frame_video_leaves_bank_size_one() {
        let mut video = generate_scene(&scene(), 0).unwrap();
        video.frames.truncate(1);
        let cfg = train_cfg();
        let params = ModelParams::init(16, &cfg);
        let preds = infer_video(&video, &params, &cfg, &InferConfig::default()).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].bank_size, 1);
    }

    #[test]
    fn empty_video_is_config_error() {
        let mut video = generate_scene(&scene(), 0).unwrap();
        video.frames.clear();
        let cfg = train_cfg();
        let params = ModelParams::init(16, &cfg);
        assert!(matches!(
            infer_video(&video, &params, &cfg, &InferConfig::default()),
            Err(EgcError::Config(_))
        ));
    }
}
