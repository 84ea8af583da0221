//! Training loop: scribble-pixel cross entropy plus the intra/inter
//! contrastive losses over key/reference frame pairs, with hand-derived
//! backpropagation through the fixed pipeline graph and AdamW updates for
//! the semantic embedding, mask head, and projector.
//!
//! Query selection is a hard argmax and is treated as non-differentiable:
//! gradients flow through the selected branch only. The gradient-check
//! entry points therefore evaluate the loss with the selection pinned.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EgcError, Result};
use crate::iimc::{inter_loss_core, intra_loss_core, video_bank_sample, FrameBank, VideoBank};
use crate::io::{read_tensor, write_tensor};
use crate::numerics::{sigmoid_scalar, Tensor};
use crate::pse::{fixation_centroid, positional_encoding_2d};
use crate::scenegen::{FrameSample, VideoSample};
use crate::slq::{
    score_queries, scribble_feature, select_query, transpose_cols, MaskHeadParams,
    ProjectorParams, QuerySet,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub iterations: usize,
    pub lr_drop_iter: usize,
    pub lambda_intra: f32,
    pub lambda_inter: f32,
    pub lambda_pce: f32,
    pub ref_window: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub n_queries: usize,
    pub proj_dim: usize,
    pub query_offset_scale: f32,
    pub tau: f32,
    pub frame_bank_capacity: usize,
    pub video_bank_capacity: usize,
    pub max_neg: usize,
    /// L2-normalize pooled fg/bg vectors before the contrastive losses;
    /// turning this off gives the raw matrix-product vectors.
    pub normalize_vectors: bool,
    pub use_pos: bool,
    pub use_sem: bool,
    pub use_frame_bank: bool,
    pub use_video_bank: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            iterations: 2000,
            lr_drop_iter: 1333,
            lambda_intra: 1.0,
            lambda_inter: 1.0,
            lambda_pce: 1.0,
            ref_window: 10,
            seed: 0,
            embed_dim: 64,
            n_queries: 32,
            proj_dim: 64,
            query_offset_scale: 0.01,
            tau: 0.07,
            frame_bank_capacity: 4096,
            video_bank_capacity: 4096,
            max_neg: 256,
            normalize_vectors: true,
            use_pos: true,
            use_sem: true,
            use_frame_bank: true,
            use_video_bank: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(EgcError::Config("lr and weight_decay must be >= 0".into()));
        }
        if self.lambda_intra < 0.0 || self.lambda_inter < 0.0 || self.lambda_pce < 0.0 {
            return Err(EgcError::Config("loss weights must be >= 0".into()));
        }
        if self.ref_window == 0 {
            return Err(EgcError::Config("ref_window must be >= 1".into()));
        }
        if self.n_queries == 0 || self.embed_dim == 0 || self.proj_dim == 0 {
            return Err(EgcError::Config("model dims must be positive".into()));
        }
        if self.embed_dim % 4 != 0 {
            return Err(EgcError::Config(
                "embed_dim must be divisible by 4 for the 2d encoding".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(EgcError::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// The three learnable tensors. Gradients and optimizer moments reuse the
/// same layout.
#[derive(Debug, Clone)]
pub struct ParamValues {
    pub e_sem: Tensor,  // d
    pub mask_p: Tensor, // c x d
    pub proj_w: Tensor, // proj_dim x c
}

impl ParamValues {
    pub fn zeros_like(&self) -> ParamValues {
        ParamValues {
            e_sem: Tensor::zeros(self.e_sem.dims().to_vec()),
            mask_p: Tensor::zeros(self.mask_p.dims().to_vec()),
            proj_w: Tensor::zeros(self.proj_w.dims().to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.e_sem.all_finite() && self.mask_p.all_finite() && self.proj_w.all_finite()
    }

    /// Flatten into one vector (e_sem, then mask_p, then proj_w row-major).
    pub fn pack(&self) -> Tensor {
        let mut data =
            Vec::with_capacity(self.e_sem.len() + self.mask_p.len() + self.proj_w.len());
        data.extend_from_slice(self.e_sem.data());
        data.extend_from_slice(self.mask_p.data());
        data.extend_from_slice(self.proj_w.data());
        Tensor::from_vec(data)
    }

    pub fn unpack_from(&self, flat: &Tensor) -> Result<ParamValues> {
        let (n1, n2, n3) = (self.e_sem.len(), self.mask_p.len(), self.proj_w.len());
        if flat.len() != n1 + n2 + n3 {
            return Err(EgcError::Shape("packed parameter length mismatch".into()));
        }
        Ok(ParamValues {
            e_sem: Tensor::new(self.e_sem.dims().to_vec(), flat.data()[..n1].to_vec())?,
            mask_p: Tensor::new(
                self.mask_p.dims().to_vec(),
                flat.data()[n1..n1 + n2].to_vec(),
            )?,
            proj_w: Tensor::new(self.proj_w.dims().to_vec(), flat.data()[n1 + n2..].to_vec())?,
        })
    }
}

/// Learnable state plus AdamW moments and the constant query offsets.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub values: ParamValues,
    pub query_offsets: Tensor, // n_q x d, constant symmetry breaker
    pub m: ParamValues,
    pub v: ParamValues,
    pub step: usize,
}

impl ModelParams {
    pub fn init(channels: usize, cfg: &TrainConfig) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA11C_E5ED);
        let mut normal = |dims: Vec<usize>, scale: f32| -> Tensor {
            let n: usize = dims.iter().product();
            let data = (0..n)
                .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
                .collect();
            Tensor::new(dims, data).expect("consistent dims")
        };
        let values = ParamValues {
            e_sem: normal(vec![cfg.embed_dim], 0.02),
            mask_p: normal(vec![channels, cfg.embed_dim], 0.02),
            proj_w: normal(vec![cfg.proj_dim, channels], 0.02),
        };
        let m = values.zeros_like();
        let v = values.zeros_like();
        ModelParams {
            query_offsets: crate::pse::query_offsets(
                cfg.n_queries,
                cfg.embed_dim,
                cfg.query_offset_scale,
                cfg.seed ^ 0x0FF5_E75,
            ),
            values,
            m,
            v,
            step: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.mask_p.dims()[0]
    }
}

/// Both memory banks.
#[derive(Debug, Clone)]
pub struct Banks {
    pub frame: FrameBank,
    pub video: VideoBank,
}

impl Banks {
    pub fn new(cfg: &TrainConfig, channels: usize) -> Banks {
        // both banks hold feature-space vectors: background pools and the
        // selected queries' pooled features
        Banks {
            frame: FrameBank::new(cfg.frame_bank_capacity, channels),
            video: VideoBank::new(cfg.video_bank_capacity, channels),
        }
    }
}

/// Everything the step computation needs from one frame, precomputed once.
#[derive(Debug, Clone)]
pub struct FrameContext {
    pub ft: Tensor,    // hw x c
    pub f_scr: Tensor, // c
    pub e_pos: Tensor, // d (zeros when positions are disabled)
    pub scr_fg: Tensor,
    pub scr_bg: Tensor,
    pub gt_mask: Tensor,
    pub height: usize,
    pub width: usize,
}

impl FrameContext {
    pub fn build(frame: &FrameSample, cfg: &TrainConfig) -> Result<FrameContext> {
        let dims = frame.features.dims();
        if dims.len() != 3 {
            return Err(EgcError::Shape(format!(
                "features must be C x H x W, got {dims:?}"
            )));
        }
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let f_mem = frame.features.reshape(vec![c, h * w])?;
        let ft = transpose_cols(&f_mem)?;
        let scr_fg = frame.scribble_fg.reshape(vec![h * w])?;
        let scr_bg = frame.scribble_bg.reshape(vec![h * w])?;
        let f_scr = scribble_feature(&f_mem, &scr_fg)?;

        let e_pos = if cfg.use_pos {
            let (x, y) = match fixation_centroid(&frame.fixation) {
                Ok(c) => c,
                Err(EgcError::DegenerateInput(_)) => {
                    log::warn!("all-zero fixation, falling back to frame center");
                    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
                }
                Err(e) => return Err(e),
            };
            positional_encoding_2d(x, y, cfg.embed_dim)?.e_pos
        } else {
            Tensor::zeros(vec![cfg.embed_dim])
        };

        Ok(FrameContext {
            ft,
            f_scr,
            e_pos,
            scr_fg,
            scr_bg,
            gt_mask: frame.gt_mask.clone(),
            height: h,
            width: w,
        })
    }

    fn hw(&self) -> usize {
        self.ft.dims()[0]
    }

    fn channels(&self) -> usize {
        self.ft.dims()[1]
    }
}

/// Scribble-pixel binary cross entropy on mask logits. Foreground scribble
/// pixels target 1, background scribble pixels target 0, everything else
/// contributes nothing. Returns the mean loss and dL/dlogit.
pub fn partial_ce_loss(logits: &Tensor, scr_fg: &Tensor, scr_bg: &Tensor) -> Result<(f64, Tensor)> {
    let n = logits.len();
    if scr_fg.len() != n || scr_bg.len() != n {
        return Err(EgcError::Shape("scribble/logit size mismatch".into()));
    }
    let mut labeled = 0usize;
    for p in 0..n {
        if scr_fg.data()[p] > 0.5 || scr_bg.data()[p] > 0.5 {
            labeled += 1;
        }
    }
    if labeled == 0 {
        return Err(EgcError::DegenerateInput("both scribbles empty".into()));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n];
    let inv = 1.0 / labeled as f64;
    for p in 0..n {
        let is_fg = scr_fg.data()[p] > 0.5;
        let is_bg = scr_bg.data()[p] > 0.5;
        if !is_fg && !is_bg {
            continue;
        }
        let z = logits.data()[p] as f64;
        let t = if is_fg { 1.0 } else { 0.0 };
        // stable BCE-with-logits: max(z,0) - z t + ln(1 + exp(-|z|))
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad[p] = ((sigmoid_scalar(z) - t) * inv) as f32;
    }
    loss *= inv;
    if !loss.is_finite() {
        return Err(EgcError::Numeric("partial CE produced non-finite loss".into()));
    }
    Ok((loss, Tensor::new(logits.dims().to_vec(), grad)?))
}

/// Uniform draw from [key - window, key + window] intersected with the valid
/// range, excluding the key itself.
pub fn sample_ref_index(
    len: usize,
    key_idx: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if len < 2 {
        return Err(EgcError::DegenerateInput(
            "reference sampling needs at least 2 frames".into(),
        ));
    }
    if key_idx >= len {
        return Err(EgcError::Config(format!("key index {key_idx} out of range")));
    }
    let lo = key_idx.saturating_sub(window);
    let hi = (key_idx + window).min(len - 1);
    // the candidate set excludes the key and is non-empty because len >= 2
    let count = hi - lo; // one slot removed for the key
    let pick = rng.gen_range(0..count);
    let mut idx = lo + pick;
    if idx >= key_idx {
        idx += 1;
    }
    Ok(idx)
}

/// Key/reference pair per the sampling rule above.
pub fn sample_pair<'a>(
    video: &'a VideoSample,
    key_idx: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(&'a FrameSample, &'a FrameSample)> {
    let ref_idx = sample_ref_index(video.frames.len(), key_idx, window, rng)?;
    Ok((&video.frames[key_idx], &video.frames[ref_idx]))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub loss_pce: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub loss_total: f64,
    pub selected_key: usize,
    pub selected_ref: usize,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSnapshot {
    pub step: usize,
    pub mae: f64,
    pub f_measure: f64,
    pub s_measure: f64,
}

/// Per-frame forward state kept for the backward pass.
struct FrameFwd {
    sel: usize,
    q: Vec<f64>,
    m: Vec<f64>,
    nfg: f64,
    nbg: f64,
    vfg_hat: Vec<f64>,
    vbg_hat: Vec<f64>,
    /// Mask-weighted mean feature of the selected query (the content-bearing
    /// embedding pushed to the video bank), pre-normalization, its mass, the
    /// normalized copy, and its norm.
    pooled: Vec<f64>,
    pooled_mass: f64,
    pooled_hat: Vec<f64>,
    pooled_norm: f64,
    pce: f64,
    d_z_pce: Vec<f64>,
}

fn norm64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize64(v: &[f64], what: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm64(v);
    if n <= 1e-12 {
        return Err(EgcError::DegenerateInput(format!(
            "{what} collapsed to zero norm"
        )));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

fn frame_forward(
    ctx: &FrameContext,
    sel: usize,
    values: &ParamValues,
    offsets: &Tensor,
    cfg: &TrainConfig,
) -> Result<FrameFwd> {
    let (hw, c, d) = (ctx.hw(), ctx.channels(), cfg.embed_dim);
    // q = e_pos + e_sem + offset
    let off = offsets.row(sel);
    let mut q = vec![0.0f64; d];
    for j in 0..d {
        let sem = if cfg.use_sem {
            values.e_sem.data()[j] as f64
        } else {
            0.0
        };
        q[j] = ctx.e_pos.data()[j] as f64 + sem + off[j] as f64;
    }

    // u = P q, z_p = u . ft[p] / sqrt(c)
    let mut u = vec![0.0f64; c];
    for ch in 0..c {
        let prow = values.mask_p.row(ch);
        let mut acc = 0.0f64;
        for j in 0..d {
            acc += prow[j] as f64 * q[j];
        }
        u[ch] = acc;
    }
    let scale = 1.0 / (c as f64).sqrt();
    let mut z = vec![0.0f64; hw];
    let mut m = vec![0.0f64; hw];
    let mut vfg = vec![0.0f64; c];
    let mut vbg = vec![0.0f64; c];
    let mut mass = 0.0f64;
    for p in 0..hw {
        let frow = ctx.ft.row(p);
        let mut acc = 0.0f64;
        for ch in 0..c {
            acc += u[ch] * frow[ch] as f64;
        }
        let zp = acc * scale;
        let mp = sigmoid_scalar(zp);
        z[p] = zp;
        m[p] = mp;
        mass += mp;
        for ch in 0..c {
            let fv = frow[ch] as f64;
            vfg[ch] += mp * fv;
            vbg[ch] += (1.0 - mp) * fv;
        }
    }
    if mass < 1e-8 {
        return Err(EgcError::DegenerateInput(
            "selected query mask mass below 1e-8".into(),
        ));
    }
    let pooled: Vec<f64> = vfg.iter().map(|&v| v / mass).collect();
    let (pooled_hat, pooled_norm) = normalize64(&pooled, "pooled query feature")?;

    // partial cross entropy on scribble pixels
    let mut labeled = 0usize;
    let mut pce = 0.0f64;
    let mut d_z_pce = vec![0.0f64; hw];
    for p in 0..hw {
        let is_fg = ctx.scr_fg.data()[p] > 0.5;
        let is_bg = ctx.scr_bg.data()[p] > 0.5;
        if !is_fg && !is_bg {
            continue;
        }
        labeled += 1;
        let t = if is_fg { 1.0 } else { 0.0 };
        pce += z[p].max(0.0) - z[p] * t + (-z[p].abs()).exp().ln_1p();
        d_z_pce[p] = m[p] - t;
    }
    if labeled == 0 {
        return Err(EgcError::DegenerateInput("both scribbles empty".into()));
    }
    pce /= labeled as f64;
    for g in &mut d_z_pce {
        *g /= labeled as f64;
    }

    let (vfg_hat, nfg) = if cfg.normalize_vectors {
        normalize64(&vfg, "foreground vector")?
    } else {
        (vfg.clone(), 1.0)
    };
    let (vbg_hat, nbg) = if cfg.normalize_vectors {
        normalize64(&vbg, "background vector")?
    } else {
        (vbg.clone(), 1.0)
    };

    Ok(FrameFwd {
        sel,
        q,
        m,
        nfg,
        nbg,
        vfg_hat,
        vbg_hat,
        pooled,
        pooled_mass: mass,
        pooled_hat,
        pooled_norm,
        pce,
        d_z_pce,
    })
}

/// dL/dx for y = x / ||x||: (g - (g.y) y) / ||x||.
fn normalize_backward(g: &[f64], y: &[f64], n: f64) -> Vec<f64> {
    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
    g.iter().zip(y).map(|(gi, yi)| (gi - gy * yi) / n).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub pce: f64,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
}

/// Forward pass (and optional backward pass) of the full training graph with
/// the per-frame query selection pinned.
#[allow(clippy::too_many_arguments)]
fn pinned_pass(
    key: &FrameContext,
    ref_ctx: &FrameContext,
    key_sel: usize,
    ref_sel: usize,
    video_id: u64,
    values: &ParamValues,
    offsets: &Tensor,
    banks: &Banks,
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<ParamValues>, [FrameFwd; 2])> {
    let kf = frame_forward(key, key_sel, values, offsets, cfg)?;
    let rf = frame_forward(ref_ctx, ref_sel, values, offsets, cfg)?;
    let c = key.channels();
    let d = cfg.embed_dim;

    let mut parts = LossBreakdown {
        pce: kf.pce + rf.pce,
        ..Default::default()
    };

    // intra-video loss over normalized fg/bg vectors plus bank negatives
    let mut d_vkf = vec![0.0f64; c];
    let mut d_vkb = vec![0.0f64; c];
    let mut d_vrf = vec![0.0f64; c];
    let mut d_vrb = vec![0.0f64; c];
    if cfg.lambda_intra > 0.0 {
        let bank: Vec<Vec<f64>> = if cfg.use_frame_bank {
            banks
                .frame
                .iter_fifo()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .collect()
        } else {
            Vec::new()
        };
        let (loss, [dkf, dkb, drf, drb]) = intra_loss_core(
            &kf.vfg_hat,
            &rf.vfg_hat,
            &kf.vbg_hat,
            &rf.vbg_hat,
            &bank,
            cfg.tau as f64,
        )?;
        parts.intra = loss;
        d_vkf = dkf;
        d_vkb = dkb;
        d_vrf = drf;
        d_vrb = drb;
    }

    // inter-video loss anchored at the key frame's pooled query feature;
    // the reference frame's pooled feature is the in-graph positive 0
    let mut d_emb_key = vec![0.0f64; c];
    let mut d_emb_ref = vec![0.0f64; c];
    if cfg.lambda_inter > 0.0 {
        let (bank_pos, bank_neg) = if cfg.use_video_bank {
            video_bank_sample(&banks.video, video_id, cfg.max_neg)
        } else {
            (Vec::new(), Vec::new())
        };
        let mut positives: Vec<Vec<f64>> = vec![rf.pooled_hat.clone()];
        positives.extend(
            bank_pos
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>()),
        );
        let negatives: Vec<Vec<f64>> = bank_neg
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let (loss, d_anchor, d_pos, _) =
            inter_loss_core(&kf.pooled_hat, &positives, &negatives, cfg.tau as f64)?;
        parts.inter = loss;
        d_emb_key = d_anchor;
        d_emb_ref = d_pos.into_iter().next().expect("positive 0 exists");
    }

    parts.total = cfg.lambda_pce as f64 * parts.pce
        + cfg.lambda_intra as f64 * parts.intra
        + cfg.lambda_inter as f64 * parts.inter;
    if !parts.total.is_finite() {
        return Err(EgcError::Numeric("non-finite training loss".into()));
    }

    if !want_grads {
        return Ok((parts, None, [kf, rf]));
    }

    let mut g_e_sem = vec![0.0f64; d];
    let mut g_mask_p = vec![0.0f64; c * d];

    let lam_intra = cfg.lambda_intra as f64;
    let lam_inter = cfg.lambda_inter as f64;
    let lam_pce = cfg.lambda_pce as f64;

    for (ctx, fwd, d_vfg_hat, d_vbg_hat, d_emb) in [
        (key, &kf, &d_vkf, &d_vkb, &d_emb_key),
        (ref_ctx, &rf, &d_vrf, &d_vrb, &d_emb_ref),
    ] {
        let hw = ctx.hw();
        // chain the intra grads through the normalization
        let (d_vfg, d_vbg);
        if cfg.normalize_vectors {
            d_vfg = normalize_backward(d_vfg_hat, &fwd.vfg_hat, fwd.nfg);
            d_vbg = normalize_backward(d_vbg_hat, &fwd.vbg_hat, fwd.nbg);
        } else {
            d_vfg = d_vfg_hat.clone();
            d_vbg = d_vbg_hat.clone();
        }

        // chain the inter grads through normalization and the mask-weighted
        // mean: d pooled / d M_p = (f_p - pooled) / mass
        let mut d_pooled = vec![0.0f64; c];
        let mut d_pooled_dot = 0.0f64;
        if lam_inter > 0.0 {
            let scaled: Vec<f64> = d_emb.iter().map(|g| g * lam_inter).collect();
            d_pooled = normalize_backward(&scaled, &fwd.pooled_hat, fwd.pooled_norm);
            d_pooled_dot = d_pooled
                .iter()
                .zip(&fwd.pooled)
                .map(|(g, v)| g * v)
                .sum::<f64>();
        }

        // dL/dz per pixel: BCE term plus the pooled-vector terms
        let scale = 1.0 / (c as f64).sqrt();
        let mut d_u = vec![0.0f64; c];
        for p in 0..hw {
            let frow = ctx.ft.row(p);
            let mut d_m = 0.0f64;
            if lam_intra > 0.0 {
                let mut acc = 0.0f64;
                for ch in 0..c {
                    acc += frow[ch] as f64 * (d_vfg[ch] - d_vbg[ch]);
                }
                d_m += lam_intra * acc;
            }
            if lam_inter > 0.0 {
                let mut gf = 0.0f64;
                for ch in 0..c {
                    gf += d_pooled[ch] * frow[ch] as f64;
                }
                d_m += (gf - d_pooled_dot) / fwd.pooled_mass;
            }
            let sig_prime = fwd.m[p] * (1.0 - fwd.m[p]);
            let d_z = lam_pce * fwd.d_z_pce[p] + d_m * sig_prime;
            if d_z != 0.0 {
                for ch in 0..c {
                    d_u[ch] += d_z * frow[ch] as f64;
                }
            }
        }
        for v in &mut d_u {
            *v *= scale;
        }

        // dL/dq via the mask head
        let mut d_q = vec![0.0f64; d];
        for ch in 0..c {
            let prow = values.mask_p.row(ch);
            for j in 0..d {
                d_q[j] += prow[j] as f64 * d_u[ch];
            }
        }

        // parameter grads
        for ch in 0..c {
            for j in 0..d {
                g_mask_p[ch * d + j] += d_u[ch] * fwd.q[j];
            }
        }
        if cfg.use_sem {
            for j in 0..d {
                g_e_sem[j] += d_q[j];
            }
        }
    }

    let grads = ParamValues {
        e_sem: Tensor::new(vec![d], g_e_sem.iter().map(|&v| v as f32).collect())?,
        mask_p: Tensor::new(vec![c, d], g_mask_p.iter().map(|&v| v as f32).collect())?,
        // hard selection blocks every gradient path into the projector
        proj_w: Tensor::zeros(values.proj_w.dims().to_vec()),
    };
    if !grads.all_finite() {
        return Err(EgcError::Numeric("non-finite gradients".into()));
    }
    Ok((parts, Some(grads), [kf, rf]))
}

/// Loss of the full training graph with pinned selections, as a function of
/// packed parameters. This is the function the finite-difference oracle
/// probes.
#[allow(clippy::too_many_arguments)]
pub fn pinned_loss(
    key: &FrameContext,
    ref_ctx: &FrameContext,
    key_sel: usize,
    ref_sel: usize,
    video_id: u64,
    template: &ParamValues,
    packed: &Tensor,
    offsets: &Tensor,
    banks: &Banks,
    cfg: &TrainConfig,
) -> Result<f64> {
    let values = template.unpack_from(packed)?;
    let (parts, _, _) = pinned_pass(
        key, ref_ctx, key_sel, ref_sel, video_id, &values, offsets, banks, cfg, false,
    )?;
    Ok(parts.total)
}

/// Analytic gradients of the full training graph with pinned selections,
/// packed in the same layout as [`ParamValues::pack`].
#[allow(clippy::too_many_arguments)]
pub fn pinned_grads(
    key: &FrameContext,
    ref_ctx: &FrameContext,
    key_sel: usize,
    ref_sel: usize,
    video_id: u64,
    values: &ParamValues,
    offsets: &Tensor,
    banks: &Banks,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamValues)> {
    let (parts, grads, _) = pinned_pass(
        key, ref_ctx, key_sel, ref_sel, video_id, values, offsets, banks, cfg, true,
    )?;
    Ok((parts, grads.expect("grads requested")))
}

/// Score all queries for a frame and return the winning index plus the
/// scored set.
pub fn select_for_frame(
    ctx: &FrameContext,
    values: &ParamValues,
    offsets: &Tensor,
    cfg: &TrainConfig,
) -> Result<(usize, QuerySet)> {
    let d = cfg.embed_dim;
    let n_q = cfg.n_queries;
    let mut q = vec![0.0f32; n_q * d];
    for i in 0..n_q {
        let off = offsets.row(i);
        for j in 0..d {
            let sem = if cfg.use_sem {
                values.e_sem.data()[j]
            } else {
                0.0
            };
            q[i * d + j] = ctx.e_pos.data()[j] + sem + off[j];
        }
    }
    let queries = Tensor::new(vec![n_q, d], q)?;
    let mask_params = MaskHeadParams {
        projection: values.mask_p.clone(),
    };
    let proj = ProjectorParams {
        weight: values.proj_w.clone(),
    };
    let qs = score_queries(
        &ctx.ft,
        &ctx.f_scr,
        &ctx.scr_fg,
        &ctx.scr_bg,
        &queries,
        &mask_params,
        &proj,
    )?;
    let (idx, _) = select_query(&qs)?;
    Ok((idx, qs))
}

/// AdamW with decoupled weight decay, beta1 = 0.9, beta2 = 0.999,
/// eps = 1e-8, bias correction, and a single lr/10 drop at `lr_drop_iter`.
pub fn adamw_step(params: &mut ModelParams, grads: &ParamValues, cfg: &TrainConfig) -> Result<()> {
    if !grads.all_finite() {
        return Err(EgcError::Numeric(
            "non-finite gradient, optimizer step aborted".into(),
        ));
    }
    let t = params.step + 1;
    let lr = if t >= cfg.lr_drop_iter {
        cfg.lr as f64 / 10.0
    } else {
        cfg.lr as f64
    };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let wd = cfg.weight_decay as f64;

    let update = |theta: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor| {
        for i in 0..theta.len() {
            let gi = g.data()[i] as f64;
            let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let theta_i = theta.data()[i] as f64;
            theta.data_mut()[i] =
                (theta_i - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * theta_i) as f32;
        }
    };
    update(
        &mut params.values.e_sem,
        &grads.e_sem,
        &mut params.m.e_sem,
        &mut params.v.e_sem,
    );
    update(
        &mut params.values.mask_p,
        &grads.mask_p,
        &mut params.m.mask_p,
        &mut params.v.mask_p,
    );
    update(
        &mut params.values.proj_w,
        &grads.proj_w,
        &mut params.m.proj_w,
        &mut params.v.proj_w,
    );
    params.step = t;
    if !params.values.all_finite() {
        return Err(EgcError::Numeric("parameters became non-finite".into()));
    }
    Ok(())
}

/// One optimization step over a key/reference pair: select queries, compute
/// losses and gradients, update parameters, then push the background vectors
/// and selected query embeddings into the banks.
pub fn train_step(
    key: &FrameContext,
    ref_ctx: &FrameContext,
    video_id: u64,
    params: &mut ModelParams,
    banks: &mut Banks,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let step = params.step + 1;
    let run = || -> Result<(LossBreakdown, ParamValues, [FrameFwd; 2])> {
        let (key_sel, _) = select_for_frame(key, &params.values, &params.query_offsets, cfg)?;
        let (ref_sel, _) = select_for_frame(ref_ctx, &params.values, &params.query_offsets, cfg)?;
        let (parts, grads, fwd) = pinned_pass(
            key,
            ref_ctx,
            key_sel,
            ref_sel,
            video_id,
            &params.values,
            &params.query_offsets,
            banks,
            cfg,
            true,
        )?;
        Ok((parts, grads.expect("grads requested"), fwd))
    };

    match run() {
        Ok((parts, grads, [kf, rf])) => {
            adamw_step(params, &grads, cfg)?;
            if cfg.use_frame_bank {
                for fwd in [&kf, &rf] {
                    banks.frame.push(Tensor::from_vec(
                        fwd.vbg_hat.iter().map(|&v| v as f32).collect(),
                    ))?;
                }
            }
            if cfg.use_video_bank {
                for fwd in [&kf, &rf] {
                    banks.video.push(
                        Tensor::from_vec(fwd.pooled_hat.iter().map(|&v| v as f32).collect()),
                        video_id,
                    )?;
                }
            }
            Ok(StepReport {
                step,
                loss_pce: parts.pce,
                loss_intra: parts.intra,
                loss_inter: parts.inter,
                loss_total: parts.total,
                selected_key: kf.sel,
                selected_ref: rf.sel,
                skipped: None,
            })
        }
        Err(EgcError::DegenerateInput(reason)) => {
            log::warn!("step {step} skipped: {reason}");
            Ok(StepReport {
                step,
                loss_pce: 0.0,
                loss_intra: 0.0,
                loss_inter: 0.0,
                loss_total: 0.0,
                selected_key: 0,
                selected_ref: 0,
                skipped: Some(reason),
            })
        }
        Err(e) => Err(e),
    }
}

pub struct TrainOutputs {
    pub params: ModelParams,
    pub banks: Banks,
    pub history: Vec<StepReport>,
    pub snapshots: Vec<MetricSnapshot>,
}

/// Full training loop over shuffled (video, key frame) pairs.
pub fn train_loop(dataset: &[VideoSample], cfg: &TrainConfig) -> Result<TrainOutputs> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(EgcError::Config(
            "training needs at least 2 videos for cross-video negatives".into(),
        ));
    }
    for v in dataset {
        if v.frames.len() < 2 {
            return Err(EgcError::Config(format!(
                "video {} has fewer than 2 frames",
                v.video_id
            )));
        }
    }
    let channels = dataset[0].frames[0].features.dims()[0];

    let contexts: Vec<Vec<FrameContext>> = dataset
        .iter()
        .map(|v| {
            v.frames
                .iter()
                .map(|f| FrameContext::build(f, cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = ModelParams::init(channels, cfg);
    let mut banks = Banks::new(cfg, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_100F);

    let mut schedule: Vec<(usize, usize)> = Vec::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();

    for step in 1..=cfg.iterations {
        if schedule.is_empty() {
            schedule = dataset
                .iter()
                .enumerate()
                .flat_map(|(vi, v)| (0..v.frames.len()).map(move |fi| (vi, fi)))
                .collect();
            // Fisher-Yates shuffle
            for i in (1..schedule.len()).rev() {
                let j = rng.gen_range(0..=i);
                schedule.swap(i, j);
            }
        }
        let (vi, key_idx) = schedule.pop().expect("schedule refilled above");
        let video = &dataset[vi];
        let ref_idx = sample_ref_index(video.frames.len(), key_idx, cfg.ref_window, &mut rng)?;

        let key_ctx = &contexts[vi][key_idx];
        let ref_ctx = &contexts[vi][ref_idx];
        let report = train_step(key_ctx, ref_ctx, video.video_id, &mut params, &mut banks, cfg)?;

        if step % 100 == 0 && report.skipped.is_none() {
            // cheap train-side probe: the selected key mask against its gt
            if let Ok((sel, qs)) = select_for_frame(key_ctx, &params.values, &params.query_offsets, cfg)
            {
                let hw = key_ctx.hw();
                let mask = Tensor::new(
                    vec![key_ctx.height, key_ctx.width],
                    qs.masks.data()[sel * hw..(sel + 1) * hw].to_vec(),
                )?;
                if let Ok(fm) = crate::metrics::frame_metrics(&mask, &key_ctx.gt_mask) {
                    snapshots.push(MetricSnapshot {
                        step,
                        mae: fm.mae,
                        f_measure: fm.f_measure,
                        s_measure: fm.s_measure,
                    });
                }
            }
        }
        history.push(report);
    }

    Ok(TrainOutputs {
        params,
        banks,
        history,
        snapshots,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BankMeta {
    capacity: usize,
    cursor: usize,
    len: usize,
    dim: usize,
    #[serde(default)]
    video_ids: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    step: usize,
    channels: usize,
    config: TrainConfig,
    frame_bank: BankMeta,
    video_bank: BankMeta,
}

fn stack_rows(rows: &[Tensor]) -> Option<Tensor> {
    if rows.is_empty() {
        return None;
    }
    let dim = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), dim], data).ok()
}

/// Write parameters, optimizer moments, and bank snapshots under `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    banks: &Banks,
    cfg: &TrainConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_tensor(dir.join("e_sem.egct"), &params.values.e_sem)?;
    write_tensor(dir.join("mask_p.egct"), &params.values.mask_p)?;
    write_tensor(dir.join("proj_w.egct"), &params.values.proj_w)?;
    write_tensor(dir.join("query_offsets.egct"), &params.query_offsets)?;
    write_tensor(dir.join("adam_m_e_sem.egct"), &params.m.e_sem)?;
    write_tensor(dir.join("adam_m_mask_p.egct"), &params.m.mask_p)?;
    write_tensor(dir.join("adam_m_proj_w.egct"), &params.m.proj_w)?;
    write_tensor(dir.join("adam_v_e_sem.egct"), &params.v.e_sem)?;
    write_tensor(dir.join("adam_v_mask_p.egct"), &params.v.mask_p)?;
    write_tensor(dir.join("adam_v_proj_w.egct"), &params.v.proj_w)?;

    let (frame_rows, frame_cursor) = banks.frame.storage();
    if let Some(t) = stack_rows(frame_rows) {
        write_tensor(dir.join("frame_bank.egct"), &t)?;
    }
    let (video_rows, video_cursor) = banks.video.storage();
    let video_tensors: Vec<Tensor> = video_rows.iter().map(|(t, _)| t.clone()).collect();
    if let Some(t) = stack_rows(&video_tensors) {
        write_tensor(dir.join("video_bank.egct"), &t)?;
    }

    let manifest = CheckpointManifest {
        step: params.step,
        channels: params.channels(),
        config: cfg.clone(),
        frame_bank: BankMeta {
            capacity: banks.frame.capacity(),
            cursor: frame_cursor,
            len: frame_rows.len(),
            dim: banks.frame.dim(),
            video_ids: Vec::new(),
        },
        video_bank: BankMeta {
            capacity: banks.video.capacity(),
            cursor: video_cursor,
            len: video_rows.len(),
            dim: banks.video.dim(),
            video_ids: video_rows.iter().map(|(_, id)| *id).collect(),
        },
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EgcError::Config(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint. Returns the parameters, banks, and the training config
/// recorded in the manifest.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelParams, Banks, TrainConfig)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&json)
        .map_err(|e| EgcError::Config(format!("bad checkpoint manifest: {e}")))?;

    let values = ParamValues {
        e_sem: read_tensor(dir.join("e_sem.egct"))?,
        mask_p: read_tensor(dir.join("mask_p.egct"))?,
        proj_w: read_tensor(dir.join("proj_w.egct"))?,
    };
    let m = ParamValues {
        e_sem: read_tensor(dir.join("adam_m_e_sem.egct"))?,
        mask_p: read_tensor(dir.join("adam_m_mask_p.egct"))?,
        proj_w: read_tensor(dir.join("adam_m_proj_w.egct"))?,
    };
    let v = ParamValues {
        e_sem: read_tensor(dir.join("adam_v_e_sem.egct"))?,
        mask_p: read_tensor(dir.join("adam_v_mask_p.egct"))?,
        proj_w: read_tensor(dir.join("adam_v_proj_w.egct"))?,
    };
    let query_offsets = read_tensor(dir.join("query_offsets.egct"))?;

    let load_rows = |path: &Path, len: usize| -> Result<Vec<Tensor>> {
        if len == 0 {
            return Ok(Vec::new());
        }
        let stacked = read_tensor(path)?;
        let dim = stacked.dims()[1];
        Ok((0..stacked.dims()[0])
            .map(|i| Tensor::from_vec(stacked.row(i).to_vec()))
            .inspect(|t| debug_assert_eq!(t.len(), dim))
            .collect())
    };
    let frame_rows = load_rows(&dir.join("frame_bank.egct"), manifest.frame_bank.len)?;
    let frame = FrameBank::restore(
        manifest.frame_bank.capacity,
        manifest.frame_bank.dim,
        frame_rows,
        manifest.frame_bank.cursor,
    )?;
    let video_rows = load_rows(&dir.join("video_bank.egct"), manifest.video_bank.len)?;
    if video_rows.len() != manifest.video_bank.video_ids.len() {
        return Err(EgcError::Config(
            "video bank rows and ids disagree in checkpoint".into(),
        ));
    }
    let video = VideoBank::restore(
        manifest.video_bank.capacity,
        manifest.video_bank.dim,
        video_rows
            .into_iter()
            .zip(manifest.video_bank.video_ids.iter().copied())
            .collect(),
        manifest.video_bank.cursor,
    )?;

    let params = ModelParams {
        values,
        query_offsets,
        m,
        v,
        step: manifest.step,
    };
    Ok((params, Banks { frame, video }, manifest.config))
}
