//! Intra/inter-video contrastive model: foreground/background vector
//! extraction through the mask head, two temperature-scaled contrastive
//! losses with hand-derived gradients, and the frame-level and video-level
//! ring-buffer memory banks that supply extra negatives.
//!
//! Loss values and gradients are accumulated in f64 so the finite-difference
//! oracle can resolve them at a 1e-3 relative tolerance; stored vectors stay
//! f32 throughout.

use crate::error::{EgcError, Result};
use crate::numerics::{l2_normalize, Tensor};
use crate::slq::{mask_head, MaskHeadParams};

/// Maximum |dot/tau| before the exponentials are declared out of range.
const MAX_LOGIT: f64 = 80.0;

/// Unit-norm foreground and background pooled vectors for one frame.
#[derive(Debug, Clone)]
pub struct FgBgVectors {
    pub v_fg: Tensor,
    pub v_bg: Tensor,
}

/// Inputs to the intra-video loss: the two frame pairs plus bank negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub v_key_fg: Tensor,
    pub v_key_bg: Tensor,
    pub v_ref_fg: Tensor,
    pub v_ref_bg: Tensor,
    pub bank_negatives: Vec<Tensor>,
    pub temperature: f32,
}

/// Gradients of the intra-video loss with respect to the four in-graph
/// vectors; bank entries are constants.
#[derive(Debug, Clone)]
pub struct IntraGrads {
    pub d_key_fg: Tensor,
    pub d_key_bg: Tensor,
    pub d_ref_fg: Tensor,
    pub d_ref_bg: Tensor,
}

/// Gradients of the inter-video loss.
#[derive(Debug, Clone)]
pub struct InterGrads {
    pub d_anchor: Tensor,
    pub d_positives: Vec<Tensor>,
    pub d_negatives: Vec<Tensor>,
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn checked_logit(dot: f64, tau: f64) -> Result<f64> {
    let s = dot / tau;
    if !s.is_finite() || s.abs() > MAX_LOGIT {
        return Err(EgcError::Numeric(format!(
            "contrastive logit {s:.2} outside +-{MAX_LOGIT}"
        )));
    }
    Ok(s)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_f32_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.iter().map(|&x| x as f32).collect())
}

/// f64 core of the intra-video loss; gradients are returned for the four
/// in-graph vectors only (bank entries are constants).
pub(crate) fn intra_loss_core(
    key_fg: &[f64],
    ref_fg: &[f64],
    key_bg: &[f64],
    ref_bg: &[f64],
    bank: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, [Vec<f64>; 4])> {
    if !(tau > 0.0) {
        return Err(EgcError::Config("temperature must be positive".into()));
    }
    let dim = key_fg.len();
    let fg = [key_fg, ref_fg];
    let mut backs: Vec<&[f64]> = vec![key_bg, ref_bg];
    for b in bank {
        backs.push(b.as_slice());
    }

    let s_pos = checked_logit(dot_slices(key_fg, ref_fg), tau)?;
    let mut pair = vec![[0.0f64; 2]; backs.len()];
    let mut max = s_pos;
    for (bi, b) in backs.iter().enumerate() {
        for (ai, a) in fg.iter().enumerate() {
            let s = checked_logit(dot_slices(a, b), tau)?;
            pair[bi][ai] = s;
            max = max.max(s);
        }
    }
    let mut z = (s_pos - max).exp();
    for row in &pair {
        z += (row[0] - max).exp() + (row[1] - max).exp();
    }
    let loss = max + z.ln() - s_pos;

    let w_pos = (s_pos - max).exp() / z;
    let mut d_key_fg = vec![0.0f64; dim];
    let mut d_ref_fg = vec![0.0f64; dim];
    let mut d_key_bg = vec![0.0f64; dim];
    let mut d_ref_bg = vec![0.0f64; dim];
    for i in 0..dim {
        d_key_fg[i] += (w_pos - 1.0) / tau * ref_fg[i];
        d_ref_fg[i] += (w_pos - 1.0) / tau * key_fg[i];
    }
    for (bi, b) in backs.iter().enumerate() {
        let wk = (pair[bi][0] - max).exp() / z;
        let wr = (pair[bi][1] - max).exp() / z;
        for i in 0..dim {
            d_key_fg[i] += wk / tau * b[i];
            d_ref_fg[i] += wr / tau * b[i];
        }
        if bi < 2 {
            let target = if bi == 0 { &mut d_key_bg } else { &mut d_ref_bg };
            for i in 0..dim {
                target[i] += (wk * key_fg[i] + wr * ref_fg[i]) / tau;
            }
        }
    }
    Ok((loss, [d_key_fg, d_key_bg, d_ref_fg, d_ref_bg]))
}

/// f64 core of the inter-video loss. The negative logits depend only on the
/// anchor, so one shared log-sum-exp base covers every positive term.
#[allow(clippy::type_complexity)]
pub(crate) fn inter_loss_core(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !(tau > 0.0) {
        return Err(EgcError::Config("temperature must be positive".into()));
    }
    if positives.is_empty() {
        return Err(EgcError::DegenerateInput(
            "inter-video loss needs at least one positive".into(),
        ));
    }
    let dim = anchor.len();
    if negatives.is_empty() {
        // every term is -log(e^s / e^s) = 0
        return Ok((
            0.0,
            vec![0.0; dim],
            vec![vec![0.0; dim]; positives.len()],
            Vec::new(),
        ));
    }
    let neg_logits: Vec<f64> = negatives
        .iter()
        .map(|n| checked_logit(dot_slices(anchor, n), tau))
        .collect::<Result<_>>()?;
    let pos_logits: Vec<f64> = positives
        .iter()
        .map(|p| checked_logit(dot_slices(anchor, p), tau))
        .collect::<Result<_>>()?;

    let mut max = f64::NEG_INFINITY;
    for &s in pos_logits.iter().chain(neg_logits.iter()) {
        max = max.max(s);
    }
    let neg_exp: Vec<f64> = neg_logits.iter().map(|&t| (t - max).exp()).collect();
    let neg_sum: f64 = neg_exp.iter().sum();

    let np = positives.len() as f64;
    let mut loss = 0.0f64;
    let mut d_anchor = vec![0.0f64; dim];
    let mut d_pos = vec![vec![0.0f64; dim]; positives.len()];
    let mut d_neg = vec![vec![0.0f64; dim]; negatives.len()];

    // the negative weights factor as neg_exp[n] / z_p, so one pass over the
    // positives accumulates sum_p 1/z_p and the negative-side gradients
    // follow in O(|N| * dim)
    let mut inv_z_sum = 0.0f64;
    for (pi, p) in positives.iter().enumerate() {
        let e_p = (pos_logits[pi] - max).exp();
        let z = e_p + neg_sum;
        loss += max + z.ln() - pos_logits[pi];
        inv_z_sum += 1.0 / z;
        let w_p = e_p / z;
        for i in 0..dim {
            d_anchor[i] += (w_p - 1.0) / (tau * np) * p[i];
            d_pos[pi][i] = (w_p - 1.0) / (tau * np) * anchor[i];
        }
    }
    for (ni, n) in negatives.iter().enumerate() {
        let scale = neg_exp[ni] * inv_z_sum / (tau * np);
        for i in 0..dim {
            d_anchor[i] += scale * n[i];
            d_neg[ni][i] = scale * anchor[i];
        }
    }
    loss /= np;
    Ok((loss, d_anchor, d_pos, d_neg))
}

/// Mask-head pooling of the memory features into unit-norm foreground and
/// background vectors: V_fg = F . M, V_bg = F . (1 - M), both normalized.
pub fn fg_bg_vectors(
    f_mem: &Tensor,
    query: &Tensor,
    mask_params: &MaskHeadParams,
) -> Result<FgBgVectors> {
    let m = mask_head(f_mem, query, mask_params)?;
    let (c, hw) = (f_mem.dims()[0], f_mem.dims()[1]);
    let mut fg = vec![0.0f64; c];
    let mut bg = vec![0.0f64; c];
    for ch in 0..c {
        let row = f_mem.row(ch);
        let mut afg = 0.0f64;
        let mut abg = 0.0f64;
        for p in 0..hw {
            let mv = m.data()[p] as f64;
            let fv = row[p] as f64;
            afg += mv * fv;
            abg += (1.0 - mv) * fv;
        }
        fg[ch] = afg;
        bg[ch] = abg;
    }
    let v_fg = l2_normalize(&Tensor::new(vec![c], fg.iter().map(|&v| v as f32).collect())?)?;
    let v_bg = l2_normalize(&Tensor::new(vec![c], bg.iter().map(|&v| v as f32).collect())?)?;
    Ok(FgBgVectors { v_fg, v_bg })
}

/// Intra-video contrastive loss.
///
/// With A = {key_fg, ref_fg} and B = {key_bg, ref_bg} + bank entries:
/// L = -log( exp(key_fg . ref_fg / tau)
///         / (exp(key_fg . ref_fg / tau) + sum_{a in A, b in B} exp(a . b / tau)) )
pub fn intra_loss(batch: &ContrastiveBatch) -> Result<(f64, IntraGrads)> {
    let dim = batch.v_key_fg.len();
    for v in [&batch.v_key_bg, &batch.v_ref_fg, &batch.v_ref_bg] {
        if v.len() != dim {
            return Err(EgcError::Shape("contrastive vectors differ in dim".into()));
        }
    }
    for v in &batch.bank_negatives {
        if v.len() != dim {
            return Err(EgcError::Shape("bank negative differs in dim".into()));
        }
    }
    let bank: Vec<Vec<f64>> = batch.bank_negatives.iter().map(to_f64).collect();
    let (loss, [d_kf, d_kb, d_rf, d_rb]) = intra_loss_core(
        &to_f64(&batch.v_key_fg),
        &to_f64(&batch.v_ref_fg),
        &to_f64(&batch.v_key_bg),
        &to_f64(&batch.v_ref_bg),
        &bank,
        batch.temperature as f64,
    )?;
    Ok((
        loss,
        IntraGrads {
            d_key_fg: to_f32_tensor(&d_kf),
            d_key_bg: to_f32_tensor(&d_kb),
            d_ref_fg: to_f32_tensor(&d_rf),
            d_ref_bg: to_f32_tensor(&d_rb),
        },
    ))
}

/// Inter-video contrastive loss: mean over positives of the one-positive
/// softmax loss against the shared negative set.
pub fn inter_loss(
    anchor: &Tensor,
    positives: &[Tensor],
    negatives: &[Tensor],
    temperature: f32,
) -> Result<(f64, InterGrads)> {
    let dim = anchor.len();
    for v in positives.iter().chain(negatives.iter()) {
        if v.len() != dim {
            return Err(EgcError::Shape("inter-video vectors differ in dim".into()));
        }
    }
    let pos: Vec<Vec<f64>> = positives.iter().map(to_f64).collect();
    let neg: Vec<Vec<f64>> = negatives.iter().map(to_f64).collect();
    let (loss, d_anchor, d_pos, d_neg) =
        inter_loss_core(&to_f64(anchor), &pos, &neg, temperature as f64)?;
    Ok((
        loss,
        InterGrads {
            d_anchor: to_f32_tensor(&d_anchor),
            d_positives: d_pos.iter().map(|v| to_f32_tensor(v)).collect(),
            d_negatives: d_neg.iter().map(|v| to_f32_tensor(v)).collect(),
        },
    ))
}

/// Fixed-capacity FIFO ring buffer of background vectors.
#[derive(Debug, Clone)]
pub struct FrameBank {
    capacity: usize,
    dim: usize,
    entries: Vec<Tensor>,
    cursor: usize,
}

impl FrameBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, v: Tensor) -> Result<()> {
        if v.len() != self.dim {
            return Err(EgcError::Shape(format!(
                "bank expects dim {}, got {}",
                self.dim,
                v.len()
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() < self.capacity {
            self.entries.push(v);
        } else {
            self.entries[self.cursor] = v;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Oldest-to-newest iteration.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &Tensor> {
        let (tail, head) = if self.entries.len() < self.capacity {
            (&self.entries[..], &self.entries[..0])
        } else {
            (&self.entries[self.cursor..], &self.entries[..self.cursor])
        };
        tail.iter().chain(head.iter())
    }

    /// Raw storage access for checkpointing: (entries in storage order, cursor).
    pub fn storage(&self) -> (&[Tensor], usize) {
        (&self.entries, self.cursor)
    }

    pub fn restore(capacity: usize, dim: usize, entries: Vec<Tensor>, cursor: usize) -> Result<Self> {
        if entries.len() > capacity || (capacity > 0 && cursor >= capacity.max(1)) {
            return Err(EgcError::Config("inconsistent bank snapshot".into()));
        }
        for e in &entries {
            if e.len() != dim {
                return Err(EgcError::Shape("bank snapshot dim mismatch".into()));
            }
        }
        Ok(Self {
            capacity,
            dim,
            entries,
            cursor,
        })
    }
}

/// FIFO ring buffer of (query embedding, video id) pairs.
#[derive(Debug, Clone)]
pub struct VideoBank {
    capacity: usize,
    dim: usize,
    entries: Vec<(Tensor, u64)>,
    cursor: usize,
}

impl VideoBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, v: Tensor, video_id: u64) -> Result<()> {
        if v.len() != self.dim {
            return Err(EgcError::Shape(format!(
                "bank expects dim {}, got {}",
                self.dim,
                v.len()
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() < self.capacity {
            self.entries.push((v, video_id));
        } else {
            self.entries[self.cursor] = (v, video_id);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    pub fn iter_fifo(&self) -> impl Iterator<Item = &(Tensor, u64)> {
        let (tail, head) = if self.entries.len() < self.capacity {
            (&self.entries[..], &self.entries[..0])
        } else {
            (&self.entries[self.cursor..], &self.entries[..self.cursor])
        };
        tail.iter().chain(head.iter())
    }

    pub fn storage(&self) -> (&[(Tensor, u64)], usize) {
        (&self.entries, self.cursor)
    }

    pub fn restore(
        capacity: usize,
        dim: usize,
        entries: Vec<(Tensor, u64)>,
        cursor: usize,
    ) -> Result<Self> {
        if entries.len() > capacity || (capacity > 0 && cursor >= capacity.max(1)) {
            return Err(EgcError::Config("inconsistent bank snapshot".into()));
        }
        for (e, _) in &entries {
            if e.len() != dim {
                return Err(EgcError::Shape("bank snapshot dim mismatch".into()));
            }
        }
        Ok(Self {
            capacity,
            dim,
            entries,
            cursor,
        })
    }
}

/// Partition the stored entries by video id. Positives share the current
/// video id; negatives are the `max_neg` most recent entries from other
/// videos.
pub fn video_bank_sample(
    bank: &VideoBank,
    current_video_id: u64,
    max_neg: usize,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (v, id) in bank.iter_fifo() {
        if *id == current_video_id {
            positives.push(v.clone());
        } else {
            negatives.push(v.clone());
        }
    }
    if negatives.len() > max_neg {
        negatives.drain(..negatives.len() - max_neg);
    }
    (positives, negatives)
}
