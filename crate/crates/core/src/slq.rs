//! Semantics and locality query competitor: every object query gets a mask
//! from a projected dot-product head, a pooled feature vector, a semantic
//! score against the scribble-region feature, and a partial-IoU locality
//! score; the best-scoring query wins.

use crate::error::{EgcError, Result};
use crate::numerics::{sigmoid_scalar, Tensor};

/// Projector applied before the semantic cosine (1x1 conv + ReLU analogue).
#[derive(Debug, Clone)]
pub struct ProjectorParams {
    pub weight: Tensor, // d_proj x c
}

/// Mask head: logits for query q are (P q) . F_mem[:, p] / sqrt(C).
#[derive(Debug, Clone)]
pub struct MaskHeadParams {
    pub projection: Tensor, // c x d
}

/// Per-query masks, pooled features, and scores for one frame.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub embeddings: Tensor,   // n_q x d
    pub masks: Tensor,        // n_q x hw, sigmoid activations in (0,1)
    pub features: Tensor,     // n_q x c
    pub scores_sem: Tensor,   // n_q
    pub scores_loc: Tensor,   // n_q
    pub scores_total: Tensor, // n_q
}

fn expect_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(EgcError::Shape(format!(
            "{what} must be rank-2, got {:?}",
            t.dims()
        )));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

/// Transpose a C x HW feature matrix into HW x C for contiguous column reads.
pub fn transpose_cols(f_mem: &Tensor) -> Result<Tensor> {
    let (c, hw) = expect_matrix(f_mem, "feature matrix")?;
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        let row = f_mem.row(ch);
        for p in 0..hw {
            out[p * c + ch] = row[p];
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// Parameter-free non-local block over pixels with a residual:
/// Y = F + F . softmax_rows(F^T F / sqrt(C))^T.
pub fn nonlocal_propagate(f: &Tensor) -> Result<Tensor> {
    let (c, hw) = expect_matrix(f, "non-local input")?;
    let ft = transpose_cols(f)?; // hw x c
    let scale = 1.0 / (c as f64).sqrt();
    let mut out_t = vec![0.0f32; hw * c];
    let mut row_sim = vec![0.0f64; hw];
    for i in 0..hw {
        let fi = ft.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..hw {
            let fj = ft.row(j);
            let mut dot = 0.0f64;
            for ch in 0..c {
                dot += fi[ch] as f64 * fj[ch] as f64;
            }
            let s = dot * scale;
            row_sim[j] = s;
            max = max.max(s);
        }
        let mut denom = 0.0f64;
        for s in row_sim.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let mut acc = vec![0.0f64; c];
        for j in 0..hw {
            let a = row_sim[j] / denom;
            let fj = ft.row(j);
            for ch in 0..c {
                acc[ch] += a * fj[ch] as f64;
            }
        }
        for ch in 0..c {
            out_t[i * c + ch] = (fi[ch] as f64 + acc[ch]) as f32;
        }
    }
    // transpose back to C x HW
    let mut out = vec![0.0f32; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = out_t[p * c + ch];
        }
    }
    Tensor::new(vec![c, hw], out)
}

/// Scribble-region feature: non-local propagation of the scribble-gated
/// features, then the mean column over scribble pixels.
///
/// The propagated map is only read at scribble columns, so the attention
/// rows are evaluated just for those pixels instead of materializing the
/// full HW x HW map. The result is identical to pooling over
/// [`nonlocal_propagate`] output.
pub fn scribble_feature(f_mem: &Tensor, m_scr: &Tensor) -> Result<Tensor> {
    let (c, hw) = expect_matrix(f_mem, "memory features")?;
    if m_scr.len() != hw {
        return Err(EgcError::Shape(format!(
            "scribble has {} px, features have {hw}",
            m_scr.len()
        )));
    }
    let scr_px: Vec<usize> = (0..hw).filter(|&p| m_scr.data()[p] > 0.5).collect();
    if scr_px.is_empty() {
        return Err(EgcError::DegenerateInput("empty scribble".into()));
    }
    // gated input, transposed to hw x c for contiguous column reads
    let mut gated_t = vec![0.0f32; hw * c];
    for ch in 0..c {
        let row = f_mem.row(ch);
        for p in 0..hw {
            gated_t[p * c + ch] = row[p] * m_scr.data()[p] + row[p];
        }
    }
    let scale = 1.0 / (c as f64).sqrt();
    let mut acc = vec![0.0f64; c];
    let mut sims = vec![0.0f64; hw];
    for &i in &scr_px {
        let fi = &gated_t[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for j in 0..hw {
            let fj = &gated_t[j * c..(j + 1) * c];
            let mut dot = 0.0f64;
            for ch in 0..c {
                dot += fi[ch] as f64 * fj[ch] as f64;
            }
            let s = dot * scale;
            sims[j] = s;
            max = max.max(s);
        }
        let mut denom = 0.0f64;
        for s in sims.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        for ch in 0..c {
            acc[ch] += fi[ch] as f64;
        }
        for j in 0..hw {
            let a = sims[j] / denom;
            let fj = &gated_t[j * c..(j + 1) * c];
            for ch in 0..c {
                acc[ch] += a * fj[ch] as f64;
            }
        }
    }
    let n = scr_px.len() as f64;
    let out: Vec<f32> = acc.iter().map(|&v| (v / n) as f32).collect();
    Tensor::new(vec![c], out)
}

/// Mask logits for a single query: (P q)^T F_mem / sqrt(C), shape hw.
pub fn mask_head_logits(f_mem: &Tensor, q: &Tensor, params: &MaskHeadParams) -> Result<Tensor> {
    let (c, hw) = expect_matrix(f_mem, "memory features")?;
    let (pc, pd) = expect_matrix(&params.projection, "mask-head projection")?;
    if pc != c || pd != q.len() {
        return Err(EgcError::Shape(format!(
            "mask head shapes disagree: P {:?}, q {}, features {:?}",
            params.projection.dims(),
            q.len(),
            f_mem.dims()
        )));
    }
    let mut u = vec![0.0f32; c];
    for ch in 0..c {
        let prow = params.projection.row(ch);
        let mut acc = 0.0f32;
        for (j, &qv) in q.data().iter().enumerate() {
            acc += prow[j] * qv;
        }
        u[ch] = acc;
    }
    let scale = 1.0 / (c as f32).sqrt();
    let mut z = vec![0.0f32; hw];
    for (ch, &uv) in u.iter().enumerate() {
        let row = f_mem.row(ch);
        for p in 0..hw {
            z[p] += uv * row[p];
        }
    }
    for v in &mut z {
        *v *= scale;
    }
    Tensor::new(vec![hw], z)
}

/// Mask activation in (0,1) for a single query.
pub fn mask_head(f_mem: &Tensor, q: &Tensor, params: &MaskHeadParams) -> Result<Tensor> {
    let z = mask_head_logits(f_mem, q, params)?;
    Ok(crate::numerics::sigmoid(&z))
}

/// Mask-weighted average feature column: (F_mem . M^T) / sum(M).
pub fn query_feature(f_mem: &Tensor, m_q: &Tensor) -> Result<Tensor> {
    let (c, hw) = expect_matrix(f_mem, "memory features")?;
    if m_q.len() != hw {
        return Err(EgcError::Shape(format!(
            "mask has {} px, features have {hw}",
            m_q.len()
        )));
    }
    let total: f64 = m_q.data().iter().map(|&v| v as f64).sum();
    if total < 1e-8 {
        return Err(EgcError::DegenerateInput(
            "mask mass below 1e-8, pooled feature undefined".into(),
        ));
    }
    let mut out = vec![0.0f32; c];
    for ch in 0..c {
        let row = f_mem.row(ch);
        let mut acc = 0.0f64;
        for p in 0..hw {
            acc += row[p] as f64 * m_q.data()[p] as f64;
        }
        out[ch] = (acc / total) as f32;
    }
    Tensor::new(vec![c], out)
}

fn relu_project(proj: &ProjectorParams, v: &Tensor) -> Result<Tensor> {
    let (dp, c) = expect_matrix(&proj.weight, "projector weight")?;
    if v.len() != c {
        return Err(EgcError::Shape(format!(
            "projector expects {c}-dim input, got {}",
            v.len()
        )));
    }
    let mut out = vec![0.0f32; dp];
    for i in 0..dp {
        let row = proj.weight.row(i);
        let mut acc = 0.0f64;
        for (j, &x) in v.data().iter().enumerate() {
            acc += row[j] as f64 * x as f64;
        }
        out[i] = (acc.max(0.0)) as f32;
    }
    Tensor::new(vec![dp], out)
}

/// Cosine of the rectified projections; zero-norm projections score 0 so
/// selection can proceed when the rectifier silences a vector.
pub fn semantic_score(f_scr: &Tensor, f_q_row: &Tensor, proj: &ProjectorParams) -> Result<f64> {
    let a = relu_project(proj, f_scr)?;
    let b = relu_project(proj, f_q_row)?;
    if a.norm() <= 0.0 || b.norm() <= 0.0 {
        return Ok(0.0);
    }
    crate::numerics::cosine(&a, &b)
}

/// Partial IoU against an annotated scribble: soft intersection over the
/// scribble mass. Reduces to |M_pre AND M_scr| / |M_scr| for binary inputs.
pub fn partial_iou(m_pre: &Tensor, m_scr: &Tensor) -> Result<f64> {
    if m_pre.len() != m_scr.len() {
        return Err(EgcError::Shape(format!(
            "mask sizes differ: {} vs {}",
            m_pre.len(),
            m_scr.len()
        )));
    }
    let mut inter = 0.0f64;
    let mut scr = 0.0f64;
    for (&p, &s) in m_pre.data().iter().zip(m_scr.data()) {
        inter += p as f64 * s as f64;
        scr += s as f64;
    }
    if scr <= 0.0 {
        return Err(EgcError::DegenerateInput("empty scribble".into()));
    }
    Ok(inter / scr)
}

/// Locality score: partial IoU of the foreground map against the foreground
/// scribble plus partial IoU of the background map against the background
/// scribble. Range [0, 2].
pub fn locality_score(m_fg: &Tensor, m_scr_fg: &Tensor, m_scr_bg: &Tensor) -> Result<f64> {
    let inv = Tensor::new(
        m_fg.dims().to_vec(),
        m_fg.data().iter().map(|&v| 1.0 - v).collect(),
    )?;
    Ok(partial_iou(m_fg, m_scr_fg)? + partial_iou(&inv, m_scr_bg)?)
}

/// Batched scoring of all queries against one frame.
///
/// `ft` is the transposed feature matrix (hw x c, see [`transpose_cols`]),
/// which keeps the per-pixel inner loops contiguous.
pub fn score_queries(
    ft: &Tensor,
    f_scr: &Tensor,
    m_scr_fg: &Tensor,
    m_scr_bg: &Tensor,
    queries: &Tensor,
    mask_params: &MaskHeadParams,
    proj: &ProjectorParams,
) -> Result<QuerySet> {
    let (hw, c) = expect_matrix(ft, "transposed features")?;
    let (n_q, d) = expect_matrix(queries, "query matrix")?;
    let (pc, pd) = expect_matrix(&mask_params.projection, "mask-head projection")?;
    if pc != c || pd != d {
        return Err(EgcError::Shape(format!(
            "mask head projection {:?} does not match features c={c}, queries d={d}",
            mask_params.projection.dims()
        )));
    }
    if m_scr_fg.len() != hw || m_scr_bg.len() != hw {
        return Err(EgcError::Shape("scribble size mismatch".into()));
    }
    let fg_px: Vec<usize> = (0..hw).filter(|&p| m_scr_fg.data()[p] > 0.5).collect();
    let bg_px: Vec<usize> = (0..hw).filter(|&p| m_scr_bg.data()[p] > 0.5).collect();
    if fg_px.is_empty() || bg_px.is_empty() {
        return Err(EgcError::DegenerateInput("empty scribble".into()));
    }

    let scale = 1.0 / (c as f32).sqrt();
    let mut masks = vec![0.0f32; n_q * hw];
    let mut feats = vec![0.0f32; n_q * c];
    let mut s_sem = vec![0.0f32; n_q];
    let mut s_loc = vec![0.0f32; n_q];
    let mut s_tot = vec![0.0f32; n_q];

    let mut u = vec![0.0f32; c];
    for i in 0..n_q {
        let q = queries.row(i);
        for ch in 0..c {
            let prow = mask_params.projection.row(ch);
            let mut acc = 0.0f32;
            for j in 0..d {
                acc += prow[j] * q[j];
            }
            u[ch] = acc;
        }
        let mrow = &mut masks[i * hw..(i + 1) * hw];
        let mut mass = 0.0f64;
        for p in 0..hw {
            let frow = ft.row(p);
            let mut z = 0.0f32;
            for ch in 0..c {
                z += u[ch] * frow[ch];
            }
            let m = sigmoid_scalar((z * scale) as f64) as f32;
            mrow[p] = m;
            mass += m as f64;
        }
        // pooled feature
        if mass < 1e-8 {
            return Err(EgcError::DegenerateInput(
                "query mask mass below 1e-8".into(),
            ));
        }
        let mut pooled = vec![0.0f64; c];
        for p in 0..hw {
            let m = mrow[p] as f64;
            let frow = ft.row(p);
            for ch in 0..c {
                pooled[ch] += m * frow[ch] as f64;
            }
        }
        for ch in 0..c {
            feats[i * c + ch] = (pooled[ch] / mass) as f32;
        }

        // locality: partial IoU on both scribbles
        let mut inter_fg = 0.0f64;
        for &p in &fg_px {
            inter_fg += mrow[p] as f64;
        }
        let mut inter_bg = 0.0f64;
        for &p in &bg_px {
            inter_bg += (1.0 - mrow[p]) as f64;
        }
        let loc = inter_fg / fg_px.len() as f64 + inter_bg / bg_px.len() as f64;

        let f_q_row = Tensor::new(vec![c], feats[i * c..(i + 1) * c].to_vec())?;
        let sem = semantic_score(f_scr, &f_q_row, proj)?;

        s_sem[i] = sem as f32;
        s_loc[i] = loc as f32;
        s_tot[i] = (sem + loc) as f32;
    }

    Ok(QuerySet {
        embeddings: queries.clone(),
        masks: Tensor::new(vec![n_q, hw], masks)?,
        features: Tensor::new(vec![n_q, c], feats)?,
        scores_sem: Tensor::new(vec![n_q], s_sem)?,
        scores_loc: Tensor::new(vec![n_q], s_loc)?,
        scores_total: Tensor::new(vec![n_q], s_tot)?,
    })
}

/// Argmax of the combined score; ties break to the lowest index. Returns the
/// winning index and a copy of the winning embedding.
pub fn select_query(qs: &QuerySet) -> Result<(usize, Tensor)> {
    let n_q = qs.scores_total.len();
    if n_q == 0 {
        return Err(EgcError::Shape("empty query set".into()));
    }
    let mut best = 0usize;
    let mut best_score = qs.scores_total.data()[0];
    for i in 1..n_q {
        let s = qs.scores_total.data()[i];
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok((best, Tensor::from_vec(qs.embeddings.row(best).to_vec())))
}
