//! Position and semantic embedding: turns a fixation heatmap into a 2D
//! sinusoidal position embedding, pairs it with a learnable semantic
//! embedding, and initializes the object queries from the combination.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EgcError, Result};
use crate::numerics::Tensor;

/// Sinusoidal encoding of a single continuous coordinate.
#[derive(Debug, Clone)]
pub struct PositionEmbedding {
    pub e_pos: Tensor,
}

/// Learnable semantic embedding, owned by the trainer and passed in here.
#[derive(Debug, Clone)]
pub struct SemanticEmbedding {
    pub e_sem: Tensor,
}

impl SemanticEmbedding {
    /// Draw from N(0, 0.02^2).
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let data: Vec<f32> = (0..dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * 0.02)
            .collect();
        Self {
            e_sem: Tensor::from_vec(data),
        }
    }
}

/// Shared initial value for every object query.
#[derive(Debug, Clone)]
pub struct QueryInit {
    pub q_ini: Tensor, // n_queries x d
}

/// Intensity-weighted centroid of a fixation heatmap, continuous (x, y).
pub fn fixation_centroid(fix: &Tensor) -> Result<(f64, f64)> {
    if fix.rank() != 2 {
        return Err(EgcError::Shape(format!(
            "fixation must be rank-2, got {:?}",
            fix.dims()
        )));
    }
    let (h, w) = (fix.dims()[0], fix.dims()[1]);
    let mut total = 0.0f64;
    let mut sx = 0.0f64;
    let mut sy = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let v = fix.at2(r, c) as f64;
            total += v;
            sx += v * c as f64;
            sy += v * r as f64;
        }
    }
    if total <= 0.0 {
        return Err(EgcError::DegenerateInput(
            "fixation heatmap has zero mass".into(),
        ));
    }
    Ok((sx / total, sy / total))
}

/// Interleaved sin/cos encoding of one coordinate: index 2k holds
/// sin(w_k t), index 2k+1 holds cos(w_k t), w_k = 10000^(-2k/d_half).
pub fn positional_encoding_1d(t: f64, d_half: usize) -> Result<Tensor> {
    if d_half == 0 || d_half % 2 != 0 {
        return Err(EgcError::Shape(format!(
            "1d encoding dim must be even and positive, got {d_half}"
        )));
    }
    let mut out = vec![0.0f32; d_half];
    for k in 0..d_half / 2 {
        let omega = 10000.0f64.powf(-2.0 * k as f64 / d_half as f64);
        out[2 * k] = (omega * t).sin() as f32;
        out[2 * k + 1] = (omega * t).cos() as f32;
    }
    Tensor::new(vec![d_half], out)
}

/// Concatenation of the x encoding then the y encoding, d/2 dims each.
pub fn positional_encoding_2d(x: f64, y: f64, d: usize) -> Result<PositionEmbedding> {
    if d % 2 != 0 || (d / 2) % 2 != 0 {
        return Err(EgcError::Shape(format!(
            "2d encoding dim must be divisible by 2 with even halves, got {d}"
        )));
    }
    let ex = positional_encoding_1d(x, d / 2)?;
    let ey = positional_encoding_1d(y, d / 2)?;
    let mut data = Vec::with_capacity(d);
    data.extend_from_slice(ex.data());
    data.extend_from_slice(ey.data());
    Ok(PositionEmbedding {
        e_pos: Tensor::new(vec![d], data)?,
    })
}

/// Shared query initialization: every row is e_pos + e_sem.
pub fn init_queries(
    e_pos: &PositionEmbedding,
    e_sem: &SemanticEmbedding,
    n_queries: usize,
) -> Result<QueryInit> {
    let d = e_pos.e_pos.len();
    if e_sem.e_sem.len() != d {
        return Err(EgcError::Shape(format!(
            "embedding dims differ: pos {} vs sem {}",
            d,
            e_sem.e_sem.len()
        )));
    }
    if n_queries == 0 {
        return Err(EgcError::Config("n_queries must be positive".into()));
    }
    let row: Vec<f32> = e_pos
        .e_pos
        .data()
        .iter()
        .zip(e_sem.e_sem.data())
        .map(|(a, b)| a + b)
        .collect();
    let mut data = Vec::with_capacity(n_queries * d);
    for _ in 0..n_queries {
        data.extend_from_slice(&row);
    }
    Ok(QueryInit {
        q_ini: Tensor::new(vec![n_queries, d], data)?,
    })
}

/// Fixed seeded offsets that break the symmetry of the shared init.
/// Row i of the result is `scale` times a standard-normal draw; the trainer
/// adds these to every frame's Q_ini and keeps them constant throughout.
pub fn query_offsets(n_queries: usize, d: usize, scale: f32, seed: u64) -> Tensor {
    let mut rng = crate::testutil::rng(seed);
    let data: Vec<f32> = (0..n_queries * d)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
        .collect();
    Tensor::new(vec![n_queries, d], data).expect("consistent dims")
}

/// Q_ini plus the per-query offsets.
pub fn diversify_queries(q_ini: &QueryInit, offsets: &Tensor) -> Result<Tensor> {
    if q_ini.q_ini.dims() != offsets.dims() {
        return Err(EgcError::Shape(format!(
            "query/offset dims differ: {:?} vs {:?}",
            q_ini.q_ini.dims(),
            offsets.dims()
        )));
    }
    let data: Vec<f32> = q_ini
        .q_ini
        .data()
        .iter()
        .zip(offsets.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(q_ini.q_ini.dims().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_point_mass_and_uniform_block() {
        let mut fix = Tensor::zeros(vec![8, 8]);
        fix.data_mut()[3 * 8 + 5] = 0.7;
        let (x, y) = fixation_centroid(&fix).unwrap();
        assert!((x - 5.0).abs() < 1e-9 && (y - 3.0).abs() < 1e-9);

        let mut block = Tensor::zeros(vec![8, 8]);
        for r in 2..4 {
            for c in 4..6 {
                block.data_mut()[r * 8 + c] = 1.0;
            }
        }
        let (x, y) = fixation_centroid(&block).unwrap();
        assert!((x - 4.5).abs() < 1e-9 && (y - 2.5).abs() < 1e-9);
    }

    #[test]
    fn centroid_weighted_mean() {
        let mut fix = Tensor::zeros(vec![2, 5]);
        fix.data_mut()[0] = 1.0; // col 0
        fix.data_mut()[4] = 3.0; // col 4
        let (x, _) = fixation_centroid(&fix).unwrap();
        assert!((x - 3.0).abs() < 1e-9);
    }

    #[test]
    fn centroid_rejects_zero_mass() {
        let fix = Tensor::zeros(vec![4, 4]);
        assert!(matches!(
            fixation_centroid(&fix),
            Err(EgcError::DegenerateInput(_))
        ));
    }

    #[test]
    fn encoding_1d_zero_and_unit_argument() {
        let e = positional_encoding_1d(0.0, 4).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0]);

        // omega_1 = 10000^(-2/4) = 0.01
        let e = positional_encoding_1d(1.0, 4).unwrap();
        let want = [(1.0f64).sin(), (1.0f64).cos(), (0.01f64).sin(), (0.01f64).cos()];
        for (got, want) in e.data().iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn encoding_1d_rejects_odd_dim() {
        assert!(matches!(
            positional_encoding_1d(1.0, 3),
            Err(EgcError::Shape(_))
        ));
    }

    #[test]
    fn encoding_2d_origin_and_axis_separation() {
        let e = positional_encoding_2d(0.0, 0.0, 8).unwrap().e_pos;
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);

        let d = 16;
        let a = positional_encoding_2d(3.0, 7.0, d).unwrap().e_pos;
        let b = positional_encoding_2d(3.0, 99.0, d).unwrap().e_pos;
        assert_eq!(&a.data()[..d / 2], &b.data()[..d / 2]);
        assert_ne!(&a.data()[d / 2..], &b.data()[d / 2..]);
    }

    #[test]
    fn encoding_2d_matches_direct_evaluation() {
        let d = 256;
        let e = positional_encoding_2d(3.0, 7.0, d).unwrap().e_pos;
        for (axis, t) in [(0usize, 3.0f64), (1, 7.0)] {
            let half = d / 2;
            for k in 0..half / 2 {
                let omega = 10000.0f64.powf(-2.0 * k as f64 / half as f64);
                let base = axis * half + 2 * k;
                assert!((e.data()[base] as f64 - (omega * t).sin()).abs() < 1e-6);
                assert!((e.data()[base + 1] as f64 - (omega * t).cos()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pair_identity_and_norm() {
        let d = 64;
        let e = positional_encoding_2d(13.4, 27.9, d).unwrap().e_pos;
        for k in 0..d / 2 {
            let s = e.data()[2 * k] as f64;
            let c = e.data()[2 * k + 1] as f64;
            assert!((s * s + c * c - 1.0).abs() < 1e-5);
        }
        let norm_sq: f64 = e.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        assert!((norm_sq - d as f64 / 2.0).abs() < 1e-4);
    }

    #[test]
    fn init_queries_additive_identities() {
        let d = 8;
        let e_pos = positional_encoding_2d(2.0, 5.0, d).unwrap();
        let zero_sem = SemanticEmbedding {
            e_sem: Tensor::zeros(vec![d]),
        };
        let q = init_queries(&e_pos, &zero_sem, 3).unwrap();
        for i in 0..3 {
            assert_eq!(q.q_ini.row(i), e_pos.e_pos.data());
        }

        let zero_pos = PositionEmbedding {
            e_pos: Tensor::zeros(vec![d]),
        };
        let mut rng = crate::testutil::rng(5);
        let sem = SemanticEmbedding::init(d, &mut rng);
        let q = init_queries(&zero_pos, &sem, 2).unwrap();
        for i in 0..2 {
            assert_eq!(q.q_ini.row(i), sem.e_sem.data());
        }

        // random pair: rows equal the elementwise sum
        let e_pos = positional_encoding_2d(9.0, 1.5, d).unwrap();
        let q = init_queries(&e_pos, &sem, 2).unwrap();
        for i in 0..2 {
            for j in 0..d {
                let want = e_pos.e_pos.data()[j] + sem.e_sem.data()[j];
                assert_eq!(q.q_ini.row(i)[j], want);
            }
        }
    }

    #[test]
    fn init_queries_rejects_dim_mismatch() {
        let e_pos = positional_encoding_2d(0.0, 0.0, 8).unwrap();
        let sem = SemanticEmbedding {
            e_sem: Tensor::zeros(vec![4]),
        };
        assert!(matches!(
            init_queries(&e_pos, &sem, 2),
            Err(EgcError::Shape(_))
        ));
    }

    #[test]
    fn offsets_are_deterministic_and_scaled() {
        let a = query_offsets(4, 8, 0.01, 42);
        let b = query_offsets(4, 8, 0.01, 42);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() < 0.1));
        let c = query_offsets(4, 8, 0.01, 43);
        assert_ne!(a.data(), c.data());
    }

    proptest::proptest! {
        #[test]
        fn centroid_scale_invariant(
            alpha in 0.1f32..10.0,
            seed in 0u64..1000,
        ) {
            let mut rng = crate::testutil::rng(seed);
            let mut fix = Tensor::zeros(vec![6, 6]);
            for v in fix.data_mut() {
                *v = rng.gen_range(0.0f32..1.0);
            }
            let (x0, y0) = fixation_centroid(&fix).unwrap();
            let scaled = Tensor::new(
                vec![6, 6],
                fix.data().iter().map(|v| v * alpha).collect(),
            ).unwrap();
            let (x1, y1) = fixation_centroid(&scaled).unwrap();
            proptest::prop_assert!((x0 - x1).abs() < 1e-5);
            proptest::prop_assert!((y0 - y1).abs() < 1e-5);
        }
    }
}
