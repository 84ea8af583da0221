//! Dense row-major f32 tensors and the numeric kernels everything else
//! builds on: matmul, softmax, cosine similarity, normalization, sigmoid,
//! and a central-difference gradient checker.
//!
//! No broadcasting anywhere; shape coercions are explicit at call sites.
//! Reductions that feed losses or gradients accumulate in f64; the stored
//! values are always f32.

use crate::error::{EgcError, Result};

/// Dense rank-N array of f32 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(EgcError::Shape(format!("zero-sized dim in {dims:?}")));
        }
        if data.len() != n {
            return Err(EgcError::Shape(format!(
                "data length {} does not match dims {:?} (need {})",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Reinterpret the buffer under new dims with the same element count.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(EgcError::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.dims,
                self.data.len(),
                dims,
                n
            )));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    /// Row-major element access for rank-2 tensors.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }

    /// Row slice of a rank-2 tensor.
    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        debug_assert_eq!(self.dims.len(), 2);
        let w = self.dims[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Dot product of two equal-length tensors, accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(EgcError::Shape(format!(
                "dot length mismatch: {} vs {}",
                self.data.len(),
                other.data.len()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }
}

/// Matrix product of `a` (m x k) and `b` (k x n).
///
/// Accumulation is plain f32, row-major, left-to-right, so the result is
/// bit-identical to a naive triple loop in the same order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(EgcError::Shape(format!(
            "matmul needs rank-2 inputs, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (m, k) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    if k != k2 {
        return Err(EgcError::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let mut acc = 0.0f32;
            for (l, &av) in arow.iter().enumerate().take(k) {
                acc += av * b.data[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    if !t.all_finite() {
        return Err(EgcError::Numeric("matmul produced non-finite values".into()));
    }
    Ok(t)
}

/// Temperature-scaled softmax over a rank-1 tensor, max-subtracted for
/// stability.
pub fn softmax(v: &Tensor, temperature: f32) -> Result<Tensor> {
    if v.is_empty() {
        return Err(EgcError::Shape("softmax of empty vector".into()));
    }
    if !(temperature > 0.0) {
        return Err(EgcError::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let max = v.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut exps = Vec::with_capacity(v.len());
    let mut sum = 0.0f64;
    for &x in &v.data {
        let e = (((x - max) / temperature) as f64).exp();
        sum += e;
        exps.push(e);
    }
    let out: Vec<f32> = exps.into_iter().map(|e| (e / sum) as f32).collect();
    Tensor::new(vec![out.len()], out)
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() {
        return Err(EgcError::Shape(format!(
            "cosine length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu <= 0.0 || nv <= 0.0 {
        return Err(EgcError::DegenerateInput(
            "cosine of zero-norm vector".into(),
        ));
    }
    Ok((u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0))
}

/// Scale a vector to unit Euclidean norm.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let n = v.norm();
    if n <= 1e-12 {
        return Err(EgcError::DegenerateInput(format!(
            "l2_normalize of near-zero vector (norm {n:.3e})"
        )));
    }
    let out: Vec<f32> = v.data.iter().map(|&x| (x as f64 / n) as f32).collect();
    Tensor::new(v.dims.clone(), out)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function.
pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f32> = x
        .data
        .iter()
        .map(|&v| sigmoid_scalar(v as f64) as f32)
        .collect();
    Tensor {
        dims: x.dims.clone(),
        data: out,
    }
}

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is perturbed to the nearest representable f32 on both
/// sides; the divisor is the realized step, not the nominal 2*eps, which
/// removes the f32 representation error from the estimate.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(EgcError::Config(format!(
            "finite-difference eps {eps} outside [1e-4, 1e-2]"
        )));
    }
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data[i];
        let hi = (orig as f64 + eps as f64) as f32;
        let lo = (orig as f64 - eps as f64) as f32;
        probe.data[i] = hi;
        let f_hi = f(&probe)?;
        probe.data[i] = lo;
        let f_lo = f(&probe)?;
        probe.data[i] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(EgcError::Numeric(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        grad[i] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Tensor::new(x.dims.clone(), grad)
}

/// Worst-case gradient disagreement under a relative tolerance with an
/// absolute floor: max over coordinates of |a-b| / max(|a|, |b|, floor).
pub fn max_relative_error(a: &Tensor, b: &Tensor, abs_floor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EgcError::Shape(format!(
            "gradient length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut worst = 0.0f64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        let denom = (x.abs() as f64).max(y.abs() as f64).max(abs_floor);
        let err = ((x as f64) - (y as f64)).abs() / denom;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity_passes_through() {
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.5, -3.0, 4.0, 0.25, 6.0]).unwrap();
        assert_eq!(matmul(&id, &a).unwrap(), a);
    }

    #[test]
    fn matmul_zero_right_gives_zeros() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let out = matmul(&a, &z).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bit_for_bit() {
        let mut rng = crate::testutil::rng(7);
        let a = crate::testutil::random_tensor(&mut rng, vec![3, 4]);
        let b = crate::testutil::random_tensor(&mut rng, vec![4, 2]);
        let got = matmul(&a, &b).unwrap();
        // Independent oracle: naive triple loop, same accumulation order.
        let mut want = vec![0.0f32; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for l in 0..4 {
                    acc += a.at2(i, l) * b.at2(l, j);
                }
                want[i * 2 + j] = acc;
            }
        }
        assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(EgcError::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let v = Tensor::from_vec(vec![0.0, 0.0]);
        let s = softmax(&v, 1.0).unwrap();
        assert_close(s.data()[0] as f64, 0.5, 1e-7);
        assert_close(s.data()[1] as f64, 0.5, 1e-7);

        let c = Tensor::from_vec(vec![17.5, 17.5, 17.5]);
        for tau in [0.07, 1.0, 10.0] {
            let s = softmax(&c, tau).unwrap();
            for &x in s.data() {
                assert_close(x as f64, 1.0 / 3.0, 1e-6);
            }
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let s = softmax(&v, 1.0).unwrap();
        // Direct evaluation oracle.
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, want) in s.data().iter().zip(exps.iter().map(|e| e / sum)) {
            assert_close(*got as f64, want, 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let v = Tensor { dims: vec![0], data: vec![] };
        assert!(matches!(softmax(&v, 1.0), Err(EgcError::Shape(_))));
    }

    #[test]
    fn cosine_identity_orthogonality_and_hand_case() {
        let u = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        assert_close(cosine(&u, &u).unwrap(), 1.0, 1e-6);

        let e1 = Tensor::from_vec(vec![1.0, 0.0]);
        let e2 = Tensor::from_vec(vec![0.0, 1.0]);
        assert_close(cosine(&e1, &e2).unwrap(), 0.0, 1e-12);

        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![2.0, 1.0]);
        assert_close(cosine(&a, &b).unwrap(), 4.0 / 5.0, 1e-7);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        let u = Tensor::from_vec(vec![1.0, 0.0]);
        assert!(matches!(cosine(&z, &u), Err(EgcError::DegenerateInput(_))));
    }

    #[test]
    fn l2_normalize_345_and_idempotence() {
        let v = Tensor::from_vec(vec![3.0, 4.0]);
        let n = l2_normalize(&v).unwrap();
        assert_close(n.data()[0] as f64, 0.6, 1e-7);
        assert_close(n.data()[1] as f64, 0.8, 1e-7);
        let again = l2_normalize(&n).unwrap();
        for (a, b) in n.data().iter().zip(again.data()) {
            assert_close(*a as f64, *b as f64, 1e-7);
        }
        let mut rng = crate::testutil::rng(3);
        let r = crate::testutil::random_tensor(&mut rng, vec![9]);
        let nr = l2_normalize(&r).unwrap();
        let norm = r.norm();
        for (got, &raw) in nr.data().iter().zip(r.data()) {
            assert_close(*got as f64, raw as f64 / norm, 1e-7);
        }
        assert_close(nr.norm(), 1.0, 1e-5);
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        let v = Tensor::from_vec(vec![1e-20, 0.0]);
        assert!(matches!(l2_normalize(&v), Err(EgcError::DegenerateInput(_))));
    }

    #[test]
    fn sigmoid_midpoint_symmetry_and_value() {
        let z = Tensor::from_vec(vec![0.0]);
        assert_close(sigmoid(&z).data()[0] as f64, 0.5, 1e-9);

        let x = Tensor::from_vec(vec![2.0]);
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        assert_close(sigmoid(&x).data()[0] as f64, want, 1e-7);

        let v = Tensor::from_vec(vec![-3.7, 0.4, 11.0]);
        let neg = Tensor::from_vec(v.data().iter().map(|x| -x).collect());
        for (a, b) in sigmoid(&v).data().iter().zip(sigmoid(&neg).data()) {
            assert_close(*a as f64 + *b as f64, 1.0, 1e-6);
        }
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let sum = |t: &Tensor| -> Result<f64> { Ok(t.data().iter().map(|&v| v as f64).sum()) };
        let x = Tensor::from_vec(vec![0.3, -2.0, 5.5]);
        let g = finite_diff_grad(sum, &x, 1e-3).unwrap();
        for &v in g.data() {
            assert_close(v as f64, 1.0, 1e-6);
        }

        let sq = |t: &Tensor| -> Result<f64> {
            Ok(t.data().iter().map(|&v| (v as f64) * (v as f64)).sum())
        };
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_diff_grad(sq, &x, 1e-3).unwrap();
        assert_close(g.data()[0] as f64, 2.0, 1e-6);
        assert_close(g.data()[1] as f64, 4.0, 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_eps() {
        let f = |_: &Tensor| -> Result<f64> { Ok(0.0) };
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_diff_grad(f, &x, 1e-6).is_err());
        assert!(finite_diff_grad(f, &x, 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let t = Tensor::from_vec(v);
            let s = softmax(&t, 1.0).unwrap();
            let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-5);
        }

        #[test]
        fn cosine_scale_invariant(
            v in proptest::collection::vec(-10.0f32..10.0, 2..8),
            w in proptest::collection::vec(-10.0f32..10.0, 2..8),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            let n = v.len().min(w.len());
            let u = Tensor::from_vec(v[..n].to_vec());
            let t = Tensor::from_vec(w[..n].to_vec());
            if u.norm() > 1e-3 && t.norm() > 1e-3 {
                let base = cosine(&u, &t).unwrap();
                let us = Tensor::from_vec(u.data().iter().map(|x| x * alpha).collect());
                let ts = Tensor::from_vec(t.data().iter().map(|x| x * beta).collect());
                let scaled = cosine(&us, &ts).unwrap();
                proptest::prop_assert!((base - scaled).abs() < 1e-5);
            }
        }

        #[test]
        fn finite_diff_quadratic_polynomial_exact(
            coeffs in proptest::collection::vec(-2.0f32..2.0, 3),
            x0 in -2.0f32..2.0,
            x1 in -2.0f32..2.0,
        ) {
            // f(x) = a*x0^2 + b*x1^2 + c*x0*x1 has gradient
            // (2a*x0 + c*x1, 2b*x1 + c*x0).
            let (a, b, c) = (coeffs[0] as f64, coeffs[1] as f64, coeffs[2] as f64);
            let f = move |t: &Tensor| -> Result<f64> {
                let (p, q) = (t.data()[0] as f64, t.data()[1] as f64);
                Ok(a * p * p + b * q * q + c * p * q)
            };
            let x = Tensor::from_vec(vec![x0, x1]);
            let g = finite_diff_grad(f, &x, 1e-3).unwrap();
            let want0 = 2.0 * a * x0 as f64 + c * x1 as f64;
            let want1 = 2.0 * b * x1 as f64 + c * x0 as f64;
            proptest::prop_assert!((g.data()[0] as f64 - want0).abs() < 1e-6);
            proptest::prop_assert!((g.data()[1] as f64 - want1).abs() < 1e-6);
        }
    }
}
