//! Dense row-major fp64 tensors and the handful of linear-algebra routines
//! the workbench needs. Everything is plain data: no views, no laziness.

use crate::error::{Error, Result};

/// Dense row-major multidimensional array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                len
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![v; len] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("from_rows: no rows".into()));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows/cols of a 2-D tensor; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// C[i,j] = sum_t A[i,t] * B[t,j], fp64 accumulation.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree ({m}x{k} vs {k2}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (t, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[t * n..(t + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// Column means of a 2-D tensor.
    pub fn mean_rows(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        Tensor { shape: vec![n], data: out }
    }
}

/// Per-row normalization to zero mean / unit variance over the last axis,
/// then elementwise affine with `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Param(format!("layer_norm: eps must be positive, got {eps}")));
    }
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm: gain/bias length {}/{} does not match last axis {d}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    let rows = x.rows();
    for i in 0..rows {
        let row = &mut out.data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

/// Row-wise softmax over the last axis, shifted by the row max so large
/// logits cannot overflow.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = &mut out.data[i * d..(i + 1) * d];
        softmax_row(row);
    }
    out
}

pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// GELU with the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Round half away from zero. This is `f64::round`, named for the contract.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Top-k right singular vectors of `x` (assumed already centered by the
/// caller) and the projections of the rows onto them.
///
/// Computed as a cyclic Jacobi eigendecomposition of the Gram matrix X'X;
/// the returned `components` are orthonormal columns ordered by decreasing
/// singular value, and `scores = X * components`.
pub fn svd_top_k(x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || k > n.min(d) {
        return Err(Error::Param(format!("svd_top_k: k={k} out of range for {n}x{d}")));
    }
    let (eigvals, eigvecs) = gram_eigen(x);
    // eigvals descending; eigvecs column-major list of length-d vectors
    let mut comp = vec![0.0; d * k];
    for c in 0..k {
        for r in 0..d {
            comp[r * k + c] = eigvecs[c][r];
        }
    }
    let components = Tensor::new(vec![d, k], comp)?;
    let scores = x.matmul(&components)?;
    let _ = eigvals;
    Ok((components, scores))
}

/// All eigenvalues (descending, clamped at 0) and eigenvectors of X'X.
pub fn gram_eigen(x: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = x.cols();
    let xtx = x.transpose().matmul(x).expect("gram");
    let mut a: Vec<f64> = xtx.data().to_vec();
    // v starts as identity; accumulates the Jacobi rotations.
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    // Cyclic Jacobi sweeps until off-diagonal mass is negligible.
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&a)) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[j * d + j].partial_cmp(&a[i * d + i]).unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * d + i].max(0.0)).collect();
    let eigvecs: Vec<Vec<f64>> =
        order.iter().map(|&c| (0..d).map(|r| v[r * d + c]).collect()).collect();
    (eigvals, eigvecs)
}

fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use approx::assert_relative_eq;

    fn random_tensor(r: &mut SeedRng, m: usize, n: usize) -> Tensor {
        Tensor::new(vec![m, n], (0..m * n).map(|_| r.normal()).collect()).unwrap()
    }

    /// Independent matmul oracle: j-major triple loop.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for j in 0..n {
            for i in 0..m {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.at(i, t) * b.at(t, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = SeedRng::new(42);
        for &(m, k, n) in &[(8, 8, 8), (5, 13, 7), (32, 32, 32)] {
            let a = random_tensor(&mut r, m, k);
            let b = random_tensor(&mut r, k, n);
            let c = a.matmul(&b).unwrap();
            let o = matmul_oracle(&a, &b);
            for (x, y) in c.data().iter().zip(o.data()) {
                assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-300);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0, 5.0]]).unwrap();
        let g = Tensor::filled(vec![4], 1.0);
        let b = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for v in y.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let g = Tensor::filled(vec![2], 1.0);
        let b = Tensor::zeros(vec![2]);
        // eps = 0 is rejected by contract, so use a vanishing eps instead.
        let y = layer_norm(&x, &g, &b, 1e-300).unwrap();
        assert_relative_eq!(y.data()[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(y.data()[1], -1.0, max_relative = 1e-12);
    }

    #[test]
    fn layer_norm_eps_contract() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let g = Tensor::filled(vec![2], 1.0);
        let b = Tensor::zeros(vec![2]);
        assert!(matches!(layer_norm(&x, &g, &b, 0.0), Err(Error::Param(_))));
        assert!(matches!(layer_norm(&x, &g, &b, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn layer_norm_matches_formula_oracle() {
        let mut r = SeedRng::new(3);
        let x = random_tensor(&mut r, 4, 16);
        let g = Tensor::filled(vec![16], 1.0);
        let b = Tensor::zeros(vec![16]);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        for i in 0..4 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "row var {var}");
        }
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let y = softmax(&x);
        assert_eq!(y.data(), &[0.5, 0.5]);

        let big = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let y = softmax(&big);
        assert!(y.all_finite());
        assert!(y.data()[0] > 1.0 - 1e-12);
        assert!(y.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_frozen_values() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let y = softmax(&x);
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, e) in y.data().iter().zip(expect.iter()) {
            assert_relative_eq!(a, e, max_relative = 1e-12);
        }
    }

    #[test]
    fn svd_axis_aligned_points() {
        // Points (+-1, 0), (0, +-0.5): principal axes are the coordinate axes.
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 0.5],
            vec![0.0, -0.5],
        ])
        .unwrap();
        let (c, s) = svd_top_k(&x, 2).unwrap();
        // First component is +-e1, second +-e2.
        assert!(c.at(0, 0).abs() > 1.0 - 1e-9 && c.at(1, 0).abs() < 1e-9);
        assert!(c.at(1, 1).abs() > 1.0 - 1e-9 && c.at(0, 1).abs() < 1e-9);
        assert!((s.at(0, 0).abs() - 1.0).abs() < 1e-9);
        assert!(s.at(0, 1).abs() < 1e-9);
    }

    #[test]
    fn svd_rank_one_reconstruction() {
        let base = [1.0, -2.0, 0.5, 3.0];
        let rows: Vec<Vec<f64>> =
            (1..=5).map(|i| base.iter().map(|b| b * i as f64).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (c, s) = svd_top_k(&x, 1).unwrap();
        let recon = s.matmul(&c.transpose()).unwrap();
        for (a, b) in recon.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn svd_components_orthonormal() {
        let mut r = SeedRng::new(11);
        let x = random_tensor(&mut r, 20, 5);
        let (c, _) = svd_top_k(&x, 3).unwrap();
        let gram = c.transpose().matmul(&c).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn svd_k_out_of_range() {
        let x = Tensor::zeros(vec![3, 2]);
        assert!(matches!(svd_top_k(&x, 3), Err(Error::Param(_))));
        assert!(matches!(svd_top_k(&x, 0), Err(Error::Param(_))));
    }

    #[test]
    fn round_half_away_from_zero() {
        assert_eq!(round_half_away(1.75), 2.0);
        assert_eq!(round_half_away(3.5), 4.0);
        assert_eq!(round_half_away(-3.5), -4.0);
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-0.5), -1.0);
        assert_eq!(round_half_away(0.3), 0.0);
    }
}
