//! Dense row-major tensors.

use crate::error::{Error, Result};

pub type Scalar = f64;

/// Dense row-major array of `f64` values with an explicit shape.
///
/// Every extent is positive and `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Precondition(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor extents must be positive, got {shape:?}");
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: Scalar) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a 2D tensor from equal-length rows.
    pub fn from_rows(rows: &[&[Scalar]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Precondition("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, Scalar::max)
    }

    pub fn sum(&self) -> Scalar {
        self.data.iter().sum()
    }

    /// Plain (non-recorded) matrix product of two 2D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, p) = as_matrix(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * p];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, p);
        Tensor::new(&[m, p], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }
}

pub(crate) fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

/// `out += a[m×k] · b[k×p]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where a is `[k×m]`, b is `[k×p]`, out is `[m×p]`.
pub(crate) fn matmul_tn_into(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], k: usize, m: usize, p: usize) {
    for kk in 0..k {
        let brow = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where a is `[m×p]`, b is `[k×p]`, out is `[m×k]`.
pub(crate) fn matmul_nt_into(a: &[Scalar], b: &[Scalar], out: &mut [Scalar], m: usize, p: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..k {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + j] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_length_mismatch() {
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn dot_product_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]).unwrap();
        let b = Tensor::new(&[3, 4], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let mut tn = vec![0.0; 8];
        matmul_tn_into(a.data(), b.data(), &mut tn, 3, 2, 4);
        let expect = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(tn, expect.data());

        let c = Tensor::new(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let mut nt = vec![0.0; 6];
        matmul_nt_into(c.data(), b.data(), &mut nt, 2, 4, 3);
        let expect = c.matmul(&b.transpose().unwrap()).unwrap();
        assert!(expect.data().iter().zip(&nt).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
