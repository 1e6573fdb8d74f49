use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{shape:?} ({n} elements)"), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    /// `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; 0 for scalars.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Product of trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(self.data.len(), format!("{shape:?}")));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Errors on the first NaN or infinity.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what}[{i}] = {}", self.data[i]))),
            None => Ok(()),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.f64())).collect(),
        }
    }
}

/// `C = A B` for row-major `A: m x k`, `B: k x n`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    if m * k * n == 0 {
        return c;
    }
    // SAFETY: lengths checked above, `c` is freshly allocated.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            F::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `C = A^T B` for row-major `A: k x m`, `B: k x n`.
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    if m * k * n == 0 {
        return c;
    }
    // SAFETY: A^T is A with swapped strides.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            F::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `C = A B^T` for row-major `A: m x k`, `B: n x k`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![F::zero(); m * n];
    if m * k * n == 0 {
        return c;
    }
    // SAFETY: B^T is B with swapped strides.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            F::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
        assert!(t.reshape(vec![3, 2]).is_ok());
    }

    #[test]
    fn finite_check_reports_index() {
        let t = Tensor::<f32>::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap();
        let e = t.check_finite("x").unwrap_err().to_string();
        assert!(e.contains("x[1]"));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);
        // Transposed variants against an explicit transpose.
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&a, &a, 2, 3, 3), matmul(&at, &a, 3, 2, 3));
        assert_eq!(matmul_nt(&a, &a, 2, 3, 2), matmul(&a, &at, 2, 3, 2));
    }
}
