use crate::scalar::Scalar;

/// Row-major 2-D array. Vectors are `1 x n` rows; scalars are `1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn row(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::new(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|x| U::lit(x.f64())).collect(),
        )
    }

    /// Stack rows of equally wide tensors.
    pub fn vstack(parts: &[&Tensor<T>]) -> Tensor<T> {
        let cols = parts.first().map(|p| p.cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack width");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Tensor::new(rows, cols, data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<T> {
        Tensor::new(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }
}
