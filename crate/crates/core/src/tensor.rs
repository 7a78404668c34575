//! Dense row-major `f64` arrays and the matrix-multiply kernel everything
//! else is built on.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            Contract,
            "shape {:?} needs {} elements, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for internal call sites whose sizes are
    /// established by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            Contract,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            Contract,
            "shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Contiguous slice of the outermost axis.
    pub fn outer(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        ensure!(!items.is_empty(), Contract, "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        ensure!(
            items.iter().all(|t| t.shape == inner),
            Contract,
            "stack requires equal shapes"
        );
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        let data = items.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

/// Strided matrix view descriptor: element (r, c) lives at
/// `offset + r * row_stride + c * col_stride`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Layout {
    pub fn rows(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride: row_stride as isize,
            col_stride: 1,
        }
    }

    pub fn transposed(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride: 1,
            col_stride: row_stride as isize,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset
            + (rows as isize - 1) as usize * self.row_stride as usize
            + (cols as isize - 1) as usize * self.col_stride as usize
    }
}

/// `c[m×n] = beta * c + a[m×k] · b[k×n]` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    lc: Layout,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(la.max_index(m, k) < a.len().max(1) || k == 0);
    assert!(lb.max_index(k, n) < b.len().max(1) || k == 0);
    assert!(lc.max_index(m, n) < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(la.offset),
            la.row_stride,
            la.col_stride,
            b.as_ptr().add(lb.offset),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride,
            lc.col_stride,
        );
    }
}
