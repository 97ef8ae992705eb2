//! Dense three-mode tensors and the multilinear operations built on them.
//!
//! A [`Tensor3`] of dims `(H, W, C)` stores its entries contiguously with the
//! first mode varying fastest, so entry `(i, j, k)` lives at
//! `i + H * j + H * W * k`. This is the same order as `vectorize`, and it is the
//! order under which the kernel factor product reads `K3 ⊗ K2 ⊗ K1`.
//!
//! Each channel `k` is therefore a column-major `H × W` matrix, which lets the
//! mode-1 and mode-2 products run as ordinary matrix products per channel.

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};

/// Dense column-major real matrix.
pub type Matrix = DMatrix<f64>;

/// Tensor mode selector for mode products and unfoldings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Rows,
    Cols,
    Channels,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Rows, Mode::Cols, Mode::Channels];

    fn number(self) -> usize {
        match self {
            Mode::Rows => 1,
            Mode::Cols => 2,
            Mode::Channels => 3,
        }
    }
}

/// Dense `H × W × C` tensor, mode-1 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 {
            dims: (h, w, c),
            data: vec![0.0; h * w * c],
        }
    }

    /// Wraps `data` laid out in vectorization order.
    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (h, w, c) = dims;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!(
                "tensor dims must be positive, got {dims:?}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "tensor dims {dims:?} need {} entries, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for k in 0..c {
            for j in 0..w {
                for i in 0..h {
                    data.push(f(i, j, k));
                }
            }
        }
        Tensor3 {
            dims: (h, w, c),
            data,
        }
    }

    /// Builds a tensor whose channels are the given equally sized matrices.
    pub fn from_channels(channels: &[Matrix]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::shape("at least one channel is required"))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(h * w * channels.len());
        for (k, ch) in channels.iter().enumerate() {
            if ch.shape() != (h, w) {
                return Err(Error::shape(format!(
                    "channel {k} has shape {:?}, expected {:?}",
                    ch.shape(),
                    (h, w)
                )));
            }
            data.extend_from_slice(ch.as_slice());
        }
        Tensor3::from_vec((h, w, channels.len()), data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, mode: Mode) -> usize {
        match mode {
            Mode::Rows => self.dims.0,
            Mode::Cols => self.dims.1,
            Mode::Channels => self.dims.2,
        }
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `k` as an `H × W` view.
    pub fn channel(&self, k: usize) -> DMatrixView<'_, f64> {
        let (h, w, _) = self.dims;
        DMatrixView::from_slice(&self.data[k * h * w..(k + 1) * h * w], h, w)
    }

    /// `(H·W) × C` view whose columns are the vectorized channels.
    fn channel_columns(&self) -> DMatrixView<'_, f64> {
        let (h, w, c) = self.dims;
        DMatrixView::from_slice(&self.data, h * w, c)
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// `t ×_mode m`: replaces the size of `mode` by `m.nrows()`.
pub fn mode_product(t: &Tensor3, m: &Matrix, mode: Mode) -> Result<Tensor3> {
    if m.ncols() != t.dim(mode) {
        return Err(Error::shape(format!(
            "mode-{} product needs a matrix with {} columns, got {}x{}",
            mode.number(),
            t.dim(mode),
            m.nrows(),
            m.ncols()
        )));
    }
    let (h, w, c) = t.dims();
    match mode {
        Mode::Rows => {
            let channels: Vec<Matrix> = (0..c).map(|k| m * t.channel(k)).collect();
            Ok(stack(m.nrows(), w, channels))
        }
        Mode::Cols => {
            let channels: Vec<Matrix> = (0..c).map(|k| t.channel(k) * m.transpose()).collect();
            Ok(stack(h, m.nrows(), channels))
        }
        Mode::Channels => {
            let out = t.channel_columns() * m.transpose();
            Ok(Tensor3 {
                dims: (h, w, m.nrows()),
                data: out.as_slice().to_vec(),
            })
        }
    }
}

fn stack(h: usize, w: usize, channels: Vec<Matrix>) -> Tensor3 {
    let mut data = Vec::with_capacity(h * w * channels.len());
    let c = channels.len();
    for ch in channels {
        data.extend_from_slice(ch.as_slice());
    }
    Tensor3 {
        dims: (h, w, c),
        data,
    }
}

/// Spatial contraction `x ×₁ a ×₂ b`: every channel becomes `a · X⁽ᶜ⁾ · bᵀ`.
pub fn contract(x: &Tensor3, a: &Matrix, b: &Matrix) -> Result<Tensor3> {
    let (h, w, c) = x.dims();
    if a.ncols() != h || b.ncols() != w {
        return Err(Error::shape(format!(
            "contraction of a {h}x{w}x{c} tensor needs A with {h} columns and B with {w} columns, got A {}x{} and B {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let bt = b.transpose();
    let channels: Vec<Matrix> = (0..c).map(|k| a * x.channel(k) * &bt).collect();
    Ok(stack(a.nrows(), b.nrows(), channels))
}

pub fn vectorize(t: &Tensor3) -> DVector<f64> {
    DVector::from_column_slice(&t.data)
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &DVector<f64>, dims: (usize, usize, usize)) -> Result<Tensor3> {
    Tensor3::from_vec(dims, v.as_slice().to_vec())
}

pub fn kron(m1: &Matrix, m2: &Matrix) -> Matrix {
    m1.kronecker(m2)
}

pub fn inner(t1: &Tensor3, t2: &Tensor3) -> Result<f64> {
    if t1.dims() != t2.dims() {
        return Err(Error::shape(format!(
            "inner product of tensors with dims {:?} and {:?}",
            t1.dims(),
            t2.dims()
        )));
    }
    Ok(t1.data.iter().zip(&t2.data).map(|(a, b)| a * b).sum())
}

pub fn frobenius_norm(t: &Tensor3) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row-wise forward difference; the last column is zero.
pub fn horizontal_gradient(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    Matrix::from_fn(rows, cols, |i, j| {
        if j + 1 < cols {
            m[(i, j + 1)] - m[(i, j)]
        } else {
            0.0
        }
    })
}

/// Product of mode unfoldings `t1_(mode) · t2_(mode)ᵀ`.
///
/// Both tensors must agree on the two modes that are summed out. The result
/// has shape `t1.dim(mode) × t2.dim(mode)`.
pub fn unfold_product(t1: &Tensor3, t2: &Tensor3, mode: Mode) -> Result<Matrix> {
    let (h1, w1, c1) = t1.dims();
    let (h2, w2, c2) = t2.dims();
    let compatible = match mode {
        Mode::Rows => w1 == w2 && c1 == c2,
        Mode::Cols => h1 == h2 && c1 == c2,
        Mode::Channels => h1 == h2 && w1 == w2,
    };
    if !compatible {
        return Err(Error::shape(format!(
            "mode-{} unfolding product of {:?} and {:?}",
            mode.number(),
            t1.dims(),
            t2.dims()
        )));
    }
    Ok(match mode {
        Mode::Rows => {
            let mut acc = Matrix::zeros(h1, h2);
            for k in 0..c1 {
                acc.gemm(1.0, &t1.channel(k), &t2.channel(k).transpose(), 1.0);
            }
            acc
        }
        Mode::Cols => {
            let mut acc = Matrix::zeros(w1, w2);
            for k in 0..c1 {
                acc.gemm(1.0, &t1.channel(k).transpose(), &t2.channel(k), 1.0);
            }
            acc
        }
        Mode::Channels => t1.channel_columns().transpose() * t2.channel_columns(),
    })
}
