//! Dense row-major n-dimensional arrays and the handful of kernels the
//! layers need: matmul, zero padding, and im2col/col2im.
//!
//! All accumulations run in a fixed order (row-major, inner index
//! ascending) so results are bit-reproducible across runs.

use num_traits::Float;

use crate::error::{Error, Result};

/// Dense row-major tensor over `f32` (training) or `f64` (gradient checks).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d >= 1));
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d < 1) {
            return Err(Error::Dim(format!("invalid shape {shape:?}")));
        }
        if data.len() != expected {
            return Err(Error::Dim(format!(
                "shape {shape:?} wants {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.iter().any(|&d| d < 1) {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Sum of elementwise products, accumulated in storage order.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "dot on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc = acc + a * b;
        }
        Ok(acc)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (used to lift f32 networks into f64 for checks).
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// `c[i][j] = sum_t a[i][t] * b[t][j]`, accumulated with `t` ascending.
///
/// The loop nest is i-t-j so the inner loop runs over contiguous rows,
/// which vectorizes; per output element the addition order is identical
/// to the naive triple loop.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dim(format!(
            "matmul shape mismatch: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = a.data[i * k + t];
            let b_row = &b.data[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_it * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: c,
    })
}

/// Pad a `[c,h,w]` tensor with a constant border.
pub fn pad2d<T: Float>(
    x: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
    value: T,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::Dim(format!("pad2d wants [c,h,w], got {:?}", x.shape)));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (nh, nw) = (h + top + bottom, w + left + right);
    let mut out = Tensor::filled(&[c, nh, nw], value);
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * h + y) * w;
            let dst = (ch * nh + y + top) * nw + left;
            out.data[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
        }
    }
    Ok(out)
}

/// Crop the border added by [`pad2d`]; `pad2d` then `crop2d` with the same
/// amounts is the identity.
pub fn crop2d<T: Float>(
    x: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::Dim(format!("crop2d wants [c,h,w], got {:?}", x.shape)));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if h <= top + bottom || w <= left + right {
        return Err(Error::Dim(format!(
            "crop {top}+{bottom}/{left}+{right} exceeds shape {:?}",
            x.shape
        )));
    }
    let (nh, nw) = (h - top - bottom, w - left - right);
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ch in 0..c {
        for y in 0..nh {
            let src = (ch * h + y + top) * w + left;
            let dst = (ch * nh + y) * nw;
            out.data[dst..dst + nw].copy_from_slice(&x.data[src..src + nw]);
        }
    }
    Ok(out)
}

/// Output spatial extents of a convolution/pooling window sweep.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    if kh > ph || kw > pw || stride == 0 {
        return Err(Error::Dim(format!(
            "kernel {kh}x{kw} stride {stride} does not fit padded input {ph}x{pw}"
        )));
    }
    Ok(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

/// Rearrange receptive fields of `[c,h,w]` into a `[c*kh*kw, out_h*out_w]`
/// matrix. Column `j` is the j-th receptive field in row-major output
/// order; within a column the order is channel-major, then kernel row,
/// then kernel column.
pub fn im2col<T: Float>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::Dim(format!("im2col wants [c,h,w], got {:?}", x.shape)));
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (out_h, out_w) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    let cols = out_h * out_w;
    let mut out = vec![T::zero(); c * kh * kw * cols];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let row_off = row * cols;
                for oy in 0..out_h {
                    // Input row for this kernel row, minus padding offset.
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ch * h + iy as usize) * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[row_off + oy * out_w + ox] = x.data[src_row + ix as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![c * kh * kw, cols],
        data: out,
    })
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c,h,w]` image.
/// Satisfies `<im2col(x), Y> = <x, col2im(Y)>`.
pub fn col2im<T: Float>(
    cols: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (out_h, out_w) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    if cols.rank() != 2 || cols.shape[0] != c * kh * kw || cols.shape[1] != out_h * out_w {
        return Err(Error::Dim(format!(
            "col2im wants [{}, {}], got {:?}",
            c * kh * kw,
            out_h * out_w,
            cols.shape
        )));
    }
    let n = cols.shape[1];
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let row_off = row * n;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ch * h + iy as usize) * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = dst_row + ix as usize;
                        out.data[dst] = out.data[dst] + cols.data[row_off + oy * out_w + ox];
                    }
                }
            }
        }
    }
    Ok(out)
}
