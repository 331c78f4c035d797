//! Minimal f64 tensor + reverse-mode autodiff.
//!
//! Everything is double precision and single-threaded: the whole crate is built
//! around exact reproducibility (equal seeds → equal parameter hashes) and
//! finite-difference gradient verification, both of which are simplest when the
//! numeric path is deterministic. Heavy lifting (GEMM) is delegated to `ndarray`;
//! the graph ops and their adjoints are hand-written.

mod adam;
mod graph;
mod nn;

pub use adam::{Adam, AdamConfig};
pub use graph::{Grads, Graph, Var};
pub use nn::{kaiming_uniform, ParamId, ParamStore};

use ndarray::{Array2, ArrayView2};

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reinterprets as a 2-D matrix without copying; `rows*cols` must match.
    pub fn as_matrix(&self, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        debug_assert_eq!(rows * cols, self.data.len());
        ArrayView2::from_shape((rows, cols), &self.data).expect("matrix view")
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// C = A(m,k) · B(k,n), fresh allocation.
pub fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    a.dot(&b)
}

/// Unrolls a [C,H,W] image into the [C*kh*kw, oh*ow] patch matrix for GEMM convs.
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let rows = c * kh * kw;
    let cols = oh * ow;
    let mut col = vec![0.0; rows * cols];
    for ci in 0..c {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let row_out = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row_out[oy * ow + ox] = x_plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

/// Adjoint of [`im2col`]: scatters the patch-matrix gradient back onto the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    dcol: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cols = oh * ow;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let dx_plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let row = &dcol[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx_plane[iy * w + ix as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_identity_kernel_round_trip() {
        // 1x1 kernel, stride 1, no pad: im2col is the identity layout.
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let (col, oh, ow) = im2col(&x, 3, 2, 2, 1, 1, 1, 0);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(col, x);
        let dx = col2im(&col, 3, 2, 2, 1, 1, 1, 0);
        assert_eq!(dx, x);
    }

    #[test]
    fn im2col_padding_and_stride_shapes() {
        let x = vec![1.0; 1 * 4 * 4];
        let (col, oh, ow) = im2col(&x, 1, 4, 4, 3, 3, 2, 1);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(col.len(), 9 * 4);
        // Corner patch has 4 in-bounds taps (pad contributes zeros).
        let p0: f64 = (0..9).map(|r| col[r * 4]).sum();
        assert_eq!(p0, 4.0);
    }
}
