//! Raw numeric kernels shared by the forward and backward passes.
//!
//! Everything here works on flat row-major slices. Matrix products go through
//! `matrixmultiply::dgemm`, with transposes expressed as strides.

use crate::error::{GimError, Result};

/// Output length of a zero-padded strided convolution: `floor((L + 2p - k) / s) + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if len == 0 || kernel == 0 || stride == 0 {
        return Err(GimError::invalid(
            "conv_out_len",
            format!("need L >= 1, k >= 1, s >= 1 (got L={len}, k={kernel}, s={stride})"),
        ));
    }
    let padded = len + 2 * pad;
    if padded < kernel {
        return Err(GimError::invalid(
            "conv_out_len",
            format!("padded length {padded} is shorter than kernel {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// A strided view of a row-major matrix, possibly transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out = beta * out + a · b` with `out` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, beta: f64, out: &mut [f64]) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the views cover `rows * cols` elements addressed by their
    // strides, and `out` is a distinct, exclusively borrowed buffer of m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 1D convolution over `[batch, c_in, len]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl Conv1dGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kernel
    }
}

/// Unfolds one batch item into `[out_len, c_in * kernel]`.
fn im2col_1d(g: &Conv1dGeom, x: &[f64], cols: &mut [f64]) {
    let patch = g.patch();
    for t in 0..g.out_len {
        let row = &mut cols[t * patch..(t + 1) * patch];
        let start = (t * g.stride) as isize - g.pad as isize;
        for c in 0..g.c_in {
            let xc = &x[c * g.len..(c + 1) * g.len];
            for k in 0..g.kernel {
                let pos = start + k as isize;
                row[c * g.kernel + k] = if pos >= 0 && (pos as usize) < g.len {
                    xc[pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im_1d(g: &Conv1dGeom, cols: &[f64], dx: &mut [f64]) {
    let patch = g.patch();
    for t in 0..g.out_len {
        let row = &cols[t * patch..(t + 1) * patch];
        let start = (t * g.stride) as isize - g.pad as isize;
        for c in 0..g.c_in {
            for k in 0..g.kernel {
                let pos = start + k as isize;
                if pos >= 0 && (pos as usize) < g.len {
                    dx[c * g.len + pos as usize] += row[c * g.kernel + k];
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(g: &Conv1dGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let patch = g.patch();
    let mut out = vec![0.0; g.batch * g.c_out * g.out_len];
    let mut cols = vec![0.0; g.out_len * patch];
    let wv = MatView::new(w, g.c_out, patch);
    for n in 0..g.batch {
        im2col_1d(g, &x[n * g.c_in * g.len..(n + 1) * g.c_in * g.len], &mut cols);
        let o = &mut out[n * g.c_out * g.out_len..(n + 1) * g.c_out * g.out_len];
        gemm(wv, MatView::new(&cols, g.out_len, patch).t(), 0.0, o);
        if let Some(b) = b {
            for (co, bias) in b.iter().enumerate() {
                o[co * g.out_len..(co + 1) * g.out_len]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of a 1D convolution.
pub(crate) fn conv1d_backward(
    g: &Conv1dGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let patch = g.patch();
    let mut cols = vec![0.0; g.out_len * patch];
    let mut dcols = vec![0.0; g.out_len * patch];
    let wv = MatView::new(w, g.c_out, patch);
    for n in 0..g.batch {
        let d = &dout[n * g.c_out * g.out_len..(n + 1) * g.c_out * g.out_len];
        let dv = MatView::new(d, g.c_out, g.out_len);
        if let Some(dw) = dw.as_deref_mut() {
            im2col_1d(g, &x[n * g.c_in * g.len..(n + 1) * g.c_in * g.len], &mut cols);
            gemm(dv, MatView::new(&cols, g.out_len, patch), 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(dv.t(), wv, 0.0, &mut dcols);
            col2im_1d(g, &dcols, &mut dx[n * g.c_in * g.len..(n + 1) * g.c_in * g.len]);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += d[co * g.out_len..(co + 1) * g.out_len].iter().sum::<f64>();
            }
        }
    }
}

/// Geometry of a 2D convolution over `[batch, c_in, h, w]` (square stride and pad).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn in_size(&self) -> usize {
        self.c_in * self.h * self.w
    }
    fn out_size(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn for_each_tap_2d(g: &Conv2dGeom, mut f: impl FnMut(usize, usize, Option<usize>)) {
    let patch = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = (oy * g.out_w + ox) * patch;
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let x0 = (ox * g.stride) as isize - g.pad as isize;
            for c in 0..g.c_in {
                for ky in 0..g.kh {
                    let y = y0 + ky as isize;
                    for kx in 0..g.kw {
                        let xx = x0 + kx as isize;
                        let col = (c * g.kh + ky) * g.kw + kx;
                        let src = if y >= 0 && (y as usize) < g.h && xx >= 0 && (xx as usize) < g.w {
                            Some((c * g.h + y as usize) * g.w + xx as usize)
                        } else {
                            None
                        };
                        f(row, col, src);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let patch = g.patch();
    let pos = g.positions();
    let mut out = vec![0.0; g.batch * g.out_size()];
    let mut cols = vec![0.0; pos * patch];
    let wv = MatView::new(w, g.c_out, patch);
    for n in 0..g.batch {
        let xn = &x[n * g.in_size()..(n + 1) * g.in_size()];
        for_each_tap_2d(g, |row, col, src| {
            cols[row + col] = src.map_or(0.0, |s| xn[s]);
        });
        let o = &mut out[n * g.out_size()..(n + 1) * g.out_size()];
        gemm(wv, MatView::new(&cols, pos, patch).t(), 0.0, o);
        if let Some(b) = b {
            for (co, bias) in b.iter().enumerate() {
                o[co * pos..(co + 1) * pos].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let patch = g.patch();
    let pos = g.positions();
    let mut cols = vec![0.0; pos * patch];
    let mut dcols = vec![0.0; pos * patch];
    let wv = MatView::new(w, g.c_out, patch);
    for n in 0..g.batch {
        let d = &dout[n * g.out_size()..(n + 1) * g.out_size()];
        let dv = MatView::new(d, g.c_out, pos);
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * g.in_size()..(n + 1) * g.in_size()];
            for_each_tap_2d(g, |row, col, src| {
                cols[row + col] = src.map_or(0.0, |s| xn[s]);
            });
            gemm(dv, MatView::new(&cols, pos, patch), 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(dv.t(), wv, 0.0, &mut dcols);
            let dxn = &mut dx[n * g.in_size()..(n + 1) * g.in_size()];
            for_each_tap_2d(g, |row, col, src| {
                if let Some(s) = src {
                    dxn[s] += dcols[row + col];
                }
            });
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += d[co * pos..(co + 1) * pos].iter().sum::<f64>();
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted log-softmax along the middle axis of an `(outer, n, inner)` layout.
pub(crate) fn log_softmax(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..n).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln() + max;
            for j in 0..n {
                out[at(j)] = x[at(j)] - lse;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_len_matches_audio_rows() {
        assert_eq!(conv_out_len(20480, 10, 5, 2).unwrap(), 4095);
        assert_eq!(conv_out_len(4095, 8, 4, 2).unwrap(), 1023);
        assert_eq!(conv_out_len(1023, 4, 2, 2).unwrap(), 512);
        assert_eq!(conv_out_len(512, 4, 2, 2).unwrap(), 257);
        assert_eq!(conv_out_len(5, 1, 1, 0).unwrap(), 5);
        // the fifth row of the published table lists 128 here
        assert_eq!(conv_out_len(257, 1, 2, 1).unwrap(), 130);
    }

    #[test]
    fn conv_out_len_rejects_short_input() {
        assert!(conv_out_len(2, 5, 1, 1).is_err());
        assert!(conv_out_len(4, 3, 0, 0).is_err());
    }

    #[test]
    fn gemm_with_transposed_operand() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0]; // 2x3, used as 3x2 via .t()
        let mut out = [0.0; 4];
        gemm(MatView::new(&a, 2, 3), MatView::new(&b, 2, 3).t(), 0.0, &mut out);
        assert_eq!(out, [4.0, 4.0, 10.0, 10.0]);
    }

    #[test]
    fn log_softmax_survives_large_inputs() {
        let x = [1000.0, -1000.0, 999.0];
        let y = log_softmax(&x, 1, 3, 1);
        assert!(y.iter().all(|v| v.is_finite()));
        let total: f64 = y.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
