//! Convolution kernels shared by the tape's forward and backward passes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding1d {
    /// Left-pad by `(k - 1) * dilation`; output `t` sees inputs `≤ t`.
    Causal,
    /// Centered kernel (odd sizes only); output length equals input length.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding1d,
}

impl Conv1dGeom {
    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Input offset read by tap `k`.
    fn offset(&self, k: usize) -> isize {
        let k = k as isize;
        let d = self.dilation as isize;
        match self.padding {
            Padding1d::Causal => (k - (self.kernel as isize - 1)) * d,
            Padding1d::Same => (k - (self.kernel as isize - 1) / 2) * d,
        }
    }

    /// Output index range for which `t + off` stays inside the input.
    fn valid(&self, off: isize) -> (usize, usize) {
        let n = self.len as isize;
        let lo = (-off).clamp(0, n) as usize;
        let hi = (n - off).clamp(0, n) as usize;
        (lo, hi.max(lo))
    }

    fn weight_index(&self, co: usize, ci_local: usize, k: usize) -> usize {
        (co * self.in_per_group() + ci_local) * self.kernel + k
    }
}

/// Row-major `C (m×n) = A (m×k) · B (k×n) + beta·C`, with B optionally
/// read transposed (`B` stored as n×k).
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents asserted here.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `[c_in·kernel, len]` patch matrix; row `ci·kernel + k` holds `x[ci][t + off(k)]`.
fn im2col(g: &Conv1dGeom, x: &[f64]) -> Vec<f64> {
    let n = g.len;
    let mut col = Vec::with_capacity(g.c_in * g.kernel * n);
    for ci in 0..g.c_in {
        let xin = &x[ci * n..(ci + 1) * n];
        for k in 0..g.kernel {
            let off = g.offset(k);
            let (lo, hi) = g.valid(off);
            col.resize(col.len() + lo, 0.0);
            col.extend_from_slice(&xin[(lo as isize + off) as usize..(hi as isize + off) as usize]);
            col.resize(col.len() + n - hi, 0.0);
        }
    }
    col
}

fn col2im(g: &Conv1dGeom, col: &[f64]) -> Vec<f64> {
    let n = g.len;
    let mut x = vec![0.0; g.c_in * n];
    for ci in 0..g.c_in {
        let xin = &mut x[ci * n..(ci + 1) * n];
        for k in 0..g.kernel {
            let off = g.offset(k);
            let (lo, hi) = g.valid(off);
            let row = (ci * g.kernel + k) * n;
            let dst = &mut xin[(lo as isize + off) as usize..(hi as isize + off) as usize];
            dst.iter_mut().zip(&col[row + lo..row + hi]).for_each(|(d, s)| *d += s);
        }
    }
    x
}

/// Below this many multiply-adds the direct loops win over im2col + GEMM.
const GEMM_MIN_WORK: usize = 1 << 16;

fn use_gemm(g: &Conv1dGeom) -> bool {
    g.groups == 1 && g.c_out * g.c_in * g.kernel * g.len >= GEMM_MIN_WORK
}

pub fn conv1d_forward(g: &Conv1dGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let n = g.len;
    let mut out = vec![0.0; g.c_out * n];
    if use_gemm(g) {
        if let Some(b) = bias {
            for co in 0..g.c_out {
                out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let col = im2col(g, x);
        gemm(g.c_out, g.c_in * g.kernel, n, w, &col, false, 1.0, &mut out);
        return out;
    }
    for co in 0..g.c_out {
        let row = &mut out[co * n..(co + 1) * n];
        if let Some(b) = bias {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        let group = co / g.out_per_group();
        for cl in 0..g.in_per_group() {
            let ci = group * g.in_per_group() + cl;
            let xin = &x[ci * n..(ci + 1) * n];
            for k in 0..g.kernel {
                let wv = w[g.weight_index(co, cl, k)];
                let off = g.offset(k);
                let (lo, hi) = g.valid(off);
                let src = &xin[(lo as isize + off) as usize..(hi as isize + off) as usize];
                for (o, &xv) in row[lo..hi].iter_mut().zip(src) {
                    *o += wv * xv;
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn conv1d_backward(g: &Conv1dGeom, x: &[f64], w: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = g.len;
    let mut gw = vec![0.0; w.len()];
    let gb: Vec<f64> = (0..g.c_out).map(|co| gout[co * n..(co + 1) * n].iter().sum()).collect();
    if use_gemm(g) {
        let ck = g.c_in * g.kernel;
        let col = im2col(g, x);
        gemm(g.c_out, n, ck, gout, &col, true, 0.0, &mut gw);
        let mut wt = vec![0.0; w.len()];
        for co in 0..g.c_out {
            for r in 0..ck {
                wt[r * g.c_out + co] = w[co * ck + r];
            }
        }
        let mut gcol = vec![0.0; ck * n];
        gemm(ck, g.c_out, n, &wt, gout, false, 0.0, &mut gcol);
        return (col2im(g, &gcol), gw, gb);
    }
    let mut gx = vec![0.0; g.c_in * n];
    for co in 0..g.c_out {
        let grow = &gout[co * n..(co + 1) * n];
        let group = co / g.out_per_group();
        for cl in 0..g.in_per_group() {
            let ci = group * g.in_per_group() + cl;
            let xin = &x[ci * n..(ci + 1) * n];
            let gxin = &mut gx[ci * n..(ci + 1) * n];
            for k in 0..g.kernel {
                let wi = g.weight_index(co, cl, k);
                let wv = w[wi];
                let off = g.offset(k);
                let (lo, hi) = g.valid(off);
                let s = (lo as isize + off) as usize;
                let e = (hi as isize + off) as usize;
                let mut acc = 0.0;
                for (gv, (&xv, gxv)) in grow[lo..hi].iter().zip(xin[s..e].iter().zip(gxin[s..e].iter_mut())) {
                    acc += gv * xv;
                    *gxv += gv * wv;
                }
                gw[wi] += acc;
            }
        }
    }
    (gx, gw, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding2d {
    Valid,
    /// Zero padding keeping the spatial size (odd kernels only).
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding2d,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        match self.padding {
            Padding2d::Valid => (self.h + 1 - self.kh, self.w + 1 - self.kw),
            Padding2d::Same => (self.h, self.w),
        }
    }

    fn pads(&self) -> (isize, isize) {
        match self.padding {
            Padding2d::Valid => (0, 0),
            Padding2d::Same => (((self.kh - 1) / 2) as isize, ((self.kw - 1) / 2) as isize),
        }
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
        // f(co, ci, ki, kj, oh, in_row, lo, hi) with `lo..hi` the output columns
        // reading input columns `lo + kj - pw ..`.
        let (oh_n, ow_n) = self.out_hw();
        let (ph, pw) = self.pads();
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let off = kj as isize - pw;
                        let lo = (-off).clamp(0, ow_n as isize) as usize;
                        let hi = (self.w as isize - off).clamp(0, ow_n as isize) as usize;
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let ih = oh as isize + ki as isize - ph;
                            if ih < 0 || ih >= self.h as isize {
                                continue;
                            }
                            f(co, ci, ki, kj, oh, ih as usize, lo, hi);
                        }
                    }
                }
            }
        }
    }

    fn weight_index(&self, co: usize, ci: usize, ki: usize, kj: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ki) * self.kw + kj
    }
}

pub fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh_n, ow_n) = g.out_hw();
    let mut out = vec![0.0; g.c_out * oh_n * ow_n];
    if let Some(b) = bias {
        for co in 0..g.c_out {
            out[co * oh_n * ow_n..(co + 1) * oh_n * ow_n].iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let pw = g.pads().1;
    g.for_each_tap(|co, ci, ki, kj, oh, ih, lo, hi| {
        let wv = w[g.weight_index(co, ci, ki, kj)];
        let orow = (co * oh_n + oh) * ow_n;
        let irow = (ci * g.h + ih) * g.w;
        let s = (irow as isize + lo as isize + kj as isize - pw) as usize;
        for (o, &xv) in out[orow + lo..orow + hi].iter_mut().zip(&x[s..s + (hi - lo)]) {
            *o += wv * xv;
        }
    });
    out
}

pub fn conv2d_backward(g: &Conv2dGeom, x: &[f64], w: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh_n, ow_n) = g.out_hw();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let plane = oh_n * ow_n;
    let gb = (0..g.c_out).map(|co| gout[co * plane..(co + 1) * plane].iter().sum()).collect();
    let pw = g.pads().1;
    g.for_each_tap(|co, ci, ki, kj, oh, ih, lo, hi| {
        let wi = g.weight_index(co, ci, ki, kj);
        let wv = w[wi];
        let orow = (co * oh_n + oh) * ow_n;
        let irow = (ci * g.h + ih) * g.w;
        let s = (irow as isize + lo as isize + kj as isize - pw) as usize;
        let mut acc = 0.0;
        let len = hi - lo;
        for t in 0..len {
            let gv = gout[orow + lo + t];
            acc += gv * x[s + t];
            gx[s + t] += gv * wv;
        }
        gw[wi] += acc;
    });
    (gx, gw, gb)
}
