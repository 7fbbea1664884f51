//! Fused single-direction LSTM layer with explicit backpropagation through
//! time. Gate columns are ordered `[input, forget, candidate, output]`.

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C (m×n) += A (m×k) · B (k×n)` with arbitrary row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64]) {
    if m * k * n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa && b.len() > (k - 1) * rsb + (n - 1) * csb && c.len() >= m * n);
    // SAFETY: the assert bounds every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmGeom {
    pub steps: usize,
    pub features: usize,
    pub units: usize,
    /// Process the sequence back to front; outputs stay time-aligned.
    pub reverse: bool,
}

/// Activations kept for the backward pass, each `steps × units` in
/// processing order.
#[derive(Debug, Clone, Default)]
pub struct LstmCache {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl LstmGeom {
    fn time(&self, step: usize) -> usize {
        if self.reverse {
            self.steps - 1 - step
        } else {
            step
        }
    }
}

/// `x: steps × features`, `w_ih: features × 4H`, `w_hh: H × 4H`, `b: 4H`.
/// Returns the hidden sequence `steps × H`.
pub fn lstm_forward(geo: &LstmGeom, x: &[f64], w_ih: &[f64], w_hh: &[f64], b: &[f64]) -> (Vec<f64>, LstmCache) {
    let (nf, h) = (geo.features, geo.units);
    let h4 = 4 * h;
    let mut out = vec![0.0; geo.steps * h];
    let mut cache = LstmCache {
        i: vec![0.0; geo.steps * h],
        f: vec![0.0; geo.steps * h],
        g: vec![0.0; geo.steps * h],
        o: vec![0.0; geo.steps * h],
        c: vec![0.0; geo.steps * h],
        tanh_c: vec![0.0; geo.steps * h],
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    // Input projections for every step at once, bias included.
    let mut zx: Vec<f64> = b.iter().copied().cycle().take(geo.steps * h4).collect();
    gemm_acc(geo.steps, nf, h4, x, (nf, 1), w_ih, (h4, 1), &mut zx);
    let mut z = vec![0.0; h4];
    for step in 0..geo.steps {
        let t = geo.time(step);
        z.copy_from_slice(&zx[t * h4..(t + 1) * h4]);
        for (hi, &hv) in h_prev.iter().enumerate() {
            if hv != 0.0 {
                for (zv, &wv) in z.iter_mut().zip(&w_hh[hi * h4..(hi + 1) * h4]) {
                    *zv += hv * wv;
                }
            }
        }
        let base = step * h;
        for u in 0..h {
            let ig = sigmoid(z[u]);
            let fg = sigmoid(z[h + u]);
            let gg = z[2 * h + u].tanh();
            let og = sigmoid(z[3 * h + u]);
            let c = fg * c_prev[u] + ig * gg;
            let tc = c.tanh();
            cache.i[base + u] = ig;
            cache.f[base + u] = fg;
            cache.g[base + u] = gg;
            cache.o[base + u] = og;
            cache.c[base + u] = c;
            cache.tanh_c[base + u] = tc;
            c_prev[u] = c;
            h_prev[u] = og * tc;
            out[t * h + u] = og * tc;
        }
    }
    (out, cache)
}

pub struct LstmGrads {
    pub x: Vec<f64>,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn lstm_backward(
    geo: &LstmGeom,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    out: &[f64],
    cache: &LstmCache,
    gout: &[f64],
) -> LstmGrads {
    let (nf, h) = (geo.features, geo.units);
    let h4 = 4 * h;
    let mut gx = vec![0.0; x.len()];
    let mut gw_ih = vec![0.0; w_ih.len()];
    let mut gw_hh = vec![0.0; w_hh.len()];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    // Gate pre-activation gradients and previous hidden states, both by time.
    let mut dz_all = vec![0.0; geo.steps * h4];
    let mut h_prev_all = vec![0.0; geo.steps * h];
    for step in (0..geo.steps).rev() {
        let t = geo.time(step);
        let base = step * h;
        let dz = &mut dz_all[t * h4..(t + 1) * h4];
        for u in 0..h {
            let dh = gout[t * h + u] + dh_next[u];
            let (ig, fg, gg, og, tc) = (
                cache.i[base + u],
                cache.f[base + u],
                cache.g[base + u],
                cache.o[base + u],
                cache.tanh_c[base + u],
            );
            let c_prev = if step > 0 { cache.c[base - h + u] } else { 0.0 };
            let d_o = dh * tc;
            let dc = dc_next[u] + dh * og * (1.0 - tc * tc);
            let di = dc * gg;
            let dg = dc * ig;
            let df = dc * c_prev;
            dc_next[u] = dc * fg;
            dz[u] = di * ig * (1.0 - ig);
            dz[h + u] = df * fg * (1.0 - fg);
            dz[2 * h + u] = dg * (1.0 - gg * gg);
            dz[3 * h + u] = d_o * og * (1.0 - og);
        }
        for hi in 0..h {
            let row = &w_hh[hi * h4..(hi + 1) * h4];
            dh_next[hi] = row.iter().zip(dz.iter()).map(|(w, d)| w * d).sum();
        }
        if step > 0 {
            let tp = geo.time(step - 1);
            h_prev_all[t * h..(t + 1) * h].copy_from_slice(&out[tp * h..(tp + 1) * h]);
        }
    }
    let n = geo.steps;
    let mut gb = vec![0.0; h4];
    for row in dz_all.chunks_exact(h4) {
        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
    }
    // gx = DZ · W_ihᵀ, gW_ih = Xᵀ · DZ, gW_hh = H_prevᵀ · DZ.
    gemm_acc(n, h4, nf, &dz_all, (h4, 1), w_ih, (1, h4), &mut gx);
    gemm_acc(nf, n, h4, x, (1, nf), &dz_all, (h4, 1), &mut gw_ih);
    gemm_acc(h, n, h4, &h_prev_all, (1, h), &dz_all, (h4, 1), &mut gw_hh);
    LstmGrads {
        x: gx,
        w_ih: gw_ih,
        w_hh: gw_hh,
        b: gb,
    }
}
