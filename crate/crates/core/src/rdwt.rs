//! Redundant (undecimated, à trous) discrete wavelet transform with the
//! Symlet-2 filter bank and periodic boundary extension.
//!
//! Level `j` convolves the running approximation with the analysis filters
//! upsampled by `2^(j-1)`. Coefficient planes are ordered
//! `[A_L, D_L, ..., D_1]`; with four levels at 100 Hz that is
//! `[δ*, θ*, α*, β*, γ*]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletFilterBank {
    pub dec_lo: [f64; 4],
    pub dec_hi: [f64; 4],
    pub rec_lo: [f64; 4],
    pub rec_hi: [f64; 4],
}

/// `g[k] = (-1)^k h[3 - k]`.
pub fn qmf(h: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|k| if k % 2 == 0 { h[3 - k] } else { -h[3 - k] })
}

fn reversed(h: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|k| h[3 - k])
}

/// Orthogonal Symlet-2 filters (identical to Daubechies-2).
pub fn sym2_filter_bank() -> WaveletFilterBank {
    let s3 = 3f64.sqrt();
    let d = 4.0 * std::f64::consts::SQRT_2;
    let dec_lo = [(1.0 - s3) / d, (3.0 - s3) / d, (3.0 + s3) / d, (1.0 + s3) / d];
    let dec_hi = qmf(&dec_lo);
    WaveletFilterBank {
        dec_lo,
        dec_hi,
        rec_lo: reversed(&dec_lo),
        rec_hi: reversed(&dec_hi),
    }
}

/// Circular convolution with a filter whose taps are spread `step` apart.
fn conv_atrous(x: &[f64], h: &[f64; 4], step: usize, out: &mut [f64]) {
    let w = x.len();
    let step = step % w;
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut idx = n;
        for &c in h {
            acc += c * x[idx];
            idx = if idx >= step { idx - step } else { idx + w - step };
        }
        *o = acc;
    }
}

/// Circular correlation, the adjoint of [`conv_atrous`].
fn corr_atrous(x: &[f64], h: &[f64; 4], step: usize, out: &mut [f64]) {
    let w = x.len();
    let step = step % w;
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut idx = n;
        for &c in h {
            acc += c * x[idx];
            idx += step;
            if idx >= w {
                idx -= w;
            }
        }
        *o = acc;
    }
}

fn check_len(w: usize, levels: usize) -> Result<()> {
    if levels == 0 || levels > 16 {
        return Err(Error::Config(format!("unsupported level count {levels}")));
    }
    if w == 0 || w % (1 << levels) != 0 {
        return Err(Error::Shape(format!(
            "signal length {w} is not divisible by 2^{levels}"
        )));
    }
    Ok(())
}

/// Forward transform of one signal; returns `levels + 1` planes.
pub fn forward_1d(x: &[f64], levels: usize, bank: &WaveletFilterBank) -> Result<Vec<Vec<f64>>> {
    check_len(x.len(), levels)?;
    let w = x.len();
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(levels);
    for j in 1..=levels {
        let step = 1 << (j - 1);
        let mut a = vec![0.0; w];
        let mut d = vec![0.0; w];
        conv_atrous(&approx, &bank.dec_lo, step, &mut a);
        conv_atrous(&approx, &bank.dec_hi, step, &mut d);
        details.push(d);
        approx = a;
    }
    let mut planes = Vec::with_capacity(levels + 1);
    planes.push(approx);
    planes.extend(details.into_iter().rev());
    Ok(planes)
}

fn synth_step(a: &[f64], d: &[f64], bank: &WaveletFilterBank, step: usize, scale: f64) -> Vec<f64> {
    let w = a.len();
    let mut lo = vec![0.0; w];
    let mut hi = vec![0.0; w];
    corr_atrous(a, &bank.dec_lo, step, &mut lo);
    corr_atrous(d, &bank.dec_hi, step, &mut hi);
    lo.iter().zip(&hi).map(|(l, h)| scale * (l + h)).collect()
}

fn check_planes(planes: &[Vec<f64>]) -> Result<(usize, usize)> {
    let levels = planes.len().checked_sub(1).filter(|&l| l > 0).ok_or_else(|| {
        Error::Shape(format!("need at least 2 coefficient planes, got {}", planes.len()))
    })?;
    let w = planes[0].len();
    if planes.iter().any(|p| p.len() != w) {
        return Err(Error::Shape("coefficient planes have unequal lengths".into()));
    }
    check_len(w, levels)?;
    Ok((levels, w))
}

/// Inverse transform: each level averages the two synthesis branches.
///
/// Synthesis with the time-reversed filters is carried out as correlation
/// with the analysis filters, which keeps the output aligned.
pub fn inverse_1d(planes: &[Vec<f64>], bank: &WaveletFilterBank) -> Result<Vec<f64>> {
    let (levels, _) = check_planes(planes)?;
    let mut approx = planes[0].clone();
    for j in (1..=levels).rev() {
        let detail = &planes[levels + 1 - j];
        approx = synth_step(&approx, detail, bank, 1 << (j - 1), 0.5);
    }
    Ok(approx)
}

/// Adjoint of [`forward_1d`]: maps plane gradients to a signal gradient.
pub fn forward_adjoint_1d(planes: &[Vec<f64>], bank: &WaveletFilterBank) -> Result<Vec<f64>> {
    let (levels, _) = check_planes(planes)?;
    let mut g = planes[0].clone();
    for j in (1..=levels).rev() {
        g = synth_step(&g, &planes[levels + 1 - j], bank, 1 << (j - 1), 1.0);
    }
    Ok(g)
}

/// Adjoint of [`inverse_1d`]: maps a signal gradient to plane gradients.
pub fn inverse_adjoint_1d(g: &[f64], levels: usize, bank: &WaveletFilterBank) -> Result<Vec<Vec<f64>>> {
    check_len(g.len(), levels)?;
    let w = g.len();
    let mut approx = g.to_vec();
    let mut details = Vec::with_capacity(levels);
    for j in 1..=levels {
        let step = 1 << (j - 1);
        let mut a = vec![0.0; w];
        let mut d = vec![0.0; w];
        conv_atrous(&approx, &bank.dec_lo, step, &mut a);
        conv_atrous(&approx, &bank.dec_hi, step, &mut d);
        d.iter_mut().for_each(|v| *v *= 0.5);
        a.iter_mut().for_each(|v| *v *= 0.5);
        details.push(d);
        approx = a;
    }
    let mut planes = Vec::with_capacity(levels + 1);
    planes.push(approx);
    planes.extend(details.into_iter().rev());
    Ok(planes)
}

/// Coefficient tensor, shape `batch × channels × len × (levels + 1)` with the
/// band axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct RdwtCoefficients {
    pub data: Vec<f64>,
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub levels: usize,
    pub fs: f64,
}

impl RdwtCoefficients {
    pub fn zeros(batch: usize, channels: usize, len: usize, levels: usize, fs: f64) -> Self {
        Self {
            data: vec![0.0; batch * channels * len * (levels + 1)],
            batch,
            channels,
            len,
            levels,
            fs,
        }
    }

    pub fn bands(&self) -> usize {
        self.levels + 1
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.len, self.bands()]
    }

    pub fn get(&self, b: usize, c: usize, t: usize, band: usize) -> f64 {
        self.data[((b * self.channels + c) * self.len + t) * self.bands() + band]
    }

    pub fn plane(&self, b: usize, c: usize, band: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(b, c, t, band)).collect()
    }

    pub fn set_plane(&mut self, b: usize, c: usize, band: usize, values: &[f64]) {
        let bands = self.bands();
        let base = (b * self.channels + c) * self.len;
        for (t, &v) in values.iter().enumerate() {
            self.data[(base + t) * bands + band] = v;
        }
    }

    pub fn planes(&self, b: usize, c: usize) -> Vec<Vec<f64>> {
        (0..self.bands()).map(|band| self.plane(b, c, band)).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        band_labels(self.levels)
    }

    /// CSV dump with one column per labelled plane.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut s = format!("batch,channel,t,{}\n", self.labels().join(","));
        for b in 0..self.batch {
            for c in 0..self.channels {
                for t in 0..self.len {
                    let _ = write!(s, "{b},{c},{t}");
                    for band in 0..self.bands() {
                        let _ = write!(s, ",{}", self.get(b, c, t, band));
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

/// Plane labels in storage order, e.g. `A4,D4,D3,D2,D1`.
pub fn band_labels(levels: usize) -> Vec<String> {
    std::iter::once(format!("A{levels}"))
        .chain((1..=levels).rev().map(|j| format!("D{j}")))
        .collect()
}

/// Index of the finest detail plane (D1) for a given level count.
pub fn gamma_band(levels: usize) -> usize {
    levels
}

/// Input layout: `batch × channels × len`, flattened row-major.
pub fn rdwt_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    levels: usize,
    fs: f64,
    bank: &WaveletFilterBank,
) -> Result<RdwtCoefficients> {
    if batch * channels == 0 || x.len() % (batch * channels) != 0 {
        return Err(Error::Shape(format!(
            "{} samples do not match batch {batch} × channels {channels}",
            x.len()
        )));
    }
    let len = x.len() / (batch * channels);
    check_len(len, levels)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "rdwt_forward",
            detail: "non-finite input".into(),
        });
    }
    let mut out = RdwtCoefficients::zeros(batch, channels, len, levels, fs);
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * len;
            let planes = forward_1d(&x[start..start + len], levels, bank)?;
            for (band, p) in planes.iter().enumerate() {
                out.set_plane(b, c, band, p);
            }
        }
    }
    Ok(out)
}

pub fn rdwt_inverse(coeffs: &RdwtCoefficients, bank: &WaveletFilterBank) -> Result<Vec<f64>> {
    if coeffs.data.len() != coeffs.batch * coeffs.channels * coeffs.len * coeffs.bands() {
        return Err(Error::Shape("coefficient buffer does not match its shape".into()));
    }
    let mut out = Vec::with_capacity(coeffs.batch * coeffs.channels * coeffs.len);
    for b in 0..coeffs.batch {
        for c in 0..coeffs.channels {
            out.extend(inverse_1d(&coeffs.planes(b, c), bank)?);
        }
    }
    Ok(out)
}

/// Zero the D1 (γ*) plane; every other plane is untouched.
pub fn mask_gamma(coeffs: &RdwtCoefficients) -> RdwtCoefficients {
    let mut out = coeffs.clone();
    let bands = coeffs.bands();
    let g = gamma_band(coeffs.levels);
    out.data.iter_mut().skip(g).step_by(bands).for_each(|v| *v = 0.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubBand {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl SubBand {
    /// The four bands kept after γ* masking, in plane order.
    pub const UNMASKED: [SubBand; 4] = [SubBand::Delta, SubBand::Theta, SubBand::Alpha, SubBand::Beta];

    /// Plane index for the four-level layout.
    pub fn plane(self) -> usize {
        match self {
            SubBand::Delta => 0,
            SubBand::Theta => 1,
            SubBand::Alpha => 2,
            SubBand::Beta => 3,
            SubBand::Gamma => 4,
        }
    }

    /// Frequency range in Hz at sampling rate `fs` for four levels.
    pub fn range(self, fs: f64) -> (f64, f64) {
        let nyq = fs / 2.0;
        match self {
            SubBand::Delta => (0.0, nyq / 16.0),
            SubBand::Theta => (nyq / 16.0, nyq / 8.0),
            SubBand::Alpha => (nyq / 8.0, nyq / 4.0),
            SubBand::Beta => (nyq / 4.0, nyq / 2.0),
            SubBand::Gamma => (nyq / 2.0, nyq),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn filter_bank_identities() {
        let fb = sym2_filter_bank();
        assert!((fb.dec_lo.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-12);
        assert!((fb.dec_lo.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let even_shift: f64 = (0..2).map(|k| fb.dec_lo[k] * fb.dec_lo[k + 2]).sum();
        assert!(even_shift.abs() < 1e-12);
        for k in 0..4 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(fb.dec_hi[k], sign * fb.dec_lo[3 - k]);
            assert_eq!(fb.rec_lo[k], fb.dec_lo[3 - k]);
            assert_eq!(fb.rec_hi[k], fb.dec_hi[3 - k]);
        }
        assert!(fb.dec_hi.iter().sum::<f64>().abs() < 1e-12);
        // Mirroring an even-length filter twice flips its sign.
        let twice = qmf(&qmf(&fb.dec_lo));
        for k in 0..4 {
            assert_eq!(twice[k], -fb.dec_lo[k]);
        }
    }

    #[test]
    fn shape_law() {
        let x = random(6 * 256, 1);
        let c = rdwt_forward(&x, 1, 6, 4, 100.0, &sym2_filter_bank()).unwrap();
        assert_eq!(c.shape(), [1, 6, 256, 5]);
        assert_eq!(c.labels(), ["A4", "D4", "D3", "D2", "D1"]);
    }

    #[test]
    fn length_must_divide() {
        let x = random(100, 1);
        assert!(matches!(
            rdwt_forward(&x, 1, 1, 4, 100.0, &sym2_filter_bank()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn constant_signal_gain() {
        let planes = forward_1d(&[2.5; 64], 4, &sym2_filter_bank()).unwrap();
        for v in &planes[0] {
            assert!((v - 10.0).abs() < 1e-10);
        }
        for p in &planes[1..] {
            assert!(p.iter().all(|v| v.abs() <= 1e-10));
        }
        let mut only_a = vec![vec![0.0; 64]; 5];
        only_a[0] = vec![10.0; 64];
        let back = inverse_1d(&only_a, &sym2_filter_bank()).unwrap();
        assert!(back.iter().all(|v| (v - 2.5).abs() < 1e-10));
    }

    #[test]
    fn impulse_gives_highpass_taps() {
        let fb = sym2_filter_bank();
        let mut x = vec![0.0; 16];
        x[0] = 1.0;
        let planes = forward_1d(&x, 4, &fb).unwrap();
        let d1 = &planes[4];
        let mut expect = vec![0.0; 16];
        expect[..4].copy_from_slice(&fb.dec_hi);
        assert!(max_abs_diff(d1, &expect) < 1e-15);
    }

    #[test]
    fn zero_coefficients_invert_to_zero() {
        let back = inverse_1d(&vec![vec![0.0; 32]; 5], &sym2_filter_bank()).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_reconstruction() {
        let fb = sym2_filter_bank();
        for seed in 0..50 {
            let x = random(256, seed);
            let back = inverse_1d(&forward_1d(&x, 4, &fb).unwrap(), &fb).unwrap();
            assert!(max_abs_diff(&x, &back) <= 1e-10);
        }
    }

    #[test]
    fn shift_covariance() {
        let fb = sym2_filter_bank();
        let x = random(256, 9);
        let k = 37;
        let shifted: Vec<f64> = (0..256).map(|i| x[(i + 256 - k) % 256]).collect();
        let a = forward_1d(&x, 4, &fb).unwrap();
        let b = forward_1d(&shifted, 4, &fb).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            let rolled: Vec<f64> = (0..256).map(|i| pa[(i + 256 - k) % 256]).collect();
            assert!(max_abs_diff(&rolled, pb) <= 1e-10);
        }
    }

    #[test]
    fn linearity() {
        let fb = sym2_filter_bank();
        let (x, y) = (random(128, 1), random(128, 2));
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (fx, fy, fc) = (
            forward_1d(&x, 4, &fb).unwrap(),
            forward_1d(&y, 4, &fb).unwrap(),
            forward_1d(&combo, 4, &fb).unwrap(),
        );
        for band in 0..5 {
            for t in 0..128 {
                let lin = 2.0 * fx[band][t] - 0.5 * fy[band][t];
                assert!((lin - fc[band][t]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let fb = sym2_filter_bank();
        let x = random(64, 3);
        let planes: Vec<Vec<f64>> = (0..5).map(|b| random(64, 10 + b)).collect();
        let dot = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
            a.iter().zip(b).map(|(p, q)| p.iter().zip(q).map(|(u, v)| u * v).sum::<f64>()).sum()
        };
        let vdot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(u, v)| u * v).sum() };
        let lhs = dot(&forward_1d(&x, 4, &fb).unwrap(), &planes);
        let rhs = vdot(&x, &forward_adjoint_1d(&planes, &fb).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
        let lhs = vdot(&inverse_1d(&planes, &fb).unwrap(), &x);
        let rhs = dot(&planes, &inverse_adjoint_1d(&x, 4, &fb).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn mask_zeroes_only_gamma() {
        let x = random(2 * 64, 4);
        let c = rdwt_forward(&x, 1, 2, 4, 100.0, &sym2_filter_bank()).unwrap();
        let m = mask_gamma(&c);
        for ch in 0..2 {
            assert!(m.plane(0, ch, 4).iter().all(|&v| v == 0.0));
            assert!(c.plane(0, ch, 4).iter().any(|&v| v != 0.0));
            for band in 0..4 {
                assert_eq!(m.plane(0, ch, band), c.plane(0, ch, band));
            }
        }
        assert_eq!(mask_gamma(&m), m);
    }

    fn sine(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / 100.0).sin()).collect()
    }

    #[test]
    fn masking_removes_40hz() {
        let fb = sym2_filter_bank();
        let x = sine(40.0, 256);
        let c = rdwt_forward(&x, 1, 1, 4, 100.0, &fb).unwrap();
        let y = rdwt_inverse(&mask_gamma(&c), &fb).unwrap();
        let power = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
        assert!(power(&y) <= 0.05 * power(&x), "{} vs {}", power(&y), power(&x));
    }

    #[test]
    fn band_selectivity() {
        // Energy is measured in the tight-frame normalization: level-j
        // planes carry weight 2^-j so the weighted energies sum to ‖x‖².
        let fb = sym2_filter_bank();
        for band in [SubBand::Delta, SubBand::Theta, SubBand::Alpha, SubBand::Beta, SubBand::Gamma] {
            let (lo, hi) = band.range(100.0);
            let f = (lo + hi) / 2.0;
            let x = sine(f, 4096);
            let planes = forward_1d(&x, 4, &fb).unwrap();
            let weights = [1.0 / 16.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0];
            let energies: Vec<f64> = planes
                .iter()
                .zip(weights)
                .map(|(p, w)| w * p.iter().map(|v| v * v).sum::<f64>())
                .collect();
            let total: f64 = energies.iter().sum();
            let xe: f64 = x.iter().map(|v| v * v).sum();
            assert!((total - xe).abs() < 1e-8 * xe);
            let frac = energies[band.plane()] / total;
            assert!(frac >= 0.6, "{band:?} at {f} Hz: {frac}");
        }
    }

    #[test]
    fn bands_partition_nyquist() {
        let mut edges: Vec<(f64, f64)> = [SubBand::Delta, SubBand::Theta, SubBand::Alpha, SubBand::Beta, SubBand::Gamma]
            .iter()
            .map(|b| b.range(100.0))
            .collect();
        edges.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(edges[0].0, 0.0);
        assert_eq!(edges[4].1, 50.0);
        for w in edges.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert_eq!(SubBand::Theta.range(100.0), (3.125, 6.25));
    }

    use proptest::strategy::Strategy;

    proptest::proptest! {
        #[test]
        fn inverse_undoes_forward(x in (1usize..6).prop_flat_map(|m| proptest::collection::vec(-1e3f64..1e3, 16 * m))) {
            let bank = sym2_filter_bank();
            let c = rdwt_forward(&x, 1, 1, 4, 100.0, &bank).unwrap();
            let y = rdwt_inverse(&c, &bank).unwrap();
            for (a, b) in x.iter().zip(&y) {
                proptest::prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }
}
