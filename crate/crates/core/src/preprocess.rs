//! EEG conditioning: rational resampling, zero-phase Butterworth band-pass,
//! average re-referencing and trial-wise QC statistics.
//!
//! The fixed order is resample, then band-pass, then average reference.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::MultiChannelRecord;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResampleSpec {
    /// Design stopband attenuation in dB.
    pub attenuation_db: f64,
    /// Transition width as a fraction of the cutoff frequency.
    pub transition_frac: f64,
}

impl Default for ResampleSpec {
    fn default() -> Self {
        Self {
            attenuation_db: 65.0,
            transition_frac: 0.2,
        }
    }
}

/// Linear-phase anti-aliasing FIR for an `up/down` polyphase resampler.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyphaseFir {
    pub up: usize,
    pub down: usize,
    /// Odd-length taps at the intermediate rate, scaled so every polyphase
    /// branch sums to one.
    pub taps: Vec<f64>,
    pub beta: f64,
    /// Cutoff in cycles per intermediate-rate sample.
    pub cutoff: f64,
    pub transition: f64,
}

impl PolyphaseFir {
    pub fn design(up: usize, down: usize, spec: &ResampleSpec) -> Result<Self> {
        if up == 0 || down == 0 || up > 512 || down > 512 {
            return Err(Error::Config(format!("unsupported resampling ratio {up}/{down}")));
        }
        if !(spec.attenuation_db > 21.0) || !(spec.transition_frac > 0.0 && spec.transition_frac < 1.0) {
            return Err(Error::Config(format!("invalid resampler design {spec:?}")));
        }
        let cutoff = 0.5 / up.max(down) as f64;
        let transition = spec.transition_frac * cutoff;
        let a = spec.attenuation_db;
        let beta = if a > 50.0 {
            0.1102 * (a - 8.7)
        } else {
            0.5842 * (a - 21.0).powf(0.4) + 0.07886 * (a - 21.0)
        };
        let mut n = ((a - 7.95) / (2.285 * 2.0 * PI * transition)).ceil() as usize + 1;
        // Odd length keeps the group delay on an integer sample.
        if n % 2 == 0 {
            n += 1;
        }
        let center = (n - 1) as f64 / 2.0;
        let i0b = bessel_i0(beta);
        let mut taps: Vec<f64> = (0..n)
            .map(|k| {
                let r = (k as f64 - center) / center;
                let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
                2.0 * cutoff * sinc(2.0 * cutoff * (k as f64 - center)) * w
            })
            .collect();
        for phase in 0..up {
            let s: f64 = taps.iter().skip(phase).step_by(up).sum();
            taps.iter_mut().skip(phase).step_by(up).for_each(|t| *t /= s);
        }
        Ok(Self {
            up,
            down,
            taps,
            beta,
            cutoff,
            transition,
        })
    }

    /// Magnitude of the filter at `f` cycles per intermediate sample,
    /// normalized so the passband sits at one.
    pub fn magnitude(&self, f: f64) -> f64 {
        let acc: Complex64 = self
            .taps
            .iter()
            .enumerate()
            .map(|(k, &h)| Complex64::from_polar(h, -2.0 * PI * f * k as f64))
            .sum();
        acc.norm() / self.up as f64
    }

    pub fn output_len(&self, n: usize) -> usize {
        (n * self.up).div_ceil(self.down)
    }

    /// Resample one channel; the filter delay is compensated so the output
    /// is time-aligned with the input.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n_out = self.output_len(x.len());
        let delay = (self.taps.len() - 1) / 2;
        let up = self.up as isize;
        let n_up = (x.len() * self.up) as isize;
        (0..n_out)
            .map(|m| {
                // y[m] = sum_k h[k] u[m*down + delay - k], u nonzero on multiples of up.
                let pos = (m * self.down + delay) as isize;
                let k_min = (pos - n_up + 1).max(0);
                let k_max = pos.min(self.taps.len() as isize - 1);
                let mut acc = 0.0;
                let mut k = k_min + (pos - k_min).rem_euclid(up);
                while k <= k_max {
                    acc += self.taps[k as usize] * x[((pos - k) / up) as usize];
                    k += up;
                }
                acc
            })
            .collect()
    }
}

/// Reduce `from → to` Hz to an integer `up/down` pair.
pub fn rational_ratio(from: f64, to: f64) -> Result<(usize, usize)> {
    let integral = |v: f64| v > 0.0 && (v - v.round()).abs() < 1e-9 && v < 1e7;
    if !integral(from) || !integral(to) {
        return Err(Error::Config(format!(
            "resampling {from} Hz to {to} Hz is not a supported rational ratio"
        )));
    }
    let (a, b) = (from.round() as u64, to.round() as u64);
    let g = gcd(a, b);
    Ok(((b / g) as usize, (a / g) as usize))
}

pub fn resample_signal(x: &[f64], from: f64, to: f64, spec: &ResampleSpec) -> Result<Vec<f64>> {
    let (up, down) = rational_ratio(from, to)?;
    Ok(PolyphaseFir::design(up, down, spec)?.apply(x))
}

pub fn resample_rational(
    rec: &MultiChannelRecord,
    target_fs: f64,
    spec: &ResampleSpec,
) -> Result<MultiChannelRecord> {
    let (up, down) = rational_ratio(rec.fs, target_fs)?;
    let fir = PolyphaseFir::design(up, down, spec)?;
    let data = rec.data.iter().map(|c| fir.apply(c)).collect();
    Ok(rec.map_channels(data, target_fs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandPassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Prototype order; the band-pass has twice as many poles.
    pub order: usize,
}

impl Default for BandPassSpec {
    fn default() -> Self {
        Self {
            low_hz: 0.5,
            high_hz: 30.0,
            order: 4,
        }
    }
}

impl BandPassSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(0.0 < self.low_hz && self.low_hz < self.high_hz && self.high_hz < fs / 2.0) {
            return Err(Error::Config(format!(
                "band-pass {}-{} Hz invalid at fs {fs}",
                self.low_hz, self.high_hz
            )));
        }
        if self.order == 0 || self.order > 16 {
            return Err(Error::Config(format!("unsupported filter order {}", self.order)));
        }
        Ok(())
    }
}

/// Second-order section `[b0, b1, b2, 1, a1, a2]`.
pub type Biquad = [f64; 6];

#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Digital Butterworth band-pass via bilinear transform with pre-warped
    /// band edges.
    pub fn butterworth_bandpass(spec: &BandPassSpec, fs: f64) -> Result<Self> {
        spec.validate(fs)?;
        let n = spec.order;
        let k = 2.0 * fs;
        let wl = k * (PI * spec.low_hz / fs).tan();
        let wh = k * (PI * spec.high_hz / fs).tan();
        let w0sq = wl * wh;
        let bw = wh - wl;

        let mut poles = Vec::with_capacity(2 * n);
        for i in 0..n {
            let theta = PI * (2 * i + n + 1) as f64 / (2 * n) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let pb = p * bw;
            let disc = (pb * pb - 4.0 * w0sq).sqrt();
            for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
                poles.push((k + s) / (k - s));
            }
        }
        let mut upper: Vec<Complex64> = poles.into_iter().filter(|z| z.im > 0.0).collect();
        if upper.len() != n {
            return Err(Error::Numeric {
                op: "butterworth_bandpass",
                detail: format!("expected {n} complex pole pairs, found {}", upper.len()),
            });
        }
        upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|z| [1.0, 0.0, -1.0, 1.0, -2.0 * z.re, z.norm_sqr()])
            .collect();

        let center = 2.0 * (w0sq.sqrt() / k).atan();
        let mut filt = SosFilter { sections };
        let g = filt.response(center).norm();
        sections = std::mem::take(&mut filt.sections);
        for c in &mut sections[0][..3] {
            *c /= g;
        }
        Ok(SosFilter { sections })
    }

    /// Complex response at `omega` radians per sample.
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2))
            .product()
    }

    /// Shortest input (exclusive) accepted by forward-backward filtering.
    pub fn pad_len(&self) -> usize {
        3 * self.sections.len() * 2
    }

    /// Steady-state initial conditions for a unit step input.
    fn run(&self, x: &mut [f64], mut state: Vec<[f64; 2]>) {
        for v in x.iter_mut() {
            let mut u = *v;
            for (s, z) in self.sections.iter().zip(state.iter_mut()) {
                let y = s[0] * u + z[0];
                z[0] = s[1] * u - s[4] * y + z[1];
                z[1] = s[2] * u - s[5] * y;
                u = y;
            }
            *v = u;
        }
    }

    /// Causal single pass from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, vec![[0.0; 2]; self.sections.len()]);
        y
    }

    fn states(&self) -> usize {
        2 * self.sections.len()
    }

    fn run_flat(&self, x: &[f64], state: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, state.chunks(2).map(|c| [c[0], c[1]]).collect());
        y
    }

    fn reversed(mut v: Vec<f64>) -> Vec<f64> {
        v.reverse();
        v
    }

    /// Forward-backward filtering with zero net phase.
    ///
    /// The signal mean is removed first (the band-pass has zero gain at DC,
    /// so this only removes the step transient). Edge states follow
    /// Gustafsson: the state at the left end (start of every forward pass)
    /// and at the right end (start of every backward pass) are solved by
    /// least squares so that forward-backward and backward-forward agree.
    /// The mean of the two orders is returned, which commutes exactly with
    /// time reversal. Inputs of `pad_len()` samples or fewer are rejected.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        let n = x.len();
        if n <= pad {
            return Err(Error::TooShort { needed: pad, got: n });
        }
        let mean = x.iter().sum::<f64>() / n as f64;
        let ext: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let len = n;
        let k = self.states();
        let zero = vec![0.0; k];
        let f = |v: &[f64]| self.run_flat(v, &zero);

        let fb0 = Self::reversed(f(&Self::reversed(f(&ext))));
        let bf0 = f(&Self::reversed(f(&Self::reversed(ext.clone()))));

        // Unknowns are the state at the left end (start of every forward
        // pass) and at the right end (start of every backward pass).
        // fb = fb0 + U x0 + V x1, bf = bf0 + Q x0 + P x1.
        let mut u = nalgebra::DMatrix::<f64>::zeros(len, 2 * k);
        let mut q = nalgebra::DMatrix::<f64>::zeros(len, 2 * k);
        let mut basis = vec![0.0; k];
        for i in 0..k {
            basis.iter_mut().for_each(|v| *v = 0.0);
            basis[i] = 1.0;
            let o = self.run_flat(&vec![0.0; len], &basis);
            let fb_left = Self::reversed(f(&Self::reversed(o.clone())));
            let bf_right = f(&Self::reversed(o.clone()));
            for t in 0..len {
                u[(t, i)] = fb_left[t];
                q[(t, i)] = o[t];
                u[(t, k + i)] = o[len - 1 - t];
                q[(t, k + i)] = bf_right[t];
            }
        }
        let a = &u - &q;
        let r = nalgebra::DVector::from_iterator(len, bf0.iter().zip(&fb0).map(|(b, f)| b - f));
        let svd = a.svd(true, true);
        let cutoff = 1e-13 * svd.singular_values.max();
        let w = svd.solve(&r, cutoff).map_err(|e| Error::Numeric {
            op: "filtfilt",
            detail: e.to_string(),
        })?;
        let fb = u * &w;
        let bf = q * &w;
        let y = (0..n).map(|t| 0.5 * (fb0[t] + fb[t] + bf0[t] + bf[t])).collect();
        Ok(y)
    }

    pub fn coefficients_csv(&self) -> String {
        let mut s = String::from("section,b0,b1,b2,a0,a1,a2\n");
        for (i, c) in self.sections.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{},{},{}", c[0], c[1], c[2], c[3], c[4], c[5]);
        }
        s
    }
}

pub fn butter_bandpass_zero_phase(
    rec: &MultiChannelRecord,
    spec: &BandPassSpec,
) -> Result<MultiChannelRecord> {
    let filt = SosFilter::butterworth_bandpass(spec, rec.fs)?;
    let data = rec
        .data
        .iter()
        .map(|c| filt.filtfilt(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(rec.map_channels(data, rec.fs))
}

/// Subtract the instantaneous across-channel mean from every channel.
pub fn average_reference(rec: &MultiChannelRecord) -> Result<MultiChannelRecord> {
    let c = rec.n_channels();
    if c < 2 {
        return Err(Error::DegenerateMontage(format!(
            "average reference needs at least 2 channels, got {c}"
        )));
    }
    let mut data = rec.data.clone();
    for i in 0..rec.n_samples() {
        let mean = rec.data.iter().map(|ch| ch[i]).sum::<f64>() / c as f64;
        data.iter_mut().for_each(|ch| ch[i] -= mean);
    }
    Ok(rec.map_channels(data, rec.fs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub input_fs: f64,
    pub target_fs: f64,
    pub resample: ResampleSpec,
    pub bandpass: BandPassSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            input_fs: 250.0,
            target_fs: 100.0,
            resample: ResampleSpec::default(),
            bandpass: BandPassSpec::default(),
        }
    }
}

pub fn preprocess_record(rec: &MultiChannelRecord, cfg: &PreprocessConfig) -> Result<MultiChannelRecord> {
    if (rec.fs - cfg.input_fs).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "record at {} Hz, configured input rate {}",
            rec.fs, cfg.input_fs
        )));
    }
    let down = resample_rational(rec, cfg.target_fs, &cfg.resample)?;
    let filtered = butter_bandpass_zero_phase(&down, &cfg.bandpass)?;
    average_reference(&filtered)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRow {
    pub trial_id: String,
    pub channel: String,
    pub mean_mv: f64,
    pub std_mv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub rows: Vec<QcRow>,
    pub aggregate_mean_mv: f64,
    pub aggregate_std_mv: f64,
}

fn mean_std(x: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = x.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = x.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Per-trial, per-channel mean and (population) standard deviation plus the
/// pooled aggregate over every sample.
pub fn qc_stats(trials: &[(String, MultiChannelRecord)]) -> Result<QcReport> {
    if trials.is_empty() || trials.iter().all(|(_, r)| r.n_samples() == 0) {
        return Err(Error::EmptyInput("QC needs at least one trial"));
    }
    let mut rows = Vec::new();
    for (id, rec) in trials {
        for (name, ch) in rec.channel_names.iter().zip(&rec.data) {
            let (mean, std) = mean_std(ch.iter().copied());
            rows.push(QcRow {
                trial_id: id.clone(),
                channel: name.clone(),
                mean_mv: mean,
                std_mv: std,
            });
        }
    }
    let all = trials.iter().flat_map(|(_, r)| r.data.iter().flatten().copied());
    let (aggregate_mean_mv, aggregate_std_mv) = mean_std(all);
    Ok(QcReport {
        rows,
        aggregate_mean_mv,
        aggregate_std_mv,
    })
}

impl QcReport {
    /// `trial_id,channel,mean_mV,std_mV` rows followed by an `ALL,ALL` summary row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial_id,channel,mean_mV,std_mV\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.trial_id, r.channel, r.mean_mv, r.std_mv);
        }
        let _ = writeln!(s, "ALL,ALL,{},{}", self.aggregate_mean_mv, self.aggregate_std_mv);
        s
    }
}
