//! Trajectory agreement and latency metrics: Pearson validation, banded DTW
//! and alignment, normalized cross-correlation with its uMax lag, Welch PSD
//! summaries, and the Mann-Whitney U test.

use std::cmp::Ordering;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation. Either sequence being constant is an error.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("pearson_r: lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("pearson_r needs at least 2 samples".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Zero mean, unit (population) variance. Constant input maps to zeros.
pub fn znormalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt();
    if sd == 0.0 {
        vec![0.0; x.len()]
    } else {
        x.iter().map(|v| (v - m) / sd).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    pub distance: f64,
    /// Index pairs `(i, j)` into the first and second sequence.
    pub path: Vec<(usize, usize)>,
    pub band_radius: usize,
}

/// Sakoe-Chiba banded DTW with absolute-difference local cost and the
/// symmetric1 step pattern (each step adds the local cost once).
///
/// Backtracking prefers the diagonal step, then `(i-1, j)`, then `(i, j-1)`.
pub fn dtw(a: &[f64], b: &[f64], radius: usize) -> Result<DtwResult> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("dtw sequences"));
    }
    if n.abs_diff(m) > radius {
        return Err(Error::InfeasibleBand { radius, n, m });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "dtw",
            detail: "non-finite input".into(),
        });
    }
    let inf = f64::INFINITY;
    let mut acc = vec![inf; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(m - 1);
        for j in lo..=hi {
            let cost = (a[i] - b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { inf };
                let up = if i > 0 { acc[at(i - 1, j)] } else { inf };
                let left = if j > 0 { acc[at(i, j - 1)] } else { inf };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = cost + best;
        }
    }
    let distance = acc[at(n - 1, m - 1)];
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { inf };
        let up = if i > 0 { acc[at(i - 1, j)] } else { inf };
        let left = if j > 0 { acc[at(i, j - 1)] } else { inf };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        distance,
        path,
        band_radius: radius,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Average every feature sample mapped to a target index.
    #[default]
    Mean,
    /// Keep the last feature sample mapped to a target index.
    LastMatch,
}

/// Re-index `feature` onto the target timeline along a DTW path computed as
/// `dtw(feature, target)`.
pub fn dtw_align(
    feature: &[f64],
    target_len: usize,
    path: &[(usize, usize)],
    mode: AlignMode,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; target_len];
    let mut count = vec![0usize; target_len];
    for &(i, j) in path {
        if i >= feature.len() || j >= target_len {
            return Err(Error::Alignment(format!("path pair ({i}, {j}) out of range")));
        }
        match mode {
            AlignMode::Mean => {
                sum[j] += feature[i];
                count[j] += 1;
            }
            AlignMode::LastMatch => {
                sum[j] = feature[i];
                count[j] = 1;
            }
        }
    }
    if let Some(j) = count.iter().position(|&c| c == 0) {
        return Err(Error::Alignment(format!("path does not visit target index {j}")));
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// Median offset `i - j` along a DTW path, in samples.
pub fn path_median_offset(path: &[(usize, usize)]) -> f64 {
    let offsets: Vec<f64> = path.iter().map(|&(i, j)| i as f64 - j as f64).collect();
    median(&offsets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XcorrCurve {
    pub lags_ms: Vec<f64>,
    pub values: Vec<f64>,
    pub umax_lag_ms: f64,
    pub peak_value: f64,
}

/// Normalized cross-correlation of `a(t)` against `b(t - lag)`.
///
/// Each lag correlates only the overlapping samples, mean-removed and scaled
/// by their norms. A positive `umax_lag_ms` means `a` lags `b`.
pub fn normalized_xcorr(a: &[f64], b: &[f64], max_lag: usize, fs: f64) -> Result<XcorrCurve> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("xcorr lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::InsufficientData("xcorr needs at least 3 samples".into()));
    }
    let constant = |x: &[f64]| x.iter().all(|&v| v == x[0]);
    if constant(a) || constant(b) {
        return Err(Error::UndefinedCorrelation);
    }
    let max_lag = max_lag.min(n - 2) as isize;
    let mut lags_ms = Vec::with_capacity((2 * max_lag + 1) as usize);
    let mut values = Vec::with_capacity(lags_ms.capacity());
    for lag in -max_lag..=max_lag {
        let start = lag.max(0) as usize;
        let end = (n as isize + lag.min(0)) as usize;
        let xa = &a[start..end];
        let xb = &b[(start as isize - lag) as usize..(end as isize - lag) as usize];
        let (ma, mb) = (mean(xa), mean(xb));
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in xa.iter().zip(xb) {
            let (dx, dy) = (x - ma, y - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        let v = if saa > 0.0 && sbb > 0.0 {
            (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        lags_ms.push(lag as f64 * 1000.0 / fs);
        values.push(v);
    }
    // Ties resolve toward the smallest |lag|.
    let center = max_lag as usize;
    let mut best = center;
    for d in 1..=center {
        for idx in [center - d, center + d] {
            if values[idx] > values[best] {
                best = idx;
            }
        }
    }
    Ok(XcorrCurve {
        umax_lag_ms: lags_ms[best],
        peak_value: values[best],
        lags_ms,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WelchConfig {
    pub fs: f64,
    pub segment: usize,
    pub overlap: usize,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            fs: 100.0,
            segment: 128,
            overlap: 64,
        }
    }
}

/// Reusable Welch estimator (Hann window, per-segment mean removal,
/// one-sided density scaling).
pub struct Welch {
    cfg: WelchConfig,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Welch {
    pub fn new(cfg: WelchConfig) -> Result<Self> {
        if cfg.segment < 2 || cfg.overlap >= cfg.segment || !(cfg.fs > 0.0) {
            return Err(Error::Config(format!("invalid Welch settings {cfg:?}")));
        }
        let n = cfg.segment;
        // Periodic Hann, as is conventional for spectral estimation.
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg,
            window,
            window_power,
            fft,
        })
    }

    pub fn freqs(&self) -> Vec<f64> {
        let n = self.cfg.segment;
        (0..=n / 2).map(|k| k as f64 * self.cfg.fs / n as f64).collect()
    }

    pub fn psd(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.cfg.segment;
        if x.len() < n {
            return Err(Error::TooShort { needed: n - 1, got: x.len() });
        }
        let step = n - self.cfg.overlap;
        let bins = n / 2 + 1;
        let mut acc = vec![0.0; bins];
        let mut count = 0;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut start = 0;
        while start + n <= x.len() {
            let seg = &x[start..start + n];
            let m = mean(seg);
            for (b, (&v, &w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *b = Complex64::new((v - m) * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, a) in acc.iter_mut().enumerate() {
                *a += buf[k].norm_sqr();
            }
            count += 1;
            start += step;
        }
        let scale = 1.0 / (self.cfg.fs * self.window_power * count as f64);
        Ok(acc
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
                p * scale * one_sided
            })
            .collect())
    }
}

pub fn welch_psd(x: &[f64], cfg: &WelchConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = Welch::new(*cfg)?;
    Ok((w.freqs(), w.psd(x)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdSummary {
    pub freqs: Vec<f64>,
    pub mean_psd: Vec<f64>,
    pub min_envelope: Vec<f64>,
    pub max_envelope: Vec<f64>,
}

/// Pointwise mean and min-max envelope of per-window PSDs.
pub fn psd_summary(features: &[Vec<f64>], cfg: &WelchConfig) -> Result<PsdSummary> {
    if features.is_empty() {
        return Err(Error::EmptyInput("psd_summary needs at least one window"));
    }
    let w = Welch::new(*cfg)?;
    let freqs = w.freqs();
    let bins = freqs.len();
    let mut sum = vec![0.0; bins];
    let mut lo = vec![f64::INFINITY; bins];
    let mut hi = vec![f64::NEG_INFINITY; bins];
    for f in features {
        let p = w.psd(f)?;
        for k in 0..bins {
            sum[k] += p[k];
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let n = features.len() as f64;
    // Guard the mean inside the envelope against rounding in the sum.
    let mean_psd = (0..bins).map(|k| (sum[k] / n).clamp(lo[k], hi[k])).collect();
    Ok(PsdSummary {
        freqs,
        mean_psd,
        min_envelope: lo,
        max_envelope: hi,
    })
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UMethod {
    /// Exact when `n·m ≤ 64` or both samples have at most 10 values.
    #[default]
    Auto,
    Exact,
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UTestResult {
    /// U statistic of the first sample.
    pub u_statistic: f64,
    pub p_value: f64,
    pub median_x: f64,
    pub median_y: f64,
    pub exact: bool,
    pub significant: bool,
}

impl UTestResult {
    pub fn direction(&self) -> Ordering {
        self.median_x.total_cmp(&self.median_y)
    }

    /// e.g. `S1 > S2`.
    pub fn direction_label(&self, x_name: &str, y_name: &str) -> String {
        let op = match self.direction() {
            Ordering::Less => "<",
            Ordering::Equal => "=",
            Ordering::Greater => ">",
        };
        format!("{x_name} {op} {y_name}")
    }
}

/// Midranks (1-based) of the pooled sample, with tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Exact two-sided p for the rank sum of an `n`-subset of `ranks`.
///
/// Enumerates every subset through a count DP over doubled midranks, so ties
/// are handled exactly.
fn exact_p(ranks: &[f64], n: usize, observed_sum: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    let mut dp = vec![vec![0.0f64; max_sum + 1]; n + 1];
    dp[0][0] = 1.0;
    for &r in &doubled {
        for c in (1..=n).rev() {
            let (head, tail) = dp.split_at_mut(c);
            let prev = &head[c - 1];
            let cur = &mut tail[0];
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let dist = &dp[n];
    let total: f64 = dist.iter().sum();
    let obs = (2.0 * observed_sum).round() as usize;
    let lower: f64 = dist[..=obs].iter().sum();
    let upper: f64 = dist[obs..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

pub fn mann_whitney_u(x: &[f64], y: &[f64], alpha: f64, method: UMethod) -> Result<UTestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("Mann-Whitney samples"));
    }
    let (n, m) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_x: f64 = ranks[..n].iter().sum();
    let u = rank_sum_x - (n * (n + 1)) as f64 / 2.0;
    let exact = match method {
        UMethod::Exact => true,
        UMethod::Asymptotic => false,
        UMethod::Auto => n * m <= 64 || (n <= 10 && m <= 10),
    };
    let p_value = if exact {
        exact_p(&ranks, n, rank_sum_x)
    } else {
        let (nf, mf) = (n as f64, m as f64);
        let big_n = nf + mf;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
        let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let z = ((u - nf * mf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    Ok(UTestResult {
        u_statistic: u,
        p_value,
        median_x: median(x),
        median_y: median(y),
        exact,
        significant: p_value < alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        let x = [0.3, -1.0, 2.0, 0.5];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson_r(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation)));
        let mut r = rng(1);
        let a: Vec<f64> = (0..50).map(|_| r.random()).collect();
        let b: Vec<f64> = (0..50).map(|_| r.random()).collect();
        let scaled: Vec<f64> = a.iter().map(|v| 3.5 * v - 2.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - pearson_r(&scaled, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dtw_identity_is_zero_diagonal() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let r = dtw(&x, &x, 5).unwrap();
        assert_eq!(r.distance, 0.0);
        assert!(r.path.iter().all(|&(i, j)| i == j));
        assert_eq!(r.path.len(), 40);
    }

    #[test]
    fn dtw_hand_table() {
        let r = dtw(&[1.0, 2.0], &[2.0, 3.0], 50).unwrap();
        assert_eq!(r.distance, 2.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn dtw_band_must_admit_path() {
        assert!(matches!(
            dtw(&[0.0; 10], &[0.0; 3], 5),
            Err(Error::InfeasibleBand { .. })
        ));
        assert!(dtw(&[0.0; 10], &[0.0; 5], 5).is_ok());
    }

    #[test]
    fn dtw_path_invariants() {
        let mut r = rng(3);
        let a: Vec<f64> = (0..60).map(|_| r.random()).collect();
        let b: Vec<f64> = (0..55).map(|_| r.random()).collect();
        let res = dtw(&a, &b, 8).unwrap();
        assert_eq!(res.path[0], (0, 0));
        assert_eq!(*res.path.last().unwrap(), (59, 54));
        for w in res.path.windows(2) {
            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)));
        }
        assert!(res.path.iter().all(|&(i, j)| i.abs_diff(j) <= 8));
        let cost: f64 = res.path.iter().map(|&(i, j)| (a[i] - b[j]).abs()).sum();
        assert!((cost - res.distance).abs() < 1e-9);
    }

    #[test]
    fn dtw_symmetric_and_monotone_in_radius() {
        let mut r = rng(4);
        let a: Vec<f64> = (0..50).map(|_| r.random()).collect();
        let b: Vec<f64> = (0..50).map(|_| r.random()).collect();
        let ab = dtw(&a, &b, 6).unwrap().distance;
        let ba = dtw(&b, &a, 6).unwrap().distance;
        assert!((ab - ba).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for radius in 0..50 {
            let d = dtw(&a, &b, radius).unwrap().distance;
            assert!(d <= prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn align_identity_and_constant() {
        let f = [0.1, 0.4, 0.2];
        let path = [(0, 0), (1, 1), (2, 2)];
        assert_eq!(dtw_align(&f, 3, &path, AlignMode::Mean).unwrap(), f);
        let c = [2.0; 5];
        let res = dtw(&c, &[0.0, 1.0, 2.0, 3.0, 4.0], 3).unwrap();
        assert!(dtw_align(&c, 5, &res.path, AlignMode::Mean).unwrap().iter().all(|&v| v == 2.0));
        assert!(matches!(dtw_align(&f, 4, &path, AlignMode::Mean), Err(Error::Alignment(_))));
    }

    #[test]
    fn align_mean_and_last_match() {
        let f = [1.0, 3.0, 5.0];
        let path = [(0, 0), (1, 0), (2, 1)];
        assert_eq!(dtw_align(&f, 2, &path, AlignMode::Mean).unwrap(), [2.0, 5.0]);
        assert_eq!(dtw_align(&f, 2, &path, AlignMode::LastMatch).unwrap(), [3.0, 5.0]);
    }

    #[test]
    fn align_recovers_shifted_target() {
        let target: Vec<f64> = (0..256).map(|i| (2.0 * PI * i as f64 / 120.0).sin()).collect();
        let feature: Vec<f64> = (0..256).map(|i| (2.0 * PI * (i as f64 - 15.0) / 120.0).sin()).collect();
        let (zf, zt) = (znormalize(&feature), znormalize(&target));
        let res = dtw(&zf, &zt, 50).unwrap();
        let aligned = dtw_align(&feature, 256, &res.path, AlignMode::Mean).unwrap();
        assert!(pearson_r(&aligned, &target).unwrap() >= 0.95);
        assert!((path_median_offset(&res.path) - 15.0).abs() <= 2.0);
    }

    #[test]
    fn xcorr_examples() {
        let mut r = rng(5);
        let b: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut r)).collect();
        let same = normalized_xcorr(&b, &b, 128, 100.0).unwrap();
        assert_eq!(same.umax_lag_ms, 0.0);
        assert!((same.peak_value - 1.0).abs() < 1e-12);
        // a(t) = b(t - 20)
        let a: Vec<f64> = (0..300).map(|t| if t >= 20 { b[t - 20] } else { 0.0 }).collect();
        let c = normalized_xcorr(&a, &b, 128, 100.0).unwrap();
        assert_eq!(c.umax_lag_ms, 200.0);
        let swapped = normalized_xcorr(&b, &a, 128, 100.0).unwrap();
        assert_eq!(swapped.umax_lag_ms, -200.0);
        assert!(c.values.iter().all(|v| v.abs() <= 1.0 + 1e-9));
        assert!(matches!(
            normalized_xcorr(&[1.0; 10], &b[..10], 4, 100.0),
            Err(Error::UndefinedCorrelation)
        ));
    }

    #[test]
    fn welch_sine_peak() {
        let x: Vec<f64> = (0..256).map(|i| (2.0 * PI * 10.0 * i as f64 / 100.0).sin()).collect();
        let (f, p) = welch_psd(&x, &WelchConfig::default()).unwrap();
        let k = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((f[k] - 10.0).abs() <= 100.0 / 128.0, "peak at {}", f[k]);
        assert_eq!(*f.last().unwrap(), 50.0);
    }

    #[test]
    fn welch_parseval_scaling_and_zeros() {
        let mut r = rng(6);
        let x: Vec<f64> = (0..4096).map(|_| StandardNormal.sample(&mut r)).collect();
        let (f, p) = welch_psd(&x, &WelchConfig::default()).unwrap();
        let df = f[1] - f[0];
        let integral: f64 = p.iter().sum::<f64>() * df;
        let m = mean(&x);
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
        assert!((integral / var - 1.0).abs() <= 0.15, "{integral} vs {var}");
        let scaled: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let (_, ps) = welch_psd(&scaled, &WelchConfig::default()).unwrap();
        for (a, b) in p.iter().zip(&ps) {
            assert!((6.25 * a - b).abs() <= 1e-10 * b.max(1.0));
        }
        let (_, pz) = welch_psd(&[0.0; 256], &WelchConfig::default()).unwrap();
        assert!(pz.iter().all(|&v| v == 0.0));
        assert!(matches!(welch_psd(&[0.0; 100], &WelchConfig::default()), Err(Error::TooShort { .. })));
    }

    #[test]
    fn psd_summary_envelopes() {
        let sine = |f: f64| -> Vec<f64> { (0..256).map(|i| (2.0 * PI * f * i as f64 / 100.0).sin()).collect() };
        let cfg = WelchConfig::default();
        let one = psd_summary(&[sine(5.0)], &cfg).unwrap();
        assert_eq!(one.mean_psd, one.min_envelope);
        assert_eq!(one.mean_psd, one.max_envelope);
        let two = psd_summary(&[sine(5.0), sine(5.0)], &cfg).unwrap();
        assert_eq!(two.min_envelope, two.max_envelope);
        let mixed = psd_summary(&[sine(5.0), sine(20.0)], &cfg).unwrap();
        for k in 0..mixed.freqs.len() {
            assert!(mixed.min_envelope[k] <= mixed.mean_psd[k] && mixed.mean_psd[k] <= mixed.max_envelope[k]);
        }
        let k5 = 5 * 128 / 100 + 1;
        assert!(mixed.min_envelope[k5] < mixed.mean_psd[k5] && mixed.mean_psd[k5] < mixed.max_envelope[k5]);
        assert!(matches!(psd_summary(&[], &cfg), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mann_whitney_hand_enumeration() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0.05, UMethod::Auto).unwrap();
        assert_eq!(r.u_statistic, 0.0);
        assert!(r.exact);
        assert!((r.p_value - 0.1).abs() < 1e-12);
        assert!(!r.significant);
        assert_eq!(r.direction_label("S1", "S2"), "S1 < S2");
        let same = mann_whitney_u(&[1.0, 2.0, 2.0, 5.0], &[1.0, 2.0, 2.0, 5.0], 0.05, UMethod::Auto).unwrap();
        assert_eq!(same.p_value, 1.0);
    }

    /// Brute-force over all C(n+m, n) labelings of the pooled sample.
    fn enumerate_p(x: &[f64], y: &[f64]) -> f64 {
        let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
        let (ranks, _) = midranks(&pooled);
        let n = x.len();
        let total = pooled.len();
        let obs: f64 = ranks[..n].iter().sum();
        let (mut lower, mut upper, mut count) = (0usize, 0usize, 0usize);
        for mask in 0u32..(1 << total) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let s: f64 = (0..total).filter(|b| mask & (1 << b) != 0).map(|b| ranks[b]).sum();
            count += 1;
            if s <= obs + 1e-9 {
                lower += 1;
            }
            if s >= obs - 1e-9 {
                upper += 1;
            }
        }
        2.0 * lower.min(upper) as f64 / count as f64
    }

    #[test]
    fn exact_matches_brute_force_with_ties() {
        let mut r = rng(7);
        for _ in 0..20 {
            let n = r.random_range(2..7);
            let m = r.random_range(2..7);
            let x: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
            let y: Vec<f64> = (0..m).map(|_| r.random_range(0..5) as f64).collect();
            let exact = mann_whitney_u(&x, &y, 0.05, UMethod::Exact).unwrap().p_value;
            let brute = enumerate_p(&x, &y).min(1.0);
            assert!((exact - brute).abs() < 1e-12, "{x:?} {y:?}: {exact} vs {brute}");
        }
    }

    #[test]
    fn asymptotic_close_to_exact() {
        let mut r = rng(8);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let n = r.random_range(5..=10);
            let m = r.random_range(5..=10);
            let shift: f64 = r.random_range(0.0..1.5);
            let x: Vec<f64> = (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
            let y: Vec<f64> = (0..m).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
            let e = mann_whitney_u(&x, &y, 0.05, UMethod::Exact).unwrap().p_value;
            let a = mann_whitney_u(&x, &y, 0.05, UMethod::Asymptotic).unwrap().p_value;
            worst = worst.max((e - a).abs());
        }
        assert!(worst <= 0.02, "worst |Δp| = {worst}");
    }

    #[test]
    fn u_statistic_bounds() {
        let mut r = rng(9);
        for _ in 0..50 {
            let x: Vec<f64> = (0..r.random_range(1..30)).map(|_| r.random()).collect();
            let y: Vec<f64> = (0..r.random_range(1..30)).map(|_| r.random()).collect();
            let res = mann_whitney_u(&x, &y, 0.05, UMethod::Auto).unwrap();
            assert!(res.u_statistic >= 0.0 && res.u_statistic <= (x.len() * y.len()) as f64);
            assert!((0.0..=1.0).contains(&res.p_value));
        }
    }

    proptest::proptest! {
        #[test]
        fn dtw_is_symmetric_and_zero_on_self(
            a in proptest::collection::vec(-10f64..10.0, 1..24),
            b in proptest::collection::vec(-10f64..10.0, 1..24),
        ) {
            let r = a.len().max(b.len());
            let ab = dtw(&a, &b, r).unwrap().distance;
            let ba = dtw(&b, &a, r).unwrap().distance;
            proptest::prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
            proptest::prop_assert_eq!(dtw(&a, &a, 0).unwrap().distance, 0.0);
        }

        #[test]
        fn pearson_is_bounded_and_scale_invariant(
            pairs in proptest::collection::vec((-5f64..5.0, -5f64..5.0), 3..40),
            scale in 0.1f64..10.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(r) = pearson_r(&a, &b) {
                proptest::prop_assert!((-1.0..=1.0).contains(&r));
                let scaled: Vec<f64> = a.iter().map(|v| v * scale + 3.0).collect();
                proptest::prop_assert!((pearson_r(&scaled, &b).unwrap() - r).abs() < 1e-9);
            }
        }

        #[test]
        fn swapping_samples_flips_u(
            x in proptest::collection::vec(0u8..12, 1..8),
            y in proptest::collection::vec(0u8..12, 1..8),
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            let xy = mann_whitney_u(&x, &y, 0.05, UMethod::Exact).unwrap();
            let yx = mann_whitney_u(&y, &x, 0.05, UMethod::Exact).unwrap();
            proptest::prop_assert!((xy.u_statistic + yx.u_statistic - (x.len() * y.len()) as f64).abs() < 1e-9);
            proptest::prop_assert!((xy.p_value - yx.p_value).abs() < 1e-12);
            proptest::prop_assert!((0.0..=1.0).contains(&xy.p_value));
        }
    }
}
