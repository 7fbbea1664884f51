//! The RDWT-driven trajectory decoder (M0) and its ablations (M1, M2).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{AdamConfig, AdamState, Padding1d, Padding2d, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::pearson_r;
use crate::rdwt::{sym2_filter_bank, RdwtCoefficients, WaveletFilterBank};
use crate::signal::WindowPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// RDWT, γ* mask, wavelet-domain filtering, inverse RDWT.
    M0,
    /// RDWT, γ* mask, inverse RDWT.
    M1,
    /// No wavelet stages.
    M2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::M0, Variant::M1, Variant::M2];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M0" | "m0" => Ok(Variant::M0),
            "M1" | "m1" => Ok(Variant::M1),
            "M2" | "m2" => Ok(Variant::M2),
            _ => Err(Error::Config(format!("unknown model variant {s:?}"))),
        }
    }
}

/// Wavelet-domain kernel size per unmasked sub-band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelTable {
    pub delta: usize,
    pub theta: usize,
    pub alpha: usize,
    pub beta: usize,
}

impl Default for KernelTable {
    fn default() -> Self {
        Self {
            delta: 63,
            theta: 15,
            alpha: 7,
            beta: 3,
        }
    }
}

impl KernelTable {
    /// Sizes in plane order `[A4, D4, D3, D2]`.
    pub fn sizes(&self) -> [usize; 4] {
        [self.delta, self.theta, self.alpha, self.beta]
    }

    /// `f_eff ≈ fs / K`.
    pub fn effective_hz(k: usize, fs: f64) -> f64 {
        fs / k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub dilation: usize,
}

fn one() -> usize {
    1
}

pub fn default_conv_stack() -> Vec<ConvLayer> {
    vec![
        ConvLayer {
            filters: 64,
            kernel: 64,
            dilation: 1,
        },
        ConvLayer {
            filters: 32,
            kernel: 32,
            dilation: 1,
        },
        ConvLayer {
            filters: 16,
            kernel: 16,
            dilation: 1,
        },
        ConvLayer {
            filters: 8,
            kernel: 3,
            dilation: 2,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelInit {
    #[default]
    Glorot,
    /// Unit impulse at the kernel center.
    Impulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub window: usize,
    pub fs: f64,
    pub levels: usize,
    pub kernel_table: KernelTable,
    /// One kernel shared by both passes of each plane (exact zero phase).
    pub tied_wavelet_kernels: bool,
    /// One kernel per band for all channels instead of one per channel.
    pub shared_wavelet_kernels: bool,
    pub temporal_kernel: usize,
    pub temporal_init: KernelInit,
    /// Run the temporal kernel forward and backward (tied), so the feature
    /// tap keeps the timing of the input.
    pub temporal_zero_phase: bool,
    pub conv_stack: Vec<ConvLayer>,
    pub bilstm_units: usize,
    pub lstm_units: usize,
    pub output_len: usize,
    pub forget_bias: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::M0,
            channels: 6,
            window: 256,
            fs: 100.0,
            levels: 4,
            kernel_table: KernelTable::default(),
            tied_wavelet_kernels: true,
            shared_wavelet_kernels: false,
            temporal_kernel: 63,
            temporal_init: KernelInit::Glorot,
            temporal_zero_phase: false,
            conv_stack: default_conv_stack(),
            bilstm_units: 32,
            lstm_units: 16,
            output_len: 256,
            forget_bias: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for k in self.kernel_table.sizes() {
            if k % 2 == 0 {
                return Err(Error::Config(format!("wavelet-domain kernel size {k} is even (center undefined)")));
            }
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel {} must be odd", self.temporal_kernel)));
        }
        if self.levels != 4 {
            return Err(Error::Config(format!("the band layout needs 4 RDWT levels, got {}", self.levels)));
        }
        if self.channels == 0 || self.window == 0 || self.output_len == 0 {
            return Err(Error::Config("channels, window and output_len must be positive".into()));
        }
        if self.conv_stack.is_empty() || self.conv_stack.iter().any(|l| l.filters == 0 || l.kernel == 0 || l.dilation == 0) {
            return Err(Error::Config("conv stack layers need positive filters, kernel and dilation".into()));
        }
        if self.bilstm_units == 0 || self.lstm_units == 0 {
            return Err(Error::Config("LSTM sizes must be positive".into()));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter block in creation order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        if self.variant == Variant::M0 {
            let rows = if self.shared_wavelet_kernels { 1 } else { self.channels };
            for (band, k) in ["delta", "theta", "alpha", "beta"].iter().zip(self.kernel_table.sizes()) {
                v.push((format!("wavelet.{band}"), vec![rows, 1, k]));
                if !self.tied_wavelet_kernels {
                    v.push((format!("wavelet.{band}.second"), vec![rows, 1, k]));
                }
            }
        }
        v.push(("temporal.w".into(), vec![1, 1, 1, self.temporal_kernel]));
        v.push(("temporal.b".into(), vec![1]));
        v.push(("spatial.w".into(), vec![1, 1, self.channels, 1]));
        v.push(("spatial.b".into(), vec![1]));
        let mut c_in = 1;
        for (i, l) in self.conv_stack.iter().enumerate() {
            v.push((format!("conv{i}.w"), vec![l.filters, c_in, l.kernel]));
            v.push((format!("conv{i}.b"), vec![l.filters]));
            c_in = l.filters;
        }
        let h = self.bilstm_units;
        for dir in ["fwd", "bwd"] {
            v.push((format!("bilstm.{dir}.w_ih"), vec![c_in, 4 * h]));
            v.push((format!("bilstm.{dir}.w_hh"), vec![h, 4 * h]));
            v.push((format!("bilstm.{dir}.b"), vec![4 * h]));
        }
        let u = self.lstm_units;
        v.push(("lstm.w_ih".into(), vec![2 * h, 4 * u]));
        v.push(("lstm.w_hh".into(), vec![u, 4 * u]));
        v.push(("lstm.b".into(), vec![4 * u]));
        v.push(("dense.w".into(), vec![u, self.output_len]));
        v.push(("dense.b".into(), vec![self.output_len]));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    bank: Arc<WaveletFilterBank>,
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn impulse(rows: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; rows * k];
    for r in 0..rows {
        v[r * k + k / 2] = 1.0;
    }
    v
}

impl ModelState {
    /// Seeded initialization. Every block draws from its own stream keyed by
    /// name, so M0, M1 and M2 built from one seed share all common blocks.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(name_stream(&name));
                let data = if name.starts_with("wavelet.") {
                    impulse(shape[0], shape[2])
                } else if name.ends_with(".b") {
                    if name.starts_with("bilstm") || name.starts_with("lstm") {
                        let h = shape[0] / 4;
                        let mut b = vec![0.0; shape[0]];
                        b[h..2 * h].iter_mut().for_each(|v| *v = config.forget_bias);
                        b
                    } else {
                        vec![0.0; n]
                    }
                } else if name == "temporal.w" && config.temporal_init == KernelInit::Impulse {
                    impulse(1, shape[3])
                } else {
                    let (fan_in, fan_out) = match shape.len() {
                        2 => (shape[0], shape[1]),
                        3 => (shape[1] * shape[2], shape[0] * shape[2]),
                        _ => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
                    };
                    glorot(&mut rng, n, fan_in, fan_out)
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            bank: Arc::new(sym2_filter_bank()),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(&self.config).unwrap_or_default();
        let mut c = Checkpoint::new(meta);
        for p in &self.params {
            c.push(&p.name, &p.shape, &p.data);
        }
        c
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Config(format!("checkpoint model config: {e}")))?;
        let mut state = Self::init(&config)?;
        for p in &mut state.params {
            p.data = ck.get(&p.name, &p.shape)?;
        }
        Ok(state)
    }
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Vars produced by one forward pass.
pub struct Forward {
    pub params: Vec<Var>,
    pub feature: Var,
    pub output: Option<Var>,
}

/// `y = reverse(conv(reverse(conv(x, k1)), k2))` per row of `x: [C, T]`.
pub fn zero_phase_conv(tape: &mut Tape, x: Var, k1: Var, k2: Var) -> Result<Var> {
    let c = tape.shape(x)[0];
    let y1 = tape.conv1d(x, k1, None, 1, c, Padding1d::Same)?;
    let r = tape.time_reverse(y1)?;
    let y2 = tape.conv1d(r, k2, None, 1, c, Padding1d::Same)?;
    tape.time_reverse(y2)
}

fn expand_rows(tape: &mut Tape, k: Var, rows: usize) -> Result<Var> {
    if tape.shape(k)[0] == rows {
        return Ok(k);
    }
    let copies = vec![k; rows];
    tape.concat(&copies, 0)
}

/// Records the model on `tape` for one window `eeg: [C, T]` (channel-major).
/// With `feature_only` the graph stops at the spatial-filter tap.
pub fn build_forward(tape: &mut Tape, state: &ModelState, eeg: &[f64], feature_only: bool) -> Result<Forward> {
    let cfg = &state.config;
    let (c, t) = (cfg.channels, cfg.window);
    if eeg.len() != c * t {
        return Err(Error::Shape(format!("model expects {c}×{t} EEG, got {} values", eeg.len())));
    }
    let params = state
        .params
        .iter()
        .map(|p| tape.variable(p.data.clone(), &p.shape))
        .collect::<Result<Vec<_>>>()?;
    let (feature, output) = build_graph(tape, state, &params, eeg, feature_only)?;
    Ok(Forward { params, feature, output })
}

/// As [`build_forward`] but over caller-supplied parameter vars, one per
/// entry of `state.params`. Returns the feature tap and the output.
pub fn build_graph(tape: &mut Tape, state: &ModelState, params: &[Var], eeg: &[f64], feature_only: bool) -> Result<(Var, Option<Var>)> {
    let cfg = &state.config;
    let (c, t) = (cfg.channels, cfg.window);
    if eeg.len() != c * t || params.len() != state.params.len() {
        return Err(Error::Shape(format!("model expects {c}×{t} EEG and {} parameter blocks", state.params.len())));
    }
    let by_name = |name: &str| -> Var {
        let i = state.params.iter().position(|p| p.name == name).expect("layout name");
        params[i]
    };

    let x = tape.constant(eeg.to_vec(), &[c, t])?;
    let mut h = tape.channel_norm(x)?;
    if cfg.variant != Variant::M2 {
        let levels = cfg.levels;
        let coeffs = tape.rdwt(h, levels, &state.bank)?;
        let mut mask = vec![1.0; c * (levels + 1) * t];
        for ch in 0..c {
            let gamma = (ch * (levels + 1) + levels) * t;
            mask[gamma..gamma + t].iter_mut().for_each(|v| *v = 0.0);
        }
        let mask = tape.constant(mask, &[c, levels + 1, t])?;
        let masked = tape.mul(coeffs, mask)?;
        let filtered = if cfg.variant == Variant::M0 {
            let mut planes = Vec::with_capacity(levels + 1);
            for (b, band) in ["delta", "theta", "alpha", "beta"].iter().enumerate() {
                let p = tape.slice(masked, 1, b, 1)?;
                let p = tape.reshape(p, &[c, t])?;
                let k1 = by_name(&format!("wavelet.{band}"));
                let k1 = expand_rows(tape, k1, c)?;
                let k2 = if cfg.tied_wavelet_kernels {
                    k1
                } else {
                    let k = by_name(&format!("wavelet.{band}.second"));
                    expand_rows(tape, k, c)?
                };
                let y = zero_phase_conv(tape, p, k1, k2)?;
                planes.push(tape.reshape(y, &[c, 1, t])?);
            }
            planes.push(tape.slice(masked, 1, levels, 1)?);
            tape.concat(&planes, 1)?
        } else {
            masked
        };
        h = tape.irdwt(filtered, &state.bank)?;
    }
    let tc = if cfg.temporal_zero_phase {
        let k = tape.reshape(by_name("temporal.w"), &[1, 1, cfg.temporal_kernel])?;
        let k = expand_rows(tape, k, c)?;
        let b = expand_rows(tape, by_name("temporal.b"), c)?;
        let y1 = tape.conv1d(h, k, None, 1, c, Padding1d::Same)?;
        let r = tape.time_reverse(y1)?;
        let y2 = tape.conv1d(r, k, Some(b), 1, c, Padding1d::Same)?;
        let y = tape.time_reverse(y2)?;
        tape.reshape(y, &[1, c, t])?
    } else {
        let img = tape.reshape(h, &[1, c, t])?;
        tape.conv2d(img, by_name("temporal.w"), Some(by_name("temporal.b")), Padding2d::Same)?
    };
    let tc = tape.tanh(tc)?;
    let sp = tape.conv2d(tc, by_name("spatial.w"), Some(by_name("spatial.b")), Padding2d::Valid)?;
    let sp = tape.tanh(sp)?;
    let feature = tape.reshape(sp, &[1, t])?;
    if feature_only {
        return Ok((feature, None));
    }

    let mut z = feature;
    for (i, l) in cfg.conv_stack.iter().enumerate() {
        let y = tape.conv1d(z, by_name(&format!("conv{i}.w")), Some(by_name(&format!("conv{i}.b"))), l.dilation, 1, Padding1d::Causal)?;
        z = tape.elu(y)?;
    }
    let seq = tape.transpose(z)?;
    let fwd = tape.lstm(seq, by_name("bilstm.fwd.w_ih"), by_name("bilstm.fwd.w_hh"), by_name("bilstm.fwd.b"), false)?;
    let bwd = tape.lstm(seq, by_name("bilstm.bwd.w_ih"), by_name("bilstm.bwd.w_hh"), by_name("bilstm.bwd.b"), true)?;
    let bi = tape.concat(&[fwd, bwd], 1)?;
    let uni = tape.lstm(bi, by_name("lstm.w_ih"), by_name("lstm.w_hh"), by_name("lstm.b"), false)?;
    let last = tape.slice(uni, 0, t - 1, 1)?;
    let dense = tape.matmul(last, by_name("dense.w"))?;
    let bias = tape.reshape(by_name("dense.b"), &[1, cfg.output_len])?;
    let dense = tape.add(dense, bias)?;
    let out = tape.relu(dense)?;
    let out = tape.reshape(out, &[cfg.output_len])?;
    Ok((feature, Some(out)))
}

/// Predicted trajectory for one window.
pub fn forward(state: &ModelState, eeg: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = build_forward(&mut tape, state, eeg, false)?;
    Ok(tape.value(f.output.expect("full forward")).to_vec())
}

/// The spatial-filter tanh output, one sample per input sample.
pub fn extract_feature(state: &ModelState, eeg: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = build_forward(&mut tape, state, eeg, true)?;
    Ok(tape.value(f.feature).to_vec())
}

/// Impulse response of the tied forward-backward filter with kernel `k`
/// on a length-`n` line (impulse at the center).
pub fn effective_impulse_response(k: &[f64], n: usize) -> Result<Vec<f64>> {
    if k.len() % 2 == 0 {
        return Err(Error::Config(format!("kernel size {} is even (center undefined)", k.len())));
    }
    let mut tape = Tape::new();
    let mut x = vec![0.0; n];
    x[n / 2] = 1.0;
    let xv = tape.constant(x, &[1, n])?;
    let kv = tape.constant(k.to_vec(), &[1, 1, k.len()])?;
    let y = zero_phase_conv(&mut tape, xv, kv, kv)?;
    Ok(tape.value(y).to_vec())
}

fn conv_same(x: &[f64], k: &[f64]) -> Vec<f64> {
    let half = (k.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|t| {
            k.iter()
                .enumerate()
                .filter_map(|(j, w)| x.get(usize::try_from(t + j as isize - half).ok()?).map(|v| w * v))
                .sum()
        })
        .collect()
}

/// Tied forward-backward filtering of every non-γ plane outside the tape.
///
/// `kernels[c][band]` covers the `levels` unmasked planes of channel `c`; the
/// γ plane is copied through.
pub fn wavelet_domain_filter(coeffs: &RdwtCoefficients, kernels: &[Vec<Vec<f64>>]) -> Result<RdwtCoefficients> {
    let bands = coeffs.levels;
    if kernels.len() != coeffs.channels || kernels.iter().any(|k| k.len() != bands) {
        return Err(Error::Shape(format!(
            "expected {} channels x {bands} kernels, got {} channels",
            coeffs.channels,
            kernels.len()
        )));
    }
    if let Some(k) = kernels.iter().flatten().find(|k| k.len() % 2 == 0) {
        return Err(Error::Config(format!("kernel size {} is even (center undefined)", k.len())));
    }
    let mut out = coeffs.clone();
    for b in 0..coeffs.batch {
        for (c, ks) in kernels.iter().enumerate() {
            for (band, k) in ks.iter().enumerate() {
                let mut y = conv_same(&coeffs.plane(b, c, band), k);
                y.reverse();
                let mut y = conv_same(&y, k);
                y.reverse();
                out.set_plane(b, c, band, &y);
            }
        }
    }
    Ok(out)
}

/// MSE loss of one window plus parameter gradients.
pub fn loss_and_grads(state: &ModelState, w: &WindowPair) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let f = build_forward(&mut tape, state, &w.eeg, false)?;
    let out = f.output.expect("full forward");
    if w.target.len() != state.config.output_len {
        return Err(Error::Shape(format!("target has {} samples, model emits {}", w.target.len(), state.config.output_len)));
    }
    let target = tape.constant(w.target.clone(), &[state.config.output_len])?;
    let loss = tape.mse_loss(out, target)?;
    let mut g = tape.backward(loss)?;
    let grads = f
        .params
        .iter()
        .zip(&state.params)
        .map(|(&v, p)| g.take(v, p.data.len()))
        .collect();
    Ok((tape.scalar(loss), grads))
}

/// Chronological 80/20 split.
pub fn split_dataset(windows: &[WindowPair]) -> Result<(Vec<WindowPair>, Vec<WindowPair>)> {
    if windows.len() < 5 {
        return Err(Error::InsufficientData(format!("{} windows; at least 5 are needed to split", windows.len())));
    }
    let key = |w: &WindowPair| (w.key.session_id.clone(), w.key.trial_id.clone(), w.window_index);
    if windows.windows(2).any(|p| key(&p[0]) > key(&p[1])) {
        return Err(Error::Ordering("windows must be ordered by (session, trial, window index)".into()));
    }
    let n_train = windows.len() * 4 / 5;
    Ok((windows[..n_train].to_vec(), windows[n_train..].to_vec()))
}

/// `r(pred, target) ≥ τ` (or `>` when strict); undefined r is invalid.
pub fn validity_gate(pred: &[f64], target: &[f64], tau: f64, strict: bool) -> bool {
    match pearson_r(pred, target) {
        Ok(r) if strict => r > tau,
        Ok(r) => r >= tau,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub shuffle: bool,
    pub seed: u64,
    /// Start the output bias at the per-sample training-target mean, so no
    /// ReLU output begins (and stays) dead.
    pub init_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            patience: 50,
            batch: 64,
            adam: AdamConfig::default(),
            shuffle: true,
            seed: 0,
            init_output_bias: true,
        }
    }
}

/// Sets `dense.b` to the mean training target at each output position.
pub fn init_output_bias(state: &mut ModelState, train_set: &[WindowPair]) -> Result<()> {
    let len = state.config.output_len;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("output bias targets"));
    }
    if let Some(w) = train_set.iter().find(|w| w.target.len() != len) {
        return Err(Error::Shape(format!("target of {} samples for output length {len}", w.target.len())));
    }
    let mut mean = vec![0.0; len];
    for w in train_set {
        mean.iter_mut().zip(&w.target).for_each(|(m, t)| *m += t);
    }
    let n = train_set.len() as f64;
    let bias = state.params.iter_mut().find(|p| p.name == "dense.b").expect("layout name");
    bias.data = mean.into_iter().map(|m| m / n).collect();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_r_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stop_reason: StopReason,
    /// NaN marks windows whose r is undefined.
    pub val_r: Vec<f64>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse,val_r_mean\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_mse, e.val_mse, e.val_r_mean));
        }
        s
    }
}

/// Mean loss and summed gradients over `batch`, reduced in index order.
fn batch_grads(state: &ModelState, batch: &[&WindowPair]) -> Result<(f64, Vec<Vec<f64>>)> {
    let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch.par_iter().map(|w| loss_and_grads(state, w)).collect();
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = state.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
    for r in results {
        let (l, g) = r?;
        total += l;
        for (a, gi) in acc.iter_mut().zip(&g) {
            a.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    let k = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|v| *v *= k));
    Ok((total * k, acc))
}

pub fn predict_all(state: &ModelState, windows: &[WindowPair]) -> Result<Vec<Vec<f64>>> {
    windows.par_iter().map(|w| forward(state, &w.eeg)).collect()
}

fn evaluate(state: &ModelState, val: &[WindowPair]) -> Result<(f64, Vec<f64>)> {
    let preds = predict_all(state, val)?;
    let mut mse = 0.0;
    let mut rs = Vec::with_capacity(val.len());
    for (p, w) in preds.iter().zip(val) {
        mse += p.iter().zip(&w.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        rs.push(pearson_r(p, &w.target).unwrap_or(f64::NAN));
    }
    Ok((mse / val.len() as f64, rs))
}

fn finite_mean(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        f64::NAN
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Adam on batch-mean MSE with early stopping on validation MSE; the best
/// epoch's weights are restored before returning.
pub fn train(state: &mut ModelState, train_set: &[WindowPair], val: &[WindowPair], cfg: &TrainConfig) -> Result<TrainReport> {
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("training needs non-empty train and validation splits".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if cfg.init_output_bias {
        init_output_bias(state, train_set)?;
    }
    let started = Instant::now();
    let sizes: Vec<usize> = state.params.iter().map(|p| p.data.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::INFINITY, 0usize, state.params.clone());
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&WindowPair> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_grads(state, &batch).map_err(|e| diverged(e, &epochs))?;
            sum += loss * batch.len() as f64;
            let mut bufs: Vec<Vec<f64>> = state.params.iter_mut().map(|p| std::mem::take(&mut p.data)).collect();
            adam.step(&mut bufs, &grads);
            for (p, b) in state.params.iter_mut().zip(bufs) {
                p.data = b;
            }
        }
        let (val_mse, rs) = evaluate(state, val).map_err(|e| diverged(e, &epochs))?;
        let train_mse = sum / train_set.len() as f64;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(diverged(
                Error::Numeric {
                    op: "train",
                    detail: "non-finite loss".into(),
                },
                &epochs,
            ));
        }
        epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            val_r_mean: finite_mean(&rs),
        });
        log::debug!("epoch {epoch}: train {train_mse:.5} val {val_mse:.5}");
        if val_mse < best.0 {
            best = (val_mse, epoch, state.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    state.params = best.2;
    let (_, val_r) = evaluate(state, val)?;
    Ok(TrainReport {
        epochs,
        best_epoch: best.1,
        best_val_mse: best.0,
        stop_reason: stop,
        val_r,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

fn diverged(e: Error, epochs: &[EpochRecord]) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: match epochs.last() {
                Some(last) => format!("{detail}; last finite epoch {} (val mse {})", last.epoch, last.val_mse),
                None => format!("{detail}; diverged during the first epoch"),
            },
        },
        other => other,
    }
}
