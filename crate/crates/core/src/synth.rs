//! VOMS stimulus generation and synthetic occipital EEG with a known
//! ocular lag.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{resample_signal, ResampleSpec};
use crate::signal::{
    normalize_trajectory, write_coords_csv, write_eeg_csv, MultiChannelRecord, SessionManifest,
    StimulusCoords, TargetTrajectory, TaskKind, TaskSegment, TrialDescriptor, DEFAULT_CHANNELS,
    INSTRUCTION_PREFIX_S,
};

pub const DISPLAY_FS: f64 = 60.0;
pub const EEG_FS: f64 = 250.0;
pub const ANALYSIS_FS: f64 = 100.0;
/// Edge padding held around the trajectory before shifting.
pub const MAX_LAG_MS: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PursuitMotion {
    #[default]
    Sinusoidal,
    /// Constant speed between center and extremes.
    Triangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StimulusSpec {
    pub task: TaskKind,
    pub duration_s: f64,
    pub saccade_interval_s: f64,
    pub pursuit_excursion_s: f64,
    /// Distance from the window center to either extreme along the task axis.
    pub extreme: f64,
    /// Added to the patch position. A nonzero offset breaks the L2 symmetry
    /// of the two saccade extremes.
    pub offset: [f64; 2],
    pub window_center: [f64; 2],
    pub display_fs: f64,
    pub motion: PursuitMotion,
}

impl Default for StimulusSpec {
    fn default() -> Self {
        Self::for_task(TaskKind::HorizontalSaccade)
    }
}

impl StimulusSpec {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            task,
            duration_s: if task.is_saccade() { 14.0 } else { 15.0 },
            saccade_interval_s: 1.0,
            pursuit_excursion_s: 3.16,
            extreme: 1.0,
            offset: if task.is_saccade() { [0.4, 0.4] } else { [0.0, 0.0] },
            window_center: [0.0, 0.0],
            display_fs: DISPLAY_FS,
            motion: PursuitMotion::Sinusoidal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.duration_s,
            self.saccade_interval_s,
            self.pursuit_excursion_s,
            self.extreme,
            self.display_fs,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("stimulus spec has non-positive timing or extent: {self:?}")));
        }
        Ok(())
    }

    /// Patch position at time `t` relative to the task start.
    pub fn position(&self, t: f64) -> [f64; 2] {
        let along = if self.task.is_saccade() {
            let k = (t / self.saccade_interval_s).floor() as i64;
            if k % 2 == 0 {
                -self.extreme
            } else {
                self.extreme
            }
        } else {
            let phase = PI * t / self.pursuit_excursion_s;
            let s = match self.motion {
                PursuitMotion::Sinusoidal => phase.sin(),
                PursuitMotion::Triangular => 2.0 / PI * phase.sin().asin(),
            };
            self.extreme * s
        };
        let (dx, dy) = if self.task.is_horizontal() { (along, 0.0) } else { (0.0, along) };
        [self.window_center[0] + dx + self.offset[0], self.window_center[1] + dy + self.offset[1]]
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * self.display_fs).round() as usize
    }
}

/// Stimulus frames at the display rate.
pub fn gen_stimulus_coords(spec: &StimulusSpec) -> Result<StimulusCoords> {
    spec.validate()?;
    let n = spec.frames();
    let mut c = StimulusCoords {
        t: Vec::with_capacity(n),
        x_patch: Vec::with_capacity(n),
        y_patch: Vec::with_capacity(n),
        x_win: vec![spec.window_center[0]; n],
        y_win: vec![spec.window_center[1]; n],
    };
    for k in 0..n {
        let t = k as f64 / spec.display_fs;
        let [x, y] = spec.position(t);
        c.t.push(t);
        c.x_patch.push(x);
        c.y_patch.push(y);
    }
    Ok(c)
}

pub fn l2_distance(c: &StimulusCoords) -> Vec<f64> {
    (0..c.t.len())
        .map(|i| (c.x_patch[i] - c.x_win[i]).hypot(c.y_patch[i] - c.y_win[i]))
        .collect()
}

/// Per-frame L2 distance, band-limited resampled from `display_fs` to 100 Hz.
pub fn coords_to_l2(c: &StimulusCoords, display_fs: f64, task: Option<TaskKind>) -> Result<TargetTrajectory> {
    if c.t.is_empty() {
        return Err(Error::EmptyInput("stimulus coordinates"));
    }
    let l2 = l2_distance(c);
    let values = resample_signal(&l2, display_fs, ANALYSIS_FS, &ResampleSpec::default())?;
    Ok(TargetTrajectory::new(values, ANALYSIS_FS, task))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of the 1/f background, mV.
    pub pink: f64,
    /// Amplitude of the 10 Hz alpha rhythm, mV.
    pub alpha: f64,
    /// Standard deviation of the 25-50 Hz contaminant, mV.
    pub gamma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pink: 0.004,
            alpha: 0.003,
            gamma: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn silent() -> Self {
        Self {
            pink: 0.0,
            alpha: 0.0,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthEegSpec {
    /// Positive: EEG follows the stimulus. Negative: anticipatory.
    pub lag_ms: f64,
    /// Trajectory coupling per channel, mV per normalized unit.
    pub gains: Vec<f64>,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Coupling falls off across the montage so that it survives the average
/// reference; the common part is removed by re-referencing.
pub fn default_gains() -> Vec<f64> {
    vec![0.020, 0.012, 0.016, -0.004, -0.010, 0.002]
}

impl Default for SynthEegSpec {
    fn default() -> Self {
        Self {
            lag_ms: 0.0,
            gains: default_gains(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl SynthEegSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.lag_ms.is_finite() || self.lag_ms.abs() > MAX_LAG_MS {
            return Err(Error::Range(format!(
                "lag {} ms exceeds the {MAX_LAG_MS} ms trajectory padding",
                self.lag_ms
            )));
        }
        let n = &self.noise;
        if [n.pink, n.alpha, n.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("noise levels must be finite and non-negative".into()));
        }
        if self.gains.is_empty() || self.gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gains must be non-empty and finite".into()));
        }
        Ok(())
    }
}

/// Unit-variance noise shaped in the frequency domain by `shape(f)`.
fn shaped_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64, shape: impl Fn(f64) -> f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        *v *= shape(f);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd == 0.0 {
        return vec![0.0; n];
    }
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn pink_shape(f: f64) -> f64 {
    if f < 0.1 {
        0.0
    } else {
        1.0 / f.sqrt()
    }
}

fn gamma_shape(f: f64) -> f64 {
    if (25.0..=50.0).contains(&f) {
        1.0
    } else {
        0.0
    }
}

/// `traj(t - lag)` at 250 Hz with the ends held for [`MAX_LAG_MS`].
fn delayed_trajectory(traj: &TargetTrajectory, lag_ms: f64) -> Result<Vec<f64>> {
    let up = resample_signal(&traj.values, traj.fs, EEG_FS, &ResampleSpec::default())?;
    let n = up.len();
    let pad = (MAX_LAG_MS * EEG_FS / 1000.0).ceil() as isize + 1;
    let at = |i: isize| up[i.clamp(0, n as isize - 1) as usize];
    let shift = lag_ms * EEG_FS / 1000.0;
    Ok((0..n)
        .map(|i| {
            let pos = i as f64 - shift;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo = (lo as isize).clamp(-pad, n as isize + pad);
            (1.0 - frac) * at(lo) + frac * at(lo + 1)
        })
        .collect())
}

/// Synthetic 250 Hz EEG: `gain_c * traj(t - lag)` plus 1/f background, a
/// 10 Hz alpha rhythm and an optional 25-50 Hz contaminant.
pub fn synth_eeg(traj: &TargetTrajectory, spec: &SynthEegSpec) -> Result<MultiChannelRecord> {
    spec.validate()?;
    if traj.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let latent = delayed_trajectory(traj, spec.lag_ms)?;
    let n = latent.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.gains.len());
    for &g in &spec.gains {
        let mut ch: Vec<f64> = latent.iter().map(|v| g * v).collect();
        if spec.noise.pink > 0.0 {
            let p = shaped_noise(&mut rng, n, EEG_FS, pink_shape);
            ch.iter_mut().zip(&p).for_each(|(c, v)| *c += spec.noise.pink * v);
        }
        if spec.noise.alpha > 0.0 {
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let freq: f64 = rng.random_range(9.5..10.5);
            for (i, c) in ch.iter_mut().enumerate() {
                *c += spec.noise.alpha * (2.0 * PI * freq * i as f64 / EEG_FS + phase).sin();
            }
        }
        if spec.noise.gamma > 0.0 {
            let p = shaped_noise(&mut rng, n, EEG_FS, gamma_shape);
            ch.iter_mut().zip(&p).for_each(|(c, v)| *c += spec.noise.gamma * v);
        }
        data.push(ch);
    }
    let names: Vec<String> = if spec.gains.len() == DEFAULT_CHANNELS.len() {
        DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..spec.gains.len()).map(|c| format!("Ch{}", c + 1)).collect()
    };
    MultiChannelRecord::with_names(data, EEG_FS, names, 0.0)
}

/// Layout of one 60 s trial: `(task, start_s, end_s)` after the 2 s prefix.
pub fn trial_layout() -> [(TaskKind, f64, f64); 4] {
    [
        (TaskKind::HorizontalSaccade, INSTRUCTION_PREFIX_S, 16.0),
        (TaskKind::VerticalSaccade, 16.0, 30.0),
        (TaskKind::HorizontalPursuit, 30.0, 45.0),
        (TaskKind::VerticalPursuit, 45.0, 60.0),
    ]
}

pub const TRIAL_DURATION_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub extreme: f64,
    pub saccade_offset: [f64; 2],
    pub pursuit_offset: [f64; 2],
    pub window_center: [f64; 2],
    pub motion: PursuitMotion,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            extreme: 1.0,
            saccade_offset: [0.4, 0.4],
            pursuit_offset: [0.0, 0.0],
            window_center: [0.0, 0.0],
            motion: PursuitMotion::Sinusoidal,
        }
    }
}

impl Geometry {
    pub fn stimulus(&self, task: TaskKind, duration_s: f64) -> StimulusSpec {
        StimulusSpec {
            duration_s,
            extreme: self.extreme,
            offset: if task.is_saccade() { self.saccade_offset } else { self.pursuit_offset },
            window_center: self.window_center,
            motion: self.motion,
            ..StimulusSpec::for_task(task)
        }
    }
}

/// Full 60 s trial coordinates; the patch rests on the window center during
/// the instruction prefix.
pub fn trial_coords(geom: &Geometry) -> Result<StimulusCoords> {
    let n = (TRIAL_DURATION_S * DISPLAY_FS).round() as usize;
    let mut c = StimulusCoords {
        t: (0..n).map(|k| k as f64 / DISPLAY_FS).collect(),
        x_patch: vec![geom.window_center[0]; n],
        y_patch: vec![geom.window_center[1]; n],
        x_win: vec![geom.window_center[0]; n],
        y_win: vec![geom.window_center[1]; n],
    };
    for (task, start, end) in trial_layout() {
        let spec = geom.stimulus(task, end - start);
        spec.validate()?;
        let first = (start * DISPLAY_FS).round() as usize;
        let last = ((end * DISPLAY_FS).round() as usize).min(n);
        for k in first..last {
            let [x, y] = spec.position(c.t[k] - start);
            c.x_patch[k] = x;
            c.y_patch[k] = y;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub id: String,
    pub lag_ms: f64,
}

/// Shortens one declared segment, as when a recording stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub subject: String,
    pub session: usize,
    pub trial: usize,
    pub task: TaskKind,
    #[serde(default = "default_truncated_s")]
    pub keep_s: f64,
}

fn default_truncated_s() -> f64 {
    9.87
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub subjects: Vec<SubjectSpec>,
    pub sessions: usize,
    pub trials: usize,
    pub gains: Vec<f64>,
    pub noise: NoiseSpec,
    pub geometry: Geometry,
    pub truncations: Vec<Truncation>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            subjects: vec![
                SubjectSpec {
                    id: "S1".into(),
                    lag_ms: 80.0,
                },
                SubjectSpec {
                    id: "S2".into(),
                    lag_ms: 200.0,
                },
            ],
            sessions: 10,
            trials: 5,
            gains: default_gains(),
            noise: NoiseSpec::default(),
            geometry: Geometry::default(),
            truncations: Vec::new(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.sessions == 0 || self.trials == 0 {
            return Err(Error::Config("simulation needs at least one subject, session and trial".into()));
        }
        let mut ids: Vec<&str> = self.subjects.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate subject id".into()));
        }
        for s in &self.subjects {
            SynthEegSpec {
                lag_ms: s.lag_ms,
                gains: self.gains.clone(),
                noise: self.noise.clone(),
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }
}

/// Quarantined oracle data: never read by the analysis stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subjects: Vec<SubjectSpec>,
    pub seed: u64,
}

pub fn session_id(k: usize) -> String {
    format!("sess{:02}", k + 1)
}

pub fn trial_id(k: usize) -> String {
    format!("trial{:02}", k + 1)
}

/// Independent per-trial seed derived from the master seed.
fn trial_seed(master: u64, subject: usize, session: usize, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((subject as u64) << 40) | ((session as u64) << 20) | trial as u64);
    rng.random()
}

/// Writes one session directory: `manifest.json` plus per-trial EEG and
/// coordinate CSVs. Returns the manifest path.
pub fn gen_session(
    cfg: &SimulationConfig,
    subject: usize,
    session: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    let subj = cfg
        .subjects
        .get(subject)
        .ok_or_else(|| Error::Config(format!("no subject #{subject}")))?;
    let dir = out_dir.join(&subj.id).join(session_id(session));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let coords = trial_coords(&cfg.geometry)?;
    let l2 = coords_to_l2(&coords, DISPLAY_FS, None)?;
    let traj = normalize_trajectory(&l2)?;
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let spec = SynthEegSpec {
            lag_ms: subj.lag_ms,
            gains: cfg.gains.clone(),
            noise: cfg.noise.clone(),
            seed: trial_seed(seed, subject, session, t),
        };
        let eeg = synth_eeg(&traj, &spec)?;
        let tid = trial_id(t);
        let eeg_name = PathBuf::from(format!("{tid}_eeg.csv"));
        let coords_name = PathBuf::from(format!("{tid}_coords.csv"));
        write_eeg_csv(&dir.join(&eeg_name), &eeg)?;
        write_coords_csv(&dir.join(&coords_name), &coords)?;
        let segments = trial_layout()
            .iter()
            .map(|&(task, start_s, end_s)| {
                let cut = cfg.truncations.iter().find(|c| {
                    c.subject == subj.id && c.session == session && c.trial == t && c.task == task
                });
                let end_s = cut.map_or(end_s, |c| (start_s + c.keep_s).min(end_s));
                TaskSegment { task, start_s, end_s }
            })
            .collect();
        trials.push(TrialDescriptor {
            trial_id: tid,
            duration_s: TRIAL_DURATION_S,
            segments,
            eeg_path: eeg_name,
            trajectory_path: coords_name,
        });
    }
    let manifest = SessionManifest {
        subject_id: subj.id.clone(),
        session_id: session_id(session),
        trials,
        notes: "synthetic VOMS session".into(),
    };
    manifest.validate()?;
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{normalized_xcorr, pearson_r};
    use proptest::prelude::*;

    #[test]
    fn pursuit_examples() {
        let s = StimulusSpec::for_task(TaskKind::HorizontalPursuit);
        assert!((s.position(1.58)[0].abs() - 1.0).abs() < 1e-12);
        assert!(s.position(3.16)[0].abs() < 1e-12);
        let v = StimulusSpec::for_task(TaskKind::VerticalPursuit);
        assert!((v.position(1.58)[1] - 1.0).abs() < 1e-12);
        assert_eq!(v.position(1.58)[0], 0.0);
    }

    #[test]
    fn saccade_alternates_from_first_extreme() {
        let s = StimulusSpec {
            offset: [0.0, 0.0],
            ..StimulusSpec::for_task(TaskKind::HorizontalSaccade)
        };
        assert_eq!(s.position(0.0)[0], -1.0);
        assert_eq!(s.position(0.99)[0], -1.0);
        assert_eq!(s.position(1.0)[0], 1.0);
        assert_eq!(s.position(1.99)[0], 1.0);
    }

    #[test]
    fn saccade_has_duration_minus_one_transitions() {
        for task in [TaskKind::HorizontalSaccade, TaskKind::VerticalSaccade] {
            let s = StimulusSpec::for_task(task);
            let c = gen_stimulus_coords(&s).unwrap();
            let axis = if task.is_horizontal() { &c.x_patch } else { &c.y_patch };
            let transitions = axis.windows(2).filter(|w| w[0] != w[1]).count();
            assert_eq!(transitions, (s.duration_s / 1.0).floor() as usize - 1);
        }
    }

    #[test]
    fn offset_breaks_saccade_symmetry() {
        let s = StimulusSpec::for_task(TaskKind::HorizontalSaccade);
        let l2 = l2_distance(&gen_stimulus_coords(&s).unwrap());
        assert!((l2[0] - l2[60]).abs() > 0.5);
        let sym = StimulusSpec { offset: [0.0, 0.0], ..s };
        let l2 = l2_distance(&gen_stimulus_coords(&sym).unwrap());
        assert!(l2.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn l2_examples_and_length() {
        let c = StimulusCoords {
            t: vec![0.0, 1.0 / 60.0],
            x_patch: vec![3.0, 0.0],
            y_patch: vec![4.0, 0.0],
            x_win: vec![0.0, 0.0],
            y_win: vec![0.0, 0.0],
        };
        assert_eq!(l2_distance(&c), vec![5.0, 0.0]);
        let s = StimulusSpec::for_task(TaskKind::VerticalSaccade);
        let traj = coords_to_l2(&gen_stimulus_coords(&s).unwrap(), 60.0, Some(s.task)).unwrap();
        assert_eq!(traj.len(), 1400);
        assert_eq!(traj.fs, 100.0);
    }

    #[test]
    fn pursuit_l2_is_periodic_within_range() {
        for motion in [PursuitMotion::Sinusoidal, PursuitMotion::Triangular] {
            let s = StimulusSpec {
                motion,
                ..StimulusSpec::for_task(TaskKind::HorizontalPursuit)
            };
            for k in 0..400 {
                let t = k as f64 * 0.013;
                let a = s.position(t)[0].abs();
                let b = s.position(t + 3.16)[0].abs();
                assert!((a - b).abs() < 1e-9);
                assert!((0.0..=1.0 + 1e-12).contains(&a));
            }
        }
    }

    fn pursuit_traj() -> TargetTrajectory {
        let s = StimulusSpec::for_task(TaskKind::HorizontalPursuit);
        let l2 = coords_to_l2(&gen_stimulus_coords(&s).unwrap(), 60.0, Some(s.task)).unwrap();
        normalize_trajectory(&l2).unwrap()
    }

    #[test]
    fn noiseless_identity() {
        let traj = pursuit_traj();
        let spec = SynthEegSpec {
            gains: vec![1.0; 6],
            noise: NoiseSpec::silent(),
            ..Default::default()
        };
        let eeg = synth_eeg(&traj, &spec).unwrap();
        let reference = resample_signal(&traj.values, 100.0, 250.0, &ResampleSpec::default()).unwrap();
        for ch in &eeg.data {
            assert!(pearson_r(ch, &reference).unwrap() >= 0.999);
        }
    }

    #[test]
    fn injected_lag_shows_in_xcorr() {
        let traj = pursuit_traj();
        let spec = SynthEegSpec {
            lag_ms: 200.0,
            gains: vec![1.0; 6],
            noise: NoiseSpec::silent(),
            ..Default::default()
        };
        let eeg = synth_eeg(&traj, &spec).unwrap();
        let reference = resample_signal(&traj.values, 100.0, 250.0, &ResampleSpec::default()).unwrap();
        let x = normalized_xcorr(&eeg.data[0], &reference, 125, 250.0).unwrap();
        assert!((x.umax_lag_ms - 200.0).abs() <= 10.0, "{}", x.umax_lag_ms);
    }

    #[test]
    fn lag_beyond_padding_is_range_error() {
        let spec = SynthEegSpec {
            lag_ms: 600.0,
            ..Default::default()
        };
        assert!(matches!(synth_eeg(&pursuit_traj(), &spec), Err(Error::Range(_))));
    }

    #[test]
    fn seeded_output_is_bit_identical() {
        let traj = pursuit_traj();
        let spec = SynthEegSpec {
            lag_ms: -120.0,
            noise: NoiseSpec {
                gamma: 0.002,
                ..Default::default()
            },
            seed: 42,
            ..Default::default()
        };
        let a = synth_eeg(&traj, &spec).unwrap();
        let b = synth_eeg(&traj, &spec).unwrap();
        assert_eq!(a, b);
        let c = synth_eeg(&traj, &SynthEegSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trial_layout_covers_58_seconds() {
        let total: f64 = trial_layout().iter().map(|(_, s, e)| e - s).sum();
        assert!((total - 58.0).abs() < 1e-12);
        let c = trial_coords(&Geometry::default()).unwrap();
        assert_eq!(c.t.len(), 3600);
        assert_eq!(l2_distance(&c)[..120].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn session_manifest_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimulationConfig {
            sessions: 1,
            trials: 5,
            truncations: vec![Truncation {
                subject: "S2".into(),
                session: 0,
                trial: 3,
                task: TaskKind::VerticalPursuit,
                keep_s: 9.87,
            }],
            ..Default::default()
        };
        let p = gen_session(&cfg, 1, 0, 7, dir.path()).unwrap();
        let m = SessionManifest::load(&p).unwrap();
        assert_eq!(m.trials.len(), 5);
        assert!(m.trials.iter().all(|t| t.segments.len() == 4));
        let cut = &m.trials[3].segments[3];
        assert!((cut.end_s - cut.start_s - 9.87).abs() < 1e-9);
        assert!(p.parent().unwrap().join(&m.trials[0].eeg_path).exists());
    }

    proptest! {
        #[test]
        fn synth_is_finite(seed in 0u64..10_000, lag in -500.0f64..500.0) {
            let traj = TargetTrajectory::new((0..300).map(|i| (i as f64 / 37.0).sin().abs()).collect(), 100.0, None);
            let spec = SynthEegSpec { lag_ms: lag, seed, noise: NoiseSpec { gamma: 0.001, ..Default::default() }, ..Default::default() };
            let eeg = synth_eeg(&traj, &spec).unwrap();
            prop_assert!(eeg.data.iter().flatten().all(|v| v.is_finite()));
            prop_assert_eq!(eeg.n_samples(), 750);
        }
    }
}
