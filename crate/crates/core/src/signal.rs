//! Time-series containers, session bookkeeping and sliding-window extraction.
//!
//! Window geometry defaults to a 2.56 s window (256 samples at 100 Hz) moved
//! by a 200 ms stride (20 samples) over the first 13.76 s (1376 samples) of
//! each task segment, which yields 57 windows per segment.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHANNELS: [&str; 6] = ["O1", "Oz", "O2", "PO3", "POz", "PO4"];

/// Seconds at the start of each trial reserved for participant instruction.
pub const INSTRUCTION_PREFIX_S: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    HorizontalSaccade,
    VerticalSaccade,
    HorizontalPursuit,
    VerticalPursuit,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::HorizontalSaccade,
        TaskKind::VerticalSaccade,
        TaskKind::HorizontalPursuit,
        TaskKind::VerticalPursuit,
    ];

    pub fn is_saccade(self) -> bool {
        matches!(self, TaskKind::HorizontalSaccade | TaskKind::VerticalSaccade)
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, TaskKind::HorizontalSaccade | TaskKind::HorizontalPursuit)
    }

    /// Machine identifier used in file names and CSV columns.
    pub fn key(self) -> &'static str {
        match self {
            TaskKind::HorizontalSaccade => "horizontal_saccade",
            TaskKind::VerticalSaccade => "vertical_saccade",
            TaskKind::HorizontalPursuit => "horizontal_pursuit",
            TaskKind::VerticalPursuit => "vertical_pursuit",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskKind::HorizontalSaccade => "Horizontal Saccade",
            TaskKind::VerticalSaccade => "Vertical Saccade",
            TaskKind::HorizontalPursuit => "Horizontal Pursuit",
            TaskKind::VerticalPursuit => "Vertical Pursuit",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.key() == s || t.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Multi-channel EEG, channel-major, values in mV.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelRecord {
    pub data: Vec<Vec<f64>>,
    pub fs: f64,
    pub channel_names: Vec<String>,
    /// Offset of the first sample within its trial, in seconds.
    pub t0: f64,
}

impl MultiChannelRecord {
    pub fn new(data: Vec<Vec<f64>>, fs: f64) -> Result<Self> {
        let names = if data.len() == DEFAULT_CHANNELS.len() {
            DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect()
        } else {
            (0..data.len()).map(|i| format!("ch{i}")).collect()
        };
        Self::with_names(data, fs, names, 0.0)
    }

    pub fn with_names(
        data: Vec<Vec<f64>>,
        fs: f64,
        channel_names: Vec<String>,
        t0: f64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("record has no channels"));
        }
        if channel_names.len() != data.len() {
            return Err(Error::Shape(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                data.len()
            )));
        }
        let n = data[0].len();
        if data.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("channels have unequal lengths".into()));
        }
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(Error::Config(format!("invalid sampling rate {fs}")));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "MultiChannelRecord::new",
                detail: "non-finite sample".into(),
            });
        }
        Ok(Self {
            data,
            fs,
            channel_names,
            t0,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.data.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    /// Copy of samples `[start, end)` on every channel.
    pub fn slice(&self, start: usize, end: usize) -> MultiChannelRecord {
        MultiChannelRecord {
            data: self.data.iter().map(|c| c[start..end].to_vec()).collect(),
            fs: self.fs,
            channel_names: self.channel_names.clone(),
            t0: self.t0 + start as f64 / self.fs,
        }
    }

    pub fn map_channels(&self, data: Vec<Vec<f64>>, fs: f64) -> MultiChannelRecord {
        MultiChannelRecord {
            data,
            fs,
            channel_names: self.channel_names.clone(),
            t0: self.t0,
        }
    }
}

/// Stimulus distance trace used as the decoding target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTrajectory {
    pub values: Vec<f64>,
    pub fs: f64,
    /// `None` for a trace covering a whole trial.
    pub task: Option<TaskKind>,
}

impl TargetTrajectory {
    pub fn new(values: Vec<f64>, fs: f64, task: Option<TaskKind>) -> Self {
        Self { values, fs, task }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Min-max map onto `[0, 1]`. A constant trace maps to all zeros.
pub fn normalize_trajectory(traj: &TargetTrajectory) -> Result<TargetTrajectory> {
    if traj.values.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let (lo, hi) = traj
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numeric {
            op: "normalize_trajectory",
            detail: "non-finite value".into(),
        });
    }
    let span = hi - lo;
    let values = if span > 0.0 {
        traj.values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; traj.values.len()]
    };
    Ok(TargetTrajectory {
        values,
        fs: traj.fs,
        task: traj.task,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSegment {
    pub task: TaskKind,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDescriptor {
    pub trial_id: String,
    pub duration_s: f64,
    pub segments: Vec<TaskSegment>,
    /// Paths are relative to the manifest's directory.
    pub eeg_path: PathBuf,
    pub trajectory_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub subject_id: String,
    pub session_id: String,
    pub trials: Vec<TrialDescriptor>,
    #[serde(default)]
    pub notes: String,
}

impl TrialDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.segments.len() > 4 {
            return Err(Error::Config(format!(
                "trial {} declares {} segments (at most 4)",
                self.trial_id,
                self.segments.len()
            )));
        }
        let mut segs: Vec<&TaskSegment> = self.segments.iter().collect();
        segs.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for s in &segs {
            if !(s.start_s >= 0.0 && s.start_s < s.end_s && s.end_s <= self.duration_s + 1e-9) {
                return Err(Error::Range(format!(
                    "segment {} [{}, {}) outside trial {} of {} s",
                    s.task.key(),
                    s.start_s,
                    s.end_s,
                    self.trial_id,
                    self.duration_s
                )));
            }
        }
        for pair in segs.windows(2) {
            if pair[1].start_s < pair[0].end_s - 1e-9 {
                return Err(Error::Range(format!(
                    "segments {} and {} overlap in trial {}",
                    pair[0].task.key(),
                    pair[1].task.key(),
                    self.trial_id
                )));
            }
        }
        Ok(())
    }
}

impl SessionManifest {
    pub fn validate(&self) -> Result<()> {
        self.trials.iter().try_for_each(TrialDescriptor::validate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: SessionManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Cut one aligned (EEG, trajectory) pair per declared task segment.
///
/// Segment starts are clamped past the instruction prefix.
pub fn slice_task_segments(
    record: &MultiChannelRecord,
    traj: &TargetTrajectory,
    trial: &TrialDescriptor,
) -> Result<Vec<(TaskKind, MultiChannelRecord, TargetTrajectory)>> {
    if (record.fs - traj.fs).abs() > 1e-9 {
        return Err(Error::Alignment(format!(
            "EEG at {} Hz but trajectory at {} Hz",
            record.fs, traj.fs
        )));
    }
    let duration = record.duration_s() + record.t0;
    let mut out = Vec::with_capacity(trial.segments.len());
    for seg in &trial.segments {
        if seg.start_s < record.t0 - 1e-9 || seg.end_s > duration + 1e-9 || seg.start_s >= seg.end_s
        {
            return Err(Error::Range(format!(
                "segment {} [{}, {}) outside record spanning [{}, {}) s",
                seg.task.key(),
                seg.start_s,
                seg.end_s,
                record.t0,
                duration
            )));
        }
        let start_s = seg.start_s.max(INSTRUCTION_PREFIX_S);
        let start = ((start_s - record.t0) * record.fs).round() as usize;
        let end = (((seg.end_s - record.t0) * record.fs).round() as usize).min(record.n_samples());
        if end > traj.len() {
            return Err(Error::Alignment(format!(
                "trajectory has {} samples, segment needs {end}",
                traj.len()
            )));
        }
        let eeg = record.slice(start, end);
        let target = TargetTrajectory::new(traj.values[start..end].to_vec(), traj.fs, Some(seg.task));
        out.push((seg.task, eeg, target));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Window length in samples.
    pub win: usize,
    pub stride: usize,
    /// Samples consumed from each segment; shorter segments are rejected.
    pub span: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            win: 256,
            stride: 20,
            span: 1376,
        }
    }
}

impl WindowConfig {
    pub fn windows_per_segment(&self) -> usize {
        if self.span < self.win {
            0
        } else {
            (self.span - self.win) / self.stride + 1
        }
    }
}

/// Provenance attached to each window.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowKey {
    pub subject_id: String,
    pub session_id: String,
    pub trial_id: String,
    pub task: TaskKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// Channel-major `channels × len`.
    pub eeg: Vec<f64>,
    pub channels: usize,
    pub target: Vec<f64>,
    pub key: WindowKey,
    pub window_index: usize,
    pub start_sample: usize,
}

impl WindowPair {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len();
        &self.eeg[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub windows: Vec<WindowPair>,
    /// Set when the segment was shorter than the configured span.
    pub rejected: bool,
}

pub fn make_windows(
    eeg: &MultiChannelRecord,
    target: &TargetTrajectory,
    cfg: &WindowConfig,
    key: &WindowKey,
) -> Result<WindowOutcome> {
    if eeg.n_samples() != target.len() {
        return Err(Error::Alignment(format!(
            "EEG has {} samples, trajectory {}",
            eeg.n_samples(),
            target.len()
        )));
    }
    if (eeg.fs - target.fs).abs() > 1e-9 {
        return Err(Error::Alignment(format!(
            "EEG at {} Hz but trajectory at {} Hz",
            eeg.fs, target.fs
        )));
    }
    if cfg.win == 0 || cfg.stride == 0 || cfg.span < cfg.win {
        return Err(Error::Config(format!("invalid window geometry {cfg:?}")));
    }
    if eeg.n_samples() < cfg.span {
        return Ok(WindowOutcome {
            windows: Vec::new(),
            rejected: true,
        });
    }
    let count = cfg.windows_per_segment();
    let windows = (0..count)
        .map(|w| {
            let start = w * cfg.stride;
            let mut flat = Vec::with_capacity(eeg.n_channels() * cfg.win);
            for ch in &eeg.data {
                flat.extend_from_slice(&ch[start..start + cfg.win]);
            }
            WindowPair {
                eeg: flat,
                channels: eeg.n_channels(),
                target: target.values[start..start + cfg.win].to_vec(),
                key: key.clone(),
                window_index: w,
                start_sample: start,
            }
        })
        .collect();
    Ok(WindowOutcome {
        windows,
        rejected: false,
    })
}

fn fmt_row(out: &mut impl Write, t: f64, vals: impl Iterator<Item = f64>) -> std::io::Result<()> {
    write!(out, "{t}")?;
    for v in vals {
        write!(out, ",{v}")?;
    }
    writeln!(out)
}

/// Write `t,<channel names...>` rows.
pub fn write_eeg_csv(path: &Path, rec: &MultiChannelRecord) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "t,{}", rec.channel_names.join(",")).map_err(io)?;
    for i in 0..rec.n_samples() {
        let t = rec.t0 + i as f64 / rec.fs;
        fmt_row(&mut out, t, rec.data.iter().map(|c| c[i])).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parsed numeric CSV: header names and column-major values.
struct Table {
    header: Vec<String>,
    columns: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header: Vec<String> = match lines.next() {
        Some(line) => line
            .map_err(|e| Error::io(path, e))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect(),
        None => return Err(Error::parse(path, "missing header")),
    };
    let mut columns = vec![Vec::new(); header.len()];
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut n = 0;
        for (c, field) in line.split(',').enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad number `{field}`", lineno + 2)))?;
            columns
                .get_mut(c)
                .ok_or_else(|| Error::parse(path, format!("line {}: too many fields", lineno + 2)))?
                .push(v);
            n += 1;
        }
        if n != header.len() {
            return Err(Error::parse(path, format!("line {}: expected {} fields", lineno + 2, header.len())));
        }
    }
    Ok(Table { header, columns })
}

fn infer_fs(path: &Path, t: &[f64]) -> Result<f64> {
    if t.len() < 2 {
        return Err(Error::parse(path, "need at least two rows to infer sampling rate"));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::parse(path, "time column is not increasing"));
    }
    // Rates used here are integral; rounding removes accumulated print error.
    Ok((1.0 / dt).round())
}

pub fn read_eeg_csv(path: &Path) -> Result<MultiChannelRecord> {
    let mut table = read_table(path)?;
    if table.header.first().map(String::as_str) != Some("t") {
        return Err(Error::parse(path, "first column must be `t`"));
    }
    let fs = infer_fs(path, &table.columns[0])?;
    let t0 = table.columns[0][0];
    let names = table.header.split_off(1);
    let data = table.columns.split_off(1);
    MultiChannelRecord::with_names(data, fs, names, t0)
}

/// Raw stimulus coordinates as written by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusCoords {
    pub t: Vec<f64>,
    pub x_patch: Vec<f64>,
    pub y_patch: Vec<f64>,
    pub x_win: Vec<f64>,
    pub y_win: Vec<f64>,
}

pub fn write_coords_csv(path: &Path, c: &StimulusCoords) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "t,x_patch,y_patch,x_win,y_win").map_err(io)?;
    for i in 0..c.t.len() {
        fmt_row(
            &mut out,
            c.t[i],
            [c.x_patch[i], c.y_patch[i], c.x_win[i], c.y_win[i]].into_iter(),
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_coords_csv(path: &Path) -> Result<StimulusCoords> {
    let table = read_table(path)?;
    if table.header != ["t", "x_patch", "y_patch", "x_win", "y_win"] {
        return Err(Error::parse(path, "expected header t,x_patch,y_patch,x_win,y_win"));
    }
    let mut cols = table.columns.into_iter();
    let mut next = || cols.next().unwrap_or_default();
    Ok(StimulusCoords {
        t: next(),
        x_patch: next(),
        y_patch: next(),
        x_win: next(),
        y_win: next(),
    })
}

/// Write the derived `t,l2` form.
pub fn write_l2_csv(path: &Path, traj: &TargetTrajectory) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "t,l2").map_err(io)?;
    for (i, v) in traj.values.iter().enumerate() {
        writeln!(out, "{},{v}", i as f64 / traj.fs).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_l2_csv(path: &Path) -> Result<TargetTrajectory> {
    let table = read_table(path)?;
    if table.header != ["t", "l2"] {
        return Err(Error::parse(path, "expected header t,l2"));
    }
    let fs = infer_fs(path, &table.columns[0])?;
    Ok(TargetTrajectory::new(table.columns[1].clone(), fs, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, fs: f64) -> MultiChannelRecord {
        let data = (0..6)
            .map(|c| (0..n).map(|i| (i + c) as f64).collect())
            .collect();
        MultiChannelRecord::new(data, fs).unwrap()
    }

    fn key() -> WindowKey {
        WindowKey {
            subject_id: "S1".into(),
            session_id: "01".into(),
            trial_id: "1".into(),
            task: TaskKind::VerticalPursuit,
        }
    }

    fn trial(segments: Vec<TaskSegment>) -> TrialDescriptor {
        TrialDescriptor {
            trial_id: "1".into(),
            duration_s: 60.0,
            segments,
            eeg_path: "eeg.csv".into(),
            trajectory_path: "trajectory.csv".into(),
        }
    }

    fn standard_segments() -> Vec<TaskSegment> {
        let bounds = [(0.0, 16.0), (16.0, 30.0), (30.0, 45.0), (45.0, 60.0)];
        TaskKind::ALL
            .iter()
            .zip(bounds)
            .map(|(&task, (a, b))| TaskSegment {
                task,
                start_s: a,
                end_s: b,
            })
            .collect()
    }

    #[test]
    fn four_segments_skip_instruction_prefix() {
        let rec = record(6000, 100.0);
        let traj = TargetTrajectory::new(vec![0.0; 6000], 100.0, None);
        let segs = slice_task_segments(&rec, &traj, &trial(standard_segments())).unwrap();
        assert_eq!(segs.len(), 4);
        assert!(segs.iter().all(|(_, e, _)| e.t0 >= INSTRUCTION_PREFIX_S));
        assert_eq!(segs[0].1.n_samples(), 1400);
        assert_eq!(segs[3].1.n_samples(), 1500);
        for w in segs.windows(2) {
            assert!(w[0].1.t0 + w[0].1.duration_s() <= w[1].1.t0 + 1e-9);
        }
    }

    #[test]
    fn no_segments_yields_empty() {
        let rec = record(6000, 100.0);
        let traj = TargetTrajectory::new(vec![0.0; 6000], 100.0, None);
        assert!(slice_task_segments(&rec, &traj, &trial(vec![])).unwrap().is_empty());
    }

    #[test]
    fn segment_past_record_end_is_range_error() {
        let rec = record(6000, 100.0);
        let traj = TargetTrajectory::new(vec![0.0; 6000], 100.0, None);
        let seg = TaskSegment {
            task: TaskKind::VerticalPursuit,
            start_s: 45.0,
            end_s: 61.0,
        };
        let err = slice_task_segments(&rec, &traj, &trial(vec![seg])).unwrap_err();
        assert!(matches!(err, Error::Range(_)), "{err}");
    }

    #[test]
    fn rate_mismatch_is_alignment_error() {
        let rec = record(600, 100.0);
        let traj = TargetTrajectory::new(vec![0.0; 600], 60.0, None);
        let err = slice_task_segments(&rec, &traj, &trial(standard_segments())).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn window_counts() {
        let cfg = WindowConfig::default();
        for (n, expect, rejected) in [(1400, 57, false), (987, 0, true), (1376, 57, false), (1369, 0, true)] {
            let rec = record(n, 100.0);
            let traj = TargetTrajectory::new(vec![0.5; n], 100.0, None);
            let out = make_windows(&rec, &traj, &cfg, &key()).unwrap();
            assert_eq!(out.windows.len(), expect, "n = {n}");
            assert_eq!(out.rejected, rejected);
        }
        let rec = record(1376, 100.0);
        let traj = TargetTrajectory::new((0..1376).map(f64::from).collect(), 100.0, None);
        let out = make_windows(&rec, &traj, &cfg, &key()).unwrap();
        let last = out.windows.last().unwrap();
        assert_eq!(last.start_sample, 1120);
        assert_eq!(last.target[0], 1120.0);
        assert_eq!(last.channel(2)[0], 1122.0);
        assert!(out
            .windows
            .iter()
            .all(|w| w.start_sample == w.window_index * 20 && w.eeg.len() == 6 * 256));
    }

    #[test]
    fn window_length_mismatch() {
        let rec = record(1400, 100.0);
        let traj = TargetTrajectory::new(vec![0.5; 1399], 100.0, None);
        assert!(matches!(
            make_windows(&rec, &traj, &WindowConfig::default(), &key()),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let t = |v: Vec<f64>| TargetTrajectory::new(v, 100.0, None);
        assert_eq!(normalize_trajectory(&t(vec![0.0, 5.0, 10.0])).unwrap().values, [0.0, 0.5, 1.0]);
        assert_eq!(normalize_trajectory(&t(vec![3.0; 3])).unwrap().values, [0.0; 3]);
        assert!(matches!(normalize_trajectory(&t(vec![])), Err(Error::EmptyInput(_))));
        let peak = (0..300).map(|i| 7.0 * (i as f64 * 0.01).sin().abs()).collect();
        let n = normalize_trajectory(&t(peak)).unwrap();
        assert_eq!(n.values.iter().cloned().fold(f64::MIN, f64::max), 1.0);
    }

    #[test]
    fn session_aggregation_counts() {
        let cfg = WindowConfig::default();
        assert_eq!(50 * cfg.windows_per_segment(), 2850);
        assert_eq!(49 * cfg.windows_per_segment(), 2793);
    }

    #[test]
    fn manifest_validation() {
        let mut t = trial(standard_segments());
        assert!(t.validate().is_ok());
        t.segments[1].start_s = 15.0;
        assert!(matches!(t.validate(), Err(Error::Range(_))));
        let mut t = trial(standard_segments());
        t.segments.push(t.segments[0].clone());
        assert!(matches!(t.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(50, 250.0);
        let p = dir.path().join("eeg.csv");
        write_eeg_csv(&p, &rec).unwrap();
        let back = read_eeg_csv(&p).unwrap();
        assert_eq!(back, rec);
        let traj = TargetTrajectory::new(vec![0.25, 0.5, 1.0], 100.0, None);
        let p = dir.path().join("l2.csv");
        write_l2_csv(&p, &traj).unwrap();
        assert_eq!(read_l2_csv(&p).unwrap(), traj);
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 2..64)) {
            let t = TargetTrajectory::new(v, 100.0, None);
            let once = normalize_trajectory(&t).unwrap();
            let twice = normalize_trajectory(&once).unwrap();
            for (a, b) in once.values.iter().zip(&twice.values) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
