use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::store::{check_prerequisites, encode_windows, load_windows, rel_key, Outputs, StageTiming};
use super::{PipelineConfig, RunRecord, Stage, StageRecord};
use crate::autodiff::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{dtw, dtw_align, mann_whitney_u, median, normalized_xcorr, pearson_r, psd_summary, znormalize};
use crate::model::{self, ModelConfig, ModelState, StopReason, TrainReport, Variant};
use crate::preprocess::{preprocess_record, qc_stats, SosFilter};
use crate::rdwt::{rdwt_forward, sym2_filter_bank};
use crate::signal::{
    make_windows, normalize_trajectory, read_coords_csv, read_eeg_csv, read_l2_csv, slice_task_segments, write_eeg_csv,
    write_l2_csv, MultiChannelRecord, SessionManifest, TaskKind, TrialDescriptor, WindowKey, WindowPair,
};
use crate::synth::{coords_to_l2, gen_session, GroundTruth, DISPLAY_FS};

/// What a stage reports back besides its files.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub warnings: Vec<String>,
    /// The stage ran but produced no usable result (e.g. zero valid windows).
    pub empty: bool,
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let inputs = check_prerequisites(cfg, stage)?;
    let out = cfg.out().to_path_buf();
    if !out.exists() {
        log::info!("creating output directory {}", out.display());
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut outputs = Outputs::new(&out);
    let mut warnings = Vec::new();
    let empty = match stage {
        Stage::Simulate => simulate(cfg, &mut outputs)?,
        Stage::Preprocess => preprocess(cfg, &mut outputs, &mut warnings)?,
        Stage::Window => window(cfg, &mut outputs, &mut warnings)?,
        Stage::Train => train_units(cfg, &[Variant::M0], "models", &mut outputs, &mut warnings)?,
        Stage::Ablate => ablate(cfg, &mut outputs, &mut warnings)?,
        Stage::Analyze => analyze(cfg, &mut outputs, &mut warnings)?,
        Stage::Stats => stats(cfg, &mut outputs, &mut warnings)?,
        Stage::Report => report(cfg, &mut outputs)?,
    };
    for w in &warnings {
        log::warn!("{}: {w}", stage.name());
    }
    let record = StageRecord {
        stage,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs,
        outputs: outputs.files,
        warnings: warnings.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    record.save(&out)?;
    if stage == Stage::Report {
        write_run_record(cfg)?;
    }
    Ok(StageOutcome { stage, warnings, empty })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed shared by every variant trained on one (subject, task) unit.
pub(crate) fn unit_seed(master: u64, subject: &str, task: TaskKind) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(fnv(&format!("{subject}/{}", task.key())));
    rng.random()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn stage_order(stage: Stage, pre: Stage, detail: impl Into<String>) -> Error {
    Error::StageOrder {
        stage: stage.name(),
        prerequisite: pre.name(),
        detail: detail.into(),
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

/// `<root>/<subject>/<session>/manifest.json`, sorted.
fn manifests(root: &Path) -> Result<Vec<PathBuf>> {
    let mut v = Vec::new();
    for subj in sorted_dirs(root)? {
        for sess in sorted_dirs(&subj)? {
            let m = sess.join("manifest.json");
            if m.exists() {
                v.push(m);
            }
        }
    }
    Ok(v)
}

fn simulate(cfg: &PipelineConfig, out: &mut Outputs) -> Result<bool> {
    let sim = &cfg.simulation;
    let raw = cfg.out().join("raw");
    if raw.exists() {
        fs::remove_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..sim.subjects.len()).flat_map(|s| (0..sim.sessions).map(move |k| (s, k))).collect();
    let paths = jobs
        .par_iter()
        .map(|&(s, k)| gen_session(sim, s, k, cfg.seed, &raw))
        .collect::<Result<Vec<_>>>()?;
    for m in &paths {
        let manifest = SessionManifest::load(m)?;
        let dir = m.parent().expect("manifest dir");
        for t in &manifest.trials {
            out.track(&dir.join(&t.eeg_path))?;
            out.track(&dir.join(&t.trajectory_path))?;
        }
        out.track(m)?;
    }
    // Oracle lags stay outside the analysis tree and outside the stage inputs.
    let truth = GroundTruth {
        subjects: sim.subjects.clone(),
        seed: cfg.seed,
    };
    let path = cfg.out().join("ground_truth.json");
    let text = serde_json::to_string_pretty(&truth).expect("ground truth serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(false)
}

struct PreprocessedTrial {
    qc_id: String,
    record: MultiChannelRecord,
}

fn preprocess_session(cfg: &PipelineConfig, manifest_path: &Path, out_dir: &Path) -> Result<(SessionManifest, Vec<PreprocessedTrial>, Vec<(PathBuf, Vec<u8>)>)> {
    let manifest = SessionManifest::load(manifest_path)?;
    let dir = manifest_path.parent().expect("manifest dir");
    let mut files = Vec::new();
    let mut trials = Vec::new();
    let mut new_trials = Vec::new();
    for t in &manifest.trials {
        let eeg = read_eeg_csv(&dir.join(&t.eeg_path))?;
        let pre = preprocess_record(&eeg, &cfg.preprocess)?;
        let coords = read_coords_csv(&dir.join(&t.trajectory_path))?;
        let l2 = coords_to_l2(&coords, DISPLAY_FS, None)?;
        let traj = normalize_trajectory(&l2)?;
        if (traj.fs - pre.fs).abs() > 1e-9 {
            return Err(Error::Alignment(format!("trajectory at {} Hz, EEG at {} Hz", traj.fs, pre.fs)));
        }
        let eeg_name = PathBuf::from(format!("{}_eeg.csv", t.trial_id));
        let l2_name = PathBuf::from(format!("{}_l2.csv", t.trial_id));
        let tmp = tempfile_path(out_dir, &eeg_name);
        write_eeg_csv(&tmp, &pre)?;
        files.push((out_dir.join(&eeg_name), fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?));
        fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let tmp = tempfile_path(out_dir, &l2_name);
        write_l2_csv(&tmp, &traj)?;
        files.push((out_dir.join(&l2_name), fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?));
        fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
        new_trials.push(TrialDescriptor {
            eeg_path: eeg_name,
            trajectory_path: l2_name,
            ..t.clone()
        });
        trials.push(PreprocessedTrial {
            qc_id: format!("{}/{}/{}", manifest.subject_id, manifest.session_id, t.trial_id),
            record: pre,
        });
    }
    let manifest = SessionManifest {
        trials: new_trials,
        ..manifest
    };
    Ok((manifest, trials, files))
}

fn tempfile_path(dir: &Path, name: &Path) -> PathBuf {
    dir.join(format!(".{}.tmp", name.display()))
}

fn preprocess(cfg: &PipelineConfig, out: &mut Outputs, warnings: &mut Vec<String>) -> Result<bool> {
    let raw = cfg.raw_dir();
    if !raw.exists() {
        return Err(stage_order(Stage::Preprocess, Stage::Simulate, format!("no dataset at {}", raw.display())));
    }
    let list = manifests(&raw)?;
    if list.is_empty() {
        return Err(Error::InsufficientData(format!("no session manifests under {}", raw.display())));
    }
    let root = cfg.out().join("preprocessed");
    if root.exists() {
        fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    }
    let results = list
        .par_iter()
        .map(|m| {
            let manifest = SessionManifest::load(m)?;
            let dir = root.join(&manifest.subject_id).join(&manifest.session_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            preprocess_session(cfg, m, &dir).map(|r| (dir, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut qc_input = Vec::new();
    for (dir, (manifest, trials, files)) in results {
        for (path, bytes) in files {
            out.write(&path, &bytes)?;
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        out.write(&dir.join("manifest.json"), text.as_bytes())?;
        qc_input.extend(trials.into_iter().map(|t| (t.qc_id, t.record)));
    }
    let qc = qc_stats(&qc_input)?;
    out.write(&root.join("qc.csv"), qc.to_csv().as_bytes())?;
    if cfg.dump_filter {
        let sos = SosFilter::butterworth_bandpass(&cfg.preprocess.bandpass, cfg.preprocess.target_fs)?;
        out.write(&root.join("bandpass_sos.csv"), sos.coefficients_csv().as_bytes())?;
    }
    if cfg.dump_rdwt {
        let (id, rec) = &qc_input[0];
        let flat: Vec<f64> = rec.data.iter().flatten().copied().collect();
        match rdwt_forward(&flat, 1, rec.n_channels(), cfg.model.levels, rec.fs, &sym2_filter_bank()) {
            Ok(c) => out.write(&root.join("rdwt_dump.csv"), c.to_csv().as_bytes())?,
            Err(e) => warnings.push(format!("RDWT dump of {id} skipped: {e}")),
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UnitIndex {
    subject: String,
    task: TaskKind,
    windows: usize,
    rejected_segments: usize,
    file: String,
}

fn unit_file(out: &Path, subject: &str, task: TaskKind) -> PathBuf {
    out.join("windows").join(subject).join(format!("{}.json", task.key()))
}

fn window(cfg: &PipelineConfig, out: &mut Outputs, warnings: &mut Vec<String>) -> Result<bool> {
    let root = cfg.out().join("preprocessed");
    let list = manifests(&root)?;
    let mut units: BTreeMap<(String, TaskKind), (Vec<WindowPair>, usize)> = BTreeMap::new();
    let mut channels = BTreeMap::new();
    for m in &list {
        let manifest = SessionManifest::load(m)?;
        let dir = m.parent().expect("manifest dir");
        for t in &manifest.trials {
            let eeg = read_eeg_csv(&dir.join(&t.eeg_path))?;
            let traj = read_l2_csv(&dir.join(&t.trajectory_path))?;
            for (task, seg, target) in slice_task_segments(&eeg, &traj, t)? {
                if !cfg.tasks.contains(&task) {
                    continue;
                }
                let key = WindowKey {
                    subject_id: manifest.subject_id.clone(),
                    session_id: manifest.session_id.clone(),
                    trial_id: t.trial_id.clone(),
                    task,
                };
                let outcome = make_windows(&seg, &target, &cfg.window, &key)?;
                let entry = units.entry((manifest.subject_id.clone(), task)).or_default();
                if outcome.rejected {
                    entry.1 += 1;
                    warnings.push(format!(
                        "{}/{}/{} {}: segment of {} samples is shorter than the {}-sample span",
                        key.subject_id,
                        key.session_id,
                        key.trial_id,
                        task.key(),
                        seg.n_samples(),
                        cfg.window.span
                    ));
                }
                entry.0.extend(outcome.windows);
                channels.insert(manifest.subject_id.clone(), seg.n_channels());
            }
        }
    }
    let wroot = cfg.out().join("windows");
    if wroot.exists() {
        fs::remove_dir_all(&wroot).map_err(|e| Error::io(&wroot, e))?;
    }
    let mut index = Vec::new();
    let mut csv = String::from("subject,task,windows,rejected_segments\n");
    for ((subject, task), (ws, rejected)) in &units {
        let path = unit_file(cfg.out(), subject, *task);
        out.write(&path, encode_windows(subject, *task, channels[subject], ws).as_bytes())?;
        let _ = writeln!(csv, "{subject},{},{},{rejected}", task.key(), ws.len());
        index.push(UnitIndex {
            subject: subject.clone(),
            task: *task,
            windows: ws.len(),
            rejected_segments: *rejected,
            file: rel_key(cfg.out(), &path),
        });
    }
    out.write(&wroot.join("summary.csv"), csv.as_bytes())?;
    let text = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
    out.write(&wroot.join("index.json"), text.as_bytes())?;
    Ok(index.iter().all(|u| u.windows == 0))
}

fn load_index(cfg: &PipelineConfig) -> Result<Vec<UnitIndex>> {
    let path = cfg.out().join("windows").join("index.json");
    if !path.exists() {
        return Err(stage_order(Stage::Train, Stage::Window, format!("{} missing", path.display())));
    }
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::parse(&path, e))
}

/// Per-unit training outcome, free of NaN and wall-clock fields so it can
/// be folded into the report bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UnitSummary {
    variant: Variant,
    subject: String,
    task: TaskKind,
    train_windows: usize,
    val_windows: usize,
    epochs_run: usize,
    best_epoch: usize,
    best_val_mse: f64,
    first_epoch_train_mse: f64,
    stop_reason: StopReason,
    pct_acceptable: f64,
}

fn model_dir(out: &Path, area: &str, variant: Variant, subject: &str, task: TaskKind) -> PathBuf {
    out.join(area).join(variant.to_string()).join(subject).join(task.key())
}

fn unit_model_config(cfg: &PipelineConfig, variant: Variant, channels: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        channels,
        seed,
        ..cfg.model.clone()
    }
}

type Trained = (UnitSummary, ModelState, TrainReport);

fn train_one(cfg: &PipelineConfig, variant: Variant, unit: &UnitIndex) -> Result<Option<Trained>> {
    let windows = load_windows(&cfg.out().join(&unit.file))?;
    let (train_set, val) = match model::split_dataset(&windows) {
        Ok(s) => s,
        Err(Error::InsufficientData(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let seed = unit_seed(cfg.seed, &unit.subject, unit.task);
    let mcfg = unit_model_config(cfg, variant, windows[0].channels, seed);
    let mut state = ModelState::init(&mcfg)?;
    let tcfg = model::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let report = model::train(&mut state, &train_set, &val, &tcfg)?;
    let acceptable = report
        .val_r
        .iter()
        .filter(|&&r| r.is_finite() && if cfg.metrics.strict_gate { r > cfg.metrics.tau } else { r >= cfg.metrics.tau })
        .count();
    let summary = UnitSummary {
        variant,
        subject: unit.subject.clone(),
        task: unit.task,
        train_windows: train_set.len(),
        val_windows: val.len(),
        epochs_run: report.epochs.len(),
        best_epoch: report.best_epoch,
        best_val_mse: report.best_val_mse,
        first_epoch_train_mse: report.epochs[0].train_mse,
        stop_reason: report.stop_reason,
        pct_acceptable: 100.0 * acceptable as f64 / val.len() as f64,
    };
    Ok(Some((summary, state, report)))
}

fn train_units(cfg: &PipelineConfig, variants: &[Variant], area: &str, out: &mut Outputs, warnings: &mut Vec<String>) -> Result<bool> {
    let index = load_index(cfg)?;
    let area_dir = cfg.out().join(area);
    if area_dir.exists() {
        fs::remove_dir_all(&area_dir).map_err(|e| Error::io(&area_dir, e))?;
    }
    let jobs: Vec<(Variant, &UnitIndex)> = variants.iter().flat_map(|&v| index.iter().map(move |u| (v, u))).collect();
    let results = jobs
        .par_iter()
        .map(|&(v, u)| train_one(cfg, v, u).map(|r| (v, u, r)))
        .collect::<Result<Vec<_>>>()?;
    let mut summaries = Vec::new();
    for (variant, unit, result) in results {
        let Some((summary, state, report)) = result else {
            warnings.push(format!("{} {}: {} windows, too few to split; skipped", unit.subject, unit.task.key(), unit.windows));
            continue;
        };
        let dir = model_dir(cfg.out(), area, variant, &unit.subject, unit.task);
        let ck = state.to_checkpoint();
        out.write(&dir.join("checkpoint.json"), (serde_json::to_string(&ck).expect("checkpoint serializes") + "\n").as_bytes())?;
        out.write(&dir.join("curves.csv"), report.curves_csv().as_bytes())?;
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        out.write(&dir.join("summary.json"), text.as_bytes())?;
        log::info!(
            "{variant} {} {}: best epoch {} of {}, val mse {:.5}, {:.1} s",
            unit.subject,
            unit.task.key(),
            report.best_epoch,
            report.epochs.len(),
            report.best_val_mse,
            report.wall_clock_s
        );
        summaries.push(summary);
    }
    let text = serde_json::to_string_pretty(&summaries).expect("summaries serialize") + "\n";
    out.write(&area_dir.join("summary.json"), text.as_bytes())?;
    Ok(summaries.is_empty())
}

fn ablate(cfg: &PipelineConfig, out: &mut Outputs, warnings: &mut Vec<String>) -> Result<bool> {
    let empty = train_units(cfg, &cfg.ablation.variants, "ablation", out, warnings)?;
    let summaries = load_summaries(&cfg.out().join("ablation").join("summary.json"))?;
    let mut csv = String::from("variant,subject,task,pct_acceptable\n");
    for s in &summaries {
        let _ = writeln!(csv, "{},{},{},{}", s.variant, s.subject, s.task.key(), s.pct_acceptable);
    }
    out.write(&cfg.out().join("ablation").join("ablation.csv"), csv.as_bytes())?;
    Ok(empty)
}

fn load_summaries(path: &Path) -> Result<Vec<UnitSummary>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))
}

/// Everything computed for one window of a unit.
struct WindowMetrics {
    session: String,
    window: usize,
    r: Option<f64>,
    valid: bool,
    dtw_distance: Option<f64>,
    umax_lag_ms: Option<f64>,
    peak_xcorr: Option<f64>,
    residual_lag_ms: Option<f64>,
}

struct UnitAnalysis {
    subject: String,
    task: TaskKind,
    rows: Vec<WindowMetrics>,
    feature_sign: f64,
    features: Vec<Vec<f64>>,
    residual_curves: Vec<Vec<f64>>,
    lags_ms: Vec<f64>,
}

fn analyze_unit(cfg: &PipelineConfig, unit: &UnitIndex) -> Result<Option<UnitAnalysis>> {
    let dir = model_dir(cfg.out(), "models", Variant::M0, &unit.subject, unit.task);
    let ck_path = dir.join("checkpoint.json");
    if !ck_path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(&ck_path)?;
    let state = ModelState::from_checkpoint(&ck)?;
    let windows = load_windows(&cfg.out().join(&unit.file))?;
    let m = &cfg.metrics;
    let fs = cfg.model.fs;
    let preds = model::predict_all(&state, &windows)?;
    let gated: Vec<(Option<f64>, bool)> = preds
        .iter()
        .zip(&windows)
        .map(|(p, w)| (pearson_r(p, &w.target).ok(), model::validity_gate(p, &w.target, m.tau, m.strict_gate)))
        .collect();
    let features: Vec<Option<Vec<f64>>> = windows
        .par_iter()
        .zip(&gated)
        .map(|(w, &(_, valid))| if valid { model::extract_feature(&state, &w.eeg).map(Some) } else { Ok(None) })
        .collect::<Result<_>>()?;
    // The spatial filter's sign is arbitrary; orient it once per unit.
    let feature_r: Vec<f64> = features
        .iter()
        .zip(&windows)
        .filter_map(|(f, w)| f.as_ref().and_then(|f| pearson_r(f, &w.target).ok()))
        .collect();
    let feature_sign = if !feature_r.is_empty() && median(&feature_r) < 0.0 { -1.0 } else { 1.0 };
    let per_window: Vec<_> = features
        .par_iter()
        .zip(&windows)
        .map(|(f, w)| -> Result<Option<(f64, f64, f64, Vec<f64>, f64, Vec<f64>)>> {
            let Some(f) = f else { return Ok(None) };
            let f: Vec<f64> = f.iter().map(|v| v * feature_sign).collect();
            let (a, b) = if m.znormalize { (znormalize(&f), znormalize(&w.target)) } else { (f.clone(), w.target.clone()) };
            let d = dtw(&a, &b, m.dtw_radius)?;
            let aligned = dtw_align(&a, b.len(), &d.path, m.align)?;
            let (Ok(raw), Ok(res)) = (normalized_xcorr(&f, &w.target, m.max_lag, fs), normalized_xcorr(&aligned, &b, m.max_lag, fs)) else {
                return Ok(None);
            };
            Ok(Some((d.distance, raw.umax_lag_ms, raw.peak_value, res.values, res.umax_lag_ms, f)))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(windows.len());
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    let mut feats = Vec::new();
    let mut curves = Vec::new();
    let mut lags_ms = Vec::new();
    for ((w, &(r, valid)), pw) in windows.iter().zip(&gated).zip(per_window) {
        let n = counters.entry(w.key.session_id.clone()).or_default();
        let mut row = WindowMetrics {
            session: w.key.session_id.clone(),
            window: *n,
            r,
            valid,
            dtw_distance: None,
            umax_lag_ms: None,
            peak_xcorr: None,
            residual_lag_ms: None,
        };
        *n += 1;
        if let Some((dist, lag, peak, curve, residual, f)) = pw {
            row.dtw_distance = Some(dist);
            row.umax_lag_ms = Some(lag);
            row.peak_xcorr = Some(peak);
            row.residual_lag_ms = Some(residual);
            if lags_ms.is_empty() {
                lags_ms = (0..curve.len()).map(|i| (i as f64 - m.max_lag as f64) * 1000.0 / fs).collect();
            }
            curves.push(curve);
            feats.push(f);
        }
        rows.push(row);
    }
    Ok(Some(UnitAnalysis {
        subject: unit.subject.clone(),
        task: unit.task,
        rows,
        feature_sign,
        features: feats,
        residual_curves: curves,
        lags_ms,
    }))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn med(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| median(&v))
}

fn analyze(cfg: &PipelineConfig, out: &mut Outputs, warnings: &mut Vec<String>) -> Result<bool> {
    let index = load_index(cfg)?;
    let root = cfg.out().join("analysis");
    if root.exists() {
        fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    }
    let results = index.par_iter().map(|u| analyze_unit(cfg, u)).collect::<Result<Vec<_>>>()?;
    let units: Vec<UnitAnalysis> = results.into_iter().flatten().collect();
    if units.is_empty() {
        return Err(stage_order(Stage::Analyze, Stage::Train, "no trained M0 checkpoints"));
    }
    let mut metrics = String::from("subject,session,task,window,r,valid,dtw_distance,umax_lag_ms,peak_xcorr\n");
    let mut validity = String::from("subject,task,valid,invalid,pct_valid\n");
    let mut lags = String::from("subject,task,valid_windows,feature_sign,median_umax_lag_ms,median_residual_lag_ms,median_peak_xcorr\n");
    let mut xcorr = String::from("subject,task,lag_ms,mean,min,max\n");
    let mut total_valid = 0;
    for u in &units {
        for r in &u.rows {
            let _ = writeln!(
                metrics,
                "{},{},{},{},{},{},{},{},{}",
                u.subject,
                r.session,
                u.task.key(),
                r.window,
                opt(r.r),
                r.valid,
                opt(r.dtw_distance),
                opt(r.umax_lag_ms),
                opt(r.peak_xcorr)
            );
        }
        let valid = u.rows.iter().filter(|r| r.valid).count();
        total_valid += u.features.len();
        let pct = 100.0 * valid as f64 / u.rows.len().max(1) as f64;
        let _ = writeln!(validity, "{},{},{valid},{},{pct}", u.subject, u.task.key(), u.rows.len() - valid);
        let _ = writeln!(
            lags,
            "{},{},{},{},{},{},{}",
            u.subject,
            u.task.key(),
            u.features.len(),
            u.feature_sign,
            opt(med(u.rows.iter().filter_map(|r| r.umax_lag_ms))),
            opt(med(u.rows.iter().filter_map(|r| r.residual_lag_ms))),
            opt(med(u.rows.iter().filter_map(|r| r.peak_xcorr)))
        );
        let mut psd = String::from("freq,mean,min,max\n");
        if u.features.is_empty() {
            warnings.push(format!("{} {}: no valid windows", u.subject, u.task.key()));
        } else {
            let s = psd_summary(&u.features, &cfg.metrics.welch)?;
            for i in 0..s.freqs.len() {
                let _ = writeln!(psd, "{},{},{},{}", s.freqs[i], s.mean_psd[i], s.min_envelope[i], s.max_envelope[i]);
            }
            for (i, lag) in u.lags_ms.iter().enumerate() {
                let col = u.residual_curves.iter().map(|c| c[i]);
                let mean = col.clone().sum::<f64>() / u.residual_curves.len() as f64;
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                let _ = writeln!(xcorr, "{},{},{lag},{mean},{lo},{hi}", u.subject, u.task.key());
            }
        }
        out.write(&root.join("psd").join(format!("{}_{}.csv", u.subject, u.task.key())), psd.as_bytes())?;
    }
    out.write(&root.join("metrics.csv"), metrics.as_bytes())?;
    out.write(&root.join("validity.csv"), validity.as_bytes())?;
    out.write(&root.join("lags.csv"), lags.as_bytes())?;
    out.write(&root.join("xcorr.csv"), xcorr.as_bytes())?;
    if total_valid == 0 {
        warnings.push("zero valid windows; metric outputs are empty".into());
    }
    Ok(total_valid == 0)
}

/// Parsed row of `analysis/metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MetricRow {
    pub subject: String,
    pub session: String,
    pub task: TaskKind,
    pub window: usize,
    pub valid: bool,
    pub dtw_distance: Option<f64>,
    pub umax_lag_ms: Option<f64>,
}

pub(crate) fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::parse(path, format!("line {}: expected 9 fields", ln + 1)));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::parse(path, format!("line {}: bad number {s:?}", ln + 1)))
            }
        };
        rows.push(MetricRow {
            subject: f[0].to_string(),
            session: f[1].to_string(),
            task: f[2].parse()?,
            window: f[3].parse().map_err(|_| Error::parse(path, format!("line {}: bad window", ln + 1)))?,
            valid: f[5] == "true",
            dtw_distance: num(f[6])?,
            umax_lag_ms: num(f[7])?,
        });
    }
    Ok(rows)
}

fn stats(cfg: &PipelineConfig, out: &mut Outputs, warnings: &mut Vec<String>) -> Result<bool> {
    let rows = read_metrics(&cfg.out().join("analysis").join("metrics.csv"))?;
    let mut subjects: Vec<&str> = rows.iter().map(|r| r.subject.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::InsufficientData(format!("subject comparison needs 2 groups, found {}", subjects.len())));
    }
    if subjects.len() > 2 {
        warnings.push(format!("comparing {} and {} only; {} more subjects ignored", subjects[0], subjects[1], subjects.len() - 2));
    }
    let (a, b) = (subjects[0], subjects[1]);
    let mut csv = String::from("task,p_value,median_a,median_b,direction\n");
    let mut rows_out = 0;
    for &task in &cfg.tasks {
        let sample = |s: &str| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.subject == s && r.task == task && r.valid)
                .filter_map(|r| r.dtw_distance)
                .collect()
        };
        let (x, y) = (sample(a), sample(b));
        if x.is_empty() || y.is_empty() {
            warnings.push(format!("{}: no valid DTW distances for {}", task.key(), if x.is_empty() { a } else { b }));
            continue;
        }
        let u = mann_whitney_u(&x, &y, cfg.metrics.alpha, cfg.metrics.u_method)?;
        let _ = writeln!(csv, "{},{},{},{},{}", task.key(), u.p_value, u.median_x, u.median_y, u.direction_label(a, b));
        rows_out += 1;
    }
    out.write(&cfg.out().join("stats.csv"), csv.as_bytes())?;
    Ok(rows_out == 0)
}

#[derive(Serialize)]
struct BundleSummary<'a> {
    config_hash: String,
    seed: u64,
    version: &'static str,
    windows: Vec<UnitIndex>,
    training: Vec<UnitSummary>,
    ablation: Vec<UnitSummary>,
    validity_csv: &'a str,
    lags_csv: &'a str,
    stats_csv: &'a str,
    files: BTreeMap<String, String>,
}

pub const BUNDLE_FIGURES: [&str; 6] = [
    "fig4_qc.csv",
    "fig7_ablation.csv",
    "fig8_validity.csv",
    "fig9_psd.csv",
    "fig10_dtw.csv",
    "fig11_xcorr.csv",
];

fn report(cfg: &PipelineConfig, out: &mut Outputs) -> Result<bool> {
    let o = cfg.out();
    let bundle = o.join("report");
    if bundle.exists() {
        fs::remove_dir_all(&bundle).map_err(|e| Error::io(&bundle, e))?;
    }
    let index = load_index(cfg)?;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let read = |p: PathBuf| fs::read(&p).map_err(|e| Error::io(&p, e));
    files.insert("fig4_qc.csv".into(), read(o.join("preprocessed").join("qc.csv"))?);
    files.insert("fig7_ablation.csv".into(), read(o.join("ablation").join("ablation.csv"))?);
    let validity = read_text(&o.join("analysis").join("validity.csv"))?;
    files.insert("fig8_validity.csv".into(), validity.clone().into_bytes());
    let mut psd = String::from("subject,task,freq,mean,min,max\n");
    for u in &index {
        let p = o.join("analysis").join("psd").join(format!("{}_{}.csv", u.subject, u.task.key()));
        if p.exists() {
            for line in read_text(&p)?.lines().skip(1) {
                let _ = writeln!(psd, "{},{},{line}", u.subject, u.task.key());
            }
        }
    }
    files.insert("fig9_psd.csv".into(), psd.into_bytes());
    let mut dtw_csv = String::from("subject,task,session,window,dtw_distance\n");
    for r in read_metrics(&o.join("analysis").join("metrics.csv"))? {
        if let (true, Some(d)) = (r.valid, r.dtw_distance) {
            let _ = writeln!(dtw_csv, "{},{},{},{},{d}", r.subject, r.task.key(), r.session, r.window);
        }
    }
    files.insert("fig10_dtw.csv".into(), dtw_csv.into_bytes());
    files.insert("fig11_xcorr.csv".into(), read(o.join("analysis").join("xcorr.csv"))?);
    let lags = read_text(&o.join("analysis").join("lags.csv"))?;
    let stats = read_text(&o.join("stats.csv"))?;
    files.insert("table3_stats.csv".into(), stats.clone().into_bytes());
    files.insert("lags.csv".into(), lags.clone().into_bytes());
    let mut digests = BTreeMap::new();
    for (name, bytes) in &files {
        let path = bundle.join(name);
        out.write(&path, bytes)?;
        digests.insert(name.clone(), out.files[&rel_key(o, &path)].clone());
    }
    let summary = BundleSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        windows: index,
        training: load_summaries(&o.join("models").join("summary.json"))?,
        ablation: load_summaries(&o.join("ablation").join("summary.json"))?,
        validity_csv: &validity,
        lags_csv: &lags,
        stats_csv: &stats,
        files: digests,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    out.write(&bundle.join("summary.json"), text.as_bytes())?;
    Ok(false)
}

fn write_run_record(cfg: &PipelineConfig) -> Result<()> {
    let o = cfg.out();
    let mut stages = Vec::new();
    let mut files = BTreeMap::new();
    for st in Stage::ALL {
        if let Some(rec) = StageRecord::load(o, st)? {
            stages.push(StageTiming {
                stage: st,
                wall_clock_s: rec.wall_clock_s,
            });
            files.extend(rec.outputs);
            let path = StageRecord::path(o, st);
            files.insert(rel_key(o, &path), super::file_digest(&path)?);
        }
    }
    let truth = o.join("ground_truth.json");
    if truth.exists() {
        files.insert(rel_key(o, &truth), super::file_digest(&truth)?);
    }
    let mut versions = BTreeMap::new();
    versions.insert("ocutime".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("checkpoint_format".to_string(), crate::autodiff::checkpoint::CHECKPOINT_VERSION.to_string());
    let record = RunRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        versions,
        stages,
        files,
    };
    let path = RunRecord::path(o);
    let text = serde_json::to_string_pretty(&record).expect("run record serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
