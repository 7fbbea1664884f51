//! End-to-end acceptance checks. Each test prints one verdict line to stderr
//! (bypassing libtest capture) and then asserts it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ocutime::autodiff::{grad_check, AdamConfig, LstmParams, Padding1d, Padding2d, Tape, Tensor};
use ocutime::metrics::{dtw, mann_whitney_u, UMethod};
use ocutime::model::{self, ConvLayer, KernelInit, KernelTable, ModelConfig, ModelState, TrainConfig, Variant};
use ocutime::pipeline::{run_stage, PipelineConfig, Stage};
use ocutime::preprocess::{BandPassSpec, SosFilter};
use ocutime::rdwt::{rdwt_forward, rdwt_inverse, sym2_filter_bank};
use ocutime::signal::{make_windows, MultiChannelRecord, TargetTrajectory, TaskKind, WindowConfig, WindowKey};
use ocutime::synth::{NoiseSpec, SubjectSpec, Truncation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

#[test]
fn c01_rdwt_perfect_reconstruction() {
    let bank = sym2_filter_bank();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = uniform(&mut r, 6 * 256);
        let c = rdwt_forward(&x, 1, 6, 4, 100.0, &bank).unwrap();
        let y = rdwt_inverse(&c, &bank).unwrap();
        worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(1, "rdwt_reconstruction", worst <= 1e-10 && secs < 5.0, &format!("max |x - x̂| = {worst:.2e}, {secs:.2} s for 1000 signals"));
}

/// Wavelet analysis, zero-phase filtering of every plane with `kernels`, synthesis.
fn wavelet_filter(x: &[f64], kernels: &[Vec<f64>]) -> Vec<f64> {
    let bank = Arc::new(sym2_filter_bank());
    let len = x.len();
    let mut t = Tape::new();
    let xv = t.constant(x.to_vec(), &[1, len]).unwrap();
    let c = t.rdwt(xv, 4, &bank).unwrap();
    let mut planes = Vec::new();
    for (band, k) in kernels.iter().enumerate() {
        let p = t.slice(c, 1, band, 1).unwrap();
        let p = t.reshape(p, &[1, len]).unwrap();
        let kv = t.constant(k.clone(), &[1, 1, k.len()]).unwrap();
        let f = model::zero_phase_conv(&mut t, p, kv, kv).unwrap();
        planes.push(t.reshape(f, &[1, 1, len]).unwrap());
    }
    let c2 = t.concat(&planes, 1).unwrap();
    let y = t.irdwt(c2, &bank).unwrap();
    t.value(y).to_vec()
}

#[test]
fn c02_zero_phase_wavelet_filtering() {
    let sizes = [63usize, 15, 7, 3, 3];
    let identity: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&k| (0..k).map(|i| if i == k / 2 { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut r = ChaCha8Rng::seed_from_u64(102);
    let mut worst_id = 0.0f64;
    for _ in 0..20 {
        let x = uniform(&mut r, 256);
        let y = wavelet_filter(&x, &identity);
        worst_id = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(worst_id, f64::max);
    }
    let mut worst_pal = 0.0f64;
    for case in 0..100 {
        let k = [3usize, 7, 15, 63][case % 4];
        let kernel = uniform(&mut r, k);
        let n = 2 * k + 1 + 2 * (case / 4);
        let h = model::effective_impulse_response(&kernel, n).unwrap();
        for i in 0..n {
            worst_pal = worst_pal.max((h[i] - h[n - 1 - i]).abs());
        }
    }
    verdict(
        2,
        "zero_phase_filtering",
        worst_id <= 1e-12 && worst_pal <= 1e-10,
        &format!("identity error {worst_id:.2e}, palindrome error {worst_pal:.2e} over 100 kernels"),
    );
}

fn param_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::param(uniform(r, shape.iter().product()), shape).unwrap()
}

/// Weighted sum so each output coordinate gets its own gradient.
fn probe(t: &mut Tape, y: ocutime::autodiff::Var, seed: u64) -> ocutime::Result<ocutime::autodiff::Var> {
    let shape = t.shape(y).to_vec();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut r, t.value(y).len());
    let wv = t.constant(w, &shape)?;
    let p = t.mul(y, wv)?;
    t.sum(p)
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng, u64) -> (f64, usize)>;

fn op_case<F>(build: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static, f: F) -> OpCase
where
    F: Fn(&mut Tape, &[ocutime::autodiff::Var]) -> ocutime::Result<ocutime::autodiff::Var> + Copy + 'static,
{
    Box::new(move |r, seed| {
        let inputs = build(r);
        let res = grad_check(|t, v| { let y = f(t, v)?; probe(t, y, seed) }, &inputs, 1e-5).unwrap();
        (res.max_rel_error, res.checked)
    })
}

#[test]
fn c03_gradient_verification() {
    let bank = Arc::new(sym2_filter_bank());
    let b1 = bank.clone();
    let b2 = bank.clone();
    let mut cases: Vec<(&str, OpCase)> = vec![
        ("add", op_case(|r| vec![param_tensor(r, &[3, 4]), param_tensor(r, &[3, 4])], |t, v| t.add(v[0], v[1]))),
        ("sub", op_case(|r| vec![param_tensor(r, &[3, 4]), param_tensor(r, &[3, 4])], |t, v| t.sub(v[0], v[1]))),
        ("mul", op_case(|r| vec![param_tensor(r, &[3, 4]), param_tensor(r, &[3, 4])], |t, v| t.mul(v[0], v[1]))),
        ("scale", op_case(|r| vec![param_tensor(r, &[5])], |t, v| t.scale(v[0], -1.7))),
        ("matmul", op_case(|r| vec![param_tensor(r, &[3, 5]), param_tensor(r, &[5, 2])], |t, v| t.matmul(v[0], v[1]))),
        ("tanh", op_case(|r| vec![param_tensor(r, &[8])], |t, v| t.tanh(v[0]))),
        ("sigmoid", op_case(|r| vec![param_tensor(r, &[8])], |t, v| t.sigmoid(v[0]))),
        ("relu", op_case(|r| vec![param_tensor(r, &[8])], |t, v| t.relu(v[0]))),
        ("elu", op_case(|r| vec![param_tensor(r, &[8])], |t, v| t.elu(v[0]))),
        ("sum", op_case(|r| vec![param_tensor(r, &[2, 3])], |t, v| t.sum(v[0]))),
        ("mean", op_case(|r| vec![param_tensor(r, &[2, 3])], |t, v| t.mean(v[0]))),
        ("mse_loss", op_case(|r| vec![param_tensor(r, &[6]), param_tensor(r, &[6])], |t, v| t.mse_loss(v[0], v[1]))),
        ("reshape", op_case(|r| vec![param_tensor(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]))),
        ("transpose", op_case(|r| vec![param_tensor(r, &[2, 5])], |t, v| t.transpose(v[0]))),
        ("time_reverse", op_case(|r| vec![param_tensor(r, &[2, 7])], |t, v| t.time_reverse(v[0]))),
        ("slice", op_case(|r| vec![param_tensor(r, &[2, 4, 3])], |t, v| t.slice(v[0], 1, 1, 2))),
        ("concat", op_case(|r| vec![param_tensor(r, &[2, 3]), param_tensor(r, &[2, 2])], |t, v| t.concat(&[v[0], v[1]], 1))),
        (
            "conv1d_causal_dilated",
            op_case(
                |r| vec![param_tensor(r, &[2, 12]), param_tensor(r, &[3, 2, 3]), param_tensor(r, &[3])],
                |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 1, Padding1d::Causal),
            ),
        ),
        (
            "conv1d_same_grouped",
            op_case(
                |r| vec![param_tensor(r, &[4, 10]), param_tensor(r, &[4, 2, 5])],
                |t, v| t.conv1d(v[0], v[1], None, 1, 2, Padding1d::Same),
            ),
        ),
        (
            "conv2d_same",
            op_case(
                |r| vec![param_tensor(r, &[1, 3, 9]), param_tensor(r, &[2, 1, 1, 5]), param_tensor(r, &[2])],
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding2d::Same),
            ),
        ),
        (
            "conv2d_valid",
            op_case(
                |r| vec![param_tensor(r, &[2, 3, 6]), param_tensor(r, &[1, 2, 3, 1])],
                |t, v| t.conv2d(v[0], v[1], None, Padding2d::Valid),
            ),
        ),
        ("channel_norm", op_case(|r| vec![param_tensor(r, &[3, 16])], |t, v| t.channel_norm(v[0]))),
        (
            "lstm_forward",
            op_case(
                |r| vec![param_tensor(r, &[5, 3]), param_tensor(r, &[3, 8]), param_tensor(r, &[2, 8]), param_tensor(r, &[8])],
                |t, v| t.lstm(v[0], v[1], v[2], v[3], false),
            ),
        ),
        (
            "lstm_reverse",
            op_case(
                |r| vec![param_tensor(r, &[5, 3]), param_tensor(r, &[3, 8]), param_tensor(r, &[2, 8]), param_tensor(r, &[8])],
                |t, v| t.lstm(v[0], v[1], v[2], v[3], true),
            ),
        ),
        (
            "lstm_cell",
            op_case(
                |r| {
                    let shapes: [&[usize]; 6] = [&[1, 3], &[1, 2], &[1, 2], &[3, 8], &[2, 8], &[8]];
                    shapes.iter().map(|s| param_tensor(r, s)).collect()
                },
                |t, v| {
                    let p = LstmParams { w_ih: v[3], w_hh: v[4], b: v[5] };
                    let (h, c) = ocutime::autodiff::lstm_cell(t, v[0], v[1], v[2], &p)?;
                    t.add(h, c)
                },
            ),
        ),
    ];
    cases.push((
        "rdwt",
        Box::new(move |r, seed| {
            let x = vec![param_tensor(r, &[2, 32])];
            let res = grad_check(|t, v| { let y = t.rdwt(v[0], 4, &b1)?; probe(t, y, seed) }, &x, 1e-5).unwrap();
            (res.max_rel_error, res.checked)
        }),
    ));
    cases.push((
        "irdwt",
        Box::new(move |r, seed| {
            let x = vec![param_tensor(r, &[2, 5, 32])];
            let res = grad_check(|t, v| { let y = t.irdwt(v[0], &b2)?; probe(t, y, seed) }, &x, 1e-5).unwrap();
            (res.max_rel_error, res.checked)
        }),
    ));

    let mut worst_op = ("", 0.0f64);
    let mut failures = Vec::new();
    for (name, case) in &cases {
        for seed in 0..20u64 {
            let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (err, checked) = case(&mut r, seed);
            if err > worst_op.1 {
                worst_op = (name, err);
            }
            if !(err <= 1e-4 && checked > 0) {
                failures.push(format!("{name}#{seed}: {err:.2e}"));
            }
        }
    }

    // Full-size M0 loss: a central difference along one direction per
    // parameter block, mixing the block gradient with a random vector so the
    // directional slope stays well above finite-difference roundoff.
    let mut worst_model = 0.0f64;
    let mut checked_model = 0;
    let mut kinks = 0;
    for seed in 0..20u64 {
        let cfg = ModelConfig { seed, ..ModelConfig::default() };
        let mut state = ModelState::init(&cfg).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2000 + seed);
        for p in state.params.iter_mut().filter(|p| p.name.starts_with("wavelet")) {
            p.data.iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
        }
        let eeg = uniform(&mut r, 6 * 256);
        let target: Vec<f64> = (0..256).map(|i| 0.5 + 0.4 * (i as f64 * 0.05 + seed as f64).sin()).collect();
        let loss = |params: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<_> = params
                .iter()
                .zip(&state.params)
                .map(|(d, p)| tape.constant(d.clone(), &p.shape).unwrap())
                .collect();
            let (_, out) = model::build_graph(&mut tape, &state, &vars, &eeg, false).unwrap();
            let y = tape.constant(target.clone(), &[256]).unwrap();
            let l = tape.mse_loss(out.unwrap(), y).unwrap();
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let vars: Vec<_> = state.params.iter().map(|p| tape.variable(p.data.clone(), &p.shape).unwrap()).collect();
        let (_, out) = model::build_graph(&mut tape, &state, &vars, &eeg, false).unwrap();
        let y = tape.constant(target.clone(), &[256]).unwrap();
        let l = tape.mse_loss(out.unwrap(), y).unwrap();
        let base = tape.scalar(l);
        let grads = tape.backward(l).unwrap();
        let theta: Vec<Vec<f64>> = state.params.iter().map(|p| p.data.clone()).collect();
        for (b, p) in state.params.iter().enumerate() {
            let g = grads.get(vars[b]).unwrap();
            let unit = |v: Vec<f64>| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let rnd = unit(uniform(&mut r, g.len()));
            let dir = unit(unit(g.to_vec()).iter().zip(&rnd).map(|(a, b)| a + b).collect());
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let shifted = |s: f64| {
                let mut th = theta.clone();
                th[b].iter_mut().zip(&dir).for_each(|(t, d)| *t += s * d);
                loss(&th)
            };
            // A step that straddles a ReLU kink shows as disagreeing one-sided
            // slopes; shrink it until they agree.
            let mut numeric = None;
            let mut sides = (0.0, 0.0);
            for eps in [1e-5, 1e-6, 1e-7] {
                let (up, down) = (shifted(eps), shifted(-eps));
                sides = ((up - base) / eps, (base - down) / eps);
                if (sides.0 - sides.1).abs() <= 1e-4 * sides.0.abs().max(sides.1.abs()) {
                    numeric = Some((up - down) / (2.0 * eps));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                kinks += 1;
                continue;
            };
            let (dp, dm) = sides;
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst_model = worst_model.max(err);
            checked_model += 1;
            if err > 1e-4 {
                failures.push(format!("M0#{seed} {}: {analytic:.6e} vs {numeric:.6e} (one-sided {dp:.6e} / {dm:.6e})", p.name));
            }
        }
    }
    verdict(
        3,
        "gradient_verification",
        failures.is_empty(),
        &format!(
            "{} primitives x 20 seeds, worst {} {:.2e}; full M0 x 20 seeds, {checked_model} block directions ({kinks} kinked), worst {worst_model:.2e}; failures {:?}",
            cases.len(),
            worst_op.0,
            worst_op.1,
            failures
        ),
    );
}

/// Unbanded full-table DP written from the recurrence.
fn dtw_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![f64::INFINITY; m + 1]; n + 1];
    d[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let prev = d[i - 1][j - 1].min(d[i - 1][j]).min(d[i][j - 1]);
            d[i][j] = (a[i - 1] - b[j - 1]).abs() + prev;
        }
    }
    d[n][m]
}

#[test]
fn c04_dtw_oracle_equivalence() {
    let mut r = ChaCha8Rng::seed_from_u64(104);
    let mut mismatches = 0;
    let mut self_nonzero = 0;
    for _ in 0..500 {
        let n = r.random_range(1..=32);
        let m = r.random_range(1..=32);
        let a = uniform(&mut r, n);
        let b = uniform(&mut r, m);
        let radius = n.max(m) + r.random_range(0..4);
        let got = dtw(&a, &b, radius).unwrap().distance;
        if got != dtw_oracle(&a, &b) {
            mismatches += 1;
        }
        if dtw(&a, &a, r.random_range(0..=n)).unwrap().distance != 0.0 {
            self_nonzero += 1;
        }
    }
    verdict(
        4,
        "dtw_oracle",
        mismatches == 0 && self_nonzero == 0,
        &format!("{mismatches}/500 distance mismatches, {self_nonzero} nonzero self-distances"),
    );
}

fn run_stages(cfg: &PipelineConfig, stages: &[Stage]) {
    for &s in stages {
        run_stage(cfg, s).unwrap_or_else(|e| panic!("{}: {e}", s.name()));
    }
}

fn window_counts(out: &Path) -> BTreeMap<(String, String), (usize, usize)> {
    let text = fs::read_to_string(out.join("windows").join("summary.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[0].to_string(), f[1].to_string()), (f[2].parse().unwrap(), f[3].parse().unwrap()))
        })
        .collect()
}

#[test]
fn c05_windowing_counts() {
    let seg = MultiChannelRecord::new(vec![vec![0.0; 1376]; 6], 100.0).unwrap();
    let target = TargetTrajectory::new(vec![0.0; 1376], 100.0, None);
    let key = WindowKey {
        subject_id: "S1".into(),
        session_id: "sess01".into(),
        trial_id: "trial01".into(),
        task: TaskKind::HorizontalSaccade,
    };
    let single = make_windows(&seg, &target, &WindowConfig::default(), &key).unwrap().windows.len();

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.paths.output_dir = dir.path().to_path_buf();
    cfg.simulation.subjects = vec![
        SubjectSpec { id: "S1".into(), lag_ms: 80.0 },
        SubjectSpec { id: "S2".into(), lag_ms: 200.0 },
    ];
    cfg.simulation.truncations = vec![Truncation {
        subject: "S2".into(),
        session: 4,
        trial: 2,
        task: TaskKind::HorizontalSaccade,
        keep_s: 9.87,
    }];
    run_stages(&cfg, &[Stage::Simulate, Stage::Preprocess, Stage::Window]);
    let counts = window_counts(dir.path());
    let full_ok = TaskKind::ALL.iter().all(|t| counts[&("S1".to_string(), t.key().to_string())] == (2850, 0));
    let truncated = counts[&("S2".to_string(), "horizontal_saccade".to_string())];
    let others_ok = TaskKind::ALL[1..].iter().all(|t| counts[&("S2".to_string(), t.key().to_string())] == (2850, 0));
    verdict(
        5,
        "windowing_counts",
        single == 57 && full_ok && others_ok && truncated == (2793, 1),
        &format!("13.76 s segment -> {single}; 50 trial-sessions -> {:?}; one rejected -> {truncated:?}", counts.values().next()),
    );
}

#[test]
fn c06_mann_whitney() {
    let hand = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0.05, UMethod::Exact).unwrap();
    let hand_ok = hand.u_statistic == 0.0 && (hand.p_value - 0.1).abs() < 1e-12;
    let mut r = ChaCha8Rng::seed_from_u64(106);
    let normal = rand_distr::StandardNormal;
    let mut worst = 0.0f64;
    for n in 5..=10 {
        for m in 5..=10 {
            for rep in 0..5 {
                let shift = 0.3 * rep as f64;
                let x: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(normal)).collect();
                let y: Vec<f64> = (0..m).map(|_| shift + r.sample::<f64, _>(normal)).collect();
                let e = mann_whitney_u(&x, &y, 0.05, UMethod::Exact).unwrap().p_value;
                let a = mann_whitney_u(&x, &y, 0.05, UMethod::Asymptotic).unwrap().p_value;
                worst = worst.max((e - a).abs());
            }
        }
    }
    verdict(
        6,
        "mann_whitney",
        hand_ok && worst <= 0.02,
        &format!("[1,2,3] vs [4,5,6]: U = {}, p = {}; worst |p_exact - p_normal| = {worst:.4} over 5 <= n, m <= 10", hand.u_statistic, hand.p_value),
    );
}

/// Least-squares fit of `a sin + b cos + c` at frequency `f`; returns (amplitude, phase).
fn fit_sinusoid(y: &[f64], f: f64, fs: f64, range: std::ops::Range<usize>) -> (f64, f64) {
    let rows = range.len();
    let a = nalgebra::DMatrix::from_fn(rows, 3, |i, j| {
        let w = 2.0 * std::f64::consts::PI * f * (range.start + i) as f64 / fs;
        [w.sin(), w.cos(), 1.0][j]
    });
    let b = nalgebra::DVector::from_iterator(rows, y[range].iter().copied());
    let sol = a.svd(true, true).solve(&b, 1e-14).unwrap();
    ((sol[0] * sol[0] + sol[1] * sol[1]).sqrt(), sol[1].atan2(sol[0]))
}

#[test]
fn c07_filter_specs() {
    let fs = 100.0;
    let n = 2000;
    let f = SosFilter::butterworth_bandpass(&BandPassSpec::default(), fs).unwrap();
    let interior = n / 10..n - n / 10;
    let dc = f.filtfilt(&vec![1.0; n]).unwrap();
    let dc_peak = dc[interior.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sine = |hz: f64| -> Vec<f64> { (0..n).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / fs).sin()).collect() };
    let (amp10, phase10) = fit_sinusoid(&f.filtfilt(&sine(10.0)).unwrap(), 10.0, fs, interior.clone());
    let (amp45, _) = fit_sinusoid(&f.filtfilt(&sine(45.0)).unwrap(), 45.0, fs, interior);
    verdict(
        7,
        "filter_specs",
        dc_peak <= 1e-6 && (0.95..=1.0).contains(&amp10) && phase10.abs() <= 1e-3 && amp45 <= 0.06,
        &format!("DC {dc_peak:.2e}; 10 Hz amplitude {amp10:.5}, phase {phase10:.2e} rad; 45 Hz amplitude {amp45:.2e}"),
    );
}

/// Configuration for the latency-recovery runs: one subject, horizontal
/// saccades, a zero-phase temporal filter started at the identity.
fn latency_config(out: &Path, lag_ms: f64, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        tasks: vec![TaskKind::HorizontalSaccade],
        ..PipelineConfig::default()
    };
    cfg.paths.output_dir = out.to_path_buf();
    cfg.simulation.subjects = vec![SubjectSpec { id: "S1".into(), lag_ms }];
    cfg.simulation.sessions = 1;
    cfg.simulation.trials = 3;
    cfg.model.temporal_zero_phase = true;
    cfg.model.temporal_init = KernelInit::Impulse;
    cfg.train = TrainConfig {
        epochs: 60,
        patience: 60,
        batch: 16,
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    cfg
}

fn lag_estimate(out: &Path) -> Option<f64> {
    let text = fs::read_to_string(out.join("analysis").join("lags.csv")).unwrap();
    let header: Vec<&str> = text.lines().next()?.split(',').collect();
    let col = header.iter().position(|h| *h == "median_umax_lag_ms")?;
    text.lines().nth(1)?.split(',').nth(col)?.parse().ok()
}

#[test]
fn c08_latency_recovery() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut all_ok = true;
    for lag in [-200.0, 0.0, 200.0] {
        let mut hits = 0;
        let mut est = Vec::new();
        for seed in 1..=3u64 {
            let dir = tempfile::tempdir().unwrap();
            let cfg = latency_config(dir.path(), lag, seed);
            run_stages(&cfg, &[Stage::Simulate, Stage::Preprocess, Stage::Window, Stage::Train, Stage::Analyze]);
            let e = lag_estimate(dir.path());
            if e.is_some_and(|e| (e - lag).abs() <= 50.0) {
                hits += 1;
            }
            est.push(e.map_or("none".to_string(), |e| format!("{e:.0}")));
        }
        all_ok &= hits >= 2;
        lines.push(format!("{lag:+.0} ms -> [{}] {hits}/3", est.join(", ")));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(8, "latency_recovery", all_ok && secs <= 1800.0, &format!("{}; {secs:.0} s", lines.join("; ")));
}

#[test]
fn c09_ablation_harness() {
    // Structural equivalence at initialization, several seeds and inputs.
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let m0 = ModelState::init(&ModelConfig { seed, ..ModelConfig::default() }).unwrap();
        let m1 = ModelState::init(&ModelConfig { seed, variant: Variant::M1, ..ModelConfig::default() }).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(900 + seed);
        let x = uniform(&mut r, 6 * 256);
        let (a, b) = (model::forward(&m0, &x).unwrap(), model::forward(&m1, &x).unwrap());
        worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }

    let mut table_ok = true;
    let mut trend: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    for seed in 1..=3u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = latency_config(dir.path(), 80.0, seed);
        cfg.simulation.trials = 2;
        cfg.simulation.noise = NoiseSpec { gamma: 0.01, ..NoiseSpec::default() };
        cfg.train.epochs = 10;
        run_stages(&cfg, &[Stage::Simulate, Stage::Preprocess, Stage::Window, Stage::Ablate]);
        let text = fs::read_to_string(dir.path().join("ablation").join("ablation.csv")).unwrap();
        let mut lines = text.lines();
        table_ok &= lines.next() == Some("variant,subject,task,pct_acceptable");
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        table_ok &= rows.len() == 3;
        for row in &rows {
            trend.entry(row[0].parse().unwrap()).or_default().push(row[3].parse().unwrap());
        }
        // Identical splits across variants.
        let summaries: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("ablation").join("summary.json")).unwrap()).unwrap();
        let splits: Vec<(u64, u64)> = summaries
            .as_array()
            .unwrap()
            .iter()
            .map(|s| (s["train_windows"].as_u64().unwrap(), s["val_windows"].as_u64().unwrap()))
            .collect();
        table_ok &= splits.windows(2).all(|w| w[0] == w[1]);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let m0_best = trend.values().all(|v| mean(&trend[&Variant::M0]) >= mean(v));
    let summary: Vec<String> = trend.iter().map(|(k, v)| format!("{k} {:.1}%", mean(v))).collect();
    verdict(
        9,
        "ablation_harness",
        worst <= 1e-9 && table_ok,
        &format!(
            "M0-init vs M1 max diff {worst:.2e}; table shape ok: {table_ok}; trend (non-blocking) {}, M0 best: {m0_best}",
            summary.join(", ")
        ),
    );
}

fn tiny_pipeline(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: 21,
        tasks: vec![TaskKind::HorizontalSaccade, TaskKind::VerticalPursuit],
        ..PipelineConfig::default()
    };
    cfg.paths.output_dir = out.to_path_buf();
    cfg.simulation.sessions = 2;
    cfg.simulation.trials = 1;
    cfg.window = WindowConfig { win: 64, stride: 60, span: 1376 };
    cfg.model = ModelConfig {
        window: 64,
        output_len: 64,
        kernel_table: KernelTable { delta: 15, theta: 7, alpha: 5, beta: 3 },
        temporal_kernel: 9,
        conv_stack: vec![
            ConvLayer { filters: 6, kernel: 7, dilation: 1 },
            ConvLayer { filters: 4, kernel: 3, dilation: 2 },
        ],
        bilstm_units: 4,
        lstm_units: 3,
        ..ModelConfig::default()
    };
    cfg.train = TrainConfig {
        epochs: 4,
        batch: 8,
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    cfg.metrics.tau = 0.0;
    cfg.metrics.max_lag = 20;
    cfg.metrics.welch.segment = 32;
    cfg.metrics.welch.overlap = 16;
    cfg
}

fn bundle(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let root = out.join("report");
    fs::read_dir(&root)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn c10_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_stages(&tiny_pipeline(d.path()), &Stage::ALL);
    }
    let (ba, bb) = (bundle(a.path()), bundle(b.path()));
    let differing: Vec<&String> = ba.keys().filter(|k| ba.get(*k) != bb.get(*k)).collect();
    let same_names = ba.keys().eq(bb.keys());
    verdict(
        10,
        "determinism",
        same_names && differing.is_empty() && ba.len() >= 8,
        &format!("{} bundle files, differing: {differing:?}", ba.len()),
    );
}
