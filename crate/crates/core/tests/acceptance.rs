//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if
//! any non-soft criterion fails. Tolerances are pinned here.

mod common;

use std::time::Instant;

use common::{brute_force_switch, exponential, gaussian, kernel, max_rel_err, naive_conv, numeric_gradient, rng};
use rankswitch_core::data::synthetic_rank2;
use rankswitch_core::factorize::{factorize_tensor, reshape_to_conv};
use rankswitch_core::model::{WeightGrad, Weights};
use rankswitch_core::profiler::{
    arithmetic_intensity, default_stacks, select_k, FlopClock, ProfilerConfig, RooflineClock, WorkloadShape,
};
use rankswitch_core::rank::{scale_factor, scaled_stable_rank, stable_rank};
use rankswitch_core::regularization::{frobenius_decay_grads, l2_decay_grad};
use rankswitch_core::snapshot::{analyze_snapshots, decode_snapshot, encode_snapshot, network_records, AnalysisStatus};
use rankswitch_core::train::{cuttlefish_train, train_full_rank, SwitchReason, TrainOutput};
use rankswitch_core::trajectory::scan_switch_epoch;
use rankswitch_core::{
    svd, DenseMatrix, Execution, ModelSpec, Network, RankTrajectory, StabilizationConfig, TrainConfig, TrainOptions,
    WeightTensor,
};

const EY_TOL: f64 = 1e-8;
const EY_SECONDS: f64 = 30.0;
const IDENTITY_TOL: f64 = 1e-12;
const CONV_TOL: f64 = 1e-6;
const CONV_SECONDS: f64 = 60.0;
const DECAY_FD_TOL: f64 = 1e-5;
const BACKPROP_FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const PROFILE_BATCH: usize = 1024;
const STABILIZE_BEFORE: usize = 48;
const MIN_COMPRESSION: f64 = 2.0;
const ACCURACY_GAP: f64 = 0.02;
const E2E_SECONDS: f64 = 300.0;

struct Outcome {
    id: u32,
    pass: bool,
    soft: bool,
    detail: String,
}

fn outcome(id: u32, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { id, pass, soft: false, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut g = rng(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (m, n) = (1 + (i * 37) % 64, 1 + (i * 53 + 11) % 64);
        let a = gaussian(m, n, &mut g);
        let s = svd(&a).unwrap();
        let energy = a.frobenius_norm().powi(2);
        for r in 1..=m.min(n) {
            let resid = a.sub(&s.reconstruct(r).unwrap()).unwrap().frobenius_norm().powi(2);
            let tail: f64 = s.singular[r..].iter().map(|x| x * x).sum();
            worst = worst.max((resid - tail).abs() / energy);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        1,
        worst <= EY_TOL && secs < EY_SECONDS,
        format!("Eckart-Young on 100 matrices: worst relative gap {worst:.2e} (tol {EY_TOL:.0e}), {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut ok = true;
    let ident = stable_rank(&[1.0; 17]).unwrap();
    ok &= ident == 17.0;
    let rank_one = stable_rank(&[3.0, 0.0, 0.0]).unwrap();
    ok &= rank_one == 1.0;
    let mut g = rng(2);
    let base: Vec<f64> = {
        let mut s = rankswitch_core::singular_values(&gaussian(30, 20, &mut g)).unwrap();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s
    };
    let sr = stable_rank(&base).unwrap();
    let mut worst_scale: f64 = 0.0;
    for c in [1e-3, 0.1, 0.5, 0.9, 1.7, 3.0, 10.0, 42.0, 1e3, 1e5] {
        let scaled: Vec<f64> = base.iter().map(|x| x * c).collect();
        worst_scale = worst_scale.max((stable_rank(&scaled).unwrap() - sr).abs() / sr);
    }
    ok &= worst_scale <= IDENTITY_TOL;
    let xi = scale_factor(1, &base, 20).unwrap().xi;
    ok &= scaled_stable_rank(&base, xi).unwrap() == 20.0;
    // Spectrum with stable rank exactly 200 and 512 values; then one with stable rank 100.
    let s200: Vec<f64> = (0..512).map(|i| if i < 200 { 1.0 } else { 0.0 }).collect();
    let paper_xi = scale_factor(1, &s200, 512).unwrap().xi;
    let s100: Vec<f64> = (0..512).map(|i| if i < 100 { 1.0 } else { 0.0 }).collect();
    let worked = scaled_stable_rank(&s100, paper_xi).unwrap();
    ok &= paper_xi == 2.56 && (worked - 256.0).abs() <= IDENTITY_TOL;
    outcome(
        2,
        ok,
        format!(
            "identity {ident}, rank-1 {rank_one}, scale drift {worst_scale:.1e}, xi 512/200 = {paper_xi}, scaled 100 -> {worked}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut g = rng(3);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (m, n) = (1 + (i * 13) % 32, 1 + (i * 7 + 5) % 32);
        let k = if i % 2 == 0 { 3 } else { 1 };
        let pad = if k == 3 && i % 4 == 0 { 1 } else { 0 };
        let w = kernel(n, m, k, &mut g);
        let full = (m * k * k).min(n);
        let pair = factorize_tensor(&WeightTensor::Conv(w.clone()), full).unwrap();
        let (thin, project) = reshape_to_conv(&pair).unwrap();
        let (h, wd) = (8, 8);
        let x = gaussian(2, m * h * wd, &mut g);
        let direct = naive_conv(&x, &w, pad, h, wd);
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let composed = naive_conv(&naive_conv(&x, &thin, pad, h, wd), &project, 0, oh, ow);
        worst = worst.max(composed.max_abs_diff(&direct));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        3,
        worst <= CONV_TOL && secs < CONV_SECONDS,
        format!("conv equivalence on 20 layers: max abs error {worst:.2e} (tol {CONV_TOL:.0e}), {secs:.1}s"),
    )
}

fn criterion_4() -> Outcome {
    let mut g = rng(4);
    let (mut worst_frob, mut worst_l2): (f64, f64) = (0.0, 0.0);
    for case in 0..20usize {
        let (m, r, n) = (2 + case % 6, 1 + case % 4, 2 + (case * 5) % 7);
        let lambda = 0.005 * (1 + case) as f64;
        let u = gaussian(m, r, &mut g);
        let v_t = gaussian(r, n, &mut g);
        let objective = |u: &[f64], v: &[f64]| {
            let pu = DenseMatrix::new(m, r, u.to_vec()).unwrap();
            let pv = DenseMatrix::new(r, n, v.to_vec()).unwrap();
            0.5 * lambda * pu.matmul(&pv).unwrap().frobenius_norm().powi(2)
        };
        let (gu, gv) = frobenius_decay_grads(&u, &v_t, lambda).unwrap();
        let nu = numeric_gradient(u.data(), FD_STEP, |x| objective(x, v_t.data()));
        let nv = numeric_gradient(v_t.data(), FD_STEP, |x| objective(u.data(), x));
        worst_frob = worst_frob.max(max_rel_err(gu.data(), &nu, 1e-6)).max(max_rel_err(gv.data(), &nv, 1e-6));
        let w = gaussian(m, n, &mut g);
        let nw = numeric_gradient(w.data(), FD_STEP, |x| 0.5 * lambda * x.iter().map(|v| v * v).sum::<f64>());
        worst_l2 = worst_l2.max(max_rel_err(&l2_decay_grad(w.data(), lambda), &nw, 1e-6));
    }

    let net = Network::init(&ModelSpec::mlp(6, &[8], 3), &mut g).unwrap();
    let x = gaussian(4, 6, &mut g);
    let y = [2, 0, 1, 1];
    let (_, grads) = net.forward_backward(&x, &y, Execution::Sequential).unwrap();
    let mut worst_bp: f64 = 0.0;
    for (i, layer) in net.layers.iter().enumerate() {
        let (Weights::Full(w), WeightGrad::Full(analytic)) = (&layer.weights, &grads.layers[i].weights) else {
            unreachable!()
        };
        let numeric = numeric_gradient(w.data(), FD_STEP, |p| {
            let mut probe = net.clone();
            if let Weights::Full(m) = &mut probe.layers[i].weights {
                m.data_mut().copy_from_slice(p);
            }
            probe.forward_backward(&x, &y, Execution::Sequential).unwrap().0
        });
        worst_bp = worst_bp.max(max_rel_err(analytic.data(), &numeric, 1e-4));
    }
    outcome(
        4,
        worst_frob < DECAY_FD_TOL && worst_l2 < DECAY_FD_TOL && worst_bp < BACKPROP_FD_TOL,
        format!("finite differences: frobenius {worst_frob:.1e}, l2 {worst_l2:.1e} (tol {DECAY_FD_TOL:.0e}); backprop {worst_bp:.1e} (tol {BACKPROP_FD_TOL:.0e})"),
    )
}

fn criterion_5() -> Outcome {
    let cfg = StabilizationConfig::default();
    let settings = [(20.0, 2.0), (50.0, 4.0), (80.0, 6.0), (120.0, 9.0), (200.0, 12.0)];
    let mut exact = 0;
    let mut monotone = true;
    for (a, tau) in settings {
        let values = exponential(25.0, a, tau, 120);
        let mut t = RankTrajectory::new(2, 1.0, 1000);
        for (e, &v) in values.iter().enumerate() {
            t.append(e, v).unwrap();
        }
        let got = scan_switch_epoch(std::slice::from_ref(&t), &cfg);
        if got == brute_force_switch(&values, cfg.epsilon, cfg.window, cfg.min_epochs) {
            exact += 1;
        }
        // Stricter thresholds never switch earlier; `None` counts as latest.
        let order = |e: Option<usize>| e.unwrap_or(usize::MAX);
        let epochs: Vec<usize> = [f64::INFINITY, 1.0, 0.1, 0.01]
            .iter()
            .map(|&eps| order(scan_switch_epoch(std::slice::from_ref(&t), &StabilizationConfig { epsilon: eps, ..cfg })))
            .collect();
        monotone &= epochs.windows(2).all(|w| w[0] <= w[1]);
    }
    outcome(
        5,
        exact == settings.len() && monotone,
        format!("detector equals brute-force scan on {exact}/{} exponentials; epsilon-monotone: {monotone}", settings.len()),
    )
}

/// ResNet-18 convolution layers on 32×32 inputs plus the classifier, as
/// `(in, out, kernel, output size)`.
fn resnet18(batch: usize) -> Vec<WorkloadShape> {
    let mut v = vec![WorkloadShape::conv(batch, 3, 64, 3, 32)];
    v.extend(std::iter::repeat_n(WorkloadShape::conv(batch, 64, 64, 3, 32), 4));
    for (m, n, s) in [(64, 128, 16), (128, 256, 8), (256, 512, 4)] {
        v.push(WorkloadShape::conv(batch, m, n, 3, s));
        v.extend(std::iter::repeat_n(WorkloadShape::conv(batch, n, n, 3, s), 3));
    }
    v.push(WorkloadShape::dense(batch, 512, 10));
    v
}

/// Independent closed form of the roofline cost of one op.
fn roofline_cost(w: &WorkloadShape, ridge: f64) -> f64 {
    let (b, m, n) = (w.batch as f64, w.in_channels as f64, w.out_channels as f64);
    let (k2, hw) = ((w.kernel * w.kernel) as f64, (w.height * w.width) as f64);
    let flops = b * m * n * k2 * hw;
    let ai = flops / (m * n * k2 + b * m * hw);
    3.0 * flops / (ai / ridge).min(1.0)
}

fn analytic_k(model: &[WorkloadShape], upsilon: f64, rho: f64, ridge: f64) -> (usize, Vec<f64>) {
    let stacks = default_stacks(model);
    let mut k = stacks[0].l_beg - 1;
    let mut leading = true;
    let mut ratios = Vec::new();
    for s in &stacks {
        let (mut full, mut low) = (0.0, 0.0);
        for w in &model[s.l_beg - 1..s.l_end] {
            let r = ((rho * (w.in_channels * w.kernel * w.kernel).min(w.out_channels) as f64).floor() as usize).max(1);
            full += roofline_cost(w, ridge);
            low += roofline_cost(&WorkloadShape { out_channels: r, ..*w }, ridge);
            low += roofline_cost(&WorkloadShape { in_channels: r, kernel: 1, ..*w }, ridge);
        }
        let ratio = full / low;
        if leading && ratio <= upsilon {
            k = s.l_end;
        } else {
            leading = false;
        }
        ratios.push(ratio);
    }
    (k, ratios)
}

fn criterion_6() -> Outcome {
    let model = resnet18(PROFILE_BATCH);
    let stacks = default_stacks(&model);
    let clock = RooflineClock::default();
    let mut ok = true;
    let mut ks = Vec::new();
    let mut first_speedups = String::new();
    for upsilon in [1.1, 1.5, 2.0] {
        let cfg = ProfilerConfig { upsilon, ..Default::default() };
        let report = select_k(&model, &stacks, &cfg, &mut clock.clone()).unwrap();
        let (expected, ratios) = analytic_k(&model, upsilon, cfg.rho_bar, clock.ridge_intensity);
        ok &= report.k_hat == expected;
        if upsilon == 1.5 {
            let first_fails = ratios[0] <= upsilon;
            let rest_pass = ratios[1..].iter().all(|&r| r > upsilon);
            ok &= first_fails && rest_pass;
            first_speedups = ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(",");
        }
        ks.push(report.k_hat);
    }
    ok &= ks.windows(2).all(|w| w[0] <= w[1]);
    let flop_only = select_k(&model, &stacks, &ProfilerConfig::default(), &mut FlopClock::default()).unwrap().k_hat;
    let ai_first = arithmetic_intensity(&model[1]);
    outcome(
        6,
        ok,
        format!(
            "roofline clock, B={PROFILE_BATCH}: stack speedups [{first_speedups}], K_hat for upsilon 1.1/1.5/2.0 = {ks:?} (analytic match); first-stack AI {ai_first:.0}; pure FLOP clock K_hat {flop_only}"
        ),
    )
}

fn mlp_task(seed: u64, forced_e: Option<usize>, snapshots: Option<&std::path::Path>) -> TrainOutput {
    let data = synthetic_rank2(seed).split(0.125).unwrap();
    let spec = ModelSpec::mlp(64, &[256, 256], 10);
    let config = TrainConfig { seed, forced_e, ..Default::default() };
    let options = TrainOptions { snapshot_dir: snapshots.map(|p| p.to_path_buf()), ..Default::default() };
    cuttlefish_train(&spec, &data, &config, &options).unwrap()
}

fn criterion_7(run: &TrainOutput) -> Outcome {
    let started = Instant::now();
    let r = &run.report;
    let detected = r.switch_reason == Some(SwitchReason::Detected);
    let switch = r.switch_epoch.unwrap_or(usize::MAX);
    let a = detected && switch < STABILIZE_BEFORE;
    let compression = r.factorized_params_before as f64 / r.factorized_params_after.max(1) as f64;
    let b = compression >= MIN_COMPRESSION;

    let data = synthetic_rank2(0).split(0.125).unwrap();
    let spec = ModelSpec::mlp(64, &[256, 256], 10);
    let control = train_full_rank(&spec, &data, &TrainConfig::default(), Execution::Parallel).unwrap();
    let gap = (r.final_accuracy - control.report.final_accuracy).abs();
    let c = gap <= ACCURACY_GAP;

    let rerun = mlp_task(0, None, None);
    let d = serde_json::to_string(&rerun.report).unwrap() == serde_json::to_string(r).unwrap();
    let secs = started.elapsed().as_secs_f64() + r.timing.profile + r.timing.full_rank + r.timing.low_rank + r.timing.spectra;
    outcome(
        7,
        a && b && c && d && secs < E2E_SECONDS,
        format!(
            "(a) switch at epoch {switch} ({:?}, K={}) [{a}]; (b) factorized params {} -> {} = {compression:.2}x [{b}]; (c) accuracy {:.4} vs control {:.4}, gap {gap:.4} [{c}]; (d) byte-identical rerun [{d}]; ~{secs:.0}s",
            r.switch_reason,
            r.prefix,
            r.factorized_params_before,
            r.factorized_params_after,
            r.final_accuracy,
            control.report.final_accuracy,
        ),
    )
}

fn criterion_8(seed0: &TrainOutput) -> Outcome {
    let mut worse = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let detected = if seed == 0 { seed0.report.final_accuracy } else { mlp_task(seed, None, None).report.final_accuracy };
        let spectral = mlp_task(seed, Some(0), None);
        let skipped = spectral.report.plan.as_ref().map_or(0, |p| p.ranks.iter().filter(|e| e.skip).count());
        if spectral.report.final_accuracy < detected {
            worse += 1;
        }
        lines.push(format!(
            "seed {seed}: E=0 {:.4} vs detected {:.4} ({skipped} layer(s) skipped)",
            spectral.report.final_accuracy, detected
        ));
    }
    Outcome {
        id: 8,
        pass: worse >= 2,
        soft: true,
        detail: format!("forced E=0 underperforms in {worse}/3 seeds; {}", lines.join("; ")),
    }
}

fn criterion_9(run: &TrainOutput, dir: &std::path::Path) -> Outcome {
    let cfg = TrainConfig::default();
    let analysis = analyze_snapshots(dir, run.report.prefix, &cfg.estimator, &cfg.stabilization, Execution::Parallel).unwrap();
    let same_plan = analysis.plan.is_some() && analysis.plan == run.report.plan;
    let same_switch = analysis.status
        == AnalysisStatus::Stabilized {
            switch_epoch: run.report.switch_epoch.unwrap_or(0),
        };

    let records = network_records(&run.model);
    let bytes = encode_snapshot(60, &records).unwrap();
    let back = decode_snapshot(&bytes).unwrap();
    let bit_exact = back.records.iter().zip(&records).all(|(a, b)| {
        a.name == b.name && a.dims == b.dims && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && back.records.len() == records.len();
    let mut bad_magic = bytes.clone();
    bad_magic[7] = b'2';
    let magic_caught = decode_snapshot(&bad_magic).is_err();
    let truncated = decode_snapshot(&bytes[..bytes.len() - 1]);
    let last = &records.last().unwrap().name;
    let trunc_caught = truncated.is_err_and(|e| e.to_string().contains(last.as_str()));
    outcome(
        9,
        same_plan && same_switch && bit_exact && magic_caught && trunc_caught,
        format!(
            "analyze plan equals trainer plan [{same_plan}], switch epoch [{same_switch}]; round trip bit-exact [{bit_exact}]; bad magic [{magic_caught}], truncation names '{last}' [{trunc_caught}]"
        ),
    )
}

fn main() {
    let mut results = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6()];
    let snapshots = tempfile::tempdir().unwrap();
    let run = mlp_task(0, None, Some(snapshots.path()));
    results.push(criterion_7(&run));
    results.push(criterion_8(&run));
    results.push(criterion_9(&run, snapshots.path()));

    for r in &results {
        let status = match (r.pass, r.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        println!("criterion {} {status}: {}", r.id, r.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.pass && !r.soft).map(|r| r.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
