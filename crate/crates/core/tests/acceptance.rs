//! End-to-end acceptance run. Every criterion prints one pass/fail line to
//! the real stdout (bypassing the test harness capture); the test fails if
//! any criterion fails.

mod common;

use std::io::Write as _;
use std::time::{Duration, Instant};

use common::{dense_orth_deviation, randn_tensor};
use rand::Rng;
use sdanet::autodiff::Graph;
use sdanet::benchmark::{
    generate_scenario_data, run_benchmark, train_models, BenchmarkResults, Domain, Method, Scenario,
};
use sdanet::gradsuite::{run_suite, Precision};
use sdanet::io::models_checkpoint;
use sdanet::losses::{orth_deviation, srip_orth_loss, LossReport};
use sdanet::nn::task_forward;
use sdanet::pipeline::{adapt_subject, mean_reconstruction_error, predict, StopReason, StopRule};
use sdanet::Tensor;

const GRADCHECK_LIMIT: Duration = Duration::from_secs(120);
const END_TO_END_LIMIT: Duration = Duration::from_secs(30 * 60);
const ADAPT_LIMIT: Duration = Duration::from_secs(10);
const ANOMALY_SEEDS: u64 = 10;
/// Iterations for measuring δ of trained adaptors.
const DELTA_ITERS: usize = 500;
/// Iterations for the dense-oracle comparison; see the losses tests.
const ORACLE_ITERS: usize = 3000;
const DISTORTION_PAIRS: usize = 1000;

struct Outcome {
    lines: Vec<(usize, bool, String)>,
}

impl Outcome {
    fn record(&mut self, n: usize, passed: bool, detail: String) {
        let line = format!("criterion {n}: {} {detail}", if passed { "PASS" } else { "FAIL" });
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        self.lines.push((n, passed, line));
    }
}

fn mean_metric(res: &BenchmarkResults, method: Method, domain: Domain, metric: &str) -> f64 {
    res.mean(method, domain, metric)
}

fn criterion_1(o: &mut Outcome) {
    let report = run_suite(&[Precision::F32, Precision::F64]).unwrap();
    let (e32, e64) = (report.max_error(Precision::F32), report.max_error(Precision::F64));
    let ok = report.all_passed() && e32 < 1e-3 && e64 < 1e-6 && report.duration < GRADCHECK_LIMIT;
    for f in report.failures() {
        println!("  gradcheck failure: {f:?}");
    }
    o.record(
        1,
        ok,
        format!(
            "{} checks, max rel err f32 {e32:.3e} (< 1e-3), f64 {e64:.3e} (< 1e-6), {:.1} s (< 120 s)",
            report.results.len(),
            report.duration.as_secs_f64()
        ),
    );
}

fn srip(w: &Tensor<f64>, iters: usize, seed: u64) -> f64 {
    let mut g = Graph::<f64>::new();
    let v = g.constant(w.clone());
    let s = srip_orth_loss(&mut g, &[v], iters, seed).unwrap();
    g.value(s).data()[0]
}

fn criterion_2(o: &mut Outcome) {
    let mut worst: f64 = 0.0;
    for k in 0..50u64 {
        let w = if k % 2 == 0 {
            let g = randn_tensor(&[64, 64], 0.1, 100 + k);
            Tensor::from_fn([64, 64], |i| g.data()[i] + if i / 64 == i % 64 { 1.0 } else { 0.0 })
        } else {
            randn_tensor(&[64, 64], 1.0 / 8.0, 100 + k)
        };
        let exact = dense_orth_deviation(&w);
        worst = worst.max((srip(&w, ORACLE_ITERS, k) - exact).abs() / exact);
    }
    let at_identity = srip(&Tensor::eye(64), 2, 0);
    let at_two = srip(&Tensor::eye(64).map(|v| 2.0 * v), 2, 0);
    let ok = worst < 1e-3 && at_identity == 0.0 && (at_two - 3.0).abs() <= 1e-5;
    o.record(
        2,
        ok,
        format!("50 matrices worst rel err {worst:.2e} (< 1e-3), W=I {at_identity}, W=2I {at_two:.7}"),
    );
}

/// Stop rule on constructed loss sequences: (losses, iterations, reason).
fn stub_cases() -> Vec<(Vec<f64>, usize, StopReason)> {
    use StopReason::*;
    vec![
        (vec![10.0, 9.0, 8.9, 1.0, 1.0], 3, InsufficientImprovement),
        (vec![10.0, 9.0, 8.0, 7.0, 6.0, 5.0], 5, MaxIters),
        (vec![10.0, 11.0], 2, InsufficientImprovement),
        (vec![1.0, 0.95, 0.5], 2, InsufficientImprovement),
        (vec![f64::MAX, 1.0, 0.9, 0.5, 0.1], 5, MaxIters),
    ]
}

fn stub_rule_ok() -> bool {
    stub_cases().into_iter().all(|(losses, n, reason)| {
        let rule = StopRule { max_iters: 5, factor: 0.95 };
        let (h, r) = rule.run(|i| Ok(LossReport { l_a: losses[i], ..Default::default() })).unwrap();
        h.len() == n && r == reason
    })
}

/// Tiny scenario for the determinism contract.
fn tiny(seed: u64) -> Scenario {
    let mut s = Scenario::standard_segmentation(seed);
    s.train_subjects = 2;
    s.val_subjects = 1;
    s.source_test_subjects = 1;
    s.target_subjects = 2;
    s.slices_per_subject = 2;
    s.train.epochs = 2;
    s.train.ae_epochs = 2;
    s.train.init_candidates = 2;
    s
}

/// Checkpoint bytes, per-subject prediction outputs and the CSV of one run.
fn tiny_run(s: &Scenario) -> (Vec<u8>, Vec<Tensor<f32>>, String) {
    let data = generate_scenario_data(s).unwrap();
    let models = train_models(s, &data).unwrap();
    let ck = models_checkpoint(&models.task, &models.bank).unwrap().to_bytes().unwrap();
    let preds = data
        .target
        .iter()
        .map(|subj| adapt_subject(subj, &models.task, &models.bank, &s.train).unwrap().prediction.outputs)
        .collect();
    let csv = run_benchmark(s, &data, &models).unwrap().to_csv();
    (ck, preds, csv)
}

/// Largest `|‖W d‖² − ‖d‖²| / ‖d‖²` over random pairs of pixel feature
/// vectors `d = f_a − f_b` drawn from `features` (`[N, 64, H, W]`).
fn max_distortion(w: &Tensor<f64>, features: &Tensor<f32>, seed: u64) -> f64 {
    let (n, c, h, wd) = features.nchw().unwrap();
    let hw = h * wd;
    let mut rng = common::rng(seed);
    let pick = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let (b, p) = (rng.random_range(0..n), rng.random_range(0..hw));
        (0..c).map(|ch| features.data()[(b * c + ch) * hw + p] as f64).collect()
    };
    let mut worst: f64 = 0.0;
    let mut used = 0;
    while used < DISTORTION_PAIRS {
        let (a, b) = (pick(&mut rng), pick(&mut rng));
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let before: f64 = d.iter().map(|x| x * x).sum();
        if before == 0.0 {
            continue;
        }
        let after: f64 = (0..c)
            .map(|o| (0..c).map(|i| w.data()[o * c + i] * d[i]).sum::<f64>().powi(2))
            .sum();
        worst = worst.max((after - before).abs() / before);
        used += 1;
    }
    worst
}

#[test]
fn acceptance() {
    let mut o = Outcome { lines: Vec::new() };

    criterion_1(&mut o);
    criterion_2(&mut o);

    let a = tiny_run(&tiny(17));
    let b = tiny_run(&tiny(17));
    let deterministic = a.0 == b.0 && a.1.iter().zip(&b.1).all(|(x, y)| x.bit_eq(y)) && a.2 == b.2;

    // standard segmentation scenario, end to end
    let seg = Scenario::standard_segmentation(0);
    let start = Instant::now();
    let data = generate_scenario_data(&seg).unwrap();
    let models = train_models(&seg, &data).unwrap();
    let task0 = models.task.store().clone();
    let bank0 = models.bank.store().clone();
    let res = run_benchmark(&seg, &data, &models).unwrap();
    let end_to_end = start.elapsed();
    println!("{}", res.to_table());
    let frozen = models.task.store().bit_eq(&task0) && models.bank.store().bit_eq(&bank0);

    // criterion 3: every trained feature adaptor, plus distortion on real features
    let delta = res
        .orth_deviations
        .iter()
        .flat_map(|(_, _, d)| d.iter().copied())
        .fold(0.0, f64::max);
    let subject = &data.target[0];
    let adapted = adapt_subject(subject, &models.task, &models.bank, &seg.train).unwrap();
    let mut g = Graph::<f32>::new();
    let tp = models.task.bind(&mut g, false);
    let x = g.constant(subject.slices.clone());
    let bundle = task_forward(&mut g, &models.task, &tp, x, None).unwrap();
    let mut distortion_ok = true;
    let mut distortion_detail = Vec::new();
    for level in 0..3 {
        let w = adapted.adaptors.feature_matrix(level).cast::<f64>();
        let d = orth_deviation(&w, DELTA_ITERS, level as u64).unwrap();
        let worst = max_distortion(&w, g.value(bundle.taps[level]), 40 + level as u64);
        distortion_ok &= worst <= d + 1e-4;
        distortion_detail.push(format!("{worst:.4}≤{d:.4}+1e-4"));
    }
    o.record(
        3,
        delta <= 0.1 && distortion_ok,
        format!(
            "λ_orth {}: max δ over {} adapted subjects {delta:.4} (≤ 0.1); distortion on {DISTORTION_PAIRS} pairs per level [{}]",
            seg.train.lambda_orth,
            res.orth_deviations.len(),
            distortion_detail.join(", ")
        ),
    );

    // criterion 4: seed 0 comes from the run above
    let mut anomaly = vec![(0u64, res.source_l_ae, res.target_l_ae)];
    for seed in 1..ANOMALY_SEEDS {
        let s = Scenario::standard_segmentation(seed);
        let d = generate_scenario_data(&s).unwrap();
        let m = train_models(&s, &d).unwrap();
        let src = mean_reconstruction_error(&m.task, &m.bank, &d.source_test, s.train.batch_size).unwrap();
        let tgt = mean_reconstruction_error(&m.task, &m.bank, &d.target, s.train.batch_size).unwrap();
        println!("  seed {seed}: L_AE source {src:.4} target {tgt:.4}");
        anomaly.push((seed, src, tgt));
    }
    let wins = anomaly.iter().filter(|(_, s, t)| t > s).count();
    o.record(
        4,
        wins as f64 >= 0.95 * ANOMALY_SEEDS as f64,
        format!("target L_AE > source L_AE in {wins}/{ANOMALY_SEEDS} seeds (≥ 95%)"),
    );

    // criterion 5
    let na = mean_metric(&res, Method::NoAdaptation, Domain::Target, "dice_mean");
    let ours = mean_metric(&res, Method::Ours, Domain::Target, "dice_mean");
    let ours3 = mean_metric(&res, Method::Ours3x3, Domain::Target, "dice_mean");
    let na_subj = res.subject_values(Method::NoAdaptation, Domain::Target, "dice_mean");
    let ours_subj = res.subject_values(Method::Ours, Domain::Target, "dice_mean");
    let improved = na_subj.iter().zip(&ours_subj).filter(|(n, u)| u.1 > n.1).count();
    let ok5 = ours - na >= 0.02
        && improved as f64 >= 0.8 * na_subj.len() as f64
        && ours3 >= ours - 0.005
        && end_to_end < END_TO_END_LIMIT;
    o.record(
        5,
        ok5,
        format!(
            "target Dice NA {na:.4}, Ours {ours:.4} (gain {:.4} ≥ 0.02), improved {improved}/{} subjects, Ours-3x3 {ours3:.4} (≥ Ours − 0.005), end to end {:.0} s (< 1800 s)",
            ours - na,
            na_subj.len(),
            end_to_end.as_secs_f64()
        ),
    );

    // criterion 6
    let src_na = mean_metric(&res, Method::NoAdaptation, Domain::Source, "dice_mean");
    let src_ours = mean_metric(&res, Method::Ours, Domain::Source, "dice_mean");
    o.record(
        6,
        (src_ours - src_na).abs() <= 0.01,
        format!("source Dice NA {src_na:.4}, Ours {src_ours:.4}, change {:.4} (≤ 0.01)", src_ours - src_na),
    );

    // criterion 7
    let syn = Scenario::standard_synthesis(0);
    let syn_data = generate_scenario_data(&syn).unwrap();
    let syn_models = train_models(&syn, &syn_data).unwrap();
    let syn_res = run_benchmark(&syn, &syn_data, &syn_models).unwrap();
    println!("{}", syn_res.to_table());
    let m = |method, metric| mean_metric(&syn_res, method, Domain::Target, metric);
    let (na_mse, ours_mse, mh_mse) =
        (m(Method::NoAdaptation, "mse"), m(Method::Ours, "mse"), m(Method::MedianHistogram, "mse"));
    let (na_ssim, ours_ssim, mh_ssim) =
        (m(Method::NoAdaptation, "ssim"), m(Method::Ours, "ssim"), m(Method::MedianHistogram, "ssim"));
    o.record(
        7,
        ours_mse < na_mse && ours_ssim > na_ssim && mh_mse.is_finite() && mh_ssim.is_finite(),
        format!(
            "target MSE NA {na_mse:.5} > Ours {ours_mse:.5}; SSIM NA {na_ssim:.4} < Ours {ours_ssim:.4}; M&H MSE {mh_mse:.5} SSIM {mh_ssim:.4}"
        ),
    );

    // criterion 8
    let reports: Vec<_> = res.reports.iter().chain(&syn_res.reports).map(|(_, _, r)| r).collect();
    let iters_ok = reports.iter().all(|r| (1..=5).contains(&r.iterations()));
    let slowest = reports.iter().map(|r| r.duration).max().unwrap_or_default();
    let seg_slowest = res.reports.iter().map(|(_, _, r)| r.duration).max().unwrap_or_default();
    let stubs = stub_rule_ok();
    o.record(
        8,
        iters_ok && stubs && seg_slowest < ADAPT_LIMIT,
        format!(
            "{} adaptations with iterations in [1, 5]: {iters_ok}; stub trajectories: {stubs}; slowest standard-scenario subject {:.2} s (< 10 s), slowest overall {:.2} s",
            reports.len(),
            seg_slowest.as_secs_f64(),
            slowest.as_secs_f64()
        ),
    );

    // criterion 9
    let same_na = data.target.iter().all(|subj| {
        let p1 = predict(subj, &models.task, None, 2).unwrap();
        let p2 = predict(subj, &models.task, None, 2).unwrap();
        p1 == p2
    });
    o.record(
        9,
        frozen && deterministic && same_na,
        format!("weights unchanged by adaptation: {frozen}; repeated run bit-identical checkpoints, predictions and CSV: {deterministic}"),
    );

    let failed: Vec<_> = o.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
