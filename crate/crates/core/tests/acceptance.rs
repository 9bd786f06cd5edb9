//! Acceptance criteria A1 to A9. Runs as a plain binary so the verdict lines
//! are always printed; exits non-zero if a hard criterion fails.

use std::path::Path;
use std::time::Instant;

use kdlsq::distill::LossMode;
use kdlsq::harness::{
    model_gradcheck, quantized_model_size, read_jsonl, read_summary_csv, run_experiment,
    ExperimentKind, ExperimentReport, ExperimentSpec, ModelGradcheckOptions, SyntheticTask, MB,
};
use kdlsq::lsq::{fake_quantize, quant_levels, quantize_value, rounding_residual, FakeQuantize};
use kdlsq::scale_init::{init_scale_factor, retention, InitMethod};
use kdlsq::trainer::StepMetrics;
use kdlsq::{BitConfig, CustomOp, Graph, ModelConfig, ModelState, QuantSpec, SiteKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: &'static str,
    hard: bool,
    pass: bool,
    detail: String,
    secs: f64,
}

fn spec_of(bits: u32, signed: bool) -> QuantSpec {
    if signed {
        QuantSpec::signed(bits).unwrap()
    } else {
        QuantSpec::unsigned(bits).unwrap()
    }
}

fn bounds(spec: QuantSpec) -> (f64, f64) {
    let (qn, qp) = quant_levels(spec.bits(), spec.is_signed()).unwrap();
    (-(qn as f64), qp as f64)
}

/// Branch values of the step-size gradient, written out independently.
fn oracle_ds(v: f64, s: f64, spec: QuantSpec) -> f64 {
    let (lo, hi) = bounds(spec);
    let z = v / s;
    if z <= lo {
        lo
    } else if z >= hi {
        hi
    } else {
        z.round() - z
    }
}

fn a1() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut mask_ok = true;
    let mut pass_ok = true;
    let mut literal_matches = 0;
    let mut n = 0;
    while n < 1000 {
        let bits = [2u32, 4, 8][rng.random_range(0..3)];
        let signed = rng.random_bool(0.5);
        let spec = spec_of(bits, signed);
        let (lo, hi) = bounds(spec);
        let s: f64 = rng.random_range(0.01..2.0);
        let z: f64 = rng.random_range((lo - 3.0)..(hi + 3.0));
        let frac = z - z.floor();
        if (frac - 0.5).abs() < 1e-3 || (z - lo).abs() < 1e-3 || (z - hi).abs() < 1e-3 {
            continue;
        }
        n += 1;
        let v = z * s;
        let expected = oracle_ds(v, s, spec);
        let vt = Tensor::scalar(v);
        let h = 1e-6 * s;

        // straight-through linearization: rounding residual frozen at s
        let op = FakeQuantize::linearized(spec, SiteKind::Weight, rounding_residual(&vt, s, spec));
        let f = |x: f64| op.forward(&[&vt, &Tensor::scalar(x)]).unwrap().item();
        let fd = (f(s + h) - f(s - h)) / (2.0 * h);
        let err = (fd - expected).abs() / expected.abs().max(1e-3);
        worst = worst.max(err);

        let lit = |x: f64| quantize_value(v, x, spec);
        if ((lit(s + h) - lit(s - h)) / (2.0 * h) - expected).abs() <= 1e-4 * expected.abs().max(1e-3) {
            literal_matches += 1;
        }

        for kind in [SiteKind::Activation, SiteKind::Weight] {
            let mut g = Graph::new();
            let vv = g.param(vt.clone());
            let sv = g.param(Tensor::scalar(s));
            let q = fake_quantize(&mut g, vv, sv, spec, kind).unwrap();
            let up = 0.75;
            let l = g.scale(q, up);
            let l = g.sum(l);
            g.backward(l).unwrap();
            let dv = g.grad(vv).unwrap().item();
            let ds = g.grad(sv).unwrap().item();
            if ds != up * expected {
                mask_ok = false;
            }
            let want = match kind {
                SiteKind::Activation => {
                    if lo < z && z < hi {
                        up
                    } else {
                        0.0
                    }
                }
                SiteKind::Weight => up,
            };
            if dv != want {
                match kind {
                    SiteKind::Activation => mask_ok = false,
                    SiteKind::Weight => pass_ok = false,
                }
            }
        }
    }
    let pass = worst <= 1e-4 && mask_ok && pass_ok;
    (
        pass,
        format!(
            "max rel err {worst:.2e} (tol 1e-4), activation mask exact: {mask_ok}, weight pass-through exact: {pass_ok}; \
             central differences of the exact quantizer agree on {literal_matches}/1000 (saturated only)"
        ),
    )
}

fn a2() -> (bool, String) {
    let cfg = ModelConfig::toy();
    let teacher = ModelState::init(cfg.clone(), 11, 0.2).unwrap();
    let task = SyntheticTask {
        train_size: 8,
        test_size: 2,
        ..SyntheticTask::default()
    };
    let (train, _) = task.generate().unwrap();
    let batch = train.batch(&[0, 1, 2]).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for bits in [BitConfig::new(2, 2, 8), BitConfig::new(4, 4, 4)] {
        let mut student = teacher.requantized(bits).unwrap();
        kdlsq::scale_init::initialize_scales(&mut student, &batch, InitMethod::default()).unwrap();
        let r = model_gradcheck(
            &teacher,
            &student,
            &batch,
            LossMode::KdGt,
            &ModelGradcheckOptions::default(),
        )
        .unwrap();
        pass &= r.weights.max_rel_err <= 1e-3 && r.scales.max_rel_err <= 1e-3;
        parts.push(format!(
            "{bits}: {} weights max {:.2e} ({}), {} scales max {:.2e} ({})",
            r.weights.checked,
            r.weights.max_rel_err,
            r.weights.worst_name,
            r.scales.checked,
            r.scales.max_rel_err,
            r.scales.worst_name
        ));
    }
    (pass, parts.join("; "))
}

/// Element of rank `k` in ascending order, by counting.
fn rank_select(values: &[f64], k: usize) -> f64 {
    *values
        .iter()
        .find(|&&x| {
            let below = values.iter().filter(|&&y| y < x).count();
            let at_most = values.iter().filter(|&&y| y <= x).count();
            below <= k && k < at_most
        })
        .unwrap()
}

fn a3() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact = 0;
    let mut retained = 0;
    let mut total = 0;
    for t in 0..500 {
        let n = rng.random_range(1..400);
        let spread: f64 = rng.random_range(0.01..10.0);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-spread..spread);
                // some tensors carry heavy ties
                if t % 5 == 0 {
                    (x * 4.0).round() / 4.0
                } else {
                    x * x.abs()
                }
            })
            .collect();
        for gamma in [0.0, 0.05, 0.25] {
            total += 1;
            let k = (gamma * n as f64 / 2.0).floor() as usize;
            let lo = rank_select(&values, k);
            let hi = rank_select(&values, n - 1 - k);
            let want = lo.abs().max(hi.abs()).max(1e-8);
            let got = init_scale_factor(&Tensor::new(vec![n], values.clone()).unwrap(), gamma).unwrap();
            if got == want {
                exact += 1;
            }
            let kept = values.iter().filter(|v| v.abs() <= got).count() as f64 / n as f64;
            if kept >= 1.0 - gamma && retention(&values, got) == kept {
                retained += 1;
            }
        }
    }
    (
        exact == total && retained == total,
        format!("oracle equal {exact}/{total}, retention >= 1-gamma {retained}/{total}"),
    )
}

fn a4() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    let table = [
        ((8, true), (127, 127)),
        ((2, true), (1, 1)),
        ((8, false), (0, 255)),
        ((4, true), (7, 7)),
        ((2, false), (0, 3)),
    ];
    for ((b, signed), want) in table {
        if quant_levels(b, signed).unwrap() != want {
            bad.push(format!("levels({b},{signed})"));
        }
    }
    for _ in 0..20_000 {
        let bits = [2u32, 4, 6, 8][rng.random_range(0..4)];
        let signed = rng.random_bool(0.5);
        let spec = spec_of(bits, signed);
        let (lo, hi) = bounds(spec);
        let s: f64 = rng.random_range(0.001..5.0);
        let v: f64 = rng.random_range(-50.0..50.0);
        let q = quantize_value(v, s, spec);
        let level = q / s;
        if (level - level.round()).abs() > 1e-9 || level.round() < lo || level.round() > hi {
            bad.push(format!("membership v={v} s={s} {spec:?}"));
        }
        if quantize_value(q, s, spec) != q {
            bad.push(format!("idempotence v={v} s={s}"));
        }
        if signed && quantize_value(-v, s, spec) != -q {
            bad.push(format!("odd symmetry v={v} s={s}"));
        }
        if quantize_value(0.0, s, spec) != 0.0 {
            bad.push("zero".into());
        }
    }
    let pass = bad.is_empty();
    let detail = if pass {
        "level table, membership, idempotence, odd symmetry and zero hold on 20000 samples".into()
    } else {
        format!("{} violations, first: {}", bad.len(), bad[0])
    };
    (pass, detail)
}

fn a7() -> (bool, String) {
    let fp = quantized_model_size(&ModelConfig::bert_base());
    let q = quantized_model_size(&ModelConfig::bert_base().with_bits(BitConfig::new(2, 2, 8)));
    let toy = quantized_model_size(&ModelConfig::toy());
    let mb = fp.bytes / MB;
    let size_ok = (mb - 418.0).abs() <= 0.10 * 418.0;
    let ratio_ok = (q.ratio - 14.9).abs() <= 0.20 * 14.9;
    let toy_ok = toy.ratio == 1.0;
    (
        size_ok && ratio_ok && toy_ok,
        format!(
            "32-32-32 {mb:.1} MB (418 +-10%), 2-2-8 {:.1} MB ratio x{:.2} (14.9 +-20%), toy ratio {}",
            q.bytes / MB,
            q.ratio,
            toy.ratio
        ),
    )
}

fn toy_spec(kind: ExperimentKind, repetitions: usize) -> ExperimentSpec {
    ExperimentSpec {
        name: "acceptance".into(),
        kind,
        repetitions,
        ..ExperimentSpec::default()
    }
}

fn a5(report: &ExperimentReport) -> (bool, String) {
    let teacher = report.teacher_mean();
    let worst_teacher = report
        .teachers
        .iter()
        .map(|t| t.accuracy)
        .fold(f64::INFINITY, f64::min);
    let c8 = report.cell(BitConfig::new(8, 8, 8), LossMode::KdGt, "truncation").unwrap();
    let c2 = report.cell(BitConfig::new(2, 2, 8), LossMode::KdGt, "truncation").unwrap();
    let pass = report.all_ok()
        && teacher >= 0.97
        && c8.mean_accuracy >= teacher - 0.02
        && c2.mean_accuracy >= teacher - 0.10;
    (
        pass,
        format!(
            "teacher mean {:.2}% (min {:.2}%), 8-8-8 kd+gt {:.2}% +- {:.2}, 2-2-8 kd+gt {:.2}% +- {:.2}",
            100.0 * teacher,
            100.0 * worst_teacher,
            100.0 * c8.mean_accuracy,
            100.0 * c8.std_accuracy,
            100.0 * c2.mean_accuracy,
            100.0 * c2.std_accuracy
        ),
    )
}

fn a6(report: &ExperimentReport) -> (bool, String) {
    let bits = BitConfig::new(4, 4, 8);
    let kd = report.cell(bits, LossMode::KdGt, "truncation").unwrap();
    let gt = report.cell(bits, LossMode::GtOnly, "truncation").unwrap();
    let kdo = report.cell(bits, LossMode::KdOnly, "truncation").unwrap();
    (
        kd.mean_accuracy >= gt.mean_accuracy - 0.01,
        format!(
            "4-4-8 means: LSQ {:.2}%, LSQ+KD {:.2}%, LSQ+KD+Lgt {:.2}%",
            100.0 * gt.mean_accuracy,
            100.0 * kdo.mean_accuracy,
            100.0 * kd.mean_accuracy
        ),
    )
}

fn window_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn a8(report: &ExperimentReport, dir: &Path) -> (bool, String) {
    const WINDOW: usize = 50;
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut drops = Vec::new();
    for run in &report.runs {
        let b = run.spec.bits.to_string();
        if run.spec.mode != LossMode::KdGt || !(b == "8-8-8" || b == "4-4-8") {
            continue;
        }
        let steps: Vec<StepMetrics> =
            read_jsonl(&dir.join("runs").join(&run.spec.run_id).join("metrics.jsonl")).unwrap();
        checked += 1;
        if steps.len() < 2 * WINDOW {
            failures.push(format!("{} has {} steps", run.spec.run_id, steps.len()));
            continue;
        }
        let series = |f: fn(&StepMetrics) -> f64| -> (f64, f64) {
            let v: Vec<f64> = steps.iter().map(f).collect();
            (window_median(&v[..WINDOW]), window_median(&v[v.len() - WINDOW..]))
        };
        let (t0, t1) = series(|m| m.loss.total);
        let (k0, k1) = series(|m| m.loss.kd);
        drops.push(t1 / t0);
        if t1 > t0 || k1 > k0 {
            failures.push(format!(
                "{}: total {t0:.4}->{t1:.4}, kd {k0:.4}->{k1:.4}",
                run.spec.run_id
            ));
        }
    }
    let pass = checked > 0 && failures.is_empty();
    let worst = drops.iter().cloned().fold(0.0, f64::max);
    let detail = if pass {
        format!("{checked} runs, window medians decrease (largest end/start total ratio {worst:.3})")
    } else {
        format!("{} of {checked} runs fail: {}", failures.len(), failures.join("; "))
    };
    (pass, detail)
}

fn a9() -> (bool, String) {
    let spec = ExperimentSpec {
        task: SyntheticTask {
            train_size: 300,
            test_size: 100,
            ..SyntheticTask::default()
        },
        train: kdlsq::trainer::TrainConfig {
            epochs: 1,
            bits: BitConfig::new(2, 2, 8),
            ..Default::default()
        },
        ..toy_spec(ExperimentKind::Single, 1)
    };
    let mut spec = spec;
    spec.teacher.train.epochs = 1;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&spec, Some(d.path())).unwrap();
    }
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| std::fs::read(d.path().join("summary.csv")).unwrap())
        .collect();
    let rows: Vec<_> = dirs
        .iter()
        .map(|d| read_summary_csv(&d.path().join("summary.csv")).unwrap())
        .collect();
    let pass = bytes[0] == bytes[1] && rows[0] == rows[1] && !rows[0].is_empty();
    (
        pass,
        format!("{} row(s), summary files byte-identical: {}", rows[0].len(), bytes[0] == bytes[1]),
    )
}

fn timed(id: &'static str, hard: bool, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let t = Instant::now();
    let (pass, detail) = f();
    let v = Verdict {
        id,
        hard,
        pass,
        detail,
        secs: t.elapsed().as_secs_f64(),
    };
    print_verdict(&v);
    v
}

fn print_verdict(v: &Verdict) {
    let status = match (v.pass, v.hard) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (soft)",
    };
    println!("{} {status} [{:.1}s] {}", v.id, v.secs, v.detail);
}

fn main() {
    let mut verdicts = vec![
        timed("A1", true, a1),
        timed("A2", true, a2),
        timed("A3", true, a3),
        timed("A4", true, a4),
        timed("A7", true, a7),
    ];

    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let spec = toy_spec(
        ExperimentKind::Ablation {
            bits: vec![
                BitConfig::new(8, 8, 8),
                BitConfig::new(4, 4, 8),
                BitConfig::new(2, 2, 8),
            ],
        },
        5,
    );
    let report = run_experiment(&spec, Some(dir.path())).unwrap();
    let shared = t.elapsed().as_secs_f64();
    println!("{}", report.to_markdown());
    println!("toy matrix: {} runs in {shared:.1}s", report.runs.len());

    verdicts.push(timed("A5", true, || a5(&report)));
    verdicts.push(timed("A6", false, || a6(&report)));
    verdicts.push(timed("A8", true, || a8(&report, dir.path())));
    verdicts.push(timed("A9", true, a9));

    verdicts.sort_by_key(|v| v.id);
    println!("\nacceptance summary");
    for v in &verdicts {
        print_verdict(v);
    }
    if verdicts.iter().any(|v| v.hard && !v.pass) {
        std::process::exit(1);
    }
}
