//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr (bypassing output capture) before asserting.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use condtok::attention::{AttentionHead, AttentionKind, Model, ModelConfig};
use condtok::conditioning::{
    apply_correction, exact_correction, verify_attention_bounds, verify_monotonicity, weyl_diagnostic, CorrectionSpec,
};
use condtok::matrix_io::format_matrix_csv;
use condtok::rng::Rng;
use condtok::svd::{condition_number, singular_values, svd};
use condtok::training::{compare_runs, gradient_check, GradCheckOptions, SyntheticTask, TaskKind, TrainConfig};
use condtok::Matrix;

fn report(id: u32, pass: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {id}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_condtok"))
}

/// `rows x cols` with orthonormal columns (`rows >= cols`).
fn orthonormal(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    svd(&rng.normal_matrix(rows, cols, 1.0)).unwrap().u
}

/// `U diag(sigma) V^T` with random singular vectors.
fn with_spectrum(rng: &mut Rng, rows: usize, cols: usize, sigma: &[f64]) -> Matrix {
    let k = sigma.len();
    let u = orthonormal(rng, rows, k);
    let v = orthonormal(rng, cols, k);
    let us = Matrix::from_fn(rows, k, |i, j| u[(i, j)] * sigma[j]);
    us.matmul(&v.transpose()).unwrap()
}

#[test]
fn criterion_1_exact_correction_identity() {
    let start = Instant::now();
    let mut rng = Rng::stream(1, "acceptance/1");
    let (mut checked, mut worst_rel, mut worst_kappa) = (0, 0.0f64, 0.0f64);
    let mut failures = 0;
    while checked < 200 {
        let (r, c) = (rng.range_inclusive(1, 32), rng.range_inclusive(1, 16));
        let x = rng.normal_matrix(r, c, 1.0);
        if condition_number(&x).unwrap().rank_deficient {
            continue;
        }
        let s = singular_values(&x).unwrap();
        let (s1, sk) = (s[0], *s.last().unwrap());
        let kappa = condition_number(&apply_correction(&x, &exact_correction(&x).unwrap()).unwrap())
            .unwrap()
            .kappa;
        let rel = (kappa - 2.0 * s1 / (s1 + sk)).abs() / kappa;
        worst_rel = worst_rel.max(rel);
        worst_kappa = worst_kappa.max(kappa);
        if rel > 1e-9 || kappa > 2.0 + 1e-9 {
            failures += 1;
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(5);
    report(
        1,
        pass,
        &format!("{checked} matrices, {failures} failures, max rel err {worst_rel:.2e}, max kappa {worst_kappa:.6}, {elapsed:.2?}"),
    );
    assert!(pass);
}

/// `(X, W_Q, W_K, W_V)` with `N >= d` and square weights.
fn attention_tuple(rng: &mut Rng) -> (Matrix, AttentionHead) {
    let d = rng.range_inclusive(1, 8);
    let n = rng.range_inclusive(d, 16);
    let x = rng.normal_matrix(n, d, 1.0);
    let head = AttentionHead::new(
        rng.normal_matrix(d, d, 1.0),
        rng.normal_matrix(d, d, 1.0),
        rng.normal_matrix(d, d, 1.0),
    )
    .unwrap();
    (x, head)
}

#[test]
fn criterion_2_attention_bounds() {
    let start = Instant::now();
    let mut rng = Rng::stream(2, "acceptance/2");
    let (mut checked, mut skipped, mut lin_fail, mut soft_fail) = (0, 0, 0, 0);
    while checked < 200 {
        let (x, head) = attention_tuple(&mut rng);
        match verify_attention_bounds(&x, &head).unwrap().checked() {
            None => skipped += 1,
            Some(r) => {
                checked += 1;
                lin_fail += usize::from(!r.linear_pass);
                soft_fail += usize::from(!r.softmax_pass);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = lin_fail == 0 && soft_fail == 0 && elapsed < Duration::from_secs(10);
    report(
        2,
        pass,
        &format!(
            "{checked} tuples ({skipped} rank-deficient redrawn), linear violations {lin_fail}, softmax violations {soft_fail}, {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_monotonicity() {
    let mut rng = Rng::stream(3, "acceptance/3");
    let (mut checked, mut lin_fail, mut soft_fail, mut assumption) = (0, 0, 0, 0);
    while checked < 200 {
        let (x, head) = attention_tuple(&mut rng);
        let Some(r) = verify_monotonicity(&x, &head, CorrectionSpec::exact_svd()).unwrap().checked() else {
            continue;
        };
        checked += 1;
        lin_fail += usize::from(r.mu_linear_after > r.mu_linear_before * (1.0 + 1e-9));
        soft_fail += usize::from(!r.softmax_pass);
        assumption += usize::from(r.softmax_assumption_holds);
    }
    let pass = lin_fail == 0 && soft_fail == 0;
    report(
        3,
        pass,
        &format!(
            "{checked} tuples, mu_linear increases {lin_fail}, softmax implication failures {soft_fail} (assumption held on {assumption})"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_identity_correction_regime() {
    let mut rng = Rng::stream(4, "acceptance/4");
    let lambda = 10.0;
    let (mut over_two, mut bound_fail, mut worst) = (0, 0, 0.0f64);
    let mut worst_sigma = 0.0;
    for _ in 0..100 {
        let n = rng.range_inclusive(2, 16);
        let d = rng.range_inclusive(2, 16);
        let k = n.min(d);
        let s1 = rng.uniform(0.1, 10.0);
        let sk = rng.uniform(0.0, 0.1);
        let mut sigma: Vec<f64> = (0..k)
            .map(|i| match i {
                0 => s1,
                i if i == k - 1 => sk,
                _ => rng.uniform(sk, s1),
            })
            .collect();
        sigma.sort_by(|a, b| b.total_cmp(a));
        let x = with_spectrum(&mut rng, n, d, &sigma);
        let w = weyl_diagnostic(&x, lambda).unwrap();
        assert!(w.sigma_max < 10.0 && w.sigma_min < 0.1);
        if !w.corrected_at_most_two {
            over_two += 1;
        }
        if w.bound_applicable && w.bound_satisfied != Some(true) {
            bound_fail += 1;
        }
        if w.kappa_corrected > worst {
            worst = w.kappa_corrected;
            worst_sigma = w.sigma_max;
        }
    }
    let pass = over_two == 0 && bound_fail == 0;
    report(
        4,
        pass,
        &format!(
            "100 matrices, kappa(X+10I) > 2 on {over_two} (worst {worst:.3} at sigma_1 {worst_sigma:.2}), safe-bound violations {bound_fail}"
        ),
    );
    assert_eq!(bound_fail, 0, "safe bound violated");
    assert_eq!(over_two, 0, "kappa(X + 10 I_k) exceeded 2 on {over_two} of 100 matrices");
}

#[test]
fn criterion_5_gradient_check() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for attention in [AttentionKind::Linear, AttentionKind::Softmax] {
        for layer_norm in [false, true] {
            let config = ModelConfig {
                seq_len: 3,
                token_dim: 2,
                embed_dim: 4,
                heads: 2,
                layers: 1,
                attention,
                layer_norm,
                ..ModelConfig::default()
            };
            for seed in 0..3 {
                let model = Model::init(&config, seed).unwrap();
                let task = SyntheticTask {
                    num_samples: 2,
                    ..SyntheticTask::new(TaskKind::TeacherRegression, seed)
                };
                let (batch, _) = task.generate(&config, 1).unwrap();
                let r = gradient_check(&model, &batch, None, GradCheckOptions { seed, ..Default::default() }).unwrap();
                worst = worst.max(r.max_rel_error);
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-5 && elapsed < Duration::from_secs(30);
    report(5, pass, &format!("{cases} models, max rel error {worst:.2e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_6_conditioned_training() {
    let start = Instant::now();
    let (mut tokens_lower, mut l1_lower, mut max_sigma_k) = (0, 0, 0.0f64);
    let mut details = Vec::new();
    for seed in 0..5 {
        let base = TrainConfig::toy(seed);
        assert_eq!((base.model.seq_len, base.model.embed_dim, base.model.heads, base.model.layers), (16, 32, 4, 2));
        assert_eq!(base.epochs, 100);
        let (_, probe) = base.task.generate(&base.model, base.batch_size).unwrap();
        let init = Model::init(&base.model, base.seed).unwrap();
        for t in &probe.tokens {
            let s = singular_values(&init.embed(t, None).unwrap()).unwrap();
            max_sigma_k = max_sigma_k.max(*s.last().unwrap());
        }
        let mut cond = base.clone();
        cond.model.correction = Some(CorrectionSpec::identity_scaled(10.0).unwrap());
        let s = compare_runs(&base, &cond).unwrap().summary;
        assert!(!s.base_diverged && !s.cond_diverged);
        let (bt, ct) = (s.base_kappa_tokens.unwrap(), s.cond_kappa_tokens.unwrap());
        let (b1, c1) = (s.base_kappa_attn_l1.unwrap(), s.cond_kappa_attn_l1.unwrap());
        tokens_lower += usize::from(ct < bt);
        l1_lower += usize::from(c1 < b1);
        details.push(format!("seed {seed}: tokens {bt:.1}->{ct:.2}, layer1 {b1:.1}->{c1:.2}"));
    }
    let elapsed = start.elapsed();
    let pass = max_sigma_k < 0.1 && tokens_lower == 5 && l1_lower >= 4 && elapsed < Duration::from_secs(300);
    report(
        6,
        pass,
        &format!(
            "max sigma_k(X0) {max_sigma_k:.3e}, tokens lower {tokens_lower}/5, layer-1 attention lower {l1_lower}/5, {elapsed:.1?}; {}",
            details.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_lambda_sweep_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::stream(7, "acceptance/7");
    let sigma: Vec<f64> = (0..16).map(|i| 0.5 * (1e-3f64 / 0.5).powf(i as f64 / 15.0)).collect();
    let x = with_spectrum(&mut rng, 16, 32, &sigma);
    let path = dir.path().join("x.csv");
    std::fs::write(&path, format_matrix_csv(&x)).unwrap();
    let out = bin().args(["sweep-lambda", "--in"]).arg(&path).args(["--grid", "1:20"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lambda,kappa"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    let ascending = rows.iter().enumerate().all(|(i, r)| r.0 == (i + 1) as f64);
    let non_increasing = rows.windows(2).all(|w| w[1].1 <= w[0].1);
    let pass = rows.len() == 20 && ascending && non_increasing;
    report(
        7,
        pass,
        &format!(
            "{} rows, kappa {:.4} at lambda 1 down to {:.4} at lambda 20, sigma_k(X) {:.0e}",
            rows.len(),
            rows.first().map_or(f64::NAN, |r| r.1),
            rows.last().map_or(f64::NAN, |r| r.1),
            sigma[15]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_overhead() {
    let out = bin()
        .args(["overhead", "--batch", "1024", "--seq", "197", "--dim", "768"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let (bytes, flops) = (v["bytes"].as_u64(), v["flops"].as_u64());
    let pass = bytes == Some(619_708_416) && flops == Some(154_927_104);
    report(
        8,
        pass,
        &format!("bytes {bytes:?}, flops {flops:?}, {} GB", v["gigabytes"]),
    );
    assert!(pass);
}

fn compare_pipeline(dir: &Path) -> Vec<u8> {
    let out = bin()
        .args(["compare", "--seed", "11", "--lambda", "10", "--out-dir"])
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

#[test]
fn criterion_9_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, sb) = (compare_pipeline(a.path()), compare_pipeline(b.path()));
    let mut same = sa == sb;
    for name in ["base.csv", "cond.csv", "summary.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        same &= !x.is_empty() && x == y;
    }
    let epochs = std::fs::read_to_string(a.path().join("base.csv")).unwrap().lines().count() - 1;
    report(9, same, &format!("two compare runs, {epochs} epochs each, outputs byte-identical: {same}"));
    assert!(same);
}
