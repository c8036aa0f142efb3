use condtok::attention::AttentionHead;
use condtok::conditioning::{
    apply_correction, apply_correction_batch, exact_correction, identity_correction, lambda_sweep, verify_monotonicity,
    CorrectionSpec, SweepRow,
};
use condtok::rng::Rng;
use condtok::svd::{condition_number, singular_values};
use condtok::Matrix;
use proptest::prelude::*;

/// Gaussian matrix with its shape and seed drawn by proptest.
fn gaussian(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols, any::<u64>()).prop_map(|(r, c, seed)| Rng::stream(seed, "x").normal_matrix(r, c, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exact_correction_spectrum(x in gaussian(32, 16)) {
        let s = singular_values(&x).unwrap();
        let (s1, sk) = (s[0], *s.last().unwrap());
        prop_assume!(sk / s1 > 1e-8);
        let xc = apply_correction(&x, &exact_correction(&x).unwrap()).unwrap();
        let sc = singular_values(&xc).unwrap();
        let mut expected: Vec<f64> = s.iter().map(|v| s1 + v).collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        for (a, e) in sc.iter().zip(&expected) {
            prop_assert!((a - e).abs() <= 1e-9 * e);
        }
        let kappa = condition_number(&xc).unwrap().kappa;
        let closed = 2.0 * s1 / (s1 + sk);
        prop_assert!((kappa - closed).abs() <= 1e-9 * kappa);
        prop_assert!(kappa <= 2.0 + 1e-9);
        if s1 / sk > 2.0 {
            prop_assert!(kappa < s1 / sk);
        }
    }

    #[test]
    fn exact_correction_never_raises_mu_linear(seed in any::<u64>(), n in 4usize..10, d in 1usize..5) {
        let mut rng = Rng::stream(seed, "tuple");
        let x = rng.normal_matrix(n, d, 1.0);
        let head = AttentionHead::new(
            rng.normal_matrix(d, d, 1.0),
            rng.normal_matrix(d, d, 1.0),
            rng.normal_matrix(d, d, 1.0),
        ).unwrap();
        let rec = verify_monotonicity(&x, &head, CorrectionSpec::exact_svd()).unwrap();
        if let Some(r) = rec.checked() {
            prop_assert!(r.mu_linear_after <= r.mu_linear_before * (1.0 + 1e-9));
            prop_assert!(r.linear_pass);
            prop_assert!(!r.softmax_assumption_holds || r.mu_softmax_after <= r.mu_softmax_before * (1.0 + 1e-9));
            prop_assert!(r.softmax_pass);
        }
    }

    #[test]
    fn batch_correction_is_per_sample(seed in any::<u64>(), n in 1usize..6, d in 1usize..6, lambda in 0.1..20.0f64) {
        let mut rng = Rng::stream(seed, "batch");
        let xs: Vec<Matrix> = (0..4).map(|_| rng.normal_matrix(n, d, 1.0)).collect();
        let c = identity_correction(n, d, lambda).unwrap();
        let batch = apply_correction_batch(&xs, &c).unwrap();
        for (x, y) in xs.iter().zip(&batch) {
            prop_assert_eq!(y, &apply_correction(x, &c).unwrap());
        }
    }

    #[test]
    fn diagonal_sweep_is_non_increasing(diag in prop::collection::vec(1e-3..5.0f64, 1..8)) {
        let x = Matrix::diag(&diag);
        let grid: Vec<f64> = (1..=20).map(f64::from).collect();
        let rows = lambda_sweep(&x, &grid).unwrap();
        prop_assert!(rows.windows(2).all(|w| w[1].kappa <= w[0].kappa * (1.0 + 1e-12)));
    }
}

#[test]
fn sweep_matches_sequential_bit_for_bit() {
    let x = Rng::stream(3, "sweep").normal_matrix(12, 7, 0.05);
    let grid: Vec<f64> = (1..=20).map(f64::from).collect();
    let parallel = lambda_sweep(&x, &grid).unwrap();
    let sequential: Vec<SweepRow> = grid.iter().map(|&l| lambda_sweep(&x, &[l]).unwrap()[0]).collect();
    assert_eq!(parallel.len(), sequential.len());
    for (a, b) in parallel.iter().zip(&sequential) {
        assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
        assert_eq!(a.kappa.to_bits(), b.kappa.to_bits());
    }
}
