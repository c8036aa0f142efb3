use condtok::svd::{condition_number, svd, RANK_TOLERANCE};
use condtok::Matrix;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix_strategy(max_rows: usize, max_cols: usize, bound: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-bound..bound, r * c).prop_map(move |data| Matrix::new(r, c, data).unwrap())
    })
}

fn square_strategy(max: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n * n),
            prop::collection::vec(-5.0..5.0f64, n * n),
        )
            .prop_map(move |(a, b)| (Matrix::new(n, n, a).unwrap(), Matrix::new(n, n, b).unwrap()))
    })
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
fn oracle_sigma(a: &Matrix) -> Vec<f64> {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice());
    let gram = if a.rows() >= a.cols() {
        m.transpose() * &m
    } else {
        &m * m.transpose()
    };
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn gram_defect(q: &Matrix) -> f64 {
    let g = q.transpose().matmul(q).unwrap();
    g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sigma_matches_eigen_oracle(a in matrix_strategy(9, 9, 10.0)) {
        let ours = svd(&a).unwrap().sigma;
        let theirs = oracle_sigma(&a);
        prop_assert_eq!(ours.len(), theirs.len());
        let scale = theirs[0].max(1.0);
        for (x, y) in ours.iter().zip(&theirs) {
            // the Gram route squares the condition number, so compare the
            // squares against a tolerance relative to sigma_1^2
            prop_assert!((x * x - y * y).abs() <= 1e-10 * scale * scale, "{} vs {}", x, y);
        }
        prop_assert!(ours.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(ours.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn reconstruction_and_orthonormal_factors(a in matrix_strategy(12, 12, 10.0)) {
        let dec = svd(&a).unwrap();
        let err = dec.reconstruct().frobenius_distance(&a).unwrap();
        prop_assert!(err <= 1e-12 * a.frobenius_norm().max(1.0));
        prop_assert!(gram_defect(&dec.u) <= 1e-12);
        prop_assert!(gram_defect(&dec.vt.transpose()) <= 1e-12);
    }

    #[test]
    fn kappa_is_transpose_and_scale_invariant(a in matrix_strategy(10, 10, 10.0), c in 0.01..100.0f64) {
        let k = condition_number(&a).unwrap();
        prop_assume!(!k.rank_deficient && k.kappa < 1e6);
        let kt = condition_number(&a.transpose()).unwrap();
        let ks = condition_number(&a.scale(-c).unwrap()).unwrap();
        prop_assert!((kt.kappa - k.kappa).abs() <= 1e-9 * k.kappa);
        prop_assert!((ks.kappa - k.kappa).abs() <= 1e-9 * k.kappa);
        prop_assert!(k.kappa >= 1.0);
    }

    #[test]
    fn kappa_is_submultiplicative((a, b) in square_strategy(6)) {
        let (ka, kb) = (condition_number(&a).unwrap(), condition_number(&b).unwrap());
        prop_assume!(!ka.rank_deficient && !kb.rank_deficient && ka.kappa * kb.kappa < 1e8);
        let kab = condition_number(&a.matmul(&b).unwrap()).unwrap();
        prop_assert!(kab.kappa <= ka.kappa * kb.kappa * (1.0 + 1e-9));
    }

    #[test]
    fn softmax_rows_are_distributions(a in matrix_strategy(8, 8, 700.0)) {
        let s = a.softmax_rows();
        for i in 0..s.rows() {
            let row = s.row(i);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn rank_one_outer_product_is_flagged() {
    let u = [1.0, -2.0, 0.5, 3.0];
    let v = [2.0, 1.0, -1.0];
    let a = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
    let k = condition_number(&a).unwrap();
    assert!(k.rank_deficient);
    assert!(k.sigma_min / k.sigma_max < RANK_TOLERANCE);
    assert_eq!(k.kappa, f64::INFINITY);
}
