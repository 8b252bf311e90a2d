use approx::assert_relative_eq;
use proptest::prelude::*;

use lrvd::adapter::{kl_term, RankTiedAdapter};
use lrvd::diagnostics::{energy_curve, Ordering};
use lrvd::numerics::{svd, Matrix, RngState};

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    RngState::new(seed).gaussian_matrix(rows, cols, 0.0, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_is_associative(n in 1usize..8, k in 1usize..8, m in 1usize..8, p in 1usize..8, seed in any::<u64>()) {
        let a = matrix(n, k, seed);
        let b = matrix(k, m, seed.wrapping_add(1));
        let c = matrix(m, p, seed.wrapping_add(2));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-12 * (1.0 + left.max_abs()));
    }

    #[test]
    fn matmul_t_matches_transpose(n in 1usize..8, k in 1usize..8, m in 1usize..8, seed in any::<u64>()) {
        let a = matrix(n, k, seed);
        let b = matrix(m, k, seed ^ 0xFF);
        prop_assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
    }

    #[test]
    fn svd_reconstructs(rows in 1usize..=32, cols in 1usize..=32, seed in any::<u64>()) {
        let m = matrix(rows, cols, seed);
        let r = svd(&m).unwrap();
        prop_assert!(r.reconstruct().max_abs_diff(&m) < 1e-10 * (1.0 + m.max_abs()));
        prop_assert!(r.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.sigma.iter().all(|&s| s >= 0.0));
        let k = r.sigma.len();
        let utu = r.u.transpose().matmul(&r.u).unwrap();
        let vtv = r.v.transpose().matmul(&r.v).unwrap();
        prop_assert!(utu.max_abs_diff(&Matrix::identity(k)) < 1e-10);
        prop_assert!(vtv.max_abs_diff(&Matrix::identity(k)) < 1e-10);
        // Frobenius norm is preserved by the singular values.
        let s2: f64 = r.sigma.iter().map(|s| s * s).sum();
        prop_assert!((s2 - m.frobenius_norm_sq()).abs() < 1e-9 * (1.0 + s2));
    }

    #[test]
    fn kl_term_is_nondecreasing(a in -10.0f64..8.0, b in -10.0f64..8.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(kl_term(lo) <= kl_term(hi));
        prop_assert!(kl_term(hi) <= 0.0);
    }

    #[test]
    fn energy_curves_are_bounded_and_complete(
        d_in in 2usize..7, d_out in 2usize..7, r in 1usize..6, seed in any::<u64>()
    ) {
        let mut rng = RngState::new(seed);
        let a = RankTiedAdapter::from_parts(
            rng.gaussian_matrix(r, d_in, 0.0, 1.0).unwrap(),
            rng.gaussian_matrix(d_out, r, 0.0, 1.0).unwrap(),
            (0..r).map(|_| rng.normal()).collect(),
            16.0,
        ).unwrap();
        let svd_curve = energy_curve(&a, &Ordering::Svd).unwrap();
        prop_assert!(svd_curve.fractions.windows(2).all(|w| w[0] <= w[1]));
        for o in [Ordering::Svd, Ordering::LearnedAlpha] {
            let c = energy_curve(&a, &o).unwrap();
            prop_assert_eq!(c.fractions.len(), r + 1);
            prop_assert_eq!(*c.fractions.last().unwrap(), 1.0);
            prop_assert!(c.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
        }
    }

    #[test]
    fn prune_only_removes_ranks_at_or_above_tau(
        log_alpha in proptest::collection::vec(-10.0f64..8.0, 1..10), tau in -10.0f64..8.0
    ) {
        let r = log_alpha.len();
        let mut a = RankTiedAdapter::from_parts(
            matrix(r, 3, 1), matrix(2, r, 2), log_alpha.clone(), 4.0,
        ).unwrap();
        let before = a.effective_rank(tau);
        let pruned = a.prune(tau);
        prop_assert_eq!(a.n_active(), before);
        prop_assert!(pruned.iter().all(|&i| log_alpha[i] >= tau));
        prop_assert_eq!(a.effective_rank(tau), before);
    }
}

#[test]
fn svd_of_planted_spectrum() {
    let mut rng = RngState::new(12);
    let u = lrvd::numerics::linalg::random_orthonormal_columns(&mut rng, 9, 3).unwrap();
    let v = lrvd::numerics::linalg::random_orthonormal_columns(&mut rng, 7, 3).unwrap();
    let m = u.scale_cols(&[3.0, 2.0, 1.0]).unwrap().matmul_t(&v).unwrap();
    let s = svd(&m).unwrap().sigma;
    assert_relative_eq!(s[0], 3.0, epsilon = 1e-12);
    assert_relative_eq!(s[1], 2.0, epsilon = 1e-12);
    assert_relative_eq!(s[2], 1.0, epsilon = 1e-12);
    assert!(s[3..].iter().all(|&x| x < 1e-12));
}
