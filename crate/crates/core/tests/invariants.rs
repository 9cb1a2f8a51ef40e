//! Property tests for the module invariants.

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tdlrt::linalg::{qr_orthonormal, truncation_rank};
use tdlrt::model::loss_softmax_ce;
use tdlrt::tensor::{DenseTensor, Matrix};
use tdlrt::tucker::{compression_rate, hosvd, truncate, HosvdRank, TuckerTensor};

fn tensor_from_seed(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn orthonormal_from_seed(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    qr_orthonormal(&raw).unwrap().0
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=5, 2..=4)
}

proptest! {
    #[test]
    fn fold_unfold_identity(shape in shape_strategy(), seed in any::<u64>()) {
        let t = tensor_from_seed(&shape, seed);
        for mode in 0..shape.len() {
            let back = DenseTensor::fold(&t.unfold(mode).unwrap(), mode, &shape).unwrap();
            prop_assert!(back == t, "mode {mode} roundtrip not bit-exact");
        }
    }

    #[test]
    fn identity_mode_product_is_noop(shape in shape_strategy(), seed in any::<u64>()) {
        let t = tensor_from_seed(&shape, seed);
        for (mode, &n) in shape.iter().enumerate() {
            let r = t.mode_multiply(&Matrix::identity(n), mode).unwrap();
            prop_assert!(r == t);
        }
    }

    #[test]
    fn orthonormal_expansion_preserves_norm(
        shape in shape_strategy(),
        extra in 0usize..3,
        seed in any::<u64>(),
    ) {
        let t = tensor_from_seed(&shape, seed);
        let mode = (seed as usize) % shape.len();
        let u = orthonormal_from_seed(shape[mode] + extra, shape[mode], seed ^ 1);
        let expanded = t.mode_multiply(&u, mode).unwrap();
        let drift = (expanded.frobenius_norm() - t.frobenius_norm()).abs();
        prop_assert!(drift <= 1e-12 * t.frobenius_norm().max(1.0));
    }

    #[test]
    fn cauchy_schwarz(shape in shape_strategy(), seed in any::<u64>()) {
        let a = tensor_from_seed(&shape, seed);
        let b = tensor_from_seed(&shape, seed ^ 0xff);
        let inner = a.inner(&b).unwrap();
        prop_assert!(inner.abs() <= a.frobenius_norm() * b.frobenius_norm() + 1e-12);
    }

    #[test]
    fn qr_is_deterministic_and_orthonormal(
        rows in 1usize..8,
        cols in 1usize..8,
        seed in any::<u64>(),
    ) {
        let (rows, cols) = (rows.max(cols), rows.min(cols));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let (q1, r1) = qr_orthonormal(&m).unwrap();
        let (q2, r2) = qr_orthonormal(&m).unwrap();
        prop_assert_eq!(q1.data(), q2.data());
        prop_assert_eq!(r1.data(), r2.data());
        let defect = q1.matmul_tn(&q1).sub(&Matrix::identity(cols)).frobenius_norm();
        prop_assert!(defect <= 1e-12);
    }

    #[test]
    fn truncation_rank_monotone(
        spectrum in prop::collection::vec(0.0f64..3.0, 1..8),
        budgets in prop::collection::vec(0.0f64..5.0, 2..6),
    ) {
        let mut s = spectrum;
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut budgets = budgets;
        budgets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut last = usize::MAX;
        for b in budgets {
            let r = truncation_rank(&s, b, 1).unwrap();
            prop_assert!(r <= last, "rank grew with a larger budget");
            last = r;
        }
    }

    #[test]
    fn rounding_contract_and_orthonormality(
        seed in any::<u64>(),
        tau in 0.0f64..0.7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=4usize);
        // Feasible full-Tucker-rank tuples only.
        let mut ranks: Vec<usize> = (0..d).map(|_| rng.random_range(1..=4)).collect();
        loop {
            let mut changed = false;
            for i in 0..d {
                let others: usize = ranks.iter().enumerate()
                    .filter(|&(j, _)| j != i).map(|(_, &r)| r).product();
                if ranks[i] > others { ranks[i] = others; changed = true; }
            }
            if !changed { break; }
        }
        let shape: Vec<usize> = ranks.iter().map(|&r| r + rng.random_range(0..3)).collect();
        let core = tensor_from_seed(&ranks, seed ^ 2);
        let factors: Vec<Matrix> = shape.iter().zip(&ranks).enumerate()
            .map(|(i, (&n, &r))| orthonormal_from_seed(n, r, seed ^ (3 + i as u64)))
            .collect();
        let t = TuckerTensor::new(core, factors).unwrap();
        let trunc = truncate(&t, tau, 1, None).unwrap();
        let num = trunc.reconstruct().sub(&t.reconstruct()).unwrap().frobenius_norm();
        prop_assert!(num <= tau * t.reconstruct().frobenius_norm() + 1e-12);
        prop_assert!(trunc.orthonormality_defect() <= 1e-10);

        // tau = 0 rounding is idempotent.
        let once = truncate(&t, 0.0, 1, None).unwrap();
        let twice = truncate(&once, 0.0, 1, None).unwrap();
        let drift = twice.reconstruct().sub(&once.reconstruct()).unwrap().frobenius_norm();
        prop_assert!(drift <= 1e-12 * once.reconstruct().frobenius_norm().max(1.0));
    }

    #[test]
    fn hosvd_orthonormality_and_storage(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(2..=4usize);
        let shape: Vec<usize> = (0..d).map(|_| rng.random_range(2..=5)).collect();
        let w = tensor_from_seed(&shape, seed ^ 9);
        let t = hosvd(&w, HosvdRank::Tolerance(0.1)).unwrap();
        prop_assert!(t.orthonormality_defect() <= 1e-10);

        // Storage formula equals an independent count of allocated entries.
        let independent = t.core().data().len()
            + t.factors().iter().map(|u| u.data().len()).sum::<usize>();
        prop_assert_eq!(t.storage_count(), independent);

        let cr = compression_rate(t.dense_count(), t.storage_count()).unwrap();
        prop_assert!(cr <= 1.0);
    }

    #[test]
    fn softmax_ce_rows_sum_to_zero(
        seed in any::<u64>(),
        batch in 1usize..6,
        classes in 2usize..7,
    ) {
        let logits = tensor_from_seed(&[batch, classes], seed).scale(3.0);
        let labels: Vec<usize> = (0..batch).map(|b| (seed as usize + b) % classes).collect();
        let (_, grad) = loss_softmax_ce(&logits, &labels).unwrap();
        for b in 0..batch {
            let row: f64 = (0..classes).map(|k| grad.get(&[b, k])).sum();
            prop_assert!(row.abs() <= 1e-14);
        }
    }
}
