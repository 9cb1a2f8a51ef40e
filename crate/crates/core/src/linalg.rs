//! Deterministic QR and SVD primitives and the tail-energy truncation rule.
//!
//! The QR is modified Gram-Schmidt with full reorthogonalization, a
//! nonnegative-diagonal sign convention, and a seeded orthonormal completion
//! for numerically dependent columns, so `Q` always has full column rank and
//! identical input bits give identical output bits.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Matrix;
use crate::{Error, Result};

/// Relative floor under which a residual column counts as dependent.
const QR_DEFICIENCY_RTOL: f64 = 1e-12;

/// Singular values below `NUMERICAL_ZERO_RTOL * s[0]` are treated as exact
/// zeros by [`truncation_rank`]; prevents rank inflation from rounding noise.
pub const NUMERICAL_ZERO_RTOL: f64 = 1e-14;

/// Thin QR of `m` (rows >= cols) with orthonormal `q` and upper-triangular `r`
/// with nonnegative diagonal. Dependent columns of `q` are replaced by a
/// seeded deterministic orthonormal completion and get a zero diagonal in `r`.
pub fn qr_orthonormal(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows < cols {
        return Err(Error::QrShape { rows, cols });
    }
    // Work on rows of the transpose so each basis vector is contiguous.
    let mt = m.transpose();
    let mut qt = Matrix::zeros(cols, rows);
    let mut r = Matrix::zeros(cols, cols);

    for j in 0..cols {
        let mut v = mt.row(j).to_vec();
        let col_norm = norm(&v);
        // Two orthogonalization passes; twice is enough for 1e-12 orthonormality.
        for _ in 0..2 {
            for i in 0..j {
                let qi = qt.row(i);
                let proj = dot(qi, &v);
                r.set(i, j, r.get(i, j) + proj);
                for (vk, qk) in v.iter_mut().zip(qi) {
                    *vk -= proj * qk;
                }
            }
        }
        let threshold = QR_DEFICIENCY_RTOL * if col_norm > 0.0 { col_norm } else { 1.0 };
        let res_norm = norm(&v);
        if res_norm <= threshold {
            r.set(j, j, 0.0);
            v = completion_vector(&qt, j, rows);
        } else {
            r.set(j, j, res_norm);
            let inv = 1.0 / res_norm;
            for vk in v.iter_mut() {
                *vk *= inv;
            }
        }
        qt.data_mut()[j * rows..(j + 1) * rows].copy_from_slice(&v);
    }
    Ok((qt.transpose(), r))
}

/// Deterministic unit vector orthogonal to the first `j` rows of `qt`.
fn completion_vector(qt: &Matrix, j: usize, rows: usize) -> Vec<f64> {
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7dcb_a5e1 ^ (j as u64) << 8 ^ attempt);
        let mut v: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for i in 0..j {
                let qi = qt.row(i);
                let proj = dot(qi, &v);
                for (vk, qk) in v.iter_mut().zip(qi) {
                    *vk -= proj * qk;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            let inv = 1.0 / n;
            for vk in v.iter_mut() {
                *vk *= inv;
            }
            return v;
        }
    }
    unreachable!("seeded completion failed to find an independent direction");
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Full singular value decomposition `m = u * diag(s) * vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors, `rows x k` with `k = min(rows, cols)`.
    pub u: Matrix,
    /// Singular values, nonincreasing and nonnegative.
    pub s: Vec<f64>,
    /// Transposed right singular vectors, `k x cols`.
    pub vt: Matrix,
}

/// SVD with singular values sorted nonincreasing. Always defined.
pub fn svd(m: &Matrix) -> Svd {
    let (rows, cols) = (m.rows(), m.cols());
    let dm = DMatrix::from_row_slice(rows, cols, m.data());
    let eps = f64::EPSILON;
    let decomp = nalgebra::SVD::try_new_unordered(dm.clone(), true, true, eps, 20_000)
        .or_else(|| nalgebra::SVD::try_new_unordered(dm, true, true, eps * 64.0, 0))
        .expect("svd did not converge");
    let k = rows.min(cols);
    let u_na = decomp.u.expect("svd requested u");
    let vt_na = decomp.v_t.expect("svd requested vt");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        decomp.singular_values[b]
            .partial_cmp(&decomp.singular_values[a])
            .expect("singular values are finite")
    });
    let mut u = Matrix::zeros(rows, k);
    let mut vt = Matrix::zeros(k, cols);
    let mut s = Vec::with_capacity(k);
    for (pos, &src) in order.iter().enumerate() {
        s.push(decomp.singular_values[src]);
        for r in 0..rows {
            u.set(r, pos, u_na[(r, src)]);
        }
        for c in 0..cols {
            vt.set(pos, c, vt_na[(src, c)]);
        }
    }
    Svd { u, s, vt }
}

/// Smallest rank `r >= r_min` whose discarded tail energy satisfies
/// `sqrt(sum_{j>r} s_j^2) <= budget`, after flooring singular values below
/// `1e-14 * s[0]` to zero. Returns `s.len()` when no rank qualifies.
pub fn truncation_rank(s: &[f64], budget: f64, r_min: usize) -> Result<usize> {
    if budget < 0.0 {
        return Err(Error::NegativeBudget(budget));
    }
    if s.is_empty() {
        return Ok(0);
    }
    let floor = NUMERICAL_ZERO_RTOL * s[0];
    let effective: Vec<f64> = s.iter().map(|&v| if v < floor { 0.0 } else { v }).collect();
    let r_min = r_min.max(1).min(s.len());
    // Tail energies from the back: tail[r] = sum_{j >= r} s_j^2.
    let mut tail = vec![0.0; s.len() + 1];
    for j in (0..s.len()).rev() {
        tail[j] = tail[j + 1] + effective[j] * effective[j];
    }
    if let Some(offset) = tail[r_min..]
        .iter()
        .position(|&energy| energy.sqrt() <= budget)
    {
        return Ok(r_min + offset);
    }
    Ok(s.len())
}

/// Solves `(a a^T + eps I) x = b` for SPD-regularized normal equations via
/// Cholesky; used by the tangent-projection pseudoinverse.
pub fn regularized_gram_solve(a: &Matrix, eps: f64, b: &Matrix) -> Matrix {
    let n = a.rows();
    assert_eq!(b.rows(), n, "rhs rows must match gram dimension");
    let mut gram = a.matmul_nt(a);
    for i in 0..n {
        gram.set(i, i, gram.get(i, i) + eps);
    }
    let g = DMatrix::from_row_slice(n, n, gram.data());
    let rhs = DMatrix::from_row_slice(b.rows(), b.cols(), b.data());
    let chol = nalgebra::Cholesky::new(g).expect("regularized gram matrix is SPD");
    let x = chol.solve(&rhs);
    Matrix::from_fn(b.rows(), b.cols(), |r, c| x[(r, c)])
}
