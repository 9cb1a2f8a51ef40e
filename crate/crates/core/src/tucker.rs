//! Tucker representation, HOSVD construction, tolerance-driven rounding, and
//! compression accounting.
//!
//! A [`TuckerTensor`] stores a core `C` of shape `(r_1, ..., r_d)` and one
//! `n_i x r_i` factor per mode; the represented tensor is `C x_1 U_1 ... x_d U_d`.
//! Rounding splits a relative tolerance `tau` into per-mode tail budgets
//! `tau * |C| / sqrt(d)`, which guarantees the global bound
//! `|W - W_trunc| <= tau * |W|`.

use std::io::{Read, Write};

use crate::linalg::{qr_orthonormal, svd, truncation_rank};
use crate::tensor::{DenseTensor, Matrix};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TDLT";
const FORMAT_VERSION: u32 = 1;

/// Tolerance used by the factor-orthonormality invariant.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Core tensor plus per-mode factor matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerTensor {
    core: DenseTensor,
    factors: Vec<Matrix>,
}

impl TuckerTensor {
    /// Builds a Tucker tensor, checking shape consistency between core and
    /// factors. Orthonormality is not enforced here: some optimizers
    /// deliberately leave the Stiefel manifold (see the naive baseline); use
    /// [`TuckerTensor::validate`] where the invariant is required.
    pub fn new(core: DenseTensor, factors: Vec<Matrix>) -> Result<Self> {
        if core.order() != factors.len() {
            return Err(Error::ShapeMismatch(format!(
                "core order {} vs {} factors",
                core.order(),
                factors.len()
            )));
        }
        for (i, u) in factors.iter().enumerate() {
            let r = core.shape()[i];
            if u.cols() != r {
                return Err(Error::ShapeMismatch(format!(
                    "factor {i} has {} columns but core mode size is {r}",
                    u.cols()
                )));
            }
            if u.cols() > u.rows() {
                return Err(Error::RankTooLarge {
                    mode: i,
                    rank: u.cols(),
                    size: u.rows(),
                });
            }
        }
        Ok(Self { core, factors })
    }

    pub fn core(&self) -> &DenseTensor {
        &self.core
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.core.shape().to_vec()
    }

    pub fn outer_shape(&self) -> Vec<usize> {
        self.factors.iter().map(|u| u.rows()).collect()
    }

    /// Dense tensor `C x_1 U_1 ... x_d U_d`.
    pub fn reconstruct(&self) -> DenseTensor {
        let slots: Vec<Option<&Matrix>> = self.factors.iter().map(Some).collect();
        self.core
            .multi_mode_multiply(&slots)
            .expect("factor shapes checked at construction")
    }

    /// Largest Frobenius deviation of any factor gram from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        self.factors
            .iter()
            .map(|u| {
                let gram = u.matmul_tn(u);
                gram.sub(&Matrix::identity(u.cols())).frobenius_norm()
            })
            .fold(0.0, f64::max)
    }

    /// Checks the full invariant set, including factor orthonormality.
    pub fn validate(&self) -> Result<()> {
        let defect = self.orthonormality_defect();
        if defect > ORTHONORMALITY_TOL {
            return Err(Error::ShapeMismatch(format!(
                "factor orthonormality defect {defect:.3e} exceeds {ORTHONORMALITY_TOL:.0e}"
            )));
        }
        if !self.core.is_finite() {
            return Err(Error::NonFinite("TuckerTensor core"));
        }
        Ok(())
    }

    /// Entries stored by the factored representation:
    /// `prod(r_i) + sum(n_i * r_i)`.
    pub fn storage_count(&self) -> usize {
        let core: usize = self.ranks().iter().product();
        let factors: usize = self.factors.iter().map(|u| u.rows() * u.cols()).sum();
        core + factors
    }

    /// Entries of the dense tensor this represents.
    pub fn dense_count(&self) -> usize {
        self.outer_shape().iter().product()
    }

    /// Serializes to the binary container: magic `TDLT`, version, d, shape,
    /// ranks (all little-endian u32), then core and factors as raw little-endian
    /// f64 (core in last-index-fastest order, factors row-major).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.order() as u32).to_le_bytes())?;
        for n in self.outer_shape() {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for r in self.ranks() {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        for v in self.core.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for u in &self.factors {
            for v in u.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::Parse {
            path: "<tucker checkpoint>".into(),
            reason: reason.into(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let d = read_u32(r)? as usize;
        if d == 0 || d > 16 {
            return Err(bad(&format!("implausible tensor order {d}")));
        }
        let mut shape = Vec::with_capacity(d);
        for _ in 0..d {
            shape.push(read_u32(r)? as usize);
        }
        let mut ranks = Vec::with_capacity(d);
        for _ in 0..d {
            ranks.push(read_u32(r)? as usize);
        }
        let core_len: usize = ranks.iter().product();
        let core = DenseTensor::new(ranks.clone(), read_f64s(r, core_len)?)?;
        let mut factors = Vec::with_capacity(d);
        for i in 0..d {
            factors.push(Matrix::new(
                shape[i],
                ranks[i],
                read_f64s(r, shape[i] * ranks[i])?,
            )?);
        }
        Self::new(core, factors)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Rank selection for [`hosvd`].
#[derive(Debug, Clone, Copy)]
pub enum HosvdRank<'a> {
    /// Relative reconstruction tolerance; per-mode tail budget is
    /// `tau * |w| / sqrt(d)`.
    Tolerance(f64),
    /// Explicit per-mode ranks.
    Ranks(&'a [usize]),
}

/// Makes each column's largest-magnitude entry nonnegative (first occurrence
/// wins on ties); removes the SVD sign ambiguity deterministically.
pub(crate) fn sign_fix_columns(m: &mut Matrix) {
    for c in 0..m.cols() {
        let mut best_row = 0;
        let mut best_abs = -1.0;
        for r in 0..m.rows() {
            let a = m.get(r, c).abs();
            if a > best_abs {
                best_abs = a;
                best_row = r;
            }
        }
        if m.get(best_row, c) < 0.0 {
            for r in 0..m.rows() {
                m.set(r, c, -m.get(r, c));
            }
        }
    }
}

/// Orthonormal factor from the leading `r` left singular vectors, completed
/// deterministically when fewer singular vectors exist.
fn leading_left_vectors(u: &Matrix, available: usize, r: usize) -> Result<Matrix> {
    let mut lead = u.take_columns(r.min(available));
    if r > available {
        let pad = Matrix::zeros(u.rows(), r - available);
        let (q, _) = qr_orthonormal(&Matrix::hcat(&[&lead, &pad]))?;
        lead = q;
    }
    sign_fix_columns(&mut lead);
    Ok(lead)
}

/// Higher-order SVD of a dense tensor: per-mode leading left singular vectors
/// of the unfoldings, core `w x_i U_i^T`.
pub fn hosvd(w: &DenseTensor, rank: HosvdRank) -> Result<TuckerTensor> {
    let d = w.order();
    let norm = w.frobenius_norm();
    let mut factors = Vec::with_capacity(d);
    for i in 0..d {
        let unfolded = w.unfold(i)?;
        let dec = svd(&unfolded);
        let r = match rank {
            HosvdRank::Tolerance(tau) => {
                if tau < 0.0 {
                    return Err(Error::NegativeBudget(tau));
                }
                truncation_rank(&dec.s, tau * norm / (d as f64).sqrt(), 1)?
            }
            HosvdRank::Ranks(rs) => {
                if rs.len() != d {
                    return Err(Error::ShapeMismatch(format!(
                        "{} ranks supplied for order-{d} tensor",
                        rs.len()
                    )));
                }
                if rs[i] == 0 || rs[i] > w.shape()[i] {
                    return Err(Error::RankTooLarge {
                        mode: i,
                        rank: rs[i],
                        size: w.shape()[i],
                    });
                }
                rs[i]
            }
        };
        factors.push(leading_left_vectors(&dec.u, dec.s.len(), r)?);
    }
    let transposed: Vec<Matrix> = factors.iter().map(Matrix::transpose).collect();
    let slots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
    let core = w.multi_mode_multiply(&slots)?;
    TuckerTensor::new(core, factors)
}

/// Tolerance-driven rounding with per-mode rank floors; floors let callers
/// pin selected modes at full rank (e.g. the spatial modes of a channel-only
/// factorized convolution). Returns the rounded tensor plus the per-mode
/// inner rotations `U_i'` (old-rank x new-rank) so auxiliary core-coordinate
/// state (e.g. momentum) can ride through the basis change.
pub fn truncate_with_bounds(
    t: &TuckerTensor,
    tau: f64,
    rank_floors: &[usize],
    rank_caps: Option<&[usize]>,
) -> Result<(TuckerTensor, Vec<Matrix>)> {
    if tau < 0.0 {
        return Err(Error::NegativeBudget(tau));
    }
    let d = t.order();
    if rank_floors.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{} rank floors for order-{d} tensor",
            rank_floors.len()
        )));
    }
    let budget = tau * t.core().frobenius_norm() / (d as f64).sqrt();
    let mut rotations = Vec::with_capacity(d);
    for i in 0..d {
        let unfolded = t.core().unfold(i)?;
        let dec = svd(&unfolded);
        let mut r = truncation_rank(&dec.s, budget, rank_floors[i])?;
        if let Some(caps) = rank_caps {
            r = r.min(caps[i].max(1));
        }
        // Floors win over the tolerance but stay within what the mode offers.
        r = r.max(rank_floors[i]).min(dec.s.len().max(1)).max(1);
        rotations.push(leading_left_vectors(&dec.u, dec.s.len(), r)?);
    }
    let transposed: Vec<Matrix> = rotations.iter().map(Matrix::transpose).collect();
    let slots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
    let new_core = t.core().multi_mode_multiply(&slots)?;
    let new_factors: Vec<Matrix> = t
        .factors()
        .iter()
        .zip(&rotations)
        .map(|(u, rot)| u.matmul(rot))
        .collect();
    Ok((TuckerTensor::new(new_core, new_factors)?, rotations))
}

/// Uniform-floor wrapper around [`truncate_with_bounds`].
pub fn truncate_with_rotations(
    t: &TuckerTensor,
    tau: f64,
    rank_floor: usize,
    rank_caps: Option<&[usize]>,
) -> Result<(TuckerTensor, Vec<Matrix>)> {
    truncate_with_bounds(t, tau, &vec![rank_floor; t.order()], rank_caps)
}

/// Tolerance-driven rounding: HOSVD of the core at relative tolerance `tau`,
/// factors pulled back by `U_i <- U_i U_i'`. Guarantees
/// `|reconstruct(t) - reconstruct(result)| <= tau * |reconstruct(t)|` when no
/// rank cap binds.
pub fn truncate(
    t: &TuckerTensor,
    tau: f64,
    rank_floor: usize,
    rank_caps: Option<&[usize]>,
) -> Result<TuckerTensor> {
    truncate_with_rotations(t, tau, rank_floor, rank_caps).map(|(t, _)| t)
}

/// Compression rate `1 - compressed/full`. Negative when the factored form is
/// larger than the dense one; deliberately not clamped.
pub fn compression_rate(full_params: usize, compressed_params: usize) -> Result<f64> {
    if full_params == 0 {
        return Err(Error::Config(
            "compression rate undefined for zero full parameter count".into(),
        ));
    }
    Ok(1.0 - compressed_params as f64 / full_params as f64)
}
