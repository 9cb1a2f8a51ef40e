//! Comparison optimizers: naive simultaneous factor descent, Riemannian
//! gradient descent with the HOSVD retraction, and dense SGD.

use crate::linalg::regularized_gram_solve;
use crate::model::{partial_contraction, FactorGradients};
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::{hosvd, HosvdRank, TuckerTensor};
use crate::{Error, Result};

/// State of the naive simultaneous factor-descent baseline. The factors are
/// never re-orthonormalized: drifting off the Stiefel manifold is the
/// behavior this baseline exists to exhibit.
#[derive(Debug, Clone)]
pub struct NaiveState {
    pub weight: TuckerTensor,
    core_momentum: Option<DenseTensor>,
    factor_momenta: Option<Vec<Matrix>>,
}

impl NaiveState {
    pub fn new(weight: TuckerTensor) -> Self {
        Self {
            weight,
            core_momentum: None,
            factor_momenta: None,
        }
    }
}

/// Block-coordinate step `C <- C - lr * dC`, `U_i <- U_i - lr * dU_i`,
/// optionally with heavy-ball momentum on every block.
pub fn naive_factorized_step(
    state: &mut NaiveState,
    grads: &FactorGradients,
    lr: f64,
    beta: f64,
) -> Result<()> {
    let (core_dir, factor_dirs) = if beta > 0.0 {
        let core_m = match state.core_momentum.take() {
            Some(m) => m.scale(beta).add(&grads.core)?,
            None => grads.core.clone(),
        };
        let factor_m: Vec<Matrix> = match state.factor_momenta.take() {
            Some(ms) => ms
                .iter()
                .zip(&grads.factors)
                .map(|(m, g)| m.scale(beta).add(g))
                .collect(),
            None => grads.factors.clone(),
        };
        state.core_momentum = Some(core_m.clone());
        state.factor_momenta = Some(factor_m.clone());
        (core_m, factor_m)
    } else {
        (grads.core.clone(), grads.factors.clone())
    };

    let new_core = state.weight.core().axpy(-lr, &core_dir)?;
    let new_factors: Vec<Matrix> = state
        .weight
        .factors()
        .iter()
        .zip(&factor_dirs)
        .map(|(u, d)| u.axpy(-lr, d))
        .collect();
    if !new_core.is_finite() || new_factors.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("naive factorized update"));
    }
    state.weight = TuckerTensor::new(new_core, new_factors)?;
    Ok(())
}

/// Orthogonal projection of `grad` onto the tangent space at `weight`:
/// the core term `grad x_j P_j` plus one term per mode built from the
/// Tikhonov-regularized pseudoinverse of `Mat_j(C)`.
pub fn tangent_project(weight: &TuckerTensor, grad: &DenseTensor) -> Result<DenseTensor> {
    if grad.shape() != weight.outer_shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} vs layer shape {:?}",
            grad.shape(),
            weight.outer_shape()
        )));
    }
    // Core contribution: contract into core coordinates, expand back.
    let transposed: Vec<Matrix> = weight.factors().iter().map(Matrix::transpose).collect();
    let tslots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
    let core_coords = grad.multi_mode_multiply(&tslots)?;
    let fslots: Vec<Option<&Matrix>> = weight.factors().iter().map(Some).collect();
    let mut projected = core_coords.multi_mode_multiply(&fslots)?;

    for j in 0..weight.order() {
        let u = &weight.factors()[j];
        let s = weight.core().unfold(j)?;
        let m = partial_contraction(grad, weight, j)?; // n_j x prod(r_k)
                                                       // X = M S^T (S S^T + eps I)^{-1}
        let eps = 1e-12 * s.frobenius_norm().powi(2);
        let sm_t = s.matmul_nt(&m); // r_j x n_j
        let x = regularized_gram_solve(&s, eps, &sm_t).transpose(); // n_j x r_j
        let delta_u = x.sub(&u.matmul(&u.matmul_tn(&x)));
        // Contribution: C x_j delta_u x_{k != j} U_k.
        let slots: Vec<Option<&Matrix>> = (0..weight.order())
            .map(|k| {
                if k == j {
                    Some(&delta_u)
                } else {
                    Some(&weight.factors()[k])
                }
            })
            .collect();
        projected = projected.add(&weight.core().multi_mode_multiply(&slots)?)?;
    }
    Ok(projected)
}

/// Riemannian gradient descent step: project the gradient onto the tangent
/// space, take the Euler step, retract by HOSVD at the current ranks.
pub fn rgd_hosvd_step(weight: &TuckerTensor, grad: &DenseTensor, lr: f64) -> Result<TuckerTensor> {
    let direction = tangent_project(weight, grad)?;
    let moved = weight.reconstruct().axpy(-lr, &direction)?;
    if !moved.is_finite() {
        return Err(Error::NonFinite("rgd update"));
    }
    hosvd(&moved, HosvdRank::Ranks(&weight.ranks()))
}

/// Dense momentum-SGD state.
#[derive(Debug, Clone)]
pub struct FullSgdState {
    pub weight: DenseTensor,
    velocity: Option<DenseTensor>,
}

impl FullSgdState {
    pub fn new(weight: DenseTensor) -> Self {
        Self {
            weight,
            velocity: None,
        }
    }
}

/// `v <- beta v + grad; W <- W - lr v`.
pub fn full_sgd_step(
    state: &mut FullSgdState,
    grad: &DenseTensor,
    lr: f64,
    beta: f64,
) -> Result<()> {
    let direction = if beta > 0.0 {
        let v = match state.velocity.take() {
            Some(v) => v.scale(beta).add(grad)?,
            None => grad.clone(),
        };
        state.velocity = Some(v.clone());
        v
    } else {
        grad.clone()
    };
    state.weight = state.weight.axpy(-lr, &direction)?;
    Ok(())
}
