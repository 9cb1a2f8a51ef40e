//! The TDLRT optimizer: rank-adaptive dynamical low-rank training of Tucker
//! layers.
//!
//! [`step_efficient`] is the two-tape algorithm: one backward pass supplies
//! every factor gradient `G_i`, the bases are augmented by orthonormalizing
//! `[U_i | G_i]`, the core is projected onto the augmented bases, a second
//! tape drives the core descent, and a tolerance-driven rounding restores
//! compressed ranks. [`step_reference`] is the per-mode variant built on the
//! reparametrization `K_i = U_i S_i` from the QR of `Mat_i(C)^T`; one step of
//! either algorithm produces the same weight because
//! `span([U_i | K_i - lr * dK_i]) = span([U_i | G_i])`.
//! [`step_fixed_rank`] re-orthonormalizes the updated `K_i` at constant width
//! instead of augmenting.
//!
//! Momentum lives in core coordinates only and rides through every basis
//! change by the same contractions as the core: zero-filled on augmentation,
//! rotated and cropped on truncation.

use crate::linalg::qr_orthonormal;
use crate::model::{factor_gradients, partial_contraction};
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::{truncate_with_bounds, TuckerTensor};
use crate::{Error, Result};

/// Learning-rate schedule; applied by the training harness between steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` after `patience` evaluation windows
    /// without improvement.
    Plateau {
        factor: f64,
        patience: usize,
    },
}

/// Hyperparameters of one TDLRT run.
#[derive(Debug, Clone)]
pub struct DlrtConfig {
    /// Relative truncation tolerance of the rounding step.
    pub tau: f64,
    /// Learning rate of the one-step integration.
    pub lr: f64,
    /// Heavy-ball coefficient for the core descent; 0 disables the buffer.
    pub momentum: f64,
    /// Rank adaptivity switch for [`step_reference`].
    pub adaptive: bool,
    /// Smallest admissible rank per mode.
    pub rank_floor: usize,
    /// Optional per-mode floors overriding `rank_floor`; pinning a mode's
    /// floor at its size freezes it at full rank (channel-only factorized
    /// convolutions pin their spatial modes this way).
    pub rank_floors: Option<Vec<usize>>,
    /// Optional per-mode rank ceiling (defaults to the mode sizes).
    pub rank_caps: Option<Vec<usize>>,
    pub lr_schedule: LrSchedule,
}

impl DlrtConfig {
    pub fn new(tau: f64, lr: f64) -> Result<Self> {
        let cfg = Self {
            tau,
            lr,
            momentum: 0.0,
            adaptive: true,
            rank_floor: 1,
            rank_floors: None,
            rank_caps: None,
            lr_schedule: LrSchedule::Constant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_momentum(mut self, beta: f64) -> Self {
        self.momentum = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.rank_floor == 0 {
            return Err(Error::Config("rank_floor must be >= 1".into()));
        }
        if let Some(floors) = &self.rank_floors {
            if floors.contains(&0) {
                return Err(Error::Config("every rank floor must be >= 1".into()));
            }
        }
        if let Some(caps) = &self.rank_caps {
            if caps.iter().any(|&c| c < self.rank_floor) {
                return Err(Error::Config("every rank cap must be >= rank_floor".into()));
            }
        }
        Ok(())
    }
}

/// Optimizer state of one Tucker layer.
#[derive(Debug, Clone)]
pub struct DlrtLayerState {
    pub weight: TuckerTensor,
    /// Heavy-ball buffer in core coordinates; tracks the core shape across
    /// every rank change.
    pub core_momentum: Option<DenseTensor>,
    /// Per-step rank tuples.
    pub rank_trace: Vec<Vec<usize>>,
}

impl DlrtLayerState {
    pub fn new(weight: TuckerTensor) -> Self {
        let ranks = weight.ranks();
        Self {
            weight,
            core_momentum: None,
            rank_trace: vec![ranks],
        }
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.weight.ranks()
    }
}

/// Supplies loss and full weight gradient at a dense point for the current
/// mini-batch. A step evaluates the provider twice (two tapes) on the same
/// batch; the harness advances batches between steps.
pub trait GradientProvider {
    fn loss_and_grad(&mut self, w: &DenseTensor) -> Result<(f64, DenseTensor)>;
}

impl GradientProvider for crate::model::QuadraticLoss {
    fn loss_and_grad(&mut self, w: &DenseTensor) -> Result<(f64, DenseTensor)> {
        Ok((self.value(w)?, self.grad(w)?))
    }
}

/// Diagnostics of one optimizer step, all measured at the pre-step point.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub loss: f64,
    pub grad_norm: f64,
    pub projected_grad_norm: f64,
}

/// Orthonormal bases spanning `[U_i | G_i]`, one per mode, of width
/// `min(2 r_i, n_i)`; dependent columns are completed deterministically.
pub fn augmented_bases(weight: &TuckerTensor, factor_grads: &[Matrix]) -> Result<Vec<Matrix>> {
    let mut bases = Vec::with_capacity(weight.order());
    for (u, g) in weight.factors().iter().zip(factor_grads) {
        let stacked = Matrix::hcat(&[u, g]);
        let capped = if stacked.cols() > u.rows() {
            stacked.take_columns(u.rows())
        } else {
            stacked
        };
        bases.push(qr_orthonormal(&capped)?.0);
    }
    Ok(bases)
}

/// Projects the core (and the momentum buffer, when present) onto new bases:
/// `C_tilde = C x_i B_i` with `B_i = (U_i^new)^T U_i`. Directions outside the
/// old span receive zero coefficients, which zero-initializes momentum for
/// freshly augmented directions.
pub fn project_to_bases(
    weight: &TuckerTensor,
    new_bases: &[Matrix],
    momentum: Option<&DenseTensor>,
) -> Result<(DenseTensor, Option<DenseTensor>)> {
    let change: Vec<Matrix> = weight
        .factors()
        .iter()
        .zip(new_bases)
        .map(|(u, nu)| nu.matmul_tn(u))
        .collect();
    let slots: Vec<Option<&Matrix>> = change.iter().map(Some).collect();
    let core = weight.core().multi_mode_multiply(&slots)?;
    let momentum = match momentum {
        Some(m) => Some(m.multi_mode_multiply(&slots)?),
        None => None,
    };
    Ok((core, momentum))
}

/// `|grad_w x_j U_j U_j^T|`: the norm of the gradient projected onto every
/// factor range; the convergence diagnostic logged each step.
pub fn projected_gradient_norm(weight: &TuckerTensor, grad_w: &DenseTensor) -> Result<f64> {
    if grad_w.shape() != weight.outer_shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} vs layer shape {:?}",
            grad_w.shape(),
            weight.outer_shape()
        )));
    }
    // Orthonormal factors preserve the norm, so contracting with U_j^T alone
    // already yields |grad x_j P_j|.
    let transposed: Vec<Matrix> = weight.factors().iter().map(Matrix::transpose).collect();
    let slots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
    Ok(grad_w.multi_mode_multiply(&slots)?.frobenius_norm())
}

fn ensure_finite_grad(grad: &DenseTensor) -> Result<()> {
    if grad.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("weight gradient"))
    }
}

/// Core heavy-ball update: returns the new core and the momentum buffer that
/// produced it.
fn descend_core(
    core: &DenseTensor,
    grad_core: &DenseTensor,
    momentum_proj: Option<DenseTensor>,
    cfg: &DlrtConfig,
) -> Result<(DenseTensor, Option<DenseTensor>)> {
    if cfg.momentum > 0.0 {
        let buffer = match momentum_proj {
            Some(m) => m.scale(cfg.momentum).add(grad_core)?,
            None => grad_core.clone(),
        };
        let new_core = core.axpy(-cfg.lr, &buffer)?;
        Ok((new_core, Some(buffer)))
    } else {
        Ok((core.axpy(-cfg.lr, grad_core)?, None))
    }
}

/// Rounding plus momentum transport: truncates at `tau`, pulls factors back,
/// and rotates the momentum by the same inner rotations, discarding truncated
/// directions.
fn truncate_state(
    weight: TuckerTensor,
    momentum: Option<DenseTensor>,
    cfg: &DlrtConfig,
) -> Result<(TuckerTensor, Option<DenseTensor>)> {
    let floors = match &cfg.rank_floors {
        Some(f) => f.clone(),
        None => vec![cfg.rank_floor; weight.order()],
    };
    let (truncated, rotations) =
        truncate_with_bounds(&weight, cfg.tau, &floors, cfg.rank_caps.as_deref())?;
    let momentum = match momentum {
        Some(m) => {
            let transposed: Vec<Matrix> = rotations.iter().map(Matrix::transpose).collect();
            let slots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
            Some(m.multi_mode_multiply(&slots)?)
        }
        None => None,
    };
    Ok((truncated, momentum))
}

/// Heavy-ball core descent in the new basis followed by the optional rounding
/// step; returns the final weight and the transported momentum buffer. Shared
/// by the single-tensor steps and the network trainer.
pub fn descend_and_truncate(
    projected: TuckerTensor,
    grad_core: &DenseTensor,
    momentum_proj: Option<DenseTensor>,
    cfg: &DlrtConfig,
    truncate: bool,
) -> Result<(TuckerTensor, Option<DenseTensor>)> {
    let (new_core, momentum) = descend_core(projected.core(), grad_core, momentum_proj, cfg)?;
    let stepped = TuckerTensor::new(new_core, projected.factors().to_vec())?;
    let (final_weight, final_momentum) = if truncate {
        truncate_state(stepped, momentum, cfg)?
    } else {
        (stepped, momentum)
    };
    debug_assert!(final_weight.orthonormality_defect() <= crate::tucker::ORTHONORMALITY_TOL);
    Ok((final_weight, final_momentum))
}

/// Shared tail of every variant: tape 2 at the new bases, core descent, and
/// (optionally) the rounding step. Commits to `state` only on success.
fn finish_step(
    state: &mut DlrtLayerState,
    provider: &mut dyn GradientProvider,
    cfg: &DlrtConfig,
    new_bases: Vec<Matrix>,
    truncate: bool,
    info: StepInfo,
) -> Result<StepInfo> {
    let (core_proj, momentum_proj) =
        project_to_bases(&state.weight, &new_bases, state.core_momentum.as_ref())?;
    let projected = TuckerTensor::new(core_proj, new_bases)?;
    let (_, grad_w2) = provider.loss_and_grad(&projected.reconstruct())?;
    ensure_finite_grad(&grad_w2)?;
    let transposed: Vec<Matrix> = projected.factors().iter().map(Matrix::transpose).collect();
    let slots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
    let grad_core = grad_w2.multi_mode_multiply(&slots)?;

    let (final_weight, final_momentum) =
        descend_and_truncate(projected, &grad_core, momentum_proj, cfg, truncate)?;
    state.weight = final_weight;
    state.core_momentum = final_momentum;
    state.rank_trace.push(state.weight.ranks());
    Ok(info)
}

/// One step of the efficient two-tape algorithm (rank-adaptive).
pub fn step_efficient(
    state: &mut DlrtLayerState,
    provider: &mut dyn GradientProvider,
    cfg: &DlrtConfig,
) -> Result<StepInfo> {
    cfg.validate()?;
    let w0 = state.weight.reconstruct();
    let (loss, grad_w) = provider.loss_and_grad(&w0)?;
    ensure_finite_grad(&grad_w)?;
    let info = StepInfo {
        loss,
        grad_norm: grad_w.frobenius_norm(),
        projected_grad_norm: projected_gradient_norm(&state.weight, &grad_w)?,
    };
    let grads = factor_gradients(&grad_w, &state.weight)?;
    let new_bases = augmented_bases(&state.weight, &grads.factors)?;
    finish_step(state, provider, cfg, new_bases, true, info)
}

/// One step of the per-mode reference algorithm built on `K_i = U_i S_i`.
/// With `cfg.adaptive` the basis is augmented to `[K_i | U_i]` and rounded;
/// otherwise ranks stay fixed.
pub fn step_reference(
    state: &mut DlrtLayerState,
    provider: &mut dyn GradientProvider,
    cfg: &DlrtConfig,
) -> Result<StepInfo> {
    step_kls(state, provider, cfg, cfg.adaptive)
}

/// Fixed-rank variant: width-`r_i` re-orthonormalization of the updated
/// `K_i`, no augmentation, no rounding.
pub fn step_fixed_rank(
    state: &mut DlrtLayerState,
    provider: &mut dyn GradientProvider,
    cfg: &DlrtConfig,
) -> Result<StepInfo> {
    step_kls(state, provider, cfg, false)
}

/// New bases from the `K_i = U_i S_i` descent: per mode, QR of `Mat_i(C)^T`
/// yields `Q_i` and `S_i`, the updated `K_i - lr * dK_i` is (optionally)
/// augmented with the old `U_i`, and the result re-orthonormalized.
pub fn kls_bases(
    weight: &TuckerTensor,
    grad_w: &DenseTensor,
    lr: f64,
    augment: bool,
) -> Result<Vec<Matrix>> {
    let mut new_bases = Vec::with_capacity(weight.order());
    for i in 0..weight.order() {
        let core_unf_t = weight.core().unfold(i)?.transpose();
        let (q, r) = qr_orthonormal(&core_unf_t)?; // Mat_i(C)^T = Q_i S_i^T
        let s = r.transpose();
        let k = weight.factors()[i].matmul(&s);
        // dK_i = Mat_i(grad x_{j != i} U_j^T) Q_i, evaluated at the current
        // point: the K-flow right-hand side of the reparametrized dynamics.
        let k_grad = partial_contraction(grad_w, weight, i)?.matmul(&q);
        let k_new = k.axpy(-lr, &k_grad);
        let stacked = if augment {
            Matrix::hcat(&[&k_new, &weight.factors()[i]])
        } else {
            k_new
        };
        let capped = if stacked.cols() > stacked.rows() {
            stacked.take_columns(stacked.rows())
        } else {
            stacked
        };
        new_bases.push(qr_orthonormal(&capped)?.0);
    }
    Ok(new_bases)
}

fn step_kls(
    state: &mut DlrtLayerState,
    provider: &mut dyn GradientProvider,
    cfg: &DlrtConfig,
    adaptive: bool,
) -> Result<StepInfo> {
    cfg.validate()?;
    let w0 = state.weight.reconstruct();
    let (loss, grad_w) = provider.loss_and_grad(&w0)?;
    ensure_finite_grad(&grad_w)?;
    let info = StepInfo {
        loss,
        grad_norm: grad_w.frobenius_norm(),
        projected_grad_norm: projected_gradient_norm(&state.weight, &grad_w)?,
    };
    let new_bases = kls_bases(&state.weight, &grad_w, cfg.lr, adaptive)?;
    finish_step(state, provider, cfg, new_bases, adaptive, info)
}
