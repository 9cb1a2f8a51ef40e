//! Runtime self-check suite: every module invariant, the gradient
//! finite-difference checks, the one-step algorithm equivalence, and the
//! rounding contracts, each reported as a named pass/fail/skip row.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{rgd_hosvd_step, tangent_project};
use crate::data::{load_mnist, make_low_rank_target, SyntheticSpec};
use crate::dlrt::{
    augmented_bases, descend_and_truncate, project_to_bases, projected_gradient_norm,
    step_efficient, step_fixed_rank, step_reference, DlrtConfig, DlrtLayerState,
};
use crate::harness::locate_mnist;
use crate::linalg::{qr_orthonormal, truncation_rank};
use crate::model::{
    factor_gradients, full_weight_gradient, loss_mse, loss_softmax_ce, Batch, ConvParams,
    DenseLayer, FactorizedLayer, LossKind, NetLayer, QuadraticLoss, Targets,
};
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::{hosvd, truncate, HosvdRank, TuckerTensor};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail(String),
    Skip(String),
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub millis: u128,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results
        .iter()
        .all(|r| !matches!(r.status, CheckStatus::Fail(_)))
}

// Seeded generators shared by the checks.

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let raw = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    qr_orthonormal(&raw)
        .expect("rows >= cols by construction")
        .0
}

pub fn random_tucker(shape: &[usize], ranks: &[usize], rng: &mut ChaCha8Rng) -> TuckerTensor {
    let core = random_tensor(ranks, rng);
    let factors = shape
        .iter()
        .zip(ranks)
        .map(|(&n, &r)| random_orthonormal(n, r, rng))
        .collect();
    TuckerTensor::new(core, factors).expect("consistent shapes")
}

fn random_shape(
    rng: &mut ChaCha8Rng,
    min_order: usize,
    max_order: usize,
    max_size: usize,
) -> Vec<usize> {
    let d = rng.random_range(min_order..=max_order);
    (0..d).map(|_| rng.random_range(2..=max_size)).collect()
}

/// Random rank tuple of a representable full-Tucker-rank core: every rank is
/// capped by the product of the others.
fn feasible_ranks(rng: &mut ChaCha8Rng, d: usize, lo: usize, hi: usize) -> Vec<usize> {
    let mut ranks: Vec<usize> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    loop {
        let mut changed = false;
        for i in 0..d {
            let others: usize = ranks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &r)| r)
                .product();
            if ranks[i] > others {
                ranks[i] = others;
                changed = true;
            }
        }
        if !changed {
            return ranks;
        }
    }
}

fn rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.sub(b)
        .map(|d| d.frobenius_norm() / b.frobenius_norm().max(1e-300))
        .unwrap_or(f64::INFINITY)
}

/// Central finite differences of a scalar function over every entry.
pub fn finite_difference(
    f: &mut dyn FnMut(&DenseTensor) -> Result<f64>,
    at: &DenseTensor,
    h: f64,
) -> Result<DenseTensor> {
    let mut point = at.clone();
    let mut grad = DenseTensor::zeros(at.shape().to_vec());
    for i in 0..at.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + h;
        let up = f(&point)?;
        point.data_mut()[i] = orig - h;
        let dn = f(&point)?;
        point.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - dn) / (2.0 * h);
    }
    Ok(grad)
}

fn norm_rel_defect(analytic: &DenseTensor, fd: &DenseTensor) -> f64 {
    let diff = analytic
        .sub(fd)
        .map(|d| d.frobenius_norm())
        .unwrap_or(f64::INFINITY);
    diff / fd.frobenius_norm().max(1e-12)
}

/// Worst normwise relative disagreement between the contracted factor/core
/// gradients and finite differences of the reconstruction loss. With
/// `flip_sign` the factor gradients are deliberately negated, which a working
/// check must flag (mutation probe for the harness itself).
pub fn factor_gradient_fd_defect(seed: u64, flip_sign: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [5, 4, 3];
    let ranks = [2, 2, 2];
    let weight = random_tucker(&shape, &ranks, &mut rng);
    let target = random_tensor(&shape, &mut rng);
    let q = QuadraticLoss::new(target);
    let grad_w = q.grad(&weight.reconstruct())?;
    let mut grads = factor_gradients(&grad_w, &weight)?;
    if flip_sign {
        for g in &mut grads.factors {
            *g = g.scale(-1.0);
        }
    }
    let mut worst: f64 = 0.0;

    // Core gradient against finite differences in C.
    let fd_core = finite_difference(
        &mut |c| q.value(&TuckerTensor::new(c.clone(), weight.factors().to_vec())?.reconstruct()),
        weight.core(),
        1e-5,
    )?;
    worst = worst.max(norm_rel_defect(&grads.core, &fd_core));

    // Every factor gradient against finite differences in U_i.
    for i in 0..weight.order() {
        let u = &weight.factors()[i];
        let as_tensor = u.to_tensor();
        let fd_u = finite_difference(
            &mut |ut| {
                let mut factors = weight.factors().to_vec();
                factors[i] = Matrix::new(u.rows(), u.cols(), ut.data().to_vec())?;
                q.value(&TuckerTensor::new(weight.core().clone(), factors)?.reconstruct())
            },
            &as_tensor,
            1e-5,
        )?;
        worst = worst.max(norm_rel_defect(&grads.factors[i].to_tensor(), &fd_u));
    }
    Ok(worst)
}

type CheckFn = fn(&mut ChaCha8Rng) -> std::result::Result<(), String>;

fn check_fold_unfold(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..1000 {
        let shape = random_shape(rng, 2, 4, 5);
        let t = random_tensor(&shape, rng);
        let mode = rng.random_range(0..shape.len());
        let m = t.unfold(mode).map_err(|e| e.to_string())?;
        let back = DenseTensor::fold(&m, mode, &shape).map_err(|e| e.to_string())?;
        if back != t {
            return Err(format!("case {case}: fold(unfold) not bit-exact"));
        }
    }
    Ok(())
}

/// Entrywise Tucker summation, independent of the n-mode-product code path.
fn entrywise_tucker(core: &DenseTensor, factors: &[Matrix]) -> DenseTensor {
    let outer: Vec<usize> = factors.iter().map(Matrix::rows).collect();
    DenseTensor::from_fn(outer, |idx| {
        let mut acc = 0.0;
        let mut alpha = vec![0usize; core.order()];
        'sum: loop {
            let mut term = core.get(&alpha);
            for (k, u) in factors.iter().enumerate() {
                term *= u.get(idx[k], alpha[k]);
            }
            acc += term;
            for k in (0..alpha.len()).rev() {
                alpha[k] += 1;
                if alpha[k] < core.shape()[k] {
                    continue 'sum;
                }
                alpha[k] = 0;
            }
            break;
        }
        acc
    })
}

fn check_mode_product_oracle(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..1000 {
        let d = rng.random_range(2..=4);
        let ranks: Vec<usize> = (0..d).map(|_| rng.random_range(1..=3)).collect();
        let shape: Vec<usize> = ranks.iter().map(|&r| rng.random_range(r..=4)).collect();
        let t = random_tucker(&shape, &ranks, rng);
        let fast = t.reconstruct();
        let oracle = entrywise_tucker(t.core(), t.factors());
        let r = rel(&fast, &oracle);
        if r > 1e-12 {
            return Err(format!("case {case}: mode product off by {r}"));
        }
    }
    Ok(())
}

fn check_orthonormal_norm_preservation(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..300 {
        let shape = random_shape(rng, 2, 4, 5);
        let t = random_tensor(&shape, rng);
        let mode = rng.random_range(0..shape.len());
        let bigger = shape[mode] + rng.random_range(0..3);
        let u = random_orthonormal(bigger, shape[mode], rng);
        let expanded = t.mode_multiply(&u, mode).map_err(|e| e.to_string())?;
        let drift =
            (expanded.frobenius_norm() - t.frobenius_norm()).abs() / t.frobenius_norm().max(1e-12);
        if drift > 1e-12 {
            return Err(format!("case {case}: norm drift {drift}"));
        }
    }
    Ok(())
}

fn check_qr_contracts(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..200 {
        let cols = rng.random_range(1..=6);
        let rows = cols + rng.random_range(0..6);
        let mut m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        if case % 4 == 0 && cols >= 2 {
            // Force a dependent column.
            for r in 0..rows {
                let v = m.get(r, 0);
                m.set(r, cols - 1, 2.0 * v);
            }
        }
        let (q, r) = qr_orthonormal(&m).map_err(|e| e.to_string())?;
        let gram_defect = q
            .matmul_tn(&q)
            .sub(&Matrix::identity(cols))
            .frobenius_norm();
        if gram_defect > 1e-12 {
            return Err(format!("case {case}: orthonormality defect {gram_defect}"));
        }
        let rec = q.matmul(&r).sub(&m).frobenius_norm() / m.frobenius_norm().max(1e-12);
        if rec > 1e-12 {
            return Err(format!("case {case}: reconstruction defect {rec}"));
        }
        let (q2, r2) = qr_orthonormal(&m).map_err(|e| e.to_string())?;
        if q.data() != q2.data() || r.data() != r2.data() {
            return Err(format!("case {case}: nondeterministic output"));
        }
        for j in 0..cols {
            if r.get(j, j) < 0.0 {
                return Err(format!("case {case}: negative diagonal"));
            }
        }
    }
    Ok(())
}

fn check_truncation_rank_monotone(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..500 {
        let n = rng.random_range(1..=8);
        let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        s.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        // Budgets grow with k; the selected rank must never grow with them.
        let mut last = usize::MAX;
        for k in 0..6 {
            let budget = 0.7_f64.powi(5 - k) * 3.0;
            let r = truncation_rank(&s, budget, 1).map_err(|e| e.to_string())?;
            if r > last {
                return Err(format!("case {case}: rank grew with a larger budget"));
            }
            last = r;
        }
    }
    Ok(())
}

fn check_rounding_contract(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..1000 {
        let d = rng.random_range(2..=4);
        let ranks = feasible_ranks(rng, d, 1, 4);
        let shape: Vec<usize> = ranks.iter().map(|&r| r + rng.random_range(0..4)).collect();
        let t = random_tucker(&shape, &ranks, rng);
        let tau = rng.random_range(0.0..0.6);
        let trunc = truncate(&t, tau, 1, None).map_err(|e| e.to_string())?;
        let err = rel(&trunc.reconstruct(), &t.reconstruct());
        if err > tau + 1e-12 {
            return Err(format!("case {case}: error {err} exceeds tau {tau}"));
        }
        if trunc.orthonormality_defect() > 1e-10 {
            return Err(format!("case {case}: orthonormality lost"));
        }
    }
    Ok(())
}

fn check_rounding_idempotence(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..100 {
        let t = random_tucker(&[6, 5, 4], &[3, 3, 2], rng);
        let once = truncate(&t, 0.0, 1, None).map_err(|e| e.to_string())?;
        let twice = truncate(&once, 0.0, 1, None).map_err(|e| e.to_string())?;
        let drift = rel(&twice.reconstruct(), &once.reconstruct());
        if drift > 1e-12 {
            return Err(format!(
                "case {case}: tau=0 rounding not idempotent ({drift})"
            ));
        }
    }
    Ok(())
}

fn check_hosvd_tolerance(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..200 {
        let shape = random_shape(rng, 3, 4, 5);
        let w = random_tensor(&shape, rng);
        for tau in [0.0, 1e-3, 0.1, 0.4] {
            let t = hosvd(&w, HosvdRank::Tolerance(tau)).map_err(|e| e.to_string())?;
            let err = rel(&t.reconstruct(), &w);
            if err > tau + 1e-11 {
                return Err(format!("case {case}: hosvd error {err} > tau {tau}"));
            }
        }
    }
    Ok(())
}

fn check_gradients_fd(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    // Contracted factor/core gradients.
    for seed in 0..5 {
        let defect = factor_gradient_fd_defect(seed, false).map_err(|e| e.to_string())?;
        if defect > 1e-6 {
            return Err(format!("factor gradients off by {defect}"));
        }
    }

    // Dense linear layer + MSE.
    let w = random_tensor(&[4, 3], rng);
    let layer = NetLayer::Dense(
        DenseLayer::linear(w.clone(), Some(vec![0.1, -0.1, 0.2, 0.0]))
            .map_err(|e| e.to_string())?,
    );
    let batch = Batch::new(
        random_tensor(&[3, 3], rng),
        Targets::Values(random_tensor(&[3, 4], rng)),
    )
    .map_err(|e| e.to_string())?;
    let (_, grad_w, _) =
        full_weight_gradient(&layer, &batch, LossKind::Mse).map_err(|e| e.to_string())?;
    let layer_for_fd = layer.clone();
    let fd = finite_difference(
        &mut |wt| {
            let l2 = match &layer_for_fd {
                NetLayer::Dense(d) => {
                    NetLayer::Dense(DenseLayer::linear(wt.clone(), d.bias.clone())?)
                }
                _ => unreachable!(),
            };
            Ok(full_weight_gradient(&l2, &batch, LossKind::Mse)?.0)
        },
        &w,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let defect = norm_rel_defect(&grad_w, &fd);
    if defect > 1e-6 {
        return Err(format!("linear dW off by {defect}"));
    }

    // Factorized conv layer + softmax-CE.
    let kernel = random_tensor(&[3, 2, 3, 3], rng).scale(0.4);
    let tucker = hosvd(&kernel, HosvdRank::Ranks(&[2, 2, 3, 3])).map_err(|e| e.to_string())?;
    let conv = FactorizedLayer::conv2d(
        tucker,
        Some(vec![0.0; 3]),
        ConvParams {
            stride: 1,
            padding: 1,
        },
    )
    .map_err(|e| e.to_string())?;
    let cbatch = Batch::new(
        random_tensor(&[2, 2, 5, 5], rng),
        Targets::Values(random_tensor(&[2, 3, 5, 5], rng)),
    )
    .map_err(|e| e.to_string())?;
    let conv_layer = NetLayer::Factorized(conv.clone());
    let (_, grad_k, _) =
        full_weight_gradient(&conv_layer, &cbatch, LossKind::Mse).map_err(|e| e.to_string())?;
    let dense_kernel = conv.weight.reconstruct();
    let fd_k = finite_difference(
        &mut |kt| {
            let dl = DenseLayer::conv2d(
                kt.clone(),
                Some(vec![0.0; 3]),
                ConvParams {
                    stride: 1,
                    padding: 1,
                },
            )?;
            Ok(full_weight_gradient(&NetLayer::Dense(dl), &cbatch, LossKind::Mse)?.0)
        },
        &dense_kernel,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    let defect = norm_rel_defect(&grad_k, &fd_k);
    if defect > 1e-6 {
        return Err(format!("conv dW off by {defect}"));
    }

    // Loss gradients.
    let pred = random_tensor(&[3, 4], rng);
    let targ = random_tensor(&[3, 4], rng);
    let (_, g_mse) = loss_mse(&pred, &targ).map_err(|e| e.to_string())?;
    let fd_mse = finite_difference(&mut |p| Ok(loss_mse(p, &targ)?.0), &pred, 1e-5)
        .map_err(|e| e.to_string())?;
    if norm_rel_defect(&g_mse, &fd_mse) > 1e-6 {
        return Err("mse gradient off".into());
    }
    let logits = random_tensor(&[3, 5], rng);
    let labels = vec![1usize, 4, 0];
    let (_, g_ce) = loss_softmax_ce(&logits, &labels).map_err(|e| e.to_string())?;
    let fd_ce = finite_difference(&mut |l| Ok(loss_softmax_ce(l, &labels)?.0), &logits, 1e-5)
        .map_err(|e| e.to_string())?;
    if norm_rel_defect(&g_ce, &fd_ce) > 1e-6 {
        return Err("softmax-ce gradient off".into());
    }
    Ok(())
}

fn check_step_orthonormality(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let steps = [step_efficient, step_reference, step_fixed_rank];
    for case in 0..150 {
        let d = rng.random_range(2..=4);
        let ranks = feasible_ranks(rng, d, 1, 3);
        let shape: Vec<usize> = ranks.iter().map(|&r| r + rng.random_range(1..4)).collect();
        let weight = random_tucker(&shape, &ranks, rng);
        let mut provider = QuadraticLoss::new(random_tensor(&shape, rng));
        let tau = rng.random_range(0.0..0.2);
        let beta = rng.random_range(0.0..0.9);
        let cfg = DlrtConfig::new(tau, 0.05)
            .map_err(|e| e.to_string())?
            .with_momentum(beta);
        let mut state = DlrtLayerState::new(weight);
        let step = steps[case % 3];
        step(&mut state, &mut provider, &cfg).map_err(|e| e.to_string())?;
        let defect = state.weight.orthonormality_defect();
        if defect > 1e-10 {
            return Err(format!("case {case}: defect {defect}"));
        }
    }
    Ok(())
}

fn check_algorithm_equivalence(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..100 {
        let d = 2 + case % 3;
        let ranks = feasible_ranks(rng, d, 1, 3);
        let shape: Vec<usize> = ranks
            .iter()
            .map(|&r| 2 * r + rng.random_range(0..3))
            .collect();
        let weight = random_tucker(&shape, &ranks, rng);
        let target = random_tensor(&shape, rng);
        let cfg = DlrtConfig::new(0.0, 0.05).map_err(|e| e.to_string())?;

        let mut s1 = DlrtLayerState::new(weight.clone());
        let mut p1 = QuadraticLoss::new(target.clone());
        step_efficient(&mut s1, &mut p1, &cfg).map_err(|e| e.to_string())?;
        let mut s2 = DlrtLayerState::new(weight);
        let mut p2 = QuadraticLoss::new(target);
        step_reference(&mut s2, &mut p2, &cfg).map_err(|e| e.to_string())?;

        let r = rel(&s1.weight.reconstruct(), &s2.weight.reconstruct());
        if r > 1e-9 {
            return Err(format!("case {case} (d={d}): divergence {r}"));
        }
    }
    Ok(())
}

fn check_tangent_flow_exactness(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..10 {
        let shape = [6, 5, 4];
        let ranks = [2, 2, 2];
        let target = random_tucker(&shape, &ranks, rng).reconstruct();
        let start = random_tucker(&shape, &ranks, rng);
        let mut euler = start.reconstruct();
        let mut provider = QuadraticLoss::new(target);
        let cfg = DlrtConfig::new(0.0, 0.05).map_err(|e| e.to_string())?;
        let mut state = DlrtLayerState::new(start);
        for step in 0..20 {
            step_efficient(&mut state, &mut provider, &cfg).map_err(|e| e.to_string())?;
            euler = provider
                .euler_step(&euler, cfg.lr)
                .map_err(|e| e.to_string())?;
            let drift = rel(&state.weight.reconstruct(), &euler);
            if drift > 1e-9 {
                return Err(format!("case {case} step {step}: drift {drift}"));
            }
        }
    }
    Ok(())
}

fn check_quadratic_descent(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let shape = [8, 8, 8];
    let target = random_tucker(&shape, &[3, 3, 3], rng)
        .reconstruct()
        .scale(0.3);
    // Strict descent at tau = 0.
    let start = random_tucker(&shape, &[3, 3, 3], rng);
    let cfg = DlrtConfig::new(0.0, 0.01).map_err(|e| e.to_string())?;
    let mut provider = QuadraticLoss::new(target.clone());
    let mut state = DlrtLayerState::new(start.clone());
    let mut prev = f64::INFINITY;
    for step in 0..100 {
        let info = step_efficient(&mut state, &mut provider, &cfg).map_err(|e| e.to_string())?;
        if info.loss >= prev {
            return Err(format!("step {step}: loss did not strictly decrease"));
        }
        prev = info.loss;
    }

    // Bounded per-step increase at tau > 0.
    for tau in [1e-3, 1e-2] {
        let cfg = DlrtConfig::new(tau, 0.01).map_err(|e| e.to_string())?;
        let mut provider = QuadraticLoss::new(target.clone());
        let mut state = DlrtLayerState::new(start.clone());
        let mut losses = Vec::new();
        let mut sup_grad: f64 = 0.0;
        for _ in 0..100 {
            let info =
                step_efficient(&mut state, &mut provider, &cfg).map_err(|e| e.to_string())?;
            losses.push(info.loss);
            sup_grad = sup_grad.max(info.grad_norm);
        }
        let final_loss = provider
            .value(&state.weight.reconstruct())
            .map_err(|e| e.to_string())?;
        losses.push(final_loss);
        for (step, pair) in losses.windows(2).enumerate() {
            let increase = pair[1] - pair[0];
            if increase > sup_grad * tau {
                return Err(format!(
                    "tau {tau} step {step}: increase {increase} exceeds bound {}",
                    sup_grad * tau
                ));
            }
        }
    }
    Ok(())
}

fn check_within_step_truncation(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..100 {
        let d = rng.random_range(2..=4);
        let ranks = feasible_ranks(rng, d, 2, 3);
        let shape: Vec<usize> = ranks
            .iter()
            .map(|&r| 2 * r + rng.random_range(0..3))
            .collect();
        let weight = random_tucker(&shape, &ranks, rng);
        let target = random_tensor(&shape, rng);
        let q = QuadraticLoss::new(target);
        let tau = rng.random_range(0.0..0.3);
        let cfg = DlrtConfig::new(tau, 0.05).map_err(|e| e.to_string())?;

        let grad_w = q.grad(&weight.reconstruct()).map_err(|e| e.to_string())?;
        let fg = factor_gradients(&grad_w, &weight).map_err(|e| e.to_string())?;
        let bases = augmented_bases(&weight, &fg.factors).map_err(|e| e.to_string())?;
        let (core, _) = project_to_bases(&weight, &bases, None).map_err(|e| e.to_string())?;
        let projected = TuckerTensor::new(core, bases).map_err(|e| e.to_string())?;
        let grad_core = q
            .grad(&projected.reconstruct())
            .map_err(|e| e.to_string())?
            .multi_mode_multiply(
                &projected
                    .factors()
                    .iter()
                    .map(Matrix::transpose)
                    .collect::<Vec<_>>()
                    .iter()
                    .map(Some)
                    .collect::<Vec<_>>(),
            )
            .map_err(|e| e.to_string())?;
        let (pre, _) = descend_and_truncate(projected.clone(), &grad_core, None, &cfg, false)
            .map_err(|e| e.to_string())?;
        let (post, _) = descend_and_truncate(projected, &grad_core, None, &cfg, true)
            .map_err(|e| e.to_string())?;
        let w_pre = pre.reconstruct();
        let w_post = post.reconstruct();
        let err = w_pre
            .sub(&w_post)
            .map_err(|e| e.to_string())?
            .frobenius_norm();
        if err > tau * w_pre.frobenius_norm() + 1e-12 {
            return Err(format!(
                "case {case}: truncation moved {err} > tau |W| = {}",
                tau * w_pre.frobenius_norm()
            ));
        }
    }
    Ok(())
}

fn check_rgd_contracts(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let mut tested = 0;
    for case in 0..200 {
        let weight = random_tucker(&[6, 5, 4], &[3, 2, 2], rng);
        // The regularized pseudoinverse only promises tight idempotence on
        // well-conditioned cores; resample past ill-conditioned draws.
        let conditioning = (0..3)
            .map(|i| {
                let s = crate::linalg::svd(&weight.core().unfold(i).expect("valid mode")).s;
                s[s.len() - 1] / s[0]
            })
            .fold(f64::INFINITY, f64::min);
        if conditioning < 0.1 {
            continue;
        }
        tested += 1;
        let grad = random_tensor(&[6, 5, 4], rng);
        let next = rgd_hosvd_step(&weight, &grad, 0.05).map_err(|e| e.to_string())?;
        if next.ranks() != weight.ranks() {
            return Err(format!("case {case}: ranks changed"));
        }
        let once = tangent_project(&weight, &grad).map_err(|e| e.to_string())?;
        let twice = tangent_project(&weight, &once).map_err(|e| e.to_string())?;
        let drift = rel(&twice, &once);
        if drift > 1e-10 {
            return Err(format!("case {case}: projector not idempotent ({drift})"));
        }
        // Orthogonal projection: non-expansive up to the regularization slack.
        let expansion = once.frobenius_norm() / grad.frobenius_norm().max(1e-300);
        if expansion > 1.0 + 1e-6 {
            return Err(format!(
                "case {case}: projection expanded the gradient ({expansion})"
            ));
        }
    }
    if tested < 30 {
        return Err(format!("only {tested} well-conditioned cases sampled"));
    }
    Ok(())
}

fn check_projected_norm_oracle(rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    for case in 0..100 {
        let weight = random_tucker(&[5, 4, 6], &[2, 2, 3], rng);
        let g = random_tensor(&[5, 4, 6], rng);
        let projectors: Vec<Matrix> = weight.factors().iter().map(|u| u.matmul_nt(u)).collect();
        let slots: Vec<Option<&Matrix>> = projectors.iter().map(Some).collect();
        let oracle = g
            .multi_mode_multiply(&slots)
            .map_err(|e| e.to_string())?
            .frobenius_norm();
        let fast = projected_gradient_norm(&weight, &g).map_err(|e| e.to_string())?;
        if (oracle - fast).abs() > 1e-12 * oracle.max(1.0) {
            return Err(format!("case {case}: {fast} vs oracle {oracle}"));
        }
    }
    Ok(())
}

fn check_generator_determinism(_rng: &mut ChaCha8Rng) -> std::result::Result<(), String> {
    let spec = SyntheticSpec::with_decay(vec![6, 6, 6], vec![3, 3, 3], 0.1, 1234);
    let a = make_low_rank_target(&spec).map_err(|e| e.to_string())?;
    let b = make_low_rank_target(&spec).map_err(|e| e.to_string())?;
    if a.tucker.core().data() != b.tucker.core().data() {
        return Err("core differs across identical seeds".into());
    }
    for (x, y) in a.tucker.factors().iter().zip(b.tucker.factors()) {
        if x.data() != y.data() {
            return Err("factors differ across identical seeds".into());
        }
    }
    Ok(())
}

/// Minimal independent IDX image reader (header + first image only), used as
/// the oracle for the primary parser.
fn independent_first_image(path: &Path) -> std::result::Result<(usize, Vec<u8>), String> {
    use flate2::bufread::GzDecoder;
    use std::io::Read;
    let raw = std::fs::read(path).map_err(|e| e.to_string())?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| e.to_string())?;
        out
    } else {
        raw
    };
    if bytes.len() < 16 {
        return Err("too short".into());
    }
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    if be(0) != 0x803 {
        return Err("bad magic".into());
    }
    let (count, rows, cols) = (be(4), be(8), be(12));
    Ok((count, bytes[16..16 + rows * cols].to_vec()))
}

fn mnist_check(data_dir: &Path) -> std::result::Result<(), String> {
    let [ti, tl, vi, vl] = locate_mnist(data_dir).map_err(|e| e.to_string())?;
    let train = load_mnist(&ti, &tl).map_err(|e| e.to_string())?;
    let test = load_mnist(&vi, &vl).map_err(|e| e.to_string())?;
    if train.len() != 60_000 || test.len() != 10_000 {
        return Err(format!(
            "unexpected split sizes: {} train, {} test",
            train.len(),
            test.len()
        ));
    }
    if (train.rows, train.cols) != (28, 28) {
        return Err("images are not 28x28".into());
    }
    if train.labels().any(|l| l > 9) {
        return Err("label out of range".into());
    }
    // First training label of the canonical distribution.
    if train.label(0) != 5 {
        return Err(format!("first label {} != 5", train.label(0)));
    }
    // Cross-check the first image against the independent reader.
    let (count, first) = independent_first_image(&ti)?;
    if count != 60_000 || first != train.image_bytes(0) {
        return Err("primary parser disagrees with the independent reader".into());
    }
    Ok(())
}

/// Runs the full property suite. MNIST file checks are skipped (not failed)
/// when no dataset directory is supplied or the files are absent.
pub fn run_all(data_dir: Option<&Path>) -> Vec<CheckResult> {
    let named: [(&'static str, CheckFn); 15] = [
        ("tensor/fold-unfold-identity", check_fold_unfold),
        (
            "tensor/mode-product-entrywise-oracle",
            check_mode_product_oracle,
        ),
        (
            "tensor/orthonormal-norm-preservation",
            check_orthonormal_norm_preservation,
        ),
        ("linalg/qr-contracts", check_qr_contracts),
        (
            "linalg/truncation-rank-monotone",
            check_truncation_rank_monotone,
        ),
        ("tucker/rounding-error-contract", check_rounding_contract),
        ("tucker/rounding-idempotence", check_rounding_idempotence),
        ("tucker/hosvd-tolerance", check_hosvd_tolerance),
        ("model/gradients-vs-finite-differences", check_gradients_fd),
        ("dlrt/step-orthonormality", check_step_orthonormality),
        ("dlrt/algorithm-equivalence", check_algorithm_equivalence),
        ("dlrt/tangent-flow-exactness", check_tangent_flow_exactness),
        ("dlrt/quadratic-descent", check_quadratic_descent),
        ("dlrt/within-step-truncation", check_within_step_truncation),
        ("baselines/rgd-contracts", check_rgd_contracts),
    ];
    let mut results = Vec::new();
    for (i, (name, f)) in named.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE + i as u64);
        let t0 = Instant::now();
        let status = match f(&mut rng) {
            Ok(()) => CheckStatus::Pass,
            Err(msg) => CheckStatus::Fail(msg),
        };
        results.push(CheckResult {
            name,
            status,
            millis: t0.elapsed().as_millis(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE + 100);
    let t0 = Instant::now();
    results.push(CheckResult {
        name: "dlrt/projected-norm-oracle",
        status: match check_projected_norm_oracle(&mut rng) {
            Ok(()) => CheckStatus::Pass,
            Err(m) => CheckStatus::Fail(m),
        },
        millis: t0.elapsed().as_millis(),
    });

    let t0 = Instant::now();
    results.push(CheckResult {
        name: "data/generator-determinism",
        status: match check_generator_determinism(&mut rng) {
            Ok(()) => CheckStatus::Pass,
            Err(m) => CheckStatus::Fail(m),
        },
        millis: t0.elapsed().as_millis(),
    });

    let t0 = Instant::now();
    let mnist_status = match data_dir {
        None => CheckStatus::Skip("no dataset directory supplied".into()),
        Some(dir) => match locate_mnist(dir) {
            Err(_) => CheckStatus::Skip(format!("MNIST files not found under {}", dir.display())),
            Ok(_) => match mnist_check(dir) {
                Ok(()) => CheckStatus::Pass,
                Err(m) => CheckStatus::Fail(m),
            },
        },
    };
    results.push(CheckResult {
        name: "data/mnist-idx-files",
        status: mnist_status,
        millis: t0.elapsed().as_millis(),
    });
    results
}
