//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test -p tdlrt --test acceptance -- --nocapture` to see the
//! per-criterion summary lines.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tdlrt::baselines::{naive_factorized_step, NaiveState};
use tdlrt::dlrt::{
    projected_gradient_norm, step_efficient, step_fixed_rank, step_reference, DlrtConfig,
    DlrtLayerState,
};
use tdlrt::harness::{
    run_lambda_sweep, run_robustness, run_synthetic, run_tau_sweep, slope_loglog, MnistRunConfig,
    OptimizerKind, RobustnessOutcome, SyntheticRun,
};
use tdlrt::linalg::qr_orthonormal;
use tdlrt::model::{
    factor_gradients, full_weight_gradient, loss_mse, loss_softmax_ce, Batch, ConvParams,
    DenseLayer, FactorizedLayer, LossKind, NetLayer, QuadraticLoss, Targets,
};
use tdlrt::tensor::{DenseTensor, Matrix};
use tdlrt::tucker::{hosvd, truncate, HosvdRank, TuckerTensor};

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let raw = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    qr_orthonormal(&raw).unwrap().0
}

fn random_tucker(shape: &[usize], ranks: &[usize], rng: &mut ChaCha8Rng) -> TuckerTensor {
    let core = random_tensor(ranks, rng);
    let factors = shape
        .iter()
        .zip(ranks)
        .map(|(&n, &r)| random_orthonormal(n, r, rng))
        .collect();
    TuckerTensor::new(core, factors).unwrap()
}

/// Random rank tuple of a representable full-Tucker-rank core.
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
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

fn fd_grad(f: &mut dyn FnMut(&DenseTensor) -> f64, at: &DenseTensor, h: f64) -> DenseTensor {
    let mut point = at.clone();
    let mut grad = DenseTensor::zeros(at.shape().to_vec());
    for i in 0..at.len() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + h;
        let up = f(&point);
        point.data_mut()[i] = orig - h;
        let dn = f(&point);
        point.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - dn) / (2.0 * h);
    }
    grad
}

fn rel_defect(analytic: &DenseTensor, fd: &DenseTensor) -> f64 {
    analytic.sub(fd).unwrap().frobenius_norm() / fd.frobenius_norm().max(1e-12)
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

/// Criterion 1: every analytic gradient matches central finite differences
/// at relative error <= 1e-6 on random layers with mode sizes <= 6.
#[test]
fn criterion_1_gradient_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;

    // Dense and factorized linear layers under MSE.
    for case in 0..6 {
        let (n_out, n_in, b) = (
            rng.random_range(2..=6),
            rng.random_range(2..=6),
            rng.random_range(1..=4),
        );
        let w = random_tensor(&[n_out, n_in], &mut rng);
        let bias: Vec<f64> = (0..n_out).map(|_| rng.random_range(-0.3..0.3)).collect();
        let batch = Batch::new(
            random_tensor(&[b, n_in], &mut rng),
            Targets::Values(random_tensor(&[b, n_out], &mut rng)),
        )
        .unwrap();

        let layer: NetLayer = if case % 2 == 0 {
            NetLayer::Dense(DenseLayer::linear(w.clone(), Some(bias.clone())).unwrap())
        } else {
            let ranks = [n_out.min(2), n_in.min(2)];
            NetLayer::Factorized(
                FactorizedLayer::linear(
                    hosvd(&w, HosvdRank::Ranks(&ranks)).unwrap(),
                    Some(bias.clone()),
                )
                .unwrap(),
            )
        };
        let (_, grad_w, grad_x) = full_weight_gradient(&layer, &batch, LossKind::Mse).unwrap();
        // The dense weight point this layer actually evaluates.
        let w_actual = match &layer {
            NetLayer::Dense(l) => l.weight.clone(),
            NetLayer::Factorized(l) => l.weight.reconstruct(),
            _ => unreachable!(),
        };
        let fd_w = fd_grad(
            &mut |wt| {
                let l = DenseLayer::linear(wt.clone(), Some(bias.clone())).unwrap();
                full_weight_gradient(&NetLayer::Dense(l), &batch, LossKind::Mse)
                    .unwrap()
                    .0
            },
            &w_actual,
            FD_STEP,
        );
        worst = worst.max(rel_defect(&grad_w, &fd_w));

        // Input gradients.
        let fd_x = fd_grad(
            &mut |x| {
                let b2 = Batch::new(x.clone(), batch.targets.clone()).unwrap();
                match &layer {
                    NetLayer::Dense(l) => {
                        let net = tdlrt::model::Network::new(vec![NetLayer::Dense(l.clone())]);
                        net.loss(&b2, LossKind::Mse).unwrap()
                    }
                    NetLayer::Factorized(l) => {
                        let net = tdlrt::model::Network::new(vec![NetLayer::Factorized(l.clone())]);
                        net.loss(&b2, LossKind::Mse).unwrap()
                    }
                    _ => unreachable!(),
                }
            },
            &batch.inputs,
            FD_STEP,
        );
        worst = worst.max(rel_defect(&grad_x, &fd_x));
    }

    // Conv kernels (dense and factorized) under MSE on the 4-mode output.
    for case in 0..4 {
        let (f, c, k) = (
            rng.random_range(2..=4),
            rng.random_range(1..=3),
            rng.random_range(2..=3),
        );
        let params = ConvParams {
            stride: rng.random_range(1..=2),
            padding: rng.random_range(0..=1),
        };
        let hw = rng.random_range(5..=6);
        let kernel = random_tensor(&[f, c, k, k], &mut rng).scale(0.5);
        let x = random_tensor(&[2, c, hw, hw], &mut rng);
        let probe = DenseLayer::conv2d(kernel.clone(), None, params).unwrap();
        let out_shape = probe.forward(&x).unwrap().shape().to_vec();
        let batch = Batch::new(x, Targets::Values(random_tensor(&out_shape, &mut rng))).unwrap();
        let layer: NetLayer = if case % 2 == 0 {
            NetLayer::Dense(probe)
        } else {
            let ranks = [f, c, k, k];
            NetLayer::Factorized(
                FactorizedLayer::conv2d(
                    hosvd(&kernel, HosvdRank::Ranks(&ranks)).unwrap(),
                    None,
                    params,
                )
                .unwrap(),
            )
        };
        let (_, grad_w, _) = full_weight_gradient(&layer, &batch, LossKind::Mse).unwrap();
        let w_actual = match &layer {
            NetLayer::Dense(l) => l.weight.clone(),
            NetLayer::Factorized(l) => l.weight.reconstruct(),
            _ => unreachable!(),
        };
        let fd_w = fd_grad(
            &mut |kt| {
                let l = DenseLayer::conv2d(kt.clone(), None, params).unwrap();
                full_weight_gradient(&NetLayer::Dense(l), &batch, LossKind::Mse)
                    .unwrap()
                    .0
            },
            &w_actual,
            FD_STEP,
        );
        worst = worst.max(rel_defect(&grad_w, &fd_w));
    }

    // Core and factor gradients of random Tucker points.
    for seed in 0..5 {
        let defect = tdlrt::verify::factor_gradient_fd_defect(seed, false).unwrap();
        worst = worst.max(defect);
    }

    // Loss gradients.
    let pred = random_tensor(&[3, 5], &mut rng);
    let target = random_tensor(&[3, 5], &mut rng);
    let (_, g) = loss_mse(&pred, &target).unwrap();
    worst = worst.max(rel_defect(
        &g,
        &fd_grad(&mut |p| loss_mse(p, &target).unwrap().0, &pred, FD_STEP),
    ));
    let logits = random_tensor(&[4, 6], &mut rng);
    let labels = vec![0usize, 5, 2, 3];
    let (_, g) = loss_softmax_ce(&logits, &labels).unwrap();
    worst = worst.max(rel_defect(
        &g,
        &fd_grad(
            &mut |l| loss_softmax_ce(l, &labels).unwrap().0,
            &logits,
            FD_STEP,
        ),
    ));

    assert!(
        worst <= FD_TOL,
        "criterion 1 FAIL: worst relative gradient defect {worst:.3e} > {FD_TOL:.0e}"
    );
    println!(
        "criterion 1 PASS: gradient correctness, worst fd defect {worst:.3e} ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );
}

/// Criterion 2: one step of the efficient and the reference algorithm agree
/// to 1e-9 relative over 100 random instances with d in {2, 3, 4}.
#[test]
fn criterion_2_algorithm_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let d = 2 + (case % 3) as usize;
        let ranks = feasible_ranks(&mut rng, d, 1, 3);
        let shape: Vec<usize> = ranks
            .iter()
            .map(|&r| 2 * r + rng.random_range(0..3))
            .collect();
        let weight = random_tucker(&shape, &ranks, &mut rng);
        let target = random_tensor(&shape, &mut rng);
        let cfg = DlrtConfig::new(0.0, 0.05).unwrap();

        let mut efficient = DlrtLayerState::new(weight.clone());
        step_efficient(
            &mut efficient,
            &mut QuadraticLoss::new(target.clone()),
            &cfg,
        )
        .unwrap();
        let mut reference = DlrtLayerState::new(weight);
        step_reference(&mut reference, &mut QuadraticLoss::new(target), &cfg).unwrap();

        let drift = rel(
            &efficient.weight.reconstruct(),
            &reference.weight.reconstruct(),
        );
        worst = worst.max(drift);
        assert!(
            drift <= 1e-9,
            "criterion 2 FAIL: case {case} (d={d}) diverged by {drift:.3e}"
        );
    }
    println!(
        "criterion 2 PASS: algorithm equivalence over 100 instances, worst drift {worst:.3e} ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );
}

/// Criterion 3: strict loss descent at tau = 0 and the bounded per-step
/// increase `beta_hat * tau` at tau in {1e-3, 1e-2}.
#[test]
fn criterion_3_descent() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let shape = [8, 8, 8];
    // Norms kept below one so the relative rounding perturbation stays within
    // the gradient-norm bound.
    let target = {
        let t = random_tucker(&shape, &[3, 3, 3], &mut rng).reconstruct();
        t.scale(0.5 / t.frobenius_norm())
    };
    let start = {
        let s = random_tucker(&shape, &[3, 3, 3], &mut rng);
        TuckerTensor::new(
            s.core().scale(0.5 / s.core().frobenius_norm()),
            s.factors().to_vec(),
        )
        .unwrap()
    };

    let cfg = DlrtConfig::new(0.0, 0.01).unwrap();
    let mut provider = QuadraticLoss::new(target.clone());
    let mut state = DlrtLayerState::new(start.clone());
    let mut prev = f64::INFINITY;
    for step in 0..100 {
        let info = step_efficient(&mut state, &mut provider, &cfg).unwrap();
        assert!(
            info.loss < prev,
            "criterion 3 FAIL: tau=0 loss rose at step {step}: {prev} -> {}",
            info.loss
        );
        prev = info.loss;
    }

    for tau in [1e-3, 1e-2] {
        let cfg = DlrtConfig::new(tau, 0.01).unwrap();
        let mut provider = QuadraticLoss::new(target.clone());
        let mut state = DlrtLayerState::new(start.clone());
        let mut losses = Vec::new();
        let mut sup_grad = Vec::new();
        let mut running: f64 = 0.0;
        for _ in 0..100 {
            let info = step_efficient(&mut state, &mut provider, &cfg).unwrap();
            running = running.max(info.grad_norm);
            losses.push(info.loss);
            sup_grad.push(running);
        }
        losses.push(provider.value(&state.weight.reconstruct()).unwrap());
        for step in 0..100 {
            let increase = losses[step + 1] - losses[step];
            let bound = sup_grad[step] * tau;
            assert!(
                increase <= bound,
                "criterion 3 FAIL: tau={tau} step {step}: increase {increase:.3e} > beta_hat*tau {bound:.3e}"
            );
        }
    }
    println!(
        "criterion 3 PASS: strict descent at tau=0; increases within beta_hat*tau at tau in {{1e-3, 1e-2}} ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );
}

/// Criterion 4: endpoint error order >= 0.9 in the step size at tau = 0, and
/// tau-attributable endpoint error growing at most 3x faster than linearly.
#[test]
fn criterion_4_approximation_scaling() {
    let t0 = Instant::now();
    let shape = [12, 12, 12];
    let ranks = [4, 4, 4];

    let lambdas = [0.1, 0.05, 0.025];
    let lpts = run_lambda_sweep(&shape, &ranks, &lambdas, 1.0, 404).unwrap();
    let order = slope_loglog(&lpts);
    assert!(
        order >= 0.9,
        "criterion 4 FAIL: lambda convergence order {order:.3} < 0.9"
    );

    let taus = [1e-4, 1e-3, 1e-2];
    let tpts = run_tau_sweep(&shape, &ranks, 0.05, &taus, 1.0, 404).unwrap();
    // The tau = 0 run of the same problem isolates the step-size floor; the
    // rounding-attributable part is the increment over that floor.
    let floor = run_tau_sweep(&shape, &ranks, 0.05, &[0.0], 1.0, 404).unwrap()[0].endpoint_error;
    let increments: Vec<f64> = tpts
        .iter()
        .map(|p| (p.endpoint_error - floor).max(0.0))
        .collect();
    for i in 0..taus.len() - 1 {
        // Pairs where the smaller tolerance has not engaged the rounding yet
        // cannot falsify linear growth; they are floor-dominated.
        if increments[i] <= 0.1 * floor {
            continue;
        }
        let allowed = 3.0 * (taus[i + 1] / taus[i]) * increments[i];
        assert!(
            increments[i + 1] <= allowed,
            "criterion 4 FAIL: tau increment jumped {:.3e} -> {:.3e}, above 3x-linear {:.3e}",
            increments[i],
            increments[i + 1],
            allowed
        );
    }
    // The largest tolerance must actually engage the rounding, so the sweep
    // is not vacuous.
    assert!(
        increments[2] > floor,
        "criterion 4 FAIL: rounding never engaged across the tau sweep"
    );
    println!(
        "criterion 4 PASS: order in lambda {order:.3}; tau errors {:?} over floor {floor:.3e} ({:.1}s)",
        tpts.iter().map(|p| p.endpoint_error).collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );
}

/// Criterion 5: rank recovery on the 20^3 quadratic problem with rank
/// overestimation: exact final ranks (2,3,4), relative error <= 1e-3, and a
/// non-increasing rank sequence after step 20.
#[test]
fn criterion_5_rank_recovery() {
    let t0 = Instant::now();
    let mut run = SyntheticRun::new(vec![20, 20, 20], vec![2, 3, 4], vec![10, 10, 10]);
    run.tau = 0.05;
    run.lr = 0.1;
    run.steps = 200;
    run.seed = 0;
    run.optimizer = OptimizerKind::Tdlrt;
    let out = run_synthetic(&run).unwrap();

    assert_eq!(
        out.final_ranks,
        vec![2, 3, 4],
        "criterion 5 FAIL: final ranks {:?}",
        out.final_ranks
    );
    assert!(
        out.final_relative_error <= 1e-3,
        "criterion 5 FAIL: final relative error {:.3e} > 1e-3",
        out.final_relative_error
    );
    let ranks: Vec<&Vec<usize>> = out.records.iter().map(|r| &r.ranks[0]).collect();
    for step in 20..ranks.len() - 1 {
        for mode in 0..3 {
            assert!(
                ranks[step + 1][mode] <= ranks[step][mode],
                "criterion 5 FAIL: rank of mode {mode} grew at step {step}: {:?} -> {:?}",
                ranks[step],
                ranks[step + 1]
            );
        }
    }
    println!(
        "criterion 5 PASS: ranks (10,10,10) -> (2,3,4), error {:.3e}, monotone after step 20 ({:.1}s)",
        out.final_relative_error,
        t0.elapsed().as_secs_f64()
    );
}

/// Criterion 6: from identical ill-conditioned spectral initializations over
/// 10 seeds, adaptive TDLRT reaches the target loss in at most half the mean
/// steps of naive factor descent, with a strictly smaller loss-curve spread.
#[test]
fn criterion_6_robustness_vs_naive() {
    let t0 = Instant::now();
    let out = run_robustness(
        &[10, 10, 10],
        &[3, 3, 3],
        &[8, 8, 8],
        0.1, // powers-of-ten decay
        10,
        500,
        0.1,
        0.05,
        0.1,
        0.02,
        0,
    )
    .unwrap();
    let tdlrt_mean = RobustnessOutcome::mean_steps(&out.tdlrt_steps);
    let naive_mean = RobustnessOutcome::mean_steps(&out.naive_steps);
    assert!(
        tdlrt_mean <= 0.5 * naive_mean,
        "criterion 6 FAIL: mean steps {tdlrt_mean:.1} vs naive {naive_mean:.1}"
    );
    let tdlrt_std = RobustnessOutcome::curve_std_mean(&out.tdlrt_curves);
    let naive_std = RobustnessOutcome::curve_std_mean(&out.naive_curves);
    assert!(
        tdlrt_std < naive_std,
        "criterion 6 FAIL: loss-curve std {tdlrt_std:.3e} not below naive {naive_std:.3e}"
    );
    // Sanity: the naive baseline does reach the target within the cap.
    assert!(
        out.naive_steps.iter().all(|&s| s < out.max_steps),
        "criterion 6 FAIL: naive runs were censored at the cap"
    );
    println!(
        "criterion 6 PASS: steps-to-target {tdlrt_mean:.1} vs naive {naive_mean:.1}; curve std {tdlrt_std:.2e} vs {naive_std:.2e} ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );
}

/// Criterion 7: LeNet-style Tucker network on MNIST (10k subset, batch 128,
/// 3 epochs, tau = 0.1): test accuracy >= 90% and conv compression >= 50%
/// within 15 CPU-minutes. Skips with an explicit notice when the dataset is
/// not present.
#[test]
fn criterion_7_mnist_desk_scale() {
    let data_dir = std::env::var_os("TDLRT_DATA_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    if tdlrt::harness::locate_mnist(&data_dir).is_err() {
        println!(
            "criterion 7 SKIP: MNIST files not found under {} (set TDLRT_DATA_DIR); \
             run `tdlrt fetch-data` for instructions",
            data_dir.display()
        );
        return;
    }
    let t0 = Instant::now();
    let mut cfg = MnistRunConfig::new(data_dir);
    cfg.subset = 10_000;
    cfg.epochs = 3;
    cfg.tau = 0.1;
    cfg.lr = 0.05;
    cfg.momentum = 0.1;
    cfg.batch = 128;
    cfg.seed = 7;
    let out = tdlrt::harness::run_mnist(&cfg).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(
        out.test_accuracy >= 0.90,
        "criterion 7 FAIL: test accuracy {:.4} < 0.90",
        out.test_accuracy
    );
    assert!(
        out.conv_compression >= 0.50,
        "criterion 7 FAIL: conv compression {:.4} < 0.50",
        out.conv_compression
    );
    assert!(
        elapsed <= 900.0,
        "criterion 7 FAIL: runtime {elapsed:.0}s exceeded 15 minutes"
    );
    println!(
        "criterion 7 PASS: accuracy {:.4}, conv compression {:.4}, ranks {:?} ({elapsed:.0}s)",
        out.test_accuracy, out.conv_compression, out.final_ranks
    );
}

/// Criterion 8: structural invariants under >= 1000 randomized cases each.
#[test]
fn criterion_8_structural_invariants() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);

    // Factor orthonormality after every optimizer step.
    let steps = [step_efficient, step_reference, step_fixed_rank];
    for case in 0..1000usize {
        let d = rng.random_range(2..=4);
        let ranks = feasible_ranks(&mut rng, d, 1, 3);
        let shape: Vec<usize> = ranks.iter().map(|&r| r + rng.random_range(1..4)).collect();
        let weight = random_tucker(&shape, &ranks, &mut rng);
        let target = random_tensor(&shape, &mut rng);
        let cfg = DlrtConfig::new(rng.random_range(0.0..0.3), 0.05)
            .unwrap()
            .with_momentum(rng.random_range(0.0..0.9));
        let mut state = DlrtLayerState::new(weight);
        steps[case % 3](&mut state, &mut QuadraticLoss::new(target), &cfg).unwrap();
        let defect = state.weight.orthonormality_defect();
        assert!(
            defect <= 1e-10,
            "criterion 8 FAIL: orthonormality defect {defect:.3e} at case {case}"
        );
    }

    // Rounding error contract.
    for case in 0..1000usize {
        let d = rng.random_range(2..=4);
        let ranks = feasible_ranks(&mut rng, d, 1, 4);
        let shape: Vec<usize> = ranks.iter().map(|&r| r + rng.random_range(0..4)).collect();
        let t = random_tucker(&shape, &ranks, &mut rng);
        let tau = rng.random_range(0.0..0.8);
        let trunc = truncate(&t, tau, 1, None).unwrap();
        let err = rel(&trunc.reconstruct(), &t.reconstruct());
        assert!(
            err <= tau + 1e-12,
            "criterion 8 FAIL: rounding error {err:.3e} > tau {tau:.3e} at case {case}"
        );
    }

    // fold(unfold) identity, bit-exact.
    for case in 0..1000usize {
        let d = rng.random_range(2..=4);
        let shape: Vec<usize> = (0..d).map(|_| rng.random_range(1..=5)).collect();
        let t = random_tensor(&shape, &mut rng);
        let mode = rng.random_range(0..d);
        let back = DenseTensor::fold(&t.unfold(mode).unwrap(), mode, &shape).unwrap();
        assert!(
            back == t,
            "criterion 8 FAIL: fold(unfold) not bit-exact at case {case}"
        );
    }

    // Reconstruction against the entrywise summation oracle.
    for case in 0..1000usize {
        let d = rng.random_range(2..=4);
        let ranks: Vec<usize> = (0..d).map(|_| rng.random_range(1..=3)).collect();
        let shape: Vec<usize> = ranks.iter().map(|&r| rng.random_range(r..=4)).collect();
        let t = random_tucker(&shape, &ranks, &mut rng);
        let fast = t.reconstruct();
        let oracle = DenseTensor::from_fn(shape.clone(), |idx| {
            let mut acc = 0.0;
            let core = t.core();
            let mut alpha = vec![0usize; d];
            loop {
                let mut term = core.get(&alpha);
                for (k, u) in t.factors().iter().enumerate() {
                    term *= u.get(idx[k], alpha[k]);
                }
                acc += term;
                let mut k = d;
                loop {
                    if k == 0 {
                        return acc;
                    }
                    k -= 1;
                    alpha[k] += 1;
                    if alpha[k] < core.shape()[k] {
                        break;
                    }
                    alpha[k] = 0;
                }
            }
        });
        let drift = rel(&fast, &oracle);
        assert!(
            drift <= 1e-12,
            "criterion 8 FAIL: reconstruction off oracle by {drift:.3e} at case {case}"
        );
    }

    println!(
        "criterion 8 PASS: 4 x 1000 randomized structural invariants ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );
}

/// Criterion 9: with a decaying learning rate on the stochastic quadratic,
/// the running minimum of the projected gradient norm squared falls below
/// 1e-4 within 2000 steps.
#[test]
fn criterion_9_convergence_diagnostic() {
    let t0 = Instant::now();
    let mut run = SyntheticRun::new(vec![10, 10, 10], vec![3, 3, 3], vec![6, 6, 6]);
    run.tau = 0.05;
    run.lr = 0.1;
    run.steps = 2000;
    run.seed = 9;
    run.noise_std = 0.02;
    run.lr_decay_halflife = Some(50.0);
    run.optimizer = OptimizerKind::Tdlrt;
    let out = run_synthetic(&run).unwrap();

    let mut running_min = f64::INFINITY;
    let mut hit_step = None;
    for (step, rec) in out.records.iter().enumerate() {
        running_min = running_min.min(rec.projected_grad_norm.powi(2));
        if running_min < 1e-4 {
            hit_step = Some(step);
            break;
        }
    }
    assert!(
        hit_step.is_some(),
        "criterion 9 FAIL: projected gradient norm^2 never fell below 1e-4 (min {running_min:.3e})"
    );
    println!(
        "criterion 9 PASS: running min of projected grad norm^2 below 1e-4 at step {} ({:.1}s)",
        hit_step.unwrap(),
        t0.elapsed().as_secs_f64()
    );
}

/// The naive baseline leaves the Stiefel manifold while TDLRT never does;
/// exercised here on the ill-conditioned core the robustness study uses.
#[test]
fn naive_baseline_contrast_on_ill_conditioned_core() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let init =
        tdlrt::data::spectral_init(&[8, 8, 8], &[3, 3, 3], &vec![vec![1.0, 1e-3, 1e-6]; 3], 7)
            .unwrap();
    let target = random_tensor(&[8, 8, 8], &mut rng);
    let q = QuadraticLoss::new(target);

    let mut naive = NaiveState::new(init.clone());
    for _ in 0..5 {
        let grad = q.grad(&naive.weight.reconstruct()).unwrap();
        let grads = factor_gradients(&grad, &naive.weight).unwrap();
        naive_factorized_step(&mut naive, &grads, 0.1, 0.0).unwrap();
    }
    assert!(naive.weight.orthonormality_defect() > 1e-8);

    let cfg = DlrtConfig::new(0.05, 0.1).unwrap();
    let mut state = DlrtLayerState::new(init);
    let mut provider = q.clone();
    for _ in 0..5 {
        step_efficient(&mut state, &mut provider, &cfg).unwrap();
        assert!(state.weight.orthonormality_defect() <= 1e-10);
        let grad = provider.grad(&state.weight.reconstruct()).unwrap();
        // Diagnostic stays finite and consistent with the projector route.
        let pg = projected_gradient_norm(&state.weight, &grad).unwrap();
        assert!(pg.is_finite());
    }
}
