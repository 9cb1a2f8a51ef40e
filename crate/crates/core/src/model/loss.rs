//! Losses with analytic gradients, plus the quadratic tensor-recovery loss
//! used throughout the synthetic experiments.

use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// Mean (over batch rows) of `0.5 * |pred_b - target_b|^2`.
///
/// Returns the value and the gradient with respect to `pred`.
pub fn loss_mse(pred: &DenseTensor, target: &DenseTensor) -> Result<(f64, DenseTensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse shapes {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let batch = pred.shape()[0] as f64;
    let diff = pred.sub(target)?;
    let value = 0.5 * diff.inner(&diff)? / batch;
    Ok((value, diff.scale(1.0 / batch)))
}

/// Mean softmax cross-entropy over `(B, K)` logits with integer labels.
///
/// Returns the value and the gradient with respect to the logits.
pub fn loss_softmax_ce(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    if logits.order() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "softmax-ce expects (batch, classes) logits, got {:?}",
            logits.shape()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grad = DenseTensor::zeros(vec![batch, classes]);
    let mut total = 0.0;
    let ld = logits.data();
    let gd = grad.data_mut();
    for b in 0..batch {
        let label = labels[b];
        if label >= classes {
            return Err(Error::ShapeMismatch(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &ld[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total -= (row[label] - max) - z.ln();
        for k in 0..classes {
            let p = exps[k] / z;
            gd[b * classes + k] = (p - if k == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((total / batch as f64, grad))
}

/// `L(W) = 0.5 |W - W*|^2` with exact gradient `W - W*`; the full Euler step
/// is `(1 - lr) W + lr W*` and the continuous flow has the closed form
/// `W* + exp(-t) (W0 - W*)`.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub target: DenseTensor,
}

impl QuadraticLoss {
    pub fn new(target: DenseTensor) -> Self {
        Self { target }
    }

    pub fn value(&self, w: &DenseTensor) -> Result<f64> {
        let diff = w.sub(&self.target)?;
        Ok(0.5 * diff.inner(&diff)?)
    }

    pub fn grad(&self, w: &DenseTensor) -> Result<DenseTensor> {
        w.sub(&self.target)
    }

    /// One explicit Euler step of the gradient flow.
    pub fn euler_step(&self, w: &DenseTensor, lr: f64) -> Result<DenseTensor> {
        w.scale(1.0 - lr).axpy(lr, &self.target)
    }

    /// Exact solution of the continuous flow at time `t` from `w0`.
    pub fn exact_flow(&self, w0: &DenseTensor, t: f64) -> Result<DenseTensor> {
        let decayed = w0.sub(&self.target)?.scale((-t).exp());
        self.target.add(&decayed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mse_zero_at_target() {
        let t = random_tensor(vec![3, 4], 1);
        let (v, g) = loss_mse(&t, &t).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.frobenius_norm(), 0.0);
        assert!(loss_mse(&t, &random_tensor(vec![3, 5], 2)).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let pred = random_tensor(vec![2, 5], 3);
        let target = random_tensor(vec![2, 5], 4);
        let (_, g) = loss_mse(&pred, &target).unwrap();
        let h = 1e-5;
        let mut p = pred.clone();
        for i in 0..pred.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = loss_mse(&p, &target).unwrap().0;
            p.data_mut()[i] = orig - h;
            let dn = loss_mse(&p, &target).unwrap().0;
            p.data_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = DenseTensor::zeros(vec![4, 7]);
        let (v, g) = loss_softmax_ce(&logits, &[0, 3, 6, 2]).unwrap();
        assert!((v - (7.0_f64).ln()).abs() < 1e-12);
        // Per-sample gradient rows sum to zero.
        for b in 0..4 {
            let row_sum: f64 = (0..7).map(|k| g.get(&[b, k])).sum();
            assert!(row_sum.abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = random_tensor(vec![3, 5], 7);
        let labels = [2usize, 0, 4];
        let (_, g) = loss_softmax_ce(&logits, &labels).unwrap();
        let h = 1e-5;
        let mut l = logits.clone();
        let mut worst: f64 = 0.0;
        for i in 0..logits.len() {
            let orig = l.data()[i];
            l.data_mut()[i] = orig + h;
            let up = loss_softmax_ce(&l, &labels).unwrap().0;
            l.data_mut()[i] = orig - h;
            let dn = loss_softmax_ce(&l, &labels).unwrap().0;
            l.data_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - g.data()[i]).abs() / fd.abs().max(1e-3));
        }
        assert!(worst <= 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn softmax_ce_rejects_bad_labels() {
        let logits = DenseTensor::zeros(vec![2, 3]);
        assert!(loss_softmax_ce(&logits, &[0]).is_err());
        assert!(loss_softmax_ce(&logits, &[0, 3]).is_err());
    }

    #[test]
    fn quadratic_loss_analytic_facts() {
        let target = random_tensor(vec![3, 3, 2], 9);
        let q = QuadraticLoss::new(target.clone());
        assert_eq!(q.value(&target).unwrap(), 0.0);

        // W* = 0: one Euler step scales by (1 - lr).
        let q0 = QuadraticLoss::new(DenseTensor::zeros(vec![2, 2]));
        let w = random_tensor(vec![2, 2], 10);
        let stepped = q0.euler_step(&w, 0.3).unwrap();
        let rel = stepped.sub(&w.scale(0.7)).unwrap().frobenius_norm();
        assert!(rel < 1e-15);

        // Gradient vs finite differences.
        let w1 = random_tensor(vec![3, 3, 2], 11);
        let g = q.grad(&w1).unwrap();
        let h = 1e-5;
        let mut wp = w1.clone();
        for i in (0..w1.len()).step_by(3) {
            let orig = wp.data()[i];
            wp.data_mut()[i] = orig + h;
            let up = q.value(&wp).unwrap();
            wp.data_mut()[i] = orig - h;
            let dn = q.value(&wp).unwrap();
            wp.data_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
