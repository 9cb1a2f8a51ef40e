//! Minimal differentiable layer stack: dense and Tucker-factorized linear and
//! 2-D convolution layers with analytic gradients, plus losses.
//!
//! Gradients for the Tucker factors are obtained by contracting the full
//! weight gradient: `grad_core = dW x_i U_i^T` and
//! `grad_factor_i = Mat_i(dW x_{j!=i} U_j^T) Mat_i(C)^T`.

mod conv;
mod loss;

pub use conv::ConvParams;
pub use loss::{loss_mse, loss_softmax_ce, QuadraticLoss};

use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::{hosvd, HosvdRank, TuckerTensor};
use crate::{Error, Result};

/// What a layer applies to its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d(ConvParams),
}

/// Which modes of a conv kernel participate in the factorization. With
/// `ChannelsOnly` the spatial modes start (and stay) at full rank, which is
/// the Tucker-2 layout; `AllModes` lets every mode adapt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvFactorization {
    AllModes,
    ChannelsOnly,
}

impl ConvFactorization {
    /// Per-mode rank floors the optimizer must respect for kernels in this
    /// layout; `ChannelsOnly` pins the two spatial modes at full rank.
    pub fn rank_floors(self, kernel_shape: &[usize]) -> Option<Vec<usize>> {
        match self {
            ConvFactorization::AllModes => None,
            ConvFactorization::ChannelsOnly => Some(vec![1, 1, kernel_shape[2], kernel_shape[3]]),
        }
    }
}

/// Layer whose weight lives in Tucker format.
#[derive(Debug, Clone)]
pub struct FactorizedLayer {
    pub kind: LayerKind,
    pub weight: TuckerTensor,
    pub bias: Option<Vec<f64>>,
}

/// Uncompressed layer; used for the full baseline and for the dense heads of
/// the image network.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub kind: LayerKind,
    pub weight: DenseTensor,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of the loss with respect to a layer's Tucker core and factors.
#[derive(Debug, Clone)]
pub struct FactorGradients {
    pub core: DenseTensor,
    pub factors: Vec<Matrix>,
}

/// Training targets: class labels or regression values.
#[derive(Debug, Clone)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(DenseTensor),
}

/// A mini-batch; the first input mode is the batch dimension.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: DenseTensor,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: DenseTensor, targets: Targets) -> Result<Self> {
        let b = inputs.shape()[0];
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Targets::Labels(labels) = &targets {
            if labels.len() != b {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for batch of {b}",
                    labels.len()
                )));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    SoftmaxCe,
}

/// Per-layer backward result; `weight`/`bias` are `None` for parameter-free
/// layers.
#[derive(Debug)]
pub struct LayerGrads {
    pub weight: Option<DenseTensor>,
    pub bias: Option<Vec<f64>>,
    pub input: DenseTensor,
}

fn bias_len_for(kind: LayerKind, weight_shape: &[usize]) -> usize {
    match kind {
        LayerKind::Linear => weight_shape[0],
        LayerKind::Conv2d(_) => weight_shape[0],
    }
}

fn check_bias(kind: LayerKind, weight_shape: &[usize], bias: &Option<Vec<f64>>) -> Result<()> {
    if let Some(b) = bias {
        let want = bias_len_for(kind, weight_shape);
        if b.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} does not match {want} output features",
                b.len()
            )));
        }
        if !b.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("layer bias"));
        }
    }
    Ok(())
}

impl FactorizedLayer {
    pub fn linear(weight: TuckerTensor, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.order() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "factorized linear expects a 2-mode weight, got order {}",
                weight.order()
            )));
        }
        check_bias(LayerKind::Linear, &weight.outer_shape(), &bias)?;
        Ok(Self {
            kind: LayerKind::Linear,
            weight,
            bias,
        })
    }

    pub fn conv2d(
        weight: TuckerTensor,
        bias: Option<Vec<f64>>,
        params: ConvParams,
    ) -> Result<Self> {
        if weight.order() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "factorized conv2d expects a 4-mode kernel, got order {}",
                weight.order()
            )));
        }
        check_bias(LayerKind::Conv2d(params), &weight.outer_shape(), &bias)?;
        Ok(Self {
            kind: LayerKind::Conv2d(params),
            weight,
            bias,
        })
    }

    /// Factorizes a dense conv kernel at the given per-channel-mode ranks;
    /// the spatial modes start at full rank in either layout (under
    /// `AllModes` they may adapt downward during training, under
    /// `ChannelsOnly` the optimizer pins them via
    /// [`ConvFactorization::rank_floors`]).
    pub fn conv2d_from_dense(
        kernel: &DenseTensor,
        channel_ranks: [usize; 2],
        bias: Option<Vec<f64>>,
        params: ConvParams,
    ) -> Result<Self> {
        let shape = kernel.shape();
        let ranks = vec![
            channel_ranks[0].min(shape[0]),
            channel_ranks[1].min(shape[1]),
            shape[2],
            shape[3],
        ];
        let weight = hosvd(kernel, HosvdRank::Ranks(&ranks))?;
        Self::conv2d(weight, bias, params)
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        match self.kind {
            LayerKind::Linear => {
                // y = ((x U_2) Mat_1(C)^T) U_1^T + b, never forming the dense W.
                let xm = x.unfold(0)?;
                let u_out = &self.weight.factors()[0];
                let u_in = &self.weight.factors()[1];
                let core = self.weight.core().unfold(0)?;
                let hidden = xm.matmul(u_in).matmul_nt(&core);
                let mut y = hidden.matmul_nt(u_out).transpose();
                // y currently (n_out x B) transposed twice; fix orientation.
                y = y.transpose();
                let mut out =
                    DenseTensor::new(vec![x.shape()[0], u_out.rows()], y.data().to_vec())?;
                if let Some(b) = &self.bias {
                    add_row_bias(&mut out, b);
                }
                Ok(out)
            }
            LayerKind::Conv2d(p) => {
                let kernel = self.weight.reconstruct();
                conv::conv2d_forward(x, &kernel, self.bias.as_deref(), p)
            }
        }
    }

    pub fn backward(&self, x: &DenseTensor, grad_out: &DenseTensor) -> Result<LayerGrads> {
        match self.kind {
            LayerKind::Linear => {
                linear_backward_parts(
                    x,
                    grad_out,
                    |g| {
                        // grad_x = g U_1 Mat_1(C) U_2^T, factor by factor.
                        let u_out = &self.weight.factors()[0];
                        let u_in = &self.weight.factors()[1];
                        let core = self.weight.core().unfold(0)?;
                        Ok(g.matmul(u_out).matmul(&core).matmul_nt(u_in))
                    },
                    self.bias.is_some(),
                )
            }
            LayerKind::Conv2d(p) => {
                let kernel = self.weight.reconstruct();
                let grads = conv::conv2d_backward(x, &kernel, self.bias.is_some(), p, grad_out)?;
                Ok(LayerGrads {
                    weight: Some(grads.kernel),
                    bias: grads.bias,
                    input: grads.input,
                })
            }
        }
    }

    /// Parameter count of the factored representation (bias included).
    pub fn compressed_params(&self) -> usize {
        self.weight.storage_count() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Parameter count of the dense equivalent (bias included).
    pub fn dense_params(&self) -> usize {
        self.weight.dense_count() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

impl DenseLayer {
    pub fn linear(weight: DenseTensor, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.order() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "linear expects a 2-mode weight, got order {}",
                weight.order()
            )));
        }
        check_bias(LayerKind::Linear, weight.shape(), &bias)?;
        Ok(Self {
            kind: LayerKind::Linear,
            weight,
            bias,
        })
    }

    pub fn conv2d(weight: DenseTensor, bias: Option<Vec<f64>>, params: ConvParams) -> Result<Self> {
        if weight.order() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects a 4-mode kernel, got order {}",
                weight.order()
            )));
        }
        check_bias(LayerKind::Conv2d(params), weight.shape(), &bias)?;
        Ok(Self {
            kind: LayerKind::Conv2d(params),
            weight,
            bias,
        })
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        match self.kind {
            LayerKind::Linear => {
                let xm = x.unfold(0)?;
                let w = self.weight.unfold(0)?;
                let y = xm.matmul_nt(&w);
                let mut out = DenseTensor::new(vec![x.shape()[0], w.rows()], y.data().to_vec())?;
                if let Some(b) = &self.bias {
                    add_row_bias(&mut out, b);
                }
                Ok(out)
            }
            LayerKind::Conv2d(p) => conv::conv2d_forward(x, &self.weight, self.bias.as_deref(), p),
        }
    }

    pub fn backward(&self, x: &DenseTensor, grad_out: &DenseTensor) -> Result<LayerGrads> {
        match self.kind {
            LayerKind::Linear => {
                let w = self.weight.unfold(0)?;
                linear_backward_parts(x, grad_out, |g| Ok(g.matmul(&w)), self.bias.is_some())
            }
            LayerKind::Conv2d(p) => {
                let grads =
                    conv::conv2d_backward(x, &self.weight, self.bias.is_some(), p, grad_out)?;
                Ok(LayerGrads {
                    weight: Some(grads.kernel),
                    bias: grads.bias,
                    input: grads.input,
                })
            }
        }
    }
}

fn add_row_bias(t: &mut DenseTensor, bias: &[f64]) {
    let cols = bias.len();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += bias[i % cols];
    }
}

/// Shared linear backward: weight and bias grads are representation-agnostic;
/// the input gradient is supplied by the caller.
fn linear_backward_parts(
    x: &DenseTensor,
    grad_out: &DenseTensor,
    grad_input: impl FnOnce(&Matrix) -> Result<Matrix>,
    has_bias: bool,
) -> Result<LayerGrads> {
    let xm = x.unfold(0)?;
    let g = grad_out.unfold(0)?;
    let grad_w = g.matmul_tn(&xm); // (n_out x n_in)
    let grad_b = has_bias.then(|| {
        (0..g.cols())
            .map(|c| (0..g.rows()).map(|r| g.get(r, c)).sum())
            .collect::<Vec<f64>>()
    });
    let gx = grad_input(&g)?;
    Ok(LayerGrads {
        weight: Some(DenseTensor::new(
            vec![grad_w.rows(), grad_w.cols()],
            grad_w.data().to_vec(),
        )?),
        bias: grad_b,
        input: DenseTensor::new(vec![x.shape()[0], gx.cols()], gx.data().to_vec())?,
    })
}

/// One stage of a feed-forward network.
#[derive(Debug, Clone)]
pub enum NetLayer {
    Factorized(FactorizedLayer),
    Dense(DenseLayer),
    Relu,
    Flatten,
}

impl NetLayer {
    fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        match self {
            NetLayer::Factorized(l) => l.forward(x),
            NetLayer::Dense(l) => l.forward(x),
            NetLayer::Relu => Ok(DenseTensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v.max(0.0)).collect(),
            )?),
            NetLayer::Flatten => {
                let b = x.shape()[0];
                x.reshape(vec![b, x.len() / b])
            }
        }
    }

    fn backward(&self, x: &DenseTensor, grad_out: &DenseTensor) -> Result<LayerGrads> {
        match self {
            NetLayer::Factorized(l) => l.backward(x, grad_out),
            NetLayer::Dense(l) => l.backward(x, grad_out),
            NetLayer::Relu => {
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                Ok(LayerGrads {
                    weight: None,
                    bias: None,
                    input: DenseTensor::new(x.shape().to_vec(), data)?,
                })
            }
            NetLayer::Flatten => Ok(LayerGrads {
                weight: None,
                bias: None,
                input: grad_out.reshape(x.shape().to_vec())?,
            }),
        }
    }
}

/// Feed-forward stack evaluated layer by layer.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<NetLayer>,
}

impl Network {
    pub fn new(layers: Vec<NetLayer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn loss(&self, batch: &Batch, kind: LossKind) -> Result<f64> {
        let out = self.forward(&batch.inputs)?;
        Ok(self.loss_of_output(&out, &batch.targets, kind)?.0)
    }

    fn loss_of_output(
        &self,
        out: &DenseTensor,
        targets: &Targets,
        kind: LossKind,
    ) -> Result<(f64, DenseTensor)> {
        match (kind, targets) {
            (LossKind::Mse, Targets::Values(t)) => loss_mse(out, t),
            (LossKind::SoftmaxCe, Targets::Labels(l)) => loss_softmax_ce(out, l),
            _ => Err(Error::Config("loss kind does not match target kind".into())),
        }
    }

    /// Full backward pass: loss value plus per-layer gradients
    /// (`None` for parameter-free layers).
    pub fn forward_backward(
        &self,
        batch: &Batch,
        kind: LossKind,
    ) -> Result<(f64, Vec<LayerGrads>)> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.inputs.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("nonempty"))?;
            acts.push(next);
        }
        let (value, mut grad) =
            self.loss_of_output(acts.last().expect("nonempty"), &batch.targets, kind)?;
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let lg = layer.backward(&acts[k], &grad)?;
            grad = lg.input.clone();
            grads.push(lg);
        }
        grads.reverse();
        Ok((value, grads))
    }

    /// Fraction of label targets matched by the arg-max of the outputs.
    pub fn accuracy(&self, inputs: &DenseTensor, labels: &[usize]) -> Result<f64> {
        let out = self.forward(inputs)?;
        let (b, k) = (out.shape()[0], out.shape()[1]);
        let mut hits = 0usize;
        for (row, &label) in out.data().chunks_exact(k).zip(labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite outputs"))
                .map(|(i, _)| i)
                .expect("nonempty row");
            if pred == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / b as f64)
    }
}

/// Loss, full weight gradient, and input gradients for a single layer under
/// the given batch and loss.
pub fn full_weight_gradient(
    layer: &NetLayer,
    batch: &Batch,
    kind: LossKind,
) -> Result<(f64, DenseTensor, DenseTensor)> {
    let net = Network::new(vec![layer.clone()]);
    let (value, grads) = net.forward_backward(batch, kind)?;
    let lg = grads.into_iter().next().expect("single layer");
    let weight = lg
        .weight
        .ok_or_else(|| Error::Config("layer has no weight parameter".into()))?;
    Ok((value, weight, lg.input))
}

/// `Mat_mode(grad_w x_{j != mode} U_j^T)`: the mode-`mode` unfolding of the
/// weight gradient contracted against every other factor.
pub fn partial_contraction(
    grad_w: &DenseTensor,
    weight: &TuckerTensor,
    mode: usize,
) -> Result<Matrix> {
    let transposed: Vec<Matrix> = weight.factors().iter().map(Matrix::transpose).collect();
    let slots: Vec<Option<&Matrix>> = transposed
        .iter()
        .enumerate()
        .map(|(j, m)| if j == mode { None } else { Some(m) })
        .collect();
    grad_w.multi_mode_multiply(&slots)?.unfold(mode)
}

/// Contracts a full weight gradient into core and factor gradients at the
/// current Tucker point.
pub fn factor_gradients(grad_w: &DenseTensor, weight: &TuckerTensor) -> Result<FactorGradients> {
    if grad_w.shape() != weight.outer_shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} vs layer shape {:?}",
            grad_w.shape(),
            weight.outer_shape()
        )));
    }
    let transposed: Vec<Matrix> = weight.factors().iter().map(Matrix::transpose).collect();
    let slots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
    let core = grad_w.multi_mode_multiply(&slots)?;
    let mut factors = Vec::with_capacity(weight.order());
    for i in 0..weight.order() {
        let contracted = partial_contraction(grad_w, weight, i)?;
        let core_unf = weight.core().unfold(i)?;
        factors.push(contracted.matmul_nt(&core_unf));
    }
    Ok(FactorGradients { core, factors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::qr_orthonormal;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        qr_orthonormal(&raw).unwrap().0
    }

    fn random_tucker(shape: &[usize], ranks: &[usize], seed: u64) -> TuckerTensor {
        let core = random_tensor(ranks.to_vec(), seed);
        let factors: Vec<Matrix> = shape
            .iter()
            .zip(ranks)
            .enumerate()
            .map(|(i, (&n, &r))| random_orthonormal(n, r, seed * 31 + i as u64))
            .collect();
        TuckerTensor::new(core, factors).unwrap()
    }

    #[test]
    fn identity_factorized_linear_is_shift() {
        let t = TuckerTensor::new(
            DenseTensor::new(vec![3, 3], Matrix::identity(3).data().to_vec()).unwrap(),
            vec![Matrix::identity(3), Matrix::identity(3)],
        )
        .unwrap();
        let layer = FactorizedLayer::linear(t, Some(vec![1.0, 2.0, 3.0])).unwrap();
        let x = random_tensor(vec![4, 3], 1);
        let y = layer.forward(&x).unwrap();
        for b in 0..4 {
            for j in 0..3 {
                let want = x.get(&[b, j]) + (j + 1) as f64;
                assert!((y.get(&[b, j]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn factorized_linear_equals_dense_reconstruction() {
        let weight = random_tucker(&[6, 5], &[3, 2], 7);
        let bias: Vec<f64> = (0..6).map(|i| 0.3 * i as f64).collect();
        let fl = FactorizedLayer::linear(weight.clone(), Some(bias.clone())).unwrap();
        let dl = DenseLayer::linear(weight.reconstruct(), Some(bias)).unwrap();
        let x = random_tensor(vec![3, 5], 8);
        let yf = fl.forward(&x).unwrap();
        let yd = dl.forward(&x).unwrap();
        let rel = yf.sub(&yd).unwrap().frobenius_norm() / yd.frobenius_norm();
        assert!(rel < 1e-12);

        // Backward paths agree as well.
        let g = random_tensor(vec![3, 6], 9);
        let gf = fl.backward(&x, &g).unwrap();
        let gd = dl.backward(&x, &g).unwrap();
        let wrel = gf
            .weight
            .as_ref()
            .unwrap()
            .sub(gd.weight.as_ref().unwrap())
            .unwrap()
            .frobenius_norm();
        assert!(wrel < 1e-12);
        let xrel = gf.input.sub(&gd.input).unwrap().frobenius_norm();
        assert!(xrel < 1e-12);
    }

    #[test]
    fn single_sample_mse_weight_gradient_formula() {
        // d=2, one sample: grad_W = (Wx + b - t) x^T.
        let w = random_tensor(vec![4, 3], 11);
        let b: Vec<f64> = vec![0.1, -0.2, 0.3, 0.0];
        let layer = NetLayer::Dense(DenseLayer::linear(w.clone(), Some(b.clone())).unwrap());
        let x = random_tensor(vec![1, 3], 12);
        let t = random_tensor(vec![1, 4], 13);
        let batch = Batch::new(x.clone(), Targets::Values(t.clone())).unwrap();
        let (_, grad_w, _) = full_weight_gradient(&layer, &batch, LossKind::Mse).unwrap();

        let wm = w.unfold(0).unwrap();
        let xv = x.unfold(0).unwrap().transpose(); // 3x1
        let y = wm.matmul(&xv); // 4x1
        for (i, &bi) in b.iter().enumerate() {
            for j in 0..3 {
                let resid = y.get(i, 0) + bi - t.get(&[0, i]);
                let want = resid * x.get(&[0, j]);
                assert!((grad_w.get(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_error_gives_zero_gradient() {
        let w = random_tensor(vec![3, 3], 15);
        let layer = DenseLayer::linear(w.clone(), None).unwrap();
        let x = random_tensor(vec![2, 3], 16);
        // Target equal to the output: residual is zero.
        let y = layer.forward(&x).unwrap();
        let batch = Batch::new(x, Targets::Values(y)).unwrap();
        let (v, g, _) =
            full_weight_gradient(&NetLayer::Dense(layer), &batch, LossKind::Mse).unwrap();
        assert!(v.abs() < 1e-24);
        assert!(g.frobenius_norm() < 1e-12);
    }

    #[test]
    fn network_weight_gradients_match_finite_differences() {
        // A small conv + relu + flatten + linear stack against central FD.
        let kernel = random_tensor(vec![3, 2, 3, 3], 21).scale(0.5);
        let conv = DenseLayer::conv2d(
            kernel.clone(),
            Some(vec![0.05, -0.05, 0.1]),
            ConvParams {
                stride: 1,
                padding: 1,
            },
        )
        .unwrap();
        let lin_w = random_tensor(vec![4, 3 * 4 * 4], 22).scale(0.2);
        let lin = DenseLayer::linear(lin_w.clone(), Some(vec![0.0; 4])).unwrap();
        let net = Network::new(vec![
            NetLayer::Dense(conv),
            NetLayer::Relu,
            NetLayer::Flatten,
            NetLayer::Dense(lin),
        ]);
        let batch = Batch::new(
            random_tensor(vec![2, 2, 4, 4], 23),
            Targets::Labels(vec![1, 3]),
        )
        .unwrap();
        let (_, grads) = net.forward_backward(&batch, LossKind::SoftmaxCe).unwrap();

        let h = 1e-5;
        // Check the conv kernel gradient entrywise.
        let gk = grads[0].weight.as_ref().unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..kernel.len() {
            let pert = |delta: f64| {
                let mut net2 = net.clone();
                if let NetLayer::Dense(l) = &mut net2.layers[0] {
                    l.weight.data_mut()[i] += delta;
                }
                net2.loss(&batch, LossKind::SoftmaxCe).unwrap()
            };
            let fd = (pert(h) - pert(-h)) / (2.0 * h);
            worst = worst.max((fd - gk.data()[i]).abs());
        }
        assert!(worst < 1e-7, "conv kernel fd mismatch {worst}");
    }

    #[test]
    fn factor_gradients_zero_input() {
        let weight = random_tucker(&[4, 3, 5], &[2, 2, 3], 31);
        let zero = DenseTensor::zeros(vec![4, 3, 5]);
        let fg = factor_gradients(&zero, &weight).unwrap();
        assert_eq!(fg.core.frobenius_norm(), 0.0);
        assert!(fg.factors.iter().all(|m| m.frobenius_norm() == 0.0));
    }

    #[test]
    fn factor_gradients_match_finite_differences_d2() {
        // Loss through a factorized linear layer; perturb U_0 entries directly.
        let weight = random_tucker(&[5, 4], &[3, 2], 33);
        let x = random_tensor(vec![3, 4], 34);
        let t = random_tensor(vec![3, 5], 35);
        let batch = Batch::new(x, Targets::Values(t)).unwrap();

        let loss_at = |w: &TuckerTensor| {
            let layer = FactorizedLayer::linear(w.clone(), None).unwrap();
            Network::new(vec![NetLayer::Factorized(layer)])
                .loss(&batch, LossKind::Mse)
                .unwrap()
        };
        let layer = NetLayer::Factorized(FactorizedLayer::linear(weight.clone(), None).unwrap());
        let (_, grad_w, _) = full_weight_gradient(&layer, &batch, LossKind::Mse).unwrap();
        let fg = factor_gradients(&grad_w, &weight).unwrap();

        // Spec form for d=2: Mat_0(dW) U_1 Mat_0(C)^T.
        let direct = grad_w
            .unfold(0)
            .unwrap()
            .matmul(&weight.factors()[1])
            .matmul_nt(&weight.core().unfold(0).unwrap());
        assert!(direct.sub(&fg.factors[0]).frobenius_norm() < 1e-12);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut fd_norm = 0.0;
        let mut diff_norm = 0.0;
        for r in 0..5 {
            for c in 0..3 {
                let mut factors = weight.factors().to_vec();
                let orig = factors[0].get(r, c);
                factors[0].set(r, c, orig + h);
                let up =
                    loss_at(&TuckerTensor::new(weight.core().clone(), factors.clone()).unwrap());
                factors[0].set(r, c, orig - h);
                let dn = loss_at(&TuckerTensor::new(weight.core().clone(), factors).unwrap());
                let fd = (up - dn) / (2.0 * h);
                let diff = fd - fg.factors[0].get(r, c);
                fd_norm += fd * fd;
                diff_norm += diff * diff;
                worst = worst.max(diff.abs());
            }
        }
        assert!(
            diff_norm.sqrt() <= 1e-6 * fd_norm.sqrt().max(1e-12),
            "U_0 grad fd rel mismatch"
        );
    }

    #[test]
    fn core_gradient_matches_finite_differences_3mode() {
        let weight = random_tucker(&[4, 3, 5], &[2, 2, 3], 41);
        let target = random_tensor(vec![4, 3, 5], 42);
        let q = QuadraticLoss::new(target);
        let grad_w = q.grad(&weight.reconstruct()).unwrap();
        let fg = factor_gradients(&grad_w, &weight).unwrap();

        let h = 1e-5;
        let mut fd_norm = 0.0;
        let mut diff_norm = 0.0;
        let mut core = weight.core().clone();
        for i in 0..core.len() {
            let orig = core.data()[i];
            core.data_mut()[i] = orig + h;
            let up = q
                .value(
                    &TuckerTensor::new(core.clone(), weight.factors().to_vec())
                        .unwrap()
                        .reconstruct(),
                )
                .unwrap();
            core.data_mut()[i] = orig - h;
            let dn = q
                .value(
                    &TuckerTensor::new(core.clone(), weight.factors().to_vec())
                        .unwrap()
                        .reconstruct(),
                )
                .unwrap();
            core.data_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let diff = fd - fg.core.data()[i];
            fd_norm += fd * fd;
            diff_norm += diff * diff;
        }
        assert!(diff_norm.sqrt() <= 1e-6 * fd_norm.sqrt().max(1e-12));
    }
}
