//! Network-level training: the two-tape TDLRT pass applied across all Tucker
//! layers at once, plain momentum SGD for the uncompressed parameters, and
//! the LeNet-style image network builder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dlrt::{
    augmented_bases, descend_and_truncate, kls_bases, project_to_bases, DlrtConfig, DlrtLayerState,
};
use crate::model::{
    factor_gradients, Batch, ConvParams, DenseLayer, FactorizedLayer, LossKind, NetLayer, Network,
    Targets,
};
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::{compression_rate, hosvd, HosvdRank, TuckerTensor};
use crate::{Error, Result};

/// Parameter gradients of one layer after batch reduction.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weight: Option<DenseTensor>,
    pub bias: Option<Vec<f64>>,
}

/// Fixed work-unit size for data-parallel gradient evaluation. Chunk
/// boundaries never depend on the thread count and the reduction runs in
/// chunk order, so results are bit-identical for any `threads` value.
const GRAD_CHUNK: usize = 16;

fn sub_batch(batch: &Batch, lo: usize, hi: usize) -> Result<Batch> {
    let b = batch.size();
    let stride = batch.inputs.len() / b;
    let mut shape = batch.inputs.shape().to_vec();
    shape[0] = hi - lo;
    let inputs = DenseTensor::new(
        shape,
        batch.inputs.data()[lo * stride..hi * stride].to_vec(),
    )?;
    let targets = match &batch.targets {
        Targets::Labels(l) => Targets::Labels(l[lo..hi].to_vec()),
        Targets::Values(v) => {
            let vstride = v.len() / b;
            let mut vshape = v.shape().to_vec();
            vshape[0] = hi - lo;
            Targets::Values(DenseTensor::new(
                vshape,
                v.data()[lo * vstride..hi * vstride].to_vec(),
            )?)
        }
    };
    Batch::new(inputs, targets)
}

/// Loss and per-layer parameter gradients, optionally data-parallel over
/// fixed-size sample chunks.
pub fn forward_backward_params(
    net: &Network,
    batch: &Batch,
    kind: LossKind,
    threads: usize,
) -> Result<(f64, Vec<ParamGrads>)> {
    let b = batch.size();
    if b <= GRAD_CHUNK {
        let (loss, grads) = net.forward_backward(batch, kind)?;
        return Ok((
            loss,
            grads
                .into_iter()
                .map(|g| ParamGrads {
                    weight: g.weight,
                    bias: g.bias,
                })
                .collect(),
        ));
    }
    // Chunk boundaries depend only on the batch size, never on the thread
    // count, and the reduction below runs in chunk order: any `threads`
    // value yields bit-identical results.
    let bounds: Vec<(usize, usize)> = (0..b)
        .step_by(GRAD_CHUNK)
        .map(|lo| (lo, (lo + GRAD_CHUNK).min(b)))
        .collect();
    let eval_chunk = |&(lo, hi): &(usize, usize)| -> Result<(usize, f64, Vec<ParamGrads>)> {
        let chunk = sub_batch(batch, lo, hi)?;
        let (loss, grads) = net.forward_backward(&chunk, kind)?;
        Ok((
            hi - lo,
            loss,
            grads
                .into_iter()
                .map(|g| ParamGrads {
                    weight: g.weight,
                    bias: g.bias,
                })
                .collect(),
        ))
    };
    let partials: Vec<(usize, f64, Vec<ParamGrads>)> = if threads > 1 {
        bounds
            .par_iter()
            .map(eval_chunk)
            .collect::<Result<Vec<_>>>()?
    } else {
        bounds.iter().map(eval_chunk).collect::<Result<Vec<_>>>()?
    };

    // Ordered, weighted reduction: every per-chunk loss and gradient is
    // normalized by its chunk size, so weights n_c / b recover the batch mean.
    let mut loss = 0.0;
    let mut totals: Vec<ParamGrads> = Vec::new();
    for (idx, (n, l, grads)) in partials.into_iter().enumerate() {
        let w = n as f64 / b as f64;
        loss += w * l;
        if idx == 0 {
            totals = grads
                .into_iter()
                .map(|g| ParamGrads {
                    weight: g.weight.map(|t| t.scale(w)),
                    bias: g.bias.map(|v| v.iter().map(|x| x * w).collect()),
                })
                .collect();
        } else {
            for (total, g) in totals.iter_mut().zip(grads) {
                if let (Some(t), Some(gw)) = (&mut total.weight, &g.weight) {
                    *t = t.axpy(w, gw)?;
                }
                if let (Some(t), Some(gb)) = (&mut total.bias, &g.bias) {
                    for (a, x) in t.iter_mut().zip(gb) {
                        *a += w * x;
                    }
                }
            }
        }
    }
    Ok((loss, totals))
}

/// Which update the Tucker layers receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuckerVariant {
    /// Gradient-augmented bases with rounding (rank-adaptive).
    Efficient,
    /// Fixed-rank K-step re-orthonormalization.
    Fixed,
}

/// Momentum buffers of one uncompressed parameter set.
#[derive(Debug, Clone, Default)]
struct DenseMomentum {
    weight: Option<DenseTensor>,
    bias: Option<Vec<f64>>,
}

/// Trains a [`Network`]: Tucker layers via TDLRT (two backward passes per
/// step, all layers sharing both tapes), everything else via momentum SGD.
#[derive(Debug)]
pub struct NetworkTrainer {
    pub net: Network,
    pub cfg: DlrtConfig,
    pub dense_lr: f64,
    pub dense_momentum: f64,
    pub loss: LossKind,
    pub variant: TuckerVariant,
    /// Worker threads for batch gradient evaluation; results are identical
    /// for any value (fixed chunking, ordered reduction).
    pub threads: usize,
    /// TDLRT state per factorized layer, keyed by layer index.
    pub states: Vec<(usize, DlrtLayerState)>,
    dense_buffers: Vec<(usize, DenseMomentum)>,
}

/// Per-step statistics of one network update.
#[derive(Debug, Clone)]
pub struct NetStepStats {
    pub loss: f64,
    /// Root-sum-square over Tucker layers of the projected gradient norms.
    pub projected_grad_norm: f64,
    pub ranks: Vec<Vec<usize>>,
}

impl NetworkTrainer {
    pub fn new(
        net: Network,
        cfg: DlrtConfig,
        dense_lr: f64,
        dense_momentum: f64,
        loss: LossKind,
        variant: TuckerVariant,
    ) -> Self {
        let mut states = Vec::new();
        let mut dense_buffers = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            match layer {
                NetLayer::Factorized(l) => {
                    states.push((i, DlrtLayerState::new(l.weight.clone())));
                }
                NetLayer::Dense(_) => dense_buffers.push((i, DenseMomentum::default())),
                _ => {}
            }
        }
        Self {
            net,
            cfg,
            dense_lr,
            dense_momentum,
            loss,
            variant,
            threads: 1,
            states,
            dense_buffers,
        }
    }

    /// Current per-Tucker-layer ranks.
    pub fn ranks(&self) -> Vec<Vec<usize>> {
        self.states.iter().map(|(_, s)| s.ranks()).collect()
    }

    /// Compression rate of the Tucker kernels against their dense
    /// equivalents (kernel entries only).
    pub fn conv_compression(&self) -> Result<f64> {
        let mut compressed = 0usize;
        let mut full = 0usize;
        for (i, _) in &self.states {
            if let NetLayer::Factorized(l) = &self.net.layers[*i] {
                compressed += l.weight.storage_count();
                full += l.weight.dense_count();
            }
        }
        compression_rate(full, compressed)
    }

    fn factorized_layer(&mut self, index: usize) -> &mut FactorizedLayer {
        match &mut self.net.layers[index] {
            NetLayer::Factorized(l) => l,
            _ => unreachable!("state index always points at a factorized layer"),
        }
    }

    /// One optimizer step over the batch: two gradient tapes for the whole
    /// network, per-layer basis updates in between, then core descent,
    /// rounding, and the dense-parameter SGD update from the second tape.
    pub fn step(&mut self, batch: &Batch) -> Result<NetStepStats> {
        // Tape 1: gradients at the current weights.
        let (loss, grads1) = forward_backward_params(&self.net, batch, self.loss, self.threads)?;

        // Basis update per Tucker layer; install the projected cores so the
        // second tape sees every layer in its augmented basis.
        let mut pending: Vec<(usize, Option<DenseTensor>)> = Vec::new();
        let mut projected_sq = 0.0;
        for si in 0..self.states.len() {
            let (li, state) = {
                let (li, ref state) = self.states[si];
                (li, state.clone())
            };
            let grad_w = grads1[li]
                .weight
                .as_ref()
                .ok_or_else(|| Error::Config("factorized layer produced no gradient".into()))?;
            if !grad_w.is_finite() {
                return Err(Error::NonFinite("network weight gradient"));
            }
            projected_sq += crate::dlrt::projected_gradient_norm(&state.weight, grad_w)?.powi(2);
            let new_bases = match self.variant {
                TuckerVariant::Efficient => {
                    let fg = factor_gradients(grad_w, &state.weight)?;
                    augmented_bases(&state.weight, &fg.factors)?
                }
                TuckerVariant::Fixed => kls_bases(&state.weight, grad_w, self.cfg.lr, false)?,
            };
            let (core_proj, momentum_proj) =
                project_to_bases(&state.weight, &new_bases, state.core_momentum.as_ref())?;
            let projected = TuckerTensor::new(core_proj, new_bases)?;
            self.factorized_layer(li).weight = projected;
            pending.push((si, momentum_proj));
        }

        // Tape 2: gradients with all augmented bases installed.
        let (_, grads2) = forward_backward_params(&self.net, batch, self.loss, self.threads)?;

        for (si, momentum_proj) in pending {
            let li = self.states[si].0;
            let grad_w = grads2[li]
                .weight
                .as_ref()
                .ok_or_else(|| Error::Config("factorized layer produced no gradient".into()))?;
            if !grad_w.is_finite() {
                return Err(Error::NonFinite("network weight gradient"));
            }
            let projected = self.factorized_layer(li).weight.clone();
            let transposed: Vec<Matrix> =
                projected.factors().iter().map(Matrix::transpose).collect();
            let slots: Vec<Option<&Matrix>> = transposed.iter().map(Some).collect();
            let grad_core = grad_w.multi_mode_multiply(&slots)?;
            let (weight, momentum) = descend_and_truncate(
                projected,
                &grad_core,
                momentum_proj,
                &self.cfg,
                self.variant == TuckerVariant::Efficient,
            )?;
            {
                let dense_lr = self.dense_lr;
                let layer = self.factorized_layer(li);
                layer.weight = weight.clone();
                // Bias is an uncompressed parameter: plain SGD from tape 2.
                if let (Some(bias), Some(gb)) = (&mut layer.bias, &grads2[li].bias) {
                    for (b, g) in bias.iter_mut().zip(gb) {
                        *b -= dense_lr * g;
                    }
                }
            }
            let state = &mut self.states[si].1;
            state.weight = weight;
            state.core_momentum = momentum;
            let ranks = state.weight.ranks();
            state.rank_trace.push(ranks);
        }

        // Dense layers: momentum SGD from tape 2.
        for (li, buffers) in &mut self.dense_buffers {
            let ParamGrads { weight, bias } = &grads2[*li];
            if let NetLayer::Dense(layer) = &mut self.net.layers[*li] {
                if let Some(gw) = weight {
                    let direction = if self.dense_momentum > 0.0 {
                        let v = match buffers.weight.take() {
                            Some(v) => v.scale(self.dense_momentum).add(gw)?,
                            None => gw.clone(),
                        };
                        buffers.weight = Some(v.clone());
                        v
                    } else {
                        gw.clone()
                    };
                    layer.weight = layer.weight.axpy(-self.dense_lr, &direction)?;
                }
                if let (Some(bias_vec), Some(gb)) = (&mut layer.bias, bias) {
                    let dir: Vec<f64> = if self.dense_momentum > 0.0 {
                        let v: Vec<f64> = match buffers.bias.take() {
                            Some(v) => v
                                .iter()
                                .zip(gb)
                                .map(|(m, g)| self.dense_momentum * m + g)
                                .collect(),
                            None => gb.clone(),
                        };
                        buffers.bias = Some(v.clone());
                        v
                    } else {
                        gb.clone()
                    };
                    for (b, d) in bias_vec.iter_mut().zip(&dir) {
                        *b -= self.dense_lr * d;
                    }
                }
            }
        }

        Ok(NetStepStats {
            loss,
            projected_grad_norm: projected_sq.sqrt(),
            ranks: self.ranks(),
        })
    }
}

/// LeNet-style image network configuration: two Tucker convolutions (stride 2
/// replaces pooling) followed by two uncompressed linear layers.
#[derive(Debug, Clone)]
pub struct LenetConfig {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub fc_hidden: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Initial channel-mode ranks as a fraction of the mode size.
    pub init_rank_fraction: f64,
    /// Whether rank adaptation may touch the spatial kernel modes.
    pub factorization: crate::model::ConvFactorization,
    pub seed: u64,
}

impl Default for LenetConfig {
    fn default() -> Self {
        Self {
            conv1_filters: 16,
            conv2_filters: 32,
            kernel: 5,
            fc_hidden: 128,
            classes: 10,
            image_size: 28,
            init_rank_fraction: 0.5,
            factorization: crate::model::ConvFactorization::AllModes,
            seed: 7,
        }
    }
}

fn kaiming_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let std = (2.0 / fan_in as f64).sqrt();
    DenseTensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Builds the Tucker LeNet: conv(s2) - relu - conv(s2) - relu - flatten -
/// fc - relu - fc. The conv kernels start at `init_rank_fraction` of full
/// channel rank (spatial modes at full rank).
pub fn build_lenet(cfg: &LenetConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.kernel;
    let pad = k / 2;
    let conv_params = ConvParams {
        stride: 2,
        padding: pad,
    };
    let frac = |n: usize| ((n as f64 * cfg.init_rank_fraction).ceil() as usize).clamp(1, n);

    let kernel1 = kaiming_tensor(vec![cfg.conv1_filters, 1, k, k], k * k, &mut rng);
    let conv1 = FactorizedLayer::conv2d(
        hosvd(
            &kernel1,
            HosvdRank::Ranks(&[frac(cfg.conv1_filters), 1, k, k]),
        )?,
        Some(vec![0.0; cfg.conv1_filters]),
        conv_params,
    )?;

    let kernel2 = kaiming_tensor(
        vec![cfg.conv2_filters, cfg.conv1_filters, k, k],
        cfg.conv1_filters * k * k,
        &mut rng,
    );
    let conv2 = FactorizedLayer::conv2d(
        hosvd(
            &kernel2,
            HosvdRank::Ranks(&[frac(cfg.conv2_filters), frac(cfg.conv1_filters), k, k]),
        )?,
        Some(vec![0.0; cfg.conv2_filters]),
        conv_params,
    )?;

    // Two stride-2 convolutions with same-padding quarter each spatial side.
    let side = {
        let once = (cfg.image_size + 2 * pad - k) / 2 + 1;
        (once + 2 * pad - k) / 2 + 1
    };
    let flat = cfg.conv2_filters * side * side;
    let fc1 = DenseLayer::linear(
        kaiming_tensor(vec![cfg.fc_hidden, flat], flat, &mut rng),
        Some(vec![0.0; cfg.fc_hidden]),
    )?;
    let fc2 = DenseLayer::linear(
        kaiming_tensor(vec![cfg.classes, cfg.fc_hidden], cfg.fc_hidden, &mut rng),
        Some(vec![0.0; cfg.classes]),
    )?;

    Ok(Network::new(vec![
        NetLayer::Factorized(conv1),
        NetLayer::Relu,
        NetLayer::Factorized(conv2),
        NetLayer::Relu,
        NetLayer::Flatten,
        NetLayer::Dense(fc1),
        NetLayer::Relu,
        NetLayer::Dense(fc2),
    ]))
}
