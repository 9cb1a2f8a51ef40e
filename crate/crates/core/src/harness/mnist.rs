//! Desk-scale MNIST training of the Tucker LeNet.

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::network::{build_lenet, LenetConfig, NetworkTrainer, TuckerVariant};
use super::{PlateauTracker, TrainRecord};
use crate::data::{load_mnist, shuffled_indices, MnistData};
use crate::dlrt::{DlrtConfig, LrSchedule};
use crate::model::{LossKind, Network};
use crate::{Error, Result};

/// Standard MNIST file stems; each may carry a `.gz` suffix on disk.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Resolves the four dataset files under `dir`, accepting gzipped copies.
pub fn locate_mnist(dir: &Path) -> Result<[PathBuf; 4]> {
    let mut out = Vec::with_capacity(4);
    for stem in MNIST_FILES {
        let raw = dir.join(stem);
        let gz = dir.join(format!("{stem}.gz"));
        if raw.exists() {
            out.push(raw);
        } else if gz.exists() {
            out.push(gz);
        } else {
            return Err(Error::Config(format!(
                "missing MNIST file {stem}(.gz) under {}",
                dir.display()
            )));
        }
    }
    Ok(out.try_into().expect("exactly four paths"))
}

#[derive(Debug, Clone)]
pub struct MnistRunConfig {
    pub data_dir: PathBuf,
    /// Training samples drawn (after a seeded shuffle) from the train split.
    pub subset: usize,
    pub epochs: usize,
    pub tau: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    pub threads: usize,
    pub lenet: LenetConfig,
    /// Steps between held-out evaluations driving the plateau schedule.
    pub eval_every: usize,
    /// Samples per held-out evaluation window.
    pub eval_samples: usize,
}

impl MnistRunConfig {
    pub fn new(data_dir: PathBuf) -> Self {
        Self {
            data_dir,
            subset: 10_000,
            epochs: 3,
            tau: 0.1,
            lr: 0.05,
            momentum: 0.1,
            batch: 128,
            seed: 7,
            threads: 1,
            lenet: LenetConfig::default(),
            eval_every: 40,
            eval_samples: 1000,
        }
    }
}

#[derive(Debug)]
pub struct MnistOutcome {
    pub records: Vec<TrainRecord>,
    /// Accuracy over the full test split.
    pub test_accuracy: f64,
    /// Kernel-parameter compression of the conv layers, `1 - c/f`.
    pub conv_compression: f64,
    pub final_ranks: Vec<Vec<usize>>,
    pub network: Network,
}

/// Trains the Tucker LeNet with TDLRT and evaluates on the test split.
pub fn run_mnist(cfg: &MnistRunConfig) -> Result<MnistOutcome> {
    let [train_images, train_labels, test_images, test_labels] = locate_mnist(&cfg.data_dir)?;
    let train = load_mnist(&train_images, &train_labels)?;
    let test = load_mnist(&test_images, &test_labels)?;
    run_mnist_with_data(cfg, &train, &test)
}

/// Same as [`run_mnist`] with preloaded data (used by tests with synthetic
/// datasets).
pub fn run_mnist_with_data(
    cfg: &MnistRunConfig,
    train: &MnistData,
    test: &MnistData,
) -> Result<MnistOutcome> {
    let mut lenet_cfg = cfg.lenet.clone();
    lenet_cfg.image_size = train.rows;
    lenet_cfg.seed = cfg.seed;
    let net = build_lenet(&lenet_cfg)?;
    let mut dlrt_cfg = DlrtConfig::new(cfg.tau, cfg.lr)?.with_momentum(cfg.momentum);
    dlrt_cfg.lr_schedule = LrSchedule::Plateau {
        factor: 0.1,
        patience: 5,
    };
    let k = lenet_cfg.kernel;
    dlrt_cfg.rank_floors = lenet_cfg.factorization.rank_floors(&[0, 0, k, k]);
    let mut trainer = NetworkTrainer::new(
        net,
        dlrt_cfg,
        cfg.lr,
        cfg.momentum,
        LossKind::SoftmaxCe,
        TuckerVariant::Efficient,
    );
    trainer.threads = cfg.threads;

    let subset_size = cfg.subset.min(train.len());
    let subset: Vec<usize> = shuffled_indices(train.len(), cfg.seed)
        .into_iter()
        .take(subset_size)
        .collect();
    let (eval_inputs, eval_labels) = test.eval_slice(cfg.eval_samples)?;

    let mut plateau = match trainer.cfg.lr_schedule {
        LrSchedule::Plateau { factor, patience } => Some(PlateauTracker::new(factor, patience)),
        LrSchedule::Constant => None,
    };

    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(subset_size, cfg.seed.wrapping_add(epoch as u64 + 1));
        for chunk in order.chunks(cfg.batch) {
            let indices: Vec<usize> = chunk.iter().map(|&i| subset[i]).collect();
            let batch = train.batch(&indices)?;
            let t0 = Instant::now();
            let stats = trainer.step(&batch)?;
            let wall_ms = t0.elapsed().as_millis() as u64;

            let mut test_metric = None;
            if step.is_multiple_of(cfg.eval_every) {
                let acc = trainer.net.accuracy(&eval_inputs, &eval_labels)?;
                test_metric = Some(acc);
                if let Some(tracker) = &mut plateau {
                    let multiplier = tracker.observe(1.0 - acc);
                    if multiplier < 1.0 {
                        trainer.cfg.lr *= multiplier;
                        trainer.dense_lr *= multiplier;
                    }
                }
            }
            records.push(TrainRecord {
                step,
                loss: stats.loss,
                test_metric,
                ranks: stats.ranks,
                compression_rate: trainer.conv_compression()?,
                projected_grad_norm: stats.projected_grad_norm,
                wall_ms,
            });
            step += 1;
        }
    }

    // Full test split accuracy, evaluated in batches to bound memory.
    let mut hits = 0usize;
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(512) {
        let batch = test.batch(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| test.label(i)).collect();
        hits +=
            (trainer.net.accuracy(&batch.inputs, &labels)? * labels.len() as f64).round() as usize;
    }
    let test_accuracy = hits as f64 / test.len() as f64;

    Ok(MnistOutcome {
        records,
        test_accuracy,
        conv_compression: trainer.conv_compression()?,
        final_ranks: trainer.ranks(),
        network: trainer.net,
    })
}
