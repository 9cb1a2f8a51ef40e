//! Network checkpoint container: a `TDLC` header followed by one tagged block
//! per layer. Tucker weights embed the `TDLT` tensor format; dense weights
//! are stored as shape plus raw little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::model::{ConvParams, DenseLayer, FactorizedLayer, LayerKind, NetLayer, Network};
use crate::tensor::DenseTensor;
use crate::tucker::TuckerTensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TDLC";
const VERSION: u32 = 1;

const TAG_FACT_LINEAR: u8 = 0;
const TAG_FACT_CONV: u8 = 1;
const TAG_DENSE_LINEAR: u8 = 2;
const TAG_DENSE_CONV: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_FLATTEN: u8 = 5;

fn bad(reason: impl Into<String>) -> Error {
    Error::Parse {
        path: "<network checkpoint>".into(),
        reason: reason.into(),
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_bias(w: &mut impl Write, bias: &Option<Vec<f64>>) -> Result<()> {
    match bias {
        Some(b) => {
            write_u32(w, b.len() as u32)?;
            for v in b {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        None => write_u32(w, 0)?,
    }
    Ok(())
}

fn read_bias(r: &mut impl Read) -> Result<Option<Vec<f64>>> {
    let len = read_u32(r)? as usize;
    if len == 0 {
        return Ok(None);
    }
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    Ok(Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    ))
}

fn write_dense_tensor(w: &mut impl Write, t: &DenseTensor) -> Result<()> {
    write_u32(w, t.order() as u32)?;
    for &n in t.shape() {
        write_u32(w, n as u32)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_dense_tensor(r: &mut impl Read) -> Result<DenseTensor> {
    let d = read_u32(r)? as usize;
    if d == 0 || d > 16 {
        return Err(bad(format!("implausible dense order {d}")));
    }
    let mut shape = Vec::with_capacity(d);
    for _ in 0..d {
        shape.push(read_u32(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    DenseTensor::new(
        shape,
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

fn conv_of(kind: LayerKind) -> Option<ConvParams> {
    match kind {
        LayerKind::Conv2d(p) => Some(p),
        LayerKind::Linear => None,
    }
}

/// Serializes every layer (weights, biases, conv hyperparameters).
pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, net.layers.len() as u32)?;
    for layer in &net.layers {
        match layer {
            NetLayer::Factorized(l) => match conv_of(l.kind) {
                Some(p) => {
                    w.write_all(&[TAG_FACT_CONV])?;
                    write_u32(&mut w, p.stride as u32)?;
                    write_u32(&mut w, p.padding as u32)?;
                    l.weight.write_to(&mut w)?;
                    write_bias(&mut w, &l.bias)?;
                }
                None => {
                    w.write_all(&[TAG_FACT_LINEAR])?;
                    l.weight.write_to(&mut w)?;
                    write_bias(&mut w, &l.bias)?;
                }
            },
            NetLayer::Dense(l) => match conv_of(l.kind) {
                Some(p) => {
                    w.write_all(&[TAG_DENSE_CONV])?;
                    write_u32(&mut w, p.stride as u32)?;
                    write_u32(&mut w, p.padding as u32)?;
                    write_dense_tensor(&mut w, &l.weight)?;
                    write_bias(&mut w, &l.bias)?;
                }
                None => {
                    w.write_all(&[TAG_DENSE_LINEAR])?;
                    write_dense_tensor(&mut w, &l.weight)?;
                    write_bias(&mut w, &l.bias)?;
                }
            },
            NetLayer::Relu => w.write_all(&[TAG_RELU])?,
            NetLayer::Flatten => w.write_all(&[TAG_FLATTEN])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let layer = match tag[0] {
            TAG_FACT_CONV => {
                let stride = read_u32(&mut r)? as usize;
                let padding = read_u32(&mut r)? as usize;
                let weight = TuckerTensor::read_from(&mut r)?;
                let bias = read_bias(&mut r)?;
                NetLayer::Factorized(FactorizedLayer::conv2d(
                    weight,
                    bias,
                    ConvParams { stride, padding },
                )?)
            }
            TAG_FACT_LINEAR => {
                let weight = TuckerTensor::read_from(&mut r)?;
                let bias = read_bias(&mut r)?;
                NetLayer::Factorized(FactorizedLayer::linear(weight, bias)?)
            }
            TAG_DENSE_CONV => {
                let stride = read_u32(&mut r)? as usize;
                let padding = read_u32(&mut r)? as usize;
                let weight = read_dense_tensor(&mut r)?;
                let bias = read_bias(&mut r)?;
                NetLayer::Dense(DenseLayer::conv2d(
                    weight,
                    bias,
                    ConvParams { stride, padding },
                )?)
            }
            TAG_DENSE_LINEAR => {
                let weight = read_dense_tensor(&mut r)?;
                let bias = read_bias(&mut r)?;
                NetLayer::Dense(DenseLayer::linear(weight, bias)?)
            }
            TAG_RELU => NetLayer::Relu,
            TAG_FLATTEN => NetLayer::Flatten,
            other => return Err(bad(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    Ok(Network::new(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::network::{build_lenet, LenetConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let net = build_lenet(&LenetConfig {
            conv1_filters: 4,
            conv2_filters: 6,
            kernel: 3,
            fc_hidden: 12,
            classes: 5,
            image_size: 12,
            init_rank_fraction: 0.6,
            factorization: crate::model::ConvFactorization::AllModes,
            seed: 11,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tdlc");
        save_network(&path, &net).unwrap();
        let back = load_network(&path).unwrap();

        // Identical outputs on identical inputs, down to the bit.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseTensor::from_fn(vec![2, 1, 12, 12], |_| rng.random_range(0.0..1.0));
        let y1 = net.forward(&x).unwrap();
        let y2 = back.forward(&x).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let net = build_lenet(&LenetConfig {
            conv1_filters: 2,
            conv2_filters: 2,
            kernel: 3,
            fc_hidden: 4,
            classes: 2,
            image_size: 8,
            init_rank_fraction: 1.0,
            factorization: crate::model::ConvFactorization::AllModes,
            seed: 1,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tdlc");
        save_network(&path, &net).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_network(&path).is_err());
    }
}
