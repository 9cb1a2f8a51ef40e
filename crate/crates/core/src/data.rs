//! Dataset ingestion (MNIST IDX files) and synthetic problem generators with
//! controlled per-mode spectra.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::bufread::GzDecoder;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::linalg::{qr_orthonormal, svd};
use crate::model::{Batch, Targets};
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::TuckerTensor;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Published SHA-256 digests of the four standard gzipped MNIST files.
pub const MNIST_GZ_SHA256: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte.gz",
        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    ),
    (
        "train-labels-idx1-ubyte.gz",
        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    ),
    (
        "t10k-images-idx3-ubyte.gz",
        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    ),
    (
        "t10k-labels-idx1-ubyte.gz",
        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
    ),
];

/// Loaded image dataset; pixels stay as bytes until a batch is materialized.
#[derive(Debug, Clone)]
pub struct MnistData {
    pixels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    labels: Vec<u8>,
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Opens a file, transparently gunzipping when the gzip magic is present.
fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut head = [0u8; 2];
    let file_has_two_bytes = {
        use std::io::BufRead;
        let buf = reader.fill_buf()?;
        if buf.len() >= 2 {
            head.copy_from_slice(&buf[..2]);
            true
        } else {
            false
        }
    };
    if file_has_two_bytes && head == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_u32_be(r: &mut dyn Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| parse_err(path, "truncated header"))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_exact_payload(r: &mut dyn Read, len: usize, path: &Path) -> Result<Vec<u8>> {
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)
        .map_err(|_| parse_err(path, format!("truncated payload, expected {len} bytes")))?;
    // Trailing garbage indicates a malformed file.
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(data),
        _ => Err(parse_err(path, "trailing bytes after payload")),
    }
}

fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut *r, path)?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(path, format!("bad magic {magic:#010x}")));
    }
    let count = read_u32_be(&mut *r, path)? as usize;
    let rows = read_u32_be(&mut *r, path)? as usize;
    let cols = read_u32_be(&mut *r, path)? as usize;
    let data = read_exact_payload(&mut *r, count * rows * cols, path)?;
    Ok((data, count, rows, cols))
}

fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut *r, path)?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(path, format!("bad magic {magic:#010x}")));
    }
    let count = read_u32_be(&mut *r, path)? as usize;
    read_exact_payload(&mut *r, count, path)
}

/// Parses an IDX image/label pair (raw or gzipped).
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<MnistData> {
    let (pixels, count, rows, cols) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(parse_err(
            labels_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    Ok(MnistData {
        pixels,
        rows,
        cols,
        labels,
    })
}

impl MnistData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    /// Raw bytes of one image, row-major.
    pub fn image_bytes(&self, index: usize) -> &[u8] {
        let stride = self.rows * self.cols;
        &self.pixels[index * stride..(index + 1) * stride]
    }

    /// Materializes `(B, 1, rows, cols)` inputs scaled to `[0, 1]` with label
    /// targets for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let stride = self.rows * self.cols;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| b as f64 / 255.0));
            labels.push(self.label(i));
        }
        let inputs = DenseTensor::new(vec![indices.len(), 1, self.rows, self.cols], data)?;
        Batch::new(inputs, Targets::Labels(labels))
    }

    /// First `n` samples as a single evaluation tensor plus labels.
    pub fn eval_slice(&self, n: usize) -> Result<(DenseTensor, Vec<usize>)> {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let batch = self.batch(&indices)?;
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        Ok((batch.inputs, labels))
    }
}

/// Deterministic Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Hex SHA-256 of a file's raw bytes.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// One line of a verification manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sha256: String,
    pub filename: String,
}

/// Parses `sha256sum`-style lines: `<hex><2 spaces><filename>`.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| parse_err(path, format!("malformed line {}", lineno + 1)))?;
        if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(parse_err(
                path,
                format!("bad digest on line {}", lineno + 1),
            ));
        }
        entries.push(ManifestEntry {
            sha256: hash.to_ascii_lowercase(),
            filename: name.trim().to_string(),
        });
    }
    Ok(entries)
}

/// Verification outcome for one manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyStatus {
    Ok,
    Missing,
    Mismatch { actual: String },
}

/// Checks every manifest entry against files under `dir`.
pub fn verify_manifest(entries: &[ManifestEntry], dir: &Path) -> Vec<(String, VerifyStatus)> {
    entries
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.filename);
            let status = if !path.exists() {
                VerifyStatus::Missing
            } else {
                match sha256_hex(&path) {
                    Ok(actual) if actual == e.sha256 => VerifyStatus::Ok,
                    Ok(actual) => VerifyStatus::Mismatch { actual },
                    Err(_) => VerifyStatus::Missing,
                }
            };
            (e.filename.clone(), status)
        })
        .collect()
}

/// Synthetic low-rank recovery problem description.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub shape: Vec<usize>,
    pub true_ranks: Vec<usize>,
    /// Per-mode singular values of the core unfoldings, positive nonincreasing,
    /// one sequence of length `true_ranks[i]` per mode.
    pub spectrum: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Spectrum `(1, decay, decay^2, ...)` per mode; `decay = 0.1` gives the
    /// powers-of-ten profile of the ill-conditioned initialization study.
    pub fn with_decay(shape: Vec<usize>, ranks: Vec<usize>, decay: f64, seed: u64) -> Self {
        let spectrum = ranks
            .iter()
            .map(|&r| (0..r).map(|k| decay.powi(k as i32)).collect())
            .collect();
        Self {
            shape,
            true_ranks: ranks,
            spectrum,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.shape.len();
        if self.true_ranks.len() != d || self.spectrum.len() != d {
            return Err(Error::InvalidSpectrum(format!(
                "expected {d} ranks and spectra, got {} and {}",
                self.true_ranks.len(),
                self.spectrum.len()
            )));
        }
        for i in 0..d {
            let r = self.true_ranks[i];
            if r == 0 || r > self.shape[i] {
                return Err(Error::RankTooLarge {
                    mode: i,
                    rank: r,
                    size: self.shape[i],
                });
            }
            let others: usize = self
                .true_ranks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &rj)| rj)
                .product();
            if r > others {
                return Err(Error::InvalidSpectrum(format!(
                    "mode {i}: rank {r} exceeds the product {others} of the other ranks"
                )));
            }
            if self.spectrum[i].len() != r {
                return Err(Error::InvalidSpectrum(format!(
                    "mode {i}: spectrum length {} != rank {r}",
                    self.spectrum[i].len()
                )));
            }
            let s = &self.spectrum[i];
            if s.iter().any(|&v| !v.is_finite() || v <= 0.0) || s.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::InvalidSpectrum(format!(
                    "mode {i}: spectrum must be positive and nonincreasing"
                )));
            }
        }
        Ok(())
    }
}

/// Generated target with the spectra actually realized per mode. For equal
/// ranks with a shared spectrum the construction is exact (superdiagonal
/// core); otherwise the core is rescaled mode by mode and the outcome
/// reported.
#[derive(Debug, Clone)]
pub struct GeneratedTarget {
    pub tucker: TuckerTensor,
    pub realized_spectra: Vec<Vec<f64>>,
}

impl GeneratedTarget {
    pub fn tensor(&self) -> DenseTensor {
        self.tucker.reconstruct()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn seeded_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    Ok(qr_orthonormal(&gaussian_matrix(rows, cols, rng))?.0)
}

fn superdiagonal_core(rank: usize, d: usize, s: &[f64]) -> DenseTensor {
    let mut core = DenseTensor::zeros(vec![rank; d]);
    for (alpha, &v) in s.iter().enumerate() {
        core.set(&vec![alpha; d], v);
    }
    core
}

/// Core whose mode unfoldings carry (approximately) the prescribed spectra.
fn prescribed_core(
    ranks: &[usize],
    spectra: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<(DenseTensor, Vec<Vec<f64>>)> {
    let d = ranks.len();
    let equal_ranks = ranks.windows(2).all(|w| w[0] == w[1]);
    let equal_spectra = spectra.windows(2).all(|w| w[0] == w[1]);
    let mut core = if equal_ranks && equal_spectra {
        superdiagonal_core(ranks[0], d, &spectra[0])
    } else {
        // Rescale singular values mode by mode, twice; later modes perturb
        // earlier ones, so the realized spectra are reported to the caller.
        let mut core = DenseTensor::from_fn(ranks.to_vec(), |_| StandardNormal.sample(rng));
        for _pass in 0..2 {
            for (i, mode_spectrum) in spectra.iter().enumerate() {
                let unf = core.unfold(i)?;
                let dec = svd(&unf);
                let mut scaled = dec.u.clone();
                for r in 0..scaled.rows() {
                    for c in 0..scaled.cols() {
                        let s = mode_spectrum.get(c).copied().unwrap_or(0.0);
                        scaled.set(r, c, scaled.get(r, c) * s);
                    }
                }
                let rebuilt = scaled.matmul(&dec.vt);
                core = DenseTensor::fold(&rebuilt, i, core.shape())?;
            }
        }
        core
    };
    // Guard against the degenerate case of an all-zero core.
    if core.frobenius_norm() == 0.0 {
        core = superdiagonal_core(ranks[0], d, &spectra[0]);
    }
    let realized = (0..d)
        .map(|i| Ok(svd(&core.unfold(i)?).s))
        .collect::<Result<Vec<_>>>()?;
    Ok((core, realized))
}

/// Dense target `C* x_i U_i*` with seeded orthonormal factors and a core with
/// prescribed per-mode spectra.
pub fn make_low_rank_target(spec: &SyntheticSpec) -> Result<GeneratedTarget> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (core, realized) = prescribed_core(&spec.true_ranks, &spec.spectrum, &mut rng)?;
    let factors = spec
        .shape
        .iter()
        .zip(&spec.true_ranks)
        .map(|(&n, &r)| seeded_orthonormal(n, r, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedTarget {
        tucker: TuckerTensor::new(core, factors)?,
        realized_spectra: realized,
    })
}

/// Tucker-factorized initialization whose core unfoldings carry the
/// prescribed (typically ill-conditioned) singular values.
pub fn spectral_init(
    shape: &[usize],
    ranks: &[usize],
    spectrum: &[Vec<f64>],
    seed: u64,
) -> Result<TuckerTensor> {
    let spec = SyntheticSpec {
        shape: shape.to_vec(),
        true_ranks: ranks.to_vec(),
        spectrum: spectrum.to_vec(),
        seed,
    };
    Ok(make_low_rank_target(&spec)?.tucker)
}
