//! Datasets: IDX ingestion, synthetic generators, splits and vertical
//! partitioning.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled samples; the first feature axis indexes samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Argument(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Values per sample.
    pub fn feature_dim(&self) -> usize {
        self.features.len() / self.len()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Features reshaped to `[n × feature_dim]`.
    pub fn flat(&self) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.clone().reshape(&[self.len(), self.feature_dim()])?,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: "file ends inside the header".into(),
        })
}

/// Parses an IDX image file into `[n × rows × cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            offset: 4,
            message: "zero extent in image header".into(),
        });
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated image data, expected {need} bytes"),
        });
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated label data, expected {} bytes", 8 + n),
        });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST-style image/label pair. Either file may be gzip-compressed.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_maybe_gz(images)?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if x.shape()[0] != y.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", x.shape()[0], y.len()),
        });
    }
    let classes = y.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(x, y, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// One isotropic Gaussian per class around well-separated centres.
    Blobs { classes: usize },
    /// Two classes split by a random hyperplane through the origin.
    LinearlySeparable,
    /// Two classes whose evidence is spread over both halves of the feature
    /// vector, so that neither party alone sees the whole signal.
    BinaryVfl,
}

/// Deterministic synthetic data with features in `[0, 1]` (blobs are
/// clipped) so inversion attacks can use the same box as images.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::Argument("n and d must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SyntheticKind::Blobs { classes } => {
            if classes < 2 {
                return Err(Error::Argument("blobs need at least two classes".into()));
            }
            let sigma = 0.03;
            let centres: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..d).map(|_| rng.random_range(0.2..0.8)).collect())
                .collect();
            let mut data = Vec::with_capacity(n * d);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                labels.push(c);
                for &m in &centres[c] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((m + sigma * z).clamp(0.0, 1.0));
                }
            }
            Dataset::new(Tensor::new(vec![n, d], data)?, labels, classes)
        }
        SyntheticKind::LinearlySeparable | SyntheticKind::BinaryVfl => {
            let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let margin = 0.05 * w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut data = Vec::with_capacity(n * d);
            let mut labels = Vec::with_capacity(n);
            while labels.len() < n {
                let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
                let score: f64 = x.iter().zip(&w).map(|(a, b)| (a - 0.5) * b).sum();
                if score.abs() < margin {
                    continue;
                }
                labels.push(usize::from(score > 0.0));
                data.extend(x);
            }
            if kind == SyntheticKind::BinaryVfl && d < 2 {
                return Err(Error::Argument("binary VFL data needs d >= 2".into()));
            }
            Dataset::new(Tensor::new(vec![n, d], data)?, labels, 2)
        }
    }
}

/// Index sets into one dataset. `aux` is drawn from `train`; `test` is
/// disjoint from both.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub aux: Vec<usize>,
}

impl Splits {
    pub fn new(n: usize, n_train: usize, n_test: usize, n_aux: usize, seed: u64) -> Result<Self> {
        if n_train + n_test > n || n_aux > n_train || n_train == 0 || n_test == 0 {
            return Err(Error::Config(format!(
                "cannot take {n_train} train / {n_test} test / {n_aux} aux from {n} samples"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let train = idx[..n_train].to_vec();
        let test = idx[n_train..n_train + n_test].to_vec();
        let aux = train[..n_aux].to_vec();
        let s = Self { train, test, aux };
        s.check_disjoint()?;
        Ok(s)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &i in &self.train {
            seen.insert(i);
        }
        if self.test.iter().any(|i| seen.contains(i)) {
            return Err(Error::Contract("test split overlaps train split".into()));
        }
        if self.aux.iter().any(|i| !seen.contains(i)) {
            return Err(Error::Contract("auxiliary split is not inside train".into()));
        }
        Ok(())
    }
}

/// Per-party feature shards plus the label vector held by the active party.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalShards {
    pub shards: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Splits the last feature axis into the given half-open column ranges, which
/// must partition it.
pub fn vertical_split(ds: &Dataset, ranges: &[(usize, usize)]) -> Result<VerticalShards> {
    let width = ds.features.last_dim();
    let mut sorted = ranges.to_vec();
    sorted.sort();
    let mut next = 0;
    for &(a, b) in &sorted {
        if a != next || b <= a {
            return Err(Error::Config(format!(
                "column ranges {ranges:?} do not partition 0..{width}"
            )));
        }
        next = b;
    }
    if next != width || ds.features.ndim() < 2 {
        return Err(Error::Config(format!(
            "column ranges {ranges:?} do not partition 0..{width}"
        )));
    }
    let rows = ds.features.len() / width;
    let lead = &ds.features.shape()[..ds.features.ndim() - 1];
    let shards = ranges
        .iter()
        .map(|&(a, b)| {
            let mut data = Vec::with_capacity(rows * (b - a));
            for r in 0..rows {
                data.extend_from_slice(&ds.features.data()[r * width + a..r * width + b]);
            }
            let mut shape = lead.to_vec();
            shape.push(b - a);
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerticalShards {
        shards,
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
    })
}

/// `k` contiguous column ranges of nearly equal width.
pub fn even_ranges(width: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i * width / k, (i + 1) * width / k)).collect()
}
