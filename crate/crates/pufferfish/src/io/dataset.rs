//! Dataset ingestion: CSV classification tables, IDX image files, and the
//! seeded synthetic generators used by the toy tasks.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::zoo::{InputKind, ModelGraph};

/// CIFAR-10 per-channel normalization constants (r, g, b).
pub const CIFAR10_MEAN: [f64; 3] = [0.491, 0.482, 0.447];
pub const CIFAR10_STD: [f64; 3] = [0.247, 0.244, 0.262];
/// ImageNet per-channel normalization constants (r, g, b).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPreset {
    Cifar10,
    Imagenet,
}

impl NormPreset {
    pub fn constants(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            NormPreset::Cifar10 => (CIFAR10_MEAN, CIFAR10_STD),
            NormPreset::Imagenet => (IMAGENET_MEAN, IMAGENET_STD),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetDescriptor {
    /// Numeric CSV, one sample per row, label in the last column.
    CsvClassification { path: PathBuf },
    /// IDX-format images (optionally with an IDX label file).
    IdxImages {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        normalize: Option<NormPreset>,
    },
    /// k uniform class blobs in `dim` dimensions.
    SyntheticGaussian {
        classes: usize,
        dim: usize,
        n: usize,
        seed: u64,
    },
    /// Uniform token stream.
    SyntheticTokens { vocab: usize, length: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Classification {
        /// (n, ...) samples; flat (n, dim) until fitted to a model input.
        x: Tensor,
        y: Vec<usize>,
        classes: usize,
    },
    Tokens { stream: Vec<usize>, vocab: usize },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification { y, .. } => y.len(),
            Dataset::Tokens { stream, .. } => stream.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reshapes flat classification samples to the model's input layout.
    pub fn fit_to_model(self, model: &ModelGraph) -> Result<Dataset> {
        match (&model.meta.input, self) {
            (InputKind::Image { c, h, w }, Dataset::Classification { x, y, classes }) => {
                let n = x.shape()[0];
                let per: usize = x.len() / n;
                if per != c * h * w {
                    return Err(Error::Dimension(format!(
                        "dataset sample dim {} does not match input {}x{}x{}",
                        per, c, h, w
                    )));
                }
                Ok(Dataset::Classification {
                    x: x.reshaped(vec![n, *c, *h, *w])?,
                    y,
                    classes,
                })
            }
            (InputKind::Vector { dim }, Dataset::Classification { x, y, classes }) => {
                let n = x.shape()[0];
                if x.len() / n != *dim {
                    return Err(Error::Dimension(format!(
                        "dataset sample dim {} does not match input dim {}",
                        x.len() / n,
                        dim
                    )));
                }
                Ok(Dataset::Classification {
                    x: x.reshaped(vec![n, *dim])?,
                    y,
                    classes,
                })
            }
            (InputKind::TokenSeq { vocab }, Dataset::Tokens { stream, vocab: v }) => {
                if v > *vocab {
                    return Err(Error::Argument(format!(
                        "token vocab {} exceeds model vocab {}",
                        v, vocab
                    )));
                }
                Ok(Dataset::Tokens { stream, vocab: v })
            }
            (kind, _) => Err(Error::Argument(format!(
                "dataset does not match model input {:?}",
                kind
            ))),
        }
    }
}

pub fn load_dataset(desc: &DatasetDescriptor) -> Result<Dataset> {
    match desc {
        DatasetDescriptor::SyntheticGaussian {
            classes,
            dim,
            n,
            seed,
        } => synthetic_gaussian(*classes, *dim, *n, *seed),
        DatasetDescriptor::SyntheticTokens { vocab, length, seed } => {
            if *vocab == 0 || *length == 0 {
                return Err(Error::Argument("vocab and length must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(Dataset::Tokens {
                stream: (0..*length).map(|_| rng.gen_range(0..*vocab)).collect(),
                vocab: *vocab,
            })
        }
        DatasetDescriptor::CsvClassification { path } => load_csv(path),
        DatasetDescriptor::IdxImages {
            images,
            labels,
            normalize,
        } => load_idx(images, labels.as_deref(), *normalize),
    }
}

/// Class blobs: per-class centers on a scaled unit cube plus uniform noise.
/// Samples come out in deterministic round-robin class order.
fn synthetic_gaussian(classes: usize, dim: usize, n: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 || n == 0 {
        return Err(Error::Argument(
            "synthetic_gaussian needs classes, dim, n >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut x = Tensor::zeros(&[n, dim]);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            x.data_mut()[i * dim + j] = centers[c][j] + rng.gen_range(-0.6..0.6);
        }
        y.push(c);
    }
    Ok(Dataset::Classification { x, y, classes })
}

fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            what: e.to_string(),
            pos: path.display().to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            what: e.to_string(),
            pos: format!("{}:{line}", path.display()),
        })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                what: "need at least one feature and a label".into(),
                pos: format!("{}:{line}", path.display()),
            });
        }
        let mut feats = Vec::with_capacity(record.len() - 1);
        for (f, field) in record.iter().enumerate() {
            if f + 1 == record.len() {
                let label: usize = field.parse().map_err(|_| Error::Parse {
                    what: format!("bad label `{field}`"),
                    pos: format!("{}:{line} field {}", path.display(), f + 1),
                })?;
                labels.push(label);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    what: format!("bad number `{field}`"),
                    pos: format!("{}:{line} field {}", path.display(), f + 1),
                })?;
                feats.push(v);
            }
        }
        if !rows.is_empty() && feats.len() != rows[0].len() {
            return Err(Error::Parse {
                what: format!("row has {} features, expected {}", feats.len(), rows[0].len()),
                pos: format!("{}:{line}", path.display()),
            });
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            what: "empty file".into(),
            pos: path.display().to_string(),
        });
    }
    let dim = rows[0].len();
    let n = rows.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let classes = labels.iter().copied().max().unwrap() + 1;
    Ok(Dataset::Classification {
        x: Tensor::new(vec![n, dim], data)?,
        y: labels,
        classes,
    })
}

fn read_u32_be(bytes: &[u8], at: usize, what: &str, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            what: format!("truncated {what}"),
            pos: format!("{} byte {at}", path.display()),
        })
}

/// IDX image loader: magic 0x00000803 (u8 images, dims n x rows x cols).
/// Pixels map to [0, 1]; an optional preset then normalizes per channel
/// (3-channel data only). Output samples are (1, rows, cols) single-channel
/// unless the magic declares a 4-D layout.
fn load_idx(images: &Path, labels: Option<&Path>, normalize: Option<NormPreset>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(images)?.read_to_end(&mut bytes)?;
    let magic = read_u32_be(&bytes, 0, "magic", images)?;
    let (dims, channels) = match magic {
        0x0000_0803 => (3usize, 1usize),
        0x0000_0804 => (4usize, 0usize), // channel count read from header
        _ => {
            return Err(Error::Parse {
                what: format!("bad IDX magic {magic:#010x}"),
                pos: format!("{} byte 0", images.display()),
            })
        }
    };
    let mut sizes = Vec::new();
    for d in 0..dims {
        sizes.push(read_u32_be(&bytes, 4 + 4 * d, "dimension", images)? as usize);
    }
    let (n, c, h, w) = if dims == 3 {
        (sizes[0], channels, sizes[1], sizes[2])
    } else {
        (sizes[0], sizes[1], sizes[2], sizes[3])
    };
    let header = 4 + 4 * dims;
    let expect = n * c * h * w;
    if bytes.len() < header + expect {
        return Err(Error::Parse {
            what: format!("payload holds {} bytes, header promises {}", bytes.len() - header, expect),
            pos: format!("{} byte {header}", images.display()),
        });
    }
    let (mean, std) = match normalize {
        Some(preset) => {
            if c != 3 {
                return Err(Error::Argument(format!(
                    "normalization preset needs 3 channels, data has {c}"
                )));
            }
            preset.constants()
        }
        None => ([0.0; 3], [1.0; 3]),
    };
    let mut x = Tensor::zeros(&[n, c, h, w]);
    for i in 0..expect {
        let ch = (i / (h * w)) % c;
        let v = bytes[header + i] as f64 / 255.0;
        x.data_mut()[i] = if normalize.is_some() {
            (v - mean[ch]) / std[ch]
        } else {
            v
        };
    }
    let y = match labels {
        Some(lp) => {
            let mut lb = Vec::new();
            File::open(lp)?.read_to_end(&mut lb)?;
            let lmagic = read_u32_be(&lb, 0, "label magic", lp)?;
            if lmagic != 0x0000_0801 {
                return Err(Error::Parse {
                    what: format!("bad IDX label magic {lmagic:#010x}"),
                    pos: format!("{} byte 0", lp.display()),
                });
            }
            let ln = read_u32_be(&lb, 4, "label count", lp)? as usize;
            if ln != n {
                return Err(Error::Parse {
                    what: format!("{ln} labels for {n} images"),
                    pos: lp.display().to_string(),
                });
            }
            lb[8..8 + n].iter().map(|&b| b as usize).collect()
        }
        None => vec![0usize; n],
    };
    let classes = y.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset::Classification { x, y, classes })
}

/// Applies a normalization preset to flat (x - mean) / std per channel.
/// Exposed for tests of the shipped constants.
pub fn normalize_channel(value: f64, channel: usize, preset: NormPreset) -> f64 {
    let (mean, std) = preset.constants();
    (value - mean[channel]) / std[channel]
}
