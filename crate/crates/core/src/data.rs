//! Labeled datasets: MNIST (IDX), CIFAR-10 (binary batches) and a synthetic
//! Gaussian mixture used as a fast fixture.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn;
use crate::seed;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3072;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub x: Vec<f64>,
    pub y: usize,
}

/// Per-channel affine standardization `(raw - mean) / std`. Channels occupy
/// contiguous equal-length blocks of the input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    fn channel_len(&self, dim: usize) -> usize {
        dim / self.mean.len()
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        let block = self.channel_len(raw.len());
        raw.iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / block;
                (v - self.mean[c]) / self.std[c]
            })
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        let block = self.channel_len(x.len());
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / block;
                v * self.std[c] + self.mean[c]
            })
            .collect()
    }
}

/// Which representation of an input the input-norm score is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputSpace {
    /// What the model sees.
    #[default]
    Standardized,
    /// Pixels in `[0, 1]` before standardization.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub split: Split,
    pub input_dim: usize,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(
        examples: Vec<Example>,
        num_classes: usize,
        split: Split,
        input_dim: usize,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(examples.len());
        for ex in &examples {
            if ex.x.len() != input_dim {
                return Err(Error::DimensionMismatch {
                    context: "example input",
                    expected: input_dim,
                    got: ex.x.len(),
                });
            }
            if ex.y >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class: ex.y,
                    classes: num_classes,
                });
            }
            if !seen.insert(ex.id) {
                return Err(Error::InvalidConfig(format!("duplicate example id {}", ex.id)));
            }
        }
        Ok(Dataset {
            examples,
            num_classes,
            split,
            input_dim,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            examples: self.examples.iter().take(n).cloned().collect(),
            ..self.shallow()
        }
    }

    /// Examples at the given positions, in the order given.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        Dataset {
            examples: positions.iter().map(|&i| self.examples[i].clone()).collect(),
            ..self.shallow()
        }
    }

    fn shallow(&self) -> Dataset {
        Dataset {
            examples: Vec::new(),
            num_classes: self.num_classes,
            split: self.split,
            input_dim: self.input_dim,
            standardization: self.standardization.clone(),
        }
    }

    /// Input vector of example `i` in the requested space.
    pub fn input(&self, i: usize, space: InputSpace) -> Vec<f64> {
        let x = &self.examples[i].x;
        match (space, &self.standardization) {
            (InputSpace::Raw, Some(s)) => s.invert(x),
            _ => x.clone(),
        }
    }
}

/// `‖x_i‖₂` for every example, in dataset order.
pub fn input_norms(ds: &Dataset, space: InputSpace) -> Vec<f64> {
    match (space, &ds.standardization) {
        (InputSpace::Raw, Some(_)) => (0..ds.len())
            .map(|i| nn::sq_norm(&ds.input(i, space)).sqrt())
            .collect(),
        _ => ds.examples.iter().map(|e| nn::sq_norm(&e.x).sqrt()).collect(),
    }
}

/// Reads a whole file, transparently inflating it when it starts with the
/// gzip magic bytes.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

struct Idx {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse_idx(path: &Path, expected_magic: u32) -> Result<Idx> {
    let bytes = read_maybe_gzip(path)?;
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    let be_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| truncated(format!("header ends at byte {}", bytes.len())))
    };
    let magic = be_u32(0)?;
    if magic != expected_magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: expected_magic,
            found: magic,
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|k| be_u32(4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    let have = bytes.len() - header;
    if have < need {
        return Err(truncated(format!("expected {need} data bytes, found {have}")));
    }
    let payload = bytes[header..header + need].to_vec();
    Ok(Idx { dims, payload })
}

/// Loads an MNIST image/label pair. Pixels are scaled to `[0, 1]` and then
/// standardized with the fixed MNIST mean and std.
pub fn load_mnist(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx(images_path, IDX_IMAGES_MAGIC)?;
    let labels = parse_idx(labels_path, IDX_LABELS_MAGIC)?;
    let (n_img, n_lab) = (images.dims[0], labels.dims[0]);
    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let dim: usize = images.dims[1..].iter().product();
    let standardization = Standardization {
        mean: vec![MNIST_MEAN],
        std: vec![MNIST_STD],
    };
    let mut examples = Vec::with_capacity(n_img);
    for (i, (pixels, &label)) in images
        .payload
        .chunks_exact(dim)
        .zip(&labels.payload)
        .enumerate()
    {
        if label > 9 {
            return Err(Error::LabelOutOfRange {
                path: labels_path.to_path_buf(),
                record: i,
                label,
            });
        }
        let x = pixels
            .iter()
            .map(|&p| (f64::from(p) / 255.0 - MNIST_MEAN) / MNIST_STD)
            .collect();
        examples.push(Example {
            id: i,
            x,
            y: usize::from(label),
        });
    }
    Ok(Dataset {
        examples,
        num_classes: 10,
        split,
        input_dim: dim,
        standardization: Some(standardization),
    })
}

/// Locates `<prefix>-images-idx3-ubyte[.gz]` and the matching labels file in
/// `dir` (or `dir/mnist`).
pub fn mnist_paths(dir: &Path, split: Split) -> Option<(PathBuf, PathBuf)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |stem: String| {
        [dir.join("mnist"), dir.to_path_buf()]
            .into_iter()
            .flat_map(|d| [d.join(format!("{stem}.gz")), d.join(&stem)])
            .find(|p| p.is_file())
    };
    Some((
        find(format!("{prefix}-images-idx3-ubyte"))?,
        find(format!("{prefix}-labels-idx1-ubyte"))?,
    ))
}

/// Loads and concatenates CIFAR-10 binary batches, standardizing each colour
/// plane with the fixed per-channel constants. Ids follow concatenation order.
pub fn load_cifar10(batch_paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let standardization = Standardization {
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    };
    let mut examples = Vec::new();
    for path in batch_paths {
        let bytes = read_maybe_gzip(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Truncated {
                path: path.clone(),
                detail: format!(
                    "length {} is not a multiple of {CIFAR_RECORD}",
                    bytes.len()
                ),
            });
        }
        for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0];
            if label > 9 {
                return Err(Error::LabelOutOfRange {
                    path: path.clone(),
                    record,
                    label,
                });
            }
            let raw: Vec<f64> = chunk[1..].iter().map(|&p| f64::from(p) / 255.0).collect();
            examples.push(Example {
                id: examples.len(),
                x: standardization.apply(&raw),
                y: usize::from(label),
            });
        }
    }
    Ok(Dataset {
        examples,
        num_classes: 10,
        split,
        input_dim: 3072,
        standardization: Some(standardization),
    })
}

/// Standard CIFAR-10 binary batch file names under `dir`
/// (or `dir/cifar-10-batches-bin`).
pub fn cifar10_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    let base = {
        let nested = dir.join("cifar-10-batches-bin");
        if nested.is_dir() {
            nested
        } else {
            dir.to_path_buf()
        }
    };
    match split {
        Split::Train => (1..=5)
            .map(|i| base.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![base.join("test_batch.bin")],
    }
}

const CLASS_DIRECTION_SEED: u64 = 0x5EED_C1A5_5D1E_0001;
const CLASS_SEPARATION: f64 = 3.0;

/// Class mean for the synthetic mixture: a fixed unit direction per class,
/// independent of the sampling seed, scaled by the separation.
fn class_mean(class: usize, dim: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed::combine(CLASS_DIRECTION_SEED, &[class as u64]));
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = nn::sq_norm(&v).sqrt();
    v.into_iter().map(|c| CLASS_SEPARATION * c / norm).collect()
}

/// `per_class` draws from `Normal(μ_c, I)` for each class, grouped by class.
pub fn synthetic_gaussian(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidConfig(
            "synthetic dataset counts must be >= 1".into(),
        ));
    }
    let mut rng = seed::rng(seed);
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let mu = class_mean(c, dim);
        for _ in 0..per_class {
            let x = mu
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            examples.push(Example {
                id: examples.len(),
                x,
                y: c,
            });
        }
    }
    Dataset::new(examples, num_classes, split, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn mnist_small_roundtrip_and_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 4];
        pixels.extend_from_slice(&[255, 0, 128, 1]);
        let img = write(dir.path(), "img", &idx_bytes(0x803, &[2, 2, 2], &pixels));
        let lab = write(dir.path(), "lab", &idx_bytes(0x801, &[2], &[3, 9]));
        let ds = load_mnist(&img, &lab, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim, 4);
        assert_eq!(ds.examples[1].y, 9);
        assert_eq!(ds.examples[1].id, 1);
        for v in &ds.examples[0].x {
            assert!((v - (-0.1307 / 0.3081)).abs() < 1e-12);
            assert!((v + 0.42421).abs() < 1e-5);
        }
        // de-standardizing recovers raw pixels
        let raw = ds.input(1, InputSpace::Raw);
        for (r, p) in raw.iter().zip([255u8, 0, 128, 1]) {
            assert!((r - f64::from(p) / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mnist_gzip_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let plain = idx_bytes(0x803, &[1, 1, 2], &[10, 20]);
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&plain).unwrap();
        let img = write(dir.path(), "img.gz", &gz.finish().unwrap());
        let lab = write(dir.path(), "lab", &idx_bytes(0x801, &[1], &[4]));
        let ds = load_mnist(&img, &lab, Split::Test).unwrap();
        assert_eq!(ds.examples[0].y, 4);
        assert_eq!(ds.split, Split::Test);
    }

    #[test]
    fn mnist_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &idx_bytes(0x803, &[2, 1, 2], &[0; 4]));
        let wrong = write(dir.path(), "lab_wrong", &idx_bytes(0x803, &[2], &[0, 1]));
        let err = load_mnist(&img, &wrong, Split::Train).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        let short = write(dir.path(), "lab_short", &idx_bytes(0x801, &[3], &[0, 1, 2]));
        assert!(matches!(
            load_mnist(&img, &short, Split::Train),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));

        let cut = write(dir.path(), "img_cut", &idx_bytes(0x803, &[2, 1, 2], &[0; 3]));
        let lab = write(dir.path(), "lab", &idx_bytes(0x801, &[2], &[0, 1]));
        assert!(matches!(
            load_mnist(&cut, &lab, Split::Train),
            Err(Error::Truncated { .. })
        ));
        let header_only = write(dir.path(), "img_hdr", &[0, 0, 8]);
        assert!(matches!(
            load_mnist(&header_only, &lab, Split::Train),
            Err(Error::Truncated { .. })
        ));
    }

    fn cifar_record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, 3072));
        r
    }

    #[test]
    fn cifar_loads_and_standardizes_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = cifar_record(2, 255);
        a.extend(cifar_record(7, 0));
        let p1 = write(dir.path(), "b1.bin", &a);
        let p2 = write(dir.path(), "b2.bin", &cifar_record(0, 51));
        let ds = load_cifar10(&[p1, p2], Split::Train).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim, 3072);
        assert_eq!(
            ds.examples.iter().map(|e| (e.id, e.y)).collect::<Vec<_>>(),
            vec![(0, 2), (1, 7), (2, 0)]
        );
        let x = &ds.examples[0].x;
        for c in 0..3 {
            let want = (1.0 - CIFAR_MEAN[c]) / CIFAR_STD[c];
            assert!((x[c * 1024] - want).abs() < 1e-12);
            assert!((x[c * 1024 + 1023] - want).abs() < 1e-12);
        }
        let raw = ds.input(2, InputSpace::Raw);
        assert!(raw.iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn cifar_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = cifar_record(1, 0);
        rec.pop();
        let p = write(dir.path(), "cut.bin", &rec);
        let err = load_cifar10(&[p], Split::Train).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let p = write(dir.path(), "bad.bin", &cifar_record(12, 0));
        let err = load_cifar10(&[p], Split::Train).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic_and_grouped() {
        let a = synthetic_gaussian(2, 2, 5, 7, Split::Train).unwrap();
        let b = synthetic_gaussian(2, 2, 5, 7, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let labels: Vec<usize> = a.examples.iter().map(|e| e.y).collect();
        assert_eq!(labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_ne!(a, synthetic_gaussian(2, 2, 5, 8, Split::Train).unwrap());
        assert!(synthetic_gaussian(0, 2, 5, 7, Split::Train).is_err());
    }

    #[test]
    fn class_means_have_fixed_norm() {
        for c in 0..5 {
            let m = class_mean(c, 20);
            assert!((nn::sq_norm(&m).sqrt() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn input_norm_examples() {
        let ds = Dataset::new(
            vec![
                Example { id: 0, x: vec![0.0, 0.0], y: 0 },
                Example { id: 1, x: vec![3.0, 4.0], y: 1 },
            ],
            2,
            Split::Train,
            2,
        )
        .unwrap();
        assert_eq!(input_norms(&ds, InputSpace::Standardized), vec![0.0, 5.0]);
        // no standardization recorded: raw == standardized
        assert_eq!(input_norms(&ds, InputSpace::Raw), vec![0.0, 5.0]);
    }

    #[test]
    fn dataset_validation() {
        let ex = |id, y| Example { id, x: vec![0.0], y };
        assert!(Dataset::new(vec![ex(0, 2)], 2, Split::Train, 1).is_err());
        assert!(Dataset::new(vec![ex(0, 0), ex(0, 1)], 2, Split::Train, 1).is_err());
        assert!(Dataset::new(vec![ex(0, 0)], 2, Split::Train, 2).is_err());
    }
}
