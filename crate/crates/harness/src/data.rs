//! Dataset ingestion: IDX files and seeded synthetic classification tasks.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use trady_core::Tensor4;

use crate::error::{HarnessError, Result};

/// Labelled images, `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor4, Vec<usize>) {
        let [_, c, h, w] = self.images.shape();
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend_from_slice(self.images.outer(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor4::from_vec([idx.len(), c, h, w], data).expect("batch length"), labels)
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let [n, c, h, w] = self.images.shape();
        let count = (n * h * w) as f64;
        (0..c)
            .map(|ch| {
                let vals = (0..n).flat_map(|i| self.images.plane(i, ch).iter());
                let mean = vals.clone().sum::<f64>() / count;
                let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                (mean, var.sqrt().max(1e-12))
            })
            .collect()
    }

    pub fn standardize(&mut self, stats: &[(f64, f64)]) {
        let [n, c, h, w] = self.images.shape();
        let hw = h * w;
        let data = self.images.data_mut();
        for i in 0..n {
            for (ch, &(m, s)) in stats.iter().enumerate().take(c) {
                let start = (i * c + ch) * hw;
                for v in &mut data[start..start + hw] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

/// Index batches of one epoch, shuffled by `rng`. The last batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Contents of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> std::result::Result<IdxArray, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes[2] != 0x08 {
        return Err(IdxError::UnsupportedDtype(bytes[2]));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(IdxError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    let expected = header + payload;
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported IDX dtype code {0:#04x} (only unsigned byte is supported)")]
    UnsupportedDtype(u8),
    #[error("IDX file truncated or oversized: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX shape {0:?} is not usable here")]
    Shape(Vec<usize>),
}

fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    parse_idx(&bytes).map_err(|source| HarnessError::Idx {
        path: path.to_path_buf(),
        source,
    })
}

/// Images file: `[N, H, W]` (one channel) or `[N, C, H, W]`, scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Tensor4> {
    let arr = read_idx(path)?;
    let shape = match arr.dims[..] {
        [n, h, w] => [n, 1, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(HarnessError::Idx {
                path: path.to_path_buf(),
                source: IdxError::Shape(arr.dims),
            })
        }
    };
    let data = arr.data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor4::from_vec(shape, data)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let arr = read_idx(path)?;
    if arr.dims.len() != 1 {
        return Err(HarnessError::Idx {
            path: path.to_path_buf(),
            source: IdxError::Shape(arr.dims),
        });
    }
    Ok(arr.data.iter().map(|&b| b as usize).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

pub fn load_idx_dataset(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let images_t = load_idx_images(images)?;
    let labels_v = load_idx_labels(labels)?;
    if images_t.shape()[0] != labels_v.len() {
        return Err(HarnessError::Config(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            images_t.shape()[0],
            labels.display(),
            labels_v.len()
        )));
    }
    let classes = classes.unwrap_or_else(|| labels_v.iter().max().map_or(0, |m| m + 1));
    Ok(Dataset {
        images: images_t,
        labels: labels_v,
        classes,
    })
}

/// A seeded synthetic classification task. Each class has a smooth template
/// made of three Gaussian bumps; samples are the template plus iid noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_seed: u64,
    pub classes: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub noise: f64,
}

fn default_test_per_class() -> usize {
    50
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            task_seed: 0,
            classes: 4,
            samples_per_class: 64,
            test_per_class: 50,
            shape: [3, 12, 12],
            noise: 1.0,
        }
    }
}

impl SyntheticTask {
    /// Noise-free class templates, `[K, C, H, W]`.
    pub fn templates(&self) -> Tensor4 {
        let [c, h, w] = self.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        let mut out = Tensor4::zeros([self.classes, c, h, w]);
        for k in 0..self.classes {
            for _ in 0..3 {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let width = rng.random_range(0.1..0.3) * h.max(w) as f64;
                let amps: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                for (ch, amp) in amps.iter().enumerate() {
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            let v = out.get([k, ch, y, x]) + amp * (-d2 / (2.0 * width * width)).exp();
                            out.set([k, ch, y, x], v);
                        }
                    }
                }
            }
        }
        out
    }

    fn sample(&self, templates: &Tensor4, per_class: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let [c, h, w] = self.shape;
        let n = per_class * self.classes;
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..per_class {
            for k in 0..self.classes {
                for &t in templates.outer(k) {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(t + self.noise * noise);
                }
                labels.push(k);
            }
        }
        Dataset {
            images: Tensor4::from_vec([n, c, h, w], data).expect("synthetic length"),
            labels,
            classes: self.classes,
        }
    }

    /// Train and test splits drawn from independent noise streams.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes < 2 {
            return Err(HarnessError::Config(format!(
                "a synthetic task needs at least 2 classes, got {}",
                self.classes
            )));
        }
        let templates = self.templates();
        let mut train_rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        train_rng.set_stream(1);
        let mut test_rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        test_rng.set_stream(2);
        Ok((
            self.sample(&templates, self.samples_per_class, &mut train_rng),
            self.sample(&templates, self.test_per_class, &mut test_rng),
        ))
    }
}

/// Quantizes images to bytes for IDX export, mapping `[lo, hi]` onto `0..=255`.
pub fn quantize(images: &Tensor4, lo: f64, hi: f64) -> Vec<u8> {
    images
        .data()
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes a train/test pair as IDX files in `dir`, quantizing both with the
/// training set's value range.
pub fn export_idx(train: &Dataset, test: &Dataset, dir: &Path) -> Result<IdxPaths> {
    if train.classes.max(test.classes) > 256 {
        return Err(HarnessError::Config(format!("{} classes do not fit byte labels", train.classes)));
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let (lo, hi) = train
        .images
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo, lo + 1.0) };
    let paths = IdxPaths {
        train_images: dir.join("train-images.idx"),
        train_labels: dir.join("train-labels.idx"),
        test_images: dir.join("test-images.idx"),
        test_labels: dir.join("test-labels.idx"),
    };
    let write = |path: &Path, bytes: Vec<u8>| std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e));
    for (set, images, labels) in [(train, &paths.train_images, &paths.train_labels), (test, &paths.test_images, &paths.test_labels)] {
        let [n, c, h, w] = set.images.shape();
        let dims = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
        write(images, encode_idx(&dims, &quantize(&set.images, lo, hi)))?;
        let l: Vec<u8> = set.labels.iter().map(|&y| y as u8).collect();
        write(labels, encode_idx(&[n], &l))?;
    }
    Ok(paths)
}
