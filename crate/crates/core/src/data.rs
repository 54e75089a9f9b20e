//! Datasets: CIFAR-10 binary files and planted-rule synthetic data.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::net::derive_seed;
use crate::runtime::Batch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_DIMS: [usize; 3] = [3, 32, 32];
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    Length { path: PathBuf, len: usize, record: usize },
    #[error("{path}: record {record} has label {label}, expected 0..=9")]
    Label { path: PathBuf, record: usize, label: u8 },
    #[error("{0}")]
    Invalid(String),
}

/// Images stored as `f32` in `[0, 1]`, channel-major per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: Vec<usize>,
    classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: Vec<usize>, classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self, DataError> {
        let per: usize = dims.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} pixels do not form {} examples of {:?}",
                pixels.len(),
                labels.len(),
                dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            dims,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Gathers the examples at `indices` into a batch tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Batch<T> {
        let mut data = Vec::with_capacity(indices.len() * self.example_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::of(p as f64)));
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(&self.dims);
        Batch {
            inputs: Tensor::from_vec(dims, data).expect("indices are non-empty"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Parses concatenated CIFAR-10 records: one label byte followed by
/// 3x32x32 pixel bytes (R, G, B planes, each row-major).
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset, DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Length {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(DataError::Label {
                path: path.to_path_buf(),
                record: i,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(CIFAR_DIMS.to_vec(), CIFAR_CLASSES, pixels, labels)
}

/// Loads one CIFAR-10 binary file, or every `*.bin` file of a directory in
/// name order (so `data_batch_1.bin` .. `data_batch_5.bin` concatenate).
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut all: Option<Dataset> = None;
    for f in files {
        let bytes = fs::read(&f).map_err(|source| DataError::Io {
            path: f.clone(),
            source,
        })?;
        let part = parse_cifar10(&bytes, &f)?;
        match &mut all {
            None => all = Some(part),
            Some(d) => {
                d.pixels.extend(part.pixels);
                d.labels.extend(part.labels);
            }
        }
    }
    Ok(all.unwrap_or(Dataset {
        dims: CIFAR_DIMS.to_vec(),
        classes: CIFAR_CLASSES,
        pixels: Vec::new(),
        labels: Vec::new(),
    }))
}

/// Writes a 3x32x32 dataset in CIFAR-10 binary layout. Pixels are rounded
/// to the nearest of the 256 byte levels.
pub fn write_cifar10_binary(path: &Path, data: &Dataset) -> Result<(), DataError> {
    if data.dims != CIFAR_DIMS || data.classes > CIFAR_CLASSES {
        return Err(DataError::Invalid(format!(
            "CIFAR-10 records hold 3x32x32 images in 10 classes, dataset is {:?} in {}",
            data.dims, data.classes
        )));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        out.extend(data.image(i).iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `n` uniform images labeled by a planted linear rule:
/// `label = argmax_c w_c . (x - 0.5)` with Gaussian `w`.
pub fn generate_synthetic(n: usize, dims: &[usize], classes: usize, seed: u64) -> Dataset {
    let per: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5747]));
    let w: Vec<f64> = (0..classes * per).map(|_| rng.sample(StandardNormal)).collect();
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f32> = (0..per).map(|_| rng.gen::<f32>()).collect();
        let label = (0..classes)
            .map(|c| {
                let row = &w[c * per..(c + 1) * per];
                row.iter().zip(&x).map(|(a, &b)| a * (b as f64 - 0.5)).sum::<f64>()
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
            .0;
        pixels.extend(x);
        labels.push(label);
    }
    Dataset {
        dims: dims.to_vec(),
        classes,
        pixels,
        labels,
    }
}

/// Shuffles `0..n` with a seed derived from `(seed, epoch)` and cuts it into
/// `workers` disjoint contiguous shards of `n / workers` indices each.
pub fn epoch_shards(n: usize, workers: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xe90c, epoch]));
    order.shuffle(&mut rng);
    let per = n / workers.max(1);
    (0..workers).map(|w| order[w * per..(w + 1) * per].to_vec()).collect()
}
