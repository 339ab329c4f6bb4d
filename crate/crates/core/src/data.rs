//! Dataset loading (CIFAR-10 binary, MNIST IDX, synthetic) and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor4};

pub const NUM_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

/// Images (NCHW, standardized per channel) with their class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor4<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.n(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.images.c(), self.images.h(), self.images.w())
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_items(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(images: &Tensor4<f32>) -> Self {
        let (n, c, hw) = (images.n(), images.c(), images.h() * images.w());
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..n {
            for (ch, plane) in images.item(i).chunks(hw).enumerate() {
                for &v in plane {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (n * hw).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn apply(&self, images: &mut Tensor4<f32>) {
        let (c, hw) = (images.c(), images.h() * images.w());
        for (j, plane) in images.data_mut().chunks_mut(hw).enumerate() {
            let ch = j % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in plane {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
}

/// Standardizes both splits with statistics of the training split.
pub fn normalize(train: &mut Dataset, test: &mut Dataset) -> ChannelStats {
    let stats = ChannelStats::compute(&train.images);
    stats.apply(&mut train.images);
    stats.apply(&mut test.images);
    stats
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| data_err(path, format!("cannot read: {e}")))
}

/// Raw pixels and labels of one CIFAR-10 binary batch file, unnormalized.
pub fn read_cifar_file(path: &Path) -> Result<(Tensor4<f32>, Vec<usize>)> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let expected = bytes.len().div_ceil(CIFAR_RECORD).max(1) * CIFAR_RECORD;
        return Err(data_err(
            path,
            format!(
                "size {} bytes is not a multiple of the {CIFAR_RECORD}-byte record (expected {expected} bytes)",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= NUM_CLASSES {
            return Err(data_err(path, format!("record {i}: label {label} out of range")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor4::from_vec(n, 3, 32, 32, Layout::Nchw, pixels)?, labels))
}

fn concat(parts: Vec<(Tensor4<f32>, Vec<usize>)>) -> Result<Dataset> {
    let n: usize = parts.iter().map(|p| p.1.len()).sum();
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let (mut c, mut h, mut w) = (0, 0, 0);
    for (img, lab) in parts {
        (c, h, w) = (img.c(), img.h(), img.w());
        data.extend(img.into_data());
        labels.extend(lab);
    }
    Dataset::new(Tensor4::from_vec(n, c, h, w, Layout::Nchw, data)?, labels)
}

/// Loads CIFAR-10 batch files, checking each holds `expected_records`
/// when given. The result is normalized with train-split statistics.
pub fn load_cifar10_files(
    train_files: &[PathBuf],
    test_file: &Path,
    expected_records: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let load = |p: &Path| -> Result<(Tensor4<f32>, Vec<usize>)> {
        let part = read_cifar_file(p)?;
        if let Some(want) = expected_records {
            if part.1.len() != want {
                return Err(data_err(
                    p,
                    format!("{} records, expected {want} ({} bytes)", part.1.len(), want * CIFAR_RECORD),
                ));
            }
        }
        Ok(part)
    };
    let train = train_files.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let mut train = concat(train)?;
    let mut test = concat(vec![load(test_file)?])?;
    normalize(&mut train, &mut test);
    Ok((train, test))
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    load_cifar10_files(&train, &dir.join("test_batch.bin"), Some(CIFAR_RECORDS_PER_FILE))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX file of unsigned bytes; returns dimensions and payload.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read(path)?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(data_err(path, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(data_err(path, format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(data_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim).map(|d| be_u32(&bytes, 4 + 4 * d) as usize).collect();
    let want: usize = dims.iter().product();
    if bytes.len() - header != want {
        return Err(data_err(
            path,
            format!("payload is {} bytes, expected {want} ({} bytes total)", bytes.len() - header, header + want),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn load_mnist_split(images: &Path, labels: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images)?;
    if dims.len() != 3 {
        return Err(data_err(images, format!("expected 3 dimensions, found {}", dims.len())));
    }
    let (ldims, lab) = read_idx(labels)?;
    if ldims.len() != 1 || ldims[0] != dims[0] {
        return Err(data_err(labels, format!("label count {:?} does not match {} images", ldims, dims[0])));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let t = Tensor4::from_vec(dims[0], 1, dims[1], dims[2], Layout::Nchw, data)?;
    Dataset::new(t, lab.into_iter().map(usize::from).collect())
        .map_err(|e| data_err(labels, e.to_string()))
}

/// Loads the four standard MNIST IDX files from `dir`, normalized.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = load_mnist_split(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let mut test = load_mnist_split(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    normalize(&mut train, &mut test);
    Ok((train, test))
}

/// Seeded class-pattern images: each class has a fixed random prototype,
/// and each image is its class prototype plus Gaussian noise.
pub fn synthetic(
    n_train: usize,
    n_test: usize,
    shape: (usize, usize, usize),
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (c, h, w) = shape;
    let size = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // smooth prototypes: a coarse 4x4 grid upsampled, so crops and flips keep structure
    let protos: Vec<Vec<f32>> = (0..NUM_CLASSES)
        .map(|_| {
            let coarse: Vec<f32> = (0..c * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut p = vec![0.0; size];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        p[(ch * h + y) * w + x] = coarse[ch * 16 + (y * 4 / h) * 4 + x * 4 / w];
                    }
                }
            }
            p
        })
        .collect();
    let dist = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut make = |n: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * size);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..NUM_CLASSES);
            labels.push(label);
            data.extend(protos[label].iter().map(|&v| v + dist.sample(&mut rng) as f32));
        }
        Dataset::new(Tensor4::from_vec(n, c, h, w, Layout::Nchw, data)?, labels)
    };
    let mut train = make(n_train)?;
    let mut test = make(n_test)?;
    normalize(&mut train, &mut test);
    Ok((train, test))
}

/// Indices retained by subset mode: the first `size` entries of a seeded
/// shuffle of `0..n`, independent of the epoch.
pub fn subset_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    idx.truncate(size.min(n));
    idx
}

/// Sample order for one epoch, grouped into full batches; the partial
/// final batch is dropped.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    subset: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    let keep = subset.unwrap_or(n);
    if batch_size == 0 || batch_size > keep || keep > n {
        return Err(Error::invalid(format!(
            "need 0 < batch_size ({batch_size}) <= subset ({keep}) <= dataset size ({n})"
        )));
    }
    let mut idx = match subset {
        Some(s) => subset_indices(n, s, seed),
        None => (0..n).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    Ok(idx.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// One mini-batch gathered from a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
}

/// Iterator over an epoch's batches.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.order.next()?;
        let d = self.data.select(&idx);
        Some(Batch {
            images: d.images,
            labels: d.labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    subset: Option<usize>,
) -> Result<Batches<'_>> {
    let order = batch_indices(data.len(), batch_size, seed, epoch, subset)?;
    Ok(Batches {
        data,
        order: order.into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn cifar_bytes(records: usize) -> Vec<u8> {
        (0..records)
            .flat_map(|r| {
                let mut rec = vec![(r % 10) as u8];
                rec.extend((0..3072).map(|i| ((i + r) % 256) as u8));
                rec
            })
            .collect()
    }

    #[test]
    fn single_record_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = cifar_bytes(1);
        bytes[0] = 7;
        let p = write(dir.path(), "one.bin", &bytes);
        let (img, labels) = read_cifar_file(&p).unwrap();
        assert_eq!(img.dims(), [1, 3, 32, 32]);
        assert_eq!(labels, vec![7]);
        // channel-major: second channel starts at byte 1 + 1024
        assert_eq!(img.get(0, 1, 0, 0), bytes[1 + 1024] as f32 / 255.0);
        assert_eq!(img.get(0, 2, 31, 31), bytes[3072] as f32 / 255.0);
    }

    #[test]
    fn full_batch_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "b.bin", &cifar_bytes(10_000));
        let (img, labels) = read_cifar_file(&p).unwrap();
        assert_eq!(img.n(), 10_000);
        assert_eq!(labels.len(), 10_000);
    }

    #[test]
    fn truncated_file_names_path_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "short.bin", &vec![0u8; 3072]);
        let msg = read_cifar_file(&p).unwrap_err().to_string();
        assert!(msg.contains("short.bin"), "{msg}");
        assert!(msg.contains("3073"), "{msg}");
    }

    #[test]
    fn missing_file_and_record_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Data { .. })));
        let a = write(dir.path(), "a.bin", &cifar_bytes(3));
        let t = write(dir.path(), "t.bin", &cifar_bytes(2));
        let err = load_cifar10_files(&[a.clone()], &t, Some(3)).unwrap_err();
        assert!(err.to_string().contains("t.bin"));
        let (train, test) = load_cifar10_files(&[a.clone(), a], &t, None).unwrap();
        assert_eq!((train.len(), test.len()), (6, 2));
    }

    #[test]
    fn bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = cifar_bytes(1);
        bytes[0] = 10;
        let p = write(dir.path(), "x.bin", &bytes);
        assert!(read_cifar_file(&p).is_err());
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let (train, test) = synthetic(200, 50, (3, 8, 8), 0.5, 1).unwrap();
        let stats = ChannelStats::compute(&train.images);
        for ch in 0..3 {
            assert!(stats.mean[ch].abs() < 1e-5);
            assert!((stats.std[ch] - 1.0).abs() < 1e-4);
        }
        // test split shares the transform, so its statistics are near but not exactly 0/1
        let ts = ChannelStats::compute(&test.images);
        assert!(ts.mean.iter().all(|m| m.abs() < 0.3));
        assert!(ts.mean.iter().any(|m| m.abs() > 1e-6));
    }

    #[test]
    fn mnist_idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let idx3 = |n: u32| {
            let mut b = vec![0, 0, 8, 3];
            for d in [n, 28, 28] {
                b.extend(d.to_be_bytes());
            }
            b.extend((0..n as usize * 784).map(|i| (i % 251) as u8));
            b
        };
        let idx1 = |n: u32| {
            let mut b = vec![0, 0, 8, 1];
            b.extend(n.to_be_bytes());
            b.extend((0..n as u8).map(|i| i % 10));
            b
        };
        write(dir.path(), "train-images-idx3-ubyte", &idx3(5));
        write(dir.path(), "train-labels-idx1-ubyte", &idx1(5));
        write(dir.path(), "t10k-images-idx3-ubyte", &idx3(2));
        write(dir.path(), "t10k-labels-idx1-ubyte", &idx1(3));
        // label count mismatch in test split
        assert!(load_mnist(dir.path()).is_err());
        write(dir.path(), "t10k-labels-idx1-ubyte", &idx1(2));
        let (train, test) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.image_shape(), (1, 28, 28));
        assert_eq!((train.len(), test.len()), (5, 2));
        assert_eq!(train.labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batch_counts_and_uniqueness() {
        let order = batch_indices(1000, 128, 3, 0, None).unwrap();
        assert_eq!(order.len(), 7);
        let all: Vec<usize> = order.concat();
        let set: HashSet<usize> = all.iter().copied().collect();
        assert_eq!(set.len(), all.len());
        assert!(all.iter().all(|&i| i < 1000));
    }

    #[test]
    fn batch_order_is_seeded() {
        assert_eq!(
            batch_indices(500, 32, 9, 2, Some(300)).unwrap(),
            batch_indices(500, 32, 9, 2, Some(300)).unwrap()
        );
        assert_ne!(
            batch_indices(500, 32, 9, 1, None).unwrap(),
            batch_indices(500, 32, 9, 2, None).unwrap()
        );
    }

    #[test]
    fn subset_is_stable_across_epochs() {
        let kept: HashSet<usize> = subset_indices(1000, 256, 4).into_iter().collect();
        for epoch in 0..3 {
            let order = batch_indices(1000, 64, 4, epoch, Some(256)).unwrap();
            assert_eq!(order.len(), 4);
            let seen: HashSet<usize> = order.concat().into_iter().collect();
            assert_eq!(seen, kept);
        }
    }

    #[test]
    fn batch_preconditions() {
        assert!(batch_indices(100, 0, 0, 0, None).is_err());
        assert!(batch_indices(100, 64, 0, 0, Some(32)).is_err());
        assert!(batch_indices(100, 64, 0, 0, Some(200)).is_err());
    }

    #[test]
    fn batches_gather_matching_labels() {
        let (train, _) = synthetic(100, 10, (1, 4, 4), 0.1, 2).unwrap();
        let it = batches(&train, 16, 5, 0, None).unwrap();
        assert_eq!(it.len(), 6);
        let order = batch_indices(100, 16, 5, 0, None).unwrap();
        for (b, idx) in it.zip(order) {
            assert_eq!(b.images.dims(), [16, 1, 4, 4]);
            for (j, &i) in idx.iter().enumerate() {
                assert_eq!(b.labels[j], train.labels[i]);
                assert_eq!(b.images.item(j), train.images.item(i));
            }
        }
    }
}
