//! MNIST in IDX format, optionally gzipped, and mini-batching.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const N_CLASSES: usize = 10;

/// Images flattened to `[0, 1]` reals, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f64>,
    pub image_size: usize,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(pixels: Vec<f64>, image_size: usize, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != image_size * labels.len() {
            return Err(Error::IdxCountMismatch {
                images: pixels.len() / image_size.max(1),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= N_CLASSES) {
            return Err(Error::IdxLabel { index, label });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            pixels,
            image_size,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.image_size..(i + 1) * self.image_size]
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_size].to_vec(),
            image_size: self.image_size,
            labels: self.labels[..n].to_vec(),
        }
    }

    /// `(x, one-hot y)` pairs for the given indices.
    pub fn samples(&self, indices: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
        indices
            .iter()
            .map(|&i| (self.image(i).to_vec(), one_hot(self.labels[i])))
            .collect()
    }
}

pub fn one_hot(label: u8) -> Vec<f64> {
    let mut v = vec![0.0; N_CLASSES];
    v[label as usize] = 1.0;
    v
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(header);
    if available < len {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: len,
            found: available,
        });
    }
    Ok(&bytes[header..header + len])
}

/// Raw image bytes and the per-image size.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize)> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, IMAGE_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let data = payload(&bytes, 16, n * rows * cols, path)?;
    Ok((data.to_vec(), rows * cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, LABEL_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, n, path)?.to_vec())
}

/// Parse an image file and a label file; pixels are divided by 255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (raw, size) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    let n_images = raw.len() / size.max(1);
    if n_images != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: n_images,
            labels: labels.len(),
        });
    }
    let pixels = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(pixels, size, labels)
}

/// Which half of MNIST to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

/// Load one split from a directory holding the standard MNIST file names.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    load_mnist_idx(&images, &labels)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let data = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// Write a dataset as an IDX image/label pair (square images). Pixels are
/// stored as `round(255 · p)`; a `.gz` extension compresses the file.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let side = (dataset.image_size as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == dataset.image_size {
        (side, side)
    } else {
        (1, dataset.image_size)
    };
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.pixels.len());
    for v in [IMAGE_MAGIC, n, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(dataset.pixels.iter().map(|p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    for v in [LABEL_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&dataset.labels);
    write_bytes(images_path, &img)?;
    write_bytes(labels_path, &lab)
}

/// One mini-batch of sample indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Shuffled partition of `0..n` into batches, deterministic per
/// `(seed, epoch)`. The last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidHyper("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Shuffle, epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch {
            indices: c.to_vec(),
        })
        .collect())
}

/// `n` distinct indices below `len` (all of them if `n >= len`), in draw
/// order, deterministic per seed.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Sampling, 0);
    rand::seq::index::sample(&mut rng, len, n.min(len)).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sampled_indices_are_distinct_and_reproducible() {
        let a = sample_indices(100, 20, 3);
        assert_eq!(a, sample_indices(100, 20, 3));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert!(a.iter().all(|&i| i < 100));
        assert_eq!(sample_indices(5, 9, 0).len(), 5);
    }

    fn tiny(n: usize) -> Dataset {
        let pixels = (0..n * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        Dataset::new(pixels, 4, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn white_image_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(vec![1.0; 784], 784, vec![7]).unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back.image(0).iter().all(|&p| p == 1.0));
        assert_eq!(back.labels, vec![7]);
    }

    #[test]
    fn round_trip_preserves_pixel_bytes() {
        let dir = tempfile::tempdir().unwrap();
        for ext in ["", ".gz"] {
            let ds = tiny(30);
            let ip = dir.path().join(format!("i{ext}"));
            let lp = dir.path().join(format!("l{ext}"));
            write_idx(&ds, &ip, &lp).unwrap();
            let (raw, _) = read_idx_images(&ip).unwrap();
            let back = load_mnist_idx(&ip, &lp).unwrap();
            assert_eq!(back, ds);
            let ip2 = dir.path().join(format!("i2{ext}"));
            write_idx(&back, &ip2, &dir.path().join(format!("l2{ext}"))).unwrap();
            assert_eq!(read_idx_images(&ip2).unwrap().0, raw);
        }
    }

    #[test]
    fn swapped_files_fail_on_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&tiny(3), &ip, &lp).unwrap();
        let err = load_mnist_idx(&ip, &ip).unwrap_err();
        assert!(matches!(err, Error::IdxMagic { expected: LABEL_MAGIC, found: IMAGE_MAGIC, .. }));
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&tiny(3), &ip, &lp).unwrap();
        let bytes = fs::read(&ip).unwrap();
        let cut = dir.path().join("cut");
        fs::write(&cut, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_mnist_idx(&cut, &lp), Err(Error::IdxTruncated { .. })));
        let lp2 = dir.path().join("l2");
        write_idx(&tiny(2), &dir.path().join("i2"), &lp2).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp2), Err(Error::IdxCountMismatch { .. })));
    }

    #[test]
    fn batches_partition_and_one_hot() {
        let b = batches(100, 20, 3, 0).unwrap();
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(batches(100, 20, 3, 0).unwrap(), b);
        assert_ne!(batches(100, 20, 3, 1).unwrap(), b);
        assert_eq!(batches(45, 20, 3, 0).unwrap().last().unwrap().indices.len(), 5);
        assert_eq!(one_hot(3), vec![0., 0., 0., 1., 0., 0., 0., 0., 0., 0.]);
        assert!(batches(10, 0, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn shuffle_is_a_permutation(n in 0usize..300, bs in 1usize..40, seed: u64, epoch in 0u64..50) {
            let mut all: Vec<usize> = batches(n, bs, seed, epoch)
                .unwrap()
                .into_iter()
                .flat_map(|b| b.indices)
                .collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
