//! MNIST IDX loading and deterministic mini-batching.
//!
//! IDX files are big-endian: a 4-byte magic (2051 for images, 2049 for
//! labels), a 4-byte item count, for images two more 4-byte extents (rows,
//! cols), then one unsigned byte per pixel or label. Gzip-compressed files
//! are detected by their header and inflated transparently.
//!
//! Pixels are scaled to `[0, 1]` and standardized with the training-set
//! mean [`PIXEL_MEAN`] and standard deviation [`PIXEL_STD`].
//!
//! Shuffling uses ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`; independent streams are split off a master
//! seed with [`derive_seed`], a SplitMix64 mix of (seed, purpose, index).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const PIXEL_MEAN: f64 = 0.1307;
pub const PIXEL_STD: f64 = 0.3081;
pub const CLASSES: usize = 10;

/// Images `[N,1,H,W]` of standardized pixels and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 || n != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: images.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_outer(0, n).expect("in range"),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.slice_outer(start, end)?,
            labels: self
                .labels
                .get(start..end)
                .ok_or_else(|| {
                    Error::invalid(format!("sample range {start}..{end} out of bounds"))
                })?
                .to_vec(),
        })
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            field,
            detail: format!(
                "file ends at byte {} before the header is complete",
                bytes.len()
            ),
        })
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, path, "magic")?;
    if magic != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            field: "magic",
            detail: format!(
                "expected {expected} (0x{expected:08x}), found {magic} (0x{magic:08x})"
            ),
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            field: "payload",
            detail: format!(
                "header promises {len} bytes after offset {offset}, file has {}",
                bytes.len().saturating_sub(offset)
            ),
        })
}

/// Raw pixel bytes of an IDX image file: `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, path, IMAGES_MAGIC)?;
    let count = be_u32(&bytes, 4, path, "count")? as usize;
    let rows = be_u32(&bytes, 8, path, "rows")? as usize;
    let cols = be_u32(&bytes, 12, path, "cols")? as usize;
    let pixels = payload(&bytes, 16, count * rows * cols, path)?.to_vec();
    Ok((count, rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, path, LABELS_MAGIC)?;
    let count = be_u32(&bytes, 4, path, "count")? as usize;
    Ok(payload(&bytes, 8, count, path)?.to_vec())
}

pub fn standardize(pixel: u8) -> f64 {
    (pixel as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD
}

/// Loads an image/label IDX pair into a standardized [`Dataset`].
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            field: "count",
            detail: format!(
                "{} labels but {} holds {count} images",
                labels.len(),
                images_path.display()
            ),
        });
    }
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= CLASSES)
    {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            field: "label",
            detail: format!("label {l} at index {i} is not a digit"),
        });
    }
    let data = pixels.iter().map(|&p| standardize(p)).collect();
    let images = Tensor::new([count, 1, rows, cols], data)?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect())
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "MNIST file not found (plain or .gz)",
        ),
    ))
}

/// The standard file names inside an MNIST directory.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (img, lbl) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    Ok((locate(dir, img)?, locate(dir, lbl)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (img, lbl) = mnist_paths(dir, split)?;
    load_idx(img, lbl)
}

/// Mixes `(seed, purpose, index)` into an independent 64-bit stream seed
/// (SplitMix64 finalizer applied twice).
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(seed ^ purpose.rotate_left(32)) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sample order for one epoch.
pub fn epoch_permutation(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(epoch_seed));
    order
}

/// Shuffled mini-batches over one epoch; the last batch may be short.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let images = self
            .dataset
            .images
            .gather_outer(idx)
            .expect("indices in range");
        let labels = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Some((images, labels))
    }
}

pub fn batch_iter(dataset: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if batch_size > dataset.len() {
        return Err(Error::invalid(format!(
            "batch_size {batch_size} exceeds dataset size {}",
            dataset.len()
        )));
    }
    Ok(Batches {
        dataset,
        order: epoch_permutation(dataset.len(), epoch_seed),
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(magic: u32, labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&magic.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn tiny(n: usize) -> Dataset {
        let images = Tensor::from_fn([n, 1, 2, 2], |i| i as f64);
        Dataset::new(images, (0..n).map(|i| i % 10).collect()).unwrap()
    }

    #[test]
    fn zero_image_is_standardized() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(1, 28, 28, &[0u8; 784])).unwrap();
        fs::write(&lbl, idx_labels(LABELS_MAGIC, &[7])).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.images().shape(), &[1, 1, 28, 28]);
        let want = (0.0 - 0.1307) / 0.3081;
        assert!(ds.images().data().iter().all(|&v| v == want));
        assert_eq!(ds.labels(), &[7]);
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lbl = dir.path().join("lbl");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&idx_images(2, 2, 2, &[0, 255, 0, 255, 1, 2, 3, 4]))
            .unwrap();
        fs::write(&img, enc.finish().unwrap()).unwrap();
        fs::write(&lbl, idx_labels(LABELS_MAGIC, &[1, 2])).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images().data()[1], standardize(255));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(1, 1, 1, &[0])).unwrap();
        fs::write(&lbl, idx_labels(IMAGES_MAGIC, &[0])).unwrap();
        let err = load_idx(&img, &lbl).unwrap_err();
        assert!(matches!(err, Error::Format { field: "magic", .. }), "{err}");
    }

    #[test]
    fn truncation_and_count_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(2, 2, 2, &[0; 5])).unwrap();
        fs::write(&lbl, idx_labels(LABELS_MAGIC, &[0, 1])).unwrap();
        let err = load_idx(&img, &lbl).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Format {
                    field: "payload",
                    ..
                }
            ),
            "{err}"
        );

        fs::write(&img, idx_images(2, 2, 2, &[0; 8])).unwrap();
        fs::write(&lbl, idx_labels(LABELS_MAGIC, &[0, 1, 2])).unwrap();
        let err = load_idx(&img, &lbl).unwrap_err();
        assert!(matches!(err, Error::Format { field: "count", .. }), "{err}");

        fs::write(&img, [0u8, 0, 8]).unwrap();
        assert!(matches!(
            read_idx_images(&img),
            Err(Error::Format { field: "magic", .. })
        ));
    }

    #[test]
    fn batch_sizes_cover_the_epoch() {
        let ds = tiny(10);
        let sizes: Vec<usize> = batch_iter(&ds, 3, 5)
            .unwrap()
            .map(|(_, l)| l.len())
            .collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let ds = tiny(10);
        let mut it = batch_iter(&ds, 10, 1).unwrap();
        let mut order = it.order().to_vec();
        let (images, _) = it.next().unwrap();
        assert!(it.next().is_none());
        assert_eq!(images.shape()[0], 10);
        order.sort_unstable();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        let ds = tiny(37);
        let a: Vec<_> = batch_iter(&ds, 4, 99).unwrap().collect();
        let b: Vec<_> = batch_iter(&ds, 4, 99).unwrap().collect();
        assert_eq!(a, b);
        let c = epoch_permutation(37, 100);
        assert_ne!(epoch_permutation(37, 99), c);
    }

    #[test]
    fn bad_batch_sizes() {
        let ds = tiny(3);
        assert!(batch_iter(&ds, 0, 0).is_err());
        assert!(batch_iter(&ds, 4, 0).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 2, 3);
        assert_ne!(a, derive_seed(1, 2, 4));
        assert_ne!(a, derive_seed(1, 3, 3));
        assert_ne!(a, derive_seed(2, 2, 3));
        assert_eq!(a, derive_seed(1, 2, 3));
    }
}
