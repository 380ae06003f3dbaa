//! MNIST-shaped IDX ingestion, labeled/unlabeled splits and salt-and-pepper corruption.
//!
//! IDX layout (all integers big-endian `u32`):
//!
//! ```text
//! images: 0x00000803 | count | rows | cols | count*rows*cols u8 pixels, row-major
//! labels: 0x00000801 | count | count u8 labels
//! ```
//!
//! Pixels are mapped to `p / 255.0` and kept as real intensities in `[0, 1]`.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::rng_from_seed;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// Decoded IDX image file: one row of `rows * cols` intensities per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Array2<f64>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            offset: self.bytes.len(),
            message: format!("truncated header: missing {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or_else(|| Error::Parse {
            offset: self.pos,
            message: format!("{what} size overflows"),
        })?;
        if self.bytes.len() < end {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!(
                    "truncated {what}: expected {len} bytes from offset {}, stream ends after {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        if self.bytes.len() > end {
            return Err(Error::Parse {
                offset: end,
                message: format!(
                    "dimension mismatch: {} trailing bytes after declared {what}",
                    self.bytes.len() - end
                ),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

pub fn load_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32("magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected image magic 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let per_image = rows.checked_mul(cols).ok_or_else(|| Error::Parse {
        offset: 8,
        message: "rows*cols overflows".into(),
    })?;
    if per_image == 0 && count > 0 {
        return Err(Error::Parse {
            offset: 8,
            message: "dimension mismatch: zero-sized images".into(),
        });
    }
    let total = count.checked_mul(per_image).ok_or_else(|| Error::Parse {
        offset: 4,
        message: "count*rows*cols overflows".into(),
    })?;
    let payload = cur.payload(total, "pixel payload")?;
    let pixels = Array2::from_shape_fn((count, per_image), |(i, j)| {
        f64::from(payload[i * per_image + j]) / 255.0
    });
    Ok(IdxImages { rows, cols, pixels })
}

/// Parses an IDX label file, rejecting any label `>= num_classes`.
pub fn load_idx_labels(bytes: &[u8], num_classes: usize) -> Result<Vec<usize>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32("magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected label magic 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = cur.u32("label count")? as usize;
    let start = cur.pos;
    let payload = cur.payload(count, "label payload")?;
    payload
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let label = b as usize;
            if label >= num_classes {
                Err(Error::Parse {
                    offset: start + i,
                    message: format!("label {label} out of range for {num_classes} classes"),
                })
            } else {
                Ok(label)
            }
        })
        .collect()
}

/// Inverse of [`load_idx_images`]; intensities are mapped back with `round(p * 255)`.
pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let (count, per_image) = images.pixels.dim();
    let mut out = Vec::with_capacity(16 + count * per_image);
    for word in [
        IMAGE_MAGIC,
        count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend(
        images
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images plus optional class labels. Rows of `images` are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Array2<f64>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != images.nrows() {
                return Err(Error::dim("dataset labels", images.nrows(), labels.len()));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "image intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    /// Loads an image file and optionally its label file.
    pub fn from_idx_files(
        images: &Path,
        labels: Option<&Path>,
        num_classes: usize,
    ) -> Result<Self> {
        let imgs = load_idx_images(&read_file(images)?)?;
        let labels = match labels {
            Some(p) => Some(load_idx_labels(&read_file(p)?, num_classes)?),
            None => None,
        };
        Self::new(imgs.pixels, labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f64> {
        self.images.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            images: self.images.slice(s![start..end, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            num_classes: self.num_classes,
        }
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            images: self.images.clone(),
            labels: None,
            num_classes: self.num_classes,
        }
    }

    /// Same labels, corrupted images.
    pub fn with_salt_pepper(&self, spec: &NoiseSpec) -> Dataset {
        Dataset {
            images: apply_salt_pepper(&self.images, spec),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Stacks the images of `self` and `other`; labels are dropped.
    pub fn concat_images(&self, other: &Dataset) -> Result<Array2<f64>> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::dim("concatenated datasets", self.dim(), other.dim()));
        }
        if other.is_empty() {
            return Ok(self.images.clone());
        }
        if self.is_empty() {
            return Ok(other.images.clone());
        }
        ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// How many labeled and unlabeled samples to draw from a labeled source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub seed: u64,
}

/// Seeded shuffle of the source indices; the first `l` keep their labels, the next `u` lose them.
pub fn split_semi_supervised(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    dataset.require_labels()?;
    let wanted = spec.num_labeled + spec.num_unlabeled;
    if wanted > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "split asks for {wanted} samples but the dataset has {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from_seed(spec.seed));
    let labeled = dataset.select(&order[..spec.num_labeled]);
    let unlabeled = dataset
        .select(&order[spec.num_labeled..wanted])
        .without_labels();
    Ok((labeled, unlabeled))
}

/// Fraction of pixels replaced by salt (1.0) or pepper (0.0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    factor: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(factor: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&factor) {
            return Err(Error::InvalidArgument(format!(
                "noise factor {factor} outside [0, 1]"
            )));
        }
        Ok(Self { factor, seed })
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    /// Number of corrupted positions in an image of `pixels` entries.
    pub fn affected(&self, pixels: usize) -> usize {
        (self.factor * pixels as f64).floor() as usize
    }
}

/// Per image: `floor(f * P)` distinct positions, each set to 0.0 or 1.0 with equal odds.
pub fn apply_salt_pepper(images: &Array2<f64>, spec: &NoiseSpec) -> Array2<f64> {
    let mut out = images.clone();
    let pixels = images.ncols();
    let k = spec.affected(pixels);
    if k == 0 {
        return out;
    }
    let mut rng = rng_from_seed(spec.seed);
    for mut row in out.rows_mut() {
        for pos in index::sample(&mut rng, pixels, k) {
            row[pos] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn header(words: &[u32]) -> Vec<u8> {
        words.iter().flat_map(|w| w.to_be_bytes()).collect()
    }

    #[test]
    fn parses_tiny_image_file() {
        let mut bytes = header(&[2051, 1, 2, 2]);
        bytes.extend([0, 255, 128, 64]);
        let imgs = load_idx_images(&bytes).unwrap();
        assert_eq!((imgs.rows, imgs.cols), (2, 2));
        assert_eq!(
            imgs.pixels.row(0).to_vec(),
            vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]
        );
    }

    #[test]
    fn rejects_label_magic_in_image_file() {
        let mut bytes = header(&[0x801, 1, 1, 1]);
        bytes.push(0);
        let err = load_idx_images(&bytes).unwrap_err().to_string();
        assert!(err.contains("expected image magic"), "{err}");
        assert!(err.contains("byte 0"), "{err}");
    }

    #[test]
    fn truncated_images_report_offset() {
        let mut bytes = header(&[2051, 2, 2, 2]);
        bytes.extend([1, 2, 3, 4, 5]);
        match load_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_idx_images(&header(&[2051, 1])).is_err());
    }

    #[test]
    fn trailing_bytes_are_a_dimension_mismatch() {
        let mut bytes = header(&[2051, 1, 1, 2]);
        bytes.extend([1, 2, 3]);
        match load_idx_images(&bytes) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 18);
                assert!(message.contains("dimension mismatch"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_labels_and_rejects_truncation() {
        let mut bytes = header(&[2049, 3]);
        bytes.extend([7, 0, 9]);
        assert_eq!(load_idx_labels(&bytes, 10).unwrap(), vec![7, 0, 9]);
        bytes.pop();
        assert!(matches!(
            load_idx_labels(&bytes, 10),
            Err(Error::Parse { offset: 10, .. })
        ));
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut bytes = header(&[2049, 2]);
        bytes.extend([1, 10]);
        assert!(matches!(
            load_idx_labels(&bytes, 10),
            Err(Error::Parse { offset: 9, .. })
        ));
    }

    fn labeled(n: usize) -> Dataset {
        let images = Array2::from_shape_fn((n, 4), |(i, j)| ((i * 4 + j) % 256) as f64 / 255.0);
        let labels = (0..n).map(|i| i % 10).collect();
        Dataset::new(images, Some(labels), 10).unwrap()
    }

    #[test]
    fn empty_split_gives_empty_sets() {
        let ds = labeled(5);
        let spec = SplitSpec {
            num_labeled: 0,
            num_unlabeled: 0,
            seed: 1,
        };
        let (l, u) = split_semi_supervised(&ds, &spec).unwrap();
        assert!(l.is_empty() && u.is_empty());
        assert!(l.is_labeled() && !u.is_labeled());
    }

    #[test]
    fn oversized_split_is_rejected() {
        let spec = SplitSpec {
            num_labeled: 4,
            num_unlabeled: 2,
            seed: 1,
        };
        assert!(split_semi_supervised(&labeled(5), &spec).is_err());
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = labeled(50);
        let spec = SplitSpec {
            num_labeled: 20,
            num_unlabeled: 10,
            seed: 99,
        };
        let a = split_semi_supervised(&ds, &spec).unwrap();
        let b = split_semi_supervised(&ds, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.0.len(), a.1.len()), (20, 10));
    }

    #[test]
    fn noise_extremes() {
        let clean = Array2::from_elem((3, 784), 0.5);
        let same = apply_salt_pepper(&clean, &NoiseSpec::new(0.0, 3).unwrap());
        assert_eq!(same, clean);
        let full = apply_salt_pepper(&clean, &NoiseSpec::new(1.0, 3).unwrap());
        assert!(full.iter().all(|&p| p == 0.0 || p == 1.0));
    }

    #[test]
    fn noise_changes_exactly_floor_f_p_pixels() {
        let clean = Array2::from_elem((4, 784), 0.5);
        let noisy = apply_salt_pepper(&clean, &NoiseSpec::new(0.1, 11).unwrap());
        for (a, b) in clean.rows().into_iter().zip(noisy.rows()) {
            let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
            assert_eq!(changed, 78);
        }
    }

    #[test]
    fn noise_factor_is_validated() {
        assert!(NoiseSpec::new(1.5, 0).is_err());
        assert!(NoiseSpec::new(-0.1, 0).is_err());
    }
}
