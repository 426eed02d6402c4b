//! Dataset ingestion: the MNIST IDX container format (optionally gzipped)
//! and a synthetic Gaussian-blob dataset for fast offline runs.

use crate::error::{CureError, Result};
use crate::rng::{self, stream};
use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled images with values in [0, 1], stored flat in sample-major order.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    input_shape: Vec<usize>,
    num_classes: usize,
    split: String,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<usize>,
        input_shape: Vec<usize>,
        num_classes: usize,
        split: &str,
    ) -> Result<Self> {
        let d: usize = input_shape.iter().product();
        if labels.is_empty() || images.len() != labels.len() * d {
            return Err(CureError::DimensionMismatch(format!(
                "{} pixels for {} labels of shape {:?}",
                images.len(),
                labels.len(),
                input_shape
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(CureError::InvalidClass {
                index: *bad,
                num_classes,
            });
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CureError::DimensionMismatch(
                "pixel values outside [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            images,
            labels,
            input_shape,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.input_len();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.image(i), self.labels[i])
    }

    /// First `n` samples as a new dataset (canonical order).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let d = self.input_len();
        Dataset {
            images: self.images[..n * d].to_vec(),
            labels: self.labels[..n].to_vec(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }

    /// Samples `start..end` as a new dataset with its own split tag.
    pub fn slice(&self, start: usize, end: usize, split: &str) -> Result<Dataset> {
        if start >= end || end > self.len() {
            return Err(CureError::DimensionMismatch(format!(
                "slice {start}..{end} of {} samples",
                self.len()
            )));
        }
        let d = self.input_len();
        Dataset::new(
            self.images[start * d..end * d].to_vec(),
            self.labels[start..end].to_vec(),
            self.input_shape.clone(),
            self.num_classes,
            split,
        )
    }

    /// SHA-256 over shape, pixels, and labels; hex-encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for d in &self.input_shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update((self.num_classes as u64).to_le_bytes());
        for v in &self.images {
            hasher.update(v.to_le_bytes());
        }
        for l in &self.labels {
            hasher.update((*l as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Read a file, transparently inflating gzip (sniffed from the 2-byte
/// magic, so both plain and .gz files work under any name).
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 2];
    let n = file.read(&mut head)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut raw = head[..n].to_vec();
    raw.extend_from_slice(&rest);
    if n == 2 && head == [0x1f, 0x8b] {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| CureError::Truncated(format!("gzip stream in {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CureError::Truncated(format!("{what} header")))
}

/// Parse the standard IDX pair: big-endian magic, counts, u8 payload.
/// Pixels are scaled by 1/255 into [0, 1].
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CureError::IdxMagic {
            path: images_path.display().to_string(),
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n_images = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "image cols")? as usize;
    let expected = 16 + n_images * rows * cols;
    if img_bytes.len() < expected {
        return Err(CureError::Truncated(format!(
            "image payload: expected {expected} bytes, found {}",
            img_bytes.len()
        )));
    }

    let lbl_bytes = read_maybe_gz(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CureError::IdxMagic {
            path: labels_path.display().to_string(),
            got: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() < 8 + n_labels {
        return Err(CureError::Truncated(format!(
            "label payload: expected {} bytes, found {}",
            8 + n_labels,
            lbl_bytes.len()
        )));
    }
    if n_images != n_labels {
        return Err(CureError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let images: Vec<f64> = img_bytes[16..expected]
        .iter()
        .map(|b| f64::from(*b) / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + n_labels]
        .iter()
        .map(|b| *b as usize)
        .collect();
    Dataset::new(images, labels, vec![1, rows, cols], 10, "mnist")
}

/// Synthetic dataset: `k` Gaussian class blobs rendered into image-shaped
/// tensors and clamped to [0, 1]. Labels cycle through the classes, so
/// counts stay balanced within one. Low noise keeps the blobs linearly
/// separable.
pub fn make_synthetic(n: usize, k: usize, input_shape: &[usize], seed: u64) -> Result<Dataset> {
    if n == 0 || k == 0 {
        return Err(CureError::Config(
            "synthetic dataset needs n > 0 and k > 0".to_string(),
        ));
    }
    let d: usize = input_shape.iter().product();
    let mut rng = rng::rng_for(seed, &[stream::SYNTH_DATA]);
    // Class means spread inside the cube, away from the clamp boundaries.
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(0.25..=0.75)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.05).expect("positive sigma");
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            let v: f64 = means[c][j] + noise.sample(&mut rng);
            images.push(v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(images, labels, input_shape.to_vec(), k, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: usize, rows: usize, cols: usize, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(n as u32).to_be_bytes());
        b.extend_from_slice(&(rows as u32).to_be_bytes());
        b.extend_from_slice(&(cols as u32).to_be_bytes());
        b.extend(std::iter::repeat_n(fill, n * rows * cols));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_tmp(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn parses_small_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_tmp(&dir, "img", &idx_images(3, 4, 4, 128));
        let lbl = write_tmp(&dir, "lbl", &idx_labels(&[0, 5, 9]));
        let ds = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_shape(), &[1, 4, 4]);
        assert_eq!(ds.label(1), 5);
        assert!((ds.image(0)[0] - 128.0 / 255.0).abs() < 1e-12);
        assert!(ds.image(0).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gzip_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_images(2, 3, 3, 10);
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&raw).unwrap();
        let img = write_tmp(&dir, "img.gz", &gz.finish().unwrap());
        let lbl = write_tmp(&dir, "lbl", &idx_labels(&[1, 2]));
        let ds = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn bad_magic_and_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = idx_images(1, 2, 2, 0);
        bad[0] = 0xff;
        let img_bad = write_tmp(&dir, "bad", &bad);
        let lbl = write_tmp(&dir, "lbl", &idx_labels(&[0]));
        assert!(matches!(
            load_mnist_idx(&img_bad, &lbl),
            Err(CureError::IdxMagic { .. })
        ));

        let cut = idx_images(2, 2, 2, 0);
        let img_cut = write_tmp(&dir, "cut", &cut[..cut.len() - 3]);
        let lbl2 = write_tmp(&dir, "lbl2", &idx_labels(&[0, 1]));
        assert!(matches!(
            load_mnist_idx(&img_cut, &lbl2),
            Err(CureError::Truncated(_))
        ));

        let img = write_tmp(&dir, "img", &idx_images(2, 2, 2, 0));
        let lbl3 = write_tmp(&dir, "lbl3", &idx_labels(&[0, 1, 2]));
        assert!(matches!(
            load_mnist_idx(&img, &lbl3),
            Err(CureError::CountMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = make_synthetic(101, 10, &[1, 4, 4], 5).unwrap();
        let b = make_synthetic(101, 10, &[1, 4, 4], 5).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = make_synthetic(101, 10, &[1, 4, 4], 6).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());

        let mut counts = vec![0usize; 10];
        for i in 0..a.len() {
            counts[a.label(i)] += 1;
        }
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn fingerprint_sensitive_to_any_byte() {
        let a = make_synthetic(10, 2, &[4], 1).unwrap();
        let mut b = a.clone();
        b.images[7] = (b.images[7] + 0.25).min(1.0);
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.labels[3] = (c.labels[3] + 1) % 2;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
