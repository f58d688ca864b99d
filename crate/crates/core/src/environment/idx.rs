//! Big-endian IDX files as used by MNIST/EMNIST.

use std::path::Path;

use crate::error::{Error, Result};
use crate::neuralnet::LabeledDataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Load an image/label file pair. Pixels are scaled by `1/255` and images
/// flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read(images_path)?;
    let labels = read(labels_path)?;

    if read_u32(&images, 0) != Some(IMAGES_MAGIC) {
        return Err(idx_err(images_path, "bad magic"));
    }
    if read_u32(&labels, 0) != Some(LABELS_MAGIC) {
        return Err(idx_err(labels_path, "bad magic"));
    }
    let (Some(n), Some(rows), Some(cols)) = (read_u32(&images, 4), read_u32(&images, 8), read_u32(&images, 12)) else {
        return Err(idx_err(images_path, "truncated header"));
    };
    let Some(n_labels) = read_u32(&labels, 4) else {
        return Err(idx_err(labels_path, "truncated header"));
    };
    if n != n_labels {
        return Err(idx_err(
            labels_path,
            format!("count mismatch: {n} images, {n_labels} labels"),
        ));
    }

    let (n, dim) = (n as usize, rows as usize * cols as usize);
    let pixels = &images[16..];
    if pixels.len() != n * dim {
        return Err(idx_err(
            images_path,
            format!(
                "truncated file: expected {} pixel bytes, found {}",
                n * dim,
                pixels.len()
            ),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(idx_err(
            labels_path,
            format!("truncated file: expected {n} labels, found {}", label_bytes.len()),
        ));
    }
    if dim == 0 {
        return Err(idx_err(images_path, "zero-sized images"));
    }

    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| l as usize).collect();
    LabeledDataset::new(dim, features, labels)
}

/// Write an image/label file pair. `images` holds `labels.len()` images of
/// `rows * cols` bytes each, concatenated.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: u32,
    cols: u32,
    images: &[u8],
    labels: &[u8],
) -> Result<()> {
    if images.len() != labels.len() * (rows * cols) as usize {
        return Err(Error::Shape("image bytes do not match label count".into()));
    }
    let n = labels.len() as u32;
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n, rows, cols] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, n] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("images.idx");
        let lab = dir.join("labels.idx");
        let mut pixels = vec![0u8; 4 * 784];
        pixels[0] = 255;
        pixels[784 + 5] = 51;
        write_idx(&img, &lab, 28, 28, &pixels, &[3, 1, 4, 1]).unwrap();
        (img, lab)
    }

    #[test]
    fn loads_handcrafted_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.dim(), 784);
        assert_eq!(d.labels(), &[3, 1, 4, 1]);
        assert_eq!(d.sample(0).0[0], 1.0);
        assert_eq!(d.sample(1).0[5], 0.2);
    }

    #[test]
    fn wrong_label_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let mut bytes = std::fs::read(&lab).unwrap();
        bytes[3] = 0x03;
        std::fs::write(&lab, bytes).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_images() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture(dir.path());
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_idx(&img, &lab).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i");
        let lab = dir.path().join("l");
        write_idx(&img, &lab, 2, 2, &[0; 8], &[0, 1]).unwrap();
        let mut bytes = std::fs::read(&lab).unwrap();
        bytes[7] = 3;
        bytes.push(2);
        std::fs::write(&lab, bytes).unwrap();
        assert!(load_idx(&img, &lab).unwrap_err().to_string().contains("count mismatch"));
    }
}
