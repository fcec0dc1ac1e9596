//! Big-endian IDX reader for MNIST-style image and label files, with
//! transparent gzip support.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use oafel_core::learner::Dataset;

use crate::HarnessError;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
pub const MNIST_CLASSES: usize = 10;

fn read_bytes(path: &Path) -> Result<Vec<u8>, HarnessError> {
    let raw = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| HarnessError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, HarnessError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| HarnessError::TruncatedFile(format!("{what}: header ends at byte {}", bytes.len())))
}

/// Parses an image file into `(count, rows * cols, pixels scaled to [0, 1])`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), HarnessError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(HarnessError::BadMagic { expected: IMAGE_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let width = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * width {
        return Err(HarnessError::TruncatedFile(format!(
            "images: expected {} pixel bytes, found {}",
            count * width,
            body.len()
        )));
    }
    let pixels = body[..count * width].iter().map(|&p| p as f64 / 255.0).collect();
    Ok((count, width, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, HarnessError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(HarnessError::BadMagic { expected: LABEL_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(HarnessError::TruncatedFile(format!("labels: expected {count} bytes, found {}", body.len())));
    }
    Ok(body[..count].iter().map(|&l| l as usize).collect())
}

/// Loads a matching image/label file pair.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset, HarnessError> {
    let (count, width, pixels) = parse_images(&read_bytes(images)?)?;
    let labels = parse_labels(&read_bytes(labels)?)?;
    if labels.len() != count {
        return Err(HarnessError::CountMismatch { images: count, labels: labels.len() });
    }
    let classes = labels.iter().max().map_or(MNIST_CLASSES, |m| (m + 1).max(MNIST_CLASSES));
    Ok(Dataset::new(pixels, labels, width, classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn parses_tiny_files() {
        let (count, width, px) = parse_images(&image_file(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!((count, width), (2, 2));
        assert_eq!(px, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_labels(&label_file(&[3, 7])).unwrap(), vec![3, 7]);
    }

    #[test]
    fn swapped_magic_rejected() {
        let mut labels = label_file(&[1]);
        labels[3] = 0x03;
        assert!(matches!(parse_labels(&labels), Err(HarnessError::BadMagic { found: 0x803, .. })));
    }

    #[test]
    fn truncation_detected() {
        let img = image_file(2, 2, 2, &[1, 2, 3, 4, 5]);
        assert!(matches!(parse_images(&img), Err(HarnessError::TruncatedFile(_))));
        assert!(matches!(parse_images(&img[..10]), Err(HarnessError::TruncatedFile(_))));
    }
}
