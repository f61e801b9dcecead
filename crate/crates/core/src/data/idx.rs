//! IDX files as used by MNIST: a big-endian `u32` magic (`0x00000803` for
//! rank-3 unsigned-byte images, `0x00000801` for labels), one big-endian
//! `u32` per dimension, then the unsigned-byte payload.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: header truncated at byte {at}")))
}

/// Parses an image file into `(count, rows, cols, pixels scaled by 1/255)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file magic is {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image file dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "image file payload has {} bytes, header promises {want}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label file magic is {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "label file")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "label file payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Builds a dataset from in-memory IDX bytes. The class count is one past
/// the largest label, and at least 10 so MNIST subsets keep their width.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "image file holds {n} images but label file holds {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, classes)
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(image_path).map_err(|e| Error::io(image_path, e))?;
    let labels = std::fs::read(label_path).map_err(|e| Error::io(label_path, e))?;
    decode_idx(&images, &labels)
}

/// Encodes a single-channel dataset as IDX image and label bytes; pixels
/// are rounded to the nearest multiple of 1/255.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 || ds.classes() > 256 {
        return Err(Error::Unsupported("IDX export needs one channel and at most 256 classes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.images().len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [ds.len(), h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images().data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels().iter().map(|&l| l as u8));
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102, 1, 2, 3, 4]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lab)
    }

    #[test]
    fn decodes_header_and_scales_pixels() {
        let (img, lab) = tiny();
        let ds = decode_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), [1, 2, 2]);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.classes(), 10);
        assert_eq!(ds.images().data()[1], 1.0);
        assert_eq!(ds.images().data()[2], 0.2);
    }

    #[test]
    fn bad_magic_names_the_observed_value() {
        let (mut img, lab) = tiny();
        img[3] = 0x01;
        match decode_idx(&img, &lab) {
            Err(Error::Format(m)) => assert!(m.contains("0x00000801"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_is_format_error() {
        let (img, lab) = tiny();
        assert!(matches!(decode_idx(&img[..img.len() - 1], &lab), Err(Error::Format(_))));
        assert!(matches!(decode_idx(&img[..10], &lab), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let (img, _) = tiny();
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3];
        assert!(matches!(decode_idx(&img, &lab), Err(Error::Consistency(_))));
    }

    #[test]
    fn encode_round_trip() {
        let (img, lab) = tiny();
        let ds = decode_idx(&img, &lab).unwrap();
        assert_eq!(encode_idx(&ds).unwrap(), (img, lab));
    }
}
