//! IDX file parsing (the MNIST container format): big-endian magic and
//! dimension words, unsigned-byte payload.

use crate::data::checkpoint::Crc64;
use crate::data::dataset::LabeledDataset;
use crate::error::{DrmmError, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(DrmmError::Format {
            offset: bytes.len() as u64,
            message: format!("file ends before {} at offset {}", what, offset),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let actual = read_u32_be(bytes, 0, "magic")?;
    if actual != expected {
        return Err(DrmmError::Format {
            offset: 0,
            message: format!("{}: expected magic {:#010x}, got {:#010x}", what, expected, actual),
        });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize, what: &str) -> Result<()> {
    let have = bytes.len() - header;
    if have != expected {
        return Err(DrmmError::Format {
            offset: bytes.len() as u64,
            message: format!(
                "{} payload starting at offset {}: expected {} bytes, have {}",
                what, header, expected, have
            ),
        });
    }
    Ok(())
}

/// Parses an IDX image file: magic 0x00000803, then n, rows, cols
/// (big-endian u32), then `n*rows*cols` pixel bytes.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC, "image file")?;
    let n = read_u32_be(bytes, 4, "image count")? as usize;
    let h = read_u32_be(bytes, 8, "row count")? as usize;
    let w = read_u32_be(bytes, 12, "column count")? as usize;
    let expected = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or(DrmmError::Format { offset: 4, message: "image dimensions overflow".into() })?;
    check_payload(bytes, 16, expected, "image")?;
    Ok((n, h, w, bytes[16..].to_vec()))
}

/// Parses an IDX label file: magic 0x00000801, then n (big-endian u32),
/// then `n` label bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, "label file")?;
    let n = read_u32_be(bytes, 4, "label count")? as usize;
    check_payload(bytes, 8, n, "label")?;
    Ok(bytes[8..].to_vec())
}

/// Loads an image/label IDX pair into a dataset: pixels scaled by 1/255
/// into `[h, w, 1]` tensors, every sample labeled. The provenance checksum
/// covers both raw files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (n, h, w, pixels) = parse_idx_images(&image_bytes)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(DrmmError::Format {
            offset: 4,
            message: format!("label count {} does not match image count {}", labels.len(), n),
        });
    }
    let mut crc = Crc64::new();
    crc.update(&image_bytes);
    crc.update(&label_bytes);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let data: Vec<f64> = pixels[i * h * w..(i + 1) * h * w]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        images.push(Tensor::new(vec![h, w, 1], data)?);
    }
    LabeledDataset::new(
        images,
        labels.iter().map(|&y| Some(y as usize)).collect(),
        format!("{} + {}", images_path.display(), labels_path.display()),
        crc.value(),
    )
}

/// Writes images in IDX layout; the inverse of `parse_idx_images`.
pub fn write_idx_images(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(DrmmError::shape("write_idx_images", format!("{}", n * h * w), format!("{}", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Writes labels in IDX layout; the inverse of `parse_idx_labels`.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}
