//! IDX (MNIST layout) reader. All integers are big-endian; pixels are
//! bytes scaled to `[0, 1]`.

use std::path::Path;

use tvbi::nn::{Dataset, Targets, Tensor};
use tvbi::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated IDX header at byte {at}")))
}

/// `(count, rows, cols, pixels)` with pixels flattened per image.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("IDX image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let len = n.checked_mul(rows).and_then(|v| v.checked_mul(cols)).ok_or_else(|| Error::Format("IDX dims overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != len {
        return Err(Error::Format(format!("IDX image body has {} bytes, header declares {len}", body.len())));
    }
    Ok((n, rows, cols, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("IDX label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("IDX label body has {} bytes, header declares {n}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Image/label pair as a classification dataset.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(&std::fs::read(images)?)?;
    let labels = parse_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{} labels for {n} images", labels.len())));
    }
    Dataset::new(Tensor::new(vec![n, rows * cols], pixels)?, Targets::Labels(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn images_fixture() -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, 2, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        b
    }

    #[test]
    fn handcrafted_images() {
        let (n, r, c, px) = parse_images(&images_fixture()).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px[..4], [0.0, 1.0, 0.2, 0.4]);
        assert_eq!(px[7], 4.0 / 255.0);
    }

    #[test]
    fn malformed_files() {
        let img = images_fixture();
        assert!(matches!(parse_images(&img[..img.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(parse_images(&img[..10]), Err(Error::Format(_))));
        let mut wrong = img.clone();
        wrong[3] = 0x01;
        assert!(matches!(parse_images(&wrong), Err(Error::Format(_))));
        let mut lab = LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend_from_slice(&[1, 2]);
        assert!(matches!(parse_labels(&lab), Err(Error::Format(_))));
    }
}
