use std::path::Path;

use crate::tensor::Tensor;

use super::{read_file, DataError, Dataset};

/// Magic for a 3-D unsigned-byte tensor.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic for a 1-D unsigned-byte tensor.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses an unsigned-byte IDX file with the given magic. Returns the
/// dimensions and the payload.
pub fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &str) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let truncated = |expected| DataError::Truncated {
        path: path.to_string(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_string(),
            found,
            expected: magic,
        });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    Ok((dims, &bytes[header..expected]))
}

/// Reads an image/label IDX pair; pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();
    let ibytes = read_file(images_path)?;
    let lbytes = read_file(labels_path)?;
    let (dims, pixels) = parse_idx(&ibytes, IDX_IMAGES_MAGIC, &ipath)?;
    let (ldims, labels) = parse_idx(&lbytes, IDX_LABELS_MAGIC, &lpath)?;
    if dims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    let images = Tensor::new(
        [dims[0], 1, dims[1], dims[2]],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
    .expect("length checked by parse_idx");
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new("idx", "", images, labels, classes)
}

/// IDX image bytes. Pixels are quantized with `round(255 * v)`.
pub fn encode_idx_images(images: &Tensor<f32>) -> Vec<u8> {
    let s = images.shape();
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [s[0], s[s.len() - 2], s[s.len() - 1]] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Writes a single-channel data set as an IDX pair.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let write = |p: &Path, b: Vec<u8>| {
        std::fs::write(p, b).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    write(images_path, encode_idx_images(&data.images))?;
    write(labels_path, encode_idx_labels(&data.labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_fields() {
        let b = encode_idx_labels(&[3, 1]);
        assert_eq!(b, [0, 0, 8, 1, 0, 0, 0, 2, 3, 1]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let b = encode_idx_labels(&[3, 1]);
        assert!(matches!(
            parse_idx(&b, IDX_IMAGES_MAGIC, "x"),
            Err(DataError::BadMagic { .. })
        ));
        assert!(matches!(
            parse_idx(&b[..9], IDX_LABELS_MAGIC, "x"),
            Err(DataError::Truncated { .. })
        ));
    }
}
