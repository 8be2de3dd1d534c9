use std::path::Path;

use crate::tensor::Tensor;

use super::{read_file, DataError, Dataset, Splits};

/// One label byte followed by 1024 bytes each of the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const RECORDS_PER_BATCH: usize = 10_000;

/// Parses the records of one batch file into `(pixels, labels)`.
pub fn parse_cifar_batch(bytes: &[u8], path: &str) -> Result<(Vec<f32>, Vec<usize>), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::RecordCount {
            path: path.to_string(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Concatenates batch files. When `expect_each` is set every file must hold
/// exactly that many records.
pub fn load_cifar10(paths: &[impl AsRef<Path>], expect_each: Option<usize>) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let name = p.display().to_string();
        let (px, lb) = parse_cifar_batch(&read_file(p)?, &name)?;
        if let Some(expected) = expect_each.filter(|&e| e != lb.len()) {
            return Err(DataError::WrongRecords {
                path: name,
                expected,
                found: lb.len(),
            });
        }
        pixels.extend(px);
        labels.extend(lb);
    }
    let images = Tensor::new([labels.len(), 3, 32, 32], pixels).expect("record size fixed");
    Dataset::new("cifar10", "", images, labels, 10)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10_dir(dir: &Path) -> Result<Splits, DataError> {
    let train: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let mut train = load_cifar10(&train, Some(RECORDS_PER_BATCH))?;
    let mut test = load_cifar10(&[dir.join("test_batch.bin")], Some(RECORDS_PER_BATCH))?;
    train.split = "train".into();
    test.split = "test".into();
    Ok(Splits { train, test })
}

/// Serializes records in batch-file layout; pixels in `[0, 1]` are quantized
/// with `round(255 * v)`.
pub fn encode_cifar_records(images: &Tensor<f32>, labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &l) in labels.iter().enumerate() {
        out.push(l as u8);
        out.extend(images.sample(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}
