use std::path::Path;

use proptest::prelude::*;

use robustkit::data::{
    encode_cifar_records, encode_idx_images, encode_idx_labels, load_cifar10, load_idx, make_cv_plan, parse_cifar_batch, seeded_permutation,
    DataError, CIFAR_RECORD,
};

/// IDX image file assembled byte by byte: magic, three big-endian extents,
/// then the pixel payload.
fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x03];
    for d in [n, rows, cols] {
        b.extend(d.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x01];
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn idx_fixture_loads_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = vec![0, 255, 17, 128, 3, 200, 9, 99, 250, 1, 60, 77];
    let img = idx_images(2, 2, 3, &pixels);
    let lab = idx_labels(&[7, 2]);
    let d = load_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l", &lab)).unwrap();
    assert_eq!(d.images.shape(), &[2, 1, 2, 3]);
    assert_eq!(d.labels, vec![7, 2]);
    assert_eq!(d.num_classes, 10);
    for (v, &p) in d.images.data().iter().zip(&pixels) {
        assert_eq!(*v, p as f32 / 255.0);
    }
    assert_eq!(encode_idx_images(&d.images), img);
    assert_eq!(encode_idx_labels(&d.labels), lab);
}

#[test]
fn idx_corruptions_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let lab = write(dir.path(), "l", &idx_labels(&[1, 2]));
    let mut bad_magic = idx_images(2, 1, 1, &[1, 2]);
    bad_magic[3] = 0x01;
    let err = load_idx(&write(dir.path(), "a", &bad_magic), &lab).unwrap_err();
    assert!(matches!(err, DataError::BadMagic { found: 0x801, .. }), "{err}");
    let truncated = idx_images(2, 2, 2, &[1, 2, 3]);
    assert!(matches!(load_idx(&write(dir.path(), "b", &truncated), &lab).unwrap_err(), DataError::Truncated { .. }));
    let three = write(dir.path(), "c", &idx_images(3, 1, 1, &[1, 2, 3]));
    assert!(matches!(load_idx(&three, &lab).unwrap_err(), DataError::CountMismatch { images: 3, labels: 2 }));
    assert!(matches!(load_idx(&dir.path().join("missing"), &lab).unwrap_err(), DataError::Io { .. }));
}

/// One CIFAR record: label byte, then the red, green and blue 32x32 planes.
fn cifar_record(label: u8, seed: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072u32).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)));
    r
}

#[test]
fn cifar_fixture_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<u8> = [cifar_record(3, 0), cifar_record(9, 5), cifar_record(0, 11)].concat();
    assert_eq!(bytes.len(), 3 * CIFAR_RECORD);
    let (pixels, labels) = parse_cifar_batch(&bytes, "fixture").unwrap();
    assert_eq!(labels, vec![3, 9, 0]);
    assert_eq!(pixels.len(), 3 * 3072);
    let d = load_cifar10(&[write(dir.path(), "b.bin", &bytes)], Some(3)).unwrap();
    assert_eq!(d.images.shape(), &[3, 3, 32, 32]);
    // green channel, row 4, column 7 of the second image
    let byte = bytes[CIFAR_RECORD + 1 + 1024 + 4 * 32 + 7];
    assert_eq!(d.images.data()[3072 + 1024 + 4 * 32 + 7], byte as f32 / 255.0);
    assert_eq!(encode_cifar_records(&d.images, &d.labels), bytes);
}

#[test]
fn cifar_corruptions_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut short = cifar_record(1, 0);
    short.pop();
    assert!(matches!(parse_cifar_batch(&short, "x").unwrap_err(), DataError::RecordCount { .. }));
    let two = write(dir.path(), "two", &[cifar_record(1, 0), cifar_record(2, 0)].concat());
    assert!(matches!(load_cifar10(&[two], Some(3)).unwrap_err(), DataError::WrongRecords { expected: 3, found: 2, .. }));
    let bad = write(dir.path(), "bad", &cifar_record(10, 0));
    assert!(matches!(load_cifar10(&[bad], None).unwrap_err(), DataError::LabelRange { label: 10, .. }));
}

proptest! {
    #[test]
    fn idx_bytes_round_trip(n in 1usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let img = idx_images(n as u32, rows as u32, cols as u32, &pixels);
        let d = load_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l", &idx_labels(&labels))).unwrap();
        prop_assert_eq!(encode_idx_images(&d.images), img);
    }

    #[test]
    fn permutations_are_permutations(n in 0usize..500, seed in any::<u64>()) {
        let mut p = seeded_permutation(n, seed);
        prop_assert_eq!(&p, &seeded_permutation(n, seed));
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn cv_halves_partition_both_splits(train in 2usize..300, test in 2usize..300, repeats in 1usize..6, seed in any::<u64>()) {
        let plan = make_cv_plan(train, test, repeats, seed);
        prop_assert_eq!(plan.runs.len(), 2 * repeats);
        for r in 0..repeats {
            let (a, b) = (&plan.runs[2 * r], &plan.runs[2 * r + 1]);
            prop_assert_eq!((a.repeat, a.fold, b.repeat, b.fold), (r, 0, r, 1));
            let mut tr: Vec<usize> = a.train.iter().chain(&b.train).copied().collect();
            let mut te: Vec<usize> = a.test.iter().chain(&b.test).copied().collect();
            prop_assert!(a.train.windows(2).all(|w| w[0] < w[1]));
            tr.sort_unstable();
            te.sort_unstable();
            prop_assert_eq!(tr, (0..train).collect::<Vec<_>>());
            prop_assert_eq!(te, (0..test).collect::<Vec<_>>());
            prop_assert!(a.train.len().abs_diff(b.train.len()) <= 1);
        }
        prop_assert_eq!(plan, make_cv_plan(train, test, repeats, seed));
    }
}
