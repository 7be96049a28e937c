use std::fs;

use clab::checkpoint::Checkpoint;
use clab::encoder::EncoderParams;
use clab::harness::dataset::CIFAR_RECORD;
use clab::harness::{load_cifar10, parse_cifar10, DataSource, DatasetSpec};
use clab::rng::RngStream;
use clab::ClabError;

fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(fill));
    r
}

#[test]
fn ten_thousand_records_consume_whole_file() {
    let bytes: Vec<u8> = (0..10_000)
        .flat_map(|i| record((i % 10) as u8, |p| (p % 256) as u8))
        .collect();
    assert_eq!(bytes.len(), 30_730_000);
    let d = parse_cifar10(&bytes).unwrap();
    assert_eq!(d.len(), 10_000);
    assert_eq!(d.labels[9_999], 9);
}

#[test]
fn saturated_pixels_map_to_one() {
    let d = parse_cifar10(&record(3, |_| 255)).unwrap();
    assert!(d.images[0].data().iter().all(|&v| v == 1.0));
}

#[test]
fn truncated_file_is_rejected() {
    let mut bytes: Vec<u8> = (0..3).flat_map(|_| record(1, |_| 0)).collect();
    bytes.truncate(2 * CIFAR_RECORD + 100);
    assert!(matches!(
        parse_cifar10(&bytes),
        Err(ClabError::Format { .. })
    ));
}

#[test]
fn loads_from_disk_with_limit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let bytes: Vec<u8> = (0..5).flat_map(|i| record(i as u8, |_| 0)).collect();
    fs::write(&path, &bytes).unwrap();
    assert_eq!(load_cifar10(&path).unwrap().len(), 5);
    let spec = DatasetSpec {
        source: DataSource::Cifar10 {
            path: path.clone(),
            limit: Some(2),
        },
        label_fraction: 0.0,
    };
    let d = spec.load(0).unwrap();
    assert_eq!(d.labels, vec![0, 1]);
    assert!(matches!(
        load_cifar10(&dir.path().join("missing.bin")),
        Err(ClabError::Io { .. })
    ));
}

#[test]
fn checkpoint_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.clab");
    let mut ck = Checkpoint::new(EncoderParams::init(&[12, 8, 4], &mut RngStream::new(3)).unwrap());
    ck.step = 99;
    ck.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"CLAB1");
    assert_eq!(
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()),
        99
    );
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}
