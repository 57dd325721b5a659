use gridpoint_core::Gray;
use gridpoint_net::arch::ArchSpec;
use gridpoint_net::checkpoint::{ModelCheckpoint, FORMAT_VERSION};
use gridpoint_net::train::{predict_full, EpochRecord, HyperParams};
use gridpoint_net::{build_model, load_checkpoint, save_checkpoint, NetError};

fn sample() -> ModelCheckpoint {
    let spec = ArchSpec::with_widths([4, 4, 8], 8);
    ModelCheckpoint {
        arch: spec.clone(),
        hyper: HyperParams::desk(),
        pos_weight: 12.5,
        history: vec![
            EpochRecord {
                epoch: 0,
                train_loss: 0.9,
                train_acc: 0.8,
                val_loss: Some(0.7),
                val_acc: Some(0.85),
            },
            EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_acc: 0.9,
                val_loss: None,
                val_acc: None,
            },
        ],
        complete: false,
        params: build_model(&spec, 11).unwrap(),
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gpck");
    let cp = sample();
    save_checkpoint(&cp, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, cp);
    let probe = Gray::from_shape_fn((64, 128), |(y, x)| ((x * 3 + y * 5) % 256) as f32);
    let (a, b) = (predict_full(&cp, &probe).unwrap(), predict_full(&back, &probe).unwrap());
    assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn every_truncation_is_reported_as_corrupt() {
    let bytes = sample().to_bytes();
    let path = std::path::Path::new("probe.gpck");
    let step = (bytes.len() / 97).max(1);
    for cut in (8..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
        match ModelCheckpoint::from_bytes(&bytes[..cut], path) {
            Err(NetError::Corrupt { .. }) => {}
            other => panic!("cut at {cut}: {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn foreign_files_and_versions_are_rejected() {
    let path = std::path::Path::new("probe.gpck");
    assert!(matches!(ModelCheckpoint::from_bytes(b"PNG....", path), Err(NetError::BadMagic { .. })));
    let mut bytes = sample().to_bytes();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        ModelCheckpoint::from_bytes(&bytes, path),
        Err(NetError::VersionMismatch { found, .. }) if found == FORMAT_VERSION + 1
    ));
    let mut long = sample().to_bytes();
    long.push(0);
    assert!(matches!(ModelCheckpoint::from_bytes(&long, path), Err(NetError::Corrupt { .. })));
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(load_checkpoint("/nonexistent/model.gpck"), Err(NetError::Io { .. })));
}
