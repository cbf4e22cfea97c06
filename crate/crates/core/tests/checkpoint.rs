mod common;

use anonface::pipeline::{
    load_checkpoint, read_archive, save_checkpoint, write_archive, Trainer, ARCHIVE_MAGIC, MANIFEST_FILE,
};
use anonface::Error;
use candle_core::{Device, Tensor};
use common::{bits, trainer};

fn trained(steps: usize) -> Trainer {
    let mut t = trainer(10);
    for _ in 0..steps {
        t.train_step().unwrap();
    }
    t
}

#[test]
fn round_trip_forward_is_bit_identical() {
    let t = trained(2);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), t.models(), t.config(), t.step(), Some(t.optimizer())).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.manifest.step, 2);
    assert_eq!(&loaded.manifest.config.model, t.models().config());

    let batch = t.draw_batch(7).unwrap();
    let (before, _) = t.losses(&batch).unwrap();
    let again = Trainer::new(t.config().clone(), loaded.models, t.corpus().clone()).unwrap();
    let (after, _) = again.losses(&batch).unwrap();
    assert_eq!(bits(&before), bits(&after));

    let samples: Vec<_> = t.corpus().samples[..3].to_vec();
    let a = anonface::pipeline::anonymize(&t.models().frozen().unwrap(), &samples, &[1, 2, 3], 5).unwrap();
    let b = anonface::pipeline::anonymize(&again.models().frozen().unwrap(), &samples, &[1, 2, 3], 5).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let straight = trained(4);
    let half = trained(2);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), half.models(), half.config(), half.step(), Some(half.optimizer())).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let mut resumed = Trainer::resume(
        half.config().clone(),
        loaded.models,
        half.corpus().clone(),
        loaded.optimizer.unwrap(),
        loaded.manifest.step,
    )
    .unwrap();
    resumed.train_step().unwrap();
    resumed.train_step().unwrap();
    assert_eq!(resumed.step(), 4);
    for (name, var) in straight.models().store().vars() {
        let other = resumed.models().store().var(&name).unwrap();
        assert_eq!(bits(var.as_tensor()), bits(other.as_tensor()), "{name}");
    }
}

#[test]
fn archive_round_trip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.params");
    let t = Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap();
    write_archive(&path, &[("x.w".into(), t.clone())]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], ARCHIVE_MAGIC);
    // magic + version + count + name_len + "x.w" + rank + 2 dims + 4 floats
    assert_eq!(bytes.len(), 8 + 4 + 4 + 4 + 3 + 4 + 16 + 16);
    assert_eq!(&bytes[bytes.len() - 4..], &3.0f32.to_le_bytes());
    let back = read_archive(&path).unwrap();
    assert_eq!(back[0].0, "x.w");
    assert_eq!(bits(&back[0].1), bits(&t));
}

#[test]
fn corrupt_and_incomplete_checkpoints_are_rejected() {
    let t = trained(0);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), t.models(), t.config(), 0, None).unwrap();
    let good = load_checkpoint(dir.path()).unwrap();
    assert!(good.optimizer.is_none());

    let archive = dir.path().join("harmonizer.params");
    let bytes = std::fs::read(&archive).unwrap();
    std::fs::write(&archive, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 3);

    std::fs::write(&archive, b"not an archive at all").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

    // A well-formed but empty namespace archive leaves parameters missing.
    write_archive(&archive, &[]).unwrap();
    let mut manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    for a in manifest["archives"].as_array_mut().unwrap() {
        if a["namespace"] == "harmonizer" {
            a["tensors"] = 0.into();
        }
    }
    std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&manifest).unwrap()).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");

    std::fs::write(dir.path().join(MANIFEST_FILE), b"{").unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

    let missing = load_checkpoint(&dir.path().join("nope")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}

#[test]
fn tampered_config_is_detected() {
    let t = trained(0);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), t.models(), t.config(), 0, None).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap().replace("\"steps\": 10", "\"steps\": 11");
    std::fs::write(&path, text).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("hash"), "{err}");
}
