use jant::dataset::{read_dataset, read_manifest, write_dataset};
use jant::synthgen::{DatasetConfig, SceneConfig};
use jant::Error;

fn small() -> DatasetConfig {
    DatasetConfig {
        scene: SceneConfig {
            height: 16,
            width: 32,
            sequence_length: 5,
            num_shapes: 2,
            min_shape_size: 3,
            max_shape_size: 6,
            ..Default::default()
        },
        num_samples: 3,
        max_yaw: 1,
        seed: 4,
    }
}

#[test]
fn written_dataset_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let manifest = write_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 3);
    let (back, samples) = read_dataset(dir.path()).unwrap();
    assert_eq!(back, manifest);
    let fresh = cfg.generate().unwrap();
    // frames are quantized to k/255, so the PPM roundtrip is exact
    assert_eq!(samples, fresh);
}

#[test]
fn writing_twice_is_idempotent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&small(), a.path()).unwrap();
    write_dataset(&small(), b.path()).unwrap();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn missing_or_broken_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(Error::Io(_))));
    std::fs::write(dir.path().join("manifest.json"), "{\"num_samples\": 1").unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(Error::Format(_))));
}
