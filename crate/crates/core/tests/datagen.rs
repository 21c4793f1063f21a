use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use noiseflow::datagen::{build_dataset, load_manifest, load_split, DataError, GenConfig, Split, MANIFEST_FILE};
use noiseflow::raster::{load_raster, LayoutMask};
use noiseflow::simulator::{simulate, Scenario};

fn small(samples: usize) -> GenConfig {
    GenConfig { grid_size: 32, building_count: (2, 5), building_size: (3, 8), samples, seed: 3, ..GenConfig::default() }
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ten_samples_give_layouts_targets_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small(10), dir.path()).unwrap();
    let all = files(dir.path());
    let rasters = all.iter().filter(|p| p.extension().is_some_and(|e| e == "nfr")).count();
    assert_eq!(rasters, 10 + 30);
    assert_eq!(all.len(), 41);
    assert!(all.contains(&PathBuf::from(MANIFEST_FILE)));
    assert_eq!(load_manifest(dir.path()).unwrap(), m);

    // Targets are the simulator's output for the stored layout.
    let rec = &m.samples[4];
    let mask = LayoutMask::from_raster(&load_raster(&dir.path().join(&rec.layout)).unwrap()).unwrap();
    for (&s, rel) in &rec.targets {
        let stored = load_raster(&dir.path().join(rel)).unwrap();
        assert_eq!(stored, simulate(&mask, &m.config.scenario_config(s)).unwrap().to_raster());
    }
}

#[test]
fn rebuild_is_bitwise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small(12), a.path()).unwrap();
    build_dataset(&small(12), b.path()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    for rel in fa {
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel:?}");
    }
}

#[test]
fn interrupted_build_resumes_to_the_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small(12), a.path()).unwrap();
    build_dataset(&small(12), b.path()).unwrap();
    // Simulate a crash: manifest never written, one target truncated.
    fs::remove_file(b.path().join(MANIFEST_FILE)).unwrap();
    let victim = b.path().join("targets/reflection/000007.nfr");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_manifest(b.path()).is_err());
    build_dataset(&small(12), b.path()).unwrap();
    for rel in files(a.path()) {
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel:?}");
    }
}

#[test]
fn corrupted_raster_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small(10), dir.path()).unwrap();
    let test_id = m.ids(Split::Test).next().unwrap().to_string();
    let path = dir.path().join(format!("targets/baseline/{test_id}.nfr"));
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, bytes).unwrap();
    match load_split(dir.path(), &m, Split::Test, Scenario::Baseline) {
        Err(DataError::Raster { path: p, .. }) => assert!(p.ends_with(&format!("{test_id}.nfr"))),
        other => panic!("expected raster error, got {:?}", other.map(|v| v.len())),
    }
    // Other splits are untouched.
    assert!(load_split(dir.path(), &m, Split::Train, Scenario::Baseline).is_ok());
}

#[test]
fn splits_partition_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small(23), dir.path()).unwrap();
    let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| m.ids(s).collect()).collect();
    assert_eq!(sets.iter().map(|s| s.len()).collect::<Vec<_>>(), [18, 2, 3]);
    let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
    assert_eq!(union.len(), 23);
    let train = load_split(dir.path(), &m, Split::Train, Scenario::Diffraction).unwrap();
    assert_eq!(train.len(), 18);
    assert!(train.iter().all(|s| sets[0].contains(s.id.as_str())));
}
