mod common;

use std::collections::{BTreeMap, BTreeSet};

use tslab_harness::dataset::{
    gen_dataset, load_manifest, load_split, read_image, synthesize, write_image, DatasetSpec, Split,
};

#[test]
fn default_spec_has_two_thousand_records_split_per_class() {
    let (m, items) = synthesize(&DatasetSpec::default()).unwrap();
    assert_eq!(m.records.len(), 2000);
    assert_eq!(items.len(), 2000);
    let mut counts: BTreeMap<(usize, Split), usize> = BTreeMap::new();
    for r in &m.records {
        assert!(r.label < 10);
        assert!(r.difficulty < 3);
        *counts.entry((r.label, r.split)).or_default() += 1;
    }
    for class in 0..10 {
        assert_eq!(counts[&(class, Split::Train)], 140);
        assert_eq!(counts[&(class, Split::Holdout)], 20);
        assert_eq!(counts[&(class, Split::Test)], 40);
    }
    let files: BTreeSet<&str> = m.records.iter().map(|r| r.file.as_str()).collect();
    assert_eq!(files.len(), 2000);
    assert!(items.iter().all(|i| i.pixels.len() == 3 * 32 * 32));
}

#[test]
fn classes_look_different() {
    let spec = DatasetSpec { classes: 3, per_class: 30, image_size: 16, ..DatasetSpec::default() };
    let (_, items) = synthesize(&spec).unwrap();
    let mean = |c: usize| {
        let mut acc = vec![0.0f64; 3 * 16 * 16];
        let of: Vec<_> = items.iter().filter(|i| i.record.label == c).collect();
        for i in &of {
            for (a, &p) in acc.iter_mut().zip(&i.pixels) {
                *a += p as f64 / of.len() as f64;
            }
        }
        acc
    };
    let (a, b) = (mean(0), mean(1));
    let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    assert!(gap > 5.0, "{gap}");
}

#[test]
fn regeneration_is_byte_identical_and_seeds_differ() {
    let spec = DatasetSpec { classes: 3, per_class: 10, image_size: 8, ..DatasetSpec::default() };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&spec, a.path()).unwrap();
    gen_dataset(&spec, b.path()).unwrap();
    gen_dataset(&DatasetSpec { seed: 1, ..spec }, c.path()).unwrap();
    let sa = common::snapshot(a.path());
    assert_eq!(sa.len(), 30 + 2);
    assert_eq!(sa, common::snapshot(b.path()));
    assert_ne!(sa, common::snapshot(c.path()));
}

#[test]
fn written_dataset_loads_back() {
    let spec = DatasetSpec { classes: 2, per_class: 10, image_size: 8, ..DatasetSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    let written = gen_dataset(&spec, dir.path()).unwrap();
    let m = load_manifest(dir.path()).unwrap();
    assert_eq!(m, written);
    let (_, items) = synthesize(&spec).unwrap();
    let test = load_split(dir.path(), &m, Split::Test).unwrap();
    let want: Vec<_> = items.iter().filter(|i| i.record.split == Split::Test).collect();
    assert_eq!(test.len(), want.len());
    for (s, i) in test.iter().zip(want) {
        assert_eq!(s.id, i.id);
        assert_eq!(s.label, i.record.label);
        assert_eq!(s.image.shape(), &[3, 8, 8]);
        assert!(s.image.data().iter().zip(&i.pixels).all(|(&v, &p)| v == p as f32 / 255.0));
    }
}

#[test]
fn image_container_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.img");
    let px: Vec<u8> = (0..3 * 4 * 4).map(|i| i as u8).collect();
    write_image(&path, 4, 3, &px).unwrap();
    assert_eq!(read_image(&path).unwrap(), (4, 3, px));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_image(&path).is_err());
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_image(&path).is_err());
}

#[test]
fn missing_manifest_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_manifest(&dir.path().join("nowhere")).unwrap_err();
    assert!(matches!(err, tslab_core::CoreError::Config(_)));
    assert!(err.to_string().contains("nowhere"));
}

#[test]
fn invalid_specs_are_rejected() {
    let base = DatasetSpec::default();
    for bad in [
        DatasetSpec { classes: 1, ..base.clone() },
        DatasetSpec { classes: 11, ..base.clone() },
        DatasetSpec { image_size: 4, ..base.clone() },
        DatasetSpec { channels: 1, ..base.clone() },
        DatasetSpec { per_class: 0, ..base.clone() },
    ] {
        assert!(synthesize(&bad).is_err(), "{bad:?}");
    }
}
