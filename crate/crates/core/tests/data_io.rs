//! File formats, manifests and synthetic data on disk.

mod common;

use std::fs;
use std::path::Path;

use p2sc_core::data::{
    decode_binary, encode_binary, format_xyz, generate_synthetic, half_space_parts, load_cloud, load_dataset, parse_xyz,
    save_cloud, save_part_labels, split_manifest, synthetic_dataset, write_dataset, DatasetManifest, ManifestEntry,
    ShapeFamily, SyntheticSpec,
};
use p2sc_core::points::PointCloud;
use p2sc_core::Error;
use proptest::prelude::*;

fn f32_cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3((-1e3f32..1e3).prop_map(f64::from)), 1..50)
}

proptest! {
    #[test]
    fn binary_round_trip_is_lossless(coords in f32_cloud(), with_parts in any::<bool>()) {
        let n = coords.len();
        let axes = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        let normals = Some((0..n).map(|i| axes[i % 3]).collect());
        let parts = with_parts.then(|| (0..n).map(|i| i % 3).collect());
        let cloud = PointCloud::with_attributes(coords, normals, parts).unwrap();
        let back = decode_binary(&encode_binary(&cloud).unwrap()).unwrap();
        prop_assert_eq!(back, cloud);
    }

    #[test]
    fn text_round_trip_keeps_nine_digits(coords in prop::collection::vec(prop::array::uniform3(-1e4f64..1e4), 1..30)) {
        let cloud = PointCloud::new(coords).unwrap();
        let back = parse_xyz(&format_xyz(&cloud), Path::new("x.xyz")).unwrap();
        for (a, b) in cloud.coords().iter().zip(back.coords()) {
            for e in 0..3 {
                prop_assert!((a[e] - b[e]).abs() <= 5e-9 * a[e].abs().max(f64::MIN_POSITIVE));
            }
        }
    }

    #[test]
    fn synthetic_generation_is_pure(family in 0usize..8, seed in any::<u64>(), count in 1usize..4) {
        let spec = SyntheticSpec { family: ShapeFamily::ALL[family], points_per_cloud: 40, jitter_sigma: 0.02, seed };
        prop_assert_eq!(generate_synthetic(&spec, count).unwrap(), generate_synthetic(&spec, count).unwrap());
    }
}

#[test]
fn text_file_with_nan_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.xyz");
    fs::write(&path, "0 0 0\n1 nan 0\n").unwrap();
    match load_cloud(&path) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("column 2"), "{msg}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn unknown_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.bin");
    fs::write(&path, b"NOPE0000").unwrap();
    assert!(matches!(load_cloud(&path), Err(Error::Format(_))));
}

#[test]
fn saved_files_load_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    for name in ["c.xyz", "c.p2pc"] {
        let path = dir.path().join(name);
        save_cloud(&path, &cloud).unwrap();
        assert_eq!(load_cloud(&path).unwrap(), cloud, "{name}");
    }
}

#[test]
fn manifest_paths_resolve_against_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("clouds");
    fs::create_dir(&sub).unwrap();
    let cloud = half_space_parts(&PointCloud::new(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0]]).unwrap()).unwrap();
    save_cloud(&sub.join("a.xyz"), &cloud).unwrap();
    save_part_labels(&sub.join("a.seg"), cloud.part_labels().unwrap()).unwrap();
    let manifest = DatasetManifest::new(
        vec!["plane".into()],
        vec![ManifestEntry { path: "clouds/a.xyz".into(), label: 0, parts: Some("clouds/a.seg".into()) }],
        dir.path(),
    )
    .unwrap();
    let path = dir.path().join("manifest.json");
    manifest.save(&path).unwrap();
    let loaded = DatasetManifest::load(&path).unwrap();
    let data = load_dataset(&loaded).unwrap();
    assert_eq!(data.samples[0].cloud.part_labels(), Some(&[0, 1, 1][..]));
    assert_eq!(data.samples[0].cloud.coords(), cloud.coords());
}

#[test]
fn written_dataset_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(&[ShapeFamily::Cone, ShapeFamily::Helix], 3, 32, 0.0, 1).unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(&DatasetManifest::load(&dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(back.classes, data.classes);
    assert_eq!(back.len(), 6);
    for (a, b) in back.samples.iter().zip(&data.samples) {
        assert_eq!(a.label, b.label);
        // stored in single precision
        for (p, q) in a.cloud.coords().iter().zip(b.cloud.coords()) {
            for e in 0..3 {
                assert_eq!(p[e], q[e] as f32 as f64);
            }
        }
    }
    let (train, test) = split_manifest(&manifest, 0.5, 3).unwrap();
    assert_eq!(train.len() + test.len(), 6);
}

#[test]
fn cube_points_touch_a_face_before_jitter() {
    let spec = SyntheticSpec { family: ShapeFamily::Cube, points_per_cloud: 200, jitter_sigma: 0.0, seed: 2 };
    for c in generate_synthetic(&spec, 2).unwrap() {
        assert!(c.coords().iter().all(|p| p.iter().any(|v| (v.abs() - 1.0).abs() <= 1e-12)));
    }
}

#[test]
fn normalization_examples() {
    let c = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap().normalized();
    assert_eq!(c.coords(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    let once = common::random_cloud(&mut common::rng(4), 30).normalized();
    let twice = once.normalized();
    assert!(common::max_abs_diff(&once.flat_coords(), &twice.flat_coords()) <= 1e-12);
    assert_eq!(PointCloud::new(vec![[3.0, 1.0, 2.0]]).unwrap().normalized().coords(), &[[0.0; 3]]);
}
