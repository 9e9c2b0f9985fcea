use featsplat::dataset::{load_dataset, make_toy_dataset, save_dataset, ToySpec, MANIFEST};
use featsplat::error::Error;
use featsplat::loss::IGNORE_LABEL;

fn small_spec() -> ToySpec {
    ToySpec {
        width: 24,
        height: 20,
        focal: 26.0,
        train_views: 4,
        test_views: 2,
        ..ToySpec::two_class()
    }
}

#[test]
fn save_load_roundtrip() {
    let toy = make_toy_dataset(&small_spec(), 3).unwrap();
    let mut ds = toy.dataset;
    ds.seed_points = vec![nalgebra::Vector3::new(0.5, -0.25, 1.0)];
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.class_count, 2);
    assert_eq!(back.seed_points, ds.seed_points);
    assert_eq!(back.views.len(), ds.views.len());
    for (a, b) in ds.views.iter().zip(&back.views) {
        assert_eq!(a.split, b.split);
        assert_eq!(a.labels, b.labels);
        assert_eq!(b.image, a.image.quantized());
        assert!((a.camera.camera_center() - b.camera.camera_center()).norm() < 1e-12);
    }
}

#[test]
fn labels_include_ignored_pixels() {
    let toy = make_toy_dataset(&small_spec(), 0).unwrap();
    let labels: Vec<u32> = toy.dataset.views.iter().flat_map(|v| v.labels.clone().unwrap()).collect();
    assert!(labels.contains(&0) && labels.contains(&1));
    assert!(labels.contains(&IGNORE_LABEL));
    assert!(labels.iter().all(|&l| l < 2 || l == IGNORE_LABEL));
}

#[test]
fn missing_image_names_the_view() {
    let toy = make_toy_dataset(&small_spec(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&toy.dataset, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("images/0002.png")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Dataset(msg)) => assert!(msg.contains("images/0002.png"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    let toy = make_toy_dataset(&small_spec(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&toy.dataset, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap().replace("\"class_count\": 2", "\"class_count\": 1");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(m)) if m.contains("class_count")));
}

#[test]
fn malformed_manifest_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    assert!(matches!(load_dataset(&dir.path().join("nowhere")), Err(Error::Io { .. })));
}
