use featsplat::dataset::{make_toy_dataset, ToySpec};
use featsplat::format::load_scene;
use featsplat::trainer::{train, TrainConfig};

fn small_spec() -> ToySpec {
    ToySpec {
        width: 32,
        height: 32,
        focal: 35.0,
        train_views: 6,
        test_views: 2,
        ..ToySpec::three_gaussians()
    }
}

fn config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        densify_from: 40,
        densify_interval: 40,
        opacity_reset_interval: 100,
        probe_interval: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_decreases_and_checkpoints_load() {
    let toy = make_toy_dataset(&small_spec(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_interval: 50,
        ..config(150)
    };
    let mut seen = 0;
    let out = train(&toy.dataset, &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 150);
    let mean = |r: std::ops::Range<usize>| out.log[r.clone()].iter().map(|e| e.loss).sum::<f64>() / r.len() as f64;
    assert!(mean(130..150) < 0.7 * mean(0..20), "{} vs {}", mean(130..150), mean(0..20));
    for it in [50, 100, 150] {
        let (scene, dec) = load_scene(&dir.path().join(format!("iter_{it:06}.fspl"))).unwrap();
        assert_eq!(scene.feature_dim, 16);
        assert_eq!(dec.output_dim(), 3);
        if it == 150 {
            assert_eq!(scene.len(), out.scene.len());
        }
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
}

#[test]
fn same_seed_same_result() {
    let toy = make_toy_dataset(&small_spec(), 5).unwrap();
    let a = train(&toy.dataset, &config(60), |_| ()).unwrap();
    let b = train(&toy.dataset, &config(60), |_| ()).unwrap();
    assert_eq!(a.scene, b.scene);
    assert_eq!(a.decoder, b.decoder);
    let c = train(&toy.dataset, &TrainConfig { seed: 1, ..config(60) }, |_| ()).unwrap();
    assert_ne!(a.scene, c.scene);
}

#[test]
fn mismatched_class_count_is_rejected() {
    let toy = make_toy_dataset(&ToySpec { width: 16, height: 16, focal: 18.0, ..ToySpec::two_class() }, 0).unwrap();
    let cfg = TrainConfig { class_count: 5, ..config(1) };
    assert!(train(&toy.dataset, &cfg, |_| ()).is_err());
}
