//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! cargo test --release --test acceptance

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use featsplat::dataset::{make_toy_dataset, scene_extent, ToySpec};
use featsplat::decoder::{Decoder, EmbeddingConfig, EmbeddingOverrides};
use featsplat::gradcheck::{check_gradients, random_instance};
use featsplat::img::Image;
use featsplat::loss::{ce_loss, l1_loss, ssim, LossConfig, IGNORE_LABEL};
use featsplat::metrics::{psnr, psnr_from_mse, weighted_miou};
use featsplat::raster::{blend_forward, blend_forward_with, blend_reference, RasterSettings};
use featsplat::trainer::{render_decoded, render_view, train, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{front_camera, max_abs_diff, random_scene};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn rasterizer_matches_reference() -> Verdict {
    let start = Instant::now();
    let cam = front_camera(64, 64);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(100, 4, &mut rng);
        let tiled = blend_forward(&scene, &cam);
        let reference = blend_reference(&scene, &cam);
        worst = worst
            .max(max_abs_diff(&tiled.feature_map, &reference.feature_map))
            .max(max_abs_diff(&tiled.transmittance_map, &reference.transmittance_map));
    }
    let t = start.elapsed();
    check(
        worst <= 1e-9 && within(t, 30.0),
        format!("20 scenes, max |tiled - reference| = {worst:.2e}, {:.1} s", t.as_secs_f64()),
    )
}

fn end_to_end_gradients() -> Verdict {
    let start = Instant::now();
    let (scene, dec, view) = random_instance(10, 16, 8, 4, 7).map_err(|e| e.to_string())?;
    let cfg = LossConfig {
        lambda_ssim: 0.2,
        lambda_sem: 0.001,
    };
    let report = check_gradients(&scene, &dec, &view, &cfg, &[0.1, 0.2, 0.3], 1e-4).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let classes_ok = report.classes.iter().all(|c| c.checked > 0);
    check(
        report.max_rel_error() < 1e-4 && report.skipped() == 0 && classes_ok && within(t, 120.0),
        format!(
            "{} probes over 9 parameter classes, {} skipped, max rel err {:.2e}, {:.1} s",
            report.checked(),
            report.skipped(),
            report.max_rel_error(),
            t.as_secs_f64()
        ),
    )
}

fn blending_invariants() -> Verdict {
    let cam = front_camera(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let mut pixels = 0;
    let mut bad_weights = 0;
    let mut max_sum = 0.0f64;
    let mut sum_vs_t = 0.0f64;
    for _ in 0..5 {
        let scene = random_scene(100, 3, &mut rng);
        let render = blend_forward(&scene, &cam);
        let state = render.state.as_ref().unwrap();
        for _ in 0..200 {
            let (u, v) = (rng.random_range(0..64), rng.random_range(0..64));
            let weights = state.pixel_weights(u, v);
            bad_weights += weights.iter().filter(|w| !(0.0..=1.0).contains(&w.weight)).count();
            let sum: f64 = weights.iter().map(|w| w.weight).sum();
            max_sum = max_sum.max(sum);
            sum_vs_t = sum_vs_t.max((sum - (1.0 - render.transmittance(u, v))).abs());
            pixels += 1;
        }
    }

    let scene = random_scene(100, 5, &mut rng);
    let tiled: Vec<_> = [8, 16, 32]
        .iter()
        .map(|&tile_size| {
            blend_forward_with(
                &scene,
                &cam,
                &RasterSettings {
                    tile_size,
                    ..RasterSettings::default()
                },
            )
        })
        .collect();
    let tile_diff = max_abs_diff(&tiled[0].feature_map, &tiled[1].feature_map)
        .max(max_abs_diff(&tiled[2].feature_map, &tiled[1].feature_map));

    let mut doubled = scene.clone();
    doubled.gaussians.iter_mut().for_each(|g| g.feature.iter_mut().for_each(|f| *f *= 2.0));
    let twice = blend_forward(&doubled, &cam);
    let linear = twice.feature_map.iter().zip(&tiled[1].feature_map).all(|(a, b)| *a == 2.0 * b);

    check(
        bad_weights == 0 && max_sum <= 1.0 && sum_vs_t < 1e-12 && tile_diff <= 1e-9 && linear,
        format!(
            "{pixels} pixels: {bad_weights} weights outside [0,1], max sum {max_sum:.6}; \
             tiles 8/16/32 differ by {tile_diff:.1e}; 2x features exact: {linear}"
        ),
    )
}

fn held_out_psnr(out: &TrainOutcome, toy: &featsplat::dataset::ToyDataset) -> f64 {
    let view = toy.dataset.test_views().next().unwrap();
    psnr(&render_view(&out.scene, &out.decoder, &view.camera, &[0.0; 3]).unwrap(), &view.image).unwrap()
}

fn toy_convergence() -> Verdict {
    let start = Instant::now();
    let mut scores = Vec::new();
    for seed in 0..5 {
        let toy = make_toy_dataset(&ToySpec::three_gaussians(), seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            iterations: 2000,
            feature_dim: 16,
            embedding: EmbeddingConfig::default(),
            seed,
            probe_interval: 2000,
            ..TrainConfig::default()
        };
        let out = train(&toy.dataset, &cfg, |_| {}).map_err(|e| e.to_string())?;
        scores.push(held_out_psnr(&out, &toy));
    }
    let t = start.elapsed();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[2];
    let list: Vec<String> = scores.iter().map(|s| format!("{s:.2}")).collect();
    check(
        median >= 30.0 && within(t, 300.0),
        format!(
            "held-out PSNR per seed [{}] dB, median {median:.2} dB, {:.0} s",
            list.join(", "),
            t.as_secs_f64()
        ),
    )
}

fn semantic_toy() -> Verdict {
    let toy = make_toy_dataset(&ToySpec::two_class(), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 2000,
        class_count: 2,
        loss: LossConfig {
            lambda_sem: 0.05,
            ..LossConfig::default()
        },
        densify_until: 0,
        probe_interval: 2000,
        ..TrainConfig::default()
    };
    let out = train(&toy.dataset, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let mut train_min = f64::INFINITY;
    let mut held_out = f64::NAN;
    for view in &toy.dataset.views {
        let d = render_decoded(&out.scene, &out.decoder, &view.camera, &[0.0; 3], &EmbeddingOverrides::default())
            .map_err(|e| e.to_string())?;
        let miou = weighted_miou(&d.labels(), view.labels.as_ref().unwrap(), 2).map_err(|e| e.to_string())?;
        match view.split {
            featsplat::dataset::Split::Train => train_min = train_min.min(miou),
            featsplat::dataset::Split::Test => held_out = miou,
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dim_64 = Decoder::random(32, EmbeddingConfig::default(), 64, &mut rng).output_dim();
    check(
        train_min == 1.0 && held_out >= 0.95 && out.decoder.output_dim() == 5 && dim_64 == 67,
        format!(
            "min train mIoU {train_min:.4}, held-out {held_out:.4}; output dims {} (C=2), {dim_64} (C=64)",
            out.decoder.output_dim()
        ),
    )
}

fn closed_form_metrics() -> Verdict {
    let p = psnr_from_mse(0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Image::new(32, 24, 3, (0..32 * 24 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let s = ssim(&img, &img).unwrap();
    let labels: Vec<u32> = (0..50).map(|i| if i % 7 == 0 { IGNORE_LABEL } else { i % 64 }).collect();
    let ce = ce_loss(&vec![0.0; 50 * 64], &labels, 64, IGNORE_LABEL).unwrap();
    let ce_err = (ce - 64f64.ln()).abs();
    check(
        p == 20.0 && (s - 1.0).abs() < 1e-12 && ce_err <= 1e-9,
        format!("PSNR(0.01) = {p}, SSIM(I,I) = {s}, |CE - ln 64| = {ce_err:.1e}"),
    )
}

/// Trains on the toy scene with baked per-view brightness; returns mean train PSNR.
fn brightness_run(embedding: EmbeddingConfig) -> Result<(f64, TrainOutcome, featsplat::dataset::ToyDataset), String> {
    let spec = ToySpec {
        view_brightness: 0.3,
        ..ToySpec::three_gaussians()
    };
    let toy = make_toy_dataset(&spec, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        iterations: 1500,
        embedding,
        densify_until: 0,
        probe_interval: 1500,
        ..TrainConfig::default()
    };
    let out = train(&toy.dataset, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = toy
        .dataset
        .train_views()
        .map(|v| psnr(&render_view(&out.scene, &out.decoder, &v.camera, &[0.0; 3]).unwrap(), &v.image).unwrap())
        .collect();
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, out, toy))
}

fn embedding_ablation(trained: &mut Option<(TrainOutcome, featsplat::dataset::ToyDataset)>) -> Verdict {
    let (with, out, toy) = brightness_run(EmbeddingConfig::default())?;
    let (without, _, _) = brightness_run(EmbeddingConfig::NONE)?;
    *trained = Some((out, toy));
    check(
        with >= without,
        format!("train PSNR {{e_p, x_cam}} {with:.2} dB vs {{none}} {without:.2} dB"),
    )
}

fn relighting(trained: &Option<(TrainOutcome, featsplat::dataset::ToyDataset)>) -> Verdict {
    let Some((out, toy)) = trained else {
        return Err("no trained scene from the ablation run".into());
    };
    let view = toy.dataset.test_views().next().unwrap();
    let cam = &view.camera;
    let extent = scene_extent(&toy.dataset.cameras());
    let c = cam.camera_center();
    let render = |campos: [f64; 3]| {
        let ov = EmbeddingOverrides {
            campos: Some(campos),
            ..Default::default()
        };
        let d = render_decoded(&out.scene, &out.decoder, cam, &[0.0; 3], &ov).unwrap();
        Image::new(cam.width, cam.height, 3, d.rgb).unwrap()
    };
    let base = render([c.x, c.y, c.z]);
    let moved = render([c.x + extent, c.y, c.z]);
    let diff = l1_loss(&base, &moved).unwrap();
    check(
        diff > 1e-3,
        format!("campos shifted by the extent {extent:.2}: mean |diff| {diff:.4}"),
    )
}

fn determinism() -> Verdict {
    let toy = make_toy_dataset(&ToySpec::three_gaussians(), 4).map_err(|e| e.to_string())?;
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let cfg = |dir: &std::path::Path| TrainConfig {
        iterations: 300,
        seed: 11,
        densify_from: 100,
        densify_interval: 100,
        opacity_reset_interval: 200,
        probe_interval: 300,
        checkpoint_dir: Some(dir.to_path_buf()),
        checkpoint_interval: 100,
        ..TrainConfig::default()
    };
    let sequential = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    for (i, dir) in dirs.iter().enumerate() {
        let run = || train(&toy.dataset, &cfg(dir.path()), |_| {}).map(|_| ());
        let r = if i < 2 { sequential.install(run) } else { run() };
        r.map_err(|e| e.to_string())?;
    }
    let mut compared = 0;
    for it in [100, 200, 300] {
        let name = format!("iter_{it:06}.fspl");
        let files: Vec<Vec<u8>> = dirs
            .iter()
            .map(|d| std::fs::read(d.path().join(&name)).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        if files[0] != files[1] || files[0] != files[2] {
            return Err(format!("{name} differs between runs"));
        }
        compared += 1;
    }
    check(
        compared == 3,
        format!("{compared} checkpoints bitwise identical across 2 sequential runs and 1 pooled run"),
    )
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} {tag}  {name}: {detail} [{secs:.1} s]");
    verdict.is_ok()
}

fn main() {
    let mut trained = None;
    let results = [
        run(1, "rasterizer matches brute-force reference", rasterizer_matches_reference),
        run(2, "end-to-end gradients match finite differences", end_to_end_gradients),
        run(3, "blending invariants", blending_invariants),
        run(4, "toy convergence", toy_convergence),
        run(5, "semantic toy", semantic_toy),
        run(6, "closed-form metrics", closed_form_metrics),
        run(7, "embedding ablation ordering", || embedding_ablation(&mut trained)),
        run(8, "relighting through the campos input", || relighting(&trained)),
        run(9, "determinism", determinism),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
