//! Sweeps the camera-position input of the decoder while keeping the real camera
//! fixed, which changes the learned view-dependent shading of a trained scene.
//!
//! cargo run --release --example relight_sweep -- [out_dir] [iterations]
//!
//! Writes one PNG per override plus the unmodified render.

use std::path::PathBuf;

use featsplat::dataset::{make_toy_dataset, scene_extent, ToySpec};
use featsplat::decoder::EmbeddingOverrides;
use featsplat::img::Image;
use featsplat::loss::l1_loss;
use featsplat::trainer::{render_decoded, train, TrainConfig};

fn main() -> featsplat::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "relight".into()));
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    std::fs::create_dir_all(&out_dir).expect("create output directory");

    // Baked view-dependent brightness gives the decoder a reason to use x_cam.
    let spec = ToySpec {
        view_brightness: 0.3,
        ..ToySpec::three_gaussians()
    };
    let toy = make_toy_dataset(&spec, 0)?;
    let cfg = TrainConfig {
        iterations,
        probe_interval: iterations,
        ..TrainConfig::default()
    };
    let trained = train(&toy.dataset, &cfg, |_| {})?;
    let extent = scene_extent(&toy.dataset.cameras());
    let view = toy.dataset.test_views().next().expect("toy has a test view");
    let cam = &view.camera;
    let center = cam.camera_center();

    let render = |overrides: &EmbeddingOverrides| -> featsplat::error::Result<Image> {
        let d = render_decoded(&trained.scene, &trained.decoder, cam, &cfg.background, overrides)?;
        Image::new(cam.width, cam.height, 3, d.rgb)
    };
    let base = render(&EmbeddingOverrides::default())?;
    base.write_png(&out_dir.join("base.png"))?;
    println!("scene extent {extent:.3}");
    for k in -2..=2 {
        let shift = k as f64 * 0.5 * extent;
        let campos = [center.x + shift, center.y, center.z];
        let img = render(&EmbeddingOverrides {
            campos: Some(campos),
            ..Default::default()
        })?;
        let name = format!("campos_{k:+}.png");
        img.write_png(&out_dir.join(&name))?;
        println!("{name}: x shifted by {shift:+.3}, mean |diff| vs base {:.5}", l1_loss(&img, &base)?);
    }
    for (i, uv) in [[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]].into_iter().enumerate() {
        let img = render(&EmbeddingOverrides {
            pixel: Some(uv),
            ..Default::default()
        })?;
        let name = format!("pixel_{i}.png");
        img.write_png(&out_dir.join(&name))?;
        println!("{name}: e_p fixed at {uv:?}, mean |diff| vs base {:.5}", l1_loss(&img, &base)?);
    }
    Ok(())
}
