//! Trains on the three-Gaussian toy dataset and reports held-out PSNR.
//!
//! cargo run --release --example train_toy -- [iterations] [seed]

use std::time::Instant;

use featsplat::dataset::{make_toy_dataset, ToySpec};
use featsplat::metrics::psnr;
use featsplat::trainer::{render_view, train, TrainConfig};

fn main() -> featsplat::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let toy = make_toy_dataset(&ToySpec::three_gaussians(), seed)?;
    let cfg = TrainConfig {
        iterations,
        feature_dim: 16,
        seed,
        probe_interval: 100,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&toy.dataset, &cfg, |e| {
        if e.iteration % 100 == 0 {
            println!("{e}");
        }
    })?;
    let elapsed = start.elapsed();
    for view in toy.dataset.test_views() {
        let img = render_view(&out.scene, &out.decoder, &view.camera, &cfg.background)?;
        println!("held-out {}: {:.2} dB", view.name, psnr(&img, &view.image)?);
    }
    println!(
        "{} iterations in {:.1} s ({:.1} ms/iter), {} Gaussians",
        iterations,
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() * 1e3 / iterations as f64,
        out.scene.len()
    );
    Ok(())
}
