//! Trains the same toy scene with different decoder embeddings and compares training
//! PSNR. The images carry a per-view brightness change, so a decoder without any
//! camera input has to settle for an average.
//!
//! cargo run --release --example embedding_ablation -- [iterations] [seed] [densify]

use featsplat::dataset::{make_toy_dataset, ToySpec};
use featsplat::decoder::EmbeddingConfig;
use featsplat::metrics::psnr;
use featsplat::trainer::{render_view, train, TrainConfig};

fn main() -> featsplat::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(1500);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    // At 64x64 the screen-space densification threshold fires on nearly every
    // Gaussian, so it is off unless asked for.
    let densify = args.next().is_some_and(|a| a != "0");

    let spec = ToySpec {
        view_brightness: 0.3,
        ..ToySpec::three_gaussians()
    };
    let toy = make_toy_dataset(&spec, seed)?;
    for list in ["none", "pixel", "campos", "pixel,campos", "pixel,campos,camrot"] {
        let cfg = TrainConfig {
            iterations,
            embedding: EmbeddingConfig::parse_list(list)?,
            seed,
            probe_interval: iterations,
            densify_until: if densify { TrainConfig::default().densify_until } else { 0 },
            ..TrainConfig::default()
        };
        let out = train(&toy.dataset, &cfg, |_| {})?;
        let mut sum = 0.0;
        let mut n = 0;
        for view in toy.dataset.train_views() {
            sum += psnr(&render_view(&out.scene, &out.decoder, &view.camera, &cfg.background)?, &view.image)?;
            n += 1;
        }
        let test = toy.dataset.test_views().next().expect("toy has a test view");
        let held_out = psnr(&render_view(&out.scene, &out.decoder, &test.camera, &cfg.background)?, &test.image)?;
        println!("{list:<22} train PSNR {:6.2} dB   held-out {held_out:6.2} dB", sum / n as f64);
    }
    Ok(())
}
