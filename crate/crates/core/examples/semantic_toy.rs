//! Trains a semantic head on the two-class toy scene and reports weighted mIoU.
//!
//! cargo run --release --example semantic_toy -- [iterations] [seed] [lambda_sem] [densify]

use featsplat::dataset::{make_toy_dataset, ToySpec};
use featsplat::decoder::EmbeddingOverrides;
use featsplat::loss::LossConfig;
use featsplat::metrics::weighted_miou;
use featsplat::trainer::{render_decoded, train, TrainConfig};

fn main() -> featsplat::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let lambda_sem = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.05);
    let densify = args.next().is_some_and(|a| a != "0");

    let toy = make_toy_dataset(&ToySpec::two_class(), seed)?;
    let cfg = TrainConfig {
        iterations,
        class_count: 2,
        loss: LossConfig {
            lambda_sem,
            ..LossConfig::default()
        },
        seed,
        probe_interval: 100,
        densify_until: if densify { TrainConfig::default().densify_until } else { 0 },
        ..TrainConfig::default()
    };
    let out = train(&toy.dataset, &cfg, |e| {
        if e.iteration % 500 == 0 {
            println!("{e}");
        }
    })?;
    println!("decoder outputs: {}", out.decoder.output_dim());
    for view in &toy.dataset.views {
        let decoded = render_decoded(&out.scene, &out.decoder, &view.camera, &cfg.background, &EmbeddingOverrides::default())?;
        let gt = view.labels.as_ref().expect("toy views carry labels");
        let miou = weighted_miou(&decoded.labels(), gt, 2)?;
        println!("{:?} {}: mIoU {miou:.4}", view.split, view.name);
    }
    Ok(())
}
