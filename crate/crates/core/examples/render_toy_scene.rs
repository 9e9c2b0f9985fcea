//! Writes the three-Gaussian toy dataset to disk in the on-disk dataset layout.
//!
//! cargo run --release --example render_toy_scene -- <out_dir> [seed] [classes]
//!
//! The directory can then be used with `featsplat train --data <out_dir>`.

use std::path::PathBuf;

use featsplat::dataset::{make_toy_dataset, save_dataset, ToySpec};

fn main() -> featsplat::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_data".into()));
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let classes: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let spec = if classes > 0 { ToySpec::two_class() } else { ToySpec::three_gaussians() };
    let toy = make_toy_dataset(&spec, seed)?;
    save_dataset(&toy.dataset, &out)?;
    for (view, az) in toy.dataset.views.iter().zip(&toy.azimuths) {
        println!("{:<8} {:?}\tazimuth {:6.1} deg", view.name, view.split, az.to_degrees());
    }
    println!("wrote {} views to {}", toy.dataset.views.len(), out.display());
    Ok(())
}
