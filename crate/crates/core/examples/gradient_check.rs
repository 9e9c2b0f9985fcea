//! Finite-difference check of every parameter class on a small random problem.
//!
//! cargo run --release --example gradient_check -- [seed] [step]

use featsplat::gradcheck::{check_gradients, random_instance};
use featsplat::loss::LossConfig;

fn main() -> featsplat::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let h = args.next().and_then(|a| a.parse().ok()).unwrap_or(1e-4);
    let (scene, dec, view) = random_instance(10, 16, 8, 4, seed)?;
    let start = std::time::Instant::now();
    let report = check_gradients(&scene, &dec, &view, &LossConfig::default(), &[0.2, 0.3, 0.4], h)?;
    print!("{report}");
    println!(
        "loss {:.6}, {} probes, {} skipped, max relative error {:.3e} in {:.1} s",
        report.loss,
        report.checked(),
        report.skipped(),
        report.max_rel_error(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
