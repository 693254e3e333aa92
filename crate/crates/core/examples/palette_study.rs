//! Reconstruction error of k-means palettes of increasing size, and the
//! colour-path length after ordering.

use goldendie::metrics::l2;
use goldendie::palette::{fit_palette, quantize, reconstruct};
use goldendie::synth::{generate, SynthConfig};

fn main() -> goldendie::Result<()> {
    let size = std::env::args().nth(1).map_or(1024, |s| s.parse().expect("size"));
    let wafer = generate(&SynthConfig {
        size,
        ..SynthConfig::default()
    })?;
    let photo = &wafer.photo;

    println!("{:>3}  {:>10}  {:>10}", "k", "l2", "path");
    for k in [8, 16, 32, 64] {
        let palette = fit_palette(photo, k, photo.pixel_count().min(1_000_000), 0)?;
        let rebuilt = reconstruct(&quantize(photo, &palette), &palette)?;
        println!("{k:>3}  {:>10.6}  {:>10.4}", l2(&rebuilt, photo)?, palette.order_cost());
    }
    Ok(())
}
