//! Generates a synthetic wafer and writes it as a dataset directory.
//!
//! ```text
//! cargo run --release --example generate_dataset -- [size] [seed] [out_dir]
//! ```

use std::path::PathBuf;

use goldendie::dataset::save_dataset;
use goldendie::io;
use goldendie::synth::{generate, SynthConfig};

fn main() -> goldendie::Result<()> {
    let mut args = std::env::args().skip(1);
    let size = args.next().map_or(1024, |s| s.parse().expect("size"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("goldendie_dataset"), PathBuf::from);

    let config = SynthConfig {
        size,
        seed,
        ..SynthConfig::default()
    };
    let wafer = generate(&config)?;
    println!("{}", wafer.report);
    println!(
        "{} glyphs, {} pads, {} traces, {} waveguides",
        wafer.scene.glyphs.len(),
        wafer.scene.pads.len(),
        wafer.scene.traces.len(),
        wafer.scene.waveguides.len()
    );

    save_dataset(&out, "synthetic", &wafer.photo, &wafer.cad, Some(&wafer.labels), seed, 0.7)?;
    io::write_photo(&out.join("golden.png"), &wafer.golden)?;
    println!("wrote {}", out.display());
    Ok(())
}
