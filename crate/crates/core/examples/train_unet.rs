//! Trains a classification U-Net, keeps the best epoch, and round-trips it
//! through a model file.
//!
//! ```text
//! cargo run --release --example train_unet -- [size] [epochs] [batch]
//! ```

use goldendie::checkpoint::{decode_unet, encode_unet};
use goldendie::infer::infer;
use goldendie::metrics::l2;
use goldendie::palette::fit_palette;
use goldendie::synth::{generate, SynthConfig};
use goldendie::train::{select_best, train_unet, SelectBy, TrainConfig};

fn main() -> goldendie::Result<()> {
    let mut args = std::env::args().skip(1);
    let size = args.next().map_or(512, |s| s.parse().expect("size"));
    let epochs = args.next().map_or(3, |s| s.parse().expect("epochs"));
    let batch = args.next().map_or(2, |s| s.parse().expect("batch"));

    let wafer = generate(&SynthConfig {
        size,
        ..SynthConfig::default()
    })?;
    let palette = fit_palette(&wafer.photo, 64, wafer.photo.pixel_count().min(1_000_000), 0)?;
    let config = TrainConfig {
        epochs,
        batch_size: batch,
        ..TrainConfig::adam_preset()
    };
    let run = train_unet(&wafer.cad, &wafer.photo, Some(&palette), &config, |c| {
        let s = &c.scores;
        println!(
            "epoch {:>2}  lr {:.1e}  train {:.4}  val ce {:.4}  val l2 {:.6}",
            s.epoch,
            s.lr,
            s.train_loss,
            s.val_ce.unwrap_or(f64::NAN),
            s.val_l2
        );
    })?;
    let best = &run.checkpoints[select_best(&run.checkpoints, SelectBy::L2)?];
    println!("best epoch {}", best.epoch());

    let bytes = encode_unet(best);
    let mut reloaded = decode_unet(&bytes)?;
    let mut original = best.model.clone();
    let a = infer(&mut original, &wafer.cad, Some(&palette), 256, 20)?;
    let b = infer(&mut reloaded.model, &wafer.cad, Some(&palette), 256, 20)?;
    println!("model file {} bytes, reload identical: {}", bytes.len(), a == b);
    println!("whole-wafer l2 {:.6}", l2(&a, &wafer.photo)?);
    Ok(())
}
