//! Whole-pixel misalignment between photo and CAD shows up as thin edge
//! artifacts in the score map; an exhaustive shift search finds and undoes it.

use goldendie::defect::{average_precision, misalignment_probe, score_pixelwise, shift_image, PixelMetric};
use goldendie::synth::{generate, SynthConfig};

fn main() -> goldendie::Result<()> {
    let shift = std::env::args().nth(1).map_or(2, |s| s.parse().expect("shift"));
    let base = SynthConfig {
        size: 512,
        ..SynthConfig::default()
    };
    let aligned = generate(&base)?;
    let shifted = generate(&SynthConfig {
        misalignment_px: shift,
        ..base
    })?;

    let probe = misalignment_probe(&shifted.photo, &aligned.golden, 4)?;
    println!("{probe}");

    let labels = shifted.labels.mask();
    let before = score_pixelwise(&shifted.photo, &aligned.golden, PixelMetric::L2)?;
    let realigned = shift_image(&shifted.photo, probe.shift.0, probe.shift.1);
    let after = score_pixelwise(&realigned, &aligned.golden, PixelMetric::L2)?;
    println!(
        "AP against the clean render: {:.4} misaligned, {:.4} realigned",
        average_precision(&before, labels)?.average_precision,
        average_precision(&after, &shift_mask(labels, probe.shift))?.average_precision
    );
    Ok(())
}

fn shift_mask(mask: &goldendie::raster::Mask, (dx, dy): (i32, i32)) -> goldendie::raster::Mask {
    let (h, w) = mask.dims();
    let mut out = goldendie::raster::Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let sy = (y as i64 - dy as i64).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 - dx as i64).clamp(0, w as i64 - 1) as usize;
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}
