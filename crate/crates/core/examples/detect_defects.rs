//! Template matching against a simulated golden die: score map, 0.1
//! threshold, average precision, and the effect of a hallucinated block.

use std::path::PathBuf;

use goldendie::defect::{average_precision, binarize, heatmap, score_pixelwise, triptych, PixelMetric, DEFAULT_THRESHOLD};
use goldendie::io::write_photo;
use goldendie::palette::fit_palette;
use goldendie::palette::quantize;
use goldendie::raster::PatchRegion;
use goldendie::synth::{generate, SynthConfig};
use goldendie::tree::{predict_tree, train_tree};

fn main() -> goldendie::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("goldendie_detect"), PathBuf::from);
    std::fs::create_dir_all(&out).expect("output directory");
    let wafer = generate(&SynthConfig {
        size: 512,
        rate_dust: 40.0,
        rate_nitride: 40.0,
        rate_resist: 40.0,
        ..SynthConfig::default()
    })?;
    let labels = wafer.labels.mask();

    let palette = fit_palette(&wafer.photo, 64, 200_000, 0)?;
    let tree = train_tree(&wafer.cad, &quantize(&wafer.photo, &palette), 64, 1_000_000, 0)?;
    let tree_sim = predict_tree(&tree, &wafer.cad, &palette)?;

    for (name, sim) in [("clean render", &wafer.golden), ("decision tree", &tree_sim)] {
        let map = score_pixelwise(&wafer.photo, sim, PixelMetric::L2)?;
        let pr = average_precision(&map, labels)?;
        let found = binarize(&map, DEFAULT_THRESHOLD);
        println!(
            "{name:<14} AP {:.4}  detections {}  labeled {}",
            pr.average_precision,
            found.count(),
            labels.count()
        );
    }

    // A constant block pasted into the simulation away from any defect.
    let block = (0..512 - 32)
        .step_by(16)
        .flat_map(|y| (0..512 - 32).step_by(16).map(move |x| PatchRegion::new(x, y, 32, 32)))
        .find(|r| labels.extract(r).map(|m| m.count() == 0).unwrap_or(false))
        .expect("a defect-free block");
    let mut corrupted = wafer.golden.clone();
    for y in block.y0..block.y0 + 32 {
        for x in block.x0..block.x0 + 32 {
            corrupted.set_pixel(y, x, [0.0; 3]);
        }
    }
    let map = score_pixelwise(&wafer.photo, &corrupted, PixelMetric::L2)?;
    println!("with a hallucinated block AP {:.4}", average_precision(&map, labels)?.average_precision);

    let view = PatchRegion::new(block.x0.min(512 - 128), block.y0.min(512 - 128), 128, 128);
    let crop = map.extract(&view)?;
    write_photo(&out.join("heatmap.png"), &heatmap(&crop, None))?;
    write_photo(
        &out.join("triptych.png"),
        &triptych(&wafer.photo.extract(&view)?, &corrupted.extract(&view)?, &binarize(&crop, DEFAULT_THRESHOLD))?,
    )?;
    println!("figures in {}", out.display());
    Ok(())
}
