//! Patchwise metric tables for several simulators and the correlation between
//! metrics across them (Pearson above the diagonal, Spearman below).

use goldendie::metrics::PatchMetric;
use goldendie::palette::{fit_palette, quantize, reconstruct};
use goldendie::raster::split_patches;
use goldendie::report::{correlation_from_rows, evaluate_regions, ModelTag};
use goldendie::synth::{generate, SynthConfig};
use goldendie::tree::{predict_tree, train_tree};

fn main() -> goldendie::Result<()> {
    let wafer = generate(&SynthConfig {
        size: 512,
        ..SynthConfig::default()
    })?;
    let photo = &wafer.photo;
    let split = split_patches(512, 512, 64, 0.7, 0)?;
    let metrics = [PatchMetric::L1, PatchMetric::L2, PatchMetric::Psnr, PatchMetric::Ssim];

    let mut sims = vec![("golden".to_string(), wafer.golden.clone())];
    for k in [8, 64] {
        let palette = fit_palette(photo, k, 200_000, 0)?;
        sims.push((format!("quantized{k}"), reconstruct(&quantize(photo, &palette), &palette)?));
        let tree = train_tree(&wafer.cad, &quantize(photo, &palette), k, 1_000_000, 0)?;
        sims.push((format!("tree{k}"), predict_tree(&tree, &wafer.cad, &palette)?));
    }

    let mut rows = Vec::new();
    for (name, sim) in &sims {
        let tag = ModelTag {
            dataset: "synthetic".into(),
            model: name.clone(),
            loss: "-".into(),
            epoch: None,
        };
        rows.extend(tag.rows(&evaluate_regions(sim, photo, &split.val, &metrics)?));
    }
    for r in &rows {
        println!("{:<11} {:<5} {:>10.5} ({:.5})", r.model, r.metric, r.mean, r.sd);
    }

    let table = correlation_from_rows(&rows)?;
    println!("\n{:>6} {}", "", table.metrics.iter().map(|m| format!("{m:>7}")).collect::<String>());
    for (m, row) in table.metrics.iter().zip(table.combined()) {
        println!("{m:>6} {}", row.iter().map(|v| format!("{v:>7.3}")).collect::<String>());
    }
    Ok(())
}
