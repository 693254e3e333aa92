//! Fits the pixelwise decision-tree simulator and checks it against a direct
//! per-pattern majority vote.

use std::collections::HashMap;

use goldendie::metrics::l2;
use goldendie::palette::{fit_palette, quantize};
use goldendie::synth::{generate, SynthConfig};
use goldendie::tree::{predict_classes, predict_tree, train_tree};

fn main() -> goldendie::Result<()> {
    let wafer = generate(&SynthConfig::default())?;
    let palette = fit_palette(&wafer.photo, 64, 1_000_000, 0)?;
    let target = quantize(&wafer.photo, &palette);
    let model = train_tree(&wafer.cad, &target, palette.len(), 1_000_000, 0)?;
    println!("{} nodes, depth {}", model.nodes().len(), model.depth());

    let (h, w) = wafer.cad.dims();
    let mut votes: HashMap<u64, [u64; 64]> = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            votes.entry(wafer.cad.pattern(y, x)).or_insert([0; 64])[target.get(y, x) as usize] += 1;
        }
    }
    for (pattern, counts) in &votes {
        let tree_class = model.predict_pattern(*pattern);
        println!(
            "pattern {pattern:05b}: tree -> {tree_class:>2} ({} px, {} agree)",
            counts.iter().sum::<u64>(),
            counts[tree_class as usize]
        );
    }

    let classes = predict_classes(&model, &wafer.cad)?;
    let sim = predict_tree(&model, &wafer.cad, &palette)?;
    println!("distinct predicted classes: {}", {
        let mut c = classes.as_slice().to_vec();
        c.sort_unstable();
        c.dedup();
        c.len()
    });
    println!("whole-wafer l2 vs photo  {:.6}", l2(&sim, &wafer.photo)?);
    println!("whole-wafer l2 vs golden {:.6}", l2(&sim, &wafer.golden)?);
    Ok(())
}
