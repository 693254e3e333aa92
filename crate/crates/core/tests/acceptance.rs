//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use goldendie::cli::{self, Cli};
use goldendie::defect::{average_precision, misalignment_probe, score_pixelwise, PixelMetric, ScoreMap};
use goldendie::infer::infer;
use goldendie::metrics::{self, l1, l2, psnr, spearman, ssim, SsimParams};
use goldendie::nn::gradcheck::check_loss;
use goldendie::nn::{Loss, Mode, Target, Tensor, UNet, UNetConfig};
use goldendie::palette::{fit_palette, quantize, reconstruct, Palette};
use goldendie::raster::{Logits, Mask, PatchRegion, QuantizedImage, RasterImage};
use goldendie::report::{read_rows, EpochRow};
use goldendie::synth::{generate, render_clean, SynthConfig, SynthOutput};
use goldendie::train::{select_best, train_unet, Checkpoint, SelectBy, TrainConfig};
use goldendie::tree::{predict_classes, predict_tree, train_tree};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PALETTE_SAMPLE: usize = 1_000_000;
/// Wafer used for the network criteria.
const UNET_SIZE: usize = 1536;
const UNET_BATCH: usize = 2;
const PROPTEST_CASES: u32 = 1000;

struct Ledger {
    lines: Vec<String>,
    failed: usize,
}

impl Ledger {
    fn record(&mut self, id: usize, title: &str, pass: bool, detail: String, started: Instant) {
        let line = format!(
            "{} [{id:>2}] {title}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        println!("{line}");
        if !pass {
            self.failed += 1;
        }
        self.lines.push(line);
    }
}

fn wafer(size: usize, seed: u64) -> SynthOutput {
    generate(&SynthConfig {
        size,
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic wafer")
}

fn palette_for(photo: &RasterImage, seed: u64) -> Palette {
    fit_palette(photo, 64, PALETTE_SAMPLE.min(photo.pixel_count()), seed).expect("palette")
}

fn mean_l2(sim: &RasterImage, photo: &RasterImage, regions: &[PatchRegion]) -> f64 {
    let v: Vec<f64> = regions
        .iter()
        .map(|r| l2(&sim.extract(r).unwrap(), &photo.extract(r).unwrap()).unwrap())
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores and labels of the listed regions pooled into one row.
fn pooled(map: &ScoreMap, labels: &Mask, regions: &[PatchRegion]) -> (ScoreMap, Mask) {
    let mut values = Vec::new();
    let mut bits = Vec::new();
    for r in regions {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                values.push(map.get(y, x));
                bits.push(labels.get(y, x));
            }
        }
    }
    let n = values.len();
    (ScoreMap::new(1, n, values, "l2").unwrap(), Mask::new(1, n, bits).unwrap())
}

fn criterion_1(ledger: &mut Ledger) {
    let t = Instant::now();
    let w = wafer(1024, 0);
    let pal = palette_for(&w.photo, 0);
    let target = quantize(&w.photo, &pal);
    let (h, wd) = w.cad.dims();
    let model = train_tree(&w.cad, &target, 64, h * wd, 0).unwrap();
    let predicted = predict_classes(&model, &w.cad).unwrap();

    let mut votes: HashMap<u64, [u64; 64]> = HashMap::new();
    for y in 0..h {
        for x in 0..wd {
            votes.entry(w.cad.pattern(y, x)).or_insert([0; 64])[target.get(y, x) as usize] += 1;
        }
    }
    let majority: HashMap<u64, u8> = votes
        .iter()
        .map(|(&p, counts)| {
            let best = (0..64).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            (p, best as u8)
        })
        .collect();
    let mut agree = 0usize;
    for y in 0..h {
        for x in 0..wd {
            agree += (predicted.get(y, x) == majority[&w.cad.pattern(y, x)]) as usize;
        }
    }
    let total = h * wd;
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        1,
        "tree equals per-pattern majority oracle",
        agree == total && secs < 60.0,
        format!("{agree}/{total} pixels agree over {} patterns, need 100% in < 60 s", votes.len()),
        t,
    );
}

fn criterion_2(ledger: &mut Ledger) {
    let t = Instant::now();
    let w = wafer(1024, 0);
    let pal = palette_for(&w.photo, 0);
    let model = train_tree(&w.cad, &quantize(&w.photo, &pal), 64, PALETTE_SAMPLE, 0).unwrap();
    let sim = predict_tree(&model, &w.cad, &pal).unwrap();
    let v = l2(&sim, &w.photo).unwrap();
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        2,
        "tree whole-wafer l2 in [0.004, 0.012]",
        (0.004..=0.012).contains(&v) && secs < 120.0,
        format!("l2 {v:.6}"),
        t,
    );
}

struct UNetResult {
    wafer: SynthOutput,
    palette: Palette,
    best: Checkpoint,
    val: Vec<PatchRegion>,
}

fn criterion_3(ledger: &mut Ledger) -> UNetResult {
    let t = Instant::now();
    let w = wafer(UNET_SIZE, 0);
    let pal = palette_for(&w.photo, 0);
    let tree = train_tree(&w.cad, &quantize(&w.photo, &pal), 64, PALETTE_SAMPLE, 0).unwrap();
    let tree_sim = predict_tree(&tree, &w.cad, &pal).unwrap();

    let config = TrainConfig {
        batch_size: UNET_BATCH,
        ..TrainConfig::adam_preset()
    };
    let run = train_unet(&w.cad, &w.photo, Some(&pal), &config, |c| {
        println!(
            "       epoch {:>2}  train ce {:.4}  val ce {:.4}  val l2 {:.6}  ({:.0} s)",
            c.epoch(),
            c.scores.train_loss,
            c.scores.val_ce.unwrap_or(f64::NAN),
            c.scores.val_l2,
            t.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    let best = run.checkpoints[select_best(&run.checkpoints, SelectBy::L2).unwrap()].clone();
    let tree_l2 = mean_l2(&tree_sim, &w.photo, &run.split.val);
    let unet_l2 = best.scores.val_l2;
    let secs = t.elapsed().as_secs_f64();
    ledger.record(
        3,
        "cross-entropy U-Net beats the tree",
        run.checkpoints.len() == 10 && unet_l2 < tree_l2 && secs < 1800.0,
        format!(
            "validation l2 {unet_l2:.6} (epoch {}) vs tree {tree_l2:.6}, {UNET_SIZE}px wafer, batch {UNET_BATCH}, adam",
            best.epoch()
        ),
        t,
    );
    UNetResult {
        wafer: w,
        palette: pal,
        best,
        val: run.split.val,
    }
}

fn criterion_4(ledger: &mut Ledger) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.toml");
    std::fs::write(&config, "[train]\nwidths = [2, 4, 8, 16]\n").unwrap();
    let args = |extra: &[&str]| {
        let mut v = vec!["goldendie", "--out", root.to_str().unwrap(), "--config", config.to_str().unwrap()];
        v.extend_from_slice(extra);
        Cli::parse_from(v)
    };
    cli::run(args(&["gen", "--size", "256", "--name", "ds"])).unwrap();
    let data = root.join("ds");
    let out = root.join("train");
    let mut a = args(&["train", "--data", data.to_str().unwrap(), "--epochs", "10"]);
    a.out = Some(out.clone());
    cli::run(a).unwrap();
    let rows: Vec<EpochRow> = read_rows(&out.join("train.csv")).unwrap();
    let want = [5e-3, 3e-3, 3e-3, 1.8e-3, 1.8e-3, 1.08e-3, 1.08e-3, 1.08e-3, 6.48e-4, 6.48e-4];
    let got: Vec<f64> = rows.iter().map(|r| r.lr).collect();
    let exact = got.len() == 10 && got.iter().zip(&want).all(|(g, w)| format!("{g:.12}") == format!("{w:.12}"));
    ledger.record(
        4,
        "learning-rate column matches the step schedule to 12 decimals",
        exact && Path::new(&out.join("best")).exists(),
        format!("{got:?}"),
        t,
    );
}

fn criterion_5(ledger: &mut Ledger) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::random(2, 5, 8, 8, &mut rng);
    let rgb = Tensor::from_vec(2, 3, 8, 8, (0..2 * 3 * 64).map(|_| rng.gen()).collect());
    let classes: Vec<u8> = (0..2 * 64).map(|_| rng.gen_range(0..64)).collect();
    let widths = [2, 4, 8, 16];
    let mut worst: Vec<(String, f64)> = Vec::new();
    for loss in [Loss::L2, Loss::CrossEntropy, Loss::Focal { gamma: 2.0 }] {
        let (config, target) = match loss {
            Loss::L2 => (UNetConfig::regression(5), Target::Rgb(&rgb)),
            _ => (UNetConfig::classification(5, 64), Target::Classes(&classes)),
        };
        let mut net = UNet::new(config.with_widths(widths), 9).unwrap();
        let r = check_loss(&mut net, &x, loss, &target, Mode::Train);
        worst.push((loss.name().to_string(), r.params.max(r.input)));
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    ledger.record(
        5,
        "toy U-Net gradients match finite differences (< 1e-4)",
        max < 1e-4 && t.elapsed().as_secs_f64() < 60.0,
        format!(
            "max relative error {}",
            worst.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ")
        ),
        t,
    );
}

fn criterion_6(ledger: &mut Ledger) {
    let t = Instant::now();
    let w = wafer(1024, 0);
    let errors: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&k| {
            let pal = fit_palette(&w.photo, k, PALETTE_SAMPLE, 0).unwrap();
            l2(&reconstruct(&quantize(&w.photo, &pal), &pal).unwrap(), &w.photo).unwrap()
        })
        .collect();
    let monotone = errors.windows(2).all(|p| p[1] <= p[0]);
    let ratio = errors[0] / errors[3];
    ledger.record(
        6,
        "palette error non-increasing in k, k=8 at least twice k=64",
        monotone && ratio >= 2.0 && t.elapsed().as_secs_f64() < 120.0,
        format!(
            "l2 {} ratio {ratio:.2}",
            errors.iter().map(|e| format!("{e:.6}")).collect::<Vec<_>>().join(" ")
        ),
        t,
    );
}

fn criterion_7(ledger: &mut Ledger, u: &UNetResult) -> RasterImage {
    let t = Instant::now();
    let mut model = u.best.model.clone();
    let sim = infer(&mut model, &u.wafer.cad, Some(&u.palette), 256, 20).unwrap();
    let map = score_pixelwise(&u.wafer.photo, &sim, PixelMetric::L2).unwrap();
    let mask = u.wafer.labels.mask();
    let defective: Vec<PatchRegion> = u
        .val
        .iter()
        .copied()
        .filter(|r| mask.extract(r).unwrap().count() > 0)
        .collect();
    // The showcased region is the validation patch holding the most labeled pixels.
    let region = *defective
        .iter()
        .max_by_key(|r| mask.extract(r).unwrap().count())
        .expect("a defective validation patch");
    let region_labels = mask.extract(&region).unwrap();
    let ap = average_precision(&map.extract(&region).unwrap(), &region_labels)
        .unwrap()
        .average_precision;
    let (scores, labels) = pooled(&map, mask, &defective);
    let pooled_ap = average_precision(&scores, &labels).unwrap().average_precision;

    let clean = generate(&SynthConfig {
        size: 1024,
        noise_sigma: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let oracle_map = score_pixelwise(&clean.photo, &clean.golden, PixelMetric::L2).unwrap();
    let oracle = average_precision(&oracle_map, clean.labels.mask()).unwrap().average_precision;
    ledger.record(
        7,
        "detection AP >= 0.90 with the U-Net, exactly 1 with the clean render",
        ap >= 0.90 && oracle == 1.0 && t.elapsed().as_secs_f64() < 120.0,
        format!(
            "U-Net AP {ap:.4} on the {}x{} validation patch at ({}, {}) with {} labeled px, \
             pooled AP {pooled_ap:.4} over {} defective validation patches, oracle AP {oracle}",
            region.w,
            region.h,
            region.x0,
            region.y0,
            region_labels.count(),
            defective.len()
        ),
        t,
    );
    sim
}

fn criterion_8(ledger: &mut Ledger, u: &UNetResult, sim: &RasterImage) {
    let t = Instant::now();
    let labels = u.wafer.labels.mask();
    let (h, w) = labels.dims();
    // A 96x96 patch holding labeled pixels and a label-free 32x32 block.
    let mut found = None;
    'search: for y in (0..h - 96).step_by(32) {
        for x in (0..w - 96).step_by(32) {
            let patch = PatchRegion::new(x, y, 96, 96);
            if labels.extract(&patch).unwrap().count() == 0 {
                continue;
            }
            for by in (0..=64).step_by(8) {
                for bx in (0..=64).step_by(8) {
                    let block = PatchRegion::new(x + bx, y + by, 32, 32);
                    if labels.extract(&block).unwrap().count() == 0 {
                        found = Some((patch, block));
                        break 'search;
                    }
                }
            }
        }
    }
    let (patch, block) = found.expect("defective patch with a clean block");
    let photo = u.wafer.photo.extract(&patch).unwrap();
    let truth = labels.extract(&patch).unwrap();
    let before_sim = sim.extract(&patch).unwrap();
    let mut after_sim = before_sim.clone();
    for y in block.y0 - patch.y0..block.y0 - patch.y0 + 32 {
        for x in block.x0 - patch.x0..block.x0 - patch.x0 + 32 {
            after_sim.set_pixel(y, x, [0.0; 3]);
        }
    }
    let ap = |s: &RasterImage| {
        average_precision(&score_pixelwise(&photo, s, PixelMetric::L2).unwrap(), &truth)
            .unwrap()
            .average_precision
    };
    let (before, after) = (ap(&before_sim), ap(&after_sim));
    ledger.record(
        8,
        "a constant 32x32 block in the simulation lowers AP",
        after < before,
        format!("AP {before:.4} -> {after:.4} on 96x96 patch at ({}, {})", patch.x0, patch.y0),
        t,
    );
}

fn criterion_9(ledger: &mut Ledger) {
    let t = Instant::now();
    let w = generate(&SynthConfig {
        size: 1024,
        misalignment_px: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = SynthConfig::default();
    let sim = render_clean(&w.cad, cfg.metal_rim_px);
    let probe = misalignment_probe(&w.photo, &sim, 4).unwrap();
    ledger.record(
        9,
        "misalignment probe recovers (-2, 0) and lowers l2",
        probe.shift == (-2, 0) && probe.score_after < probe.score_before && t.elapsed().as_secs_f64() < 60.0,
        probe.to_string(),
        t,
    );
}

fn image(h: usize, w: usize) -> impl Strategy<Value = RasterImage> {
    proptest::collection::vec(0.0f64..=1.0, h * w * 3).prop_map(move |d| RasterImage::new(h, w, d).unwrap())
}

fn sized_image() -> impl Strategy<Value = RasterImage> {
    (8usize..14, 8usize..14).prop_flat_map(|(h, w)| image(h, w))
}

fn pair() -> impl Strategy<Value = (RasterImage, RasterImage)> {
    (8usize..14, 8usize..14).prop_flat_map(|(h, w)| (image(h, w), image(h, w)))
}

fn classes_and_logits() -> impl Strategy<Value = (QuantizedImage, Logits)> {
    (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0u8..64, h * w),
            proptest::collection::vec(-6.0f64..6.0, 64 * h * w),
        )
            .prop_map(move |(q, l)| (QuantizedImage::new(h, w, q).unwrap(), Logits::new(64, h, w, l).unwrap()))
    })
}

fn criterion_10(ledger: &mut Ledger) {
    let t = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: PROPTEST_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let mut results: Vec<(&str, Result<(), String>)> = Vec::new();
    let mut check = |name: &'static str, r: Result<(), String>| results.push((name, r));

    check(
        "identity zeros and ones",
        runner
            .run(&sized_image(), |a| {
                prop_assert_eq!(l1(&a, &a).unwrap(), 0.0);
                prop_assert_eq!(l2(&a, &a).unwrap(), 0.0);
                prop_assert!((ssim(&a, &a, SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
                let (h, w) = a.dims();
                let (z, o) = (RasterImage::filled(h, w, [0.0; 3]), RasterImage::filled(h, w, [1.0; 3]));
                prop_assert_eq!(l1(&z, &o).unwrap(), 1.0);
                prop_assert_eq!(l2(&z, &o).unwrap(), 1.0);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    check(
        "uniform logits give ln 64",
        runner
            .run(&(classes_and_logits(), -5.0f64..5.0), |((q, _), c)| {
                let (h, w) = q.dims();
                let logits = Logits::new(64, h, w, vec![c; 64 * h * w]).unwrap();
                prop_assert!((metrics::cross_entropy(&logits, &q).unwrap() - 64f64.ln()).abs() < 1e-12);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    check(
        "focal with gamma 0 equals cross entropy",
        runner
            .run(&classes_and_logits(), |(q, l)| {
                let ce = metrics::cross_entropy(&l, &q).unwrap();
                let fl = metrics::focal(&l, &q, 0.0).unwrap();
                prop_assert!((ce - fl).abs() <= 1e-12 * ce.abs().max(1.0));
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    let index_pair = (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0u8..64, h * w),
            proptest::collection::vec(0u8..64, h * w),
            any::<bool>(),
        )
            .prop_map(move |(a, b, cyc)| (QuantizedImage::new(h, w, a).unwrap(), QuantizedImage::new(h, w, b).unwrap(), cyc))
    });
    check(
        "k-off accuracy monotone in k, k=0 is accuracy",
        runner
            .run(&index_pair, |(p, q, cyclic)| {
                let accs: Vec<f64> = (0..64).map(|k| metrics::k_off_accuracy(&p, &q, k, 64, cyclic).unwrap()).collect();
                prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
                let exact = p.as_slice().iter().zip(q.as_slice()).filter(|(a, b)| a == b).count() as f64
                    / p.as_slice().len() as f64;
                prop_assert_eq!(accs[0], exact);
                prop_assert_eq!(*accs.last().unwrap(), 1.0);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    check(
        "psnr equals 10 log10(1 / l2)",
        runner
            .run(&pair(), |(a, b)| {
                let e = l2(&a, &b).unwrap();
                prop_assume!(e > 0.0);
                let p = psnr(&a, &b, 1.0).unwrap();
                prop_assert!((p - 10.0 * (1.0 / e).log10()).abs() < 1e-9);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    let series = (3usize..30).prop_flat_map(|n| {
        (
            proptest::collection::vec(-100.0f64..100.0, n),
            proptest::collection::vec(-100.0f64..100.0, n),
        )
    });
    check(
        "spearman invariant under monotone transforms",
        runner
            .run(&series, |(x, y)| {
                let base = spearman(&x, &y);
                prop_assume!(base.is_finite());
                let tx: Vec<f64> = x.iter().map(|v| (v / 50.0).exp()).collect();
                let ty: Vec<f64> = y.iter().map(|v| v * v * v + 3.0 * v).collect();
                prop_assert!((spearman(&tx, &ty) - base).abs() < 1e-9);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );

    let failures: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    ledger.record(
        10,
        "metric properties hold over 1000 random cases each",
        failures.is_empty() && t.elapsed().as_secs_f64() < 120.0,
        if failures.is_empty() {
            format!("{} properties x {PROPTEST_CASES} cases", results.len())
        } else {
            failures.join("; ")
        },
        t,
    );
}

fn main() {
    let mut ledger = Ledger {
        lines: Vec::new(),
        failed: 0,
    };
    criterion_1(&mut ledger);
    criterion_2(&mut ledger);
    criterion_4(&mut ledger);
    criterion_5(&mut ledger);
    criterion_6(&mut ledger);
    criterion_9(&mut ledger);
    criterion_10(&mut ledger);
    let unet = criterion_3(&mut ledger);
    let sim = criterion_7(&mut ledger, &unet);
    criterion_8(&mut ledger, &unet, &sim);

    let mut lines = ledger.lines.clone();
    lines.sort_by_key(|l| l[6..8].trim().parse::<usize>().unwrap_or(0));
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if ledger.failed > 0 {
        println!("{} of {} criteria failed", ledger.failed, lines.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", lines.len());
}
