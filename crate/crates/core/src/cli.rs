//! Command-line front end.
//!
//! Every command reads an optional TOML run config (sections `[synth]`,
//! `[palette]`, `[train]`, `[detect]`, `[report]`), applies flag overrides and
//! writes its artifacts under the output directory: `--out`, else the config's
//! `out`, else `$GOLDENDIE_OUT`, else `runs`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelFile, TreeCheckpoint};
use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::defect::{self, PixelMetric, ScoreMap, WindowMetric};
use crate::error::{Error, Result};
use crate::infer::{infer, DEFAULT_BATCH, DEFAULT_TILE};
use crate::metrics::{self, PatchMetric};
use crate::nn::UNetMode;
use crate::palette::{self, Palette, DEFAULT_K, DEFAULT_SAMPLE_SIZE};
use crate::raster::{split_patches, PatchRegion, RasterImage};
use crate::report::{self, EpochRow, EvalRow, ModelTag, PointRow};
use crate::synth::{self, SynthConfig};
use crate::train::{self, LossKind, OptimizerChoice, SelectBy, TrainConfig};
use crate::{io, tree};

pub const OUT_ENV: &str = "GOLDENDIE_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const BEST_MARKER: &str = "best";
pub const PALETTE_FILE: &str = "palette.txt";
pub const GOLDEN_FILE: &str = "golden.png";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaletteConfig {
    pub k: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for PaletteConfig {
    fn default() -> Self {
        PaletteConfig {
            k: DEFAULT_K,
            sample_size: DEFAULT_SAMPLE_SIZE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub threshold: f64,
    /// `l2` or `l1` per pixel; with a window also `ssim`.
    pub metric: String,
    pub window: Option<usize>,
    pub stride: usize,
    pub smooth_radius: usize,
    pub tile: usize,
    pub batch: usize,
    pub max_shift: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            threshold: defect::DEFAULT_THRESHOLD,
            metric: "l2".into(),
            window: None,
            stride: 1,
            smooth_radius: 0,
            tile: DEFAULT_TILE,
            batch: DEFAULT_BATCH,
            max_shift: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub metrics: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            metrics: ["l1", "l2", "psnr", "ssim"].map(String::from).to_vec(),
        }
    }
}

impl ReportConfig {
    fn patch_metrics(&self) -> Result<Vec<PatchMetric>> {
        self.metrics
            .iter()
            .map(|name| {
                [PatchMetric::L1, PatchMetric::L2, PatchMetric::Psnr, PatchMetric::Ssim]
                    .into_iter()
                    .find(|m| m.name() == name)
                    .ok_or_else(|| Error::Config(format!("unknown report metric {name:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub palette: PaletteConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.palette.seed = seed;
        self.train.seed = seed;
    }
}

#[derive(Debug, Parser)]
#[command(name = "goldendie", version, about = "Golden-die simulation and defect detection for wafer photos")]
pub struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to generation, palette fitting and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic wafer dataset.
    Gen(GenArgs),
    /// Fit a colour palette and quantize a photo.
    Quantize(QuantizeArgs),
    /// Train a decision tree or a U-Net simulator.
    Train(TrainArgs),
    /// Render the golden die for a dataset.
    Simulate(SimulateArgs),
    /// Score, threshold and evaluate defects.
    Detect(DetectArgs),
    /// Patchwise metrics of a simulation.
    Eval(EvalArgs),
    /// Aggregate evaluation tables and metric correlations.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub size: Option<usize>,
    /// Dataset directory name under the output directory.
    #[arg(long)]
    pub name: Option<String>,
    /// Defects per megapixel for dust, nitride and resist alike.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub letter_fraction: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub misalignment: Option<i32>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated palette sizes to compare, e.g. `8,16,32,64`.
    #[arg(long, value_delimiter = ',')]
    pub study: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Tree,
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    L2,
    CrossEntropy,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    L2,
    Loss,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "unet")]
    pub model: ModelKind,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Focal loss focusing parameter.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    /// Palette file; fitted on the photo when absent.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Criterion for the `best` marker.
    #[arg(long, value_enum, default_value = "l2")]
    pub select: SelectArg,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Model file, or a training output directory holding a `best` marker.
    #[arg(long, group = "source")]
    pub model: Option<PathBuf>,
    /// Precomputed simulation image.
    #[arg(long, group = "source")]
    pub simulation: Option<PathBuf>,
    /// Use the dataset's clean render as the simulation.
    #[arg(long, group = "source")]
    pub golden: bool,
    #[arg(long)]
    pub palette: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `l2`, `l1`, or with `--window` also `ssim`.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Box-filter radius applied to the score map before evaluation.
    #[arg(long)]
    pub smooth: Option<usize>,
    /// Restrict to `x,y,w,h`.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub region: Option<Vec<usize>>,
    /// Also search for the best whole-pixel realignment up to this shift.
    #[arg(long)]
    pub max_shift: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Model label in the output tables.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation CSV files or directories searched for `eval.csv`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Resolved global settings shared by all commands.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed.or(config.seed) {
            config.set_seed(seed);
        }
        let out = cli
            .out
            .clone()
            .or_else(|| config.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Context { config, out })
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        Ok(self.out_dir()?.join(name))
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(|| dispatch(cli)),
        None => dispatch(cli),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut ctx = Context::new(&cli)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&mut ctx, &a).map(|_| ()),
        Command::Quantize(a) => cmd_quantize(&mut ctx, &a),
        Command::Train(a) => cmd_train(&mut ctx, &a),
        Command::Simulate(a) => cmd_simulate(&ctx, &a),
        Command::Detect(a) => cmd_detect(&mut ctx, &a),
        Command::Eval(a) => cmd_eval(&ctx, &a),
        Command::Report(a) => cmd_report(&ctx, &a),
    }
}

pub fn cmd_gen(ctx: &mut Context, a: &GenArgs) -> Result<PathBuf> {
    let cfg = &mut ctx.config.synth;
    if let Some(v) = a.size {
        cfg.size = v;
    }
    if let Some(v) = a.rate {
        cfg.rate_dust = v;
        cfg.rate_nitride = v;
        cfg.rate_resist = v;
    }
    if let Some(v) = a.letter_fraction {
        cfg.letter_defect_fraction = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.misalignment {
        cfg.misalignment_px = v;
    }
    let cfg = cfg.clone();
    let output = synth::generate(&cfg)?;
    let name = a.name.clone().unwrap_or_else(|| format!("synth_{}_s{}", cfg.size, cfg.seed));
    let dir = ctx.path(&name)?;
    save_dataset(
        &dir,
        &name,
        &output.photo,
        &output.cad,
        Some(&output.labels),
        cfg.seed,
        ctx.config.train.split_fraction,
    )?;
    io::write_photo(&dir.join(GOLDEN_FILE), &output.golden)?;
    let report = format!("{}\n", output.report);
    fs::write(dir.join("scene.txt"), &report).map_err(|e| Error::io(dir.join("scene.txt"), e))?;
    print!("{report}");
    println!("dataset written to {}", dir.display());
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct QuantRow {
    k: usize,
    l2: f64,
    order_cost: f64,
}

pub fn cmd_quantize(ctx: &mut Context, a: &QuantizeArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = &mut ctx.config.palette;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    let cfg = cfg.clone();
    let sample = cfg.sample_size.min(ds.photo.pixel_count());
    let mut rows = Vec::new();
    let ks = if a.study.is_empty() { vec![cfg.k] } else { a.study.clone() };
    for &k in &ks {
        let pal = palette::fit_palette(&ds.photo, k, sample, cfg.seed)?;
        let q = palette::quantize(&ds.photo, &pal);
        let rec = palette::reconstruct(&q, &pal)?;
        let l2 = metrics::l2(&rec, &ds.photo)?;
        println!("k={k:<3} reconstruction l2 {l2:.6}");
        rows.push(QuantRow {
            k,
            l2,
            order_cost: pal.order_cost(),
        });
        if k == cfg.k {
            pal.save(&ctx.path(PALETTE_FILE)?)?;
            io::write_quantized(&ctx.path("quantized.png")?, &q)?;
            io::write_photo(&ctx.path("reconstruction.png")?, &rec)?;
        }
    }
    report::write_rows(&ctx.path("quantize.csv")?, &rows)
}

fn resolve_palette(ctx: &Context, ds: &Dataset, explicit: Option<&Path>) -> Result<Palette> {
    if let Some(p) = explicit {
        return Palette::load(p);
    }
    if let Some(p) = ds.palette_path() {
        return Palette::load(&p);
    }
    let cfg = &ctx.config.palette;
    eprintln!("fitting a {}-colour palette", cfg.k);
    let pal = palette::fit_palette(&ds.photo, cfg.k, cfg.sample_size.min(ds.photo.pixel_count()), cfg.seed)?;
    pal.save(&ctx.path(PALETTE_FILE)?)?;
    Ok(pal)
}

#[derive(Debug, Serialize)]
struct TreeRow {
    model: &'static str,
    nodes: usize,
    depth: usize,
    whole_l2: f64,
    val_l2: f64,
}

fn mean_region_l2(sim: &RasterImage, photo: &RasterImage, regions: &[PatchRegion]) -> Result<f64> {
    let reps = report::evaluate_regions(sim, photo, regions, &[PatchMetric::L2])?;
    Ok(reps[0].mean)
}

pub fn cmd_train(ctx: &mut Context, a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = &mut ctx.config.train;
    if let Some(l) = a.loss {
        cfg.loss = match l {
            LossArg::L2 => LossKind::L2,
            LossArg::CrossEntropy => LossKind::CrossEntropy,
            LossArg::Focal => LossKind::Focal,
        };
    }
    if let Some(g) = a.gamma {
        cfg.focal_gamma = g;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(o) = a.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Sgd => OptimizerChoice::Sgd,
            OptimizerArg::Adam => OptimizerChoice::Adam,
        };
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr0 = lr;
    }
    if let Some(v) = a.variance_threshold {
        cfg.variance_threshold = v;
    }
    cfg.split_seed = Some(ds.manifest.split_seed);
    cfg.split_fraction = ds.manifest.split_fraction;
    let cfg = cfg.clone();
    cfg.validate()?;
    let (h, w) = ds.dims();

    match a.model {
        ModelKind::Tree => {
            let pal = resolve_palette(ctx, &ds, a.palette.as_deref())?;
            let q = palette::quantize(&ds.photo, &pal);
            let model = tree::train_tree(&ds.cad, &q, pal.len(), cfg.tree_samples, cfg.seed)?;
            let sim = tree::predict_tree(&model, &ds.cad, &pal)?;
            let split = split_patches(h, w, cfg.patch_size, cfg.split_fraction, ds.manifest.split_seed)?;
            let row = TreeRow {
                model: "tree",
                nodes: model.nodes().len(),
                depth: model.depth(),
                whole_l2: metrics::l2(&sim, &ds.photo)?,
                val_l2: mean_region_l2(&sim, &ds.photo, &split.val)?,
            };
            println!("tree: {} nodes, whole-wafer l2 {:.6}, validation l2 {:.6}", row.nodes, row.whole_l2, row.val_l2);
            checkpoint::save(
                &ctx.path("tree.gdm")?,
                &ModelFile::Tree(TreeCheckpoint {
                    model,
                    palette_digest: Some(pal.digest()),
                }),
            )?;
            fs::write(ctx.path(BEST_MARKER)?, "tree.gdm\n").map_err(|e| Error::io(&ctx.out, e))?;
            report::write_rows(&ctx.path("train.csv")?, &[row])
        }
        ModelKind::Unet => {
            let pal = match cfg.loss {
                LossKind::L2 if a.palette.is_none() && cfg.variance_threshold == 0.0 => None,
                _ => Some(resolve_palette(ctx, &ds, a.palette.as_deref())?),
            };
            let ckpt_dir = ctx.path("checkpoints")?;
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            let mut saved = Vec::new();
            let run = train::train_unet(&ds.cad, &ds.photo, pal.as_ref(), &cfg, |c| {
                let s = &c.scores;
                eprintln!(
                    "epoch {:>2}  lr {:.3e}  train {:.5}  val_loss {:.5}  val_l2 {:.6}",
                    s.epoch, s.lr, s.train_loss, s.val_loss, s.val_l2
                );
                let name = format!("epoch_{:02}.gdm", s.epoch);
                saved.push(checkpoint::save(&ckpt_dir.join(&name), &ModelFile::UNet(c.clone())));
            })?;
            saved.into_iter().collect::<Result<Vec<_>>>()?;
            let by = match a.select {
                SelectArg::L2 => SelectBy::L2,
                SelectArg::Loss => SelectBy::Loss,
            };
            let best = train::select_best(&run.checkpoints, by)?;
            let rows: Vec<EpochRow> = run
                .checkpoints
                .iter()
                .enumerate()
                .map(|(i, c)| EpochRow::new(&c.scores, i == best))
                .collect();
            report::write_rows(&ctx.path("train.csv")?, &rows)?;
            let marker = format!("checkpoints/epoch_{:02}.gdm\n", run.checkpoints[best].epoch());
            fs::write(ctx.path(BEST_MARKER)?, &marker).map_err(|e| Error::io(&ctx.out, e))?;
            println!(
                "best epoch {} (val l2 {:.6}); {} of {} training patches kept",
                run.checkpoints[best].epoch(),
                run.checkpoints[best].scores.val_l2,
                run.kept.len(),
                run.split.train.len()
            );
            Ok(())
        }
    }
}

/// A model path, following a `best` marker when given a directory.
pub fn resolve_model_path(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let marker = path.join(BEST_MARKER);
    let text = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(path.join(text.trim()))
}

fn model_palette(model_path: &Path, explicit: Option<&Path>, ds: &Dataset) -> Result<Option<Palette>> {
    if let Some(p) = explicit {
        return Palette::load(p).map(Some);
    }
    let mut dir = model_path.parent();
    for _ in 0..2 {
        if let Some(d) = dir {
            let candidate = d.join(PALETTE_FILE);
            if candidate.exists() {
                return Palette::load(&candidate).map(Some);
            }
            dir = d.parent();
        }
    }
    ds.palette_path().map(|p| Palette::load(&p)).transpose()
}

fn check_digest(expected: Option<u64>, palette: Option<&Palette>) -> Result<()> {
    match (expected, palette) {
        (Some(d), Some(p)) if d != p.digest() => Err(Error::Checkpoint(
            "palette does not match the one the model was trained with".into(),
        )),
        (Some(_), None) => Err(Error::InvalidArgument("this model needs its palette (--palette)".into())),
        _ => Ok(()),
    }
}

/// Renders the simulation selected by `source`, with a label for tables.
pub fn simulate(ds: &Dataset, source: &SourceArgs, tile: usize, batch: usize) -> Result<(RasterImage, String)> {
    if source.golden {
        let path = ds.root.join(GOLDEN_FILE);
        return Ok((io::read_photo(&path)?, "golden".into()));
    }
    if let Some(p) = &source.simulation {
        return Ok((io::read_photo(p)?, "image".into()));
    }
    let Some(model) = &source.model else {
        return Err(Error::InvalidArgument("one of --model, --simulation or --golden is required".into()));
    };
    let path = resolve_model_path(model)?;
    let pal = model_palette(&path, source.palette.as_deref(), ds)?;
    match checkpoint::load(&path)? {
        ModelFile::Tree(t) => {
            check_digest(t.palette_digest, pal.as_ref())?;
            let pal = pal.ok_or_else(|| Error::InvalidArgument("the tree needs its palette (--palette)".into()))?;
            Ok((tree::predict_tree(&t.model, &ds.cad, &pal)?, "tree".into()))
        }
        ModelFile::UNet(mut c) => {
            let classification = c.model.config().mode == UNetMode::Classification;
            check_digest(c.palette_digest, pal.as_ref())?;
            let img = infer(&mut c.model, &ds.cad, pal.as_ref().filter(|_| classification), tile, batch)?;
            Ok((img, format!("unet_{}", c.loss.name())))
        }
    }
}

pub fn cmd_simulate(ctx: &Context, a: &SimulateArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let d = &ctx.config.detect;
    let (img, label) = simulate(&ds, &a.source, d.tile, d.batch)?;
    let path = ctx.path("simulation.png")?;
    io::write_photo(&path, &img)?;
    println!("{label} simulation written to {} (whole-wafer l2 {:.6})", path.display(), metrics::l2(&img, &ds.photo)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ApRow {
    dataset: String,
    simulator: String,
    metric: String,
    window: Option<usize>,
    threshold: f64,
    average_precision: f64,
    positives: usize,
    detections: usize,
}

fn score(photo: &RasterImage, sim: &RasterImage, d: &DetectConfig) -> Result<ScoreMap> {
    let map = match d.window {
        None => {
            let metric = match d.metric.as_str() {
                "l2" => PixelMetric::L2,
                "l1" => PixelMetric::L1,
                m => return Err(Error::Config(format!("pixelwise metric must be l2 or l1, got {m:?}"))),
            };
            defect::score_pixelwise(photo, sim, metric)?
        }
        Some(window) => {
            let metric = WindowMetric::from_name(&d.metric)
                .ok_or_else(|| Error::Config(format!("unknown window metric {:?}", d.metric)))?;
            defect::score_windowed(photo, sim, metric, window, d.stride)?
        }
    };
    Ok(if d.smooth_radius > 0 { defect::smooth(&map, d.smooth_radius) } else { map })
}

pub fn cmd_detect(ctx: &mut Context, a: &DetectArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let d = &mut ctx.config.detect;
    if let Some(v) = a.threshold {
        d.threshold = v;
    }
    if let Some(v) = &a.metric {
        d.metric = v.clone();
    }
    if a.window.is_some() {
        d.window = a.window;
    }
    if let Some(v) = a.stride {
        d.stride = v;
    }
    if let Some(v) = a.smooth {
        d.smooth_radius = v;
    }
    if let Some(v) = a.max_shift {
        d.max_shift = v;
    }
    let d = d.clone();
    let (sim, label) = simulate(&ds, &a.source, d.tile, d.batch)?;
    let region = match &a.region {
        Some(v) => PatchRegion::new(v[0], v[1], v[2], v[3]),
        None => PatchRegion::full(ds.photo.height(), ds.photo.width()),
    };
    let photo = ds.photo.extract(&region)?;
    let sim = sim.extract(&region)?;

    if d.max_shift > 0 {
        let probe = defect::misalignment_probe(&photo, &sim, d.max_shift)?;
        println!("{probe}");
        let path = ctx.path("alignment.txt")?;
        fs::write(&path, format!("{probe}\n")).map_err(|e| Error::io(&path, e))?;
    }

    let map = score(&photo, &sim, &d)?;
    let detections = defect::binarize(&map, d.threshold);
    defect::write_score_map(&ctx.path("score.png")?, &map)?;
    io::write_photo(&ctx.path("heatmap.png")?, &defect::heatmap(&map, None))?;
    io::write_mask(&ctx.path("detections.png")?, &detections)?;
    io::write_photo(&ctx.path("triptych.png")?, &defect::triptych(&photo, &sim, &detections)?)?;

    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("the dataset has no defect labels".into()))?
        .mask()
        .extract(&region)?;
    let pr = defect::average_precision(&map, &labels)?;
    report::write_rows(&ctx.path("pr.csv")?, &report::pr_rows(&pr))?;
    let row = ApRow {
        dataset: ds.manifest.name.clone(),
        simulator: label,
        metric: map.metric.clone(),
        window: map.window,
        threshold: d.threshold,
        average_precision: pr.average_precision,
        positives: labels.count(),
        detections: detections.count(),
    };
    println!(
        "{} vs {}: AP {:.4}, {} detections at threshold {}",
        row.dataset, row.simulator, row.average_precision, row.detections, row.threshold
    );
    report::write_rows(&ctx.path("ap.csv")?, &[row])
}

pub fn cmd_eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let d = &ctx.config.detect;
    let (sim, label) = simulate(&ds, &a.source, d.tile, d.batch)?;
    let (h, w) = ds.dims();
    let split = split_patches(
        h,
        w,
        ctx.config.train.patch_size,
        ds.manifest.split_fraction,
        ds.manifest.split_seed,
    )?;
    let regions = match a.split {
        SplitArg::Val => split.val,
        SplitArg::Train => split.train,
        SplitArg::All => [split.train, split.val].concat(),
    };
    let reports = report::evaluate_regions(&sim, &ds.photo, &regions, &ctx.config.report.patch_metrics()?)?;
    let (model, loss) = match label.split_once('_') {
        Some((m, l)) => (m.to_string(), l.to_string()),
        None => (label.clone(), "-".to_string()),
    };
    let epoch = match &a.source.model {
        Some(p) => match checkpoint::load(&resolve_model_path(p)?)? {
            ModelFile::UNet(c) => Some(c.epoch()),
            ModelFile::Tree(_) => None,
        },
        None => None,
    };
    let tag = ModelTag {
        dataset: ds.manifest.name.clone(),
        model: a.label.clone().unwrap_or(model),
        loss,
        epoch,
    };
    for r in &reports {
        println!("{:<5} mean {:.6}  sd {:.6}  ({} patches)", r.metric, r.mean, r.sd, r.values.len());
    }
    report::write_rows(&ctx.path("eval.csv")?, &tag.rows(&reports))?;
    report::write_rows(&ctx.path("points.csv")?, &tag.points(&reports))
}

fn collect_csv(inputs: &[PathBuf], file: &str) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut stack = vec![p.clone()];
            while let Some(dir) = stack.pop() {
                let Ok(entries) = fs::read_dir(&dir) else { continue };
                let mut entries: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
                entries.sort();
                for e in entries {
                    if e.is_dir() {
                        stack.push(e);
                    } else if e.file_name().is_some_and(|n| n == file) {
                        found.push(e);
                    }
                }
            }
        } else if file == "eval.csv" {
            found.push(p.clone());
        } else if let Some(sibling) = p.parent().map(|d| d.join(file)).filter(|s| s.exists()) {
            found.push(sibling);
        }
    }
    found.sort();
    found.dedup();
    found
}

pub fn cmd_report(ctx: &Context, a: &ReportArgs) -> Result<()> {
    let mut rows: Vec<EvalRow> = Vec::new();
    for path in collect_csv(&a.inputs, "eval.csv") {
        rows.extend(report::read_rows::<EvalRow>(&path)?);
    }
    if rows.is_empty() {
        return Err(Error::Empty("no evaluations found".into()));
    }
    let mut points: Vec<PointRow> = Vec::new();
    for path in collect_csv(&a.inputs, "points.csv") {
        points.extend(report::read_rows::<PointRow>(&path)?);
    }
    report::write_rows(&ctx.path("summary.csv")?, &rows)?;
    report::write_rows(&ctx.path("points.csv")?, &points)?;
    for r in &rows {
        println!(
            "{:<12} {:<8} {:<14} {:<5} {:.6} ({:.6})",
            r.dataset, r.model, r.loss, r.metric, r.mean, r.sd
        );
    }
    match report::correlation_from_rows(&rows) {
        Ok(t) => {
            report::write_matrix(&ctx.path("correlation_pearson.csv")?, &t.metrics, &t.pearson)?;
            report::write_matrix(&ctx.path("correlation_spearman.csv")?, &t.metrics, &t.spearman)?;
            report::write_matrix(&ctx.path("correlation.csv")?, &t.metrics, &t.combined())?;
        }
        Err(Error::InvalidArgument(m)) => eprintln!("correlations skipped: {m}"),
        Err(e) => return Err(e),
    }
    Ok(())
}
