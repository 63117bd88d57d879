//! `repparse` subcommands.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use repparse_core::params::init_params;
use repparse_core::synth::{generate_dataset, generate_scene, SyntheticScene};
use repparse_core::ModelConfig;

use crate::bench;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, create_dir};
use crate::error::{Error, Result};
use crate::netpbm;
use crate::pipeline;
use crate::sweep;
use crate::training;

/// Seed offset of the held-out scenes used by `sweep`.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Parser)]
#[command(name = "repparse", version, about = "Single-stage multi-person part parsing on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint.rppk and loss.csv.
    Train(TrainArgs),
    /// Parse every scene of a dataset; writes per-scene masks, pred_meta.json and overlay.ppm.
    Infer(InferArgs),
    /// Score predictions against ground truth; prints the JSON report.
    Eval(EvalArgs),
    /// Head latency against a simulated RoI head for 1..16 persons.
    Bench(BenchArgs),
    /// Width × depth × mask-stride sweep of short training runs.
    Sweep(SweepArgs),
    /// Part-label overlays with white representative-part dots.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub scenes: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Persons per scene: `n` or `min,max`.
    #[arg(long, value_parser = parse_persons)]
    pub persons: Option<(usize, usize)>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scenes to synthesise when no `--gt` dataset is given.
    #[arg(long, default_value_t = 500)]
    pub scenes: u32,
    /// Training dataset directory.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset whose images are parsed.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    pub repeats: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trained weights; freshly initialised ones otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Model to time; the reference architecture (`D = 6`, stride 8) otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV destination; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training scenes per run.
    #[arg(long, default_value_t = 40)]
    pub scenes: u32,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV destination; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_persons(s: &str) -> std::result::Result<(usize, usize), String> {
    let nums: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match nums.as_slice() {
        [n] => Ok((*n, *n)),
        [a, b] => Ok((*a, *b)),
        _ => Err("expected `n` or `min,max`".into()),
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found")))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

/// Creates the parent of an output file.
fn prepare_file(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => create_dir(d),
        _ => Ok(()),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut run = RunConfig::load(a.config.as_deref())?;
    if let Some(p) = a.persons {
        run.gen.persons = p;
    }
    run.gen.validate()?;
    create_dir(&a.out)?;
    let pool = pipeline::thread_pool()?;
    let gen = &run.gen;
    pool.install(|| {
        (0..a.scenes as usize).into_par_iter().try_for_each(|i| {
            let scene = generate_scene(a.seed.wrapping_add(i as u64), gen)?;
            dataset::write_scene(&a.out.join(dataset::scene_dir_name(i)), &scene)
        })
    })
}

fn training_data(run: &RunConfig, seed: u64, scenes: u32, gt: Option<&Path>) -> Result<Vec<SyntheticScene>> {
    let data = match gt {
        Some(dir) => dataset::import_dataset(dir)?,
        None => generate_dataset(seed, scenes as usize, &run.gen)?,
    };
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| (s.height, s.width) != (run.model.image_height, run.model.image_width)) {
        return Err(Error::Usage(format!("scene {} is {}x{}, model expects {}x{}", s.seed, s.width, s.height, run.model.image_width, run.model.image_height)));
    }
    Ok(data)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(a.config.as_deref())?;
    run.train.seed = a.seed;
    if let Some(gt) = &a.gt {
        require_dir(gt)?;
    }
    create_dir(&a.out)?;
    let data = training_data(&run, a.seed, a.scenes, a.gt.as_deref())?;
    let art = training::train_to_dir(&run, &data, &a.out, |r| {
        if r.step % 100 == 0 {
            eprintln!("step {:>5}  total {:.4}", r.step, r.total);
        }
    })?;
    eprintln!("wrote {} and {}", art.checkpoint_path.display(), art.loss_path.display());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    require_file(&a.ckpt)?;
    require_dir(&a.gt)?;
    let run = RunConfig::load(a.config.as_deref())?;
    let ck = checkpoint::load(&a.ckpt)?;
    create_dir(&a.out)?;
    let dirs = dataset::scene_dirs(&a.gt)?;
    let pool = pipeline::thread_pool()?;
    pool.install(|| {
        dirs.par_iter().try_for_each(|d| {
            let scene = dataset::read_scene(d)?;
            if (scene.height, scene.width) != (ck.config.image_height, ck.config.image_width) {
                return Err(Error::Usage(format!("{}: image size does not match the checkpoint", d.display())));
            }
            let results = repparse_core::repparse::full_parse(&scene.image, &ck.params, &ck.config, &run.decode, ck.flags)?;
            let od = a.out.join(d.file_name().expect("scene dirs have names"));
            dataset::write_predictions(&od, scene.width, scene.height, ck.config.parts, &results)?;
            pipeline::write_instance_overlay(&od.join("overlay.ppm"), &scene, &results)
        })
    })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    require_dir(&a.pred)?;
    require_dir(&a.gt)?;
    if let Some(o) = &a.out {
        prepare_file(o)?;
    }
    let report = pipeline::evaluate_dirs(&pipeline::thread_pool()?, &a.pred, &a.gt)?;
    let mut text = serde_json::to_string_pretty(&report).expect("plain data serializes");
    text.push('\n');
    if let Some(o) = &a.out {
        write_text(Some(o), &text)?;
    }
    write_text(None, &text)
}

pub fn run_bench(a: &BenchArgs) -> Result<()> {
    let run = RunConfig::load(a.config.as_deref())?;
    let (params, model) = match &a.ckpt {
        Some(p) => {
            require_file(p)?;
            let ck = checkpoint::load(p)?;
            (ck.params, ck.config)
        }
        None if a.config.is_none() => (init_params(&ModelConfig::default(), a.seed), ModelConfig::default()),
        None => (init_params(&run.model, a.seed), run.model.clone()),
    };
    if let Some(o) = &a.out {
        prepare_file(o)?;
    }
    let gen = repparse_core::synth::GenConfig { height: model.image_height, width: model.image_width, ..run.gen.clone() };
    let image = generate_scene(a.seed, &gen)?.image;
    let rows = bench::run_bench(&params, &model, &image, &bench::COUNTS, a.repeats as usize, a.seed)?;
    let mut buf = Vec::new();
    bench::write_csv(&mut buf, &rows, a.repeats as usize).expect("writing to memory");
    write_text(a.out.as_deref(), &String::from_utf8(buf).expect("csv is ascii"))
}

pub fn run_sweep(a: &SweepArgs) -> Result<()> {
    let mut run = RunConfig::load(a.config.as_deref())?;
    run.train.seed = a.seed;
    if let Some(o) = &a.out {
        prepare_file(o)?;
    }
    let train = generate_dataset(a.seed, a.scenes as usize, &run.gen)?;
    let val = generate_dataset(a.seed.wrapping_add(VAL_SEED_OFFSET), run.sweep.val_scenes, &run.gen)?;
    let rows = sweep::run_sweep(&run, &run.sweep, &train, &val, |r| {
        eprintln!("width {:>2} depth {} stride {:>2}  miou {:.3}", r.width, r.depth, r.mask_stride, r.miou);
    })?;
    let mut buf = Vec::new();
    sweep::write_csv(&mut buf, &rows).map_err(|e| Error::Usage(e.to_string()))?;
    write_text(a.out.as_deref(), &String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn visualize(a: &VisualizeArgs) -> Result<()> {
    require_dir(&a.pred)?;
    require_dir(&a.gt)?;
    create_dir(&a.out)?;
    let dirs = dataset::scene_dirs(&a.gt)?;
    let pool = pipeline::thread_pool()?;
    pool.install(|| {
        dirs.par_iter().try_for_each(|d| {
            let name = d.file_name().expect("scene dirs have names");
            let (w, h, rgb) = netpbm::read_ppm(&d.join(dataset::IMAGE_FILE))?;
            let pred = dataset::read_predictions(&a.pred.join(name), w, h)?;
            let maps: Vec<(f64, &[u8])> = pred.instances.iter().map(|p| (p.meta.score, p.labels.as_slice())).collect();
            let semantic = composite_by_score(&maps, w * h);
            let mut img = pipeline::overlay_parts(&rgb, &semantic);
            for p in &pred.instances {
                pipeline::draw_dots(&mut img, w, h, &p.meta.part_locations);
            }
            let mut file = name.to_os_string();
            file.push(".ppm");
            netpbm::write_ppm(&a.out.join(file), w, h, &img)
        })
    })
}

fn composite_by_score(maps: &[(f64, &[u8])], len: usize) -> Vec<u8> {
    let preds: Vec<repparse_core::metrics::Prediction<'_>> =
        maps.iter().map(|&(score, labels)| repparse_core::metrics::Prediction { score, labels }).collect();
    repparse_core::metrics::composite(&preds, len)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Visualize(a) => visualize(a),
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
