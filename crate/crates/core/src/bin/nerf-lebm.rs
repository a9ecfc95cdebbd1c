use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nerf_lebm::metrics::{disentangle_grid, grid_export};
use nerf_lebm::render::CameraPose;
use nerf_lebm::runconfig::{describe, RunConfig};
use nerf_lebm::synthdata::{gen_dataset, load_dataset, DatasetConfig, Record};
use nerf_lebm::trainer::{checkpoint_load, checkpoint_save, checkpoint_scalar_bytes, Algorithm, Trainer};
use nerf_lebm::Scalar;

/// Bad flags or config values; exits with the usage status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

/// Thread count override for the worker pool.
const THREADS_ENV: &str = "NERF_LEBM_THREADS";

#[derive(Parser)]
#[command(
    name = "nerf-lebm",
    version,
    about = "Radiance fields with latent energy-based priors",
    arg_required_else_help = true
)]
struct Cli {
    /// Single worker thread; with a fixed seed the run is bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic multi-view dataset.
    GenData(GenData),
    /// Train a model on a dataset directory.
    Train(Train),
    /// Sample new objects from the learned priors.
    Sample(Sample),
    /// Reconstruct dataset images.
    Reconstruct(Reconstruct),
    /// Render an observed object from another pose.
    NovelView(NovelView),
    /// Mean PSNR over a dataset split.
    EvalPsnr(EvalPsnr),
    /// Shape x appearance grid at a fixed pose.
    DisentangleGrid(Grid),
    /// List every config key.
    Keys,
}

fn range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Extra held-out views per object.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Masked area fraction range, e.g. 0.2,0.3.
    #[arg(long, value_parser = range)]
    mask: Option<(f64, f64)>,
    /// Degrees, lo,hi.
    #[arg(long, value_parser = range, default_value = "10,40")]
    altitude: (f64, f64),
    /// Degrees, lo,hi.
    #[arg(long, value_parser = range, default_value = "0,360")]
    azimuth: (f64, f64),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// mcmc | amortized | amortized-nopose (key `algorithm`).
    #[arg(long)]
    algo: Option<String>,
    /// Base preset (key `preset`); defaults to the desk preset of the algorithm.
    #[arg(long)]
    preset: Option<String>,
    /// key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, repeatable: --set model.sigma_eps=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Key `iterations`.
    #[arg(long)]
    iters: Option<usize>,
    /// Key `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; only `iterations` is taken from the flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera altitude in degrees for known-pose models.
    #[arg(long, default_value_t = 25.0)]
    altitude: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Reconstruct {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Record indices; all training records when omitted.
    #[arg(long, value_delimiter = ',')]
    index: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NovelView {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Source record index.
    #[arg(long)]
    index: usize,
    /// Degrees.
    #[arg(long)]
    altitude: f64,
    /// Degrees.
    #[arg(long)]
    azimuth: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Holdout,
    All,
}

#[derive(Args)]
struct EvalPsnr {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
}

#[derive(Args)]
struct Grid {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 4)]
    shapes: usize,
    #[arg(long, default_value_t = 4)]
    appearances: usize,
    #[arg(long, default_value_t = 25.0)]
    altitude: f64,
    #[arg(long, default_value_t = 45.0)]
    azimuth: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn setup_threads(deterministic: bool) -> anyhow::Result<()> {
    let n = if deterministic {
        Some(1)
    } else {
        match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn mkdir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let cfg = DatasetConfig {
        objects: a.objects,
        views: a.views,
        holdout_views: a.holdout,
        resolution: a.res,
        altitude: a.altitude,
        azimuth: a.azimuth,
        seed: a.seed,
        mask: a.mask,
        ..DatasetConfig::default()
    };
    mkdir(&a.out)?;
    let ds = gen_dataset(&cfg, &a.out)?;
    println!("wrote {} records to {}", ds.records.len(), a.out.display());
    Ok(())
}

fn train_config(a: &Train) -> anyhow::Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = &a.preset {
        rc.set("preset", p)?;
    }
    if let Some(f) = &a.config {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        rc.merge(&RunConfig::parse(&text)?)?;
    }
    if let Some(al) = &a.algo {
        rc.set("algorithm", Algorithm::parse(al)?.name())?;
    }
    if let Some(n) = a.iters {
        rc.set("iterations", &n.to_string())?;
    }
    if let Some(s) = a.seed {
        rc.set("seed", &s.to_string())?;
    }
    for kv in &a.set {
        rc.set_pair(kv)?;
    }
    Ok(rc)
}

fn default_preset(rc: &RunConfig) -> &'static str {
    let algo = rc
        .entries
        .iter()
        .rev()
        .find(|(k, _)| k == "algorithm")
        .map(|(_, v)| v.as_str());
    match algo {
        Some("amortized") => "desk-amortized",
        Some("amortized-nopose") => "desk-nopose",
        _ => "desk-mcmc",
    }
}

fn train<T: Scalar>(a: &Train) -> anyhow::Result<()> {
    let data = load_dataset(&a.data)?;
    let mut tr: Trainer<T> = match &a.resume {
        Some(p) => {
            let mut t = checkpoint_load(p)?;
            if let Some(n) = a.iters {
                t.config.iterations = n;
            }
            t
        }
        None => {
            let rc = train_config(a).map_err(usage)?;
            let mut cfg = rc.resolve(default_preset(&rc)).map_err(usage)?;
            cfg.adapt_to(&data);
            if data.records.iter().any(|r| r.mask.is_some()) && !rc.entries.iter().any(|(k, _)| k == "mask_aware") {
                cfg.mask_aware = true;
            }
            Trainer::new(cfg)?
        }
    };
    mkdir(&a.out)?;
    let effective = RunConfig::serialize(&tr.config);
    fs::write(a.out.join("config.txt"), &effective)?;
    eprintln!("{effective}");
    eprintln!("parameters: {}", tr.param_count());
    let log_path = a.out.join("metrics.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let ckpt = a.out.join("checkpoint.bin");
    let target = tr.config.iterations as u64;
    let every = if a.checkpoint_every == 0 {
        target
    } else {
        a.checkpoint_every
    };
    while tr.iteration < target {
        let stop = (tr.iteration + every).min(target);
        let mut buf = Vec::new();
        let stats = tr.train(&data, stop, &mut buf)?;
        log.write_all(&buf)?;
        if let Some(s) = stats.last() {
            eprintln!("{s}");
        }
        checkpoint_save(&tr, &ckpt)?;
    }
    if tr.config.algorithm == Algorithm::AmortizedNopose {
        let n = data.training().count();
        tr.pose_hist = Some(tr.estimate_pose_distribution(&data, n, 36)?);
    }
    checkpoint_save(&tr, &ckpt)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn sample<T: Scalar>(a: &Sample) -> anyhow::Result<()> {
    let tr: Trainer<T> = checkpoint_load(&a.ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (za, zs) = tr.sample_latents(a.n, &mut rng)?;
    let radius = tr.model.config.radius;
    mkdir(&a.out)?;
    let mut images = Vec::new();
    for i in 0..a.n {
        let pose = match &tr.pose_hist {
            Some(h) => h.sample(radius, &mut rng),
            None => CameraPose::from_angles(
                a.altitude.to_radians(),
                rng.random_range(0.0..std::f64::consts::TAU),
                radius,
            ),
        };
        let img = tr.render(za.row_slice(i), zs.row_slice(i), &pose)?;
        img.save_png(&a.out.join(format!("sample_{i:03}.png")))?;
        images.push(img);
    }
    let cols = (a.n as f64).sqrt().ceil() as usize;
    grid_export(&images, a.n.div_ceil(cols), cols, &a.out.join("grid.png"))?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn reconstruct<T: Scalar>(a: &Reconstruct) -> anyhow::Result<()> {
    let tr: Trainer<T> = checkpoint_load(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let idx: Vec<usize> = if a.index.is_empty() {
        (0..data.records.len()).filter(|&i| !data.records[i].holdout).collect()
    } else {
        a.index.clone()
    };
    mkdir(&a.out)?;
    let recs: Vec<&Record> = idx
        .iter()
        .map(|&i| data.records.get(i).with_context(|| format!("no record {i}")))
        .collect::<anyhow::Result<_>>()?;
    let scores = tr.record_psnrs(&data, &recs)?;
    for (&i, (r, s)) in idx.iter().zip(recs.iter().zip(&scores)) {
        tr.predict(&data, r)?
            .save_png(&a.out.join(format!("recon_{i:04}.png")))?;
        println!("record={i} object={} view={} psnr={s:.3}", r.object, r.view);
    }
    Ok(())
}

fn novel_view<T: Scalar>(a: &NovelView) -> anyhow::Result<()> {
    let tr: Trainer<T> = checkpoint_load(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let src = data
        .records
        .get(a.index)
        .with_context(|| format!("no record {}", a.index))?;
    let pose = CameraPose::from_angles(a.altitude.to_radians(), a.azimuth.to_radians(), tr.model.config.radius);
    let img = tr.novel_view(src, &pose)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    img.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_psnr<T: Scalar>(a: &EvalPsnr) -> anyhow::Result<()> {
    let tr: Trainer<T> = checkpoint_load(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    let recs: Vec<&Record> = data
        .records
        .iter()
        .filter(|r| match a.split {
            Split::Train => !r.holdout,
            Split::Holdout => r.holdout,
            Split::All => true,
        })
        .collect();
    if recs.is_empty() {
        bail!("split has no records");
    }
    let s = tr.record_psnrs(&data, &recs)?;
    println!(
        "images={} mean_psnr={}",
        s.len(),
        s.iter().sum::<f64>() / s.len() as f64
    );
    Ok(())
}

fn grid<T: Scalar>(a: &Grid) -> anyhow::Result<()> {
    let tr: Trainer<T> = checkpoint_load(&a.ckpt)?;
    let pose = CameraPose::from_angles(a.altitude.to_radians(), a.azimuth.to_radians(), tr.model.config.radius);
    let g = disentangle_grid(
        &tr,
        a.shapes,
        a.appearances,
        &pose,
        &mut ChaCha8Rng::seed_from_u64(a.seed),
    )?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    g.montage.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Runs `f` at the scalar width stored in the checkpoint.
macro_rules! by_ckpt {
    ($f:ident, $a:expr) => {
        match checkpoint_scalar_bytes(&$a.ckpt)? {
            4 => $f::<f32>(&$a),
            8 => $f::<f64>(&$a),
            n => bail!("unsupported scalar width {n}"),
        }
    };
}

fn run(cli: Cli) -> anyhow::Result<()> {
    setup_threads(cli.deterministic)?;
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(&a),
            Precision::F64 => train::<f64>(&a),
        },
        Cmd::Sample(a) => by_ckpt!(sample, a),
        Cmd::Reconstruct(a) => by_ckpt!(reconstruct, a),
        Cmd::NovelView(a) => by_ckpt!(novel_view, a),
        Cmd::EvalPsnr(a) => by_ckpt!(eval_psnr, a),
        Cmd::DisentangleGrid(a) => by_ckpt!(grid, a),
        Cmd::Keys => {
            let cfg = nerf_lebm::trainer::TrainConfig::preset("desk-mcmc")?;
            for k in nerf_lebm::runconfig::config_keys(&cfg).keys() {
                println!("{k}\t{}", describe(k).unwrap_or(""));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n\nsee `nerf-lebm help`");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
