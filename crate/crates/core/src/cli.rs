//! The `hsplat` command line.
//!
//! Configuration precedence for `train` is preset, then the JSON overlay
//! given with `--config`, then individual flags.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::Serialize;

use crate::dataio::{
    export_ply, gen_toy_scene, load_checkpoint, load_nerf_synthetic, save_checkpoint, save_png, save_png_gray,
    write_nerf_dataset, Dataset, ToyScene, ToySpec,
};
use crate::metrics::{bench_render, evaluate, BenchReport};
use crate::renderer::{render_decomposed, FeatureMask};
use crate::train::{Preset, Trainer};
use crate::{Camera, Error, KernelMode, Result, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "hsplat", version, about = "Differentiable surfel splatting: train, render, evaluate")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a surfel cloud against a dataset or a generated toy scene.
    Train(TrainArgs),
    /// Render a checkpoint from a turntable of cameras.
    Render(RenderArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Render full, surfel-only and hash-only images side by side.
    Decompose(DecomposeArgs),
    /// Time renders of one or more checkpoints.
    Bench(BenchArgs),
    /// Write a checkpoint's surfels as a binary PLY file.
    ExportPly(ExportPlyArgs),
    /// Generate a toy dataset directory.
    GenScene(GenSceneArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Full,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Beta,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    SurfelOnly,
    HashOnly,
}

impl From<ModeArg> for FeatureMask {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => FeatureMask::Full,
            ModeArg::SurfelOnly => FeatureMask::SurfelOnly,
            ModeArg::HashOnly => FeatureMask::HashOnly,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with transforms_{train,test}.json (default: none, use --toy).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Toy scene used when --data is absent: textured_quad, two_planes or cube.
    #[arg(long, default_value = "textured_quad")]
    pub toy: String,
    /// Toy image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub toy_size: u32,
    /// Toy view count; every fourth view is held out.
    #[arg(long, default_value_t = 8)]
    pub toy_views: usize,
}

impl DataArgs {
    pub fn load(&self) -> Result<Dataset> {
        match &self.data {
            Some(dir) => load_nerf_synthetic(dir),
            None => {
                let spec = ToySpec { width: self.toy_size, height: self.toy_size, views: self.toy_views, ..toy_spec(&self.toy)? };
                Ok(gen_toy_scene(&spec)?.0)
            }
        }
    }
}

fn toy_spec(name: &str) -> Result<ToySpec> {
    Ok(ToySpec::new(name.parse::<ToyScene>()?))
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for checkpoints, log and report.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Hyperparameters: desk is sized for minutes on a CPU, full for real scenes.
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    pub preset: PresetArg,
    /// JSON file overlaid on the preset (default: none).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Iteration budget; phase boundaries scale with it (default: preset).
    #[arg(long)]
    pub iters: Option<u64>,
    /// Splat kernel after warm-up (default: preset).
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    /// Freeze kernel shapes.
    #[arg(long, default_value_t = false)]
    pub no_beta: bool,
    /// Skip the entropy phase.
    #[arg(long, default_value_t = false)]
    pub no_bce: bool,
    /// Save a checkpoint every N iterations; 0 saves only the last.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from this checkpoint instead of starting fresh (default: none).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct TurntableArgs {
    /// Number of turntable cameras.
    #[arg(long, default_value_t = 8)]
    pub turntable: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 70.0)]
    pub focal: f64,
    /// Orbit radius around the scene centre.
    #[arg(long, default_value_t = 3.5)]
    pub radius: f64,
    /// Camera height above the scene centre.
    #[arg(long, default_value_t = 0.6)]
    pub elevation: f64,
}

impl TurntableArgs {
    /// Cameras evenly spaced on a horizontal circle, all looking at `center`.
    pub fn cameras(&self, center: Vector3<f64>) -> Vec<Camera> {
        (0..self.turntable)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / self.turntable as f64;
                let pos = center + Vector3::new(self.radius * a.sin(), self.elevation, self.radius * a.cos());
                Camera::look_at(self.size, self.size, self.focal, self.focal, pos, center, Vector3::new(0.0, 1.0, 0.0))
            })
            .collect()
    }
}

#[derive(Clone, Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "renders")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    pub mode: ModeArg,
    /// Also write alpha, depth and normal images.
    #[arg(long, default_value_t = false)]
    pub aux: bool,
    #[command(flatten)]
    pub cameras: TurntableArgs,
}

#[derive(Clone, Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Receives full/, surfel_only/ and hash_only/ subdirectories.
    #[arg(long, default_value = "decomposed")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cameras: TurntableArgs,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Score the training views instead of the held-out ones.
    #[arg(long, default_value_t = false)]
    pub train_split: bool,
    /// Also write the report as JSON here (default: none).
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    /// One or more checkpoints, timed on the same cameras.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Timed passes over the cameras.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Write the JSON report here instead of standard output (default: none).
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub cameras: TurntableArgs,
}

#[derive(Clone, Debug, Args)]
pub struct ExportPlyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "surfels.ply")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct GenSceneArgs {
    /// textured_quad, two_planes or cube.
    #[arg(long, default_value = "textured_quad")]
    pub toy: String,
    #[arg(long, default_value = "scene")]
    pub out: PathBuf,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
}

/// Preset, overlay and flags merged into one validated configuration.
pub fn train_config(args: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let preset = match args.preset {
        PresetArg::Full => Preset::Full,
        PresetArg::Desk => Preset::Desk,
    };
    let mut cfg = TrainConfig::preset(preset);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg = TrainConfig::overlay_json(&cfg, &text)?;
    }
    if let Some(n) = args.iters {
        cfg.scale_iterations(n);
    }
    if let Some(k) = args.kernel {
        cfg.kernel = match k {
            KernelArg::Beta => KernelMode::Beta,
            KernelArg::Gaussian => KernelMode::Gaussian,
        };
    }
    if args.no_beta {
        cfg.beta_enabled = false;
        if args.kernel.is_none() {
            cfg.kernel = KernelMode::Gaussian;
        }
    }
    if args.no_bce {
        cfg.bce_enabled = false;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let ds = args.data.load()?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::from_checkpoint(&load_checkpoint(path)?)?,
        None => Trainer::new(train_config(args, seed)?, &ds)?,
    };
    create_dir(&args.out)?;
    trainer.diagnostics_dir = Some(args.out.clone());
    write_text(&args.out.join("config.json"), &trainer.cfg.to_json())?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if trainer.is_done() {
        save_checkpoint(&trainer.checkpoint(), &args.out.join(format!("ckpt_{:06}.ckpt", trainer.iter)))?;
    }
    while !trainer.is_done() {
        let rec = trainer.step(&ds)?;
        if rec.iter % trainer.cfg.log_every == 0 || trainer.is_done() {
            let line = serde_json::to_string(&rec).expect("plain data");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if rec.iter % (trainer.cfg.log_every * 100) == 0 {
                log::info!(
                    "iter {} {:?} loss {:.5} psnr {:.2} surfels {}",
                    rec.iter,
                    rec.phase,
                    rec.losses.total,
                    rec.psnr,
                    rec.n_surfels
                );
            }
        }
        let every = args.checkpoint_every;
        if trainer.is_done() || (every > 0 && trainer.iter % every == 0) {
            save_checkpoint(&trainer.checkpoint(), &args.out.join(format!("ckpt_{:06}.ckpt", trainer.iter)))?;
        }
    }
    save_checkpoint(&trainer.checkpoint(), &args.out.join("final.ckpt"))?;

    let cfg = trainer.eval_config();
    let train_report = evaluate(&trainer.cloud, &trainer.grid, &trainer.decoder, &ds.train, &cfg)?;
    let mut summary = format!("final train psnr {:.3}", train_report.mean_psnr);
    if !ds.test.is_empty() {
        let report = evaluate(&trainer.cloud, &trainer.grid, &trainer.decoder, &ds.test, &cfg)?;
        write_text(&args.out.join("eval.json"), &report.to_json())?;
        summary.push_str(&format!(" test psnr {:.3}", report.mean_psnr));
    }
    summary.push_str(&format!(" surfels {}", trainer.cloud.len()));
    writeln!(log, "{}", serde_json::json!({ "final": summary })).map_err(|e| Error::io(&log_path, e))?;
    println!("{summary}");
    Ok(())
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(&load_checkpoint(path)?)
}

fn scene_center(t: &Trainer) -> Vector3<f64> {
    0.5 * (t.grid.aabb_min + t.grid.aabb_max)
}

fn render_views(t: &Trainer, cams: &[Camera], mask: FeatureMask, aux: bool, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let cfg = t.eval_config();
    let digits = cams.len().saturating_sub(1).to_string().len().max(3);
    for (i, cam) in cams.iter().enumerate() {
        let f = render_decomposed(&t.cloud, &t.grid, &t.decoder, cam, &cfg, mask);
        save_png(&out.join(format!("view_{i:0digits$}.png")), f.width, f.height, &f.rgb)?;
        if aux {
            save_png_gray(&out.join(format!("alpha_{i:0digits$}.png")), f.width, f.height, &f.alpha)?;
            let far = f.depth.iter().cloned().fold(0.0f64, f64::max);
            let depth: Vec<f64> = f.depth.iter().map(|d| if far > 0.0 { d / far } else { 0.0 }).collect();
            save_png_gray(&out.join(format!("depth_{i:0digits$}.png")), f.width, f.height, &depth)?;
            let normal: Vec<f64> = f.normal.iter().map(|n| 0.5 * (n + 1.0)).collect();
            save_png(&out.join(format!("normal_{i:0digits$}.png")), f.width, f.height, &normal)?;
        }
    }
    Ok(cams.len())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let t = load_trainer(&args.checkpoint)?;
    let cams = args.cameras.cameras(scene_center(&t));
    let n = render_views(&t, &cams, args.mode.into(), args.aux, &args.out)?;
    println!("wrote {n} views to {}", args.out.display());
    Ok(())
}

fn cmd_decompose(args: &DecomposeArgs) -> Result<()> {
    let t = load_trainer(&args.checkpoint)?;
    let cams = args.cameras.cameras(scene_center(&t));
    for (name, mask) in
        [("full", FeatureMask::Full), ("surfel_only", FeatureMask::SurfelOnly), ("hash_only", FeatureMask::HashOnly)]
    {
        render_views(&t, &cams, mask, false, &args.out.join(name))?;
    }
    println!("wrote {} views per mode to {}", cams.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let t = load_trainer(&args.checkpoint)?;
    let ds = args.data.load()?;
    let views = if args.train_split { &ds.train } else { &ds.test };
    let report = evaluate(&t.cloud, &t.grid, &t.decoder, views, &t.eval_config())?;
    print!("{}", report.table());
    if let Some(path) = &args.json {
        write_text(path, &report.to_json())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRun {
    checkpoint: PathBuf,
    #[serde(flatten)]
    report: BenchReport,
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut runs = Vec::new();
    for path in &args.checkpoint {
        let t = load_trainer(path)?;
        let cams = args.cameras.cameras(scene_center(&t));
        let report = bench_render(&t.cloud, &t.grid, &t.decoder, &cams, &t.eval_config(), args.repeats)?;
        runs.push(BenchRun { checkpoint: path.clone(), report });
    }
    let text = serde_json::to_string_pretty(&serde_json::json!({ "runs": runs })).expect("plain data");
    match &args.json {
        Some(path) => write_text(path, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_export_ply(args: &ExportPlyArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    export_ply(&ck.cloud, &args.out)?;
    println!("wrote {} surfels to {}", ck.cloud.len(), args.out.display());
    Ok(())
}

fn cmd_gen_scene(args: &GenSceneArgs, _seed: u64) -> Result<()> {
    let spec = ToySpec { width: args.size, height: args.size, views: args.views, ..toy_spec(&args.toy)? };
    let (ds, _) = gen_toy_scene(&spec)?;
    write_nerf_dataset(&args.out, &ds)?;
    println!("wrote {} train and {} test views to {}", ds.train.len(), ds.test.len(), args.out.display());
    Ok(())
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Bench(a) => cmd_bench(a),
        Command::ExportPly(a) => cmd_export_ply(a),
        Command::GenScene(a) => cmd_gen_scene(a, cli.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_value_flag_documents_a_default() {
        let root = Cli::command();
        for sub in root.get_subcommands() {
            for arg in sub.get_arguments() {
                if arg.is_positional() || arg.is_required_set() || !arg.get_action().takes_values() {
                    continue;
                }
                let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                assert!(
                    !arg.get_default_values().is_empty() || help.contains("(default:"),
                    "{} --{} has no documented default",
                    sub.get_name(),
                    arg.get_id()
                );
            }
            let rendered = sub.clone().render_long_help().to_string();
            assert!(rendered.contains("[default:"), "{}", sub.get_name());
        }
    }

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("hsplat").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_preset_and_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let overlay = dir.path().join("c.json");
        fs::write(&overlay, r#"{"mcmc_cap": 100, "lr": {"hash": 0.25}}"#).unwrap();
        let cli = parse(&["--seed", "9", "train", "--config", overlay.to_str().unwrap(), "--iters", "300"]);
        let Command::Train(a) = &cli.command else { panic!() };
        let cfg = train_config(a, cli.seed).unwrap();
        assert_eq!((cfg.mcmc_cap, cfg.lr.hash, cfg.seed), (100, 0.25, 9));
        assert_eq!((cfg.total_iters, cfg.warmup_iters, cfg.bce_start_iter), (300, 100, 250));
    }

    #[test]
    fn conflicting_kernel_flags_are_rejected() {
        let cli = parse(&["train", "--kernel", "beta", "--no-beta"]);
        let Command::Train(a) = &cli.command else { panic!() };
        assert!(matches!(train_config(a, 0), Err(Error::Config(_))));
        let cli = parse(&["train", "--no-beta"]);
        let Command::Train(a) = &cli.command else { panic!() };
        assert_eq!(train_config(a, 0).unwrap().kernel, KernelMode::Gaussian);
    }

    #[test]
    fn unknown_overlay_key_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let overlay = dir.path().join("c.json");
        fs::write(&overlay, r#"{"learning_rate": 1}"#).unwrap();
        let cli = parse(&["train", "--config", overlay.to_str().unwrap()]);
        let Command::Train(a) = &cli.command else { panic!() };
        assert!(matches!(train_config(a, 0), Err(Error::Config(_))));
    }

    #[test]
    fn turntable_cameras_face_the_centre() {
        let tt = TurntableArgs { turntable: 5, size: 16, focal: 20.0, radius: 2.0, elevation: 0.5 };
        let c = Vector3::new(0.1, 0.2, 0.3);
        let cams = tt.cameras(c);
        assert_eq!(cams.len(), 5);
        for cam in &cams {
            let d = cam.world_to_camera(&c);
            assert!(d.x.abs() < 1e-12 && d.y.abs() < 1e-12 && d.z > 0.0);
        }
    }
}
