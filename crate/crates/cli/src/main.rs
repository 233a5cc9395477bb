use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use oponerf_core::benchmark::{merge_reports, run_benchmark, BenchContext, Protocol};
use oponerf_core::checkpoint::Checkpoint;
use oponerf_core::config::{ablation, TrainConfig};
use oponerf_core::encoder::SupportSet;
use oponerf_core::error::Error as CoreError;
use oponerf_core::gradsuite::run_suite;
use oponerf_core::metrics::{psnr, ssim};
use oponerf_core::model::{render_view, FrozenScene, Model};
use oponerf_core::raster::Image;
use oponerf_core::rig::{ArcRig, Rig};
use oponerf_core::scene::{generate_scene, render_gt_view, Scene};
use oponerf_core::train::{write_loss_csv, LossRecord, TrainData, Trainer};

const SCENE_FILE: &str = "scene.toml";
const RIG_FILE: &str = "rig.toml";
const CHECKPOINT_FILE: &str = "checkpoint.opo";
const LOSS_FILE: &str = "loss.csv";

#[derive(Parser)]
#[command(name = "oponerf", version, about = "Point-wise personalized neural rendering on synthetic desk scenes")]
struct Cli {
    /// Worker threads; defaults to OPONERF_THREADS, then to all cores.
    #[arg(long, global = true, env = "OPONERF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene, its camera rig and the ground-truth views.
    SceneGen(SceneGenArgs),
    /// Train on the training views of a generated scene.
    Train(TrainArgs),
    /// Render views from a checkpoint.
    Render(RenderArgs),
    /// PSNR and SSIM between two images or two directories of images.
    Eval(EvalArgs),
    /// Run perturbation benchmark protocols against a checkpoint.
    Bench(BenchArgs),
    /// Print or train the config of one ablation trial.
    Ablate(AblateArgs),
    /// Finite-difference gradient suite; exits non-zero on any failure.
    Gradcheck,
}

#[derive(Args)]
struct SceneGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 48)]
    width: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 21)]
    views: usize,
    #[arg(long, default_value_t = 5)]
    training: usize,
    /// Total camera arc in degrees.
    #[arg(long, default_value_t = 60.0)]
    arc: f64,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, config: &mut TrainConfig) {
        if let Some(n) = self.iterations {
            config.iterations = n;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Print the default config and exit.
    #[arg(long)]
    print_defaults: bool,
    /// Directory written by scene-gen.
    #[arg(long, required_unless_present = "print_defaults")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_defaults")]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// View indices; all rig views by default.
    #[arg(long, value_delimiter = ',')]
    views: Vec<usize>,
}

#[derive(Args)]
struct EvalArgs {
    predicted: PathBuf,
    reference: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// move, light, existence, noise or all.
    #[arg(long, default_value = "all")]
    protocol: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    trial: u32,
    /// Train the trial config on this data directory instead of printing it.
    #[arg(long, requires = "out")]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::SceneGen(a) => scene_gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Gradcheck => gradcheck_cmd(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn view_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("view_{view:02}.png"))
}

fn scene_gen(a: &SceneGenArgs) -> Result<ExitCode> {
    let rig = ArcRig {
        views: a.views,
        arc_degrees: a.arc,
        width: a.width,
        height: a.height,
        training: a.training,
        ..ArcRig::default()
    }
    .build()?;
    let scene = generate_scene(a.count, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    scene.save(&a.out.join(SCENE_FILE))?;
    rig.save(&a.out.join(RIG_FILE))?;
    for (v, cam) in rig.cameras.iter().enumerate() {
        render_gt_view(&scene, cam).save(&view_file(&a.out, v))?;
    }
    println!("wrote {} views of a {}-object scene to {}", rig.cameras.len(), a.count, a.out.display());
    Ok(ExitCode::SUCCESS)
}

struct DataDir {
    scene: Scene,
    rig: Rig,
    images: Vec<Image>,
}

fn load_data(dir: &Path) -> Result<DataDir> {
    let scene = Scene::load(&dir.join(SCENE_FILE)).with_context(|| format!("loading scene from {}", dir.display()))?;
    let rig = Rig::load(&dir.join(RIG_FILE)).with_context(|| format!("loading rig from {}", dir.display()))?;
    let images = (0..rig.cameras.len())
        .map(|v| {
            let p = view_file(dir, v);
            Image::load(&p).with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<_>>()?;
    Ok(DataDir { scene, rig, images })
}

fn train_data(d: &DataDir, config: &TrainConfig) -> Result<TrainData> {
    let images = d.rig.training_views.iter().map(|&v| d.images[v].clone()).collect();
    Ok(TrainData::new(images, d.rig.training_cameras(), d.rig.near, d.rig.far, d.scene.background, config)?)
}

fn support_for(d: &DataDir, model: &Model) -> Result<SupportSet> {
    let images: Vec<Image> = d.rig.training_views.iter().map(|&v| d.images[v].clone()).collect();
    Ok(SupportSet::new(&images, &d.rig.training_cameras(), model.config.grid(), d.rig.near, d.rig.far)?)
}

/// Trains and writes the checkpoint and loss CSV. On a non-finite loss the
/// last good state is saved before failing.
fn run_training(config: TrainConfig, data_dir: &Path, out: &Path) -> Result<ExitCode> {
    config.validate()?;
    let d = load_data(data_dir)?;
    let data = train_data(&d, &config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut trainer = Trainer::new(Model::init(&config)?);
    let mut records: Vec<LossRecord> = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    let log_every = config.log_every.max(1);
    for _ in 0..config.iterations {
        match trainer.step(&data) {
            Ok(r) => {
                if r.iteration % log_every == 0 || r.iteration + 1 == config.iterations {
                    eprintln!("iter {:>5}  pho {:.5}  total {:.5}  {:.1}s", r.iteration, r.pho, r.total, start.elapsed().as_secs_f64());
                }
                records.push(r);
            }
            Err(e @ CoreError::NonFiniteLoss { .. }) => {
                Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
                write_loss_csv(fs::File::create(out.join(LOSS_FILE))?, &records)?;
                bail!("{e}; last good checkpoint written to {}", ckpt_path.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
    write_loss_csv(fs::File::create(out.join(LOSS_FILE))?, &records)?;
    println!("wrote {} and {}", ckpt_path.display(), out.join(LOSS_FILE).display());
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: &TrainArgs) -> Result<ExitCode> {
    if a.print_defaults {
        print!("{}", TrainConfig::default().to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    a.overrides.apply(&mut config);
    let (data, out) = (a.data.as_ref().expect("required by clap"), a.out.as_ref().expect("required by clap"));
    run_training(config, data, out)
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ckpt.model()?)
}

fn render_cmd(a: &RenderArgs) -> Result<ExitCode> {
    let model = load_model(&a.checkpoint)?;
    let d = load_data(&a.data)?;
    let support = support_for(&d, &model)?;
    let frozen = FrozenScene::new(&model, &support)?;
    let views: Vec<usize> = if a.views.is_empty() { (0..d.rig.cameras.len()).collect() } else { a.views.clone() };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for v in views {
        let cam = d.rig.camera(v)?;
        let img = render_view(&model, &frozen, &support, cam, d.rig.near, d.rig.far, d.scene.background)?;
        img.save(&view_file(&a.out, v))?;
    }
    println!("wrote renders to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: &EvalArgs) -> Result<ExitCode> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if a.predicted.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&a.predicted)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no PNG images in {}", a.predicted.display());
        }
        names.into_iter().map(|n| (n.clone(), a.predicted.join(&n), a.reference.join(&n))).collect()
    } else {
        vec![(a.predicted.display().to_string(), a.predicted.clone(), a.reference.clone())]
    };
    let (mut sp, mut ss) = (0.0, 0.0);
    for (name, p, r) in &pairs {
        let pi = Image::load(p).with_context(|| format!("loading {}", p.display()))?;
        let ri = Image::load(r).with_context(|| format!("loading {}", r.display()))?;
        let (vp, vs) = (psnr(&pi, &ri)?, ssim(&pi, &ri)?);
        println!("{name}  PSNR {vp:.4} dB  SSIM {vs:.6}");
        sp += vp;
        ss += vs;
    }
    if pairs.len() > 1 {
        let n = pairs.len() as f64;
        println!("mean  PSNR {:.4} dB  SSIM {:.6}", sp / n, ss / n);
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(a: &BenchArgs) -> Result<ExitCode> {
    let protocols: Vec<Protocol> = if a.protocol == "all" { Protocol::ALL.to_vec() } else { vec![a.protocol.parse()?] };
    let model = load_model(&a.checkpoint)?;
    let d = load_data(&a.data)?;
    let ctx = BenchContext {
        model: &model,
        scene: &d.scene,
        rig: &d.rig,
        seed: a.seed,
        image_dir: Some(a.out.join("images")),
    };
    let reports = protocols.iter().map(|&p| run_benchmark(p, &ctx)).collect::<std::result::Result<Vec<_>, _>>()?;
    let report = merge_reports(reports)?;
    report.write_csv(fs::File::create(a.out.join("report.csv"))?)?;
    let table = report.text_table();
    fs::write(a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn ablate_cmd(a: &AblateArgs) -> Result<ExitCode> {
    let mut config = ablation(a.trial)?;
    a.overrides.apply(&mut config);
    match (&a.data, &a.out) {
        (Some(data), Some(out)) => run_training(config, data, out),
        _ => {
            print!("{}", config.to_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gradcheck_cmd() -> Result<ExitCode> {
    let report = run_suite()?;
    for c in report.ops.iter().chain(&report.model) {
        println!("{:<6} {:<40} rel error {:.3e}", if c.passed() { "ok" } else { "FAIL" }, c.name, c.rel_error);
    }
    for u in &report.probe_failures {
        println!("FAIL   surrogate probe at {u}");
    }
    println!("{:.1}s", report.elapsed.as_secs_f64());
    Ok(if report.passed() {
        println!("all gradient checks passed");
        ExitCode::SUCCESS
    } else {
        println!("{} gradient checks failed", report.failures().count() + report.probe_failures.len());
        ExitCode::FAILURE
    })
}
