//! Perturbation benchmark: a model trained on the unperturbed scene is
//! tested on moved objects, rescaled light, changed object counts and
//! injected noise. Support images at test time are rendered from the
//! perturbed scene, as a multi-view capture of the new frame would be.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::SupportSet;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::model::{render_view, FrozenScene, Model};
use crate::raster::Image;
use crate::rig::Rig;
use crate::scene::{perturb, render_gt_view, Perturbation, Scene};
use crate::train::{train, TrainData};

/// Perturbed frames per move / light sequence.
pub const SEQUENCE_STEPS: usize = 10;
pub const MOVE_DISTANCE: f64 = 0.3;
pub const LIGHT_RANGE: (f64, f64) = (0.5, 1.5);
pub const FEATURE_NOISE: f64 = 0.3;
/// The paper's image noise magnitude read against 0..255 and 0..10 pixel
/// scales.
pub const IMAGE_NOISE: [f64; 2] = [1.5 / 255.0, 0.15];
/// Object counts of the existence grid; the first is the training scene.
pub const EXISTENCE_COUNTS: [usize; 3] = [5, 6, 7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Move,
    Light,
    Existence,
    Noise,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Move, Protocol::Light, Protocol::Existence, Protocol::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Move => "move",
            Protocol::Light => "light",
            Protocol::Existence => "existence",
            Protocol::Noise => "noise",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown protocol '{s}'; expected move, light, existence or noise")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// One perturbation step, averaged over the test views.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub protocol: Protocol,
    pub step: usize,
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    /// `(reference - psnr) / reference * 100`, against the validation PSNR
    /// of the model that produced the row.
    pub degradation: f64,
    pub views: Vec<ViewScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub config_digest: String,
    pub model_seed: u64,
    pub bench_seed: u64,
    pub validation_psnr: f64,
    pub validation_ssim: f64,
    pub rows: Vec<BenchRow>,
}

impl BenchmarkReport {
    pub fn rows_for(&self, protocol: Protocol) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.protocol == protocol)
    }

    /// Mean PSNR over the perturbed steps (step 0 excluded) of `protocols`.
    pub fn perturbed_mean_psnr(&self, protocols: &[Protocol]) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| protocols.contains(&r.protocol) && r.step > 0)
            .map(|r| r.psnr)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// One line per step and view plus a per-step mean line (`view` empty).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["protocol", "step", "label", "view", "psnr", "ssim", "degradation_pct"])?;
        for r in &self.rows {
            for v in &r.views {
                w.write_record([
                    r.protocol.name(),
                    &r.step.to_string(),
                    &r.label,
                    &v.view.to_string(),
                    &format!("{:.6}", v.psnr),
                    &format!("{:.6}", v.ssim),
                    "",
                ])?;
            }
            w.write_record([
                r.protocol.name(),
                &r.step.to_string(),
                &r.label,
                "",
                &format!("{:.6}", r.psnr),
                &format!("{:.6}", r.ssim),
                &format!("{:.4}", r.degradation),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}  model seed {}  bench seed {}", self.config_digest, self.model_seed, self.bench_seed);
        let _ = writeln!(s, "validation: PSNR {:.2} dB  SSIM {:.4}", self.validation_psnr, self.validation_ssim);
        let _ = writeln!(s, "{:<10} {:>4}  {:<34} {:>8} {:>7} {:>9}", "protocol", "step", "perturbation", "PSNR", "SSIM", "degr. %");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>4}  {:<34} {:>8.2} {:>7.4} {:>9.2}",
                r.protocol.name(),
                r.step,
                r.label,
                r.psnr,
                r.ssim,
                r.degradation
            );
        }
        s
    }
}

/// Everything a benchmark run needs besides the protocol.
pub struct BenchContext<'a> {
    pub model: &'a Model,
    pub scene: &'a Scene,
    pub rig: &'a Rig,
    pub seed: u64,
    /// Renders and ground truth are written here when set.
    pub image_dir: Option<PathBuf>,
}

/// A test frame: the scene to capture plus optional noise on the support
/// images or on the feature volume.
#[derive(Clone, Debug)]
struct Frame {
    label: String,
    scene: Scene,
    image_noise: Option<(f64, u64)>,
    feature_noise: Option<(f64, u64)>,
}

impl Frame {
    fn clean(label: impl Into<String>, scene: Scene) -> Self {
        Frame {
            label: label.into(),
            scene,
            image_noise: None,
            feature_noise: None,
        }
    }
}

/// Rounds through 8 bits so scores match the stored images exactly.
fn quantized(img: &Image) -> Result<Image> {
    Image::from_rgb8(img.width(), img.height(), &img.to_rgb8())
}

fn image_name(dir: &Path, protocol: &str, step: usize, view: usize, gt: bool) -> PathBuf {
    let suffix = if gt { "_gt" } else { "" };
    dir.join(format!("{protocol}_s{step:02}_v{view:02}{suffix}.png"))
}

/// Scores `model` on the test views of one frame.
fn score_frame(model: &Model, rig: &Rig, frame: &Frame, tag: Option<(&Path, &str, usize)>) -> Result<Vec<ViewScore>> {
    let cams = rig.training_cameras();
    let mut support_images: Vec<Image> = cams.iter().map(|c| render_gt_view(&frame.scene, c)).collect();
    if let Some((sigma, seed)) = frame.image_noise {
        support_images = support_images
            .iter()
            .enumerate()
            .map(|(k, img)| img.with_noise(sigma, seed.wrapping_add(k as u64)))
            .collect::<Result<_>>()?;
    }
    let support = SupportSet::new(&support_images, &cams, model.config.grid(), rig.near, rig.far)?;
    let frozen = match frame.feature_noise {
        Some((sigma, seed)) => FrozenScene::with_feature_noise(model, &support, sigma, seed)?,
        None => FrozenScene::new(model, &support)?,
    };
    let mut scores = Vec::with_capacity(rig.validation_views.len());
    for &v in &rig.validation_views {
        let cam = rig.camera(v)?;
        let render = quantized(&render_view(model, &frozen, &support, cam, rig.near, rig.far, frame.scene.background)?)?;
        let gt = quantized(&render_gt_view(&frame.scene, cam))?;
        if let Some((dir, protocol, step)) = tag {
            render.save(&image_name(dir, protocol, step, v, false))?;
            gt.save(&image_name(dir, protocol, step, v, true))?;
        }
        scores.push(ViewScore {
            view: v,
            psnr: psnr(&render, &gt)?,
            ssim: ssim(&render, &gt)?,
        });
    }
    Ok(scores)
}

fn mean(scores: &[ViewScore]) -> (f64, f64) {
    let n = scores.len().max(1) as f64;
    (
        scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
    )
}

/// Mean PSNR / SSIM over the validation views of the unperturbed scene.
pub fn validation_scores(model: &Model, scene: &Scene, rig: &Rig) -> Result<Vec<ViewScore>> {
    score_frame(model, rig, &Frame::clean("unperturbed", scene.clone()), None)
}

/// Step 0 is always the unperturbed scene.
fn sequence(protocol: Protocol, scene: &Scene, seed: u64) -> Result<Vec<Frame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = vec![Frame::clean("none", scene.clone())];
    match protocol {
        Protocol::Move => {
            for _ in 0..SEQUENCE_STEPS {
                let index = rng.gen_range(0..scene.objects.len());
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let translation = [MOVE_DISTANCE * angle.cos(), 0.0, MOVE_DISTANCE * angle.sin()];
                let p = Perturbation::MoveObject { index, translation };
                let label = format!("object {index} by ({:+.2}, 0, {:+.2})", translation[0], translation[2]);
                frames.push(Frame::clean(label, perturb(scene, &p)?));
            }
        }
        Protocol::Light => {
            for _ in 0..SEQUENCE_STEPS {
                let factor = rng.gen_range(LIGHT_RANGE.0..LIGHT_RANGE.1);
                let p = Perturbation::ScaleLight { factor };
                frames.push(Frame::clean(format!("light x{factor:.3}"), perturb(scene, &p)?));
            }
        }
        Protocol::Noise => {
            let mut f = Frame::clean(format!("feature sigma {FEATURE_NOISE}"), scene.clone());
            f.feature_noise = Some((FEATURE_NOISE, rng.gen()));
            frames.push(f);
            for sigma in IMAGE_NOISE {
                let mut f = Frame::clean(format!("image sigma {sigma:.4}"), scene.clone());
                f.image_noise = Some((sigma, rng.gen()));
                frames.push(f);
            }
        }
        Protocol::Existence => unreachable!("the existence grid is built separately"),
    }
    Ok(frames)
}

/// Scenes with 5, 6 and 7 objects: the base scene plus one and two added
/// objects.
pub fn existence_scenes(scene: &Scene, seed: u64) -> Result<Vec<Scene>> {
    if scene.objects.len() != EXISTENCE_COUNTS[0] {
        return Err(Error::invalid(format!(
            "existence protocol needs a {}-object training scene, got {}",
            EXISTENCE_COUNTS[0],
            scene.objects.len()
        )));
    }
    let six = perturb(scene, &Perturbation::AddObject { seed: seed ^ 0x6 })?;
    let seven = perturb(&six, &Perturbation::AddObject { seed: seed ^ 0x7 })?;
    Ok(vec![scene.clone(), six, seven])
}

pub fn run_benchmark(protocol: Protocol, ctx: &BenchContext) -> Result<BenchmarkReport> {
    if let Some(dir) = &ctx.image_dir {
        std::fs::create_dir_all(dir)?;
    }
    let (val_psnr, val_ssim) = mean(&validation_scores(ctx.model, ctx.scene, ctx.rig)?);
    let mut rows = Vec::new();
    let tag = |step: usize| ctx.image_dir.as_deref().map(|d| (d, protocol.name(), step));
    if protocol == Protocol::Existence {
        let scenes = existence_scenes(ctx.scene, ctx.seed)?;
        for (ti, train_scene) in scenes.iter().enumerate() {
            let model = if ti == 0 {
                ctx.model.clone()
            } else {
                let data = TrainData::from_scene(train_scene, ctx.rig, &ctx.model.config)?;
                train(Model::init(&ctx.model.config)?, &data, |_| {})?.model
            };
            let (reference, _) = if ti == 0 {
                (val_psnr, val_ssim)
            } else {
                mean(&validation_scores(&model, train_scene, ctx.rig)?)
            };
            for (si, test_scene) in scenes.iter().enumerate() {
                let step = ti * scenes.len() + si;
                let label = format!("trained on {} / tested on {}", EXISTENCE_COUNTS[ti], EXISTENCE_COUNTS[si]);
                let views = score_frame(&model, ctx.rig, &Frame::clean(label.clone(), test_scene.clone()), tag(step))?;
                rows.push(row(protocol, step, label, views, reference));
            }
        }
    } else {
        for (step, frame) in sequence(protocol, ctx.scene, ctx.seed)?.into_iter().enumerate() {
            let views = score_frame(ctx.model, ctx.rig, &frame, tag(step))?;
            rows.push(row(protocol, step, frame.label, views, val_psnr));
        }
    }
    Ok(BenchmarkReport {
        config_digest: ctx.model.config.digest_hex(),
        model_seed: ctx.model.config.seed,
        bench_seed: ctx.seed,
        validation_psnr: val_psnr,
        validation_ssim: val_ssim,
        rows,
    })
}

fn row(protocol: Protocol, step: usize, label: String, views: Vec<ViewScore>, reference: f64) -> BenchRow {
    let (p, s) = mean(&views);
    BenchRow {
        protocol,
        step,
        label,
        psnr: p,
        ssim: s,
        degradation: (reference - p) / reference * 100.0,
        views,
    }
}

/// Concatenates per-protocol reports that share a model and seed.
pub fn merge_reports(reports: Vec<BenchmarkReport>) -> Result<BenchmarkReport> {
    let mut it = reports.into_iter();
    let mut first = it.next().ok_or_else(|| Error::invalid("no reports to merge"))?;
    for r in it {
        if r.config_digest != first.config_digest || r.bench_seed != first.bench_seed {
            return Err(Error::invalid("reports come from different models or seeds"));
        }
        first.rows.extend(r.rows);
    }
    Ok(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::rig::ArcRig;
    use crate::scene::generate_scene;

    fn tiny() -> (Model, Scene, Rig) {
        let config = TrainConfig {
            grid_x: 8,
            grid_y: 8,
            depth_planes: 4,
            samples: 4,
            ..TrainConfig::default()
        };
        let rig = ArcRig {
            width: 16,
            height: 16,
            ..ArcRig::default()
        }
        .build()
        .unwrap();
        (Model::init(&config).unwrap(), generate_scene(5, 7).unwrap(), rig)
    }

    #[test]
    fn protocol_names_parse() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert!("shake".parse::<Protocol>().is_err());
    }

    #[test]
    fn step_zero_matches_validation_and_noise_free_is_zero_degradation() {
        let (model, scene, rig) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let ctx = BenchContext {
            model: &model,
            scene: &scene,
            rig: &rig,
            seed: 3,
            image_dir: Some(dir.path().to_path_buf()),
        };
        let report = run_benchmark(Protocol::Noise, &ctx).unwrap();
        assert_eq!(report.rows.len(), 4);
        let zero = &report.rows[0];
        assert_eq!(zero.psnr, report.validation_psnr);
        assert_eq!(zero.ssim, report.validation_ssim);
        assert_eq!(zero.degradation, 0.0);
        // Stored pairs reproduce the reported numbers.
        let v = zero.views[1];
        let r = Image::load(&image_name(dir.path(), "noise", 0, v.view, false)).unwrap();
        let g = Image::load(&image_name(dir.path(), "noise", 0, v.view, true)).unwrap();
        assert_eq!(psnr(&r, &g).unwrap(), v.psnr);
        assert_eq!(ssim(&r, &g).unwrap(), v.ssim);
        assert!(report.rows[1].label.starts_with("feature"));

        let again = run_benchmark(Protocol::Noise, &BenchContext { image_dir: None, ..ctx }).unwrap();
        assert_eq!(again, report);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4 * 5);
        assert!(report.text_table().contains("feature sigma 0.3"));
    }

    #[test]
    fn sequences_have_eleven_frames_and_existence_scenes_grow() {
        let scene = generate_scene(5, 7).unwrap();
        for p in [Protocol::Move, Protocol::Light] {
            let frames = sequence(p, &scene, 1).unwrap();
            assert_eq!(frames.len(), SEQUENCE_STEPS + 1);
            assert_eq!(frames[0].scene, scene);
            assert!(frames[1..].iter().all(|f| f.scene != scene));
        }
        let counts: Vec<usize> = existence_scenes(&scene, 1).unwrap().iter().map(|s| s.objects.len()).collect();
        assert_eq!(counts, EXISTENCE_COUNTS);
        assert!(existence_scenes(&generate_scene(4, 7).unwrap(), 1).is_err());
    }
}
