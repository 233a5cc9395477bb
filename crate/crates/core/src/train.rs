//! Objectives, the Adam optimizer and the deterministic training loop.

use std::io::Write;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{Camera, Ray};
use crate::config::{AdaptMode, TrainConfig, TARGET_LAYERS};
use crate::encoder::SupportSet;
use crate::error::{Error, Result};
use crate::model::{forward_rays, sample_pixels, scene_context, Model, NoiseSource, RaySamples};
use crate::nn::ParamSet;
use crate::raster::Image;
use crate::rig::Rig;
use crate::scene::{render_gt_view, Scene};
use crate::tensor::{GatherTable, Tape, Tensor, Var};

/// Mean over rays of the squared colour error.
pub fn photometric_loss(tape: &mut Tape, predicted: Var, target: Var) -> Result<Var> {
    let rays = tape.shape(predicted)[0] as f64;
    let d = tape.sub(predicted, target)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rays))
}

/// Uniform permutation of `0..n` that is not the identity when `n > 1`.
pub fn non_identity_shuffle(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if n < 2 || perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn mean_distance_to_shuffled(tape: &mut Tape, means: Var, perm: &[usize]) -> Result<Var> {
    let shuffled = tape.gather(means, Arc::new(GatherTable::permutation(perm)))?;
    let d = tape.sub(means, shuffled)?;
    let sq = tape.square(d);
    let norms = tape.sum_axis(sq, 1)?;
    let norms = tape.sqrt(norms)?;
    Ok(tape.mean(norms))
}

/// `-(mean_r |m_r - m~_r| + mean_s |m_s - m~_s|)` over the `[R, N, L]` grid
/// `a`, where `m~` are the means reordered by the given permutations.
pub fn diversity_loss(tape: &mut Tape, a: Var, ray_perm: &[usize], sample_perm: &[usize]) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() != 3 || s[0] < 2 || s[1] < 2 || ray_perm.len() != s[0] || sample_perm.len() != s[1] {
        return Err(Error::invalid(format!(
            "diversity loss needs an [R>=2, N>=2, L] grid with matching permutations, got {s:?}"
        )));
    }
    let per_ray = tape.mean_axis(a, 1)?;
    let per_sample = tape.mean_axis(a, 0)?;
    let r = mean_distance_to_shuffled(tape, per_ray, ray_perm)?;
    let n = mean_distance_to_shuffled(tape, per_sample, sample_perm)?;
    let both = tape.add(r, n)?;
    Ok(tape.scale(both, -1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub pho: f64,
    pub appr: f64,
    pub rec: f64,
    pub div: f64,
}

/// `pho + appr + gamma rec + w div`, rejecting non-finite parts.
pub fn total_loss(tape: &mut Tape, pho: Var, appr: Option<Var>, rec: Option<Var>, div: Option<Var>, gamma: f64, div_weight: f64) -> Result<Var> {
    for (name, v) in [("pho", Some(pho)), ("appr", appr), ("rec", rec), ("div", div)] {
        if let Some(v) = v {
            if !tape.scalar_value(v).is_finite() {
                return Err(Error::NonFiniteLoss { iteration: 0, part: name.to_string() });
            }
        }
    }
    let mut total = pho;
    if let Some(a) = appr {
        total = tape.add(total, a)?;
    }
    if let Some(r) = rec {
        let r = tape.scale(r, gamma);
        total = tape.add(total, r)?;
    }
    if let Some(d) = div {
        let d = tape.scale(d, div_weight);
        total = tape.add(total, d)?;
    }
    Ok(total)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    /// `(name, first moment, second moment)` for every parameter seen so far.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.first
            .iter()
            .map(|(k, m)| (k.as_str(), m.as_slice(), self.second[k].as_slice()))
    }

    pub fn set_moments(&mut self, name: &str, first: Vec<f64>, second: Vec<f64>) {
        self.first.insert(name.to_string(), first);
        self.second.insert(name.to_string(), second);
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Ground-truth supervision and support set for one training scene.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub support: SupportSet,
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl TrainData {
    pub fn new(images: Vec<Image>, cameras: Vec<Camera>, near: f64, far: f64, background: [f64; 3], config: &TrainConfig) -> Result<Self> {
        let support = SupportSet::new(&images, &cameras, config.grid(), near, far)?;
        Ok(TrainData {
            support,
            images,
            cameras,
            near,
            far,
            background,
        })
    }

    /// Renders the training views of `rig` from `scene`.
    pub fn from_scene(scene: &Scene, rig: &Rig, config: &TrainConfig) -> Result<Self> {
        let cameras = rig.training_cameras();
        if cameras.len() < 2 {
            return Err(Error::invalid("training needs at least two views"));
        }
        let images = cameras.iter().map(|c| render_gt_view(scene, c)).collect();
        Self::new(images, cameras, rig.near, rig.far, scene.background, config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub pho: f64,
    pub appr: f64,
    pub rec: f64,
    pub div: f64,
    pub total: f64,
}

/// ChaCha position, enough to resume a stream exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

const RAY_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Training state; one call to [`Trainer::step`] is one optimizer step.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub iteration: usize,
    ray_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let c = &model.config;
        Trainer {
            optimizer: Adam::new(c.learning_rate, c.beta1, c.beta2, c.adam_eps),
            iteration: 0,
            ray_rng: stream(c.seed, RAY_STREAM),
            shuffle_rng: stream(c.seed, SHUFFLE_STREAM),
            model,
        }
    }

    /// Continues from saved state; `rngs` are the ray and shuffle streams.
    pub fn resume(model: Model, optimizer: Adam, iteration: usize, rngs: [RngState; 2]) -> Self {
        Trainer {
            model,
            optimizer,
            iteration,
            ray_rng: rngs[0].restore(),
            shuffle_rng: rngs[1].restore(),
        }
    }

    pub fn rng_states(&self) -> Vec<RngState> {
        vec![RngState::of(&self.ray_rng), RngState::of(&self.shuffle_rng)]
    }

    /// One forward/backward/update. Parameters are left untouched when the
    /// loss is not finite.
    pub fn step(&mut self, data: &TrainData) -> Result<LossRecord> {
        let config = self.model.config.clone();
        let (w, h) = (data.images[0].width(), data.images[0].height());
        let pixels = sample_pixels(&mut self.ray_rng, data.cameras.len(), w, h, config.rays);
        let rays: Vec<Ray> = pixels
            .iter()
            .map(|&(view, u, v)| data.cameras[view].ray_for_pixel(u, v, data.near, data.far))
            .collect::<Result<_>>()?;
        let target: Vec<f64> = pixels.iter().flat_map(|&(view, u, v)| data.images[view].pixel(u, v)).collect();
        let batch = RaySamples::new(&rays, config.samples, Some(&mut self.ray_rng))?;
        let ray_perm = non_identity_shuffle(config.rays, &mut self.shuffle_rng);
        let sample_perm = non_identity_shuffle(config.samples, &mut self.shuffle_rng);

        let mut tape = Tape::new();
        let b = self.model.params.bind(&mut tape);
        let ctx = scene_context(&mut tape, &b, &config, &data.support)?;
        let noise = NoiseSource {
            seed: config.seed ^ (self.iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            first_stream: 0,
        };
        let out = forward_rays(&mut tape, &b, &config, &ctx, &data.support, &batch, Some(noise), data.background)?;
        let target = tape.constant_from(vec![config.rays, 3], target)?;
        let pho = photometric_loss(&mut tape, out.rgb, target)?;
        let div = if config.diversity_weight > 0.0 && config.adaptiveness != AdaptMode::Disabled {
            let a = tape.reshape(out.a_x, &[config.rays, config.samples, TARGET_LAYERS])?;
            Some(diversity_loss(&mut tape, a, &ray_perm, &sample_perm)?)
        } else {
            None
        };
        let total = total_loss(&mut tape, pho, out.kl, out.rec, div, config.gamma, config.diversity_weight).map_err(|e| match e {
            Error::NonFiniteLoss { part, .. } => Error::NonFiniteLoss {
                iteration: self.iteration,
                part,
            },
            other => other,
        })?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
        let record = LossRecord {
            iteration: self.iteration,
            pho: tape.scalar_value(pho),
            appr: value(out.kl),
            rec: value(out.rec),
            div: value(div),
            total: tape.scalar_value(total),
        };
        let grads = tape.backward(total)?;
        let grads = b.collect_grads(&tape, &grads);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                part: format!("gradient of {name}"),
            });
        }
        self.optimizer.update(&mut self.model.params, &grads)?;
        self.iteration += 1;
        Ok(record)
    }
}

/// Runs `config.iterations` steps, calling `on_record` for every step.
pub fn train(model: Model, data: &TrainData, mut on_record: impl FnMut(&LossRecord)) -> Result<Trainer> {
    let mut trainer = Trainer::new(model);
    for _ in 0..trainer.model.config.iterations {
        let rec = trainer.step(data)?;
        on_record(&rec);
    }
    Ok(trainer)
}

/// CSV with header `iteration,pho,appr,rec,div,total`.
pub fn write_loss_csv<W: Write>(out: W, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photometric_cases() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![1, 3], vec![0.6, 0.2, 0.3]).unwrap();
        let b = tape.constant_from(vec![1, 3], vec![0.5, 0.2, 0.3]).unwrap();
        let l = photometric_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        let l = photometric_loss(&mut tape, a, b).unwrap();
        assert!((tape.scalar_value(l) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn diversity_cases() {
        let mut tape = Tape::new();
        let same = tape.constant_from(vec![2, 3, 2], vec![0.4; 12]).unwrap();
        let l = diversity_loss(&mut tape, same, &[1, 0], &[2, 0, 1]).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        // 2x2 grid, L = 1: rows (1, 3) and (5, 7).
        let g = tape.constant_from(vec![2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let l = diversity_loss(&mut tape, g, &[1, 0], &[1, 0]).unwrap();
        // Ray means 2 and 6; sample means 3 and 5.
        let want = -((4.0 + 4.0) / 2.0 + (2.0 + 2.0) / 2.0);
        assert!((tape.scalar_value(l) - want).abs() < 1e-15);
        assert!(diversity_loss(&mut tape, g, &[0], &[1, 0]).is_err());
        let thin = tape.constant_from(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        assert!(diversity_loss(&mut tape, thin, &[0], &[1, 0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..6 {
            let p = non_identity_shuffle(n, &mut rng);
            assert!(p.iter().enumerate().any(|(i, &v)| i != v));
        }
        for _ in 0..20 {
            let r = Tensor::uniform(&[4, 3, 2], -1.0, 1.0, &mut rng);
            let rv = tape.constant(&r);
            let l = diversity_loss(&mut tape, rv, &non_identity_shuffle(4, &mut rng), &non_identity_shuffle(3, &mut rng)).unwrap();
            assert!(tape.scalar_value(l) <= 0.0);
        }
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let mut tape = Tape::new();
        let parts: Vec<Var> = [1.0, 2.0, 3.0, -4.0].iter().map(|&v| tape.constant_from(vec![], vec![v]).unwrap()).collect();
        let t = total_loss(&mut tape, parts[0], Some(parts[1]), Some(parts[2]), Some(parts[3]), 1.0, 1e-5).unwrap();
        assert!((tape.scalar_value(t) - 5.99996).abs() < 1e-12);
        let t = total_loss(&mut tape, parts[0], Some(parts[1]), Some(parts[2]), Some(parts[3]), 0.0, 1e-5).unwrap();
        assert!((tape.scalar_value(t) - (3.0 - 4e-5)).abs() < 1e-12);
        let zero = tape.constant_from(vec![], vec![0.0]).unwrap();
        let t = total_loss(&mut tape, zero, Some(zero), Some(zero), Some(zero), 1.0, 1e-5).unwrap();
        assert_eq!(tape.scalar_value(t), 0.0);
        let nan = tape.constant_from(vec![], vec![f64::NAN]).unwrap();
        assert!(matches!(
            total_loss(&mut tape, zero, Some(nan), None, None, 1.0, 1e-5),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn adam_first_step_and_zero_grads() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let before = params.clone();
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![0.0; 3]));
        opt.update(&mut params, &grads).unwrap();
        assert_eq!(params, before);
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        grads.insert("w".to_string(), Tensor::vector(vec![3.0, -0.01, 0.0]));
        opt.update(&mut params, &grads).unwrap();
        let d: Vec<f64> = params.get("w").unwrap().data().iter().zip(before.get("w").unwrap().data()).map(|(a, b)| a - b).collect();
        assert!((d[0] + 1e-3).abs() < 1e-9);
        assert!((d[1] - 1e-3).abs() < 1e-6);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut r = stream(5, 2);
        let _: u64 = rand::Rng::gen(&mut r);
        let s = RngState::of(&r);
        let mut back = s.restore();
        assert_eq!(rand::Rng::gen::<u64>(&mut back), rand::Rng::gen::<u64>(&mut r));
    }

    fn small_run(iterations: usize) -> (Model, Trainer, Vec<LossRecord>) {
        let config = TrainConfig {
            iterations,
            rays: 64,
            samples: 8,
            grid_x: 12,
            grid_y: 12,
            depth_planes: 4,
            channels: 8,
            ..TrainConfig::default()
        };
        let rig = crate::rig::ArcRig {
            width: 24,
            height: 24,
            ..Default::default()
        }
        .build()
        .unwrap();
        let scene = crate::scene::generate_scene(3, 2).unwrap();
        let data = TrainData::from_scene(&scene, &rig, &config).unwrap();
        let init = Model::init(&config).unwrap();
        let mut records = Vec::new();
        let trainer = train(init.clone(), &data, |r| records.push(*r)).unwrap();
        (init, trainer, records)
    }

    #[test]
    fn zero_iterations_leave_the_model_at_init() {
        let (init, trainer, records) = small_run(0);
        assert!(records.is_empty());
        assert_eq!(trainer.iteration, 0);
        assert_eq!(trainer.model.params, init.params);
    }

    #[test]
    fn photometric_loss_drops_over_training() {
        let (_, trainer, records) = small_run(201);
        assert_eq!(trainer.iteration, 201);
        let mean = |r: &[LossRecord]| r.iter().map(|x| x.pho).sum::<f64>() / r.len() as f64;
        let (first, last) = (mean(&records[..10]), mean(&records[191..]));
        assert!(last < 0.5 * first, "pho {first} -> {last}");
        assert!(records[200].pho < records[0].pho);
        let mut csv = Vec::new();
        write_loss_csv(&mut csv, &records).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,pho,appr,rec,div,total\n"));
        assert_eq!(text.lines().count(), 202);
    }
}
