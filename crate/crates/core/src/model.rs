//! The full model: parameter initialization, the per-step scene context,
//! the per-ray forward pass and frozen-scene inference rendering.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{sample_depths, Camera, Ray};
use crate::config::{AdaptMode, TrainConfig, TARGET_LAYERS};
use crate::encoder::{encode_scene, init_encoder, interpolate, SupportSet};
use crate::error::Result;
use crate::nn::{Bound, ParamSet};
use crate::pcd::{decode_layers, init_pcd, LayerCandidates};
use crate::prob::{adaptiveness, adaptiveness_direct, fuse_point, init_prob, invariant_head, kl_loss, posterior, ray_noise, rec_loss, sample_variance};
use crate::raster::{add_noise, Image};
use crate::renderer::{embed_width, init_renderer, COLOR_TAPS, positional_encoding, ray_transformer_forward, volume_render, LayerWeights, DIR_OCTAVES, POS_OCTAVES};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh weights drawn from a stream derived from `config.seed`.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let grid = config.grid();
        init_encoder(&mut params, &grid, &mut rng);
        init_pcd(&mut params, &config.pcd(), grid.channels, &mut rng);
        init_prob(&mut params, grid.channels, TARGET_LAYERS, &mut rng);
        init_renderer(&mut params, config.width, grid.channels, config.source_views, &mut rng);
        Ok(Model {
            config: config.clone(),
            params,
        })
    }
}

/// Per-scene quantities shared by every ray of a step.
#[derive(Clone, Debug)]
pub struct SceneContext {
    pub f: Var,
    pub a: Var,
    pub layers: LayerCandidates,
}

pub fn scene_context(tape: &mut Tape, b: &Bound, config: &TrainConfig, support: &SupportSet) -> Result<SceneContext> {
    let vol = encode_scene(tape, b, support)?;
    let layers = decode_layers(tape, b, &config.pcd(), vol.f, config.mask)?;
    Ok(SceneContext {
        f: vol.f,
        a: vol.a,
        layers,
    })
}

/// Sample positions along a batch of rays.
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub rays: usize,
    pub samples: usize,
    pub points: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
    /// Segment lengths, `rays * samples`.
    pub delta: Vec<f64>,
}

impl RaySamples {
    /// Stratified when `rng` is given, bin midpoints otherwise.
    pub fn new(rays: &[Ray], samples: usize, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        let mut points = Vec::with_capacity(rays.len() * samples);
        let mut delta = Vec::with_capacity(rays.len() * samples);
        for ray in rays {
            let t = match rng.as_deref_mut() {
                Some(r) => sample_depths(ray.near, ray.far, samples, true, r)?,
                None => sample_depths(ray.near, ray.far, samples, false, &mut ChaCha8Rng::seed_from_u64(0))?,
            };
            for i in 0..samples {
                points.push(ray.at(t[i]));
                let next = if i + 1 < samples { t[i + 1] } else { ray.far };
                delta.push(next - t[i]);
            }
        }
        Ok(RaySamples {
            rays: rays.len(),
            samples,
            points,
            directions: rays.iter().map(|r| r.direction).collect(),
            delta,
        })
    }

    fn encoded_geometry(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * (embed_width(0)));
        for (i, p) in self.points.iter().enumerate() {
            let d = self.directions[i / self.samples];
            positional_encoding([p.x, p.y, p.z], POS_OCTAVES, &mut out);
            positional_encoding([d.x, d.y, d.z], DIR_OCTAVES, &mut out);
        }
        out
    }
}

/// Reparameterization noise for a batch: ray `r` of the batch reads stream
/// `first_stream + r` of `seed`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSource {
    pub seed: u64,
    pub first_stream: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub rgb: Var,
    /// Interpolated adaptiveness code `[R * N, L]`.
    pub a_x: Var,
    pub kl: Option<Var>,
    pub rec: Option<Var>,
}

pub fn forward_rays(
    tape: &mut Tape,
    b: &Bound,
    config: &TrainConfig,
    ctx: &SceneContext,
    support: &SupportSet,
    batch: &RaySamples,
    noise: Option<NoiseSource>,
    background: [f64; 3],
) -> Result<ForwardOut> {
    let c = config.channels;
    let (f_x, _) = interpolate(tape, ctx.f, &support.grid, &batch.points)?;
    let (a_x, _) = interpolate(tape, ctx.a, &support.grid, &batch.points)?;
    let (fused, kl, rec) = if config.probabilistic {
        let (mu, log_sigma) = posterior(tape, b, f_x)?;
        let sigma = tape.exp(log_sigma);
        let eps = noise.map(|n| {
            let data = (0..batch.rays)
                .flat_map(|r| ray_noise(n.seed, n.first_stream + r as u64, batch.samples, c))
                .collect();
            Tensor::new(vec![batch.rays * batch.samples, c], data).expect("noise shape")
        });
        let f_v = sample_variance(tape, mu, sigma, eps.as_ref())?;
        let mut extras = Vec::with_capacity(2);
        if config.invariance {
            extras.push(invariant_head(tape, b, f_x)?);
        }
        extras.push(f_v);
        let base = config.residual.then_some(f_x);
        let fused = fuse_point(tape, base, &extras, config.alpha)?;
        let kl = kl_loss(tape, mu, log_sigma)?;
        let rec = rec_loss(tape, b, f_x, fused)?;
        (fused, Some(kl), Some(rec))
    } else {
        (f_x, None, None)
    };
    let weights = match config.adaptiveness {
        AdaptMode::Disabled => LayerWeights::Shared(ctx.layers.candidates.clone()),
        AdaptMode::AllOnes => LayerWeights::Shared(ctx.layers.personal.clone()),
        AdaptMode::Fused => LayerWeights::PerPoint {
            candidates: ctx.layers.candidates.clone(),
            personal: ctx.layers.personal.clone(),
            adapt: adaptiveness(tape, b, a_x, fused)?,
        },
        AdaptMode::Direct => LayerWeights::PerPoint {
            candidates: ctx.layers.candidates.clone(),
            personal: ctx.layers.personal.clone(),
            adapt: adaptiveness_direct(tape, b, fused)?,
        },
    };
    let geo = tape.constant_from(vec![batch.points.len(), embed_width(0)], batch.encoded_geometry())?;
    let mut parts = vec![geo, fused];
    if config.source_views > 0 {
        let colors = support.sample_colors(&batch.points, config.source_views)?;
        parts.push(tape.constant_from(vec![batch.points.len(), COLOR_TAPS * config.source_views], colors)?);
    }
    let input = tape.concat(&parts, 1)?;
    let (color, sigma) = ray_transformer_forward(tape, b, input, &weights, batch.rays, batch.samples)?;
    let delta = tape.constant_from(vec![batch.rays, batch.samples], batch.delta.clone())?;
    let rgb = volume_render(tape, color, sigma, delta, background)?;
    Ok(ForwardOut { rgb, a_x, kl, rec })
}

/// Scene context evaluated once and stored as plain tensors.
#[derive(Clone, Debug)]
pub struct FrozenScene {
    pub f: Tensor,
    pub a: Tensor,
    pub candidates: Vec<Tensor>,
    pub personal: Vec<Tensor>,
}

impl FrozenScene {
    pub fn new(model: &Model, support: &SupportSet) -> Result<Self> {
        let mut tape = Tape::new();
        let b = model.params.bind_frozen(&mut tape);
        let ctx = scene_context(&mut tape, &b, &model.config, support)?;
        Ok(FrozenScene {
            f: tape.tensor(ctx.f),
            a: tape.tensor(ctx.a),
            candidates: ctx.layers.candidates.iter().map(|&v| tape.tensor(v)).collect(),
            personal: ctx.layers.personal.iter().map(|&v| tape.tensor(v)).collect(),
        })
    }

    /// Same as [`FrozenScene::new`] with Gaussian noise of `sigma` added to
    /// the feature volume before the candidate decoders see it.
    pub fn with_feature_noise(model: &Model, support: &SupportSet, sigma: f64, seed: u64) -> Result<Self> {
        let mut tape = Tape::new();
        let b = model.params.bind_frozen(&mut tape);
        let vol = encode_scene(&mut tape, &b, support)?;
        let noisy = Tensor::new(tape.shape(vol.f).to_vec(), add_noise(tape.value(vol.f), sigma, seed)?)?;
        let f = tape.constant(&noisy);
        let layers = decode_layers(&mut tape, &b, &model.config.pcd(), f, model.config.mask)?;
        Ok(FrozenScene {
            f: noisy,
            a: tape.tensor(vol.a),
            candidates: layers.candidates.iter().map(|&v| tape.tensor(v)).collect(),
            personal: layers.personal.iter().map(|&v| tape.tensor(v)).collect(),
        })
    }

    fn bind(&self, tape: &mut Tape) -> SceneContext {
        SceneContext {
            f: tape.constant(&self.f),
            a: tape.constant(&self.a),
            layers: LayerCandidates {
                candidates: self.candidates.iter().map(|t| tape.constant(t)).collect(),
                personal: self.personal.iter().map(|t| tape.constant(t)).collect(),
            },
        }
    }
}

/// Colours of the given rays using posterior means, evaluated in
/// independent chunks.
pub fn render_rays(model: &Model, scene: &FrozenScene, support: &SupportSet, rays: &[Ray], background: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let chunks: Vec<Result<Vec<[f64; 3]>>> = rays
        .par_chunks(model.config.chunk)
        .map(|chunk| {
            let mut tape = Tape::new();
            let b = model.params.bind_frozen(&mut tape);
            let ctx = scene.bind(&mut tape);
            let batch = RaySamples::new(chunk, model.config.samples, None)?;
            let out = forward_rays(&mut tape, &b, &model.config, &ctx, support, &batch, None, background)?;
            Ok(tape.value(out.rgb).chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn camera_rays(camera: &Camera, near: f64, far: f64) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(camera.width() * camera.height());
    for v in 0..camera.height() {
        for u in 0..camera.width() {
            rays.push(camera.ray_for_pixel(u, v, near, far)?);
        }
    }
    Ok(rays)
}

pub fn render_view(
    model: &Model,
    scene: &FrozenScene,
    support: &SupportSet,
    camera: &Camera,
    near: f64,
    far: f64,
    background: [f64; 3],
) -> Result<Image> {
    let rays = camera_rays(camera, near, far)?;
    let px = render_rays(model, scene, support, &rays, background)?;
    Image::new(camera.width(), camera.height(), px.into_iter().flatten().collect())
}

/// Uniformly drawn `(view, u, v)` triples.
pub fn sample_pixels<R: Rng>(rng: &mut R, views: usize, width: usize, height: usize, count: usize) -> Vec<(usize, usize, usize)> {
    (0..count)
        .map(|_| (rng.gen_range(0..views), rng.gen_range(0..width), rng.gen_range(0..height)))
        .collect()
}
