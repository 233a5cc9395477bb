//! Procedural scenes of lit spheres and boxes, an analytic ray tracer that
//! serves as ground truth, and the scripted test-time perturbations.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::raster::Image;

pub const SCENE_FORMAT_VERSION: u32 = 1;
const PLACEMENT_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Box,
}

/// `size` is the radius of a sphere or the half extent of an axis-aligned
/// cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub center: [f64; 3],
    pub size: f64,
    pub albedo: [f64; 3],
}

impl SceneObject {
    fn bounding_radius(&self) -> f64 {
        match self.shape {
            ShapeKind::Sphere => self.size,
            ShapeKind::Box => self.size * 3f64.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: [f64; 3],
    pub intensity: f64,
    pub ambient: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| p[i].clamp(self.min[i], self.max[i]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub version: u32,
    pub seed: u64,
    pub background: [f64; 3],
    pub bounds: Bounds,
    pub light: Light,
    #[serde(rename = "object")]
    pub objects: Vec<SceneObject>,
}

/// Ranges used by [`generate_scene_with`].
#[derive(Clone, Debug)]
pub struct SceneOptions {
    pub bounds: Bounds,
    pub size_range: (f64, f64),
    pub albedo_range: (f64, f64),
    pub background: [f64; 3],
    pub light: Light,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            bounds: Bounds {
                min: [-0.8; 3],
                max: [0.8; 3],
            },
            size_range: (0.18, 0.34),
            albedo_range: (0.15, 0.95),
            background: [0.85, 0.85, 0.85],
            light: Light {
                position: [2.5, -4.0, -3.0],
                intensity: 28.0,
                ambient: 0.25,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    MoveObject,
    ScaleLight,
    AddObject,
    RemoveObject,
    ImageNoise,
    FeatureNoise,
}

/// One scripted change between training and test time. Noise kinds leave
/// the scene untouched; they are applied to images or feature volumes
/// downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    MoveObject { index: usize, translation: [f64; 3] },
    ScaleLight { factor: f64 },
    AddObject { seed: u64 },
    RemoveObject { index: usize },
    ImageNoise { sigma: f64, seed: u64 },
    FeatureNoise { sigma: f64, seed: u64 },
}

impl Perturbation {
    pub fn kind(&self) -> PerturbationKind {
        match self {
            Perturbation::MoveObject { .. } => PerturbationKind::MoveObject,
            Perturbation::ScaleLight { .. } => PerturbationKind::ScaleLight,
            Perturbation::AddObject { .. } => PerturbationKind::AddObject,
            Perturbation::RemoveObject { .. } => PerturbationKind::RemoveObject,
            Perturbation::ImageNoise { .. } => PerturbationKind::ImageNoise,
            Perturbation::FeatureNoise { .. } => PerturbationKind::FeatureNoise,
        }
    }
}

fn random_object<R: Rng>(rng: &mut R, opts: &SceneOptions) -> SceneObject {
    let shape = if rng.gen_bool(0.5) {
        ShapeKind::Sphere
    } else {
        ShapeKind::Box
    };
    let size = rng.gen_range(opts.size_range.0..opts.size_range.1);
    let b = &opts.bounds;
    let center = std::array::from_fn(|i| rng.gen_range(b.min[i] + size..b.max[i] - size));
    let albedo = std::array::from_fn(|_| rng.gen_range(opts.albedo_range.0..opts.albedo_range.1));
    SceneObject {
        shape,
        center,
        size,
        albedo,
    }
}

fn overlaps(a: &SceneObject, b: &SceneObject) -> bool {
    let d: f64 = (0..3).map(|i| (a.center[i] - b.center[i]).powi(2)).sum::<f64>().sqrt();
    d < a.bounding_radius() + b.bounding_radius()
}

fn place_object<R: Rng>(rng: &mut R, opts: &SceneOptions, existing: &[SceneObject]) -> Option<SceneObject> {
    (0..PLACEMENT_TRIES)
        .map(|_| random_object(rng, opts))
        .find(|cand| existing.iter().all(|o| !overlaps(o, cand)))
}

pub fn generate_scene(count: usize, seed: u64) -> Result<Scene> {
    generate_scene_with(count, seed, &SceneOptions::default())
}

/// Rejection-samples `count` non-overlapping objects inside the bounds.
pub fn generate_scene_with(count: usize, seed: u64, opts: &SceneOptions) -> Result<Scene> {
    if !(1..=16).contains(&count) {
        return Err(Error::invalid(format!("object count must be in 1..=16, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let obj = place_object(&mut rng, opts, &objects).ok_or(Error::Placement {
            count,
            tries: PLACEMENT_TRIES,
        })?;
        objects.push(obj);
    }
    Ok(Scene {
        version: SCENE_FORMAT_VERSION,
        seed,
        background: opts.background,
        bounds: opts.bounds,
        light: opts.light.clone(),
        objects,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub object: usize,
}

fn intersect(obj: &SceneObject, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let c = Vector3::from(obj.center);
    match obj.shape {
        ShapeKind::Sphere => {
            let oc = origin - c;
            let b = oc.dot(dir);
            let cc = oc.dot(&oc) - obj.size * obj.size;
            let disc = b * b - cc;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [-b - sq, -b + sq].into_iter().find(|&t| t > 1e-9)?;
            Some((t, (origin + dir * t - c) / obj.size))
        }
        ShapeKind::Box => {
            let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut enter_axis, mut exit_axis) = (0, 0);
            for i in 0..3 {
                let lo = c[i] - obj.size;
                let hi = c[i] + obj.size;
                if dir[i].abs() < 1e-15 {
                    if origin[i] < lo || origin[i] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((lo - origin[i]) / dir[i], (hi - origin[i]) / dir[i]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > tmin {
                    tmin = t0;
                    enter_axis = i;
                }
                if t1 < tmax {
                    tmax = t1;
                    exit_axis = i;
                }
            }
            if tmin > tmax {
                return None;
            }
            let (t, axis) = if tmin > 1e-9 {
                (tmin, enter_axis)
            } else if tmax > 1e-9 {
                (tmax, exit_axis)
            } else {
                return None;
            };
            let p = origin + dir * t;
            let mut n = Vector3::zeros();
            n[axis] = (p[axis] - c[axis]).signum();
            Some((t, n))
        }
    }
}

/// Nearest intersection along a unit-direction ray.
pub fn trace_hit(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    scene
        .objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| intersect(o, origin, dir).map(|(t, n)| Hit { t, normal: n, object: i }))
        .min_by(|a, b| a.t.total_cmp(&b.t))
}

/// Shaded colour before clamping: `albedo * (ambient + I max(0, n.l) / (1 + d^2))`.
pub fn trace_ray_unclamped(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
    let Some(hit) = trace_hit(scene, origin, dir) else {
        return scene.background;
    };
    let obj = &scene.objects[hit.object];
    let p = origin + dir * hit.t;
    let to_light = Vector3::from(scene.light.position) - p;
    let d2 = to_light.norm_squared();
    let lambert = hit.normal.dot(&to_light.normalize()).max(0.0);
    let shade = scene.light.ambient + scene.light.intensity * lambert / (1.0 + d2);
    obj.albedo.map(|a| a * shade)
}

pub fn trace_ray_gt(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
    trace_ray_unclamped(scene, origin, dir).map(|c| c.clamp(0.0, 1.0))
}

fn render_with(scene: &Scene, camera: &Camera, shade: fn(&Scene, &Vector3<f64>, &Vector3<f64>) -> [f64; 3]) -> Image {
    let (w, h) = (camera.width(), camera.height());
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ray = camera
                .ray_for_pixel(i % w, i / w, 1.0, 2.0)
                .expect("pixel inside image");
            shade(scene, &ray.origin, &ray.direction)
        })
        .collect();
    Image::new(w, h, data).expect("one rgb triple per pixel")
}

/// Ground-truth view through the centre of every pixel.
pub fn render_gt_view(scene: &Scene, camera: &Camera) -> Image {
    render_with(scene, camera, trace_ray_gt)
}

pub fn render_gt_view_unclamped(scene: &Scene, camera: &Camera) -> Image {
    render_with(scene, camera, trace_ray_unclamped)
}

/// Returns a perturbed copy; the input scene is never modified.
pub fn perturb(scene: &Scene, p: &Perturbation) -> Result<Scene> {
    let mut out = scene.clone();
    let check_index = |index: usize| {
        if index >= scene.objects.len() {
            Err(Error::IndexOutOfRange {
                what: "object",
                index,
                len: scene.objects.len(),
            })
        } else {
            Ok(())
        }
    };
    match *p {
        Perturbation::MoveObject { index, translation } => {
            check_index(index)?;
            let c = &mut out.objects[index].center;
            let moved = std::array::from_fn(|i| c[i] + translation[i]);
            *c = scene.bounds.clamp(moved);
        }
        Perturbation::ScaleLight { factor } => {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::invalid(format!("light factor must be > 0, got {factor}")));
            }
            out.light.intensity *= factor;
        }
        Perturbation::AddObject { seed } => {
            if out.objects.len() >= 16 {
                return Err(Error::invalid("scene already holds 16 objects"));
            }
            let opts = SceneOptions {
                bounds: scene.bounds,
                ..SceneOptions::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj = place_object(&mut rng, &opts, &scene.objects).ok_or(Error::Placement {
                count: scene.objects.len() + 1,
                tries: PLACEMENT_TRIES,
            })?;
            out.objects.push(obj);
        }
        Perturbation::RemoveObject { index } => {
            check_index(index)?;
            out.objects.remove(index);
        }
        Perturbation::ImageNoise { sigma, .. } | Perturbation::FeatureNoise { sigma, .. } => {
            if !(sigma >= 0.0) {
                return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
            }
        }
    }
    Ok(out)
}

impl Scene {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let scene: Scene = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if scene.version != SCENE_FORMAT_VERSION {
            return Err(Error::Parse {
                path: origin.to_string(),
                message: format!("unsupported scene version {}", scene.version),
            });
        }
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}
