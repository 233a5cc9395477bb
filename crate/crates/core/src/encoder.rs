//! Scene encoder: per-view patch features, plane-sweep warping into the
//! reference frustum, cross-view variance, and the per-voxel network that
//! emits the paired feature / adaptiveness volumes.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{homography, Camera};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp2, ParamSet};
use crate::raster::Image;
use crate::tensor::{GatherTable, Tape, Tensor, Var};

pub const PATCH_WIDTH: usize = 27;
pub const HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: usize,
    pub y: usize,
    pub depth_planes: usize,
    pub channels: usize,
    pub layers: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x: 32,
            y: 32,
            depth_planes: 8,
            channels: 16,
            layers: 4,
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.x * self.y * self.depth_planes
    }

    pub fn validate(&self) -> Result<()> {
        if self.x < 2 || self.y < 2 || self.depth_planes < 2 || self.channels == 0 || self.layers == 0 {
            return Err(Error::invalid(format!("grid needs >= 2 nodes per axis and non-empty channels: {self:?}")));
        }
        Ok(())
    }
}

/// Adds the T-net and B-net weights to `params`.
pub fn init_encoder<R: Rng>(params: &mut ParamSet, spec: &GridSpec, rng: &mut R) {
    Mlp2::init(params, "enc.t", [PATCH_WIDTH, HIDDEN, spec.channels], rng);
    Mlp2::init(params, "enc.b", [spec.channels, HIDDEN, spec.channels + spec.layers], rng);
}

/// Nodes of the reference-camera frustum. Node `(i, j, k)` sits on the ray
/// through reference pixel `((i + 0.5) W / X, (j + 0.5) H / Y)` at camera
/// depth `depths[k]`; its row in a volume is `(i * Y + j) * Z + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub spec: GridSpec,
    pub reference: Camera,
    pub depths: Vec<f64>,
}

impl VolumeGrid {
    /// Depth planes span `[near * cos(half diagonal fov), far]` so that ray
    /// samples at distance `near` near the image corners stay inside.
    pub fn new(reference: &Camera, spec: GridSpec, near: f64, far: f64) -> Result<Self> {
        spec.validate()?;
        if !(near > 0.0 && far > near) {
            return Err(Error::invalid(format!("bad depth range {near}..{far}")));
        }
        let intr = reference.intrinsics();
        let hx = reference.width() as f64 / 2.0 / intr.fx;
        let hy = reference.height() as f64 / 2.0 / intr.fy;
        let z0 = near / (1.0 + hx * hx + hy * hy).sqrt();
        let n = spec.depth_planes;
        let depths = (0..n).map(|k| z0 + (far - z0) * k as f64 / (n - 1) as f64).collect();
        Ok(VolumeGrid {
            spec,
            reference: reference.clone(),
            depths,
        })
    }

    pub fn cells(&self) -> usize {
        self.spec.cells()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.spec.y + j) * self.spec.depth_planes + k
    }

    /// Scale from grid pixel coordinates to reference pixel coordinates.
    fn grid_to_ref(&self) -> Matrix3<f64> {
        let sx = self.reference.width() as f64 / self.spec.x as f64;
        let sy = self.reference.height() as f64 / self.spec.y as f64;
        Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0)
    }

    /// Continuous node coordinates of a world point, if it lies inside.
    pub fn locate(&self, p: &Vector3<f64>) -> Option<[f64; 3]> {
        let (u, v, z) = self.reference.project(p)?;
        let s = &self.spec;
        let gi = u * s.x as f64 / self.reference.width() as f64 - 0.5;
        let gj = v * s.y as f64 / self.reference.height() as f64 - 0.5;
        let (z0, z1) = (self.depths[0], self.depths[s.depth_planes - 1]);
        let gk = (z - z0) / (z1 - z0) * (s.depth_planes - 1) as f64;
        let inside = |g: f64, n: usize| (-1e-9..=(n - 1) as f64 + 1e-9).contains(&g);
        if inside(gi, s.x) && inside(gj, s.y) && inside(gk, s.depth_planes) {
            Some([gi, gj, gk])
        } else {
            None
        }
    }

    /// World position of node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let g = self.grid_to_ref() * Vector3::new(i as f64 + 0.5, j as f64 + 0.5, 1.0);
        let intr = self.reference.intrinsics();
        let z = self.depths[k];
        let xc = Vector3::new((g.x - intr.cx) / intr.fx * z, (g.y - intr.cy) / intr.fy * z, z);
        self.reference.rotation().transpose() * (xc - self.reference.translation())
    }

    /// Trilinear taps for each point plus an in-bounds flag per point.
    pub fn trilinear_table(&self, points: &[Vector3<f64>]) -> (GatherTable, Vec<bool>) {
        let s = self.spec;
        let mut table = GatherTable::new(self.cells());
        let mut inside = Vec::with_capacity(points.len());
        for p in points {
            let Some(g) = self.locate(p) else {
                table.push_empty();
                inside.push(false);
                continue;
            };
            let split = |g: f64, n: usize| {
                let g = g.clamp(0.0, (n - 1) as f64);
                let i0 = (g.floor() as usize).min(n - 2);
                (i0, g - i0 as f64)
            };
            let (i0, fi) = split(g[0], s.x);
            let (j0, fj) = split(g[1], s.y);
            let (k0, fk) = split(g[2], s.depth_planes);
            let mut taps = Vec::with_capacity(8);
            for (di, wi) in [(0, 1.0 - fi), (1, fi)] {
                for (dj, wj) in [(0, 1.0 - fj), (1, fj)] {
                    for (dk, wk) in [(0, 1.0 - fk), (1, fk)] {
                        let w = wi * wj * wk;
                        if w != 0.0 {
                            taps.push((self.index(i0 + di, j0 + dj, k0 + dk), w));
                        }
                    }
                }
            }
            table.push_row(&taps);
            inside.push(true);
        }
        (table, inside)
    }

    /// Each node averaged with its in-bounds face neighbours.
    pub fn smoothing_table(&self) -> GatherTable {
        let s = self.spec;
        let mut table = GatherTable::new(self.cells());
        for i in 0..s.x {
            for j in 0..s.y {
                for k in 0..s.depth_planes {
                    let mut idx = vec![self.index(i, j, k)];
                    let mut near = |ok: bool, i: usize, j: usize, k: usize| {
                        if ok {
                            idx.push(self.index(i, j, k));
                        }
                    };
                    near(i > 0, i.wrapping_sub(1), j, k);
                    near(i + 1 < s.x, i + 1, j, k);
                    near(j > 0, i, j.wrapping_sub(1), k);
                    near(j + 1 < s.y, i, j + 1, k);
                    near(k > 0, i, j, k.wrapping_sub(1));
                    near(k + 1 < s.depth_planes, i, j, k + 1);
                    let w = 1.0 / idx.len() as f64;
                    let taps: Vec<_> = idx.into_iter().map(|r| (r, w)).collect();
                    table.push_row(&taps);
                }
            }
        }
        table
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Reflect-padded 3x3 RGB neighbourhoods, one row of 27 per pixel, ordered
/// `(dy, dx, channel)`.
pub fn image_patches(image: &Image) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    if w < 3 || h < 3 {
        return Err(Error::invalid(format!("image must be at least 3x3, got {w}x{h}")));
    }
    let mut data = Vec::with_capacity(w * h * PATCH_WIDTH);
    for v in 0..h {
        for u in 0..w {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let px = image.pixel(reflect(u as isize + dx, w), reflect(v as isize + dy, h));
                    data.extend_from_slice(&px);
                }
            }
        }
    }
    Tensor::new(vec![w * h, PATCH_WIDTH], data)
}

/// Per-pixel features `[H * W, C]` from precomputed patches.
pub fn extract_2d_features(tape: &mut Tape, params: &Bound, patches: Var) -> Result<Var> {
    Mlp2::bind(params, "enc.t")?.forward(tape, patches)
}

/// Bilinear sampling table. Output pixel `(u, v)` of an `out_w x out_h`
/// map reads the source at `h * (u + 0.5, v + 0.5, 1)`, in continuous
/// pixel coordinates where pixel centres sit at half-integers.
pub fn warp_table(h: &Matrix3<f64>, src_w: usize, src_h: usize, out_w: usize, out_h: usize) -> (GatherTable, Vec<bool>) {
    let mut table = GatherTable::new(src_w * src_h);
    let mut valid = Vec::with_capacity(out_w * out_h);
    for v in 0..out_h {
        for u in 0..out_w {
            let p = h * Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0);
            let (x, y) = (p.x / p.z - 0.5, p.y / p.z - 0.5);
            let ok = p.z > 0.0
                && x >= -1e-9
                && y >= -1e-9
                && x <= (src_w - 1) as f64 + 1e-9
                && y <= (src_h - 1) as f64 + 1e-9;
            if !ok {
                table.push_empty();
                valid.push(false);
                continue;
            }
            let (x, y) = (x.clamp(0.0, (src_w - 1) as f64), y.clamp(0.0, (src_h - 1) as f64));
            let x0 = (x.floor() as usize).min(src_w.saturating_sub(2));
            let y0 = (y.floor() as usize).min(src_h.saturating_sub(2));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let mut taps = Vec::with_capacity(4);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let w = wx * wy;
                    if w != 0.0 {
                        taps.push(((y0 + dy) * src_w + x0 + dx, w));
                    }
                }
            }
            table.push_row(&taps);
            valid.push(true);
        }
    }
    (table, valid)
}

/// Warps a `[src_h * src_w, C]` feature map through `h`; invalid samples are
/// zero rows.
pub fn warp_features(
    tape: &mut Tape,
    features: Var,
    h: &Matrix3<f64>,
    src: (usize, usize),
    out: (usize, usize),
) -> Result<(Var, Vec<bool>)> {
    let (table, valid) = warp_table(h, src.0, src.1, out.0, out.1);
    Ok((tape.gather(features, Arc::new(table))?, valid))
}

/// Population variance across views of `K` warped `[M, C]` maps.
pub fn cost_volume(tape: &mut Tape, warped: &[Var], valid: &[Vec<bool>]) -> Result<Var> {
    if warped.len() < 2 || warped.len() != valid.len() {
        return Err(Error::invalid(format!(
            "cost volume needs >= 2 views with masks, got {} maps and {} masks",
            warped.len(),
            valid.len()
        )));
    }
    let s = tape.shape(warped[0]).to_vec();
    let stacked = tape.concat(warped, 0)?;
    let stacked = tape.reshape(stacked, &[warped.len(), s[0], s[1]])?;
    let mask: Vec<bool> = valid.iter().flatten().copied().collect();
    tape.masked_variance(stacked, Arc::new(mask))
}

/// Everything about the support views that does not depend on weights:
/// patches, warp tables, validity masks and the smoothing stencil.
#[derive(Clone, Debug)]
pub struct SupportSet {
    pub grid: VolumeGrid,
    patches: Vec<Tensor>,
    warps: Vec<Arc<GatherTable>>,
    valid: Vec<Vec<bool>>,
    smoothing: Arc<GatherTable>,
    images: Vec<Image>,
    cameras: Vec<Camera>,
}

impl SupportSet {
    /// `cameras[0]` is the reference view.
    pub fn new(images: &[Image], cameras: &[Camera], spec: GridSpec, near: f64, far: f64) -> Result<Self> {
        if images.len() != cameras.len() || images.len() < 2 {
            return Err(Error::invalid(format!(
                "need >= 2 support views with one camera each, got {} images and {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        let (w, h) = (images[0].width(), images[0].height());
        for (img, cam) in images.iter().zip(cameras) {
            if img.width() != w || img.height() != h || cam.width() != w || cam.height() != h {
                return Err(Error::ShapeMismatch {
                    op: "encode_scene",
                    lhs: vec![h, w],
                    rhs: vec![img.height(), img.width()],
                });
            }
        }
        let grid = VolumeGrid::new(&cameras[0], spec, near, far)?;
        let patches = images.iter().map(image_patches).collect::<Result<Vec<_>>>()?;
        let per_plane = spec.x * spec.y;
        let mut warps = Vec::with_capacity(cameras.len());
        let mut valid = Vec::with_capacity(cameras.len());
        for cam in cameras {
            // One table per depth plane, then interleave into voxel order.
            let planes = grid
                .depths
                .iter()
                .map(|&z| {
                    let hm = homography(cam, &cameras[0], z)? * grid.grid_to_ref();
                    Ok(warp_table(&hm, w, h, spec.x, spec.y))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut table = GatherTable::new(w * h);
            let mut mask = Vec::with_capacity(grid.cells());
            for i in 0..spec.x {
                for j in 0..spec.y {
                    for (t, m) in &planes {
                        let r = j * spec.x + i;
                        debug_assert!(r < per_plane);
                        let taps: Vec<_> = t.row(r).collect();
                        table.push_row(&taps);
                        mask.push(m[r]);
                    }
                }
            }
            warps.push(Arc::new(table));
            valid.push(mask);
        }
        let smoothing = Arc::new(grid.smoothing_table());
        Ok(SupportSet {
            grid,
            patches,
            warps,
            valid,
            smoothing,
            images: images.to_vec(),
            cameras: cameras.to_vec(),
        })
    }

    /// For each point and each of the first `views` support views: the
    /// bilinear colour at its projection (edge-clamped) and a flag that is 1
    /// when the projection lands inside the frame. Row width `4 * views`.
    pub fn sample_colors(&self, points: &[Vector3<f64>], views: usize) -> Result<Vec<f64>> {
        if views > self.views() {
            return Err(Error::invalid(format!("asked for {views} colour views, support has {}", self.views())));
        }
        let mut out = Vec::with_capacity(points.len() * views * 4);
        for p in points {
            for (img, cam) in self.images.iter().zip(&self.cameras).take(views) {
                let (w, h) = (img.width() as f64, img.height() as f64);
                match cam.project(p) {
                    Some((x, y, _)) if x.is_finite() && y.is_finite() => {
                        let rgb = bilinear_clamped(img, x - 0.5, y - 0.5);
                        let inside = (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
                        out.extend_from_slice(&rgb);
                        out.push(if inside { 1.0 } else { 0.0 });
                    }
                    _ => out.extend_from_slice(&[0.0; 4]),
                }
            }
        }
        Ok(out)
    }

    pub fn views(&self) -> usize {
        self.patches.len()
    }

    pub fn valid(&self) -> &[Vec<bool>] {
        &self.valid
    }
}

fn bilinear_clamped(img: &Image, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut rgb = [0.0; 3];
    for (u, v, wt) in [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x1, y0, fx * (1.0 - fy)), (x0, y1, (1.0 - fx) * fy), (x1, y1, fx * fy)] {
        let px = img.pixel(u, v);
        for c in 0..3 {
            rgb[c] += wt * px[c];
        }
    }
    rgb
}

/// Feature volume `f` as `[cells, C]` and adaptiveness volume `a` as
/// `[cells, L]`, both rows in [`VolumeGrid::index`] order.
#[derive(Clone, Copy, Debug)]
pub struct SceneVolumes {
    pub f: Var,
    pub a: Var,
}

pub fn encode_scene(tape: &mut Tape, params: &Bound, support: &SupportSet) -> Result<SceneVolumes> {
    let spec = support.grid.spec;
    let mut warped = Vec::with_capacity(support.views());
    for (patches, table) in support.patches.iter().zip(&support.warps) {
        let p = tape.constant(patches);
        let feats = extract_2d_features(tape, params, p)?;
        warped.push(tape.gather(feats, table.clone())?);
    }
    let variance = cost_volume(tape, &warped, &support.valid)?;
    let out = Mlp2::bind(params, "enc.b")?.forward(tape, variance)?;
    let f = tape.slice(out, 1, 0, spec.channels)?;
    let f = tape.gather(f, support.smoothing.clone())?;
    let a = tape.slice(out, 1, spec.channels, spec.channels + spec.layers)?;
    Ok(SceneVolumes { f, a })
}

/// Trilinear lookup of `volume` (`[cells, ch]`) at world points. Returns
/// `[points, ch]` and the in-bounds flags; outside points read zero.
pub fn interpolate(tape: &mut Tape, volume: Var, grid: &VolumeGrid, points: &[Vector3<f64>]) -> Result<(Var, Vec<bool>)> {
    let (table, inside) = grid.trilinear_table(points);
    Ok((tape.gather(volume, Arc::new(table))?, inside))
}
