//! Camera rigs: a set of posed cameras plus the depth range and the split
//! into training and validation views.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};

pub const RIG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub cameras: Vec<Camera>,
    pub near: f64,
    pub far: f64,
    pub training_views: Vec<usize>,
    pub validation_views: Vec<usize>,
}

/// Cameras spaced evenly on a horizontal arc around the origin.
#[derive(Clone, Debug)]
pub struct ArcRig {
    pub views: usize,
    pub radius: f64,
    pub arc_degrees: f64,
    pub elevation_degrees: f64,
    pub fov_degrees: f64,
    pub width: usize,
    pub height: usize,
    pub training: usize,
    pub scene_radius: f64,
}

impl Default for ArcRig {
    fn default() -> Self {
        ArcRig {
            views: 21,
            radius: 4.0,
            arc_degrees: 60.0,
            elevation_degrees: 20.0,
            fov_degrees: 34.0,
            width: 48,
            height: 48,
            training: 5,
            scene_radius: 1.4,
        }
    }
}

/// `count` indices spread evenly over `0..n`, endpoints included.
pub fn evenly_indexed(n: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    (0..count)
        .map(|i| ((i * (n - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

impl ArcRig {
    pub fn build(&self) -> Result<Rig> {
        if self.views < 2 || self.training < 2 || self.training > self.views {
            return Err(Error::invalid(format!(
                "need 2 <= training ({}) <= views ({})",
                self.training, self.views
            )));
        }
        if self.scene_radius >= self.radius {
            return Err(Error::invalid("cameras must sit outside the scene radius"));
        }
        let f = self.width as f64 / 2.0 / (self.fov_degrees.to_radians() / 2.0).tan();
        let intr = Intrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        };
        let elev = self.elevation_degrees.to_radians();
        let cameras = (0..self.views)
            .map(|i| {
                let frac = i as f64 / (self.views - 1) as f64;
                let theta = (frac - 0.5) * self.arc_degrees.to_radians();
                let eye = Vector3::new(
                    self.radius * elev.cos() * theta.sin(),
                    self.radius * elev.sin(),
                    -self.radius * elev.cos() * theta.cos(),
                );
                Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), intr, self.width, self.height)
            })
            .collect::<Result<Vec<_>>>()?;
        let training_views = evenly_indexed(self.views, self.training);
        let validation_views = training_views
            .windows(2)
            .map(|w| (w[0] + w[1]) / 2)
            .filter(|v| !training_views.contains(v))
            .collect();
        Ok(Rig {
            cameras,
            near: self.radius - self.scene_radius,
            far: self.radius + self.scene_radius,
            training_views,
            validation_views,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    width: usize,
    height: usize,
    intrinsics: Intrinsics,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    version: u32,
    near: f64,
    far: f64,
    training_views: Vec<usize>,
    validation_views: Vec<usize>,
    camera: Vec<CameraRecord>,
}

impl Rig {
    pub fn camera(&self, view: usize) -> Result<&Camera> {
        self.cameras.get(view).ok_or(Error::IndexOutOfRange {
            what: "view",
            index: view,
            len: self.cameras.len(),
        })
    }

    pub fn training_cameras(&self) -> Vec<Camera> {
        self.training_views.iter().map(|&v| self.cameras[v].clone()).collect()
    }

    pub fn to_toml(&self) -> String {
        let file = RigFile {
            version: RIG_FORMAT_VERSION,
            near: self.near,
            far: self.far,
            training_views: self.training_views.clone(),
            validation_views: self.validation_views.clone(),
            camera: self
                .cameras
                .iter()
                .map(|c| {
                    let r = c.rotation();
                    CameraRecord {
                        width: c.width(),
                        height: c.height(),
                        intrinsics: c.intrinsics(),
                        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
                        translation: std::array::from_fn(|i| c.translation()[i]),
                    }
                })
                .collect(),
        };
        toml::to_string(&file).expect("rig serializes")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            message,
        };
        let file: RigFile = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if file.version != RIG_FORMAT_VERSION {
            return Err(parse_err(format!("unsupported rig version {}", file.version)));
        }
        let cameras = file
            .camera
            .into_iter()
            .map(|c| {
                let r = Matrix3::from_fn(|i, j| c.rotation[i][j]);
                Camera::new(c.intrinsics, r, Vector3::from(c.translation), c.width, c.height)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = cameras.len();
        if let Some(&bad) = file.training_views.iter().chain(&file.validation_views).find(|&&v| v >= n) {
            return Err(parse_err(format!("view index {bad} out of range for {n} cameras")));
        }
        Ok(Rig {
            cameras,
            near: file.near,
            far: file.far,
            training_views: file.training_views,
            validation_views: file.validation_views,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}
