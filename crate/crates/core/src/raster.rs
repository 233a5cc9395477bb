//! Float RGB images with 8-bit PNG / binary PPM input and output.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major RGB image with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![height, width, 3],
                rhs: vec![data.len()],
            });
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Adds seeded i.i.d. Gaussian noise and clamps back to `[0, 1]`.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Result<Image> {
        let mut data = add_noise(&self.data, sigma, seed)?;
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Image { data, ..*self })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Writes PNG or binary PPM depending on the extension (`.ppm`/`.pnm`
    /// select P6, anything else PNG).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8();
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") | Some("pnm") => {
                let file = std::io::BufWriter::new(std::fs::File::create(path)?);
                PnmEncoder::new(file)
                    .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                    .write_image(&bytes, self.width as u32, self.height as u32, ExtendedColorType::Rgb8)?;
            }
            _ => {
                let buf = RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
                    .expect("buffer length matches dimensions");
                buf.save_with_format(path, ImageFormat::Png)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

/// `data + N(0, sigma^2)` elementwise from a ChaCha stream seeded by `seed`.
pub fn add_noise(data: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(data.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(data.iter().map(|v| v + normal.sample(&mut rng)).collect())
}
