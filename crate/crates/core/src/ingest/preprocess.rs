//! Resize, augmentation, and pixel normalization.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const IMAGE_SIZE: u32 = 224;

/// Per-channel pixel statistics of a backbone's pretraining data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
    pub const CLIP: Normalization = Normalization {
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
    };
    pub const UNIT: Normalization = Normalization {
        mean: [0.5, 0.5, 0.5],
        std: [0.5, 0.5, 0.5],
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f32,
    /// Maximum absolute horizontal shear in degrees.
    pub shear_deg: f32,
    pub hflip_prob: f32,
    pub vflip_prob: f32,
    /// Multiplicative brightness factor range.
    pub brightness: (f32, f32),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            shear_deg: 10.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            brightness: (0.8, 1.2),
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            brightness: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: u32,
    pub augment: AugmentSpec,
    pub augment_enabled: bool,
    pub normalization: Normalization,
}

impl PreprocessSpec {
    /// Training pipeline at the standard 224x224 resolution.
    pub fn training(normalization: Normalization) -> Self {
        Self {
            target_size: IMAGE_SIZE,
            augment: AugmentSpec::default(),
            augment_enabled: true,
            normalization,
        }
    }

    /// The same pipeline with augmentation disabled (validation and test).
    pub fn for_eval(&self) -> Self {
        Self {
            augment_enabled: false,
            ..*self
        }
    }

    /// Stable identifier of everything that affects eval-mode pixels.
    pub fn eval_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&(self.target_size, self.normalization))
            .expect("spec serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Channel-major (3 x size x size) normalized pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTensor {
    pub size: u32,
    pub data: Vec<f32>,
}

pub fn preprocess_image(path: &Path, spec: &PreprocessSpec, seed: u64) -> Result<PixelTensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(preprocess_rgb(&img, spec, seed))
}

/// Resize to `spec.target_size`, apply seeded augmentation when enabled,
/// and normalize. The seed is ignored when augmentation is disabled.
pub fn preprocess_rgb(img: &RgbImage, spec: &PreprocessSpec, seed: u64) -> PixelTensor {
    let size = spec.target_size;
    let resized = if img.dimensions() == (size, size) {
        img.clone()
    } else {
        imageops::resize(img, size, size, FilterType::Triangle)
    };
    let n = (size * size) as usize;
    // Planar float copy in [0, 255].
    let mut planes = vec![0f32; 3 * n];
    for (i, p) in resized.pixels().enumerate() {
        for c in 0..3 {
            planes[c * n + i] = f32::from(p[c]);
        }
    }

    if spec.augment_enabled {
        let a = &spec.augment;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = symmetric(&mut rng, a.rotation_deg).to_radians();
        let shear = symmetric(&mut rng, a.shear_deg).to_radians();
        let hflip = rng.random::<f32>() < a.hflip_prob;
        let vflip = rng.random::<f32>() < a.vflip_prob;
        let (lo, hi) = a.brightness;
        let brightness = if hi > lo { rng.random_range(lo..=hi) } else { lo };

        if angle != 0.0 || shear != 0.0 {
            planes = warp_affine(&planes, size as usize, angle, shear);
        }
        if hflip || vflip {
            planes = flip(&planes, size as usize, hflip, vflip);
        }
        if brightness != 1.0 {
            for v in planes.iter_mut() {
                *v = (*v * brightness).clamp(0.0, 255.0);
            }
        }
    }

    let norm = &spec.normalization;
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        for v in &mut planes[c * n..(c + 1) * n] {
            *v = (*v / 255.0 - m) / s;
        }
    }
    PixelTensor { size, data: planes }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f32) -> f32 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

fn flip(planes: &[f32], size: usize, h: bool, v: bool) -> Vec<f32> {
    let n = size * size;
    let mut out = vec![0f32; planes.len()];
    for c in 0..3 {
        for y in 0..size {
            let sy = if v { size - 1 - y } else { y };
            for x in 0..size {
                let sx = if h { size - 1 - x } else { x };
                out[c * n + y * size + x] = planes[c * n + sy * size + sx];
            }
        }
    }
    out
}

/// Rotate then shear about the image center, sampling bilinearly with edge
/// clamping.
fn warp_affine(planes: &[f32], size: usize, angle: f32, shear: f32) -> Vec<f32> {
    let n = size * size;
    let c0 = (size as f32 - 1.0) / 2.0;
    // forward = Shear * Rotation; sample with the inverse.
    let (sin, cos) = angle.sin_cos();
    let k = shear.tan();
    // forward matrix [[a, b], [c, d]]
    let (a, b, c, d) = (cos + k * sin, -sin + k * cos, sin, cos);
    let det = a * d - b * c;
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);

    let mut out = vec![0f32; planes.len()];
    let max = size as f32 - 1.0;
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - c0, y as f32 - c0);
            let sx = (ia * dx + ib * dy + c0).clamp(0.0, max);
            let sy = (ic * dx + id * dy + c0).clamp(0.0, max);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for ch in 0..3 {
                let p = &planes[ch * n..(ch + 1) * n];
                let top = p[y0 * size + x0] * (1.0 - fx) + p[y0 * size + x1] * fx;
                let bot = p[y1 * size + x0] * (1.0 - fx) + p[y1 * size + x1] * fx;
                out[ch * n + y * size + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn resizes_to_224_without_augmentation() {
        let spec = PreprocessSpec::training(Normalization::IMAGENET).for_eval();
        let out = preprocess_rgb(&gradient_image(600, 450), &spec, 0);
        assert_eq!(out.size, 224);
        assert_eq!(out.data.len(), 3 * 224 * 224);
        // the seed is irrelevant with augmentation off
        assert_eq!(out, preprocess_rgb(&gradient_image(600, 450), &spec, 99));
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let spec = PreprocessSpec::training(Normalization::IMAGENET);
        let img = gradient_image(300, 200);
        let a = preprocess_rgb(&img, &spec, 7);
        let b = preprocess_rgb(&img, &spec, 7);
        assert_eq!(a.data, b.data);
        let c = preprocess_rgb(&img, &spec, 8);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn unit_brightness_is_identity() {
        let mut spec = PreprocessSpec::training(Normalization::IMAGENET);
        spec.augment = AugmentSpec::none();
        let img = gradient_image(320, 240);
        let augmented = preprocess_rgb(&img, &spec, 3);
        let plain = preprocess_rgb(&img, &spec.for_eval(), 0);
        assert_eq!(augmented.data, plain.data);
    }

    #[test]
    fn double_flip_restores_image() {
        let planes: Vec<f32> = (0..3 * 16).map(|v| v as f32).collect();
        let once = flip(&planes, 4, true, true);
        assert_ne!(once, planes);
        assert_eq!(flip(&once, 4, true, true), planes);
    }

    #[test]
    fn zero_warp_is_identity() {
        let planes: Vec<f32> = (0..3 * 25).map(|v| v as f32).collect();
        let out = warp_affine(&planes, 5, 0.0, 0.0);
        for (a, b) in out.iter().zip(&planes) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn normalization_constants_applied() {
        let spec = PreprocessSpec {
            target_size: 2,
            augment: AugmentSpec::none(),
            augment_enabled: false,
            normalization: Normalization::UNIT,
        };
        let img = RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 255]));
        let out = preprocess_rgb(&img, &spec, 0);
        assert_eq!(&out.data[0..4], &[1.0; 4]);
        assert_eq!(&out.data[4..8], &[-1.0; 4]);
    }
}
