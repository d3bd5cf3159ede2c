use std::path::PathBuf;

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::features::pixels_to_tensor;
use crate::ingest::{preprocess_image, preprocess_rgb, PreprocessSpec};
use crate::nn::mix_seed;

/// Model inputs for every record of a dataset.
pub enum Inputs {
    /// Precomputed embeddings, one row per record.
    Embeddings(Vec<Vec<f32>>),
    /// Images decoded on demand from disk.
    ImageFiles { paths: Vec<PathBuf>, spec: PreprocessSpec },
    /// Images held in memory, already at the target size.
    ImagesInMemory { images: Vec<RgbImage>, spec: PreprocessSpec },
}

impl Inputs {
    /// Decode and resize all images up front.
    pub fn load_images(paths: &[PathBuf], spec: PreprocessSpec) -> Result<Self> {
        let s = spec.target_size;
        let images = paths
            .iter()
            .map(|p| {
                let img = image::open(p)?.to_rgb8();
                Ok(if img.dimensions() == (s, s) {
                    img
                } else {
                    imageops::resize(&img, s, s, FilterType::Triangle)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Inputs::ImagesInMemory { images, spec })
    }

    pub fn len(&self) -> usize {
        match self {
            Inputs::Embeddings(rows) => rows.len(),
            Inputs::ImageFiles { paths, .. } => paths.len(),
            Inputs::ImagesInMemory { images, .. } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of embedding inputs, `None` for images.
    pub fn embedding_dim(&self) -> Option<usize> {
        match self {
            Inputs::Embeddings(rows) => Some(rows.first().map_or(0, Vec::len)),
            _ => None,
        }
    }

    /// Stack the rows at `indices`. With `augment_seed` set, images are
    /// augmented with a per-record stream; embeddings are never augmented.
    pub fn batch(&self, indices: &[usize], augment_seed: Option<u64>, device: &Device) -> Result<Tensor> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("record index {i} out of range")));
        }
        match self {
            Inputs::Embeddings(rows) => {
                let d = rows.first().map_or(0, Vec::len);
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    if rows[i].len() != d {
                        return Err(Error::invalid("embedding rows differ in width"));
                    }
                    data.extend_from_slice(&rows[i]);
                }
                Ok(Tensor::from_vec(data, (indices.len(), d), device)?)
            }
            Inputs::ImageFiles { paths, spec } => {
                let (spec, seed) = pixel_spec(spec, augment_seed);
                let pixels = indices
                    .iter()
                    .map(|&i| preprocess_image(&paths[i], &spec, mix_seed(seed, &[i as u64])))
                    .collect::<Result<Vec<_>>>()?;
                pixels_to_tensor(&pixels, device)
            }
            Inputs::ImagesInMemory { images, spec } => {
                let (spec, seed) = pixel_spec(spec, augment_seed);
                let pixels: Vec<_> = indices
                    .iter()
                    .map(|&i| preprocess_rgb(&images[i], &spec, mix_seed(seed, &[i as u64])))
                    .collect();
                pixels_to_tensor(&pixels, device)
            }
        }
    }
}

fn pixel_spec(spec: &PreprocessSpec, augment_seed: Option<u64>) -> (PreprocessSpec, u64) {
    match augment_seed {
        Some(seed) if spec.augment_enabled => (*spec, seed),
        _ => (spec.for_eval(), 0),
    }
}

/// Inputs with their task labels and Fitzpatrick types.
pub struct Dataset {
    pub ids: Vec<String>,
    pub inputs: Inputs,
    /// Task class index of each record.
    pub labels: Vec<usize>,
    /// Fitzpatrick type (1..=6) of each record.
    pub tones: Vec<u8>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, inputs: Inputs, labels: Vec<usize>, tones: Vec<u8>) -> Result<Self> {
        let n = ids.len();
        if inputs.len() != n || labels.len() != n || tones.len() != n {
            return Err(Error::invalid(format!(
                "dataset columns differ in length: {n} ids, {} inputs, {} labels, {} tones",
                inputs.len(),
                labels.len(),
                tones.len()
            )));
        }
        if let Some(t) = tones.iter().find(|t| !(1..=6).contains(*t)) {
            return Err(Error::invalid(format!("tone {t} outside 1..=6")));
        }
        Ok(Self { ids, inputs, labels, tones })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
