//! Image backbones behind a single embedding interface.

mod cache;

pub use cache::{CacheKey, EmbeddingCache};

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::clip::text_model::Activation;
use candle_transformers::models::clip::vision_model::{ClipVisionConfig, ClipVisionTransformer};
use candle_transformers::models::resnet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{Normalization, PixelTensor};
use crate::nn::{Conv2d, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    /// ImageNet-style residual network; embeddings are the pooled
    /// penultimate activations.
    GenericCnn,
    /// CLIP-style vision transformer.
    DermClip,
    /// Three-layer convolutional network trained from scratch.
    SmallCnn,
}

impl BackboneFamily {
    pub fn default_normalization(self) -> Normalization {
        match self {
            BackboneFamily::GenericCnn => Normalization::IMAGENET,
            BackboneFamily::DermClip => Normalization::CLIP,
            BackboneFamily::SmallCnn => Normalization::UNIT,
        }
    }
}

impl fmt::Display for BackboneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneFamily::GenericCnn => "generic_cnn",
            BackboneFamily::DermClip => "derm_clip",
            BackboneFamily::SmallCnn => "small_cnn",
        })
    }
}

impl FromStr for BackboneFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "generic_cnn" | "resnet" => Ok(BackboneFamily::GenericCnn),
            "derm_clip" | "clip" => Ok(BackboneFamily::DermClip),
            "small_cnn" => Ok(BackboneFamily::SmallCnn),
            other => Err(Error::config(format!("unsupported backbone family {other:?}"))),
        }
    }
}

/// Which CLIP vision output is used as the embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipOutput {
    /// Joint image-text space (after the visual projection).
    #[default]
    Projection,
    /// Pooled encoder output before the projection.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    /// Safetensors file, or a bare name looked up in `$SKINFAIR_WEIGHTS_DIR`.
    /// Only `small_cnn` may omit it (random init).
    #[serde(default)]
    pub weights: Option<String>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    #[serde(default = "default_input_size")]
    pub input_size: u32,
    #[serde(default)]
    pub clip_output: ClipOutput,
    /// Attention heads of a CLIP encoder (not recoverable from weight
    /// shapes); defaults to width / 64.
    #[serde(default)]
    pub clip_heads: Option<usize>,
    /// Channel widths of the three `small_cnn` convolutions.
    #[serde(default)]
    pub cnn_widths: Option<[usize; 3]>,
    #[serde(default)]
    pub expected_sha256: Option<String>,
}

fn default_input_size() -> u32 {
    crate::ingest::IMAGE_SIZE
}

pub const WEIGHTS_DIR_ENV: &str = "SKINFAIR_WEIGHTS_DIR";

impl BackboneSpec {
    pub fn new(family: BackboneFamily, weights: Option<String>, embedding_dim: usize) -> Self {
        Self {
            family,
            weights,
            embedding_dim,
            trainable: false,
            normalization: None,
            input_size: default_input_size(),
            clip_output: ClipOutput::default(),
            clip_heads: None,
            cnn_widths: None,
            expected_sha256: None,
        }
    }

    /// Trainable small CNN on `input_size` pixels.
    pub fn small_cnn(input_size: u32, widths: [usize; 3]) -> Self {
        Self {
            trainable: true,
            input_size,
            cnn_widths: Some(widths),
            ..Self::new(BackboneFamily::SmallCnn, None, widths[2])
        }
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
            .unwrap_or_else(|| self.family.default_normalization())
    }

    pub fn resolve_weights(&self) -> Option<PathBuf> {
        let w = self.weights.as_deref()?;
        let p = PathBuf::from(w);
        if p.exists() || p.components().count() > 1 {
            return Some(p);
        }
        match std::env::var_os(WEIGHTS_DIR_ENV) {
            Some(dir) => {
                let mut q = Path::new(&dir).join(w);
                if q.extension().is_none() {
                    q.set_extension("safetensors");
                }
                Some(q)
            }
            None => Some(p),
        }
    }
}

/// One extracted embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub source_image_id: String,
    pub values: Vec<f32>,
}

enum Model {
    Resnet(candle_nn::Func<'static>),
    Clip {
        vision: ClipVisionTransformer,
        projection: Option<candle_nn::Linear>,
    },
    Small(SmallCnn),
}

/// A loaded backbone.
pub struct Backbone {
    spec: BackboneSpec,
    checksum: String,
    model: Model,
    params: Params,
    device: Device,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("spec", &self.spec)
            .field("checksum", &self.checksum)
            .finish_non_exhaustive()
    }
}

/// sha256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Load a backbone. With `trainable = false` the output is detached from
/// the graph so backbone parameters never receive gradients.
pub fn load_backbone(spec: &BackboneSpec, seed: u64, device: &Device) -> Result<Backbone> {
    if spec.embedding_dim == 0 {
        return Err(Error::config("embedding_dim must be positive"));
    }
    let Some(path) = spec.resolve_weights() else {
        if spec.family != BackboneFamily::SmallCnn {
            return Err(Error::config(format!("{} backbone needs a weights file", spec.family)));
        }
        let widths = spec.cnn_widths.unwrap_or([16, 32, spec.embedding_dim]);
        check_dim(spec, widths[2], Path::new("<random init>"))?;
        let cnn = SmallCnn::new("backbone", widths, seed, device)?;
        let params = if spec.trainable { cnn.params() } else { Vec::new() };
        return Ok(Backbone {
            spec: spec.clone(),
            checksum: format!("init-seed-{seed}"),
            model: Model::Small(cnn),
            params,
            device: device.clone(),
        });
    };

    if !path.is_file() {
        return Err(Error::Weights {
            path,
            detail: "file not found".into(),
        });
    }
    let checksum = file_sha256(&path)?;
    if let Some(expected) = &spec.expected_sha256 {
        if !expected.eq_ignore_ascii_case(&checksum) {
            return Err(Error::Weights {
                path,
                detail: format!("checksum mismatch: expected {expected}, found {checksum}"),
            });
        }
    }
    let tensors = candle_core::safetensors::load(&path, device).map_err(|e| Error::Weights {
        path: path.clone(),
        detail: format!("unreadable weights (sha256 {checksum}): {e}"),
    })?;

    let mut map = HashMap::with_capacity(tensors.len());
    let mut params = Params::new();
    let mut names: Vec<_> = tensors.keys().cloned().collect();
    names.sort();
    for name in names {
        let t = tensors[&name].to_dtype(DType::F32)?;
        let t = if spec.trainable && is_learnable(&name) {
            let var = candle_core::Var::from_tensor(&t)?;
            params.push((format!("backbone.{name}"), var.clone()));
            var.as_tensor().clone()
        } else {
            t
        };
        map.insert(name, t);
    }
    let shapes: HashMap<String, Vec<usize>> =
        map.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect();
    let weights_err = |detail: String| Error::Weights {
        path: path.clone(),
        detail: format!("{detail} (sha256 {checksum})"),
    };
    let vb = VarBuilder::from_tensors(map, DType::F32, device);

    let (model, dim) = match spec.family {
        BackboneFamily::GenericCnn => {
            let (depth, dim) = resnet_layout(&shapes).map_err(weights_err)?;
            let f = match depth {
                18 => resnet::resnet18_no_final_layer(vb),
                34 => resnet::resnet34_no_final_layer(vb),
                50 => resnet::resnet50_no_final_layer(vb),
                101 => resnet::resnet101_no_final_layer(vb),
                _ => resnet::resnet152_no_final_layer(vb),
            }
            .map_err(|e| weights_err(e.to_string()))?;
            (Model::Resnet(f), dim)
        }
        BackboneFamily::DermClip => {
            let cfg = clip_layout(&shapes, spec.clip_heads).map_err(weights_err)?;
            let vision = ClipVisionTransformer::new(vb.pp("vision_model"), &cfg)
                .map_err(|e| weights_err(e.to_string()))?;
            let (projection, dim) = match spec.clip_output {
                ClipOutput::Projection => {
                    let p = candle_nn::linear_no_bias(
                        cfg.embed_dim,
                        cfg.projection_dim,
                        vb.pp("visual_projection"),
                    )
                    .map_err(|e| weights_err(e.to_string()))?;
                    (Some(p), cfg.projection_dim)
                }
                ClipOutput::Pooled => (None, cfg.embed_dim),
            };
            (Model::Clip { vision, projection }, dim)
        }
        BackboneFamily::SmallCnn => {
            let cnn = SmallCnn::from_tensors("backbone", &vb, &shapes).map_err(weights_err)?;
            let dim = cnn.out_dim();
            if spec.trainable {
                params = cnn.params();
            }
            (Model::Small(cnn), dim)
        }
    };
    check_dim(spec, dim, &path)?;
    Ok(Backbone {
        spec: spec.clone(),
        checksum,
        model,
        params,
        device: device.clone(),
    })
}

fn check_dim(spec: &BackboneSpec, found: usize, path: &Path) -> Result<()> {
    if found != spec.embedding_dim {
        return Err(Error::Weights {
            path: path.to_path_buf(),
            detail: format!(
                "embedding dimension mismatch: spec declares {}, weights produce {found}",
                spec.embedding_dim
            ),
        });
    }
    Ok(())
}

fn is_learnable(name: &str) -> bool {
    !(name.ends_with("running_mean") || name.ends_with("running_var") || name.ends_with("num_batches_tracked"))
}

fn count_blocks(shapes: &HashMap<String, Vec<usize>>, layer: &str) -> usize {
    (0..)
        .take_while(|i| shapes.contains_key(&format!("{layer}.{i}.conv1.weight")))
        .count()
}

/// ResNet depth and penultimate width from parameter shapes.
fn resnet_layout(shapes: &HashMap<String, Vec<usize>>) -> std::result::Result<(usize, usize), String> {
    let blocks: Vec<usize> = (1..=4).map(|l| count_blocks(shapes, &format!("layer{l}"))).collect();
    let bottleneck = shapes.contains_key("layer1.0.conv3.weight");
    let depth = match (bottleneck, blocks.as_slice()) {
        (false, [2, 2, 2, 2]) => 18,
        (false, [3, 4, 6, 3]) => 34,
        (true, [3, 4, 6, 3]) => 50,
        (true, [3, 4, 23, 3]) => 101,
        (true, [3, 8, 36, 3]) => 152,
        _ => return Err(format!("unrecognized residual layout {blocks:?} (bottleneck: {bottleneck})")),
    };
    let last = format!(
        "layer4.{}.{}.weight",
        blocks[3] - 1,
        if bottleneck { "bn3" } else { "bn2" }
    );
    let dim = shapes
        .get(&last)
        .map(|s| s[0])
        .ok_or_else(|| format!("missing tensor {last}"))?;
    Ok((depth, dim))
}

fn clip_layout(
    shapes: &HashMap<String, Vec<usize>>,
    heads: Option<usize>,
) -> std::result::Result<ClipVisionConfig, String> {
    let get = |k: &str| shapes.get(k).ok_or_else(|| format!("missing tensor {k}"));
    let embed_dim = get("vision_model.embeddings.class_embedding")?[0];
    let patch = get("vision_model.embeddings.patch_embedding.weight")?;
    let (num_channels, patch_size) = (patch[1], patch[2]);
    let positions = get("vision_model.embeddings.position_embedding.weight")?[0];
    let side = ((positions - 1) as f64).sqrt().round() as usize;
    if side * side + 1 != positions {
        return Err(format!("{positions} position embeddings do not form a square grid"));
    }
    let layers = (0..)
        .take_while(|i| shapes.contains_key(&format!("vision_model.encoder.layers.{i}.mlp.fc1.weight")))
        .count();
    if layers == 0 {
        return Err("no encoder layers found".into());
    }
    let intermediate_size = get("vision_model.encoder.layers.0.mlp.fc1.weight")?[0];
    let projection_dim = shapes
        .get("visual_projection.weight")
        .map(|s| s[0])
        .unwrap_or(embed_dim);
    let num_attention_heads = heads.unwrap_or((embed_dim / 64).max(1));
    if embed_dim % num_attention_heads != 0 {
        return Err(format!("{num_attention_heads} heads do not divide width {embed_dim}"));
    }
    Ok(ClipVisionConfig {
        embed_dim,
        activation: Activation::QuickGelu,
        intermediate_size,
        num_hidden_layers: layers,
        num_attention_heads,
        projection_dim,
        num_channels,
        image_size: side * patch_size,
        patch_size,
    })
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// sha256 of the weights file, or the init seed for random weights.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn is_trainable(&self) -> bool {
        self.spec.trainable
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable parameters; empty when frozen.
    pub fn params(&self) -> Params {
        self.params.clone()
    }

    /// Parameter values by name, for checkpoints and freeze checks.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        match &self.model {
            Model::Small(c) => c.params().into_iter().map(|(n, v)| (n, v.as_tensor().clone())).collect(),
            _ => self.params.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect(),
        }
    }

    /// (batch, 3, s, s) pixels to (batch, embedding_dim).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = match &self.model {
            Model::Resnet(f) => f.forward(x)?,
            Model::Clip { vision, projection } => {
                let pooled = vision.forward(x)?;
                match projection {
                    Some(p) => p.forward(&pooled)?,
                    None => pooled,
                }
            }
            Model::Small(c) => c.forward(x)?,
        };
        Ok(if self.spec.trainable { out } else { out.detach() })
    }

    /// Embed a batch of preprocessed images.
    pub fn embed(&self, batch: &[PixelTensor], ids: &[String]) -> Result<Vec<EmbeddingVector>> {
        if batch.len() != ids.len() {
            return Err(Error::invalid("image and id counts differ"));
        }
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let x = pixels_to_tensor(batch, &self.device)?;
        let rows: Vec<Vec<f32>> = self.forward(&x)?.to_dtype(DType::F32)?.to_vec2()?;
        let bad: Vec<&str> = rows
            .iter()
            .zip(ids)
            .filter(|(r, _)| r.iter().any(|v| !v.is_finite()))
            .map(|(_, id)| id.as_str())
            .collect();
        if !bad.is_empty() {
            return Err(Error::numeric(format!("non-finite embeddings for images {bad:?}")));
        }
        Ok(rows
            .into_iter()
            .zip(ids)
            .map(|(values, id)| EmbeddingVector {
                source_image_id: id.clone(),
                values,
            })
            .collect())
    }
}

/// Stack preprocessed images into a (batch, 3, s, s) tensor.
pub fn pixels_to_tensor(batch: &[PixelTensor], device: &Device) -> Result<Tensor> {
    let size = batch.first().map_or(0, |p| p.size as usize);
    if batch.iter().any(|p| p.size as usize != size) {
        return Err(Error::invalid("images in a batch differ in size"));
    }
    let mut data = Vec::with_capacity(batch.len() * 3 * size * size);
    for p in batch {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec(data, (batch.len(), 3, size, size), device)?)
}

/// Conv(3x3)-ReLU-MaxPool twice, Conv(3x3)-ReLU, global average pool.
pub struct SmallCnn {
    convs: [Conv2d; 3],
}

impl SmallCnn {
    pub fn new(prefix: &str, widths: [usize; 3], seed: u64, device: &Device) -> Result<Self> {
        let ins = [3, widths[0], widths[1]];
        let mk = |i: usize| Conv2d::new(&format!("{prefix}.conv{i}"), ins[i], widths[i], 3, seed, DType::F32, device);
        Ok(Self {
            convs: [mk(0)?, mk(1)?, mk(2)?],
        })
    }

    fn from_tensors(
        prefix: &str,
        vb: &VarBuilder,
        shapes: &HashMap<String, Vec<usize>>,
    ) -> std::result::Result<Self, String> {
        let load = |i: usize| -> std::result::Result<Conv2d, String> {
            let w = format!("{prefix}.conv{i}.weight");
            let shape = shapes.get(&w).ok_or_else(|| format!("missing tensor {w}"))?;
            let weight = vb.get(shape.as_slice(), &w).map_err(|e| e.to_string())?;
            let bias = vb
                .get(shape[0], &format!("{prefix}.conv{i}.bias"))
                .map_err(|e| e.to_string())?;
            Conv2d::from_tensors(&format!("{prefix}.conv{i}"), &weight, &bias).map_err(|e| e.to_string())
        };
        Ok(Self {
            convs: [load(0)?, load(1)?, load(2)?],
        })
    }

    pub fn out_dim(&self) -> usize {
        self.convs[2].out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.convs[0].forward(x)?.relu()?.max_pool2d(2)?;
        let x = self.convs[1].forward(&x)?.relu()?.max_pool2d(2)?;
        let x = self.convs[2].forward(&x)?.relu()?;
        Ok(x.mean(3)?.mean(2)?)
    }

    pub fn params(&self) -> Params {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_family_is_a_config_error() {
        assert!(matches!("vit_huge".parse::<BackboneFamily>(), Err(Error::Config(_))));
        assert_eq!("GENERIC_CNN".parse::<BackboneFamily>().unwrap(), BackboneFamily::GenericCnn);
        assert_eq!("derm-clip".parse::<BackboneFamily>().unwrap(), BackboneFamily::DermClip);
    }

    #[test]
    fn small_cnn_embeds_to_declared_width() {
        let spec = BackboneSpec::small_cnn(16, [4, 8, 12]);
        let b = load_backbone(&spec, 0, &Device::Cpu).unwrap();
        let img = PixelTensor {
            size: 16,
            data: (0..3 * 256).map(|v| (v as f32 / 768.0) - 0.5).collect(),
        };
        let out = b.embed(&[img.clone(), img], &["a".into(), "b".into()]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].values.len(), 12);
        assert_eq!(out[0].values, out[1].values);
        assert_eq!(out[1].source_image_id, "b");
    }

    #[test]
    fn declared_width_must_match() {
        let mut spec = BackboneSpec::small_cnn(16, [4, 8, 12]);
        spec.embedding_dim = 10;
        assert!(matches!(load_backbone(&spec, 0, &Device::Cpu), Err(Error::Weights { .. })));
    }

    #[test]
    fn missing_weights_are_fatal() {
        let spec = BackboneSpec::new(BackboneFamily::GenericCnn, Some("/nonexistent/resnet.safetensors".into()), 2048);
        match load_backbone(&spec, 0, &Device::Cpu) {
            Err(Error::Weights { detail, .. }) => assert!(detail.contains("not found")),
            other => panic!("expected weights error, got {other:?}"),
        }
        let none = BackboneSpec::new(BackboneFamily::DermClip, None, 512);
        assert!(load_backbone(&none, 0, &Device::Cpu).is_err());
    }
}
