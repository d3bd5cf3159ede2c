use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{load_backbone, BackboneSpec};
use crate::models::{DebiasNet, ModelConfig, NetInput};

/// Everything besides the tensors that a checkpoint carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub backbone: BackboneSpec,
    pub backbone_checksum: String,
    /// Width of embedding inputs; `None` when the network reads pixels.
    pub input_dim: Option<usize>,
    pub epoch: usize,
    pub val_balanced_accuracy: f64,
}

/// A snapshot of trainable parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Deep copies, sorted by name.
    pub tensors: Vec<(String, Tensor)>,
}

const META_KEY: &str = "skinfair_meta";
const CHECKSUM_KEY: &str = "weights_sha256";

impl Checkpoint {
    /// Snapshot the current values of `net`.
    pub fn capture(net: &DebiasNet, backbone: &BackboneSpec, backbone_checksum: &str, epoch: usize, val_ba: f64) -> Result<Self> {
        let mut tensors = net
            .state()?
            .into_iter()
            .map(|(n, t)| Ok((n, t.copy()?)))
            .collect::<Result<Vec<_>>>()?;
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            meta: CheckpointMeta {
                model: net.config().clone(),
                backbone: backbone.clone(),
                backbone_checksum: backbone_checksum.to_string(),
                input_dim: net.input_dim(),
                epoch,
                val_balanced_accuracy: val_ba,
            },
            tensors,
        })
    }

    /// sha256 over names, shapes and little-endian values in name order.
    pub fn weights_checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(format!("{:?}", t.dims()).as_bytes());
            let v: Vec<f32> = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Write a single safetensors file; returns the weights checksum.
    pub fn save(&self, path: &Path) -> Result<String> {
        let checksum = self.weights_checksum()?;
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        info.insert(CHECKSUM_KEY.to_string(), checksum.clone());
        let data: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = safetensors::serialize(data, Some(info)).map_err(|e| Error::Weights {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        Ok(checksum)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Weights {
            path: path.to_path_buf(),
            detail,
        };
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let info = header.metadata().clone().unwrap_or_default();
        let meta: CheckpointMeta = serde_json::from_str(
            info.get(META_KEY)
                .ok_or_else(|| bad("missing checkpoint metadata".into()))?,
        )?;
        let mut tensors: Vec<(String, Tensor)> = candle_core::safetensors::load_buffer(&bytes, device)?
            .into_iter()
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let ckpt = Self { meta, tensors };
        let expected = info.get(CHECKSUM_KEY).cloned().unwrap_or_default();
        let found = ckpt.weights_checksum()?;
        if expected != found {
            return Err(bad(format!("checksum mismatch: header {expected}, contents {found}")));
        }
        Ok(ckpt)
    }

    /// Copy the stored values into `net`.
    pub fn restore(&self, net: &DebiasNet) -> Result<()> {
        if net.config() != &self.meta.model {
            return Err(Error::invalid("checkpoint was written for a different model configuration"));
        }
        if net.input_dim() != self.meta.input_dim {
            return Err(Error::invalid(format!(
                "dimension mismatch: checkpoint input {:?}, network input {:?}",
                self.meta.input_dim,
                net.input_dim()
            )));
        }
        let map: HashMap<String, Tensor> = self.tensors.iter().cloned().collect();
        net.load_state(&map)
    }

    /// Rebuild the network this checkpoint was taken from.
    pub fn build_net(&self, device: &Device) -> Result<DebiasNet> {
        let input = match self.meta.input_dim {
            Some(d) => NetInput::Embeddings(d),
            None => {
                let seed = self
                    .meta
                    .backbone_checksum
                    .strip_prefix("init-seed-")
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0);
                NetInput::Images(load_backbone(&self.meta.backbone, seed, device)?)
            }
        };
        let net = DebiasNet::new(self.meta.model.clone(), input, 0, device)?;
        self.restore(&net)?;
        Ok(net)
    }
}
