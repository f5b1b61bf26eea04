//! Bit-exact checkpoint file format.
//!
//! Layout: 8-byte magic `TTOPNET1`, little-endian u32 header length,
//! UTF-8 JSON header (architecture, parameter table, training metadata),
//! then the raw little-endian IEEE-754 f32 parameter payload
//! concatenated in header order.

use std::fs;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"TTOPNET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// 1-based epoch whose parameters this checkpoint holds.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: NetworkSpec,
    pub params: Vec<ParamInfo>,
    pub meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Aligned with `header.params`.
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_network<T: Float>(net: &Network<T>, meta: TrainMeta) -> Self {
        let mut params = Vec::new();
        let mut tensors = Vec::new();
        for (name, tensor) in net.parameters() {
            params.push(ParamInfo {
                name,
                shape: tensor.shape().to_vec(),
                dtype: "f32".into(),
            });
            tensors.push(tensor.cast::<f32>());
        }
        Checkpoint {
            header: CheckpointHeader {
                spec: net.spec().clone(),
                params,
                meta,
            },
            tensors,
        }
    }

    /// Rebuild a runnable network carrying this checkpoint's weights.
    pub fn to_network(&self) -> Result<Network<f32>> {
        let mut net = Network::build(&self.header.spec, 0)?;
        let named: Vec<(String, Tensor<f32>)> = self
            .header
            .params
            .iter()
            .zip(&self.tensors)
            .map(|(info, t)| (info.name.clone(), t.clone()))
            .collect();
        net.set_parameters(&named)?;
        Ok(net)
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(total);
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Parse(format!("checkpoint header serialization: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Parse("bad magic: not a TTOPNET1 checkpoint".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(Error::Parse("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        let payload = &bytes[12 + header_len..];
        let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum();
        if payload.len() != expected {
            return Err(Error::Parse(format!(
                "payload length mismatch: header wants {expected} bytes, file has {}",
                payload.len()
            )));
        }
        for p in &header.params {
            if p.dtype != "f32" {
                return Err(Error::Parse(format!(
                    "parameter {} has unsupported dtype {}",
                    p.name, p.dtype
                )));
            }
        }
        let mut tensors = Vec::with_capacity(header.params.len());
        let mut offset = 0;
        for info in &header.params {
            let count: usize = info.shape.iter().product();
            let data: Vec<f32> = payload[offset..offset + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += count * 4;
            tensors.push(Tensor::from_vec(&info.shape, data)?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Padding};
    use crate::train::Precision;

    fn tiny_net() -> Network<f32> {
        let spec = NetworkSpec {
            name: "tiny".into(),
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 3 },
            ],
            classes: 3,
        };
        Network::build(&spec, 42).unwrap()
    }

    fn meta() -> TrainMeta {
        TrainMeta {
            epoch: 3,
            val_accuracy: 0.875,
            seed: 42,
            config: TrainConfig {
                precision: Precision::F32,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let net = tiny_net();
        let ckpt = Checkpoint::from_network(&net, meta());
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, ckpt);
        // Re-serializing the loaded checkpoint gives identical bytes.
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_magic_detected() {
        let mut bytes = Checkpoint::from_network(&tiny_net(), meta())
            .to_bytes()
            .unwrap();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_detected() {
        let mut bytes = Checkpoint::from_network(&tiny_net(), meta())
            .to_bytes()
            .unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn to_network_restores_parameters() {
        let net = tiny_net();
        let ckpt = Checkpoint::from_network(&net, meta());
        let restored = ckpt.to_network().unwrap();
        for ((na, a), (nb, b)) in net.parameters().iter().zip(restored.parameters()) {
            assert_eq!(*na, nb);
            assert_eq!(a.data(), b.data());
        }
    }
}
