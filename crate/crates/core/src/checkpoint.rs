//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CDRS" | version: u32 | tensor count: u32
//! per tensor: name length: u32 | name (UTF-8) | rank: u32 | dims: u64 × rank | f64 × Π dims
//! metadata length: u64 | metadata (UTF-8 JSON)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::nn::{DenseLayer, FinalActivation, MlpNetwork};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDRS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has {} values for dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        let meta_len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after metadata".into()));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Network hyperparameters stored next to the weight tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub layers: usize,
    pub norm_groups: Option<usize>,
    pub dropout_rate: f64,
    pub final_activation: FinalActivation,
}

impl NetworkMeta {
    pub fn of(net: &MlpNetwork) -> Self {
        Self {
            layers: net.layers().len(),
            norm_groups: net.norm_groups(),
            dropout_rate: net.dropout_rate(),
            final_activation: net.final_activation(),
        }
    }
}

/// Tensors `{prefix}.{k}.weight` and `{prefix}.{k}.bias` for every layer.
pub fn network_tensors(prefix: &str, net: &MlpNetwork) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (k, l) in net.layers().iter().enumerate() {
        out.push(Tensor {
            name: format!("{prefix}.{k}.weight"),
            dims: vec![l.out_dim(), l.in_dim()],
            data: l.weights.iter().copied().collect(),
        });
        out.push(Tensor {
            name: format!("{prefix}.{k}.bias"),
            dims: vec![l.out_dim()],
            data: l.bias.to_vec(),
        });
    }
    out
}

pub fn network_from_tensors(ckpt: &Checkpoint, prefix: &str, meta: &NetworkMeta) -> Result<MlpNetwork> {
    let mut layers = Vec::with_capacity(meta.layers);
    for k in 0..meta.layers {
        let w = ckpt.tensor(&format!("{prefix}.{k}.weight"))?;
        let b = ckpt.tensor(&format!("{prefix}.{k}.bias"))?;
        if w.dims.len() != 2 || b.dims.len() != 1 {
            return Err(Error::Checkpoint(format!(
                "layer {prefix}.{k} has the wrong rank"
            )));
        }
        let weights = Array2::from_shape_vec((w.dims[0], w.dims[1]), w.data.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let layer = DenseLayer::new(weights, Array1::from(b.data.clone()))
            .map_err(|e| Error::Checkpoint(format!("layer {prefix}.{k}: {e}")))?;
        layers.push(layer);
    }
    MlpNetwork::from_layers(layers, meta.norm_groups, meta.dropout_rate, meta.final_activation)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                Tensor {
                    name: "a".into(),
                    dims: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE, 0.0, 1e300],
                },
                Tensor {
                    name: "scalar".into(),
                    dims: vec![],
                    data: vec![7.0],
                },
            ],
            metadata: serde_json::json!({"kind": "test"}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..4], b"CDRS");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut future = bytes;
        future[4] = 9;
        assert!(Checkpoint::decode(&future).is_err());
    }

    #[test]
    fn network_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpNetwork::new(&[3, 8, 1], Some(4), 0.5, FinalActivation::NonNeg, &mut rng).unwrap();
        let meta = NetworkMeta::of(&net);
        let ckpt = Checkpoint {
            tensors: network_tensors("net", &net),
            metadata: serde_json::to_value(&meta).unwrap(),
        };
        let back = Checkpoint::decode(&ckpt.encode().unwrap()).unwrap();
        assert_eq!(network_from_tensors(&back, "net", &meta).unwrap(), net);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt.bin")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
