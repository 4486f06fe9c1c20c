//! Binary checkpoints: `"OGZC"`, version (u32 LE), metadata length (u64 LE),
//! UTF-8 JSON metadata, then the f32 LE payload in metadata tensor order.

use std::path::Path;

use gazeward_core::nets::{EstimatorDims, GazeEstimator, Module};
use gazeward_core::reward::{RewardDims, RewardModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"OGZC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    pub dims: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub config_hash: Option<String>,
    pub epoch: Option<u32>,
    pub seed: Option<u64>,
    /// Free-form context (for example the cue configuration a reward model
    /// was trained against).
    #[serde(default)]
    pub context: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub payload: Vec<f32>,
}

/// Run information stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub config_hash: Option<String>,
    pub epoch: Option<u32>,
    pub seed: Option<u64>,
    pub context: serde_json::Value,
}

/// A module that can be rebuilt from its serialized dims.
pub trait Persist: Module + Sized {
    const KIND: &'static str;
    type Dims: Serialize + DeserializeOwned;

    fn dims(&self) -> Self::Dims;
    fn from_dims(dims: Self::Dims) -> gazeward_core::Result<Self>;
}

impl Persist for GazeEstimator {
    const KIND: &'static str = "estimator";
    type Dims = EstimatorDims;

    fn dims(&self) -> EstimatorDims {
        GazeEstimator::dims(self)
    }

    fn from_dims(dims: EstimatorDims) -> gazeward_core::Result<Self> {
        GazeEstimator::zeros(dims)
    }
}

impl Persist for RewardModel {
    const KIND: &'static str = "reward";
    type Dims = RewardDims;

    fn dims(&self) -> RewardDims {
        self.dims
    }

    fn from_dims(dims: RewardDims) -> gazeward_core::Result<Self> {
        RewardModel::init(0, dims)
    }
}

impl Checkpoint {
    pub fn from_model<M: Persist>(model: &M, provenance: Provenance) -> Self {
        let params = model.params();
        let tensors = model
            .param_names()
            .into_iter()
            .zip(&params)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect();
        let payload = params.iter().flat_map(|t| t.data().iter().copied()).collect();
        Self {
            meta: CheckpointMeta {
                kind: M::KIND.into(),
                dims: serde_json::to_value(model.dims()).expect("dims serialize"),
                tensors,
                config_hash: provenance.config_hash,
                epoch: provenance.epoch,
                seed: provenance.seed,
                context: provenance.context,
            },
            payload,
        }
    }

    /// Rebuilds the model, checking kind, names and shapes against the
    /// architecture implied by the stored dims.
    pub fn to_model<M: Persist>(&self) -> Result<M, String> {
        if self.meta.kind != M::KIND {
            return Err(format!(
                "checkpoint holds a {} model, expected {}",
                self.meta.kind,
                M::KIND
            ));
        }
        let dims: M::Dims = serde_json::from_value(self.meta.dims.clone()).map_err(|e| format!("bad dims: {e}"))?;
        let mut model = M::from_dims(dims).map_err(|e| e.to_string())?;
        let names = model.param_names();
        if names.len() != self.meta.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.meta.tensors.len()
            ));
        }
        let mut offset = 0;
        for ((param, name), entry) in model.params_mut().into_iter().zip(&names).zip(&self.meta.tensors) {
            if &entry.name != name || entry.shape != param.shape() || entry.dtype != "f32" {
                return Err(format!(
                    "tensor {} {:?} {} does not match {} {:?}",
                    entry.name,
                    entry.shape,
                    entry.dtype,
                    name,
                    param.shape()
                ));
            }
            let n = param.numel();
            let values = self.payload.get(offset..offset + n).ok_or("payload too short")?;
            param.data_mut().copy_from_slice(values);
            offset += n;
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err("file shorter than the checkpoint header".into());
        }
        if &bytes[..4] != MAGIC {
            return Err("bad magic, not a checkpoint".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            ));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|n| n.checked_add(HEADER_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or("metadata length exceeds file size")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&bytes[HEADER_LEN..meta_end]).map_err(|e| format!("bad metadata: {e}"))?;
        let body = &bytes[meta_end..];
        let declared: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if body.len() != 4 * declared {
            return Err(format!(
                "payload has {} bytes, metadata declares {}",
                body.len(),
                4 * declared
            ));
        }
        let payload = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { meta, payload })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::decode(&bytes).map_err(|m| AppError::format(path, m))
    }
}

pub fn save_model<M: Persist>(model: &M, provenance: Provenance, path: &Path) -> AppResult<()> {
    Checkpoint::from_model(model, provenance).save(path)
}

pub fn load_model<M: Persist>(path: &Path) -> AppResult<(M, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model::<M>().map_err(|m| AppError::format(path, m))?;
    Ok((model, ckpt.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazeward_core::nets::param_hash;

    fn estimator() -> GazeEstimator {
        GazeEstimator::init(3, EstimatorDims::new(6)).unwrap()
    }

    #[test]
    fn header_layout() {
        let c = Checkpoint::from_model(&estimator(), Provenance::default());
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"OGZC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + meta_len + 4 * c.payload.len());
        let first = f32::from_le_bytes(bytes[16 + meta_len..20 + meta_len].try_into().unwrap());
        assert_eq!(
            first.to_bits(),
            estimator().encoder.layers[0].weight.data()[0].to_bits()
        );
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = estimator();
        let c = Checkpoint::from_model(
            &m,
            Provenance {
                epoch: Some(4),
                ..Default::default()
            },
        );
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let restored: GazeEstimator = back.to_model().unwrap();
        assert_eq!(param_hash(&restored), param_hash(&m));
        let r = RewardModel::init(1, RewardDims::default()).unwrap();
        let restored: RewardModel = Checkpoint::decode(&Checkpoint::from_model(&r, Provenance::default()).encode())
            .unwrap()
            .to_model()
            .unwrap();
        assert_eq!(param_hash(&restored), param_hash(&r));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = Checkpoint::from_model(&estimator(), Provenance::default()).encode();
        bytes[4] = 2;
        assert!(Checkpoint::decode(&bytes).unwrap_err().contains("version 2"));
    }

    proptest::proptest! {
        #[test]
        fn damaged_bytes_never_panic(cut in 0usize..4000, flip in 0usize..4000, bit in 0u8..8) {
            let bytes = Checkpoint::from_model(&estimator(), Provenance::default()).encode();
            let mut damaged = bytes.clone();
            let i = flip % damaged.len();
            damaged[i] ^= 1 << bit;
            if let Ok(c) = Checkpoint::decode(&damaged) {
                let _ = c.to_model::<GazeEstimator>();
            }
            let cut = cut % bytes.len();
            proptest::prop_assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = Checkpoint::from_model(&estimator(), Provenance::default()).encode();
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let c = Checkpoint::from_model(&estimator(), Provenance::default());
        assert!(c.to_model::<RewardModel>().is_err());
    }
}
