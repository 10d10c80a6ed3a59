//! Run configuration and the on-disk volume format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_SPACING;
use crate::model::ModelConfig;
use crate::synthgen::SceneSpec;
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "BRIGHTSTACK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub n_volumes: usize,
    pub train_fraction: f64,
    /// Read volumes written by `generate` instead of synthesising them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::paper();
        Self {
            data: DataConfig {
                scene: SceneSpec::blobs(model.input_dhw, 0),
                n_volumes: 10,
                train_fraction: 0.8,
                dir: None,
            },
            model,
            train: TrainConfig { steps: 500, batch_size: 1, lr: 1e-3, seed: 0 },
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        Self {
            data: DataConfig {
                scene: SceneSpec::blobs(model.input_dhw, 0),
                n_volumes: 10,
                train_fraction: 0.8,
                dir: None,
            },
            model,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        if self.data.scene.shape != self.model.input_dhw {
            return Err(Error::Config(format!(
                "scene shape {:?} differs from model input {:?}",
                self.data.scene.shape, self.model.input_dhw
            )));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("batch_size must be >= 1 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Reads a config and applies the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.train.seed = v
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub schema_version: u32,
    pub dtype: String,
    /// `(C, D, H, W)`.
    pub shape: [usize; 4],
    pub spacing_um: [f64; 3],
    pub kind: VolumeKind,
    /// Voxels removed from the end of each spatial axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cropped: Option<[usize; 3]>,
}

/// Raw little-endian `f32` data at `<stem>.f32` with a JSON sidecar at
/// `<stem>.json`.
pub struct VolumeFile;

impl VolumeFile {
    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("f32"), stem.with_extension("json"))
    }

    pub fn write(stem: &Path, data: &Tensor, kind: VolumeKind, cropped: Option<[usize; 3]>) -> Result<()> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::shape("VolumeFile::write", format!("expected (C,D,H,W), got {s:?}")));
        }
        let meta = VolumeMeta {
            schema_version: 1,
            dtype: "f32le".into(),
            shape: [s[0], s[1], s[2], s[3]],
            spacing_um: DEFAULT_SPACING,
            kind,
            cropped,
        };
        let (raw, side) = Self::paths(stem);
        let bytes: Vec<u8> = data.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
        std::fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn read(stem: &Path) -> Result<(Tensor, VolumeMeta)> {
        let (raw, side) = Self::paths(stem);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: VolumeMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.dtype != "f32le" {
            return Err(Error::format(&side, format!("unsupported dtype {:?}", meta.dtype)));
        }
        let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
        let n: usize = meta.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::format(
                &raw,
                format!("{} bytes, expected {} for shape {:?}", bytes.len(), 4 * n, meta.shape),
            ));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if meta.kind == VolumeKind::Mask && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(&raw, "mask contains values other than 0 and 1"));
        }
        Ok((Tensor::new(meta.shape.to_vec(), data)?, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_is_byte_identical() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            let a = cfg.to_json().unwrap();
            let b = RunConfig::from_json(&a).unwrap().to_json().unwrap();
            assert_eq!(a, b);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn defaults_follow_reference_configuration() {
        let m = RunConfig::default().model;
        assert_eq!((m.patch.p_z, m.patch.p_y, m.patch.p_x, m.patch.hidden), (2, 16, 16, 512));
        assert_eq!((m.layers, m.attention.heads, m.moe.n_experts, m.moe.expansion), (12, 8, 72, 8));
        assert_eq!((m.dhc.streams, m.dhc.dropout, m.decoder.base_features), (2, 0.1, 64));
    }

    #[test]
    fn volume_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        let t = Tensor::new(vec![1, 2, 2, 2], vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        VolumeFile::write(&stem, &t, VolumeKind::Mask, Some([1, 0, 0])).unwrap();
        let (r, meta) = VolumeFile::read(&stem).unwrap();
        assert_eq!(r, t);
        assert_eq!(meta.cropped, Some([1, 0, 0]));
        std::fs::write(stem.with_extension("f32"), [0u8; 5]).unwrap();
        assert!(matches!(VolumeFile::read(&stem), Err(Error::Format { .. })));
        let bad = Tensor::full(&[1, 1, 1, 2], 0.5);
        VolumeFile::write(&stem, &bad, VolumeKind::Mask, None).unwrap();
        assert!(VolumeFile::read(&stem).unwrap_err().to_string().contains("mask"));
    }
}
