//! Versioned, checksummed binary checkpoints.
//!
//! Layout: magic `SDRC`, format version (u32 LE), a JSON metadata block,
//! named little-endian f64 tensors (model parameters in their canonical
//! order, the fixed posenc projection, optimizer moments), and a trailing
//! SHA-256 over everything before it.

use crate::autodiff::Tensor;
use crate::field::{EncodingMode, ModelDims, SceneModel};
use crate::geometry::{Aabb, RayDepthConvention};
use crate::train::adamw::{AdamW, AdamWConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is not a checkpoint (bad magic)")]
    BadMagic(String),
    #[error("checkpoint format version {found} is incompatible with {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: file is corrupt or truncated")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub mode: EncodingMode,
    pub num_views: usize,
    pub resolution: (u32, u32),
    pub bounds: Aabb,
    pub convention: RayDepthConvention,
    pub background: [f64; 3],
    pub sequence_norm: f64,
    /// Global training step (resume continues from here).
    pub step: u64,
    pub stage: u8,
    /// Hash of the training config this run used.
    pub config_hash: String,
    pub adam: AdamWConfig,
    pub adam_step: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &SceneModel,
    opt: &AdamW,
    step: u64,
    stage: u8,
    config_hash: &str,
) -> Result<(), CheckpointError> {
    let meta = CheckpointMeta {
        dims: model.dims.clone(),
        mode: model.mode,
        num_views: model.num_views(),
        resolution: model.camera_resolution,
        bounds: model.bounds,
        convention: model.convention,
        background: model.background,
        sequence_norm: model.sequence_norm,
        step,
        stage,
        config_hash: config_hash.to_string(),
        adam: opt.config,
        adam_step: opt.step,
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);

    let params = model.params();
    // params + frozen camera 0 + optional posenc projection + moments
    let mut count = params.len() as u32 + 1 + 2 * params.len() as u32;
    if model.posenc_proj.is_some() {
        count += 1;
    }
    buf.extend_from_slice(&count.to_le_bytes());
    push_tensor(&mut buf, "camera.0", &model.camera_g[0]);
    if let Some(p) = &model.posenc_proj {
        push_tensor(&mut buf, "posenc_proj", p);
    }
    for (name, t, _) in &params {
        push_tensor(&mut buf, name, t);
    }
    for (i, (name, _, _)) in params.iter().enumerate() {
        push_tensor(&mut buf, &format!("adam.m.{name}"), &opt.m[i]);
        push_tensor(&mut buf, &format!("adam.v.{name}"), &opt.v[i]);
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub struct LoadedCheckpoint {
    pub model: SceneModel,
    pub optimizer: AdamW,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 44 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(path.display().to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let meta_end = 12 + meta_len;
    if meta_end > body.len() {
        return Err(CheckpointError::Malformed("metadata overruns file".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..meta_end])
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut pos = meta_end;
    let read_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
        if *pos + 4 > body.len() {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        let v = u32::from_le_bytes(body[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let count = read_u32(&mut pos)? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        if pos + 2 > body.len() {
            return Err(CheckpointError::Malformed("truncated name".into()));
        }
        let name_len = u16::from_le_bytes(body[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        let name = String::from_utf8(body[pos..pos + name_len].to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        pos += name_len;
        let ndim = body[pos] as usize;
        pos += 1;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        if pos + 8 * n > body.len() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} overruns file"
            )));
        }
        let data: Vec<f64> = body[pos..pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * n;
        tensors.push((
            name,
            Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?,
        ));
    }

    let find = |name: &str| -> Result<Tensor, CheckpointError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))
    };

    // rebuild the model skeleton, then overwrite every parameter
    let camera_g: Vec<Tensor> = (0..meta.num_views)
        .map(|i| find(&format!("camera.{i}")))
        .collect::<Result<_, _>>()?;
    let mut model = SceneModel::new(
        meta.dims.clone(),
        meta.mode,
        camera_g,
        meta.resolution,
        meta.bounds,
        meta.convention,
        meta.background,
        meta.sequence_norm,
        1.0,
        0,
    );
    if model.posenc_proj.is_some() {
        model.posenc_proj = Some(find("posenc_proj")?);
    }
    {
        let params = model.params_mut();
        for (name, t, _) in params {
            let loaded = find(&name)?;
            if loaded.shape() != t.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
    }
    let shapes: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|(_, t, _)| t.shape().to_vec())
        .collect();
    let mut optimizer = AdamW::new(meta.adam, &shapes);
    optimizer.step = meta.adam_step;
    let names: Vec<String> = model.params().iter().map(|(n, _, _)| n.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        optimizer.m[i] = find(&format!("adam.m.{name}"))?;
        optimizer.v[i] = find(&format!("adam.v.{name}"))?;
    }

    Ok(LoadedCheckpoint {
        model,
        optimizer,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::encode_camera;
    use crate::scenegen::{CameraRig, RigPlacement};
    use nalgebra::Vector3;
    use tempfile::tempdir;

    fn small_model(seed: u64) -> SceneModel {
        let rig = CameraRig {
            count: 3,
            placement: RigPlacement::Ring { radius: 2.0 },
            look_at: Vector3::zeros(),
            fov: (1.0, 1.0),
            resolution: (16, 16),
        };
        let cams = rig.build(0).unwrap();
        let camera_g = cams
            .iter()
            .map(|c| Tensor::new(vec![9], encode_camera(c).0.to_vec()).unwrap())
            .collect();
        SceneModel::new(
            ModelDims {
                grid_size: 4,
                grid_channels: 4,
                embed_dim: 8,
                embed_hidden: 8,
                geo_layers: 8,
                geo_hidden: 8,
                app_feat_dim: 8,
                app_hidden: 8,
                ..ModelDims::default()
            },
            EncodingMode::RaydepthEmbed,
            camera_g,
            (16, 16),
            Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)),
            RayDepthConvention::Distance,
            [0.5; 3],
            2.0,
            0.1,
            seed,
        )
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model(3);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t, _)| t.shape().to_vec()).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &shapes);
        opt.step = 17;
        opt.m[0].data_mut()[0] = 0.25;
        save_checkpoint(&path, &model, &opt, 42, 2, "deadbeef").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.step, 42);
        assert_eq!(loaded.meta.stage, 2);
        assert_eq!(loaded.meta.config_hash, "deadbeef");
        assert_eq!(loaded.optimizer.step, 17);
        assert_eq!(loaded.optimizer.m[0].data()[0], 0.25);
        let a = model.params();
        let b = loaded.model.params();
        assert_eq!(a.len(), b.len());
        for ((n1, t1, _), (n2, t2, _)) in a.iter().zip(&b) {
            assert_eq!(n1, n2);
            assert!(t1
                .data()
                .iter()
                .zip(t2.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // frozen camera and beta also survive
        assert_eq!(model.camera_g[0], loaded.model.camera_g[0]);
        assert_eq!(model.beta_raw, loaded.model.beta_raw);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model(4);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t, _)| t.shape().to_vec()).collect();
        let opt = AdamW::new(AdamWConfig::default(), &shapes);
        save_checkpoint(&path, &model, &opt, 0, 1, "x").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ChecksumMismatch)
        ));
    }

    #[test]
    fn version_bump_is_explicit_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model(5);
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t, _)| t.shape().to_vec()).collect();
        let opt = AdamW::new(AdamWConfig::default(), &shapes);
        save_checkpoint(&path, &model, &opt, 0, 1, "x").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        // keep the checksum consistent so only the version differs
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));
    }
}
