//! Versioned weight archive (`.weights`) with a JSON metadata sidecar
//! (`.json`).
//!
//! Archive layout, little endian:
//! `b"SANETWTS"`, `u32` version, `u32` tensor count, then per tensor a
//! `u16`-prefixed UTF-8 name, `u8` rank, `u32` dims, and `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Model, NetworkConfig, SaNet, SegmentationNet};
use crate::engine::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SANETWTS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub ema_val_loss: Option<f64>,
    pub seed: u64,
    pub parameter_count: usize,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn weights_path(stem: &Path) -> PathBuf {
    with_ext(stem, "weights")
}

pub fn meta_path(stem: &Path) -> PathBuf {
    with_ext(stem, "json")
}

/// Strips a `.weights` or `.json` suffix so either file names the checkpoint.
pub fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("weights") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub fn save(stem: &Path, params: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(weights_path(stem))?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (spec, values) in params.specs().iter().zip(params.values()) {
        let name = spec.name.as_bytes();
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name)?;
        w.write_u8(spec.shape.len() as u8)?;
        for &d in &spec.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in values {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    std::fs::write(meta_path(stem), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_meta(stem: &Path) -> Result<CheckpointMeta> {
    let path = meta_path(stem);
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingFile {
        path: path.clone(),
        what: "checkpoint metadata".into(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Reads weights and checks them against the layout of `net`.
pub fn load_params<N: SegmentationNet>(stem: &Path, net: &N) -> Result<ParamStore<f32>> {
    let path = weights_path(stem);
    let file = File::open(&path).map_err(|_| Error::MissingFile {
        path: path.clone(),
        what: "checkpoint weights".into(),
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a weight archive", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let specs = net.param_specs();
    if count != specs.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {count} tensors, network expects {}",
            specs.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for spec in specs {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let rank = r.read_u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        if name != spec.name.as_bytes() || shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                String::from_utf8_lossy(&name),
                shape,
                spec.name,
                spec.shape
            )));
        }
        let mut v = vec![0f32; spec.numel()];
        r.read_f32_into::<LittleEndian>(&mut v)?;
        values.push(v);
    }
    ParamStore::from_values(specs, values)
}

/// Loads a scale-attention model and its metadata.
pub fn load_model(stem: &Path) -> Result<(Model<SaNet>, CheckpointMeta)> {
    let stem = checkpoint_stem(stem);
    let meta = load_meta(&stem)?;
    let net = SaNet::new(meta.config.clone())?;
    let params = load_params(&stem, &net)?;
    Ok((Model::new(net, params)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let config = NetworkConfig {
            base_width: 4,
            num_scales: 3,
            patch_size: 8,
            ..Default::default()
        };
        let model = Model::<SaNet>::init(SaNet::new(config.clone()).unwrap(), 11);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt/best_val");
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            config,
            epoch: 3,
            val_loss: Some(0.5),
            ema_val_loss: None,
            seed: 11,
            parameter_count: model.net.parameter_count(),
        };
        save(&stem, &model.params, &meta).unwrap();
        let (loaded, meta2) = load_model(&weights_path(&stem)).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.params, model.params);
    }

    #[test]
    fn rejects_mismatched_layout() {
        let small = NetworkConfig { base_width: 4, num_scales: 3, patch_size: 8, ..Default::default() };
        let other = NetworkConfig { base_width: 8, ..small.clone() };
        let model = Model::<SaNet>::init(SaNet::new(small.clone()).unwrap(), 1);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            config: small,
            epoch: 0,
            val_loss: None,
            ema_val_loss: None,
            seed: 1,
            parameter_count: 0,
        };
        save(&stem, &model.params, &meta).unwrap();
        let net = SaNet::new(other).unwrap();
        assert!(matches!(load_params(&stem, &net), Err(Error::Checkpoint(_))));
    }
}
