//! Checkpoint directories: `manifest.json` plus one binary blob per section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::garment::GarmentEncoder;
use crate::imageio::sha256_file;
use crate::nn::{ParamSpec, ParamStore};
use crate::sampler::TryOnModel;
use crate::unet::{TryOnUNet, ATTENTION_BLOCKS, CHANNEL_LAYOUT};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const UNET_FILE: &str = "tryon_unet.bin";
pub const ENCODER_FILE: &str = "garment_encoder.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub file: String,
    /// SHA-256 of the blob.
    pub sha256: String,
    /// Hash of names, shapes and values.
    pub param_hash: String,
    pub frozen: bool,
    pub params: Vec<ParamSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub channel_layout: Vec<String>,
    pub attention_blocks: Vec<String>,
    pub tryon_unet: Section,
    pub garment_encoder: Section,
}

fn write_section(dir: &Path, file: &str, store: &ParamStore, frozen: bool) -> Result<Section> {
    let path = dir.join(file);
    let bytes = store.to_bytes();
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(Section {
        file: file.into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        param_hash: store.hash(),
        frozen,
        params: store.specs(),
    })
}

fn read_section(dir: &Path, s: &Section) -> Result<ParamStore> {
    let path = dir.join(&s.file);
    if sha256_file(&path)? != s.sha256 {
        return Err(Error::HashMismatch { path: path.display().to_string() });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let store = ParamStore::from_bytes(&s.params, &bytes)?;
    if store.hash() != s.param_hash {
        return Err(Error::HashMismatch { path: path.display().to_string() });
    }
    Ok(store)
}

pub fn save_checkpoint(dir: &Path, model: &TryOnModel, config: &TrainConfig, step: usize) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        step,
        config: config.clone(),
        channel_layout: CHANNEL_LAYOUT.iter().map(|s| s.to_string()).collect(),
        attention_blocks: ATTENTION_BLOCKS.iter().map(|s| s.to_string()).collect(),
        tryon_unet: write_section(dir, UNET_FILE, model.unet.params(), false)?,
        garment_encoder: write_section(dir, ENCODER_FILE, model.encoder.params(), true)?,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads and verifies a checkpoint into a ready-to-sample model.
pub fn load_checkpoint(dir: &Path) -> Result<(TryOnModel, CheckpointManifest)> {
    let m = read_checkpoint_manifest(dir)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::config("format", format!("unsupported checkpoint format {}", m.format)));
    }
    if m.channel_layout != CHANNEL_LAYOUT || m.attention_blocks != ATTENTION_BLOCKS {
        return Err(Error::config("channel_layout", "checkpoint layout does not match this build"));
    }
    let c = &m.config;
    let unet = TryOnUNet::from_params(c.unet, read_section(dir, &m.tryon_unet)?)?;
    let encoder = GarmentEncoder::from_params(c.garment_encoder, read_section(dir, &m.garment_encoder)?)?;
    let model = TryOnModel {
        codec: c.codec,
        schedule: c.schedule.build()?,
        unet,
        encoder,
        resolution: c.resolution,
    };
    Ok((model, m))
}
