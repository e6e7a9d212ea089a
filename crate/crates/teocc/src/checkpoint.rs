//! Checkpoints: `checkpoint.json` plus one f64 TEOC blob per parameter.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use teocc_core::model::{Model, TE_GROUPS};
use teocc_core::scenesim::CameraModel;
use teocc_core::Tensor;

use crate::blob::{read_blob, write_blob, Blob, BlobData};
use crate::config::TrainConfig;
use crate::error::{io_err, parse_err, Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FORMAT: &str = "teocc-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream: key, stream id and word offset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &teocc_core::Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{:02x}", b)).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<teocc_core::Rng, String> {
        if self.seed.len() != 64 {
            return Err(format!("seed needs 64 hex digits, found {}", self.seed.len()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        let mut rng = teocc_core::Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|e| e.to_string())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: TrainConfig,
    num_classes: usize,
    step: usize,
    rng: RngState,
    cameras: Vec<CameraModel>,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub group: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub step: usize,
    pub rng: RngState,
    pub cameras: Vec<CameraModel>,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, model: &Model, step: usize, rng: &teocc_core::Rng, cameras: &[CameraModel]) -> Self {
        Self {
            config: config.clone(),
            num_classes: model.config.num_classes,
            step,
            rng: RngState::capture(rng),
            cameras: cameras.to_vec(),
            params: model
                .store
                .iter()
                .map(|(_, p)| NamedParam { name: p.name.clone(), group: p.group.clone(), value: p.value.clone() })
                .collect(),
        }
    }

    /// Drops every temporal-enhancement parameter.
    pub fn without_te(&self) -> Self {
        Self { params: self.params.iter().filter(|p| !TE_GROUPS.contains(&p.group.as_str())).cloned().collect(), ..self.clone() }
    }

    /// Writes into `dir` and returns the path of the JSON file.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let pdir = dir.join("params");
        std::fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("params/{:04}.teoc", i);
            let path = dir.join(&file);
            let blob = Blob::new(p.value.shape().to_vec(), BlobData::F64(p.value.data().to_vec())).map_err(|d| parse_err(&path, "dims", d))?;
            write_blob(&path, &blob)?;
            entries.push(ParamEntry { name: p.name.clone(), group: p.group.clone(), shape: p.value.shape().to_vec(), file });
        }
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            num_classes: self.num_classes,
            step: self.step,
            rng: self.rng.clone(),
            cameras: self.cameras.clone(),
            params: entries,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let text = serde_json::to_string_pretty(&file).map_err(|e| parse_err(&path, "checkpoint", e))?;
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Accepts the JSON file or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        let dir = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(&path, "checkpoint", e))?;
        if value.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(parse_err(&path, "format", format!("expected \"{}\"", FORMAT)));
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            _ => return Err(Error::UnsupportedVersion { path, version: value.get("version").map_or("missing".into(), |v| v.to_string()) }),
        }
        let file: CheckpointFile = serde_json::from_value(value).map_err(|e| parse_err(&path, "checkpoint", e))?;
        file.rng.restore().map_err(|e| parse_err(&path, "rng", e))?;
        let mut params = Vec::with_capacity(file.params.len());
        for e in file.params {
            let bpath = dir.join(&e.file);
            let (dims, data) = read_blob(&bpath)?.into_f64(&bpath)?;
            if dims != e.shape {
                return Err(parse_err(&bpath, "dims", format!("{:?}, manifest says {:?}", dims, e.shape)));
            }
            let value = Tensor::from_vec(&dims, data)?;
            params.push(NamedParam { name: e.name, group: e.group, value });
        }
        Ok(Self { config: file.config, num_classes: file.num_classes, step: file.step, rng: file.rng, cameras: file.cameras, params })
    }

    fn load_into(&self, config: teocc_core::model::ModelConfig) -> Result<Model> {
        let mut model = Model::new(config, self.config.seed)?;
        let wanted: std::collections::HashSet<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        model.load_values(self.params.iter().filter(|p| wanted.contains(&p.name)).map(|p| (p.name.as_str(), p.value.clone())))?;
        Ok(model)
    }

    /// The trained model with every branch the config enables.
    pub fn model(&self) -> Result<Model> {
        self.load_into(self.config.model_config(self.num_classes)?)
    }

    /// Main branch only. Works whether or not the checkpoint still holds
    /// temporal-enhancement parameters.
    pub fn inference_model(&self) -> Result<Model> {
        let mut cfg = self.config.model_config(self.num_classes)?;
        cfg.use_long = false;
        cfg.use_short = false;
        cfg.fused_decoders = false;
        self.load_into(cfg)
    }
}
