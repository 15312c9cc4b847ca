//! On-disk formats.
//!
//! * Dataset: JSON Lines. Line 1 is a [`DatasetHeader`], every further line
//!   one [`Sample`]. Units are part of the field names.
//! * Checkpoint: one JSON document with a format tag and version, a
//!   [`Manifest`] and the model (layer specs plus row-major raw arrays).
//!   Floats are written with round-trip precision, so a reload is bit-exact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use crate::basis::BasisSpec;
use crate::confidence::ConfidenceModel;
use crate::error::{Error, Result};
use crate::gmm::RegularizerWeights;
use crate::net::TrainConfig;
use crate::predictors::{Child, FeatureNormalizer, InputFeatures, PredictorId, VariationalModel};
use crate::simgen::{Sample, ScenarioConfig};

pub const DATASET_FORMAT: &str = "trajmix-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "trajmix-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub scenario: ScenarioConfig,
    pub past_basis: BasisSpec,
    pub future_basis: BasisSpec,
    pub samples: usize,
}

impl DatasetHeader {
    pub fn new(scenario: &ScenarioConfig, samples: usize) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            scenario: scenario.clone(),
            past_basis: BasisSpec::past(),
            future_basis: BasisSpec::future(),
            samples,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn dataset_to_string(header: &DatasetHeader, samples: &[Sample]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[Sample]) -> Result<()> {
    write_text(path, &dataset_to_string(header, samples)?)
}

fn parse_error(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Parses a dataset; errors carry 1-based line numbers.
pub fn parse_dataset(text: &str) -> Result<(DatasetHeader, Vec<Sample>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse_error(1, "missing dataset header"))?;
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| parse_error(1, e))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_error(
            1,
            format!("unsupported dataset format {} v{}", header.format, header.version),
        ));
    }
    let mut samples = Vec::with_capacity(header.samples);
    for (i, l) in lines {
        let s: Sample = serde_json::from_str(l).map_err(|e| parse_error(i + 1, e))?;
        s.features.validate().map_err(|e| parse_error(i + 1, e))?;
        samples.push(s);
    }
    if samples.len() != header.samples {
        return Err(parse_error(
            text.lines().count(),
            format!("header announces {} samples, found {}", header.samples, samples.len()),
        ));
    }
    Ok((header, samples))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    parse_dataset(&read_text(path)?)
}

/// One prediction request per non-empty line: a dataset [`Sample`] or bare
/// [`InputFeatures`]. A dataset header line is skipped.
pub fn parse_inputs(text: &str) -> Result<Vec<(Option<u64>, InputFeatures)>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(l).map_err(|e| parse_error(i + 1, e))?;
        if value.get("format").is_some() {
            continue;
        }
        let (id, x) = if value.get("features").is_some() {
            let s: Sample = serde_json::from_value(value).map_err(|e| parse_error(i + 1, e))?;
            (Some(s.id), s.features)
        } else {
            let x: InputFeatures = serde_json::from_value(value).map_err(|e| parse_error(i + 1, e))?;
            (None, x)
        };
        x.validate().map_err(|e| parse_error(i + 1, e))?;
        out.push((id, x));
    }
    if out.is_empty() {
        return Err(parse_error(1, "no input records"));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Predictor,
    Confidence,
}

/// What a checkpoint contains and how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub children: Vec<Child>,
    pub ablated_child: Option<Child>,
    /// Predictor order of the confidence triples.
    pub registry: Vec<PredictorId>,
    pub components: Option<usize>,
    pub past_basis: BasisSpec,
    pub future_basis: BasisSpec,
    pub normalizer: FeatureNormalizer,
    pub train: TrainConfig,
    pub regularizer: Option<RegularizerWeights>,
    pub dataset_sha256: String,
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// Zero-based epoch whose weights were saved.
    pub selected_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum CheckpointModel {
    Predictor(VariationalModel),
    Confidence(ConfidenceModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub manifest: Manifest,
    pub model: CheckpointModel,
}

impl Checkpoint {
    pub fn new(manifest: Manifest, model: CheckpointModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            manifest,
            model,
        }
    }

    pub fn into_variational(self) -> Result<VariationalModel> {
        match self.model {
            CheckpointModel::Predictor(m) => Ok(m),
            CheckpointModel::Confidence(_) => Err(Error::InvalidConfig(
                "expected a predictor checkpoint, found a confidence checkpoint".into(),
            )),
        }
    }

    pub fn into_confidence(self) -> Result<ConfidenceModel> {
        match self.model {
            CheckpointModel::Confidence(m) => Ok(m),
            CheckpointModel::Predictor(_) => Err(Error::InvalidConfig(
                "expected a confidence checkpoint, found a predictor checkpoint".into(),
            )),
        }
    }
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> Result<String> {
    Ok(serde_json::to_string(ck)? + "\n")
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| parse_error(e.line(), e))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(parse_error(
            1,
            format!("unsupported checkpoint format {} v{}", ck.format, ck.version),
        ));
    }
    Ok(ck)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_text(path, &checkpoint_to_string(ck)?)
}

/// Loads a checkpoint; a missing file is [`Error::MissingCheckpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    parse_checkpoint(&read_text(path)?)
}
