//! Scenes, datasets, synthetic generation, splits and subset tags.

pub mod lexicon;
pub mod scene;
pub mod split;
pub mod synthetic;
pub mod tags;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use scene::{BBox, ImageSize, PatchGrid, RegionProposal, Scene, SceneMeta};
pub use split::{split_dataset, Split, SplitFractions};
pub use synthetic::{generate_samples, generate_synthetic_scene, GenParams};
pub use tags::{tag_sample, tag_subsets, SubsetTag};

use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

mod command_text {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Text {
        text: String,
    }

    pub fn serialize<S: Serializer>(s: &str, ser: S) -> Result<S::Ok, S::Error> {
        Text { text: s.to_string() }.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
        Ok(Text::deserialize(de)?.text)
    }
}

/// One grounding example: scene, raw command text and the target region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(flatten)]
    pub scene: Scene,
    #[serde(with = "command_text")]
    pub command: String,
    pub target_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Sample {
    /// Whitespace-delimited word count of the raw command.
    pub fn word_count(&self) -> usize {
        self.command.split_whitespace().count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic { seed: u64, params: GenParams },
    File { source_digest: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub provenance: Provenance,
    #[serde(rename = "scenes")]
    pub samples: Vec<Sample>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    pub fn synthetic(seed: u64, count: usize, params: &GenParams) -> Result<Self> {
        if count == 0 {
            return Err(Error::Validation("scene count must be positive".into()));
        }
        Ok(Dataset {
            version: DATASET_VERSION,
            provenance: Provenance::Synthetic {
                seed,
                params: params.clone(),
            },
            samples: generate_samples(seed, count, params)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().expect("dataset serializes").as_bytes())
    }

    /// Digest over an arbitrary subset of samples (e.g. the test split).
    pub fn subset_digest(samples: &[&Sample]) -> String {
        let json = serde_json::to_string(samples).expect("samples serialize");
        sha256_hex(json.as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_json(&text)
    }

    /// Parses and validates a dataset document; errors carry the scene index and field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::schema("$", e.to_string()))?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::schema("$", "document must be an object"))?;
        let version = obj
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::schema("version", "missing or not an integer"))?;
        if version != u64::from(DATASET_VERSION) {
            return Err(Error::schema(
                "version",
                format!("unsupported version {version}, expected {DATASET_VERSION}"),
            ));
        }
        let provenance: Provenance = serde_json::from_value(
            obj.get("provenance")
                .cloned()
                .ok_or_else(|| Error::schema("provenance", "missing"))?,
        )
        .map_err(|e| Error::schema("provenance", e.to_string()))?;
        let scenes = obj
            .get("scenes")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::schema("scenes", "missing or not an array"))?;
        let mut samples = Vec::with_capacity(scenes.len());
        for (i, v) in scenes.iter().enumerate() {
            let s: Sample = serde_json::from_value(v.clone())
                .map_err(|e| Error::schema(format!("scenes[{i}]"), e.to_string()))?;
            samples.push(s);
        }
        let ds = Dataset {
            version: DATASET_VERSION,
            provenance,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::schema("scenes", "dataset has no scenes"));
        }
        let mut ids = HashSet::new();
        let first = &self.samples[0].scene;
        let dim = first.regions.first().map_or(0, |r| r.features.len());
        let (p, width) = (first.patch_grid.p, first.patch_grid.width);
        let synthetic = matches!(self.provenance, Provenance::Synthetic { .. });
        for (i, s) in self.samples.iter().enumerate() {
            let path = format!("scenes[{i}]");
            s.scene.validate(&path)?;
            if !ids.insert(s.scene.id.as_str()) {
                return Err(Error::schema(format!("{path}.id"), format!("duplicate id {}", s.scene.id)));
            }
            if s.command.trim().is_empty() {
                return Err(Error::schema(format!("{path}.command.text"), "empty command"));
            }
            if s.target_index >= s.scene.regions.len() {
                return Err(Error::schema(
                    format!("{path}.target_index"),
                    format!("{} out of range for {} regions", s.target_index, s.scene.regions.len()),
                ));
            }
            if synthetic && s.scene.ground_truth_box != s.scene.regions[s.target_index].bbox {
                return Err(Error::schema(
                    format!("{path}.gt_box"),
                    "synthetic ground truth must equal the target region's box",
                ));
            }
            if s.scene.regions[0].features.len() != dim {
                return Err(Error::schema(
                    format!("{path}.regions[0].features"),
                    format!("feature dimension {} differs from scene 0 ({dim})", s.scene.regions[0].features.len()),
                ));
            }
            if s.scene.patch_grid.p != p || s.scene.patch_grid.width != width {
                return Err(Error::schema(
                    format!("{path}.patch_grid"),
                    format!("grid P={} width={} differs from scene 0 (P={p} width={width})",
                        s.scene.patch_grid.p, s.scene.patch_grid.width),
                ));
            }
        }
        Ok(())
    }

    pub fn region_dim(&self) -> usize {
        self.samples
            .first()
            .and_then(|s| s.scene.regions.first())
            .map_or(0, |r| r.features.len())
    }

    /// Samples carrying `split`; unlabelled samples count as training data.
    pub fn samples_in(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.split.unwrap_or(Split::Train) == split)
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.scene.id == id)
    }
}
