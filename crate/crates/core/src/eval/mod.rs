//! Metrics, subset-wise reports and attention inspection.

pub mod inspect;
pub mod metrics;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{tag_sample, Dataset, Sample, SubsetTag};
use crate::encoders::EmotionClassifier;
use crate::error::{Error, Result};
use crate::model::Model;

pub use inspect::{dump_layer_attention, AttentionDump};
pub use metrics::{ap50, iou, is_hit};

/// Outcome of grounding one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene_id: String,
    pub selected_region: usize,
    pub iou: f64,
    pub hit: bool,
    pub tags: Vec<SubsetTag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetCell {
    pub subset: SubsetTag,
    pub column: String,
    pub count: usize,
    /// `None` when no evaluated scene carries the tag.
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub checkpoint_digest: String,
    pub dataset_digest: String,
    /// Kept out of the canonical serialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subset_filter: Option<SubsetTag>,
    pub count: usize,
    pub overall_ap50: Option<f64>,
    pub mean_iou: Option<f64>,
    pub per_subset: Vec<SubsetCell>,
    pub run_meta: RunMeta,
}

impl MetricsReport {
    /// JSON without the wall-clock field; identical inputs give identical bytes.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.run_meta.wall_clock_secs = None;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.canonical_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema("report", e.to_string()))
    }

    pub fn cell(&self, tag: SubsetTag) -> Option<&SubsetCell> {
        self.per_subset.iter().find(|c| c.subset == tag)
    }

    /// Fixed-width table with one column per subset; absent cells print as `-`.
    pub fn table(&self) -> String {
        let mut header = format!("{:<10}", "Overall");
        let mut values = format!("{:<10}", fmt_cell(self.overall_ap50));
        let mut counts = format!("{:<10}", self.count);
        for c in &self.per_subset {
            let w = c.column.len().max(8) + 2;
            header += &format!("{:<w$}", c.column);
            values += &format!("{:<w$}", fmt_cell(c.ap50));
            counts += &format!("{:<w$}", c.count);
        }
        format!("{}\n{}\n{}\n", header.trim_end(), values.trim_end(), counts.trim_end())
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Grounds every sample (in parallel) and scores the argmax box against the ground truth.
pub fn score_samples(
    model: &Model,
    samples: &[&Sample],
    classifier: &dyn EmotionClassifier,
) -> Result<Vec<SceneOutcome>> {
    samples
        .par_iter()
        .map(|s| {
            let input = model.prepare(s, classifier)?;
            let p = model.predict_prepared(&input, 1)?;
            let v = iou(&p.selected_box, &s.scene.ground_truth_box)?;
            Ok(SceneOutcome {
                scene_id: s.scene.id.clone(),
                selected_region: p.selected_region,
                iou: v,
                hit: is_hit(v),
                tags: tag_sample(s),
            })
        })
        .collect()
}

/// Aggregates outcomes in input order.
pub fn build_report(
    outcomes: &[SceneOutcome],
    filter: Option<SubsetTag>,
    checkpoint_digest: &str,
    dataset_digest: &str,
) -> MetricsReport {
    let kept: Vec<&SceneOutcome> = outcomes
        .iter()
        .filter(|o| filter.map_or(true, |t| o.tags.contains(&t)))
        .collect();
    let rate = |xs: &[&SceneOutcome]| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().filter(|o| o.hit).count() as f64 / xs.len() as f64)
        }
    };
    let mean_iou = if kept.is_empty() {
        None
    } else {
        Some(kept.iter().map(|o| o.iou).sum::<f64>() / kept.len() as f64)
    };
    let per_subset = SubsetTag::ALL
        .iter()
        .map(|&tag| {
            let xs: Vec<&SceneOutcome> = kept.iter().copied().filter(|o| o.tags.contains(&tag)).collect();
            SubsetCell {
                subset: tag,
                column: tag.column().to_string(),
                count: xs.len(),
                ap50: rate(&xs),
            }
        })
        .collect();
    MetricsReport {
        subset_filter: filter,
        count: kept.len(),
        overall_ap50: rate(&kept),
        mean_iou,
        per_subset,
        run_meta: RunMeta {
            checkpoint_digest: checkpoint_digest.to_string(),
            dataset_digest: dataset_digest.to_string(),
            wall_clock_secs: None,
        },
    }
}

/// Scores `samples` and reports overall and per-subset ap50. An empty filtered
/// set yields absent cells rather than zeros.
pub fn evaluate(
    model: &Model,
    samples: &[&Sample],
    filter: Option<SubsetTag>,
    classifier: &dyn EmotionClassifier,
    checkpoint_digest: &str,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let outcomes = score_samples(model, samples, classifier)?;
    let mut report = build_report(&outcomes, filter, checkpoint_digest, &Dataset::subset_digest(samples));
    report.run_meta.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    Ok(report)
}
