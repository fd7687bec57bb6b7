//! Attention dumps: RSD layer weights, cross-modal head maps and the
//! per-layer summary for regions that do / do not overlap the ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::iou;
use crate::data::BBox;
use crate::encoders::emotion::EmotionCategory;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedInput};
use crate::params::Binder;
use crate::tensor::Tensor;

pub const GROUP_OVERLAP: &str = "iou>0";
pub const GROUP_DISJOINT: &str = "iou=0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMap {
    pub head: usize,
    pub query_labels: Vec<String>,
    pub key_labels: Vec<String>,
    /// Row-major `[queries × keys]`.
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub regions: Vec<usize>,
    /// Mean RSD weight per layer; absent when the group is empty.
    pub mean_weight: Vec<Option<f64>>,
}

/// One row of the plot-ready table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub layer_index: usize,
    pub group: String,
    pub mean_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub scene_id: String,
    pub command: String,
    pub emotion: EmotionCategory,
    pub tokens: Vec<String>,
    pub region_ids: Vec<usize>,
    pub layers: Vec<usize>,
    /// `[N × (m + 1)]`
    pub rsd: Vec<Vec<f64>>,
    pub cross_modal: Vec<HeadMap>,
    /// Context rows pooled onto each key row.
    pub alignment: Vec<Vec<f64>>,
    pub credibility: Vec<f64>,
    pub selected_region: usize,
    pub region_iou: Vec<f64>,
    pub groups: Vec<GroupSummary>,
    pub plot_table: Vec<PlotRow>,
}

impl AttentionDump {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json();
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Tab-separated `layer_index  group  mean_weight`, one line per plot row.
    pub fn plot_tsv(&self) -> String {
        let mut out = String::from("layer_index\tgroup\tmean_weight\n");
        for r in &self.plot_table {
            let w = r.mean_weight.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            out += &format!("{}\t{}\t{}\n", r.layer_index, r.group, w);
        }
        out
    }

    /// Every RSD, head and alignment row, for normalization checks.
    pub fn probability_rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.rsd
            .iter()
            .chain(self.cross_modal.iter().flat_map(|h| h.probs.iter()))
            .chain(self.alignment.iter())
    }
}

fn group_summary(name: &str, regions: Vec<usize>, rsd: &Tensor) -> GroupSummary {
    let mean_weight = (0..rsd.cols())
        .map(|l| {
            if regions.is_empty() {
                None
            } else {
                Some(regions.iter().map(|&i| rsd.get(i, l)).sum::<f64>() / regions.len() as f64)
            }
        })
        .collect();
    GroupSummary {
        group: name.to_string(),
        regions,
        mean_weight,
    }
}

/// Runs one forward pass and records its attention distributions. Regions are
/// grouped by whether they overlap `ground_truth` at all.
pub fn dump_layer_attention(model: &Model, input: &PreparedInput, ground_truth: &BBox) -> Result<AttentionDump> {
    let mut b = Binder::new(&model.params, false);
    let trace = model.forward(&mut b, input)?;
    let g = &b.graph;
    let rsd = g.value(trace.decoder.rsd_weights).clone();
    let logits = g.value(trace.decoder.logits).data().to_vec();
    let prediction = crate::decoder::Prediction::from_logits(
        &input.scene_id,
        &input.command.raw_text,
        &logits,
        &input.boxes,
        1,
    )?;

    let n = input.n_regions();
    let region_labels: Vec<String> = (0..n).map(|i| format!("region{i}")).collect();
    let mut text_labels = vec!["[emotion]".to_string()];
    text_labels.extend(input.command.words.iter().cloned());
    let (query_labels, key_labels) = if model.config.qk_swap {
        (text_labels, region_labels)
    } else {
        (region_labels, text_labels)
    };
    let cross_modal = trace
        .cross
        .attention_maps
        .iter()
        .enumerate()
        .map(|(head, &m)| HeadMap {
            head,
            query_labels: query_labels.clone(),
            key_labels: key_labels.clone(),
            probs: g.value(m).to_rows(),
        })
        .collect();

    let region_iou = input
        .boxes
        .iter()
        .map(|bx| iou(bx, ground_truth))
        .collect::<Result<Vec<_>>>()?;
    let (overlap, disjoint): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| region_iou[i] > 0.0);
    let groups = vec![
        group_summary(GROUP_OVERLAP, overlap, &rsd),
        group_summary(GROUP_DISJOINT, disjoint, &rsd),
    ];
    let layers: Vec<usize> = (0..rsd.cols()).collect();
    let plot_table = groups
        .iter()
        .flat_map(|gs| {
            layers.iter().map(move |&l| PlotRow {
                layer_index: l,
                group: gs.group.clone(),
                mean_weight: gs.mean_weight[l],
            })
        })
        .collect();

    Ok(AttentionDump {
        scene_id: input.scene_id.clone(),
        command: input.command.raw_text.clone(),
        emotion: input.command.emotion,
        tokens: input.command.words.clone(),
        region_ids: (0..n).collect(),
        layers,
        rsd: rsd.to_rows(),
        cross_modal,
        alignment: g.value(trace.cross.alignment).to_rows(),
        credibility: prediction.credibility,
        selected_region: prediction.selected_region,
        region_iou,
        groups,
        plot_table,
    })
}
