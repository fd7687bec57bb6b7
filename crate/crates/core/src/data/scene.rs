use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box, upper-left `(x1, y1)` to lower-right `(x2, y2)`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.x1, self.y1, self.x2, self.y2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("box {self:?} has non-finite coordinates")));
        }
        if !(self.x1 < self.x2) {
            return Err(Error::Validation(format!(
                "box x1 = {} must be < x2 = {}",
                self.x1, self.x2
            )));
        }
        if !(self.y1 < self.y2) {
            return Err(Error::Validation(format!(
                "box y1 = {} must be < y2 = {}",
                self.y1, self.y2
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<Vec<f64>> for BBox {
    type Error = String;

    fn try_from(v: Vec<f64>) -> std::result::Result<Self, String> {
        match v.as_slice() {
            &[x1, y1, x2, y2] => Ok(BBox { x1, y1, x2, y2 }),
            _ => Err(format!("box needs 4 coordinates, found {}", v.len())),
        }
    }
}

impl From<BBox> for Vec<f64> {
    fn from(b: BBox) -> Self {
        b.to_array().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub features: Vec<f64>,
}

/// P×P grid of patch feature vectors, rows in raster order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    #[serde(rename = "P")]
    pub p: usize,
    pub width: usize,
    pub rows: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.rows)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub low_light: bool,
    pub agent_count: u32,
    pub ambiguous: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageSize>,
    pub patch_grid: PatchGrid,
    pub regions: Vec<RegionProposal>,
    #[serde(rename = "gt_box")]
    pub ground_truth_box: BBox,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn region_boxes(&self) -> Vec<BBox> {
        self.regions.iter().map(|r| r.bbox).collect()
    }

    /// Checks scene invariants; `path` prefixes error locations.
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::schema(format!("{path}.regions"), "scene needs at least one region"));
        }
        self.ground_truth_box
            .validate()
            .map_err(|e| Error::schema(format!("{path}.gt_box"), e.to_string()))?;
        for (i, r) in self.regions.iter().enumerate() {
            r.bbox
                .validate()
                .map_err(|e| Error::schema(format!("{path}.regions[{i}].box"), e.to_string()))?;
            if let Some(img) = self.image {
                if !r.bbox.within(img.width, img.height) {
                    return Err(Error::schema(
                        format!("{path}.regions[{i}].box"),
                        format!("box {:?} outside image {}×{}", r.bbox.to_array(), img.width, img.height),
                    ));
                }
            }
            if r.features.is_empty() {
                return Err(Error::schema(
                    format!("{path}.regions[{i}].features"),
                    "empty feature vector",
                ));
            }
            if let Some(j) = r.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::schema(
                    format!("{path}.regions[{i}].features[{j}]"),
                    "non-finite feature value",
                ));
            }
        }
        let dim = self.regions[0].features.len();
        if let Some(i) = self.regions.iter().position(|r| r.features.len() != dim) {
            return Err(Error::schema(
                format!("{path}.regions[{i}].features"),
                format!("length {} differs from region 0 ({dim})", self.regions[i].features.len()),
            ));
        }
        let g = &self.patch_grid;
        if g.p == 0 || g.width == 0 {
            return Err(Error::schema(format!("{path}.patch_grid"), "P and width must be positive"));
        }
        if g.rows.len() != g.p * g.p {
            return Err(Error::schema(
                format!("{path}.patch_grid.rows"),
                format!("expected {} rows for P = {}, found {}", g.p * g.p, g.p, g.rows.len()),
            ));
        }
        for (i, row) in g.rows.iter().enumerate() {
            if row.len() != g.width {
                return Err(Error::schema(
                    format!("{path}.patch_grid.rows[{i}]"),
                    format!("width {} expected, found {}", g.width, row.len()),
                ));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(format!("{path}.patch_grid.rows[{i}]"), "non-finite value"));
            }
        }
        Ok(())
    }
}
