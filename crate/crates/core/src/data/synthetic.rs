//! Synthetic grounding scenes with a planted command → region correspondence.
//!
//! Every region gets a distinct (color, kind, zone) tuple, so the command,
//! which names the target's full tuple, matches exactly one region. Region
//! features carry the attribute one-hots plus box geometry under Gaussian
//! noise; patch features carry brightness, occupancy and color coverage.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lexicon::{
    zone_phrase, AGENT_KINDS, COLORS, COMMANDING_TEMPLATES, COMMAND_TEMPLATES,
    INFORMATIVE_TEMPLATES, KINDS, LONG_TEXT_FILLER, URGENT_TEMPLATES,
};
use super::scene::{BBox, ImageSize, PatchGrid, RegionProposal, Scene, SceneMeta};
use super::Sample;
use crate::error::{Error, Result};
use crate::eval::metrics::iou;
use crate::rng::SeedTree;

/// Region feature layout.
pub const COLOR_OFFSET: usize = 0;
pub const KIND_OFFSET: usize = COLOR_OFFSET + COLORS.len();
pub const ZONE_OFFSET: usize = KIND_OFFSET + KINDS.len();
pub const GEOM_OFFSET: usize = ZONE_OFFSET + 3;
pub const MIN_REGION_DIM: usize = GEOM_OFFSET + 4;

/// Patch feature layout: brightness, occupancy, then per-color coverage.
pub const MIN_PATCH_DIM: usize = 2 + COLORS.len();

pub const LOW_LIGHT_THRESHOLD: f64 = 0.3;
pub const MULTI_AGENT_THRESHOLD: u32 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_regions: usize,
    pub n_colors: usize,
    pub n_kinds: usize,
    pub n_zones: usize,
    pub grid: usize,
    pub patch_size: usize,
    pub patch_width: usize,
    pub d_vision: usize,
    pub noise: f64,
    /// Probability that one distractor is placed overlapping the target
    /// (IoU in [0.2, 0.45], still below the positive-label threshold).
    pub overlap_rate: f64,
    pub emotion_templates: bool,
    pub long_text_rate: f64,
    /// Upper bound on pairwise IoU between ordinary regions.
    pub max_pair_iou: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n_regions: 8,
            n_colors: 3,
            n_kinds: 3,
            n_zones: 3,
            grid: 4,
            patch_size: 16,
            patch_width: 16,
            d_vision: 64,
            noise: 0.1,
            overlap_rate: 0.0,
            emotion_templates: false,
            long_text_rate: 0.0,
            max_pair_iou: 0.2,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 {
            return Err(Error::Generation("n_regions must be positive".into()));
        }
        if self.n_colors == 0 || self.n_colors > COLORS.len() {
            return Err(Error::Generation(format!("n_colors must be in 1..={}", COLORS.len())));
        }
        if self.n_kinds == 0 || self.n_kinds > KINDS.len() {
            return Err(Error::Generation(format!("n_kinds must be in 1..={}", KINDS.len())));
        }
        if self.n_zones == 0 || self.n_zones > 3 {
            return Err(Error::Generation("n_zones must be in 1..=3".into()));
        }
        let tuples = self.n_colors * self.n_kinds * self.n_zones;
        if tuples < self.n_regions {
            return Err(Error::Generation(format!(
                "attribute alphabet {}×{}×{} = {tuples} tuples cannot give {} regions distinct descriptions",
                self.n_colors, self.n_kinds, self.n_zones, self.n_regions
            )));
        }
        if self.d_vision < MIN_REGION_DIM {
            return Err(Error::Generation(format!("d_vision must be at least {MIN_REGION_DIM}")));
        }
        if self.patch_width < MIN_PATCH_DIM {
            return Err(Error::Generation(format!("patch_width must be at least {MIN_PATCH_DIM}")));
        }
        if self.grid == 0 || self.patch_size == 0 {
            return Err(Error::Generation("grid and patch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn image_side(&self) -> f64 {
        (self.grid * self.patch_size) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attributes {
    pub color: usize,
    pub kind: usize,
    pub zone: usize,
}

impl Attributes {
    pub fn describe(&self) -> String {
        format!("{} {} {}", COLORS[self.color], KINDS[self.kind], zone_phrase(self.zone))
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn render_command(rng: &mut ChaCha8Rng, target: Attributes, params: &GenParams) -> String {
    let description = target.describe();
    let imperative = COMMAND_TEMPLATES
        .choose(rng)
        .expect("templates")
        .replace("{t}", &description);
    let long = params.long_text_rate > 0.0 && rng.gen_bool(params.long_text_rate.min(1.0));
    let imperative = if long {
        format!("{imperative} {LONG_TEXT_FILLER}")
    } else {
        imperative
    };
    let fill = |tpl: &str| {
        tpl.replace("{C}", &capitalize(&imperative))
            .replace("{c}", &imperative)
    };
    if !params.emotion_templates {
        return format!("{}.", capitalize(&imperative));
    }
    match rng.gen_range(0..3) {
        0 => fill(URGENT_TEMPLATES.choose(rng).expect("templates")),
        1 => fill(COMMANDING_TEMPLATES.choose(rng).expect("templates")),
        _ => {
            let tpl = INFORMATIVE_TEMPLATES.choose(rng).expect("templates");
            let t = if long {
                format!("{description} {LONG_TEXT_FILLER}")
            } else {
                description
            };
            tpl.replace("{t}", &t)
        }
    }
}

fn sample_box(rng: &mut ChaCha8Rng, zone: usize, params: &GenParams) -> BBox {
    let side = params.image_side();
    let col_w = side / params.n_zones as f64;
    let w = rng.gen_range(0.35..0.75) * col_w;
    let h = rng.gen_range(0.12..0.30) * side;
    let x1 = zone as f64 * col_w + rng.gen_range(0.0..(col_w - w));
    let y1 = rng.gen_range(0.0..(side - h));
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

fn overlapping_box(rng: &mut ChaCha8Rng, target: &BBox, params: &GenParams) -> Option<BBox> {
    let side = params.image_side();
    for _ in 0..500 {
        let w = (target.x2 - target.x1) * rng.gen_range(0.8..1.2);
        let h = (target.y2 - target.y1) * rng.gen_range(0.8..1.2);
        let x1 = (target.x1 + rng.gen_range(-0.6..0.6) * w).clamp(0.0, side - w);
        let y1 = (target.y1 + rng.gen_range(-0.6..0.6) * h).clamp(0.0, side - h);
        let b = BBox {
            x1,
            y1,
            x2: x1 + w,
            y2: y1 + h,
        };
        let v = iou(&b, target).ok()?;
        if (0.2..=0.45).contains(&v) {
            return Some(b);
        }
    }
    None
}

fn place_boxes(
    rng: &mut ChaCha8Rng,
    attrs: &[Attributes],
    target: usize,
    params: &GenParams,
) -> Result<Vec<BBox>> {
    let n = attrs.len();
    let overlap_with = (params.overlap_rate > 0.0
        && n > 1
        && rng.gen_bool(params.overlap_rate.min(1.0)))
    .then(|| (target + 1 + rng.gen_range(0..n - 1)) % n);
    for _attempt in 0..200 {
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        let mut ok = true;
        // target first so the overlapping distractor can be built against it
        let order: Vec<usize> = std::iter::once(target)
            .chain((0..n).filter(|&i| i != target))
            .collect();
        let mut placed = vec![None; n];
        for &i in &order {
            let candidate = if Some(i) == overlap_with {
                placed[target].and_then(|t| overlapping_box(rng, &t, params))
            } else {
                let mut found = None;
                for _ in 0..300 {
                    let b = sample_box(rng, attrs[i].zone, params);
                    let clear = boxes.iter().all(|o| {
                        iou(&b, o).map(|v| v <= params.max_pair_iou).unwrap_or(false)
                    });
                    if clear {
                        found = Some(b);
                        break;
                    }
                }
                found
            };
            match candidate {
                Some(b) => {
                    placed[i] = Some(b);
                    boxes.push(b);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(placed.into_iter().map(|b| b.expect("placed")).collect());
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} boxes with pairwise IoU ≤ {}",
        params.max_pair_iou
    )))
}

/// Generates scene `index` of the stream rooted at `seed`.
pub fn generate_synthetic_scene(seed: u64, index: u64, params: &GenParams) -> Result<Sample> {
    params.validate()?;
    let tree = SeedTree::new(seed).child("scene").index(index);
    let mut rng = tree.rng();
    let normal = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;

    let mut all: Vec<Attributes> = Vec::new();
    for color in 0..params.n_colors {
        for kind in 0..params.n_kinds {
            for zone in 0..params.n_zones {
                all.push(Attributes { color, kind, zone });
            }
        }
    }
    all.shuffle(&mut rng);
    let attrs: Vec<Attributes> = all.into_iter().take(params.n_regions).collect();
    let target = rng.gen_range(0..params.n_regions);
    let boxes = place_boxes(&mut rng, &attrs, target, params)?;

    let brightness: f64 = rng.gen_range(0.1..1.0);
    let side = params.image_side();
    let color_gain = 0.5 + 0.5 * brightness;
    let regions: Vec<RegionProposal> = attrs
        .iter()
        .zip(&boxes)
        .map(|(a, b)| {
            let mut f: Vec<f64> = (0..params.d_vision).map(|_| normal.sample(&mut rng)).collect();
            f[COLOR_OFFSET + a.color] += color_gain;
            f[KIND_OFFSET + a.kind] += 1.0;
            f[ZONE_OFFSET + a.zone] += 1.0;
            let (cx, cy) = b.center();
            f[GEOM_OFFSET] += cx / side;
            f[GEOM_OFFSET + 1] += cy / side;
            f[GEOM_OFFSET + 2] += (b.x2 - b.x1) / side;
            f[GEOM_OFFSET + 3] += (b.y2 - b.y1) / side;
            RegionProposal {
                bbox: *b,
                features: f,
            }
        })
        .collect();

    let p = params.grid;
    let cell = params.patch_size as f64;
    let mut rows = Vec::with_capacity(p * p);
    for gy in 0..p {
        for gx in 0..p {
            let patch = BBox {
                x1: gx as f64 * cell,
                y1: gy as f64 * cell,
                x2: (gx + 1) as f64 * cell,
                y2: (gy + 1) as f64 * cell,
            };
            let mut f: Vec<f64> = (0..params.patch_width)
                .map(|_| normal.sample(&mut rng))
                .collect();
            f[0] += brightness;
            for (a, b) in attrs.iter().zip(&boxes) {
                let ix = (patch.x2.min(b.x2) - patch.x1.max(b.x1)).max(0.0);
                let iy = (patch.y2.min(b.y2) - patch.y1.max(b.y1)).max(0.0);
                let cover = ix * iy / patch.area();
                f[1] += cover;
                f[2 + a.color] += cover * brightness;
            }
            rows.push(f);
        }
    }

    let t = attrs[target];
    let ambiguous = attrs
        .iter()
        .enumerate()
        .any(|(i, a)| i != target && a.color == t.color && a.kind == t.kind);
    let agent_count = attrs
        .iter()
        .filter(|a| AGENT_KINDS.contains(&KINDS[a.kind]))
        .count() as u32;
    let command_text = render_command(&mut rng, t, params);

    Ok(Sample {
        scene: Scene {
            id: format!("syn-{seed}-{index}"),
            image: Some(ImageSize {
                width: side,
                height: side,
            }),
            patch_grid: PatchGrid {
                p,
                width: params.patch_width,
                rows,
            },
            regions,
            ground_truth_box: boxes[target],
            meta: SceneMeta {
                low_light: brightness < LOW_LIGHT_THRESHOLD,
                agent_count,
                ambiguous,
            },
        },
        command: command_text,
        target_index: target,
        split: None,
    })
}

/// Generates `count` scenes in parallel; output order and content depend only on `(seed, params)`.
pub fn generate_samples(seed: u64, count: usize, params: &GenParams) -> Result<Vec<Sample>> {
    params.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_synthetic_scene(seed, i, params))
        .collect()
}

/// Recovers the attribute tuple encoded in a generated region's features.
pub fn decode_attributes(features: &[f64], params: &GenParams) -> Attributes {
    let argmax = |off: usize, n: usize| {
        (0..n)
            .max_by(|&a, &b| features[off + a].total_cmp(&features[off + b]))
            .expect("non-empty block")
    };
    Attributes {
        color: argmax(COLOR_OFFSET, params.n_colors),
        kind: argmax(KIND_OFFSET, params.n_kinds),
        zone: argmax(ZONE_OFFSET, params.n_zones),
    }
}
