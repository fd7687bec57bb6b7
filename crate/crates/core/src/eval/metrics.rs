use crate::data::BBox;
use crate::error::{Error, Result};

/// Predictions count as hits when IoU strictly exceeds this.
pub const AP_THRESHOLD: f64 = 0.5;

/// Intersection over union on continuous coordinates.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn is_hit(iou: f64) -> bool {
    iou > AP_THRESHOLD
}

/// Fraction of `(predicted, ground truth)` pairs whose IoU exceeds 0.5.
pub fn ap50(pairs: &[(BBox, BBox)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("ap50 of an empty prediction list".into()));
    }
    let mut hits = 0usize;
    for (p, g) in pairs {
        if is_hit(iou(p, g)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}
