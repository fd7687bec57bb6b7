#![allow(dead_code)]

use cavg::config::ModelConfig;
use cavg::rng::SeedTree;
use cavg::Tensor;
use rand::Rng;

pub fn rand_t(seed: u64, r: usize, c: usize) -> Tensor {
    let mut rng = SeedTree::new(seed).rng();
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Narrow model for fast tests; region features keep the generator's 64 dims.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        d_vision: 64,
        text_layers: 1,
        text_heads: 2,
        context_width: 16,
        context_layers: 1,
        context_heads: 2,
        cross_width: 16,
        cross_heads: 2,
        decoder_layers: 2,
        decoder_heads: 2,
        ffn_ratio: 2,
        ..ModelConfig::default()
    }
}

/// Plain single-head scaled dot-product attention with a query residual.
pub fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let a = scaled_dot_product(q, k, v);
    let data = a.data().iter().zip(q.data()).map(|(x, y)| x + y).collect();
    Tensor::matrix(a.rows(), a.cols(), data).unwrap()
}

/// `softmax(q·kᵀ/√d_k)·v`, written out with loops.
pub fn scaled_dot_product(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (nq, nk, dk, dv) = (q.rows(), k.rows(), q.cols(), v.cols());
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let mut s: Vec<f64> = (0..nk)
            .map(|j| (0..dk).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        s.iter_mut().for_each(|x| *x = (*x - m).exp());
        let z: f64 = s.iter().sum();
        for c in 0..dv {
            let a: f64 = (0..nk).map(|j| s[j] / z * v.get(j, c)).sum();
            out[i * dv + c] = a;
        }
    }
    Tensor::matrix(nq, dv, out).unwrap()
}

/// Rows of a row-stochastic matrix: each within `tol` of summing to one and entrywise in [0, 1].
pub fn rows_are_distributions(t: &Tensor, tol: f64) -> bool {
    (0..t.rows()).all(|r| {
        let row = t.row_slice(r);
        (row.iter().sum::<f64>() - 1.0).abs() < tol && row.iter().all(|&p| (0.0..=1.0).contains(&p))
    })
}

/// Counts sample points at cell centers of `n` equal cells over `[lo, hi]` that fall inside each interval.
fn raster_axis(a: (f64, f64), b: (f64, f64), n: usize) -> (f64, f64, f64) {
    let lo = a.0.min(b.0);
    let hi = a.1.max(b.1);
    let h = (hi - lo) / n as f64;
    let (mut ca, mut cb, mut both) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * h;
        let ia = x >= a.0 && x < a.1;
        let ib = x >= b.0 && x < b.1;
        ca += ia as usize;
        cb += ib as usize;
        both += (ia && ib) as usize;
    }
    (ca as f64 * h, cb as f64 * h, both as f64 * h)
}

/// IoU by point sampling. Axis-aligned boxes factor into per-axis rasters, so
/// `n` samples per axis stand in for an `n × n` pixel grid.
pub fn raster_iou(a: &cavg::BBox, b: &cavg::BBox, n: usize) -> f64 {
    let (ax, bx, ix) = raster_axis((a.x1, a.x2), (b.x1, b.x2), n);
    let (ay, by, iy) = raster_axis((a.y1, a.y2), (b.y1, b.y2), n);
    let inter = ix * iy;
    inter / (ax * ay + bx * by - inter)
}

/// Random box inside `[0, 100]²` with sides in `[5, 60]`.
pub fn random_box<R: Rng>(rng: &mut R) -> cavg::BBox {
    let w = rng.gen_range(5.0..60.0);
    let h = rng.gen_range(5.0..60.0);
    let x = rng.gen_range(0.0..100.0 - w);
    let y = rng.gen_range(0.0..100.0 - h);
    cavg::BBox::new(x, y, x + w, y + h).unwrap()
}
