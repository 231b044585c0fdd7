use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::DetectError;
use crate::region::Region;

/// Largest log-scale change applied to a box side.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// `(dx, dy, dw, dh)` taking `proposal` to `target`: center shift in units
/// of the proposal's size, log ratio of sides.
pub fn encode_deltas(proposal: &Region, target: &Region) -> [f64; 4] {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - pcx) / pw,
        (tcy - pcy) / ph,
        (target.width() / pw).ln(),
        (target.height() / ph).ln(),
    ]
}

/// Clamps `[lo, hi)` into `[0, limit]`, keeping at least one pixel.
fn fit_span(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
    let (a, b) = (lo.clamp(0.0, limit), hi.clamp(0.0, limit));
    if b - a >= limit.min(1.0) {
        return (a, b);
    }
    let half = 0.5f64.min(limit / 2.0);
    let c = (0.5 * (a + b)).clamp(half, limit - half);
    (c - half, c + half)
}

/// Inverse of [`encode_deltas`], then clipped to a `width x height` image.
/// The result always has positive size.
pub fn apply_deltas(proposal: &Region, d: [f64; 4], width: f64, height: f64) -> Region {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (pcx, pcy) = proposal.center();
    let cx = pcx + d[0] * pw;
    let cy = pcy + d[1] * ph;
    let w = pw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ph * d[3].min(MAX_LOG_SCALE).exp();
    let fin = |v: f64, fallback: f64| if v.is_finite() { v } else { fallback };
    let (x1, x2) = fit_span(fin(cx - 0.5 * w, 0.0), fin(cx + 0.5 * w, width), width);
    let (y1, y2) = fit_span(fin(cy - 0.5 * h, 0.0), fin(cy + 0.5 * h, height), height);
    Region { x1, y1, x2, y2 }
}

/// Per-category ridge regression from features to box deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBoxRegressor {
    /// Row-major `(dim + 1) x 4`; the last row is the bias.
    pub weights: Vec<Option<Vec<f64>>>,
    pub dim: usize,
    pub lambda: f64,
}

impl BBoxRegressor {
    pub fn predict(&self, feature: &[f32], category: usize) -> [f64; 4] {
        let Some(Some(w)) = self.weights.get(category) else {
            return [0.0; 4];
        };
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            *o = w[self.dim * 4 + k]
                + feature
                    .iter()
                    .enumerate()
                    .map(|(i, &f)| f as f64 * w[i * 4 + k])
                    .sum::<f64>();
        }
        out
    }
}

/// Closed-form ridge fit per category on `(feature, proposal, target box,
/// category)` samples. The bias is penalized too, so a huge `lambda` gives
/// zero deltas.
pub fn train_bbox_regressor(
    features: &[Vec<f32>],
    proposals: &[Region],
    targets: &[(Region, usize)],
    n_categories: usize,
    lambda: f64,
) -> Result<BBoxRegressor, DetectError> {
    if features.len() != proposals.len() || features.len() != targets.len() {
        return Err(DetectError::Config("bbox samples must align".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DetectError::Config(format!(
            "ridge lambda {lambda} must be finite and >= 0"
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut weights = Vec::with_capacity(n_categories);
    for cat in 0..n_categories {
        let idx: Vec<usize> = (0..targets.len())
            .filter(|&i| targets[i].1 == cat)
            .collect();
        if idx.is_empty() {
            weights.push(None);
            continue;
        }
        let x = DMatrix::from_fn(idx.len(), dim + 1, |r, c| {
            if c == dim {
                1.0
            } else {
                features[idx[r]][c] as f64
            }
        });
        let y = DMatrix::from_fn(idx.len(), 4, |r, c| {
            encode_deltas(&proposals[idx[r]], &targets[idx[r]].0)[c]
        });
        let mut a = x.transpose() * &x;
        for i in 0..=dim {
            a[(i, i)] += lambda;
        }
        let rhs = x.transpose() * y;
        let sol = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => a
                .lu()
                .solve(&rhs)
                .ok_or(DetectError::Singular { category: cat })?,
        };
        let mut w = vec![0.0; (dim + 1) * 4];
        for r in 0..=dim {
            for c in 0..4 {
                w[r * 4 + c] = sol[(r, c)];
            }
        }
        weights.push(Some(w));
    }
    Ok(BBoxRegressor {
        weights,
        dim,
        lambda,
    })
}

pub fn apply_bbox(
    regressor: &BBoxRegressor,
    feature: &[f32],
    proposal: &Region,
    category: usize,
    image_size: (usize, usize),
) -> Region {
    let d = regressor.predict(feature, category);
    apply_deltas(proposal, d, image_size.1 as f64, image_size.0 as f64)
}
