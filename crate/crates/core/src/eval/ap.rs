use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::nms::rank_order;
use crate::detect::{Detection, GroundTruth};

/// Ground truth keyed by image id.
pub type GtIndex = BTreeMap<usize, Vec<GroundTruth>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` for categories without ground truth.
    pub per_category: Vec<Option<f64>>,
    /// Mean over categories with ground truth.
    pub map: f64,
}

/// True-positive flags for one category's detections in rank order. Each
/// detection takes the highest-IoU still-unmatched ground truth of its
/// image with IoU at least `thresh`.
pub(crate) fn match_category(
    dets: &[&Detection],
    gt: &GtIndex,
    category: usize,
    thresh: f64,
) -> Vec<bool> {
    let mut used: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    dets.iter()
        .map(|d| {
            let Some(objs) = gt.get(&d.image_id) else {
                return false;
            };
            let taken = used
                .entry(d.image_id)
                .or_insert_with(|| vec![false; objs.len()]);
            let r = d.region();
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in objs.iter().enumerate() {
                if g.category != category || taken[i] {
                    continue;
                }
                let v = r.iou(&g.region);
                if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP from rank-ordered TP flags and the number of ground truths.
pub fn average_precision(tp: &[bool], n_gt: usize, interp: Interpolation) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // envelope: best precision at this or any later rank
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match interp {
        Interpolation::AllPoints => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    recall
                        .iter()
                        .position(|&r| r >= t - 1e-12)
                        .map_or(0.0, |k| precision[k])
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Per-category AP at one IoU threshold. Detections are matched in rank
/// order (score descending, ties by lower coordinates).
pub fn ap_at(
    detections: &[Detection],
    gt: &GtIndex,
    n_categories: usize,
    iou_thresh: f64,
    interp: Interpolation,
) -> ApResult {
    let mut per_category = Vec::with_capacity(n_categories);
    for cat in 0..n_categories {
        let n_gt = gt.values().flatten().filter(|g| g.category == cat).count();
        if n_gt == 0 {
            per_category.push(None);
            continue;
        }
        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.category == cat).collect();
        dets.sort_by(|a, b| rank_order(a, b));
        let tp = match_category(&dets, gt, cat, iou_thresh);
        per_category.push(Some(average_precision(&tp, n_gt, interp)));
    }
    let scored: Vec<f64> = per_category.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    ApResult { per_category, map }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95, computed so that each equals the
/// decimal literal exactly.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Mean of [`ap_at`] over [`coco_thresholds`], per category and overall.
pub fn coco_ap(detections: &[Detection], gt: &GtIndex, n_categories: usize) -> ApResult {
    let runs: Vec<ApResult> = coco_thresholds()
        .iter()
        .map(|&t| ap_at(detections, gt, n_categories, t, Interpolation::AllPoints))
        .collect();
    let per_category = (0..n_categories)
        .map(|c| {
            runs[0].per_category[c].map(|_| {
                runs.iter()
                    .map(|r| r.per_category[c].unwrap_or(0.0))
                    .sum::<f64>()
                    / runs.len() as f64
            })
        })
        .collect();
    let map = runs.iter().map(|r| r.map).sum::<f64>() / runs.len() as f64;
    ApResult { per_category, map }
}
