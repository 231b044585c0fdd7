use serde::{Deserialize, Serialize};

use super::bbox::{apply_bbox, BBoxRegressor};
use super::svm::SvmHead;
use super::DetectError;
use crate::noc::NocNet;
use crate::pyramid::{pool_level, select_adjacent_scales, select_scale, FeaturePyramid};
use crate::region::Region;
use crate::tensor::{softmax, Tensor};

/// One scored box, emitted as a JSON line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub category: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl Detection {
    pub fn region(&self) -> Region {
        Region {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ScoreMode<'a> {
    /// Per-category SVM decision values on the NoC features.
    Svm(&'a SvmHead),
    /// Softmax probability of each category.
    Softmax,
}

/// RoI pooling resolution and the side length scale selection aims for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub m: usize,
    pub target_extent: f64,
}

/// Pools `region` at its best single scale, or at the best adjacent pair
/// when `dual` (maxout heads). The lower scale comes first.
pub fn pool_region(
    pyramid: &FeaturePyramid,
    region: &Region,
    spec: &PoolSpec,
    dual: bool,
) -> Result<(Tensor, Option<Tensor>), DetectError> {
    if dual {
        let (lo, hi) = select_adjacent_scales(region, pyramid, spec.target_extent)?;
        let a = pool_level(pyramid, lo, region, spec.m)?.data;
        let b = pool_level(pyramid, hi, region, spec.m)?.data;
        Ok((a, Some(b)))
    } else {
        let l = select_scale(region, pyramid, spec.target_extent)?;
        Ok((pool_level(pyramid, l, region, spec.m)?.data, None))
    }
}

/// Per-category scores for one pooled region, plus the NoC feature when the
/// mode needed it.
pub fn score_pooled(
    net: &NocNet,
    mode: ScoreMode<'_>,
    pooled_a: &Tensor,
    pooled_b: Option<&Tensor>,
) -> Result<(Vec<f64>, Option<Tensor>), DetectError> {
    match mode {
        ScoreMode::Softmax => {
            let (logits, _) = net.forward(pooled_a, pooled_b)?;
            Ok((softmax(&logits)[1..].to_vec(), None))
        }
        ScoreMode::Svm(head) => {
            let f = net.extract_features(pooled_a, pooled_b)?;
            if head.num_categories() + 1 != net.num_classes() {
                return Err(DetectError::Config(format!(
                    "svm has {} categories, net has {} classes",
                    head.num_categories(),
                    net.num_classes()
                )));
            }
            Ok((head.scores(f.data()), Some(f)))
        }
    }
}

/// Scores every region for every category. Returns one list per category,
/// in region order. With a regressor, boxes are refined per category.
pub fn score_regions(
    net: &NocNet,
    mode: ScoreMode<'_>,
    pyramid: &FeaturePyramid,
    regions: &[Region],
    pool: &PoolSpec,
    bbox: Option<&BBoxRegressor>,
    image_id: usize,
) -> Result<Vec<Vec<Detection>>, DetectError> {
    let n = net.num_classes() - 1;
    let mut out = vec![Vec::with_capacity(regions.len()); n];
    for region in regions {
        let (a, b) = pool_region(pyramid, region, pool, net.has_maxout())?;
        let (scores, feature) = score_pooled(net, mode, &a, b.as_ref())?;
        let feature = match (bbox, feature) {
            (Some(_), None) => Some(net.extract_features(&a, b.as_ref())?),
            (_, f) => f,
        };
        for (cat, &score) in scores.iter().enumerate() {
            if !score.is_finite() {
                continue;
            }
            let r = match (bbox, &feature) {
                (Some(reg), Some(f)) => apply_bbox(reg, f.data(), region, cat, pyramid.source_size),
                _ => *region,
            };
            out[cat].push(Detection {
                image_id,
                category: cat,
                x1: r.x1,
                y1: r.y1,
                x2: r.x2,
                y2: r.y2,
                score,
            });
        }
    }
    Ok(out)
}
