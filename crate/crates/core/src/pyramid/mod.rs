//! Shared feature extraction at several image scales, per-region scale
//! selection, RoI max pooling, and the à trous stride reduction.

mod atrous;
mod backbone;
mod resize;
mod roi;

pub use atrous::atrous_transform;
pub use backbone::{Backbone, BackboneCache, BackboneLayer};
pub use resize::resize_bilinear;
pub use roi::{
    accumulate_roi_grad, project_region, roi_pool, roi_pool_backward, PooledFeature,
    ProjectedRegion,
};

use thiserror::Error;

use crate::region::Region;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("invalid scales: {0}")]
    Scales(String),
    #[error("scale {scale} resizes the image to {height}x{width}, below the backbone footprint of {min}")]
    TooSmall {
        scale: f64,
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("region {region:?} projects to an empty window at stride {stride}")]
    EmptyProjection { region: Region, stride: usize },
    #[error("single-level pyramid: adjacent-scale pooling needs at least two levels; use single-scale mode")]
    SingleLevel,
    #[error("empty pyramid")]
    Empty,
    #[error("backbone: {0}")]
    Backbone(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub scale: f64,
    pub map: Tensor,
    pub stride: usize,
}

/// Feature maps of one image at increasing scales.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    /// (height, width) of the source image.
    pub source_size: (usize, usize),
}

fn validate_scales(scales: &[f64]) -> Result<(), PyramidError> {
    if scales.is_empty() {
        return Err(PyramidError::Scales("no scales given".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(PyramidError::Scales(format!("scale {s} is not positive")));
    }
    if scales.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PyramidError::Scales(format!(
            "scales {scales:?} are not strictly increasing"
        )));
    }
    Ok(())
}

/// Resizes `image` by each scale (bilinear, extents floored) and runs the
/// backbone on every resized copy.
pub fn build_pyramid(
    image: &Tensor,
    backbone: &Backbone,
    scales: &[f64],
) -> Result<FeaturePyramid, PyramidError> {
    validate_scales(scales)?;
    let (_, h, w) = image.dims3("build_pyramid")?;
    let min = backbone.min_input_extent();
    let stride = backbone.stride();
    let mut levels = Vec::with_capacity(scales.len());
    for &scale in scales {
        let rh = (scale * h as f64).floor() as usize;
        let rw = (scale * w as f64).floor() as usize;
        if backbone.output_size(rh, rw).is_none() {
            return Err(PyramidError::TooSmall {
                scale,
                height: rh,
                width: rw,
                min,
            });
        }
        let resized = resize_bilinear(image, rh, rw)?;
        levels.push(PyramidLevel {
            scale,
            map: backbone.forward(&resized)?,
            stride,
        });
    }
    Ok(FeaturePyramid {
        levels,
        source_size: (h, w),
    })
}

fn scale_distance(region: &Region, scale: f64, target_extent: f64) -> f64 {
    (scale * region.area().sqrt() - target_extent).abs()
}

/// Index of the scale at which the region's side length (sqrt of area) is
/// closest to `target_extent`. Ties go to the smaller scale.
pub fn select_scale(
    region: &Region,
    pyramid: &FeaturePyramid,
    target_extent: f64,
) -> Result<usize, PyramidError> {
    let scales: Vec<f64> = pyramid.levels.iter().map(|l| l.scale).collect();
    select_scale_among(region, &scales, target_extent)
}

pub fn select_scale_among(
    region: &Region,
    scales: &[f64],
    target_extent: f64,
) -> Result<usize, PyramidError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scales.iter().enumerate() {
        let d = scale_distance(region, s, target_extent);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(PyramidError::Empty)
}

/// Two consecutive levels around the best single scale: the best level and
/// whichever neighbour is closer to the target (the lower one on ties),
/// clamped to the first/last pair at the ends of the pyramid.
pub fn select_adjacent_scales(
    region: &Region,
    pyramid: &FeaturePyramid,
    target_extent: f64,
) -> Result<(usize, usize), PyramidError> {
    let scales: Vec<f64> = pyramid.levels.iter().map(|l| l.scale).collect();
    select_adjacent_among(region, &scales, target_extent)
}

pub fn select_adjacent_among(
    region: &Region,
    scales: &[f64],
    target_extent: f64,
) -> Result<(usize, usize), PyramidError> {
    match scales.len() {
        0 => return Err(PyramidError::Empty),
        1 => return Err(PyramidError::SingleLevel),
        _ => {}
    }
    let best = select_scale_among(region, scales, target_extent)?;
    let last = scales.len() - 1;
    if best == 0 {
        return Ok((0, 1));
    }
    if best == last {
        return Ok((last - 1, last));
    }
    let below = scale_distance(region, scales[best - 1], target_extent);
    let above = scale_distance(region, scales[best + 1], target_extent);
    Ok(if below <= above {
        (best - 1, best)
    } else {
        (best, best + 1)
    })
}

/// Pools `region` (source-image coordinates) from one pyramid level.
pub fn pool_level(
    pyramid: &FeaturePyramid,
    level: usize,
    region: &Region,
    m: usize,
) -> Result<PooledFeature, PyramidError> {
    let lvl = pyramid.levels.get(level).ok_or(PyramidError::Empty)?;
    roi_pool(&lvl.map, &region.scaled(lvl.scale), lvl.stride, m)
}
