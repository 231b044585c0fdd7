use super::PyramidError;
use crate::region::Region;
use crate::tensor::{expect_shape, Tensor};

/// A region projected onto a feature map: half-open cell window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectedRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Maps image coordinates to feature cells: start floored, end ceiled, both
/// clamped to the map.
pub fn project_region(
    region: &Region,
    stride: usize,
    map_h: usize,
    map_w: usize,
) -> Result<ProjectedRegion, PyramidError> {
    let s = stride as f64;
    let clampc = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let p = ProjectedRegion {
        x0: clampc((region.x1 / s).floor(), map_w),
        y0: clampc((region.y1 / s).floor(), map_h),
        x1: clampc((region.x2 / s).ceil(), map_w),
        y1: clampc((region.y2 / s).ceil(), map_h),
    };
    if p.x1 <= p.x0 || p.y1 <= p.y0 {
        return Err(PyramidError::EmptyProjection {
            region: *region,
            stride,
        });
    }
    Ok(p)
}

/// Output of [`roi_pool`]: a `C x m x m` map plus, per output cell, the flat
/// index into the source map of the value that won.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub data: Tensor,
    pub argmax_index: Vec<usize>,
}

/// Bin `i` of `m` over an extent `len` covers `[floor(i*len/m), ceil((i+1)*len/m))`.
#[inline]
fn bin(i: usize, len: usize, m: usize) -> (usize, usize) {
    ((i * len) / m, ((i + 1) * len).div_ceil(m))
}

/// Max-pools `region` of `map` (shape `C x H x W`, `stride` image pixels
/// per cell) into a fixed `m x m` grid per channel. Ties within a bin go to
/// the smallest flat index.
pub fn roi_pool(
    map: &Tensor,
    region: &Region,
    stride: usize,
    m: usize,
) -> Result<PooledFeature, PyramidError> {
    let (c, h, w) = map.dims3("roi_pool")?;
    if m == 0 {
        return Err(PyramidError::Backbone(
            "pooled resolution must be positive".into(),
        ));
    }
    let p = project_region(region, stride, h, w)?;
    let (rw, rh) = (p.x1 - p.x0, p.y1 - p.y0);
    let x = map.data();
    let mut out = Vec::with_capacity(c * m * m);
    let mut argmax = Vec::with_capacity(c * m * m);
    for ch in 0..c {
        let base = ch * h * w;
        for by in 0..m {
            let (ys, ye) = bin(by, rh, m);
            for bx in 0..m {
                let (xs, xe) = bin(bx, rw, m);
                let mut best_idx = base + (p.y0 + ys) * w + p.x0 + xs;
                let mut best = x[best_idx];
                for yy in p.y0 + ys..p.y0 + ye {
                    for xx in p.x0 + xs..p.x0 + xe {
                        let idx = base + yy * w + xx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(PooledFeature {
        data: Tensor::new(vec![c, m, m], out)?,
        argmax_index: argmax,
    })
}

/// Scatter-adds each pooled-cell gradient onto its recorded source cell.
pub fn roi_pool_backward(
    pooled: &PooledFeature,
    d_pooled: &Tensor,
    map_shape: &[usize],
) -> Result<Tensor, PyramidError> {
    expect_shape(
        "roi_pool_backward",
        "d_pooled length",
        pooled.argmax_index.len(),
        d_pooled.len(),
    )?;
    expect_shape("roi_pool_backward", "d_pooled rank", 3, d_pooled.rank())?;
    let mut d = Tensor::zeros(map_shape);
    accumulate_roi_grad(pooled, d_pooled, &mut d)?;
    Ok(d)
}

/// Like [`roi_pool_backward`] but adds into an existing map gradient, so
/// overlapping regions accumulate.
pub fn accumulate_roi_grad(
    pooled: &PooledFeature,
    d_pooled: &Tensor,
    d_map: &mut Tensor,
) -> Result<(), PyramidError> {
    expect_shape(
        "roi_pool_backward",
        "d_pooled length",
        pooled.argmax_index.len(),
        d_pooled.len(),
    )?;
    let n = d_map.len();
    let dm = d_map.data_mut();
    for (&idx, &g) in pooled.argmax_index.iter().zip(d_pooled.data()) {
        if idx >= n {
            return Err(PyramidError::Backbone(format!(
                "argmax index {idx} outside map of {n} values"
            )));
        }
        dm[idx] += g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(n: f64) -> Region {
        Region::new(0.0, 0.0, n, n).unwrap()
    }

    #[test]
    fn full_region_identity() {
        let map = Tensor::from_fn(&[2, 5, 5], |i| (i as f32 * 1.7).sin());
        let p = roi_pool(&map, &full(5.0), 1, 5).unwrap();
        assert_eq!(p.data, map);
        assert_eq!(p.argmax_index, (0..50).collect::<Vec<_>>());
        let d = Tensor::from_fn(&[2, 5, 5], |i| i as f32);
        assert_eq!(roi_pool_backward(&p, &d, &[2, 5, 5]).unwrap(), d);
    }

    #[test]
    fn four_by_four_into_two_by_two() {
        let map = Tensor::from_fn(&[1, 4, 4], |i| (i + 1) as f32);
        let p = roi_pool(&map, &full(4.0), 1, 2).unwrap();
        assert_eq!(p.data.data(), &[6.0, 8.0, 14.0, 16.0]);
        let d = roi_pool_backward(&p, &Tensor::filled(&[1, 2, 2], 1.0), &[1, 4, 4]).unwrap();
        let mut want = [0.0; 16];
        for i in [5, 7, 13, 15] {
            want[i] = 1.0;
        }
        assert_eq!(d.data(), &want[..]);
    }

    #[test]
    fn stride_projection() {
        let map = Tensor::from_fn(&[1, 4, 4], |i| (i + 1) as f32);
        // [0, 16) at stride 4 covers the full map
        let p = roi_pool(&map, &full(16.0), 4, 2).unwrap();
        assert_eq!(p.data.data(), &[6.0, 8.0, 14.0, 16.0]);
        // start floors, end ceils
        let r = Region::new(5.0, 5.0, 9.0, 9.0).unwrap();
        assert_eq!(
            project_region(&r, 4, 4, 4).unwrap(),
            ProjectedRegion {
                x0: 1,
                y0: 1,
                x1: 3,
                y1: 3
            }
        );
    }

    #[test]
    fn fixed_resolution_for_any_region() {
        let map = Tensor::from_fn(&[3, 9, 9], |i| i as f32);
        for m in [6, 7] {
            for side in [1.0, 3.0, 9.0] {
                let p = roi_pool(&map, &full(side), 1, m).unwrap();
                assert_eq!(p.data.shape(), &[3, m, m]);
            }
        }
    }

    #[test]
    fn empty_projection_is_an_error() {
        let map = Tensor::zeros(&[1, 4, 4]);
        let r = Region::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(matches!(
            roi_pool(&map, &r, 4, 2),
            Err(PyramidError::EmptyProjection { stride: 4, .. })
        ));
    }

    #[test]
    fn zero_gradient() {
        let map = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        let p = roi_pool(&map, &full(4.0), 1, 3).unwrap();
        let d = roi_pool_backward(&p, &Tensor::zeros(&[1, 3, 3]), &[1, 4, 4]).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert!(roi_pool_backward(&p, &Tensor::zeros(&[1, 2, 2]), &[1, 4, 4]).is_err());
    }

    #[test]
    fn ignores_content_outside_region() {
        let mut map = Tensor::from_fn(&[1, 8, 8], |i| ((i * 37) % 11) as f32);
        let r = Region::new(2.0, 1.0, 6.0, 5.0).unwrap();
        let before = roi_pool(&map, &r, 1, 2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if !(2..6).contains(&x) || !(1..5).contains(&y) {
                    map.data_mut()[y * 8 + x] = 1000.0;
                }
            }
        }
        assert_eq!(roi_pool(&map, &r, 1, 2).unwrap(), before);
    }
}
