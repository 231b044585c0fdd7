use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::region::Region;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub n_per_gt: usize,
    pub n_background: usize,
    /// Std of the center shift, in units of the box side.
    pub shift_sigma: f64,
    /// Std of the log side-length change.
    pub scale_sigma: f64,
    /// Background boxes keep IoU below this with every ground truth.
    pub background_max_iou: f64,
    pub background_min_size: f64,
    pub background_max_size: f64,
    /// Drop perturbed boxes below this side length after clipping.
    pub min_size: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            n_per_gt: 12,
            n_background: 12,
            shift_sigma: 0.15,
            scale_sigma: 0.2,
            background_max_iou: 0.3,
            background_min_size: 10.0,
            background_max_size: 36.0,
            min_size: 4.0,
        }
    }
}

/// Gaussian-perturbed copies of each ground-truth box followed by uniform
/// background boxes. All boxes are clipped to the image; perturbed copies
/// smaller than `min_size` are dropped and background draws that overlap a
/// ground truth are rejected (up to a bounded number of attempts), so the
/// result can be shorter than requested.
pub fn jitter_proposals<R: Rng + ?Sized>(
    gts: &[Region],
    image_size: (usize, usize),
    cfg: &JitterConfig,
    rng: &mut R,
) -> Vec<Region> {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::with_capacity(gts.len() * cfg.n_per_gt + cfg.n_background);
    let shift = Normal::new(0.0, cfg.shift_sigma.max(0.0)).expect("finite sigma");
    let scale = Normal::new(0.0, cfg.scale_sigma.max(0.0)).expect("finite sigma");
    for g in gts {
        let (cx, cy) = g.center();
        for _ in 0..cfg.n_per_gt {
            let nx = cx + shift.sample(rng) * g.width();
            let ny = cy + shift.sample(rng) * g.height();
            let nw = g.width() * scale.sample(rng).exp();
            let nh = g.height() * scale.sample(rng).exp();
            let r = Region::new(nx - nw / 2.0, ny - nh / 2.0, nx + nw / 2.0, ny + nh / 2.0)
                .and_then(|r| r.clip(w, h));
            if let Ok(r) = r {
                if r.width() >= cfg.min_size.min(g.width())
                    && r.height() >= cfg.min_size.min(g.height())
                {
                    out.push(r);
                }
            }
        }
    }
    let (lo, hi) = (
        cfg.background_min_size.min(w).min(h),
        cfg.background_max_size.min(w).min(h),
    );
    let mut kept = 0;
    let mut attempts = 0;
    while kept < cfg.n_background && attempts < 50 * cfg.n_background {
        attempts += 1;
        let bw = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let bh = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let x = rng.random_range(0.0..=(w - bw));
        let y = rng.random_range(0.0..=(h - bh));
        let Ok(r) = Region::new(x, y, x + bw, y + bh) else {
            continue;
        };
        if gts.iter().all(|g| g.iou(&r) < cfg.background_max_iou) {
            out.push(r);
            kept += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gts() -> Vec<Region> {
        vec![
            Region::new(4.0, 6.0, 24.0, 30.0).unwrap(),
            Region::new(36.0, 30.0, 60.0, 52.0).unwrap(),
        ]
    }

    #[test]
    fn zero_noise_reproduces_ground_truth() {
        let cfg = JitterConfig {
            n_per_gt: 3,
            n_background: 0,
            shift_sigma: 0.0,
            scale_sigma: 0.0,
            ..Default::default()
        };
        let out = jitter_proposals(&gts(), (64, 64), &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.len(), 6);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(*r, gts()[i / 3]);
        }
    }

    #[test]
    fn jittered_overlap_spans_both_sides_of_half() {
        let g = gts();
        let cfg = JitterConfig {
            n_per_gt: 500,
            n_background: 0,
            ..Default::default()
        };
        let out = jitter_proposals(&g, (64, 64), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(out.len() >= 900);
        let ious: Vec<f64> = out
            .iter()
            .map(|r| g.iter().map(|x| x.iou(r)).fold(0.0, f64::max))
            .collect();
        let above = ious.iter().filter(|&&v| v >= 0.5).count() as f64 / ious.len() as f64;
        assert!((0.2..0.95).contains(&above), "fraction above 0.5: {above}");
        assert!(ious.iter().any(|&v| v < 0.35) && ious.iter().any(|&v| v > 0.9));
    }

    #[test]
    fn background_boxes_avoid_ground_truth() {
        let g = gts();
        let cfg = JitterConfig {
            n_per_gt: 0,
            n_background: 200,
            ..Default::default()
        };
        let out = jitter_proposals(&g, (64, 64), &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(out.len() > 100);
        for r in &out {
            assert!(r.x1 >= 0.0 && r.y1 >= 0.0 && r.x2 <= 64.0 && r.y2 <= 64.0);
            assert!(g.iter().all(|x| x.iou(r) < 0.3));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = JitterConfig::default();
        let a = jitter_proposals(&gts(), (64, 64), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = jitter_proposals(&gts(), (64, 64), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
