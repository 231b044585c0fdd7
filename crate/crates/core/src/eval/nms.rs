use std::cmp::Ordering;

use crate::detect::Detection;

/// Score descending, then lower coordinates first.
pub(crate) fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
        .then(a.image_id.cmp(&b.image_id))
        .then(a.category.cmp(&b.category))
}

/// Greedy suppression over detections of one image and category: walk in
/// rank order and keep a box iff its IoU with every kept box is below
/// `iou_thresh`. Output is in rank order.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let r = d.region();
        if kept.iter().all(|k| k.region().iou(&r) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Applies [`nms`] separately to every (image, category) group.
pub fn nms_grouped(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<Detection>> = Default::default();
    for d in detections {
        groups.entry((d.image_id, d.category)).or_default().push(*d);
    }
    groups.values().flat_map(|g| nms(g, iou_thresh)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            image_id: 0,
            category: 0,
            x1,
            y1,
            x2,
            y2,
            score,
        }
    }

    #[test]
    fn basics() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        assert_eq!(nms(&[a], 0.5), vec![a]);
        let b = Detection { score: 0.8, ..a };
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
    }

    #[test]
    fn chain_keeps_first_and_last() {
        // IoU(A,B) = IoU(B,C) = 0.6, IoU(A,C) = 1/3
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(2.5, 0.0, 12.5, 10.0, 0.8);
        let c = det(5.0, 0.0, 15.0, 10.0, 0.7);
        assert!((a.region().iou(&b.region()) - 0.6).abs() < 1e-12);
        assert!((b.region().iou(&c.region()) - 0.6).abs() < 1e-12);
        assert!((a.region().iou(&c.region()) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(nms(&[c, a, b], 0.5), vec![a, c]);
        assert_eq!(nms(&[c, a, b], 0.3), vec![a]);
    }

    /// The kept set K is the unique subset for which, in rank order, a box
    /// is in K exactly when it overlaps no earlier member of K.
    fn brute_force(dets: &[Detection], t: f64) -> Vec<Detection> {
        let mut sorted = dets.to_vec();
        sorted.sort_by(rank_order);
        let n = sorted.len();
        let mut found = Vec::new();
        for mask in 0u32..(1 << n) {
            let ok = (0..n).all(|i| {
                let free = (0..i)
                    .filter(|&j| mask >> j & 1 == 1)
                    .all(|j| sorted[j].region().iou(&sorted[i].region()) < t);
                (mask >> i & 1 == 1) == free
            });
            if ok {
                found.push(mask);
            }
        }
        assert_eq!(found.len(), 1);
        (0..n)
            .filter(|&i| found[0] >> i & 1 == 1)
            .map(|i| sorted[i])
            .collect()
    }

    fn dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((0u8..12, 0u8..12, 2u8..10, 2u8..10, 0u8..4), 1..=max).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, s)| {
                    det(
                        x as f64,
                        y as f64,
                        (x + w) as f64,
                        (y + h) as f64,
                        s as f64 / 4.0,
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_subset_oracle(d in dets(4), t in prop::sample::select(vec![0.1, 0.3, 0.5, 0.7])) {
            prop_assert_eq!(nms(&d, t), brute_force(&d, t));
        }

        #[test]
        fn order_independent(d in dets(8), k in 0usize..8) {
            let mut e = d.clone();
            e.rotate_left(k % d.len());
            e.reverse();
            prop_assert_eq!(nms(&d, 0.5), nms(&e, 0.5));
        }
    }
}
