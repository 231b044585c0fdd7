use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ap::GtIndex;
use super::nms::rank_order;
use super::EvalError;
use crate::detect::Detection;

/// For each category, the set of categories it is easily confused with.
pub type SimilarityMap = BTreeMap<usize, BTreeSet<usize>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Cor,
    Loc,
    Sim,
    Oth,
    Bg,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 5] = [Self::Cor, Self::Loc, Self::Sim, Self::Oth, Self::Bg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cor => "cor",
            Self::Loc => "loc",
            Self::Sim => "sim",
            Self::Oth => "oth",
            Self::Bg => "bg",
        }
    }
}

/// Counts and fractions of each error kind over the pooled top-ranked
/// detections. `total` is the number of detections classified; it equals
/// `n_gt` whenever every category had at least as many detections as
/// ground-truth objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub counts: BTreeMap<ErrorKind, usize>,
    pub fractions: BTreeMap<ErrorKind, f64>,
    pub total: usize,
    pub n_gt: usize,
}

impl ErrorBreakdown {
    pub fn from_counts(counts: [usize; 5], n_gt: usize) -> Self {
        let total: usize = counts.iter().sum();
        let frac = |c: usize| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        };
        ErrorBreakdown {
            counts: ErrorKind::ALL
                .iter()
                .zip(counts)
                .map(|(k, c)| (*k, c))
                .collect(),
            fractions: ErrorKind::ALL
                .iter()
                .zip(counts)
                .map(|(k, c)| (*k, frac(c)))
                .collect(),
            total,
            n_gt,
        }
    }

    pub fn count(&self, kind: ErrorKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn fraction(&self, kind: ErrorKind) -> f64 {
        self.fractions.get(&kind).copied().unwrap_or(0.0)
    }

    /// Sum of fractions; 1 for any non-empty breakdown.
    pub fn fraction_sum(&self) -> f64 {
        self.fractions.values().sum()
    }
}

fn check_similarity(similarity: &SimilarityMap, n_categories: usize) -> Result<(), EvalError> {
    for c in 0..n_categories {
        let Some(set) = similarity.get(&c) else {
            return Err(EvalError::Similarity(format!(
                "similarity map has no entry for category {c}"
            )));
        };
        if let Some(bad) = set.iter().find(|&&s| s >= n_categories || s == c) {
            return Err(EvalError::Similarity(format!(
                "category {c} lists invalid similar category {bad}"
            )));
        }
    }
    Ok(())
}

/// Labels the top-ranked detections of every category, where the pool for
/// category `c` holds its `N_c` best detections and `N_c` is its number of
/// ground-truth objects. Rules apply in order:
///
/// * `Cor`: IoU >= 0.5 with a not yet matched object of the same category;
/// * `Loc`: IoU >= 0.1 with an object of the same category (this includes
///   duplicates of an already matched object);
/// * `Sim`: IoU >= 0.1 with an object of a similar category;
/// * `Oth`: IoU >= 0.1 with any other object;
/// * `Bg`: everything else.
pub fn classify(
    detections: &[Detection],
    gt: &GtIndex,
    similarity: &SimilarityMap,
    n_categories: usize,
) -> Result<Vec<(Detection, ErrorKind)>, EvalError> {
    check_similarity(similarity, n_categories)?;
    let mut out = Vec::new();
    for cat in 0..n_categories {
        let n_c = gt.values().flatten().filter(|g| g.category == cat).count();
        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.category == cat).collect();
        dets.sort_by(|a, b| rank_order(a, b));
        dets.truncate(n_c);
        let similar = &similarity[&cat];
        let mut matched: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
        for d in dets {
            let objs = gt.get(&d.image_id).map_or(&[][..], Vec::as_slice);
            let used = matched
                .entry(d.image_id)
                .or_insert_with(|| vec![false; objs.len()]);
            let r = d.region();
            let ious: Vec<f64> = objs.iter().map(|g| r.iou(&g.region)).collect();
            let best_free = (0..objs.len())
                .filter(|&i| objs[i].category == cat && !used[i] && ious[i] >= 0.5)
                .max_by(|&a, &b| ious[a].total_cmp(&ious[b]).then(b.cmp(&a)));
            let max_where = |pred: &dyn Fn(usize) -> bool| {
                (0..objs.len())
                    .filter(|&i| pred(objs[i].category))
                    .map(|i| ious[i])
                    .fold(0.0, f64::max)
            };
            let kind = if let Some(i) = best_free {
                used[i] = true;
                ErrorKind::Cor
            } else if max_where(&|c| c == cat) >= 0.1 {
                ErrorKind::Loc
            } else if max_where(&|c| similar.contains(&c)) >= 0.1 {
                ErrorKind::Sim
            } else if max_where(&|c| c != cat) >= 0.1 {
                ErrorKind::Oth
            } else {
                ErrorKind::Bg
            };
            out.push((*d, kind));
        }
    }
    Ok(out)
}

/// Pooled [`classify`] counts over all categories.
pub fn diagnose(
    detections: &[Detection],
    gt: &GtIndex,
    similarity: &SimilarityMap,
    n_categories: usize,
) -> Result<ErrorBreakdown, EvalError> {
    let labels = classify(detections, gt, similarity, n_categories)?;
    let mut counts = [0usize; 5];
    for (_, k) in &labels {
        counts[*k as usize] += 1;
    }
    let n_gt = gt
        .values()
        .flatten()
        .filter(|g| g.category < n_categories)
        .count();
    Ok(ErrorBreakdown::from_counts(counts, n_gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::GroundTruth;
    use crate::region::Region;

    fn r(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region::new(x1, y1, x2, y2).unwrap()
    }

    fn det(img: usize, cat: usize, b: Region, score: f64) -> Detection {
        Detection {
            image_id: img,
            category: cat,
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            score,
        }
    }

    fn pairs() -> SimilarityMap {
        // {0,1} similar, 2 alone
        SimilarityMap::from([
            (0, BTreeSet::from([1])),
            (1, BTreeSet::from([0])),
            (2, BTreeSet::new()),
        ])
    }

    fn gts() -> GtIndex {
        GtIndex::from([
            (
                0,
                vec![
                    GroundTruth {
                        region: r(0.0, 0.0, 10.0, 10.0),
                        category: 0,
                    },
                    GroundTruth {
                        region: r(20.0, 20.0, 30.0, 30.0),
                        category: 1,
                    },
                ],
            ),
            (
                1,
                vec![
                    GroundTruth {
                        region: r(0.0, 0.0, 10.0, 10.0),
                        category: 0,
                    },
                    GroundTruth {
                        region: r(40.0, 0.0, 50.0, 10.0),
                        category: 2,
                    },
                ],
            ),
            (
                2,
                vec![GroundTruth {
                    region: r(5.0, 5.0, 15.0, 15.0),
                    category: 1,
                }],
            ),
        ])
    }

    #[test]
    fn all_correct_and_all_background() {
        let gt = gts();
        let exact: Vec<Detection> = gt
            .iter()
            .flat_map(|(i, v)| v.iter().map(|g| det(*i, g.category, g.region, 1.0)))
            .collect();
        let b = diagnose(&exact, &gt, &pairs(), 3).unwrap();
        assert_eq!(b.count(ErrorKind::Cor), 5);
        assert_eq!(b.fraction(ErrorKind::Cor), 1.0);
        assert_eq!((b.total, b.n_gt), (5, 5));

        let far: Vec<Detection> = exact
            .iter()
            .map(|d| det(d.image_id, d.category, r(55.0, 55.0, 60.0, 60.0), d.score))
            .collect();
        let b = diagnose(&far, &gt, &pairs(), 3).unwrap();
        assert_eq!(b.fraction(ErrorKind::Bg), 1.0);
    }

    #[test]
    fn mixed_fixture_matches_hand_labels() {
        // Category 0 has 2 objects, category 1 has 2, category 2 has 1, so
        // the pools take the top 2, 2 and 1 detections of each category.
        let gt = gts();
        let dets = vec![
            // cat 0, rank 1: exact on image 0 object 0
            det(0, 0, r(0.0, 0.0, 10.0, 10.0), 0.9),
            // cat 0, rank 2: same object again, IoU 0.81; duplicate
            det(0, 0, r(0.0, 0.0, 9.0, 9.0), 0.8),
            // cat 0, rank 3: outside the pool of 2
            det(1, 0, r(0.0, 0.0, 10.0, 10.0), 0.1),
            // cat 1, rank 1: on image 1's category-0 object; similar
            det(1, 1, r(0.0, 0.0, 10.0, 10.0), 0.95),
            // cat 1, rank 2: image 2 object, IoU 25/175 = 1/7; poor box
            det(2, 1, r(10.0, 10.0, 20.0, 20.0), 0.7),
            // cat 2, rank 1: on image 0's category-1 object; dissimilar
            det(0, 2, r(20.0, 20.0, 30.0, 30.0), 0.6),
            // cat 2, rank 2: outside the pool of 1
            det(1, 2, r(40.0, 0.0, 50.0, 10.0), 0.5),
        ];
        let labels = classify(&dets, &gt, &pairs(), 3).unwrap();
        let kinds: Vec<(f64, ErrorKind)> = labels.iter().map(|(d, k)| (d.score, *k)).collect();
        assert_eq!(
            kinds,
            vec![
                (0.9, ErrorKind::Cor),
                (0.8, ErrorKind::Loc),
                (0.95, ErrorKind::Sim),
                (0.7, ErrorKind::Loc),
                (0.6, ErrorKind::Oth),
            ]
        );
        let b = diagnose(&dets, &gt, &pairs(), 3).unwrap();
        assert_eq!((b.total, b.n_gt), (5, 5));
        assert_eq!(ErrorKind::ALL.map(|k| b.count(k)), [1, 2, 1, 1, 0]);
        assert!((b.fraction_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn background_beats_nothing() {
        let gt = gts();
        let b = diagnose(
            &[det(2, 0, r(50.0, 50.0, 52.0, 52.0), 0.3)],
            &gt,
            &pairs(),
            3,
        )
        .unwrap();
        assert_eq!(b.count(ErrorKind::Bg), 1);
        assert_eq!((b.total, b.n_gt), (1, 5));
    }

    #[test]
    fn similarity_map_must_cover_categories() {
        let mut m = pairs();
        m.remove(&2);
        assert!(matches!(
            diagnose(&[], &gts(), &m, 3),
            Err(EvalError::Similarity(_))
        ));
        let mut m = pairs();
        m.get_mut(&2).unwrap().insert(7);
        assert!(diagnose(&[], &gts(), &m, 3).is_err());
    }
}
