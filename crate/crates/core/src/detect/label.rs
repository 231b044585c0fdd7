use serde::{Deserialize, Serialize};

use crate::region::Region;

/// A ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub region: Region,
    pub category: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalLabel {
    Category(usize),
    Background,
    /// Between the thresholds; not used for training.
    Ignored,
}

impl ProposalLabel {
    /// Softmax class: 0 for background, `c + 1` for category `c`.
    pub fn class_index(self) -> Option<usize> {
        match self {
            ProposalLabel::Category(c) => Some(c + 1),
            ProposalLabel::Background => Some(0),
            ProposalLabel::Ignored => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledProposal {
    pub region: Region,
    pub label: ProposalLabel,
    /// Ground truth with the highest IoU, if any overlaps.
    pub matched_gt: Option<usize>,
    pub iou: f64,
}

pub fn iou(a: &Region, b: &Region) -> f64 {
    a.iou(b)
}

/// Labels each proposal by its highest-IoU ground truth (ties broken by
/// smaller category, then smaller coordinates, so the result does not
/// depend on input order): that category at `iou >= pos_thresh`, background below
/// `neg_thresh`, ignored in between.
pub fn assign_labels(
    proposals: &[Region],
    ground_truth: &[GroundTruth],
    pos_thresh: f64,
    neg_thresh: f64,
) -> Vec<LabeledProposal> {
    debug_assert!(0.0 <= neg_thresh && neg_thresh <= pos_thresh && pos_thresh <= 1.0);
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in ground_truth.iter().enumerate() {
                let v = p.iou(&gt.region);
                let better = match best {
                    None => v > 0.0,
                    Some((bg, bv)) => {
                        let key = |gt: &GroundTruth| (gt.category, gt.region.to_array());
                        v > bv || (v == bv && key(gt) < key(&ground_truth[bg]))
                    }
                };
                if better {
                    best = Some((g, v));
                }
            }
            let iou = best.map_or(0.0, |(_, v)| v);
            let label = match best {
                Some((g, v)) if v >= pos_thresh => {
                    ProposalLabel::Category(ground_truth[g].category)
                }
                _ if iou < neg_thresh => ProposalLabel::Background,
                _ => ProposalLabel::Ignored,
            };
            LabeledProposal {
                region: *p,
                label,
                matched_gt: best.map(|(g, _)| g),
                iou,
            }
        })
        .collect()
}
