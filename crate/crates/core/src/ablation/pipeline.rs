use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BackboneKind, HeadKind, InitKind, PipelineConfig, ResolvedEntry, SplitSize};
use super::AblationError;
use crate::detect::{
    assign_labels, mean_loss, pool_region, sgd_train, train_svm, Detection, PoolSpec, RoiDataset,
    RoiSample, SvmHead,
};
use crate::eval::{ap_at, coco_ap, diagnose, nms, ApResult, ErrorBreakdown, Interpolation};
use crate::noc::{InitMode, NocNet};
use crate::pyramid::{build_pyramid, Backbone};
use crate::region::Region;
use crate::synth::{jitter_proposals, DatasetManifest, ImageEntry, Split};
use crate::tensor::{elementwise_max, Tensor};

/// Generator for one purpose within one seed's run.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_BACKBONE: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_NOC: u64 = 1 << 20;
const STREAM_TRAIN: u64 = 2 << 20;
const STREAM_PROPOSALS: u64 = 1 << 32;

/// Proposals of one image with their training labels.
#[derive(Clone, Debug)]
pub struct RoiImage {
    pub id: usize,
    pub size: (usize, usize),
    pub regions: Vec<Region>,
    /// Softmax class: 0 background, `c + 1` for category `c`.
    pub class: Vec<usize>,
    /// Highest IoU with any object.
    pub max_iou: Vec<f64>,
    /// Ground-truth boxes are included as proposals for training images.
    pub is_gt: Vec<bool>,
}

/// Pooled features of every proposal, indexed `[image][roi]`.
#[derive(Default)]
struct Pooled {
    single: Option<Vec<Vec<Tensor>>>,
    pair: Option<Vec<Vec<(Tensor, Tensor)>>>,
}

fn scales_key(scales: &[f64]) -> Vec<u64> {
    scales.iter().map(|s| s.to_bits()).collect()
}

/// Everything shared by the entries of one seed: backbone, proposals and
/// pooled features (per scale set).
pub struct SeedContext {
    pub seed: u64,
    pub backbone: Backbone,
    pub train: Vec<RoiImage>,
    pub test: Vec<RoiImage>,
    pub train_small: usize,
    pub n_categories: usize,
    pool: PoolSpec,
    pooled_train: BTreeMap<Vec<u64>, Pooled>,
    pooled_test: BTreeMap<Vec<u64>, Pooled>,
}

fn roi_images(
    entries: &[&ImageEntry],
    cfg: &PipelineConfig,
    seed: u64,
    with_gt: bool,
) -> Vec<RoiImage> {
    entries
        .iter()
        .map(|e| {
            let gts: Vec<Region> = e.objects.iter().map(|o| o.region).collect();
            let mut rng = stream_rng(seed, STREAM_PROPOSALS + e.id as u64);
            let mut regions = if with_gt { gts.clone() } else { Vec::new() };
            let n_gt = regions.len();
            regions.extend(jitter_proposals(
                &gts,
                (e.height, e.width),
                &cfg.jitter,
                &mut rng,
            ));
            let labels = assign_labels(&regions, &e.objects, cfg.fg_iou, cfg.fg_iou);
            RoiImage {
                id: e.id,
                size: (e.height, e.width),
                class: labels
                    .iter()
                    .map(|l| l.label.class_index().unwrap_or(0))
                    .collect(),
                max_iou: labels.iter().map(|l| l.iou).collect(),
                is_gt: (0..regions.len()).map(|i| i < n_gt).collect(),
                regions,
            }
        })
        .collect()
}

fn pool_images(
    images: &[RoiImage],
    tensors: &BTreeMap<usize, Tensor>,
    backbone: &Backbone,
    scales: &[f64],
    pool: &PoolSpec,
    single: bool,
    pair: bool,
) -> Result<Pooled, AblationError> {
    let mut out = Pooled {
        single: single.then(Vec::new),
        pair: pair.then(Vec::new),
    };
    for img in images {
        let pyr = build_pyramid(&tensors[&img.id], backbone, scales)?;
        if let Some(s) = &mut out.single {
            let mut v = Vec::with_capacity(img.regions.len());
            for r in &img.regions {
                v.push(pool_region(&pyr, r, pool, false)?.0);
            }
            s.push(v);
        }
        if let Some(p) = &mut out.pair {
            let mut v = Vec::with_capacity(img.regions.len());
            for r in &img.regions {
                let (a, b) = pool_region(&pyr, r, pool, true)?;
                v.push((a, b.expect("dual pooling returns a pair")));
            }
            p.push(v);
        }
    }
    Ok(out)
}

/// Whole-image category presence: global average pooling over the
/// backbone map, a linear layer and per-category logistic loss. Only the
/// backbone is kept.
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    images: &[(Tensor, Vec<bool>)],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, AblationError> {
    let n_cat = images.first().map_or(0, |(_, t)| t.len());
    let c = backbone.channels();
    let mut rng = stream_rng(seed, STREAM_PRETRAIN);
    let mut w = vec![0f64; n_cat * c];
    let mut b = vec![0f64; n_cat];
    let mut vel: Vec<(Tensor, Tensor)> = backbone
        .convs()
        .map(|p| {
            (
                Tensor::zeros(p.kernel.shape()),
                Tensor::zeros(p.bias.shape()),
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    let lr32 = lr as f32;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (img, target) = &images[i];
            let (map, cache) = backbone.forward_cached(img)?;
            let (_, h, wd) = map.dims3("pretrain")?;
            let hw = (h * wd) as f64;
            let pooled: Vec<f64> = (0..c)
                .map(|ch| {
                    map.data()[ch * h * wd..(ch + 1) * h * wd]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / hw
                })
                .collect();
            let mut d_pooled = vec![0f64; c];
            for k in 0..n_cat {
                let z = b[k] + (0..c).map(|ch| w[k * c + ch] * pooled[ch]).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let t = target[k] as u8 as f64;
                total += -(t * p.max(1e-12).ln() + (1.0 - t) * (1.0 - p).max(1e-12).ln());
                let d = p - t;
                for ch in 0..c {
                    d_pooled[ch] += d * w[k * c + ch];
                    w[k * c + ch] -= lr * d * pooled[ch];
                }
                b[k] -= lr * d;
            }
            let d_map = Tensor::from_fn(map.shape(), |idx| (d_pooled[idx / (h * wd)] / hw) as f32);
            let grads = backbone.backward(&cache, &d_map)?;
            for (p, ((gw, gb), (vw, vb))) in
                backbone.convs_mut().zip(grads.iter().zip(vel.iter_mut()))
            {
                vw.scale(0.9);
                vw.add_scaled(gw, -lr32);
                vb.scale(0.9);
                vb.add_scaled(gb, -lr32);
                p.kernel.add_scaled(vw, 1.0);
                p.bias.add_scaled(vb, 1.0);
            }
        }
        let mean = total / images.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(AblationError::Stage(format!(
                "backbone pre-training diverged (lr {lr})"
            )));
        }
        losses.push(mean);
    }
    Ok(losses)
}

impl SeedContext {
    /// Builds the backbone, proposals and pooled features every entry in
    /// `entries` will need.
    pub fn prepare(
        manifest: &DatasetManifest,
        root: &Path,
        cfg: &PipelineConfig,
        entries: &[ResolvedEntry],
        seed: u64,
    ) -> Result<Self, AblationError> {
        let n_categories = manifest.n_categories();
        let train_entries = manifest.train_images(false);
        let test_entries: Vec<&ImageEntry> = manifest.split(Split::Test).collect();
        let mut tensors = BTreeMap::new();
        for e in train_entries.iter().chain(&test_entries) {
            tensors.insert(e.id, manifest.load_image(root, e)?);
        }
        let channels = tensors.values().next().map_or(3, |t| t.shape()[0]);
        let mut backbone = Backbone::desk_default(
            channels,
            cfg.backbone_width,
            &mut stream_rng(seed, STREAM_BACKBONE),
        );
        if cfg.backbone == BackboneKind::Trained {
            let data: Vec<(Tensor, Vec<bool>)> = train_entries
                .iter()
                .map(|e| {
                    let present = (0..n_categories)
                        .map(|c| e.objects.iter().any(|o| o.category == c))
                        .collect();
                    (tensors[&e.id].clone(), present)
                })
                .collect();
            let losses = pretrain_backbone(
                &mut backbone,
                &data,
                cfg.backbone_epochs,
                cfg.backbone_lr,
                seed,
            )?;
            log::info!("seed {seed}: backbone pre-training loss {losses:?}");
        }
        let train = roi_images(&train_entries, cfg, seed, true);
        let test = roi_images(&test_entries, cfg, seed, false);
        let pool = PoolSpec {
            m: cfg.pool_m,
            target_extent: cfg.target_extent,
        };

        // which pooled variants each scale set needs
        let mut needs: BTreeMap<Vec<u64>, (Vec<f64>, bool, bool)> = BTreeMap::new();
        for e in entries {
            let n = needs
                .entry(scales_key(&e.scales))
                .or_insert((e.scales.clone(), false, false));
            if e.spec.has_maxout() {
                n.2 = true;
            } else {
                n.1 = true;
            }
        }
        let mut pooled_train = BTreeMap::new();
        let mut pooled_test = BTreeMap::new();
        for (key, (scales, single, pair)) in needs {
            pooled_train.insert(
                key.clone(),
                pool_images(&train, &tensors, &backbone, &scales, &pool, single, pair)?,
            );
            pooled_test.insert(
                key,
                pool_images(&test, &tensors, &backbone, &scales, &pool, single, pair)?,
            );
        }
        Ok(Self {
            seed,
            backbone,
            train,
            test,
            train_small: manifest.train_small,
            n_categories,
            pool,
            pooled_train,
            pooled_test,
        })
    }

    /// Pooled NoC input shape.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.backbone.channels(), self.pool.m, self.pool.m]
    }

    fn train_images(&self, split: SplitSize) -> usize {
        match split {
            SplitSize::Small => self.train_small.min(self.train.len()),
            SplitSize::Large => self.train.len(),
        }
    }

    fn inputs(pooled: &Pooled, maxout: bool, img: usize, roi: usize) -> (&Tensor, Option<&Tensor>) {
        if maxout {
            let (a, b) = &pooled.pair.as_ref().expect("pair pooling prepared")[img][roi];
            (a, Some(b))
        } else {
            (
                &pooled.single.as_ref().expect("single pooling prepared")[img][roi],
                None,
            )
        }
    }

    /// Training samples of `entry` as an SGD dataset.
    pub fn roi_dataset(&self, entry: &ResolvedEntry) -> RoiDataset {
        let pooled = &self.pooled_train[&scales_key(&entry.scales)];
        let maxout = entry.spec.has_maxout();
        let images = (0..self.train_images(entry.split))
            .map(|i| {
                (0..self.train[i].regions.len())
                    .map(|r| {
                        let (a, b) = Self::inputs(pooled, maxout, i, r);
                        RoiSample {
                            pooled_a: a.clone(),
                            pooled_b: b.cloned(),
                            class: self.train[i].class[r],
                        }
                    })
                    .collect()
            })
            .collect();
        RoiDataset { images }
    }
}

/// The feature a post-hoc SVM sees: NoC features, or the flattened pooled
/// input (max-merged across scales for maxout) without a trained NoC.
fn svm_feature(
    net: Option<&NocNet>,
    a: &Tensor,
    b: Option<&Tensor>,
) -> Result<Vec<f32>, AblationError> {
    Ok(match net {
        Some(n) => n.extract_features(a, b)?.into_data(),
        None => match b {
            Some(b) => elementwise_max(a, b)?.into_data(),
            None => a.data().to_vec(),
        },
    })
}

/// Artifacts of one trained entry.
pub struct TrainedEntry {
    pub net: Option<NocNet>,
    pub svm: Option<SvmHead>,
    /// Mean loss on the full training set before and after SGD.
    pub init_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub epoch_loss: Vec<f64>,
    /// Test detections after per-(image, category) suppression.
    pub detections: Vec<Detection>,
}

/// Trains the NoC (unless it is a single-layer SVM baseline), fits the
/// SVM head, and scores the test proposals.
pub fn train_entry(
    ctx: &SeedContext,
    cfg: &PipelineConfig,
    entry: &ResolvedEntry,
    donor: Option<&NocNet>,
) -> Result<TrainedEntry, AblationError> {
    let maxout = entry.spec.has_maxout();
    let key = scales_key(&entry.scales);
    let mut out = TrainedEntry {
        net: None,
        svm: None,
        init_loss: None,
        final_loss: None,
        epoch_loss: Vec::new(),
        detections: Vec::new(),
    };
    if !entry.svm_on_pooled() {
        let mut rng = stream_rng(ctx.seed, STREAM_NOC + entry.index as u64);
        let init = match (entry.init, donor) {
            (InitKind::Gaussian, _) => InitMode::Gaussian { sigma: cfg.sigma },
            (InitKind::FanIn, _) => InitMode::GaussianFanIn,
            (InitKind::Identity, Some(d)) => InitMode::IdentityExtend { donor: d },
            (InitKind::Identity, None) => {
                return Err(AblationError::Stage(format!(
                    "entry {}: donor unavailable",
                    entry.name
                )))
            }
        };
        let mut net = NocNet::build(&entry.spec, ctx.input_shape(), init, &mut rng)?;
        let data = ctx.roi_dataset(entry);
        let all: Vec<&RoiSample> = data.images.iter().flatten().collect();
        out.init_loss = Some(mean_loss(&net, &all)?);
        let mut train = entry.train.clone();
        train.seed ^= stream_rng(ctx.seed, STREAM_TRAIN + entry.index as u64).next_u64();
        let report = sgd_train(&mut net, &data, &train)?;
        out.final_loss = Some(mean_loss(&net, &all)?);
        out.epoch_loss = report.epoch_loss;
        out.net = Some(net);
    }
    let net = out.net.as_ref();
    if entry.head == HeadKind::Svm {
        let pooled = &ctx.pooled_train[&key];
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..ctx.train_images(entry.split) {
            let img = &ctx.train[i];
            for r in 0..img.regions.len() {
                let label = if img.is_gt[r] {
                    Some(img.class[r] - 1)
                } else if img.max_iou[r] < cfg.svm_neg_iou {
                    None
                } else {
                    continue;
                };
                let (a, b) = SeedContext::inputs(pooled, maxout, i, r);
                feats.push(svm_feature(net, a, b)?);
                labels.push(label);
            }
        }
        out.svm = Some(train_svm(&feats, &labels, ctx.n_categories, &cfg.svm)?);
    }

    let pooled = &ctx.pooled_test[&key];
    for (i, img) in ctx.test.iter().enumerate() {
        let mut per_cat: Vec<Vec<Detection>> = vec![Vec::new(); ctx.n_categories];
        for (r, region) in img.regions.iter().enumerate() {
            let (a, b) = SeedContext::inputs(pooled, maxout, i, r);
            let scores = match (&out.svm, net) {
                (Some(head), _) => head.scores(&svm_feature(net, a, b)?),
                (None, Some(n)) => {
                    let (logits, _) = n.forward(a, b)?;
                    crate::tensor::softmax(&logits)[1..].to_vec()
                }
                (None, None) => unreachable!("an entry without a NoC always has an SVM head"),
            };
            for (cat, &score) in scores.iter().enumerate() {
                if score.is_finite() {
                    per_cat[cat].push(Detection {
                        image_id: img.id,
                        category: cat,
                        x1: region.x1,
                        y1: region.y1,
                        x2: region.x2,
                        y2: region.y2,
                        score,
                    });
                }
            }
        }
        for dets in per_cat {
            out.detections.extend(nms(&dets, cfg.nms_iou));
        }
    }
    Ok(out)
}

/// Evaluation of one (entry, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub ap50: ApResult,
    pub ap75: ApResult,
    pub coco: ApResult,
    pub breakdown: ErrorBreakdown,
    pub init_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub n_detections: usize,
}

pub fn evaluate_detections(
    detections: &[Detection],
    manifest: &DatasetManifest,
) -> Result<(ApResult, ApResult, ApResult, ErrorBreakdown), AblationError> {
    let gt = manifest.ground_truth(Split::Test);
    let n = manifest.n_categories();
    Ok((
        ap_at(detections, &gt, n, 0.5, Interpolation::AllPoints),
        ap_at(detections, &gt, n, 0.75, Interpolation::AllPoints),
        coco_ap(detections, &gt, n),
        diagnose(detections, &gt, &manifest.similarity, n)?,
    ))
}

pub fn run_metrics(
    trained: &TrainedEntry,
    manifest: &DatasetManifest,
) -> Result<RunMetrics, AblationError> {
    let (ap50, ap75, coco, breakdown) = evaluate_detections(&trained.detections, manifest)?;
    Ok(RunMetrics {
        ap50,
        ap75,
        coco,
        breakdown,
        init_loss: trained.init_loss,
        final_loss: trained.final_loss,
        n_detections: trained.detections.len(),
    })
}
