use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AblationError;
use crate::detect::{SvmConfig, TrainConfig};
use crate::noc::{parse_spec, NocSpec};
use crate::synth::JitterConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// N(0, sigma^2) weights.
    Gaussian,
    /// N(0, 2 / fan_in) weights.
    #[default]
    FanIn,
    /// Extends the trained `donor` entry of the same seed with
    /// identity-initialized conv layers.
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Post-hoc linear SVMs on the NoC features (on the pooled features for
    /// a single fc layer, which is then never trained).
    #[default]
    Svm,
    /// The NoC's own softmax probabilities.
    Softmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSize {
    Small,
    #[default]
    Large,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Frozen random conv features.
    #[default]
    Random,
    /// Pre-trained on the training split (whole-image category presence),
    /// then frozen.
    Trained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ap50,
    Ap75,
    Coco,
    Diagnose,
}

/// Settings shared by all entries unless an entry overrides them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub split: SplitSize,
    pub backbone: BackboneKind,
    pub backbone_width: usize,
    /// Epochs of backbone pre-training when `backbone = "trained"`.
    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    pub scales: Vec<f64>,
    /// Side length (pixels) that scale selection aims for.
    pub target_extent: f64,
    pub pool_m: usize,
    pub init: InitKind,
    pub sigma: f32,
    pub head: HeadKind,
    /// Proposals at or above this IoU are foreground for NoC training.
    pub fg_iou: f64,
    /// SVM negatives overlap every object by less than this.
    pub svm_neg_iou: f64,
    pub nms_iou: f64,
    pub train: TrainConfig,
    pub svm: SvmConfig,
    pub jitter: JitterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split: SplitSize::Large,
            backbone: BackboneKind::Random,
            backbone_width: 16,
            backbone_epochs: 4,
            backbone_lr: 0.01,
            scales: vec![1.0, 1.5, 2.0],
            target_extent: 32.0,
            pool_m: 4,
            init: InitKind::FanIn,
            sigma: 0.01,
            head: HeadKind::Svm,
            fg_iou: 0.5,
            svm_neg_iou: 0.3,
            nms_iou: 0.3,
            train: TrainConfig {
                rois_per_image: 32,
                epochs: 16,
                ..TrainConfig::default()
            },
            svm: SvmConfig::default(),
            jitter: JitterConfig::default(),
        }
    }
}

/// One matrix row. Unset fields fall back to the pipeline defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub name: String,
    pub spec: String,
    pub init: Option<InitKind>,
    pub donor: Option<String>,
    /// Checked against the architecture string when given.
    pub maxout: Option<bool>,
    pub scales: Option<Vec<f64>>,
    pub head: Option<HeadKind>,
    pub split: Option<SplitSize>,
    pub train: Option<TrainConfig>,
}

/// An entry with every default applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedEntry {
    pub index: usize,
    pub name: String,
    pub spec: NocSpec,
    pub init: InitKind,
    pub donor: Option<usize>,
    pub scales: Vec<f64>,
    pub head: HeadKind,
    pub split: SplitSize,
    pub train: TrainConfig,
}

impl ResolvedEntry {
    /// A single-fc SVM entry needs no NoC training.
    pub fn svm_on_pooled(&self) -> bool {
        self.head == HeadKind::Svm && self.spec.num_fc() < 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub name: String,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(rename = "entry")]
    pub entries: Vec<MatrixEntry>,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Ap50, Metric::Ap75, Metric::Coco, Metric::Diagnose]
}

impl ExperimentMatrix {
    pub fn from_toml(text: &str) -> Result<Self, AblationError> {
        toml::from_str(text).map_err(|e| AblationError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AblationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AblationError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| AblationError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies defaults and checks every entry against a dataset with
    /// `n_categories` categories.
    pub fn resolve(&self, n_categories: usize) -> Result<Vec<ResolvedEntry>, AblationError> {
        let bad = |m: String| Err(AblationError::Config(m));
        if self.entries.is_empty() {
            return bad(format!("matrix {} has no entries", self.name));
        }
        let p = &self.pipeline;
        if p.pool_m == 0 || p.backbone_width == 0 {
            return bad("pool_m and backbone_width must be positive".into());
        }
        if !(p.target_extent > 0.0) {
            return bad(format!(
                "target_extent {} must be positive",
                p.target_extent
            ));
        }
        for (k, v) in [
            ("fg_iou", p.fg_iou),
            ("svm_neg_iou", p.svm_neg_iou),
            ("nms_iou", p.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} {v} not in [0, 1]"));
            }
        }
        let mut names = BTreeSet::new();
        let mut out: Vec<ResolvedEntry> = Vec::with_capacity(self.entries.len());
        for (index, e) in self.entries.iter().enumerate() {
            if e.name.is_empty() || !names.insert(e.name.clone()) {
                return bad(format!(
                    "entry {index}: name {:?} is empty or repeated",
                    e.name
                ));
            }
            if e.name.contains([',', '/', '"', '\n']) {
                return bad(format!(
                    "entry {:?}: name may not contain , / \" or newlines",
                    e.name
                ));
            }
            let spec = parse_spec(&e.spec, n_categories)
                .map_err(|err| AblationError::Config(format!("entry {}: {err}", e.name)))?;
            if let Some(m) = e.maxout {
                if m != spec.has_maxout() {
                    return bad(format!(
                        "entry {}: maxout = {m} but spec is {}",
                        e.name, e.spec
                    ));
                }
            }
            let init = e.init.unwrap_or(p.init);
            let donor = match (init, &e.donor) {
                (InitKind::Identity, Some(d)) => match out.iter().find(|r| &r.name == d) {
                    Some(r) => Some(r.index),
                    None => {
                        return bad(format!(
                            "entry {}: donor {d} must be an earlier entry",
                            e.name
                        ))
                    }
                },
                (InitKind::Identity, None) => {
                    return bad(format!("entry {}: identity init needs a donor", e.name))
                }
                (_, Some(_)) => {
                    return bad(format!(
                        "entry {}: donor given without identity init",
                        e.name
                    ))
                }
                (_, None) => None,
            };
            let head = e.head.unwrap_or(p.head);
            let train = e.train.clone().unwrap_or_else(|| p.train.clone());
            train
                .validate()
                .map_err(|err| AblationError::Config(format!("entry {}: {err}", e.name)))?;
            let resolved = ResolvedEntry {
                index,
                name: e.name.clone(),
                spec,
                init,
                donor,
                scales: e.scales.clone().unwrap_or_else(|| p.scales.clone()),
                head,
                split: e.split.unwrap_or(p.split),
                train,
            };
            if resolved.spec.has_maxout() && resolved.scales.len() < 2 {
                return bad(format!(
                    "entry {}: maxout needs at least two scales",
                    e.name
                ));
            }
            if let Some(d) = donor {
                if out[d].svm_on_pooled() {
                    return bad(format!(
                        "entry {}: donor {} is never trained",
                        e.name, out[d].name
                    ));
                }
            }
            out.push(resolved);
        }
        Ok(out)
    }
}
