use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DetectError;
use crate::noc::{NocGrads, NocNet};
use crate::tensor::{softmax_xent, Tensor};

/// One RoI with its pooled feature(s) and softmax class (0 = background).
#[derive(Clone, Debug)]
pub struct RoiSample {
    pub pooled_a: Tensor,
    pub pooled_b: Option<Tensor>,
    pub class: usize,
}

/// Training RoIs grouped by source image. Pooling happens once up front;
/// the backbone is frozen so the pooled features never change.
#[derive(Clone, Debug, Default)]
pub struct RoiDataset {
    pub images: Vec<Vec<RoiSample>>,
}

impl RoiDataset {
    pub fn len(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Epochs after which the rate is multiplied by `lr_gamma`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub images_per_batch: usize,
    pub rois_per_image: usize,
    pub positive_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            lr_decay_epochs: vec![],
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            images_per_batch: 2,
            rois_per_image: 64,
            positive_fraction: 0.25,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::Config(m));
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!(
                "positive_fraction {} not in (0, 1)",
                self.positive_fraction
            ));
        }
        if self.images_per_batch == 0 || self.rois_per_image == 0 {
            return bad("minibatch sizes must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!(
                "base_lr {} must be finite and non-negative",
                self.base_lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.lr_gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Picks up to `n` RoIs from one image with at most `positive_fraction` of
/// them foreground; the rest are background.
fn sample_image(
    rois: &[RoiSample],
    n: usize,
    positive_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].class != 0).collect();
    let mut neg: Vec<usize> = (0..rois.len()).filter(|&i| rois[i].class == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos
        .len()
        .min((n as f64 * positive_fraction).round() as usize);
    let n_neg = neg.len().min(n - n_pos);
    let mut out: Vec<usize> = pos[..n_pos].to_vec();
    out.extend_from_slice(&neg[..n_neg]);
    out
}

/// Mean softmax loss and gradients over a set of samples.
pub fn batch_gradient(
    net: &NocNet,
    samples: &[&RoiSample],
) -> Result<(f64, NocGrads), DetectError> {
    let mut total = NocGrads::zeros_like(net);
    let mut loss = 0.0;
    for s in samples {
        let (logits, cache) = net.forward(&s.pooled_a, s.pooled_b.as_ref())?;
        let (l, d) = softmax_xent(&logits, s.class)?;
        loss += l;
        let g = net.backward(&cache, &d)?;
        total.accumulate(&g);
    }
    let inv = 1.0 / samples.len().max(1) as f32;
    for (w, b) in &mut total.layers {
        w.scale(inv);
        b.scale(inv);
    }
    Ok((loss / samples.len().max(1) as f64, total))
}

/// Momentum SGD on the softmax loss. Weight decay applies to weights, not
/// biases. Deterministic for a given `config.seed`.
pub fn sgd_train(
    net: &mut NocNet,
    dataset: &RoiDataset,
    config: &TrainConfig,
) -> Result<TrainReport, DetectError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DetectError::EmptyDataset);
    }
    let classes = net.num_classes();
    if let Some(s) = dataset.images.iter().flatten().find(|s| s.class >= classes) {
        return Err(DetectError::Config(format!(
            "sample class {} outside the net's {classes} outputs",
            s.class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<(Tensor, Tensor)> = NocGrads::zeros_like(net).layers;
    let mut order: Vec<usize> = (0..dataset.images.len())
        .filter(|&i| !dataset.images[i].is_empty())
        .collect();
    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(config.epochs),
        steps: 0,
    };
    let mu = config.momentum as f32;
    let wd = config.weight_decay as f32;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.images_per_batch) {
            let mut batch: Vec<&RoiSample> = Vec::new();
            for &img in chunk {
                let rois = &dataset.images[img];
                for i in sample_image(
                    rois,
                    config.rois_per_image,
                    config.positive_fraction,
                    &mut rng,
                ) {
                    batch.push(&rois[i]);
                }
            }
            report.steps += 1;
            let (loss, grads) = match batch_gradient(net, &batch) {
                Err(e) if e.is_non_finite() => {
                    return Err(DetectError::Diverged {
                        step: report.steps,
                        lr,
                    })
                }
                r => r?,
            };
            if !loss.is_finite() {
                return Err(DetectError::Diverged {
                    step: report.steps,
                    lr,
                });
            }
            sum += loss;
            batches += 1;
            for (layer, ((gw, gb), (vw, vb))) in net
                .layers_mut()
                .iter_mut()
                .zip(grads.layers.iter().zip(velocity.iter_mut()))
            {
                let (w, b) = layer.params_mut();
                vw.scale(mu);
                vw.add_scaled(gw, -lr as f32);
                vw.add_scaled(w, -(lr as f32) * wd);
                vb.scale(mu);
                vb.add_scaled(gb, -lr as f32);
                w.add_scaled(vw, 1.0);
                b.add_scaled(vb, 1.0);
            }
            if net
                .layers()
                .iter()
                .any(|l| l.weight().check_finite().is_err() || l.bias().check_finite().is_err())
            {
                return Err(DetectError::Diverged {
                    step: report.steps,
                    lr,
                });
            }
        }
        report.epoch_loss.push(sum / batches.max(1) as f64);
    }
    Ok(report)
}

/// Fraction of samples whose arg-max logit is their class.
pub fn accuracy(net: &NocNet, samples: &[RoiSample]) -> Result<f64, DetectError> {
    let mut hit = 0usize;
    for s in samples {
        let (logits, _) = net.forward(&s.pooled_a, s.pooled_b.as_ref())?;
        let d = logits.data();
        let arg = (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b });
        hit += (arg == s.class) as usize;
    }
    Ok(hit as f64 / samples.len().max(1) as f64)
}

/// Mean softmax loss over `samples`, without gradients.
pub fn mean_loss(net: &NocNet, samples: &[&RoiSample]) -> Result<f64, DetectError> {
    let mut total = 0.0;
    for s in samples {
        let (logits, _) = net.forward(&s.pooled_a, s.pooled_b.as_ref())?;
        total += softmax_xent(&logits, s.class)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}
