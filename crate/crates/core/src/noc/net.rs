use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::spec::{NocSpec, NocToken};
use super::NocError;
use crate::tensor::{
    conv2d_backward, conv2d_forward, elementwise_max, elementwise_max_backward, fc_backward,
    fc_forward, relu, relu_backward, ConvParams, LayerGrad, Tensor,
};

/// One trainable layer of a NoC head.
#[derive(Clone, Debug, PartialEq)]
pub enum NocLayer {
    Conv(ConvParams),
    Fc { weight: Tensor, bias: Tensor },
}

impl NocLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor, NocError> {
        Ok(match self {
            NocLayer::Conv(p) => conv2d_forward(x, p)?,
            NocLayer::Fc { weight, bias } => fc_forward(x, weight, bias)?,
        })
    }

    fn backward(&self, x: &Tensor, d: &Tensor) -> Result<LayerGrad, NocError> {
        Ok(match self {
            NocLayer::Conv(p) => conv2d_backward(x, p, d)?,
            NocLayer::Fc { weight, .. } => fc_backward(x, weight, d)?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        match self {
            NocLayer::Conv(p) => &p.kernel,
            NocLayer::Fc { weight, .. } => weight,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            NocLayer::Conv(p) => &p.bias,
            NocLayer::Fc { bias, .. } => bias,
        }
    }

    pub fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match self {
            NocLayer::Conv(p) => (&mut p.kernel, &mut p.bias),
            NocLayer::Fc { weight, bias } => (weight, bias),
        }
    }

    pub fn is_fc(&self) -> bool {
        matches!(self, NocLayer::Fc { .. })
    }
}

/// How a freshly built head gets its weights.
#[derive(Clone, Copy, Debug)]
pub enum InitMode<'a> {
    /// Every weight from N(0, sigma^2); biases zero.
    Gaussian { sigma: f32 },
    /// Per-layer N(0, 2 / fan_in); biases zero.
    GaussianFanIn,
    /// Copies the donor's layers and makes every added conv layer the
    /// per-channel identity, so the new head starts as the donor's function
    /// on non-negative (post-ReLU) inputs.
    IdentityExtend { donor: &'a NocNet },
}

/// Recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitProvenance {
    Gaussian { sigma: f32 },
    GaussianFanIn,
    IdentityExtend { donor_spec: String },
    Loaded,
}

/// An instantiated head. When the architecture has a maxout token, the layers before
/// it run once per pathway with the same weights, so the parameter count
/// is that of the architecture without maxout.
#[derive(Clone, Debug, PartialEq)]
pub struct NocNet {
    pub(crate) spec: NocSpec,
    pub(crate) input_shape: [usize; 3],
    pub(crate) layers: Vec<NocLayer>,
    pub(crate) provenance: InitProvenance,
}

/// Activations retained by [`NocNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Per pathway: input, then each prefix layer's output.
    prefix: Vec<Vec<Tensor>>,
    /// Merged (or sole) input to the remaining layers, then their outputs.
    suffix: Vec<Tensor>,
}

/// Parameter gradients (one `(weight, bias)` pair per layer, shared prefix
/// layers summed over both pathways) and input gradients.
#[derive(Clone, Debug)]
pub struct NocGrads {
    pub layers: Vec<(Tensor, Tensor)>,
    pub d_input_a: Tensor,
    pub d_input_b: Option<Tensor>,
}

impl NocGrads {
    pub fn zeros_like(net: &NocNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight().shape()),
                        Tensor::zeros(l.bias().shape()),
                    )
                })
                .collect(),
            d_input_a: Tensor::zeros(&net.input_shape),
            d_input_b: None,
        }
    }

    /// Adds parameter gradients of `other` into `self`.
    pub fn accumulate(&mut self, other: &NocGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_scaled(ow, 1.0);
            b.add_scaled(ob, 1.0);
        }
    }
}

impl NocNet {
    /// Instantiates `spec` for pooled inputs of shape `C x m x m`.
    pub fn build<R: Rng + ?Sized>(
        spec: &NocSpec,
        input_shape: [usize; 3],
        init: InitMode<'_>,
        rng: &mut R,
    ) -> Result<Self, NocError> {
        let [c, h, w] = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(NocError::Shape(format!(
                "input shape {input_shape:?} has a zero extent"
            )));
        }
        let mut shapes = Vec::new();
        let mut channels = c;
        let mut flat: Option<usize> = None;
        for tok in spec.layers() {
            match tok {
                NocToken::Conv(out) => {
                    shapes.push((vec![out, channels, 3, 3], out));
                    channels = out;
                }
                NocToken::Fc(out) => {
                    let inp = flat.unwrap_or(channels * h * w);
                    shapes.push((vec![out, inp], out));
                    flat = Some(out);
                }
                NocToken::Maxout => unreachable!(),
            }
        }

        let (layers, provenance) = match init {
            InitMode::Gaussian { sigma } => (
                shapes
                    .iter()
                    .map(|(ws, b)| make_layer(ws, Tensor::randn(ws, sigma, rng), *b))
                    .collect::<Result<Vec<_>, _>>()?,
                InitProvenance::Gaussian { sigma },
            ),
            InitMode::GaussianFanIn => (
                shapes
                    .iter()
                    .map(|(ws, b)| {
                        let fan_in: usize = ws[1..].iter().product();
                        let sigma = (2.0 / fan_in as f32).sqrt();
                        make_layer(ws, Tensor::randn(ws, sigma, rng), *b)
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                InitProvenance::GaussianFanIn,
            ),
            InitMode::IdentityExtend { donor } => (
                identity_extend(spec, input_shape, &shapes, donor)?,
                InitProvenance::IdentityExtend {
                    donor_spec: donor.spec.to_string(),
                },
            ),
        };

        Ok(Self {
            spec: spec.clone(),
            input_shape,
            layers,
            provenance,
        })
    }

    /// Reassembles a head from stored layers, checking them against `spec`.
    pub fn from_layers(
        spec: NocSpec,
        input_shape: [usize; 3],
        layers: Vec<NocLayer>,
        provenance: InitProvenance,
    ) -> Result<Self, NocError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = NocNet::build(
            &spec,
            input_shape,
            InitMode::Gaussian { sigma: 0.0 },
            &mut rng,
        )?;
        if template.layers.len() != layers.len() {
            return Err(NocError::Shape(format!(
                "spec {spec} has {} layers, checkpoint has {}",
                template.layers.len(),
                layers.len()
            )));
        }
        for (i, (t, l)) in template.layers.iter().zip(&layers).enumerate() {
            if t.weight().shape() != l.weight().shape()
                || t.bias().shape() != l.bias().shape()
                || t.is_fc() != l.is_fc()
            {
                return Err(NocError::Shape(format!(
                    "layer {i} does not match spec {spec}"
                )));
            }
        }
        Ok(Self {
            spec,
            input_shape,
            layers,
            provenance,
        })
    }

    pub fn spec(&self) -> &NocSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[NocLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NocLayer] {
        &mut self.layers
    }

    pub fn provenance(&self) -> &InitProvenance {
        &self.provenance
    }

    pub fn has_maxout(&self) -> bool {
        self.spec.has_maxout()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.output_width()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight().len() + l.bias().len())
            .sum()
    }

    /// Number of distinct trainable arrays (weight and bias per layer).
    pub fn num_param_arrays(&self) -> usize {
        2 * self.layers.len()
    }

    fn prefix_len(&self) -> usize {
        self.spec.maxout_position().unwrap_or(0)
    }

    fn has_relu(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len()
    }

    fn run(&self, range: std::ops::Range<usize>, acts: &mut Vec<Tensor>) -> Result<(), NocError> {
        for j in range {
            let x = acts.last().expect("activation stack starts with the input");
            let mut y = self.layers[j].forward(x)?;
            if self.has_relu(j) {
                y = relu(&y);
            }
            acts.push(y);
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor, which: &str) -> Result<(), NocError> {
        if x.shape() != self.input_shape {
            return Err(NocError::Shape(format!(
                "pooled input {which} has shape {:?}, net expects {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Runs the head. `pooled_b` must be present exactly when the architecture has
    /// a maxout token.
    pub fn forward(
        &self,
        pooled_a: &Tensor,
        pooled_b: Option<&Tensor>,
    ) -> Result<(Tensor, ForwardCache), NocError> {
        self.check_input(pooled_a, "a")?;
        let n = self.layers.len();
        match (self.has_maxout(), pooled_b) {
            (false, None) => {
                let mut suffix = vec![pooled_a.clone()];
                self.run(0..n, &mut suffix)?;
                let logits = suffix.last().cloned().expect("non-empty");
                Ok((
                    logits,
                    ForwardCache {
                        prefix: vec![],
                        suffix,
                    },
                ))
            }
            (true, Some(b)) => {
                self.check_input(b, "b")?;
                let k = self.prefix_len();
                let mut pa = vec![pooled_a.clone()];
                let mut pb = vec![b.clone()];
                self.run(0..k, &mut pa)?;
                self.run(0..k, &mut pb)?;
                let merged = elementwise_max(&pa[k], &pb[k])?;
                let mut suffix = vec![merged];
                self.run(k..n, &mut suffix)?;
                let logits = suffix.last().cloned().expect("non-empty");
                Ok((
                    logits,
                    ForwardCache {
                        prefix: vec![pa, pb],
                        suffix,
                    },
                ))
            }
            (true, None) => Err(NocError::Inputs(format!(
                "spec {} has maxout and needs two pooled inputs",
                self.spec
            ))),
            (false, Some(_)) => Err(NocError::Inputs(format!(
                "spec {} has no maxout; a second pooled input is not accepted",
                self.spec
            ))),
        }
    }

    fn back_range(
        &self,
        range: std::ops::Range<usize>,
        acts: &[Tensor],
        mut d: Tensor,
        grads: &mut [(Tensor, Tensor)],
    ) -> Result<Tensor, NocError> {
        let start = range.start;
        for j in range.rev() {
            let out = &acts[j - start + 1];
            if self.has_relu(j) {
                d = relu_backward(out, &d)?;
            }
            let g = self.layers[j].backward(&acts[j - start], &d)?;
            grads[j].0.add_scaled(&g.d_weights, 1.0);
            grads[j].1.add_scaled(&g.d_bias, 1.0);
            d = g.d_input;
        }
        Ok(d)
    }

    /// Backpropagates `d_logits` through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<NocGrads, NocError> {
        let n = self.layers.len();
        let k = self.prefix_len();
        let stale = || NocError::StaleCache(format!("cache does not match spec {}", self.spec));
        let dual = self.has_maxout();
        if dual != (cache.prefix.len() == 2)
            || cache.suffix.len() != n - if dual { k } else { 0 } + 1
            || cache.prefix.iter().any(|p| p.len() != k + 1)
        {
            return Err(stale());
        }
        if d_logits.len() != self.num_classes() {
            return Err(NocError::Shape(format!(
                "d_logits has {} entries, net has {} classes",
                d_logits.len(),
                self.num_classes()
            )));
        }
        let mut grads = NocGrads::zeros_like(self);
        if !dual {
            grads.d_input_a =
                self.back_range(0..n, &cache.suffix, d_logits.clone(), &mut grads.layers)?;
            return Ok(grads);
        }
        let d_merged = self.back_range(k..n, &cache.suffix, d_logits.clone(), &mut grads.layers)?;
        let (da, db) =
            elementwise_max_backward(&cache.prefix[0][k], &cache.prefix[1][k], &d_merged)?;
        grads.d_input_a = self.back_range(0..k, &cache.prefix[0], da, &mut grads.layers)?;
        grads.d_input_b = Some(self.back_range(0..k, &cache.prefix[1], db, &mut grads.layers)?);
        Ok(grads)
    }

    /// Post-ReLU activations of the second-to-last fc layer. When that layer
    /// sits before the maxout, the two pathways' features are max-merged.
    pub fn extract_features(
        &self,
        pooled_a: &Tensor,
        pooled_b: Option<&Tensor>,
    ) -> Result<Tensor, NocError> {
        let fcs: Vec<usize> = (0..self.layers.len())
            .filter(|&j| self.layers[j].is_fc())
            .collect();
        if fcs.len() < 2 {
            return Err(NocError::NoFeatureLayer(self.spec.to_string()));
        }
        let f = fcs[fcs.len() - 2];
        let (_, cache) = self.forward(pooled_a, pooled_b)?;
        let k = if self.has_maxout() {
            self.prefix_len()
        } else {
            0
        };
        if f < k {
            Ok(elementwise_max(
                &cache.prefix[0][f + 1],
                &cache.prefix[1][f + 1],
            )?)
        } else {
            Ok(cache.suffix[f - k + 1].clone())
        }
    }

    /// Width of the vector returned by [`Self::extract_features`].
    pub fn feature_dim(&self) -> Option<usize> {
        let fcs: Vec<&NocLayer> = self.layers.iter().filter(|l| l.is_fc()).collect();
        (fcs.len() >= 2).then(|| fcs[fcs.len() - 2].bias().len())
    }
}

fn make_layer(wshape: &[usize], weight: Tensor, out: usize) -> Result<NocLayer, NocError> {
    let bias = Tensor::zeros(&[out]);
    Ok(if wshape.len() == 4 {
        NocLayer::Conv(ConvParams::new(weight, bias, 1, 1, 1)?)
    } else {
        NocLayer::Fc { weight, bias }
    })
}

fn identity_kernel(channels: usize) -> Tensor {
    let mut k = Tensor::zeros(&[channels, channels, 3, 3]);
    for c in 0..channels {
        k.data_mut()[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    k
}

fn identity_extend(
    spec: &NocSpec,
    input_shape: [usize; 3],
    shapes: &[(Vec<usize>, usize)],
    donor: &NocNet,
) -> Result<Vec<NocLayer>, NocError> {
    let mismatch = |what: String| NocError::DonorMismatch(what);
    if donor.input_shape != input_shape {
        return Err(mismatch(format!(
            "donor input {:?} differs from {:?}",
            donor.input_shape, input_shape
        )));
    }
    let donor_convs: Vec<&NocLayer> = donor.layers.iter().filter(|l| !l.is_fc()).collect();
    let donor_fcs: Vec<&NocLayer> = donor.layers.iter().filter(|l| l.is_fc()).collect();
    let n_conv = spec.num_conv();
    if donor_convs.len() > n_conv || donor_fcs.len() != spec.num_fc() {
        return Err(mismatch(format!(
            "donor {} cannot be extended to {spec}",
            donor.spec
        )));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, (wshape, out)) in shapes.iter().enumerate() {
        let layer = if i < donor_convs.len() {
            donor_convs[i].clone()
        } else if i < n_conv {
            if wshape[0] != wshape[1] {
                return Err(mismatch(format!(
                    "identity conv {i} needs equal in/out channels, got {} -> {}",
                    wshape[1], wshape[0]
                )));
            }
            NocLayer::Conv(ConvParams::new(
                identity_kernel(wshape[0]),
                Tensor::zeros(&[*out]),
                1,
                1,
                1,
            )?)
        } else {
            donor_fcs[i - n_conv].clone()
        };
        if layer.weight().shape() != &wshape[..] {
            return Err(mismatch(format!(
                "layer {i}: donor weight {:?} vs required {:?}",
                layer.weight().shape(),
                wshape
            )));
        }
        layers.push(layer);
    }
    Ok(layers)
}
