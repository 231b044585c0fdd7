use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PyramidError;
use crate::tensor::{
    conv2d_backward, conv2d_forward, maxpool2d_backward, maxpool2d_forward, read_tensor_file, relu,
    relu_backward, write_tensor_file, ConvParams, PoolParams, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneLayer {
    Conv(ConvParams),
    Relu,
    MaxPool(PoolParams),
}

impl BackboneLayer {
    pub fn stride(&self) -> usize {
        match self {
            BackboneLayer::Conv(p) => p.stride,
            BackboneLayer::Relu => 1,
            BackboneLayer::MaxPool(p) => p.stride,
        }
    }

    fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self {
            BackboneLayer::Conv(p) => p.output_size(h, w),
            BackboneLayer::Relu => Some((h, w)),
            BackboneLayer::MaxPool(p) => p.output_size(h, w),
        }
    }
}

/// Shared, region-independent convolutional feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<BackboneLayer>,
}

/// Activations kept by [`Backbone::forward_cached`] for the backward pass.
pub struct BackboneCache {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl Backbone {
    pub fn new(layers: Vec<BackboneLayer>) -> Result<Self, PyramidError> {
        let mut channels: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let BackboneLayer::Conv(p) = layer {
                if let Some(c) = channels {
                    if c != p.in_channels() {
                        return Err(PyramidError::Backbone(format!(
                            "layer {i} expects {} channels but receives {c}",
                            p.in_channels()
                        )));
                    }
                }
                let (kh, kw) = p.kernel_size();
                let same = |k: usize| (k - 1) * p.dilation == 2 * p.padding;
                if p.stride == 1 && !(same(kh) && same(kw)) {
                    return Err(PyramidError::Backbone(format!(
                        "stride-1 conv layer {i} does not preserve spatial size"
                    )));
                }
                channels = Some(p.out_channels());
            }
        }
        if channels.is_none() {
            return Err(PyramidError::Backbone("backbone has no conv layer".into()));
        }
        Ok(Self { layers })
    }

    /// 3x3 convs with two stride-2 max-pools: stride 4, `width` output
    /// channels, weights drawn from N(0, 2 / fan_in).
    pub fn desk_default<R: Rng + ?Sized>(in_channels: usize, width: usize, rng: &mut R) -> Self {
        let half = (width / 2).max(1);
        let conv = |cin: usize, cout: usize, rng: &mut R| {
            let sigma = (2.0 / (cin * 9) as f32).sqrt();
            BackboneLayer::Conv(
                ConvParams::new(
                    Tensor::randn(&[cout, cin, 3, 3], sigma, rng),
                    Tensor::zeros(&[cout]),
                    1,
                    1,
                    1,
                )
                .expect("valid conv geometry"),
            )
        };
        let layers = vec![
            conv(in_channels, half, rng),
            BackboneLayer::Relu,
            BackboneLayer::MaxPool(PoolParams::new(2, 2)),
            conv(half, width, rng),
            BackboneLayer::Relu,
            BackboneLayer::MaxPool(PoolParams::new(2, 2)),
            conv(width, width, rng),
            BackboneLayer::Relu,
        ];
        Self::new(layers).expect("default backbone is consistent")
    }

    /// Cumulative feature stride: the product of all layer strides.
    pub fn stride(&self) -> usize {
        self.layers.iter().map(BackboneLayer::stride).product()
    }

    pub fn in_channels(&self) -> usize {
        self.convs().next().map(|p| p.in_channels()).unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.convs().last().map(|p| p.out_channels()).unwrap_or(0)
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvParams> {
        self.layers.iter().filter_map(|l| match l {
            BackboneLayer::Conv(p) => Some(p),
            _ => None,
        })
    }

    /// Output spatial size for an `h x w` image, `None` if some layer
    /// would produce an empty map.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.layers
            .iter()
            .try_fold((h, w), |(h, w), l| l.output_size(h, w))
    }

    /// Smallest square input that yields at least one output cell.
    pub fn min_input_extent(&self) -> usize {
        (1..=4096)
            .find(|&e| self.output_size(e, e).is_some())
            .unwrap_or(usize::MAX)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor, PyramidError> {
        let mut x = image.clone();
        for layer in &self.layers {
            x = match layer {
                BackboneLayer::Conv(p) => conv2d_forward(&x, p)?,
                BackboneLayer::Relu => relu(&x),
                BackboneLayer::MaxPool(p) => maxpool2d_forward(&x, p)?.output,
            };
        }
        Ok(x)
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<(Tensor, BackboneCache), PyramidError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut x = image.clone();
        for layer in &self.layers {
            let (y, am) = match layer {
                BackboneLayer::Conv(p) => (conv2d_forward(&x, p)?, None),
                BackboneLayer::Relu => (relu(&x), None),
                BackboneLayer::MaxPool(p) => {
                    let r = maxpool2d_forward(&x, p)?;
                    (r.output, Some(r.argmax))
                }
            };
            inputs.push(std::mem::replace(&mut x, y));
            argmax.push(am);
        }
        Ok((x, BackboneCache { inputs, argmax }))
    }

    /// Gradients for every conv layer, in layer order, as (kernel, bias).
    pub fn backward(
        &self,
        cache: &BackboneCache,
        d_output: &Tensor,
    ) -> Result<Vec<(Tensor, Tensor)>, PyramidError> {
        let mut grads = Vec::new();
        let mut d = d_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            d = match layer {
                BackboneLayer::Conv(p) => {
                    let g = conv2d_backward(input, p, &d)?;
                    grads.push((g.d_weights, g.d_bias));
                    g.d_input
                }
                BackboneLayer::Relu => relu_backward(input, &d)?,
                BackboneLayer::MaxPool(_) => {
                    let am = cache.argmax[i].as_ref().expect("pool layer caches argmax");
                    maxpool2d_backward(am, &d, input.shape())?
                }
            };
        }
        grads.reverse();
        Ok(grads)
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvParams> {
        self.layers.iter_mut().filter_map(|l| match l {
            BackboneLayer::Conv(p) => Some(p),
            _ => None,
        })
    }

    /// Writes `backbone.json` plus one tensor blob per conv kernel and bias.
    pub fn save(&self, dir: &Path) -> Result<(), PyramidError> {
        fs::create_dir_all(dir)?;
        let mut layers = Vec::new();
        let mut conv_idx = 0;
        for layer in &self.layers {
            layers.push(match layer {
                BackboneLayer::Conv(p) => {
                    let kernel = format!("backbone_conv{conv_idx}_kernel.noct");
                    let bias = format!("backbone_conv{conv_idx}_bias.noct");
                    write_tensor_file(dir.join(&kernel), &p.kernel)?;
                    write_tensor_file(dir.join(&bias), &p.bias)?;
                    conv_idx += 1;
                    LayerDescriptor::Conv {
                        in_channels: p.in_channels(),
                        out_channels: p.out_channels(),
                        kernel_size: p.kernel_size().0,
                        stride: p.stride,
                        padding: p.padding,
                        dilation: p.dilation,
                        kernel,
                        bias,
                    }
                }
                BackboneLayer::Relu => LayerDescriptor::Relu,
                BackboneLayer::MaxPool(p) => LayerDescriptor::MaxPool(*p),
            });
        }
        let desc = BackboneDescriptor {
            stride: self.stride(),
            channels: self.channels(),
            layers,
        };
        fs::write(
            dir.join("backbone.json"),
            serde_json::to_string_pretty(&desc)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PyramidError> {
        let desc: BackboneDescriptor =
            serde_json::from_str(&fs::read_to_string(dir.join("backbone.json"))?)?;
        let mut layers = Vec::with_capacity(desc.layers.len());
        for l in desc.layers {
            layers.push(match l {
                LayerDescriptor::Conv {
                    stride,
                    padding,
                    dilation,
                    kernel,
                    bias,
                    ..
                } => BackboneLayer::Conv(ConvParams::new(
                    read_tensor_file(dir.join(kernel))?,
                    read_tensor_file(dir.join(bias))?,
                    stride,
                    padding,
                    dilation,
                )?),
                LayerDescriptor::Relu => BackboneLayer::Relu,
                LayerDescriptor::MaxPool(p) => BackboneLayer::MaxPool(p),
            });
        }
        let backbone = Backbone::new(layers)?;
        if backbone.stride() != desc.stride || backbone.channels() != desc.channels {
            return Err(PyramidError::Backbone(
                "descriptor stride/channels disagree with its layers".into(),
            ));
        }
        Ok(backbone)
    }
}

#[derive(Serialize, Deserialize)]
struct BackboneDescriptor {
    stride: usize,
    channels: usize,
    layers: Vec<LayerDescriptor>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerDescriptor {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        kernel: String,
        bias: String,
    },
    Relu,
    MaxPool(PoolParams),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::desk_default(3, 32, &mut rng);
        assert_eq!(b.stride(), 4);
        assert_eq!(b.channels(), 32);
        assert_eq!(b.output_size(64, 64), Some((16, 16)));
        assert_eq!(b.min_input_extent(), 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Backbone::desk_default(3, 8, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(Backbone::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn rejects_channel_chain_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |cin, cout, rng: &mut ChaCha8Rng| {
            BackboneLayer::Conv(
                ConvParams::new(
                    Tensor::randn(&[cout, cin, 3, 3], 1.0, rng),
                    Tensor::zeros(&[cout]),
                    1,
                    1,
                    1,
                )
                .unwrap(),
            )
        };
        let layers = vec![mk(3, 4, &mut rng), mk(5, 4, &mut rng)];
        assert!(Backbone::new(layers).is_err());
    }
}
