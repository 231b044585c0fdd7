use super::{expect_shape, LayerGrad, Result, Tensor, TensorError};

/// A 2-d convolution layer: kernel `out x in x kh x kw`, bias `out`.
///
/// The op is cross-correlation (no kernel flip). `dilation` spaces the kernel
/// taps; the effective extent of a `k`-tap axis is `(k - 1) * dilation + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                found: kernel.rank(),
            });
        }
        expect_shape("conv2d", "bias length", kernel.shape()[0], bias.len())?;
        if stride == 0 || dilation == 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                what: format!("stride ({stride}) and dilation ({dilation}) must be positive"),
            });
        }
        Ok(Self {
            stride,
            padding,
            dilation,
            kernel,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// Output spatial size for an `h x w` input, or `None` when the kernel
    /// does not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let oh = conv_output_extent(h, kh, self.stride, self.padding, self.dilation)?;
        let ow = conv_output_extent(w, kw, self.stride, self.padding, self.dilation)?;
        Some((oh, ow))
    }

    fn checked_output(&self, input: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let (c, h, w) = input.dims3("conv2d")?;
        expect_shape("conv2d", "input channels", self.in_channels(), c)?;
        let (oh, ow) = self
            .output_size(h, w)
            .ok_or_else(|| TensorError::Geometry {
                op: "conv2d",
                what: format!(
                    "{h}x{w} input too small for {:?} kernel (padding {}, dilation {})",
                    self.kernel_size(),
                    self.padding,
                    self.dilation
                ),
            })?;
        Ok((c, h, w, oh, ow))
    }
}

/// `floor((input + 2 * padding - effective_extent) / stride) + 1`, or `None`
/// when that would be less than one.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let effective = (kernel - 1) * dilation + 1;
    let padded = input + 2 * padding;
    if padded < effective || stride == 0 {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + offset` lands in
/// `[0, input)`, where `offset = tap * dilation - padding`.
#[inline]
fn valid_outputs(out: usize, input: usize, stride: usize, offset: isize) -> (usize, usize) {
    // first o with o*stride + offset >= 0
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // last o with o*stride + offset <= input - 1
    let limit = input as isize - 1 - offset;
    let hi = if limit < 0 {
        0
    } else {
        (limit as usize / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (c, h, w, oh, ow) = p.checked_output(input)?;
    let oc = p.out_channels();
    let (kh, kw) = p.kernel_size();
    let x = input.data();
    let k = p.kernel.data();
    let plane = oh * ow;
    let mut acc = vec![0f64; plane];
    let mut out = Vec::with_capacity(oc * plane);

    for o in 0..oc {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..c {
            let xi = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let off_y = (ky * p.dilation) as isize - p.padding as isize;
                let (y_lo, y_hi) = valid_outputs(oh, h, p.stride, off_y);
                for kx in 0..kw {
                    let wv = k[((o * c + i) * kh + ky) * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let off_x = (kx * p.dilation) as isize - p.padding as isize;
                    let (x_lo, x_hi) = valid_outputs(ow, w, p.stride, off_x);
                    for oy in y_lo..y_hi {
                        let iy = (oy * p.stride) as isize + off_y;
                        let row = &xi[iy as usize * w..(iy as usize + 1) * w];
                        let arow = &mut acc[oy * ow..(oy + 1) * ow];
                        if p.stride == 1 {
                            let start = (x_lo as isize + off_x) as usize;
                            let src = &row[start..start + (x_hi - x_lo)];
                            for (a, &v) in arow[x_lo..x_hi].iter_mut().zip(src) {
                                *a += wv * v as f64;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = ((ox * p.stride) as isize + off_x) as usize;
                                arow[ox] += wv * row[ix] as f64;
                            }
                        }
                    }
                }
            }
        }
        let b = p.bias.data()[o] as f64;
        out.extend(acc.iter().map(|&a| (a + b) as f32));
    }
    Tensor::new(vec![oc, oh, ow], out)
}

pub fn conv2d_backward(input: &Tensor, p: &ConvParams, d_output: &Tensor) -> Result<LayerGrad> {
    let (c, h, w, oh, ow) = p.checked_output(input)?;
    let oc = p.out_channels();
    let (dc, dh, dw) = d_output.dims3("conv2d_backward")?;
    expect_shape("conv2d_backward", "d_output channels", oc, dc)?;
    expect_shape("conv2d_backward", "d_output height", oh, dh)?;
    expect_shape("conv2d_backward", "d_output width", ow, dw)?;

    let (kh, kw) = p.kernel_size();
    let x = input.data();
    let k = p.kernel.data();
    let d = d_output.data();
    let mut d_in = vec![0f64; c * h * w];
    let mut d_k = vec![0f64; k.len()];
    let mut d_b = vec![0f64; oc];

    for o in 0..oc {
        let dplane = &d[o * oh * ow..(o + 1) * oh * ow];
        d_b[o] = dplane.iter().map(|&v| v as f64).sum();
        if dplane.iter().all(|&v| v == 0.0) {
            continue;
        }
        for i in 0..c {
            let xi = &x[i * h * w..(i + 1) * h * w];
            let di = &mut d_in[i * h * w..(i + 1) * h * w];
            for ky in 0..kh {
                let off_y = (ky * p.dilation) as isize - p.padding as isize;
                let (y_lo, y_hi) = valid_outputs(oh, h, p.stride, off_y);
                for kx in 0..kw {
                    let widx = ((o * c + i) * kh + ky) * kw + kx;
                    let wv = k[widx] as f64;
                    let off_x = (kx * p.dilation) as isize - p.padding as isize;
                    let (x_lo, x_hi) = valid_outputs(ow, w, p.stride, off_x);
                    let mut gk = 0f64;
                    for oy in y_lo..y_hi {
                        let iy = ((oy * p.stride) as isize + off_y) as usize;
                        for ox in x_lo..x_hi {
                            let ix = ((ox * p.stride) as isize + off_x) as usize;
                            let g = dplane[oy * ow + ox] as f64;
                            gk += g * xi[iy * w + ix] as f64;
                            di[iy * w + ix] += g * wv;
                        }
                    }
                    d_k[widx] += gk;
                }
            }
        }
    }

    Ok(LayerGrad {
        d_input: Tensor::new(vec![c, h, w], d_in.into_iter().map(|v| v as f32).collect())?,
        d_weights: Tensor::new(
            p.kernel.shape().to_vec(),
            d_k.into_iter().map(|v| v as f32).collect(),
        )?,
        d_bias: Tensor::new(vec![oc], d_b.into_iter().map(|v| v as f32).collect())?,
    })
}
