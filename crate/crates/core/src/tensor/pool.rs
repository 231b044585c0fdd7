use serde::{Deserialize, Serialize};

use super::{conv_output_extent, expect_shape, Result, Tensor, TensorError};

/// Window geometry of a max-pooling layer. Padded taps never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl PoolParams {
    pub fn new(size: usize, stride: usize) -> Self {
        Self {
            size,
            stride,
            padding: 0,
            dilation: 1,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_output_extent(h, self.size, self.stride, self.padding, self.dilation)?,
            conv_output_extent(w, self.size, self.stride, self.padding, self.dilation)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub output: Tensor,
    /// Flat index into the input of the element that won each output cell.
    pub argmax: Vec<usize>,
}

/// Per-channel max pooling. Within a window, ties resolve to the smallest
/// flat input index.
pub fn maxpool2d_forward(input: &Tensor, p: &PoolParams) -> Result<PoolOutput> {
    let (c, h, w) = input.dims3("maxpool2d")?;
    let (oh, ow) = p.output_size(h, w).ok_or_else(|| TensorError::Geometry {
        op: "maxpool2d",
        what: format!("{h}x{w} input too small for window {}", p.size),
    })?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..p.size {
                    let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..p.size {
                        let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                if best_idx == usize::MAX {
                    return Err(TensorError::Geometry {
                        op: "maxpool2d",
                        what: format!("window at ({oy}, {ox}) lies entirely in padding"),
                    });
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![c, oh, ow], out)?,
        argmax,
    })
}

/// Scatter-adds `d_output` onto the recorded argmax positions.
pub fn maxpool2d_backward(
    argmax: &[usize],
    d_output: &Tensor,
    input_shape: &[usize],
) -> Result<Tensor> {
    expect_shape(
        "maxpool2d_backward",
        "d_output length",
        argmax.len(),
        d_output.len(),
    )?;
    let mut d = Tensor::zeros(input_shape);
    let dm = d.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_output.data()) {
        dm[idx] += g;
    }
    Ok(d)
}
