use super::{expect_shape, LayerGrad, Result, Tensor, TensorError};

fn check(op: &'static str, input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    let [out, inp] = weights.shape()[..] else {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            found: weights.rank(),
        });
    };
    expect_shape(op, "input length", inp, input.len())?;
    Ok((out, inp))
}

/// Affine map `weights . flatten(input) + bias` with `weights` shaped out x in.
///
/// The input is flattened row-major whatever its shape, so a C x m x m map
/// feeds a fully-connected layer with `in = C * m * m`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out, inp) = check("fc", input, weights)?;
    expect_shape("fc", "bias length", out, bias.len())?;
    let x = input.data();
    let y = weights
        .data()
        .chunks_exact(inp)
        .zip(bias.data())
        .map(|(row, &b)| {
            let s: f64 = row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum();
            (s + b as f64) as f32
        })
        .collect();
    Tensor::new(vec![out], y)
}

/// Gradients of [`fc_forward`]; `d_input` takes the shape of `input`.
pub fn fc_backward(input: &Tensor, weights: &Tensor, d_output: &Tensor) -> Result<LayerGrad> {
    let (out, inp) = check("fc_backward", input, weights)?;
    expect_shape("fc_backward", "d_output length", out, d_output.len())?;
    let x = input.data();
    let d = d_output.data();

    let mut d_w = Vec::with_capacity(out * inp);
    let mut d_x = vec![0f64; inp];
    for (row, &g) in weights.data().chunks_exact(inp).zip(d) {
        d_w.extend(x.iter().map(|&v| g * v));
        if g != 0.0 {
            let g = g as f64;
            for (acc, &w) in d_x.iter_mut().zip(row) {
                *acc += g * w as f64;
            }
        }
    }
    Ok(LayerGrad {
        d_input: Tensor::new(
            input.shape().to_vec(),
            d_x.into_iter().map(|v| v as f32).collect(),
        )?,
        d_weights: Tensor::new(vec![out, inp], d_w)?,
        d_bias: d_output.clone().reshape(&[out])?,
    })
}
