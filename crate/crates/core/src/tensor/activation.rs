use super::{expect_shape, Result, Tensor, TensorError};

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Masks `d` by `input > 0`. The subgradient at exactly zero is taken as 0.
///
/// `input` may be either the pre-activation or the ReLU output; both give
/// the same mask.
pub fn relu_backward(input: &Tensor, d: &Tensor) -> Result<Tensor> {
    expect_shape("relu_backward", "length", input.len(), d.len())?;
    let data = input
        .data()
        .iter()
        .zip(d.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Softmax probabilities computed in 64-bit with max subtraction.
pub fn softmax(logits: &Tensor) -> Vec<f64> {
    let z = logits.data();
    let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of softmax(logits) against `label`, with
/// `d_logits = softmax(logits) - onehot(label)`.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.len();
    if label >= n {
        return Err(TensorError::LabelOutOfRange { label, classes: n });
    }
    let z = logits.data();
    let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let sum: f64 = z.iter().map(|&v| (v as f64 - m).exp()).sum();
    let lse = m + sum.ln();
    let loss = lse - z[label] as f64;
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (v as f64 - lse).exp();
            (if i == label { p - 1.0 } else { p }) as f32
        })
        .collect();
    Ok((loss, Tensor::new(logits.shape().to_vec(), d)?))
}

pub fn elementwise_max(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_shape("elementwise_max", "length", a.len(), b.len())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.max(y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Routes each element of `d` to the operand that supplied the maximum.
/// Ties go to `a`.
pub fn elementwise_max_backward(a: &Tensor, b: &Tensor, d: &Tensor) -> Result<(Tensor, Tensor)> {
    expect_shape("elementwise_max_backward", "length", a.len(), b.len())?;
    expect_shape("elementwise_max_backward", "d length", a.len(), d.len())?;
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for (i, ((&x, &y), &g)) in a.data().iter().zip(b.data()).zip(d.data()).enumerate() {
        if x >= y {
            da.data_mut()[i] = g;
        } else {
            db.data_mut()[i] = g;
        }
    }
    Ok((da, db))
}
