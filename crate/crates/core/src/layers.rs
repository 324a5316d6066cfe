//! Non-convolutional primitives: ReLU, global average pooling, the linear
//! classifier, residual addition and the softmax cross-entropy loss.

use crate::error::{check_dim, Error, Result};
use crate::tensor::Tensor4;

/// Pre-activation sign bits kept by ReLU for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluCache {
    pub shape: [usize; 4],
    pub positive: Vec<bool>,
}

pub fn relu_forward(x: &Tensor4) -> (Tensor4, ReluCache) {
    let positive: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
    (
        y,
        ReluCache {
            shape: x.shape(),
            positive,
        },
    )
}

/// Backward uses the strict indicator `1{z > 0}`; the subgradient at 0 is 0.
pub fn relu_backward(cache: &ReluCache, dy: &Tensor4) -> Result<Tensor4> {
    for (i, (&e, &a)) in cache.shape.iter().zip(dy.shape().iter()).enumerate() {
        check_dim("relu_backward", ["batch", "channels", "height", "width"][i], e, a)?;
    }
    let data = dy
        .data()
        .iter()
        .zip(&cache.positive)
        .map(|(&g, &p)| if p { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(cache.shape, data)
}

pub fn gap_forward(x: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = x.shape();
    let hw = (h * w) as f64;
    Tensor4::from_fn([b, c, 1, 1], |[n, ch, _, _]| x.plane(n, ch).iter().sum::<f64>() / hw)
}

/// Spreads `dy / (H·W)` uniformly over each input plane.
pub fn gap_backward(dy: &Tensor4, input_hw: (usize, usize)) -> Result<Tensor4> {
    let [b, c, h1, w1] = dy.shape();
    check_dim("gap_backward", "upstream height", 1, h1)?;
    check_dim("gap_backward", "upstream width", 1, w1)?;
    let (h, w) = input_hw;
    let hw = (h * w) as f64;
    Ok(Tensor4::from_fn([b, c, h, w], |[n, ch, _, _]| dy.get([n, ch, 0, 0]) / hw))
}

/// Fully connected layer on `[B, in, 1, 1]` inputs. `weight` is `[out, in, 1, 1]`.
pub fn linear_forward(x: &Tensor4, weight: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    const OP: &str = "linear_forward";
    let [b, fin, h, w] = x.shape();
    check_dim(OP, "input height", 1, h)?;
    check_dim(OP, "input width", 1, w)?;
    let [fout, win, _, _] = weight.shape();
    check_dim(OP, "input features", win, fin)?;
    check_dim(OP, "bias length", fout, bias.len())?;
    let mut y = Tensor4::zeros([b, fout, 1, 1]);
    for n in 0..b {
        let xin = x.outer(n);
        for (o, yo) in y.outer_mut(n).iter_mut().enumerate() {
            let row = weight.outer(o);
            *yo = bias[o] + row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(y)
}

/// Gradients of the linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub dx: Tensor4,
    pub dweight: Tensor4,
    pub dbias: Vec<f64>,
}

pub fn linear_backward(x: &Tensor4, weight: &Tensor4, dy: &Tensor4) -> Result<LinearGrad> {
    const OP: &str = "linear_backward";
    let [b, fin, _, _] = x.shape();
    let [fout, win, _, _] = weight.shape();
    check_dim(OP, "input features", win, fin)?;
    check_dim(OP, "upstream batch", b, dy.shape()[0])?;
    check_dim(OP, "upstream features", fout, dy.shape()[1])?;
    let mut dx = Tensor4::zeros([b, fin, 1, 1]);
    let mut dweight = Tensor4::zeros(weight.shape());
    let mut dbias = vec![0.0; fout];
    for n in 0..b {
        let xin = x.outer(n);
        let g = dy.outer(n);
        for o in 0..fout {
            dbias[o] += g[o];
            for (dw, xi) in dweight.outer_mut(o).iter_mut().zip(xin) {
                *dw += g[o] * xi;
            }
        }
        let dxn = dx.outer_mut(n);
        for o in 0..fout {
            for (d, wv) in dxn.iter_mut().zip(weight.outer(o)) {
                *d += g[o] * wv;
            }
        }
    }
    Ok(LinearGrad { dx, dweight, dbias })
}

pub fn residual_add_forward(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    a.add(b)
}

/// Both branches receive the upstream derivative unchanged.
pub fn residual_add_backward(dy: &Tensor4) -> (Tensor4, Tensor4) {
    (dy.clone(), dy.clone())
}

/// Mean softmax cross-entropy over the batch and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    const OP: &str = "softmax_cross_entropy";
    let [b, k, h, w] = logits.shape();
    check_dim(OP, "logit height", 1, h)?;
    check_dim(OP, "logit width", 1, w)?;
    check_dim(OP, "label count", b, labels.len())?;
    if b == 0 {
        return Err(Error::InvalidArgument {
            op: OP,
            reason: "empty batch".into(),
        });
    }
    let mut grad = Tensor4::zeros([b, k, 1, 1]);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                sample: n,
                label,
                classes: k,
            });
        }
        let z = logits.outer(n);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (z[label] - max);
        for (j, g) in grad.outer_mut(n).iter_mut().enumerate() {
            let p = ((z[j] - max) - log_sum).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            *g = (p - onehot) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}
