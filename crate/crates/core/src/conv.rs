//! Direct loop-nest convolution kernels (cross-correlation, no kernel flip).
//!
//! The weight-gradient kernel works one input channel at a time so that a
//! frozen channel costs nothing: its activations are never read and no
//! multiply-accumulate is issued for it. Every MAC that is issued is counted,
//! which lets callers check the analytic cost model against what the kernel
//! actually did.

use crate::error::{check_dim, Error, Result};
use crate::tensor::{ConvGeometry, Tensor4};

/// Weight gradient of one conv layer, restricted to the selected input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrad {
    /// Shape `[C', C/g, D, D]`.
    pub grad: Tensor4,
    /// `computed[c]` is true iff input channel `c` was selected.
    pub computed: Vec<bool>,
    /// Multiply-accumulates issued by the kernel.
    pub macs: u64,
}

impl WeightGrad {
    /// The `[C'/g, D, D]` block of the gradient that depends on input channel `c`,
    /// flattened in (output channel, k, l) order.
    pub fn channel_slice(&self, geom: &ConvGeometry, c: usize) -> Vec<f64> {
        let ipg = geom.in_per_group();
        let opg = geom.out_per_group();
        let (group, ci) = (c / ipg, c % ipg);
        let dd = geom.kernel * geom.kernel;
        let mut out = Vec::with_capacity(opg * dd);
        for co in group * opg..(group + 1) * opg {
            let start = (co * ipg + ci) * dd;
            out.extend_from_slice(&self.grad.data()[start..start + dd]);
        }
        out
    }
}

fn check_weights(op: &'static str, weights: &Tensor4, geom: &ConvGeometry) -> Result<()> {
    let ws = weights.shape();
    let expect = geom.weight_shape();
    check_dim(op, "weight out_channels", expect[0], ws[0])?;
    check_dim(op, "weight in_channels/groups", expect[1], ws[1])?;
    check_dim(op, "weight kernel height", expect[2], ws[2])?;
    check_dim(op, "weight kernel width", expect[3], ws[3])
}

/// Copies an H×W plane into a zero-padded (H+2p)×(W+2p) buffer.
fn pad_plane(src: &[f64], h: usize, w: usize, pad: usize, dst: &mut [f64]) {
    let pw = w + 2 * pad;
    if pad > 0 {
        dst.fill(0.0);
    }
    for y in 0..h {
        let row = (y + pad) * pw + pad;
        dst[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

pub fn conv2d_forward(input: &Tensor4, weights: &Tensor4, geom: &ConvGeometry) -> Result<Tensor4> {
    const OP: &str = "conv2d_forward";
    geom.validate()?;
    let [b, c, h, w] = input.shape();
    check_dim(OP, "input channels", geom.in_channels, c)?;
    check_weights(OP, weights, geom)?;
    let (ho, wo) = geom.output_hw((h, w))?;
    let (s, d, p, kk) = (geom.stride, geom.dilation, geom.padding, geom.kernel);
    let (ipg, opg) = (geom.in_per_group(), geom.out_per_group());
    let pw = w + 2 * p;
    let mut padded = vec![0.0; (h + 2 * p) * pw];
    let mut out = Tensor4::zeros([b, geom.out_channels, ho, wo]);
    let wdata = weights.data();
    for n in 0..b {
        for ch in 0..c {
            pad_plane(input.plane(n, ch), h, w, p, &mut padded);
            let (group, ci) = (ch / ipg, ch % ipg);
            for co in group * opg..(group + 1) * opg {
                let wbase = (co * ipg + ci) * kk * kk;
                let obase = out.offset([n, co, 0, 0]);
                let odata = &mut out.data_mut()[obase..obase + ho * wo];
                for k in 0..kk {
                    for l in 0..kk {
                        let wv = wdata[wbase + k * kk + l];
                        for y in 0..ho {
                            let row = (y * s + k * d) * pw + l * d;
                            let orow = &mut odata[y * wo..(y + 1) * wo];
                            for (x, o) in orow.iter_mut().enumerate() {
                                *o += wv * padded[row + x * s];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Weight gradient for the input channels selected by `mask`.
///
/// For a selected channel `c` the slice `[:, c, :, :]` is the triple sum over
/// batch and output positions of padded input times upstream derivative; for
/// an unselected channel the slice is exactly zero and no arithmetic is done.
pub fn conv2d_weight_grad_masked(
    input: &Tensor4,
    upstream: &Tensor4,
    geom: &ConvGeometry,
    mask: &[bool],
) -> Result<WeightGrad> {
    let [b, c, h, w] = input.shape();
    check_dim("conv2d_weight_grad_masked", "input channels", geom.in_channels, c)?;
    conv2d_weight_grad_planes(|n, ch| input.plane(n, ch), [b, c, h, w], upstream, geom, mask)
}

/// Same as [`conv2d_weight_grad_masked`], reading input planes through `plane(n, c)`.
///
/// `plane` is only ever called for channels with `mask[c] == true`, which lets
/// callers keep nothing but the selected activations.
pub fn conv2d_weight_grad_planes<'a, F>(
    plane: F,
    input_shape: [usize; 4],
    upstream: &Tensor4,
    geom: &ConvGeometry,
    mask: &[bool],
) -> Result<WeightGrad>
where
    F: Fn(usize, usize) -> &'a [f64],
{
    const OP: &str = "conv2d_weight_grad_masked";
    geom.validate()?;
    let [b, c, h, w] = input_shape;
    check_dim(OP, "input channels", geom.in_channels, c)?;
    check_dim(OP, "mask length", c, mask.len())?;
    let (ho, wo) = geom.output_hw((h, w))?;
    let us = upstream.shape();
    check_dim(OP, "upstream batch", b, us[0])?;
    check_dim(OP, "upstream channels", geom.out_channels, us[1])?;
    check_dim(OP, "upstream height", ho, us[2])?;
    check_dim(OP, "upstream width", wo, us[3])?;

    let (s, d, p, kk) = (geom.stride, geom.dilation, geom.padding, geom.kernel);
    let (ipg, opg) = (geom.in_per_group(), geom.out_per_group());
    let pw = w + 2 * p;
    let mut padded = vec![0.0; (h + 2 * p) * pw];
    let mut grad = Tensor4::zeros(geom.weight_shape());
    let mut macs: u64 = 0;
    for (ch, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (group, ci) = (ch / ipg, ch % ipg);
        for n in 0..b {
            let src = plane(n, ch);
            check_dim(OP, "activation plane", h * w, src.len())?;
            pad_plane(src, h, w, p, &mut padded);
            for co in group * opg..(group + 1) * opg {
                let dy = upstream.plane(n, co);
                let gbase = (co * ipg + ci) * kk * kk;
                for k in 0..kk {
                    for l in 0..kk {
                        let mut acc = 0.0;
                        for y in 0..ho {
                            let row = (y * s + k * d) * pw + l * d;
                            let dyrow = &dy[y * wo..(y + 1) * wo];
                            for (x, g) in dyrow.iter().enumerate() {
                                acc += padded[row + x * s] * g;
                            }
                        }
                        grad.data_mut()[gbase + k * kk + l] += acc;
                        macs += (ho * wo) as u64;
                    }
                }
            }
        }
    }
    Ok(WeightGrad {
        grad,
        computed: mask.to_vec(),
        macs,
    })
}

/// Gradient of the loss with respect to the conv input. Never sparsified.
///
/// `input_hw` disambiguates the input extent when the stride does not divide it.
pub fn conv2d_input_grad(
    weights: &Tensor4,
    upstream: &Tensor4,
    geom: &ConvGeometry,
    input_hw: (usize, usize),
) -> Result<Tensor4> {
    const OP: &str = "conv2d_input_grad";
    geom.validate()?;
    check_weights(OP, weights, geom)?;
    let (h, w) = input_hw;
    let (ho, wo) = geom.output_hw((h, w))?;
    let [b, co_n, uh, uw] = upstream.shape();
    check_dim(OP, "upstream channels", geom.out_channels, co_n)?;
    check_dim(OP, "upstream height", ho, uh)?;
    check_dim(OP, "upstream width", wo, uw)?;

    let (s, d, p, kk) = (geom.stride, geom.dilation, geom.padding, geom.kernel);
    let (ipg, opg) = (geom.in_per_group(), geom.out_per_group());
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut padded = vec![0.0; ph * pw];
    let mut out = Tensor4::zeros([b, geom.in_channels, h, w]);
    let wdata = weights.data();
    for n in 0..b {
        for ch in 0..geom.in_channels {
            padded.fill(0.0);
            let (group, ci) = (ch / ipg, ch % ipg);
            for co in group * opg..(group + 1) * opg {
                let dy = upstream.plane(n, co);
                let wbase = (co * ipg + ci) * kk * kk;
                for k in 0..kk {
                    for l in 0..kk {
                        let wv = wdata[wbase + k * kk + l];
                        for y in 0..ho {
                            let row = (y * s + k * d) * pw + l * d;
                            for x in 0..wo {
                                padded[row + x * s] += wv * dy[y * wo + x];
                            }
                        }
                    }
                }
            }
            let base = out.offset([n, ch, 0, 0]);
            let dst = &mut out.data_mut()[base..base + h * w];
            for y in 0..h {
                let row = (y + p) * pw + p;
                dst[y * w..(y + 1) * w].copy_from_slice(&padded[row..row + w]);
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Domain("non-finite input gradient".into()));
    }
    Ok(out)
}
