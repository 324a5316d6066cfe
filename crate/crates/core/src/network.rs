//! Declarative CNNs with channel-masked backward passes.
//!
//! The forward pass is always dense. The mask only decides which input
//! channels of each conv layer keep their activations for the backward pass
//! and, in turn, which weight-gradient slices get computed.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad_planes, WeightGrad};
use crate::error::{check_dim, Error, Result};
use crate::layers::{
    gap_backward, gap_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    residual_add_forward, ReluCache,
};
use crate::mask::SelectionMask;
use crate::tensor::{ConvGeometry, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvGeometry),
    Relu,
    ResidualBegin { tag: String },
    ResidualAdd { tag: String },
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize },
}

/// Static description of one conv layer inside a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerInfo {
    /// Position in the layer list.
    pub position: usize,
    pub geom: ConvGeometry,
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape (C, H, W).
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Desk-scale reference net: conv3×3 stem, two depthwise/pointwise residual
    /// blocks, a strided conv3×3 that doubles the width, GAP and a linear head.
    pub fn toynet_residual(input: [usize; 3], classes: usize) -> Self {
        Self::toynet_residual_width(input, 8, classes)
    }

    /// `toynet_residual` with a configurable stem width.
    pub fn toynet_residual_width(input: [usize; 3], width: usize, classes: usize) -> Self {
        let mut layers = vec![
            LayerSpec::Conv(ConvGeometry::new(input[0], width, 3).with_padding(1)),
            LayerSpec::Relu,
        ];
        for block in 0..2 {
            let tag = format!("block{block}");
            layers.extend([
                LayerSpec::ResidualBegin { tag: tag.clone() },
                LayerSpec::Conv(ConvGeometry::depthwise(width, 3).with_padding(1)),
                LayerSpec::Relu,
                LayerSpec::Conv(ConvGeometry::new(width, width, 1)),
                LayerSpec::ResidualAdd { tag },
            ]);
        }
        layers.extend([
            LayerSpec::Conv(ConvGeometry::new(width, 2 * width, 3).with_stride(2).with_padding(1)),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: 2 * width,
                out_features: classes,
            },
        ]);
        Self { input, layers }
    }

    /// conv3×3 – ReLU – conv3×3 – GAP – Linear; the smallest net with two conv layers.
    pub fn two_layer(input: [usize; 3], hidden: usize, out: usize, classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::Conv(ConvGeometry::new(input[0], hidden, 3).with_padding(1)),
                LayerSpec::Relu,
                LayerSpec::Conv(ConvGeometry::new(hidden, out, 3).with_stride(2)),
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear {
                    in_features: out,
                    out_features: classes,
                },
            ],
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    /// Runs shape propagation and returns the conv layers in depth order.
    pub fn conv_layers(&self) -> Result<Vec<ConvLayerInfo>> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "NetworkSpec", reason: msg });
        let [mut c, mut h, mut w] = self.input;
        let mut convs = Vec::new();
        let mut open: HashMap<&str, [usize; 3]> = HashMap::new();
        let n = self.layers.len();
        if !matches!(self.layers.last(), Some(LayerSpec::Linear { .. })) {
            return bad("the last layer must be the linear classifier".into());
        }
        for (pos, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv(geom) => {
                    geom.validate()?;
                    check_dim("NetworkSpec", "conv input channels", c, geom.in_channels)?;
                    let (ho, wo) = geom.output_hw((h, w))?;
                    convs.push(ConvLayerInfo {
                        position: pos,
                        geom: *geom,
                        input_hw: (h, w),
                        output_hw: (ho, wo),
                    });
                    c = geom.out_channels;
                    h = ho;
                    w = wo;
                }
                LayerSpec::Relu => {}
                LayerSpec::ResidualBegin { tag } => {
                    if open.insert(tag, [c, h, w]).is_some() {
                        return bad(format!("residual tag {tag:?} opened twice"));
                    }
                }
                LayerSpec::ResidualAdd { tag } => match open.remove(tag.as_str()) {
                    Some(shape) if shape == [c, h, w] => {}
                    Some(shape) => {
                        return bad(format!("residual {tag:?} joins {shape:?} with {:?}", [c, h, w]))
                    }
                    None => return bad(format!("residual add {tag:?} has no matching begin")),
                },
                LayerSpec::GlobalAvgPool => {
                    h = 1;
                    w = 1;
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if pos != n - 1 {
                        return bad("only one linear layer is supported, and it must be last".into());
                    }
                    if h != 1 || w != 1 {
                        return bad("the classifier needs a pooled 1×1 input".into());
                    }
                    check_dim("NetworkSpec", "classifier in_features", c, *in_features)?;
                    if *out_features < 1 {
                        return bad("classifier needs at least one output".into());
                    }
                }
            }
        }
        if let Some(tag) = open.keys().next() {
            return bad(format!("residual {tag:?} is never closed"));
        }
        Ok(convs)
    }

    /// Input-channel count for each conv layer, i.e. the shape of a selection mask.
    pub fn mask_shape(&self) -> Result<Vec<usize>> {
        Ok(self.conv_layers()?.iter().map(|l| l.geom.in_channels).collect())
    }

    fn classifier_shape(&self) -> (usize, usize) {
        match self.layers.last() {
            Some(LayerSpec::Linear {
                in_features,
                out_features,
            }) => (*in_features, *out_features),
            _ => (0, 0),
        }
    }
}

/// Trainable weights: one kernel per conv layer plus the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub conv: Vec<Tensor4>,
    /// `[classes, in_features, 1, 1]`.
    pub classifier_weight: Tensor4,
    pub classifier_bias: Vec<f64>,
}

impl Parameters {
    /// He-normal conv kernels, `N(0, 1/in)` classifier weights, zero bias.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let convs = spec.conv_layers()?;
        let conv = convs
            .iter()
            .map(|l| {
                let fan_in = (l.geom.in_per_group() * l.geom.kernel * l.geom.kernel) as f64;
                let std = (2.0 / fan_in).sqrt();
                Tensor4::from_fn(l.geom.weight_shape(), |_| std * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        let (classifier_weight, classifier_bias) = Self::init_classifier(spec, rng);
        Ok(Self {
            conv,
            classifier_weight,
            classifier_bias,
        })
    }

    pub fn init_classifier<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> (Tensor4, Vec<f64>) {
        let (fin, fout) = spec.classifier_shape();
        let std = (1.0 / fin as f64).sqrt();
        let w = Tensor4::from_fn([fout, fin, 1, 1], |_| std * rng.sample::<f64, _>(StandardNormal));
        (w, vec![0.0; fout])
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let convs = spec.conv_layers()?;
        check_dim("Parameters", "conv layer count", convs.len(), self.conv.len())?;
        for (info, w) in convs.iter().zip(&self.conv) {
            let e = info.geom.weight_shape();
            let a = w.shape();
            for i in 0..4 {
                check_dim("Parameters", "conv weight dim", e[i], a[i])?;
            }
        }
        let (fin, fout) = spec.classifier_shape();
        let cs = self.classifier_weight.shape();
        check_dim("Parameters", "classifier outputs", fout, cs[0])?;
        check_dim("Parameters", "classifier inputs", fin, cs[1])?;
        check_dim("Parameters", "classifier bias", fout, self.classifier_bias.len())
    }

    /// Number of backbone (conv) weights.
    pub fn backbone_len(&self) -> usize {
        self.conv.iter().map(Tensor4::len).sum()
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv {
        ordinal: usize,
        input_shape: [usize; 4],
        /// Per input channel: the B×H×W activations, present only when selected.
        planes: Vec<Option<Vec<f64>>>,
    },
    Relu(ReluCache),
    Gap { input_hw: (usize, usize) },
    Linear { input: Tensor4 },
    Passthrough,
}

/// What the forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    batch: usize,
    mask: SelectionMask,
    layers: Vec<LayerCache>,
}

impl ActivationCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mask(&self) -> &SelectionMask {
        &self.mask
    }

    /// Stored conv-input activations per sample: Σ over selected channels of H·W.
    pub fn activation_slots(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerCache::Conv {
                    input_shape, planes, ..
                } => planes.iter().flatten().count() * input_shape[2] * input_shape[3],
                _ => 0,
            })
            .sum()
    }

    /// Per conv layer, the stored activation slots per sample.
    pub fn activation_slots_per_layer(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerCache::Conv {
                    input_shape, planes, ..
                } => Some(planes.iter().flatten().count() * input_shape[2] * input_shape[3]),
                _ => None,
            })
            .collect()
    }

    /// Total scalars held for conv weight gradients (slots × batch).
    pub fn stored_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerCache::Conv { planes, .. } => planes.iter().flatten().map(Vec::len).sum(),
                _ => 0,
            })
            .sum()
    }
}

/// Weight gradients of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub conv: Vec<WeightGrad>,
    pub classifier_weight: Tensor4,
    pub classifier_bias: Vec<f64>,
}

impl GradientSet {
    /// Total weight-gradient MACs issued for conv layers.
    pub fn wgrad_macs(&self) -> u64 {
        self.conv.iter().map(|g| g.macs).sum()
    }

    /// Every computed trainable gradient entry: selected conv slices in
    /// (layer, channel) order followed by the classifier weights and bias.
    pub fn computed_values(&self, spec: &NetworkSpec) -> Result<Vec<f64>> {
        let convs = spec.conv_layers()?;
        let mut out = Vec::new();
        for (info, g) in convs.iter().zip(&self.conv) {
            for (c, &on) in g.computed.iter().enumerate() {
                if on {
                    out.extend(g.channel_slice(&info.geom, c));
                }
            }
        }
        out.extend_from_slice(self.classifier_weight.data());
        out.extend_from_slice(&self.classifier_bias);
        Ok(out)
    }

    /// Elementwise sum, used to accumulate per-batch gradients into a full gradient.
    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        check_dim("GradientSet::accumulate", "conv layers", self.conv.len(), other.conv.len())?;
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            a.grad.same_shape("GradientSet::accumulate", &b.grad)?;
            for (x, y) in a.grad.data_mut().iter_mut().zip(b.grad.data()) {
                *x += y;
            }
            for (f, g) in a.computed.iter_mut().zip(&b.computed) {
                *f |= *g;
            }
            a.macs += b.macs;
        }
        for (x, y) in self.classifier_weight.data_mut().iter_mut().zip(other.classifier_weight.data()) {
            *x += y;
        }
        for (x, y) in self.classifier_bias.iter_mut().zip(&other.classifier_bias) {
            *x += y;
        }
        Ok(())
    }
}

fn check_input(spec: &NetworkSpec, batch: &Tensor4) -> Result<()> {
    let s = batch.shape();
    check_dim("forward", "input channels", spec.input[0], s[1])?;
    check_dim("forward", "input height", spec.input[1], s[2])?;
    check_dim("forward", "input width", spec.input[2], s[3])
}

/// Dense forward pass that caches only the selected conv-input channels.
pub fn forward(
    spec: &NetworkSpec,
    params: &Parameters,
    batch: &Tensor4,
    mask: &SelectionMask,
) -> Result<(Tensor4, ActivationCache)> {
    let convs = spec.conv_layers()?;
    params.check(spec)?;
    check_input(spec, batch)?;
    mask.check_shape(&convs.iter().map(|l| l.geom.in_channels).collect::<Vec<_>>())?;

    let b = batch.shape()[0];
    let mut x = batch.clone();
    let mut stash: HashMap<&str, Tensor4> = HashMap::new();
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut ordinal = 0;
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv(geom) => {
                let shape = x.shape();
                let planes = mask
                    .layer(ordinal)
                    .iter()
                    .enumerate()
                    .map(|(c, &keep)| {
                        keep.then(|| (0..b).flat_map(|n| x.plane(n, c).iter().copied()).collect())
                    })
                    .collect();
                let y = conv2d_forward(&x, &params.conv[ordinal], geom)?;
                caches.push(LayerCache::Conv {
                    ordinal,
                    input_shape: shape,
                    planes,
                });
                ordinal += 1;
                x = y;
            }
            LayerSpec::Relu => {
                let (y, cache) = relu_forward(&x);
                caches.push(LayerCache::Relu(cache));
                x = y;
            }
            LayerSpec::ResidualBegin { tag } => {
                stash.insert(tag, x.clone());
                caches.push(LayerCache::Passthrough);
            }
            LayerSpec::ResidualAdd { tag } => {
                let skip = stash.remove(tag.as_str()).ok_or_else(|| Error::InvalidArgument {
                    op: "forward",
                    reason: format!("residual {tag:?} not open"),
                })?;
                x = residual_add_forward(&x, &skip)?;
                caches.push(LayerCache::Passthrough);
            }
            LayerSpec::GlobalAvgPool => {
                let s = x.shape();
                caches.push(LayerCache::Gap {
                    input_hw: (s[2], s[3]),
                });
                x = gap_forward(&x);
            }
            LayerSpec::Linear { .. } => {
                let y = linear_forward(&x, &params.classifier_weight, &params.classifier_bias)?;
                caches.push(LayerCache::Linear { input: x });
                x = y;
            }
        }
    }
    Ok((
        x,
        ActivationCache {
            batch: b,
            mask: mask.clone(),
            layers: caches,
        },
    ))
}

/// Forward pass that keeps nothing; used for evaluation.
pub fn predict(spec: &NetworkSpec, params: &Parameters, batch: &Tensor4) -> Result<Tensor4> {
    let empty = SelectionMask::empty(&spec.mask_shape()?);
    Ok(forward(spec, params, batch, &empty)?.0)
}

/// Backward pass producing classifier gradients and masked conv weight gradients.
///
/// Activation derivatives are propagated densely down to the shallowest conv
/// layer that has a selected channel; nothing below it is visited.
pub fn backward(
    spec: &NetworkSpec,
    params: &Parameters,
    cache: &ActivationCache,
    dlogits: &Tensor4,
    mask: &SelectionMask,
) -> Result<GradientSet> {
    if &cache.mask != mask {
        return Err(Error::Mask("cache was produced under a different mask".into()));
    }
    let convs = spec.conv_layers()?;
    if cache.layers.len() != spec.layers.len() {
        return Err(Error::Mask("cache does not belong to this network".into()));
    }
    check_dim("backward", "upstream batch", cache.batch, dlogits.shape()[0])?;
    let stop = mask.shallowest_selected();

    let mut conv_grads: Vec<WeightGrad> = convs
        .iter()
        .map(|l| WeightGrad {
            grad: Tensor4::zeros(l.geom.weight_shape()),
            computed: vec![false; l.geom.in_channels],
            macs: 0,
        })
        .collect();
    let mut classifier = None;
    let mut pending: HashMap<&str, Tensor4> = HashMap::new();
    let mut dy = dlogits.clone();

    for (layer, lc) in spec.layers.iter().zip(&cache.layers).rev() {
        match (layer, lc) {
            (LayerSpec::Linear { .. }, LayerCache::Linear { input }) => {
                let g = linear_backward(input, &params.classifier_weight, &dy)?;
                classifier = Some((g.dweight, g.dbias));
                if stop.is_none() {
                    break;
                }
                dy = g.dx;
            }
            (LayerSpec::GlobalAvgPool, LayerCache::Gap { input_hw }) => {
                dy = gap_backward(&dy, *input_hw)?;
            }
            (LayerSpec::Relu, LayerCache::Relu(rc)) => {
                dy = relu_backward(rc, &dy)?;
            }
            (LayerSpec::ResidualAdd { tag }, LayerCache::Passthrough) => {
                pending.insert(tag, dy.clone());
            }
            (LayerSpec::ResidualBegin { tag }, LayerCache::Passthrough) => {
                let skip = pending.remove(tag.as_str()).ok_or_else(|| Error::InvalidArgument {
                    op: "backward",
                    reason: format!("residual {tag:?} not open"),
                })?;
                dy = dy.add(&skip)?;
            }
            (
                LayerSpec::Conv(geom),
                LayerCache::Conv {
                    ordinal,
                    input_shape,
                    planes,
                },
            ) => {
                let sel = mask.layer(*ordinal);
                if sel.iter().any(|&b| b) {
                    let [_, _, h, w] = *input_shape;
                    let hw = h * w;
                    let plane = |n: usize, c: usize| -> &[f64] {
                        let p = planes[c].as_deref().unwrap_or(&[]);
                        &p[(n * hw).min(p.len())..((n + 1) * hw).min(p.len())]
                    };
                    conv_grads[*ordinal] = conv2d_weight_grad_planes(plane, *input_shape, &dy, geom, sel)?;
                }
                if Some(*ordinal) == stop {
                    break;
                }
                dy = conv2d_input_grad(&params.conv[*ordinal], &dy, geom, (input_shape[2], input_shape[3]))?;
            }
            _ => return Err(Error::Mask("cache does not match layer list".into())),
        }
    }
    let (classifier_weight, classifier_bias) =
        classifier.ok_or_else(|| Error::Mask("classifier was not reached".into()))?;
    Ok(GradientSet {
        conv: conv_grads,
        classifier_weight,
        classifier_bias,
    })
}

/// Plain SGD. Conv weights move only in channels whose gradient was computed;
/// the classifier is always updated.
pub fn sgd_step(spec: &NetworkSpec, params: &mut Parameters, grads: &GradientSet, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument {
            op: "sgd_step",
            reason: format!("learning rate must be non-negative, got {lr}"),
        });
    }
    if lr == 0.0 {
        return Ok(());
    }
    let convs = spec.conv_layers()?;
    check_dim("sgd_step", "conv layers", convs.len(), grads.conv.len())?;
    for ((info, w), g) in convs.iter().zip(params.conv.iter_mut()).zip(&grads.conv) {
        let ipg = info.geom.in_per_group();
        let opg = info.geom.out_per_group();
        let dd = info.geom.kernel * info.geom.kernel;
        for (c, _) in g.computed.iter().enumerate().filter(|(_, &on)| on) {
            let (group, ci) = (c / ipg, c % ipg);
            for co in group * opg..(group + 1) * opg {
                let start = (co * ipg + ci) * dd;
                let gs = &g.grad.data()[start..start + dd];
                for (wv, gv) in w.data_mut()[start..start + dd].iter_mut().zip(gs) {
                    *wv -= lr * gv;
                }
            }
        }
    }
    for (wv, gv) in params.classifier_weight.data_mut().iter_mut().zip(grads.classifier_weight.data()) {
        *wv -= lr * gv;
    }
    for (bv, gv) in params.classifier_bias.iter_mut().zip(&grads.classifier_bias) {
        *bv -= lr * gv;
    }
    Ok(())
}

/// Linear warm-up from 0 to `lr_max` over `warmup` epochs, then cosine decay to 0.
pub fn cosine_warmup_lr(epoch: usize, total: usize, warmup: usize, lr_max: f64) -> Result<f64> {
    if warmup >= total {
        return Err(Error::InvalidArgument {
            op: "cosine_warmup_lr",
            reason: format!("warm-up epochs {warmup} must be fewer than total epochs {total}"),
        });
    }
    if epoch >= total {
        return Err(Error::InvalidArgument {
            op: "cosine_warmup_lr",
            reason: format!("epoch {epoch} out of range for {total} epochs"),
        });
    }
    if epoch < warmup {
        return Ok(lr_max * epoch as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (total - warmup) as f64;
    Ok(0.5 * lr_max * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_cross_entropy;
    use crate::mask::ChannelId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (NetworkSpec, Parameters, Tensor4, Vec<usize>) {
        let spec = NetworkSpec::toynet_residual([3, 8, 8], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Parameters::init(&spec, &mut rng).unwrap();
        let x = Tensor4::from_fn([3, 3, 8, 8], |_| rng.sample(StandardNormal));
        (spec, params, x, vec![0, 3, 1])
    }

    #[test]
    fn toynet_shapes() {
        let spec = NetworkSpec::toynet_residual([3, 12, 12], 4);
        let convs = spec.conv_layers().unwrap();
        assert_eq!(convs.len(), 6);
        assert_eq!(spec.mask_shape().unwrap(), vec![3, 8, 8, 8, 8, 8]);
        assert_eq!(convs[5].input_hw, (12, 12));
        assert_eq!(convs[5].output_hw, (6, 6));
        assert_eq!(convs[1].geom.groups, 8);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = NetworkSpec::toynet_residual([3, 8, 8], 4);
        spec.layers.pop();
        assert!(spec.conv_layers().is_err());
        let mut spec = NetworkSpec::toynet_residual([3, 8, 8], 4);
        spec.layers.retain(|l| !matches!(l, LayerSpec::ResidualBegin { tag } if tag == "block1"));
        assert!(spec.conv_layers().is_err());
        let spec = NetworkSpec::toynet_residual([2, 8, 8], 4);
        let bad = NetworkSpec {
            input: [3, 8, 8],
            ..spec
        };
        assert!(bad.conv_layers().is_err());
    }

    #[test]
    fn forward_ignores_mask() {
        let (spec, params, x, _) = setup(1);
        let shape = spec.mask_shape().unwrap();
        let (a, ca) = forward(&spec, &params, &x, &SelectionMask::empty(&shape)).unwrap();
        let (b, cb) = forward(&spec, &params, &x, &SelectionMask::full(&shape)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ca.activation_slots(), 0);
        assert_eq!(cb.activation_slots(), (3 + 8 * 5) * 64);
        assert_eq!(cb.stored_scalars(), cb.activation_slots() * 3);
    }

    #[test]
    fn empty_mask_trains_only_the_classifier() {
        let (spec, params, x, labels) = setup(2);
        let mask = SelectionMask::empty(&spec.mask_shape().unwrap());
        let (logits, cache) = forward(&spec, &params, &x, &mask).unwrap();
        let (_, dl) = softmax_cross_entropy(&logits, &labels).unwrap();
        let g = backward(&spec, &params, &cache, &dl, &mask).unwrap();
        assert!(g.conv.iter().all(|w| w.grad.data().iter().all(|&v| v == 0.0)));
        assert!(g.conv.iter().all(|w| w.computed.iter().all(|&f| !f)));
        assert_eq!(g.wgrad_macs(), 0);
        assert!(g.classifier_weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mismatched_cache_is_an_error() {
        let (spec, params, x, labels) = setup(3);
        let shape = spec.mask_shape().unwrap();
        let mut m = SelectionMask::empty(&shape);
        let (logits, cache) = forward(&spec, &params, &x, &m).unwrap();
        let (_, dl) = softmax_cross_entropy(&logits, &labels).unwrap();
        m.set(ChannelId::new(2, 1), true);
        assert!(matches!(backward(&spec, &params, &cache, &dl, &m), Err(Error::Mask(_))));
    }

    #[test]
    fn sgd_scalar_and_zero_lr() {
        let spec = NetworkSpec {
            input: [1, 1, 1],
            layers: vec![
                LayerSpec::Conv(ConvGeometry::new(1, 1, 1)),
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear {
                    in_features: 1,
                    out_features: 1,
                },
            ],
        };
        let mut params = Parameters {
            conv: vec![Tensor4::filled([1, 1, 1, 1], 1.0)],
            classifier_weight: Tensor4::filled([1, 1, 1, 1], 1.0),
            classifier_bias: vec![0.0],
        };
        let grads = GradientSet {
            conv: vec![WeightGrad {
                grad: Tensor4::filled([1, 1, 1, 1], 2.0),
                computed: vec![true],
                macs: 0,
            }],
            classifier_weight: Tensor4::filled([1, 1, 1, 1], 2.0),
            classifier_bias: vec![2.0],
        };
        let before = params.clone();
        sgd_step(&spec, &mut params, &grads, 0.0).unwrap();
        assert_eq!(params, before);
        sgd_step(&spec, &mut params, &grads, 0.25).unwrap();
        assert_eq!(params.conv[0].data(), &[0.5]);
        assert!(sgd_step(&spec, &mut params, &grads, -1.0).is_err());
    }

    #[test]
    fn frozen_channels_never_move() {
        let (spec, mut params, x, labels) = setup(4);
        let shape = spec.mask_shape().unwrap();
        let mut mask = SelectionMask::empty(&shape);
        mask.set(ChannelId::new(0, 1), true);
        mask.set(ChannelId::new(3, 5), true);
        let before = params.clone();
        for _ in 0..100 {
            let (logits, cache) = forward(&spec, &params, &x, &mask).unwrap();
            let (_, dl) = softmax_cross_entropy(&logits, &labels).unwrap();
            let g = backward(&spec, &params, &cache, &dl, &mask).unwrap();
            sgd_step(&spec, &mut params, &g, 0.05).unwrap();
        }
        let convs = spec.conv_layers().unwrap();
        for (l, info) in convs.iter().enumerate() {
            let zero = WeightGrad {
                grad: before.conv[l].clone(),
                computed: vec![],
                macs: 0,
            };
            let after = WeightGrad {
                grad: params.conv[l].clone(),
                computed: vec![],
                macs: 0,
            };
            for c in 0..info.geom.in_channels {
                let a = zero.channel_slice(&info.geom, c);
                let b = after.channel_slice(&info.geom, c);
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                if mask.get(ChannelId::new(l, c)) {
                    assert_ne!(bits(&a), bits(&b));
                } else {
                    assert_eq!(bits(&a), bits(&b), "layer {l} channel {c} moved");
                }
            }
        }
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(cosine_warmup_lr(0, 30, 5, 0.125).unwrap(), 0.0);
        assert_eq!(cosine_warmup_lr(5, 30, 5, 0.125).unwrap(), 0.125);
        assert!((cosine_warmup_lr(2, 30, 5, 0.125).unwrap() - 0.05).abs() < 1e-15);
        // midpoint of the cosine phase
        let mid = cosine_warmup_lr(15, 25, 5, 0.125).unwrap();
        assert!((mid - 0.0625).abs() < 1e-15);
        let last = cosine_warmup_lr(999, 1000, 5, 0.125).unwrap();
        let expect = 0.5 * 0.125 * (1.0 + (std::f64::consts::PI * 994.0 / 995.0).cos());
        assert!((last - expect).abs() < 1e-15 && last < 1e-6);
        assert_eq!(cosine_warmup_lr(0, 10, 0, 1.0).unwrap(), 1.0);
        assert!(cosine_warmup_lr(0, 5, 5, 0.1).is_err());
        assert!(cosine_warmup_lr(5, 5, 1, 0.1).is_err());
    }
}
