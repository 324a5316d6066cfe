mod common;

use common::oracle::{self, Lcg};
use trady_core::conv::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad_masked};
use trady_core::layers::{linear_backward, linear_forward, softmax_cross_entropy};
use trady_core::network::{backward, forward, NetworkSpec, Parameters};
use trady_core::{ConvGeometry, SelectionMask, Tensor4};

fn random_params(spec: &NetworkSpec, rng: &mut Lcg) -> Parameters {
    let convs = spec.conv_layers().unwrap();
    let (k, fin) = match spec.layers.last().unwrap() {
        trady_core::network::LayerSpec::Linear { in_features, out_features } => (*out_features, *in_features),
        _ => unreachable!(),
    };
    Parameters {
        conv: convs.iter().map(|l| rng.tensor(l.geom.weight_shape()).scale(0.5)).collect(),
        classifier_weight: rng.tensor([k, fin, 1, 1]),
        classifier_bias: (0..k).map(|_| rng.normal()).collect(),
    }
}

fn random_mask(counts: &[usize], p: f64, rng: &mut Lcg) -> SelectionMask {
    SelectionMask::from_layers(counts.iter().map(|&n| (0..n).map(|_| rng.uniform() < p).collect()).collect())
}

/// Max |Δ| over selected slices; panics if any unselected slice is nonzero.
fn masked_vs_dense(spec: &NetworkSpec, params: &Parameters, x: &Tensor4, labels: &[usize], mask: &SelectionMask) -> f64 {
    let (logits, cache) = forward(spec, params, x, mask).unwrap();
    let (_, dl) = softmax_cross_entropy(&logits, labels).unwrap();
    let got = backward(spec, params, &cache, &dl, mask).unwrap();
    let want = oracle::dense_grads(spec, params, x, labels);
    let mut worst = 0.0f64;
    for (l, info) in spec.conv_layers().unwrap().iter().enumerate() {
        for c in 0..info.geom.in_channels {
            let a = got.conv[l].channel_slice(&info.geom, c);
            if mask.layer(l)[c] {
                assert!(got.conv[l].computed[c]);
                let b = oracle::slice(&want.conv[l], &info.geom, c);
                for (u, v) in a.iter().zip(&b) {
                    worst = worst.max((u - v).abs());
                }
            } else {
                assert!(!got.conv[l].computed[c]);
                assert!(a.iter().all(|&v| v == 0.0), "unselected slice {l}/{c} is nonzero");
            }
        }
    }
    worst = worst.max(got.classifier_weight.max_abs_diff(&want.classifier_weight).unwrap());
    for (u, v) in got.classifier_bias.iter().zip(&want.classifier_bias) {
        worst = worst.max((u - v).abs());
    }
    worst
}

#[test]
fn masked_backward_matches_dense_oracle() {
    let mut rng = Lcg(11);
    for i in 0..20 {
        let width = [4, 6, 8][i % 3];
        let hw = [6, 7, 8][i % 3];
        let spec = NetworkSpec::toynet_residual_width([2 + i % 2, hw, hw], width, 3);
        let params = random_params(&spec, &mut rng);
        let b = 1 + i % 3;
        let x = rng.tensor([b, spec.input[0], hw, hw]);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
        let counts = spec.mask_shape().unwrap();
        let p = [0.0, 0.2, 0.5, 1.0][i % 4];
        let mask = random_mask(&counts, p, &mut rng);
        let d = masked_vs_dense(&spec, &params, &x, &labels, &mask);
        assert!(d <= 1e-12, "instance {i}: max diff {d}");
    }
}

#[test]
fn two_layer_logits_match_composition() {
    let mut rng = Lcg(5);
    let spec = NetworkSpec::two_layer([2, 7, 7], 3, 4, 3);
    let params = random_params(&spec, &mut rng);
    let x = rng.tensor([2, 2, 7, 7]);
    let mask = SelectionMask::empty(&spec.mask_shape().unwrap());
    let (logits, _) = forward(&spec, &params, &x, &mask).unwrap();
    let convs = spec.conv_layers().unwrap();
    let h1 = conv2d_forward(&x, &params.conv[0], &convs[0].geom).unwrap().map(|v| v.max(0.0));
    let h2 = conv2d_forward(&h1, &params.conv[1], &convs[1].geom).unwrap();
    let pooled = trady_core::layers::gap_forward(&h2);
    let want = linear_forward(&pooled, &params.classifier_weight, &params.classifier_bias).unwrap();
    assert!(logits.max_abs_diff(&want).unwrap() <= 1e-12);
    assert!(logits.max_abs_diff(&oracle::forward(&spec, &params, &x)).unwrap() <= 1e-12);
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = Lcg(3);
    let geoms = [
        ConvGeometry::new(2, 3, 3).with_padding(1),
        ConvGeometry::new(2, 4, 3).with_stride(2),
        ConvGeometry::new(4, 4, 3).with_groups(2).with_dilation(2).with_padding(1),
        ConvGeometry::depthwise(3, 3).with_padding(1).with_stride(2),
    ];
    let h = 1e-6;
    for (i, g) in geoms.iter().enumerate() {
        let x = rng.tensor([2, g.in_channels, 6, 5]);
        let w = rng.tensor(g.weight_shape());
        let loss = |x: &Tensor4, w: &Tensor4| conv2d_forward(x, w, g).unwrap().data().iter().map(|v| v * v).sum::<f64>() / 2.0;
        let y = conv2d_forward(&x, &w, g).unwrap();
        let dw = conv2d_weight_grad_masked(&x, &y, g, &vec![true; g.in_channels]).unwrap();
        let dx = conv2d_input_grad(&w, &y, g, (6, 5)).unwrap();
        let fd = |t: &Tensor4, is_w: bool| -> Vec<f64> {
            (0..t.len())
                .map(|k| {
                    let mut p = t.clone();
                    let mut m = t.clone();
                    p.data_mut()[k] += h;
                    m.data_mut()[k] -= h;
                    let (lp, lm) = if is_w { (loss(&x, &p), loss(&x, &m)) } else { (loss(&p, &w), loss(&m, &w)) };
                    (lp - lm) / (2.0 * h)
                })
                .collect()
        };
        let ew = rel_err(dw.grad.data(), &fd(&w, true));
        let ex = rel_err(dx.data(), &fd(&x, false));
        assert!(ew <= 1e-6 && ex <= 1e-6, "geometry {i}: weight {ew}, input {ex}");
    }
}

#[test]
fn linear_matches_finite_differences() {
    let mut rng = Lcg(8);
    let x = rng.tensor([3, 5, 1, 1]);
    let w = rng.tensor([4, 5, 1, 1]);
    let bias: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let loss = |x: &Tensor4, w: &Tensor4, b: &[f64]| {
        linear_forward(x, w, b).unwrap().data().iter().map(|v| v * v).sum::<f64>() / 2.0
    };
    let y = linear_forward(&x, &w, &bias).unwrap();
    let g = linear_backward(&x, &w, &y).unwrap();
    let h = 1e-6;
    let mut fw = Vec::new();
    for k in 0..w.len() {
        let (mut p, mut m) = (w.clone(), w.clone());
        p.data_mut()[k] += h;
        m.data_mut()[k] -= h;
        fw.push((loss(&x, &p, &bias) - loss(&x, &m, &bias)) / (2.0 * h));
    }
    let mut fb = Vec::new();
    for k in 0..bias.len() {
        let (mut p, mut m) = (bias.clone(), bias.clone());
        p[k] += h;
        m[k] -= h;
        fb.push((loss(&x, &w, &p) - loss(&x, &w, &m)) / (2.0 * h));
    }
    let mut fx = Vec::new();
    for k in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[k] += h;
        m.data_mut()[k] -= h;
        fx.push((loss(&p, &w, &bias) - loss(&m, &w, &bias)) / (2.0 * h));
    }
    assert!(rel_err(g.dweight.data(), &fw) <= 1e-6);
    assert!(rel_err(&g.dbias, &fb) <= 1e-6);
    assert!(rel_err(g.dx.data(), &fx) <= 1e-6);
}

#[test]
fn weight_grad_is_linear_in_upstream() {
    let mut rng = Lcg(21);
    let g = ConvGeometry::new(3, 4, 3).with_padding(1);
    let x = rng.tensor([2, 3, 5, 5]);
    let mask = [true, false, true];
    for _ in 0..5 {
        let u1 = rng.tensor([2, 4, 5, 5]);
        let u2 = rng.tensor([2, 4, 5, 5]);
        let lambda = rng.normal() * 3.0;
        let combo = u1.scale(lambda).add(&u2).unwrap();
        let a = conv2d_weight_grad_masked(&x, &combo, &g, &mask).unwrap();
        let b1 = conv2d_weight_grad_masked(&x, &u1, &g, &mask).unwrap();
        let b2 = conv2d_weight_grad_masked(&x, &u2, &g, &mask).unwrap();
        let want = b1.grad.scale(lambda).add(&b2.grad).unwrap();
        assert!(a.grad.max_abs_diff(&want).unwrap() <= 1e-12);
    }
}

#[test]
fn grouped_slices_ignore_other_groups() {
    let mut rng = Lcg(4);
    let g = ConvGeometry::new(4, 6, 3).with_groups(2).with_padding(1);
    let x = rng.tensor([1, 4, 5, 5]);
    let u = rng.tensor([1, 6, 5, 5]);
    let mask = [true; 4];
    let base = conv2d_weight_grad_masked(&x, &u, &g, &mask).unwrap();
    // perturb upstream of group 1 (output channels 3..6)
    let mut u2 = u.clone();
    for co in 3..6 {
        for i in 0..25 {
            let idx = co * 25 + i;
            u2.data_mut()[idx] += 10.0;
        }
    }
    let pert = conv2d_weight_grad_masked(&x, &u2, &g, &mask).unwrap();
    for c in 0..2 {
        assert_eq!(base.channel_slice(&g, c), pert.channel_slice(&g, c));
    }
    for c in 2..4 {
        assert_ne!(base.channel_slice(&g, c), pert.channel_slice(&g, c));
    }
}

#[test]
fn deepest_only_mask_stops_early_and_matches() {
    let mut rng = Lcg(99);
    let spec = NetworkSpec::toynet_residual([3, 8, 8], 4);
    let params = random_params(&spec, &mut rng);
    let x = rng.tensor([2, 3, 8, 8]);
    let counts = spec.mask_shape().unwrap();
    let mut mask = SelectionMask::empty(&counts);
    mask.set(trady_core::ChannelId::new(counts.len() - 1, 3), true);
    assert!(masked_vs_dense(&spec, &params, &x, &[1, 2], &mask) <= 1e-12);
}
