//! Naive dense reference implementation of the network, written with plain
//! bounds-checked loops and no shared code beyond the tensor container.

#![allow(dead_code)]

use trady_core::network::{LayerSpec, NetworkSpec, Parameters};
use trady_core::{ConvGeometry, Tensor4};

pub fn conv_forward(x: &Tensor4, w: &Tensor4, g: &ConvGeometry) -> Tensor4 {
    let [b, _, h, wd] = x.shape();
    let ho = (h + 2 * g.padding - g.dilation * (g.kernel - 1) - 1) / g.stride + 1;
    let wo = (wd + 2 * g.padding - g.dilation * (g.kernel - 1) - 1) / g.stride + 1;
    let ipg = g.in_channels / g.groups;
    let opg = g.out_channels / g.groups;
    let mut y = Tensor4::zeros([b, g.out_channels, ho, wo]);
    for n in 0..b {
        for co in 0..g.out_channels {
            let grp = co / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..ipg {
                        for k in 0..g.kernel {
                            for l in 0..g.kernel {
                                let iy = (oy * g.stride + k * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + l * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.get([n, grp * ipg + ci, iy as usize, ix as usize]) * w.get([co, ci, k, l]);
                            }
                        }
                    }
                    y.set([n, co, oy, ox], s);
                }
            }
        }
    }
    y
}

/// Returns (dx, dw) for a conv layer.
pub fn conv_backward(x: &Tensor4, w: &Tensor4, g: &ConvGeometry, dy: &Tensor4) -> (Tensor4, Tensor4) {
    let [b, _, h, wd] = x.shape();
    let [_, _, ho, wo] = dy.shape();
    let ipg = g.in_channels / g.groups;
    let opg = g.out_channels / g.groups;
    let mut dx = Tensor4::zeros(x.shape());
    let mut dw = Tensor4::zeros(w.shape());
    for n in 0..b {
        for co in 0..g.out_channels {
            let grp = co / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let gy = dy.get([n, co, oy, ox]);
                    for ci in 0..ipg {
                        for k in 0..g.kernel {
                            for l in 0..g.kernel {
                                let iy = (oy * g.stride + k * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + l * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = [n, grp * ipg + ci, iy as usize, ix as usize];
                                let wi = [co, ci, k, l];
                                dw.set(wi, dw.get(wi) + x.get(xi) * gy);
                                dx.set(xi, dx.get(xi) + w.get(wi) * gy);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

enum Saved {
    Conv(Tensor4),
    Relu(Tensor4),
    Gap([usize; 4]),
    Linear(Tensor4),
    None,
}

pub struct DenseGrads {
    pub conv: Vec<Tensor4>,
    pub classifier_weight: Tensor4,
    pub classifier_bias: Vec<f64>,
}

pub fn forward(spec: &NetworkSpec, p: &Parameters, x: &Tensor4) -> Tensor4 {
    forward_saving(spec, p, x).0
}

fn forward_saving(spec: &NetworkSpec, p: &Parameters, x: &Tensor4) -> (Tensor4, Vec<Saved>) {
    let mut cur = x.clone();
    let mut saved = Vec::new();
    let mut skips = std::collections::HashMap::new();
    let mut ci = 0;
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv(g) => {
                let y = conv_forward(&cur, &p.conv[ci], g);
                ci += 1;
                saved.push(Saved::Conv(std::mem::replace(&mut cur, y)));
            }
            LayerSpec::Relu => {
                let y = cur.map(|v| v.max(0.0));
                saved.push(Saved::Relu(std::mem::replace(&mut cur, y)));
            }
            LayerSpec::ResidualBegin { tag } => {
                skips.insert(tag.clone(), cur.clone());
                saved.push(Saved::None);
            }
            LayerSpec::ResidualAdd { tag } => {
                let s = &skips[tag];
                cur = Tensor4::from_fn(cur.shape(), |i| cur.get(i) + s.get(i));
                saved.push(Saved::None);
            }
            LayerSpec::GlobalAvgPool => {
                let [b, c, h, w] = cur.shape();
                let y = Tensor4::from_fn([b, c, 1, 1], |[n, ch, _, _]| {
                    let mut s = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            s += cur.get([n, ch, i, j]);
                        }
                    }
                    s / (h * w) as f64
                });
                saved.push(Saved::Gap(cur.shape()));
                cur = y;
            }
            LayerSpec::Linear { in_features, out_features } => {
                let b = cur.shape()[0];
                let y = Tensor4::from_fn([b, *out_features, 1, 1], |[n, o, _, _]| {
                    let mut s = p.classifier_bias[o];
                    for i in 0..*in_features {
                        s += p.classifier_weight.get([o, i, 0, 0]) * cur.get([n, i, 0, 0]);
                    }
                    s
                });
                saved.push(Saved::Linear(std::mem::replace(&mut cur, y)));
            }
        }
    }
    (cur, saved)
}

/// Mean cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> (f64, Tensor4) {
    let [b, k, _, _] = logits.shape();
    let mut loss = 0.0;
    let mut d = Tensor4::zeros(logits.shape());
    for n in 0..b {
        let z: Vec<f64> = (0..k).map(|j| logits.get([n, j, 0, 0])).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        loss += -(e[labels[n]] / s).ln();
        for j in 0..k {
            let t = if j == labels[n] { 1.0 } else { 0.0 };
            d.set([n, j, 0, 0], (e[j] / s - t) / b as f64);
        }
    }
    (loss / b as f64, d)
}

pub fn loss(spec: &NetworkSpec, p: &Parameters, x: &Tensor4, labels: &[usize]) -> f64 {
    cross_entropy(&forward(spec, p, x), labels).0
}

/// Full dense gradient of the mean cross-entropy.
pub fn dense_grads(spec: &NetworkSpec, p: &Parameters, x: &Tensor4, labels: &[usize]) -> DenseGrads {
    let (logits, saved) = forward_saving(spec, p, x);
    let (_, mut dy) = cross_entropy(&logits, labels);
    let nconv = p.conv.len();
    let mut conv: Vec<Option<Tensor4>> = vec![None; nconv];
    let mut ci = nconv;
    let mut cw = None;
    let mut cb = None;
    let mut pending = std::collections::HashMap::new();
    for (layer, s) in spec.layers.iter().zip(&saved).rev() {
        match (layer, s) {
            (LayerSpec::Linear { in_features, out_features }, Saved::Linear(xin)) => {
                let b = xin.shape()[0];
                let mut dw = Tensor4::zeros(p.classifier_weight.shape());
                let mut db = vec![0.0; *out_features];
                let mut dx = Tensor4::zeros(xin.shape());
                for n in 0..b {
                    for o in 0..*out_features {
                        let g = dy.get([n, o, 0, 0]);
                        db[o] += g;
                        for i in 0..*in_features {
                            dw.set([o, i, 0, 0], dw.get([o, i, 0, 0]) + g * xin.get([n, i, 0, 0]));
                            dx.set([n, i, 0, 0], dx.get([n, i, 0, 0]) + g * p.classifier_weight.get([o, i, 0, 0]));
                        }
                    }
                }
                cw = Some(dw);
                cb = Some(db);
                dy = dx;
            }
            (LayerSpec::GlobalAvgPool, Saved::Gap(shape)) => {
                let hw = (shape[2] * shape[3]) as f64;
                dy = Tensor4::from_fn(*shape, |[n, c, _, _]| dy.get([n, c, 0, 0]) / hw);
            }
            (LayerSpec::Relu, Saved::Relu(pre)) => {
                dy = Tensor4::from_fn(pre.shape(), |i| if pre.get(i) > 0.0 { dy.get(i) } else { 0.0 });
            }
            (LayerSpec::ResidualAdd { tag }, Saved::None) => {
                pending.insert(tag.clone(), dy.clone());
            }
            (LayerSpec::ResidualBegin { tag }, Saved::None) => {
                let s = pending.remove(tag).unwrap();
                dy = Tensor4::from_fn(dy.shape(), |i| dy.get(i) + s.get(i));
            }
            (LayerSpec::Conv(g), Saved::Conv(xin)) => {
                ci -= 1;
                let (dx, dw) = conv_backward(xin, &p.conv[ci], g, &dy);
                conv[ci] = Some(dw);
                dy = dx;
            }
            _ => unreachable!("oracle cache out of sync"),
        }
    }
    DenseGrads {
        conv: conv.into_iter().map(Option::unwrap).collect(),
        classifier_weight: cw.unwrap(),
        classifier_bias: cb.unwrap(),
    }
}

/// Channel slice `[:, c, :, :]` (per group) of a conv weight-shaped tensor.
pub fn slice(t: &Tensor4, g: &ConvGeometry, c: usize) -> Vec<f64> {
    let ipg = g.in_channels / g.groups;
    let opg = g.out_channels / g.groups;
    let grp = c / ipg;
    let mut out = Vec::new();
    for co in grp * opg..(grp + 1) * opg {
        for k in 0..g.kernel {
            for l in 0..g.kernel {
                out.push(t.get([co, c % ipg, k, l]));
            }
        }
    }
    out
}

/// Small deterministic generator so tests do not depend on the crate's RNG choice.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn tensor(&mut self, shape: [usize; 4]) -> Tensor4 {
        Tensor4::from_fn(shape, |_| self.normal())
    }
}
