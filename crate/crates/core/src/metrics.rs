//! Channel and layer gradient-norm metrics.
//!
//! The reweighted gradient norm (RGN) of a channel is its raw gradient norm
//! divided by the memory it costs to train. A layer's RGN is the sum over its
//! channels.

use serde::{Deserialize, Serialize};

use crate::conv::WeightGrad;
use crate::cost::{ChannelCost, ChannelCostTable};
use crate::error::{check_dim, Error, Result};
use crate::mask::ChannelId;
use crate::network::{GradientSet, NetworkSpec};
use crate::tensor::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub id: ChannelId,
    pub raw_norm: f64,
    pub rgn: f64,
}

/// Which channel score drives a score-based strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Raw,
    Rgn,
}

impl ChannelScore {
    pub fn value(&self, metric: ScoreMetric) -> f64 {
        match metric {
            ScoreMetric::Raw => self.raw_norm,
            ScoreMetric::Rgn => self.rgn,
        }
    }
}

pub fn slice_norm(slice: &[f64]) -> f64 {
    slice.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Euclidean norm of the gradient slice of input channel `channel`.
pub fn channel_grad_norm(grad: &WeightGrad, geom: &ConvGeometry, layer: usize, channel: usize) -> Result<f64> {
    if !grad.computed.get(channel).copied().unwrap_or(false) {
        return Err(Error::Uncomputed { layer, channel });
    }
    Ok(slice_norm(&grad.channel_slice(geom, channel)))
}

pub fn channel_rgn(raw_norm: f64, cost: ChannelCost) -> f64 {
    raw_norm / cost.total() as f64
}

/// Sum of channel RGNs of a fully computed layer.
///
/// Evaluated both as `Σ rgn_c` and as `Σ ‖g_c‖ / cost`; the two must agree.
pub fn layer_rgn(grad: &WeightGrad, geom: &ConvGeometry, cost: ChannelCost, layer: usize) -> Result<f64> {
    let norms = (0..geom.in_channels)
        .map(|c| channel_grad_norm(grad, geom, layer, c))
        .collect::<Result<Vec<_>>>()?;
    let per_channel: f64 = norms.iter().map(|&n| channel_rgn(n, cost)).sum();
    let factored = norms.iter().sum::<f64>() / cost.total() as f64;
    if (per_channel - factored).abs() > 1e-12 * per_channel.abs().max(1.0) {
        return Err(Error::Degenerate(format!(
            "layer {layer} RGN forms disagree: {per_channel} vs {factored}"
        )));
    }
    Ok(per_channel)
}

/// Scores of every computed conv channel, in (layer, channel) order.
pub fn channel_scores(spec: &NetworkSpec, grads: &GradientSet, table: &ChannelCostTable) -> Result<Vec<ChannelScore>> {
    let convs = spec.conv_layers()?;
    check_dim("channel_scores", "conv layers", convs.len(), grads.conv.len())?;
    check_dim("channel_scores", "cost table layers", convs.len(), table.num_layers())?;
    let mut out = Vec::new();
    for (l, (info, g)) in convs.iter().zip(&grads.conv).enumerate() {
        let cost = table.cost(l);
        for c in 0..info.geom.in_channels {
            if g.computed[c] {
                let raw = channel_grad_norm(g, &info.geom, l, c)?;
                out.push(ChannelScore {
                    id: ChannelId::new(l, c),
                    raw_norm: raw,
                    rgn: channel_rgn(raw, cost),
                });
            }
        }
    }
    Ok(out)
}

/// Per-layer totals accumulated over gradient passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRgnProfile {
    pub rgn: Vec<f64>,
    pub raw: Vec<f64>,
}

impl LayerRgnProfile {
    pub fn zeros(layers: usize) -> Self {
        Self {
            rgn: vec![0.0; layers],
            raw: vec![0.0; layers],
        }
    }

    /// Adds the scores of one pass; channels that were not computed contribute nothing.
    pub fn add_scores(&mut self, scores: &[ChannelScore]) {
        for s in scores {
            self.rgn[s.id.layer] += s.rgn;
            self.raw[s.id.layer] += s.raw_norm;
        }
    }

    /// Adds the strict layer RGN of a fully computed gradient.
    pub fn add_full_gradient(&mut self, spec: &NetworkSpec, grads: &GradientSet, table: &ChannelCostTable) -> Result<()> {
        let convs = spec.conv_layers()?;
        check_dim("LayerRgnProfile", "conv layers", self.rgn.len(), convs.len())?;
        for (l, (info, g)) in convs.iter().zip(&grads.conv).enumerate() {
            self.rgn[l] += layer_rgn(g, &info.geom, table.cost(l), l)?;
            for c in 0..info.geom.in_channels {
                self.raw[l] += channel_grad_norm(g, &info.geom, l, c)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of layers included so far.
    pub k: usize,
    /// The layer added at this step.
    pub layer: usize,
    pub fraction: f64,
}

/// Layer indices sorted by value descending, ties by index ascending.
pub fn rank_layers(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Cumulative share of the total captured by the top-k layers, for every k.
pub fn cumulative_rgn_curve(values: &[f64]) -> Result<Vec<CurvePoint>> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain("layer profile entries must be finite and non-negative".into()));
    }
    let order = rank_layers(values);
    // summed in rank order so the curve does not depend on layer numbering
    let total: f64 = order.iter().map(|&l| values[l]).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("layer profile is all zero".into()));
    }
    let n = values.len();
    let mut acc = 0.0;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, layer)| {
            acc += values[layer];
            CurvePoint {
                k: i + 1,
                layer,
                fraction: if i + 1 == n { 1.0 } else { (acc / total).min(1.0) },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;
    use proptest::prelude::*;

    fn grad_of(geom: &ConvGeometry, f: impl FnMut([usize; 4]) -> f64) -> WeightGrad {
        WeightGrad {
            grad: Tensor4::from_fn(geom.weight_shape(), f),
            computed: vec![true; geom.in_channels],
            macs: 0,
        }
    }

    #[test]
    fn norm_examples() {
        let geom = ConvGeometry::new(2, 2, 2);
        let g = grad_of(&geom, |[_, c, _, _]| if c == 0 { 0.0 } else { 1.0 });
        assert_eq!(channel_grad_norm(&g, &geom, 0, 0).unwrap(), 0.0);
        assert!((channel_grad_norm(&g, &geom, 0, 1).unwrap() - 8f64.sqrt()).abs() < 1e-15);
        let mut frozen = g.clone();
        frozen.computed[1] = false;
        assert!(matches!(channel_grad_norm(&frozen, &geom, 3, 1), Err(Error::Uncomputed { layer: 3, channel: 1 })));
    }

    #[test]
    fn rgn_examples() {
        let cost = ChannelCost {
            weight_slots: 8,
            activation_slots: 25,
        };
        assert!((channel_rgn(8f64.sqrt(), cost) - 0.085710).abs() < 1e-6);
        assert_eq!(channel_rgn(0.0, cost), 0.0);
        assert_eq!(channel_rgn(3.0 * 1.5, cost), 3.0 * channel_rgn(1.5, cost));
    }

    #[test]
    fn layer_rgn_examples() {
        let geom = ConvGeometry::new(2, 1, 1);
        let g = grad_of(&geom, |[_, c, _, _]| if c == 0 { 3.0 } else { -4.0 });
        let cost = ChannelCost {
            weight_slots: 1,
            activation_slots: 9,
        };
        assert!((layer_rgn(&g, &geom, cost, 0).unwrap() - 0.7).abs() < 1e-15);
        let zero = grad_of(&geom, |_| 0.0);
        assert_eq!(layer_rgn(&zero, &geom, cost, 0).unwrap(), 0.0);
    }

    #[test]
    fn curve_examples() {
        let c = cumulative_rgn_curve(&[0.5, 0.3, 0.15, 0.05]).unwrap();
        let f: Vec<f64> = c.iter().map(|p| p.fraction).collect();
        for (a, b) in f.iter().zip([0.5, 0.8, 0.95, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let u = cumulative_rgn_curve(&[2.0; 5]).unwrap();
        for p in &u {
            assert!((p.fraction - p.k as f64 / 5.0).abs() < 1e-15);
        }
        assert_eq!(u.iter().map(|p| p.layer).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(cumulative_rgn_curve(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn layer_rgn_two_forms(vals in proptest::collection::vec(-10.0f64..10.0, 3 * 4 * 9)) {
            let geom = ConvGeometry::new(4, 3, 3);
            let g = WeightGrad {
                grad: Tensor4::from_vec(geom.weight_shape(), vals).unwrap(),
                computed: vec![true; 4],
                macs: 0,
            };
            let cost = ChannelCost { weight_slots: 27, activation_slots: 49 };
            let v = layer_rgn(&g, &geom, cost, 0).unwrap();
            let sum: f64 = (0..4).map(|c| slice_norm(&g.channel_slice(&geom, c))).sum();
            prop_assert!((v - sum / 76.0).abs() <= 1e-12);
        }

        #[test]
        fn norm_matches_flat_oracle(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4)) {
            let geom = ConvGeometry::new(3, 2, 2);
            let g = WeightGrad {
                grad: Tensor4::from_vec(geom.weight_shape(), vals.clone()).unwrap(),
                computed: vec![true; 3],
                macs: 0,
            };
            for c in 0..3 {
                let mut flat = Vec::new();
                for co in 0..2 {
                    flat.extend_from_slice(&vals[(co * 3 + c) * 4..(co * 3 + c + 1) * 4]);
                }
                let oracle = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((channel_grad_norm(&g, &geom, 0, c).unwrap() - oracle).abs() <= 1e-15);
            }
        }

        #[test]
        fn rankings_survive_scaling(norms in proptest::collection::vec(0.0f64..10.0, 2..20), lambda in 0.01f64..100.0) {
            let cost = ChannelCost { weight_slots: 9, activation_slots: 16 };
            let scaled_cost = ChannelCost { weight_slots: 18, activation_slots: 32 };
            let base: Vec<f64> = norms.iter().map(|&n| channel_rgn(n, cost)).collect();
            let grad_scaled: Vec<f64> = norms.iter().map(|&n| channel_rgn(lambda * n, cost)).collect();
            let cost_scaled: Vec<f64> = norms.iter().map(|&n| channel_rgn(n, scaled_cost)).collect();
            prop_assert_eq!(rank_layers(&base), rank_layers(&grad_scaled));
            prop_assert_eq!(rank_layers(&base), rank_layers(&cost_scaled));
            for (a, b) in base.iter().zip(&cost_scaled) {
                prop_assert!((a / 2.0 - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }

        #[test]
        fn curve_matches_brute_force(vals in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            prop_assume!(vals.iter().sum::<f64>() > 0.0);
            let curve = cumulative_rgn_curve(&vals).unwrap();
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let total: f64 = vals.iter().sum();
            let mut acc = 0.0;
            for (i, p) in curve.iter().enumerate() {
                acc += sorted[i];
                prop_assert!((p.fraction - acc / total).abs() <= 1e-12);
                if i > 0 {
                    prop_assert!(p.fraction >= curve[i - 1].fraction);
                }
            }
            prop_assert_eq!(curve.last().unwrap().fraction, 1.0);
        }

        #[test]
        fn curve_is_permutation_invariant(vals in proptest::collection::vec(0.01f64..1.0, 2..10), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..vals.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let a = cumulative_rgn_curve(&vals).unwrap();
            let b = cumulative_rgn_curve(&shuffled).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert_eq!(p.fraction, q.fraction);
                prop_assert_eq!(vals[p.layer], shuffled[q.layer]);
            }
        }
    }
}
