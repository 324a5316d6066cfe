//! Per-channel memory and compute cost accounting.
//!
//! One memory slot is one stored scalar. Activation costs are per sample, so
//! budgets do not depend on the batch size. "MACs" are multiply-accumulates of
//! the weight-gradient kernel, also per sample unless stated otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mask::SelectionMask;
use crate::network::NetworkSpec;
use crate::tensor::ConvGeometry;

/// Memory held when one input channel of a conv layer is trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCost {
    /// Gradient entries for the channel: `(C'/g)·D²`.
    pub weight_slots: usize,
    /// Cached input activations for the channel: `H·W`.
    pub activation_slots: usize,
}

impl ChannelCost {
    pub fn total(&self) -> usize {
        self.weight_slots + self.activation_slots
    }
}

pub fn channel_cost(geom: &ConvGeometry, (h, w): (usize, usize)) -> ChannelCost {
    ChannelCost {
        weight_slots: geom.out_per_group() * geom.kernel * geom.kernel,
        activation_slots: h * w,
    }
}

/// Per-sample weight-gradient MACs for one input channel: `D²·(C'/g)·H'·W'`.
pub fn channel_macs(geom: &ConvGeometry, (ho, wo): (usize, usize)) -> u64 {
    (geom.kernel * geom.kernel * geom.out_per_group() * ho * wo) as u64
}

/// Cost of every channel of one conv layer. All channels of a layer cost the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub channels: usize,
    pub cost: ChannelCost,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCostTable {
    pub layers: Vec<LayerCost>,
}

impl ChannelCostTable {
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        let layers = spec
            .conv_layers()?
            .iter()
            .map(|l| LayerCost {
                channels: l.geom.in_channels,
                cost: channel_cost(&l.geom, l.input_hw),
                macs: channel_macs(&l.geom, l.output_hw),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.channels).collect()
    }

    pub fn cost(&self, layer: usize) -> ChannelCost {
        self.layers[layer].cost
    }

    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|l| l.channels).sum()
    }

    /// Backbone memory cost with every channel trainable.
    pub fn total_slots(&self) -> usize {
        self.layers.iter().map(|l| l.channels * l.cost.total()).sum()
    }

    pub fn total_weight_slots(&self) -> usize {
        self.layers.iter().map(|l| l.channels * l.cost.weight_slots).sum()
    }

    pub fn total_activation_slots(&self) -> usize {
        self.layers.iter().map(|l| l.channels * l.cost.activation_slots).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.channels as u64 * l.macs).sum()
    }
}

/// Aggregate cost of a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionCost {
    pub slots: usize,
    pub weight_slots: usize,
    pub activation_slots: usize,
    pub macs_per_sample: u64,
}

pub fn selection_cost(mask: &SelectionMask, table: &ChannelCostTable) -> Result<SelectionCost> {
    check_dim("selection_cost", "conv layers", table.num_layers(), mask.num_layers())?;
    let mut out = SelectionCost::default();
    for (l, lc) in table.layers.iter().enumerate() {
        let sel = mask.layer(l);
        check_dim("selection_cost", "layer channels", lc.channels, sel.len())?;
        let k = sel.iter().filter(|&&b| b).count();
        out.weight_slots += k * lc.cost.weight_slots;
        out.activation_slots += k * lc.cost.activation_slots;
        out.macs_per_sample += k as u64 * lc.macs;
    }
    out.slots = out.weight_slots + out.activation_slots;
    Ok(out)
}

/// Sparsity of one backward pass relative to full fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub slots: usize,
    pub weight_sparsity: f64,
    pub activation_sparsity: f64,
    pub macs_saved_fraction: f64,
    pub wgrad_macs: u64,
}

/// Builds the sparsity report and checks the counter identity: the MACs the
/// kernels actually issued must equal the analytic count times `samples`.
pub fn sparsity_report(
    mask: &SelectionMask,
    table: &ChannelCostTable,
    instrumented_macs: u64,
    samples: usize,
) -> Result<SparsityReport> {
    let sel = selection_cost(mask, table)?;
    let analytic = sel.macs_per_sample * samples as u64;
    if instrumented_macs != analytic {
        return Err(Error::CounterMismatch {
            instrumented: instrumented_macs,
            analytic,
        });
    }
    let frac = |num: f64, den: f64| if den > 0.0 { 1.0 - num / den } else { 1.0 };
    Ok(SparsityReport {
        slots: sel.slots,
        weight_sparsity: frac(sel.weight_slots as f64, table.total_weight_slots() as f64),
        activation_sparsity: frac(sel.activation_slots as f64, table.total_activation_slots() as f64),
        macs_saved_fraction: frac(sel.macs_per_sample as f64, table.total_macs() as f64),
        wgrad_macs: instrumented_macs,
    })
}
