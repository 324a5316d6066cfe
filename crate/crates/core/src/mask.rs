//! Per-layer input-channel selection masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies one input channel of one conv layer. `layer` is the conv-layer
/// ordinal (0 = shallowest conv), not the position in the layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

impl ChannelId {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

/// Boolean vector over input channels for each conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    layers: Vec<Vec<bool>>,
}

impl SelectionMask {
    /// All-false mask with the given per-layer channel counts.
    pub fn empty(channels: &[usize]) -> Self {
        Self {
            layers: channels.iter().map(|&c| vec![false; c]).collect(),
        }
    }

    pub fn full(channels: &[usize]) -> Self {
        Self {
            layers: channels.iter().map(|&c| vec![true; c]).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &[bool] {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    #[inline]
    pub fn get(&self, id: ChannelId) -> bool {
        self.layers[id.layer][id.channel]
    }

    pub fn set(&mut self, id: ChannelId, value: bool) {
        self.layers[id.layer][id.channel] = value;
    }

    pub fn count(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Selected channels in (layer, channel) order.
    pub fn selected(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.layers.iter().enumerate().flat_map(|(l, chans)| {
            chans
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(move |(c, _)| ChannelId::new(l, c))
        })
    }

    /// Shallowest conv layer with at least one selected channel.
    pub fn shallowest_selected(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.iter().any(|&b| b))
    }

    pub fn check_shape(&self, channels: &[usize]) -> Result<()> {
        if self.channel_counts() != channels {
            return Err(Error::Mask(format!(
                "mask has per-layer channel counts {:?}, expected {:?}",
                self.channel_counts(),
                channels
            )));
        }
        Ok(())
    }

    /// Audit form: `{layer_index: [selected channel indices]}`, one key per conv layer.
    pub fn to_audit(&self) -> BTreeMap<usize, Vec<usize>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, chans)| {
                let sel = chans.iter().enumerate().filter(|(_, &b)| b).map(|(c, _)| c).collect();
                (l, sel)
            })
            .collect()
    }

    pub fn to_audit_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .to_audit()
            .into_iter()
            .map(|(l, sel)| (l.to_string(), serde_json::json!(sel)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn from_audit_json(value: &serde_json::Value, channels: &[usize]) -> Result<Self> {
        let map: BTreeMap<String, Vec<usize>> = serde_json::from_value(value.clone())
            .map_err(|e| Error::Mask(format!("bad audit document: {e}")))?;
        let mut mask = Self::empty(channels);
        for (key, sel) in map {
            let layer: usize = key
                .parse()
                .map_err(|_| Error::Mask(format!("bad layer key {key:?}")))?;
            if layer >= channels.len() {
                return Err(Error::Mask(format!("layer {layer} out of range")));
            }
            for c in sel {
                if c >= channels[layer] {
                    return Err(Error::Mask(format!("channel {c} out of range in layer {layer}")));
                }
                mask.set(ChannelId::new(layer, c), true);
            }
        }
        Ok(mask)
    }
}
