//! Channel-selection strategies under a memory budget.
//!
//! Every budgeted strategy scans channels in some order and keeps each one
//! whose cost still fits in the remaining budget, skipping (not stopping at)
//! channels that would overflow it. Strategies differ only in the order: a
//! seeded uniform permutation for the random kinds, descending score for the
//! deterministic ones.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::ChannelCostTable;
use crate::error::{Error, Result};
use crate::metrics::{cumulative_rgn_curve, ChannelScore, ScoreMetric};
pub use crate::mask::{ChannelId, SelectionMask};

/// Conv layers eligible for selection, in the order given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPool(Vec<usize>);

impl LayerPool {
    pub fn new(layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument {
                op: "LayerPool",
                reason: "pool must not be empty".into(),
            });
        }
        let mut seen = vec![false; num_layers];
        for &l in &layers {
            if l >= num_layers || std::mem::replace(&mut seen[l], true) {
                return Err(Error::InvalidArgument {
                    op: "LayerPool",
                    reason: format!("layer {l} is out of range or repeated (network has {num_layers} conv layers)"),
                });
            }
        }
        Ok(Self(layers))
    }

    pub fn all(num_layers: usize) -> Self {
        Self((0..num_layers).collect())
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.contains(&layer)
    }

    /// Every (layer, channel) of the pool, layers in ascending index order.
    pub fn channels(&self, table: &ChannelCostTable) -> Vec<ChannelId> {
        let mut layers = self.0.clone();
        layers.sort_unstable();
        layers
            .into_iter()
            .flat_map(|l| (0..table.layers[l].channels).map(move |c| ChannelId::new(l, c)))
            .collect()
    }
}

/// Result of a budgeted scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FillOutcome {
    pub mask: SelectionMask,
    pub slots: usize,
    /// Budget comparisons performed during the scan.
    pub cost_checks: usize,
}

/// Greedy skip-and-continue fill of `order` under `budget` memory slots.
pub fn fill_in_order(order: &[ChannelId], table: &ChannelCostTable, budget: usize) -> FillOutcome {
    let mut mask = SelectionMask::empty(&table.channel_counts());
    let mut slots = 0;
    let mut cost_checks = 0;
    for &id in order {
        let cost = table.cost(id.layer).total();
        cost_checks += 1;
        if slots + cost <= budget {
            slots += cost;
            mask.set(id, true);
        }
    }
    FillOutcome {
        mask,
        slots,
        cost_checks,
    }
}

/// In-place Fisher–Yates shuffle driven by `rng`.
pub fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Uniformly permutes the pool's channels and fills them under the budget.
pub fn sample_random_fill_counted<R: Rng + ?Sized>(
    pool: &LayerPool,
    table: &ChannelCostTable,
    budget: usize,
    rng: &mut R,
) -> FillOutcome {
    let mut order = pool.channels(table);
    fisher_yates(&mut order, rng);
    fill_in_order(&order, table, budget)
}

pub fn sample_random_fill<R: Rng + ?Sized>(
    pool: &LayerPool,
    table: &ChannelCostTable,
    budget: usize,
    rng: &mut R,
) -> SelectionMask {
    sample_random_fill_counted(pool, table, budget, rng).mask
}

/// Collects one metric of each score into a lookup table.
pub fn score_map(scores: &[ChannelScore], metric: ScoreMetric) -> BTreeMap<ChannelId, f64> {
    scores.iter().map(|s| (s.id, s.value(metric))).collect()
}

/// Pool channels ordered by score descending, ties by (layer, channel) ascending.
pub fn score_order(scores: &BTreeMap<ChannelId, f64>, pool: &LayerPool, table: &ChannelCostTable) -> Result<Vec<ChannelId>> {
    let mut ranked = pool
        .channels(table)
        .into_iter()
        .map(|id| {
            scores.get(&id).map(|&s| (id, s)).ok_or(Error::MissingScore {
                layer: id.layer,
                channel: id.channel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().map(|(id, _)| id).collect())
}

/// Highest-scoring pool channels that fit in the budget.
pub fn select_by_score(
    scores: &BTreeMap<ChannelId, f64>,
    table: &ChannelCostTable,
    budget: usize,
    pool: &LayerPool,
) -> Result<SelectionMask> {
    Ok(fill_in_order(&score_order(scores, pool, table)?, table, budget).mask)
}

/// Smallest set of layers whose share of the total profile reaches `theta`.
/// Layers with a zero profile value are never included.
pub fn top_k_layers(profile: &[f64], theta: f64) -> Result<LayerPool> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Domain(format!("theta must lie in (0, 1], got {theta}")));
    }
    let curve = cumulative_rgn_curve(profile)?;
    // tolerance absorbs rounding in the running sum, e.g. 0.6 + 0.3 < 0.9
    let k = curve
        .iter()
        .position(|p| p.fraction >= theta - 1e-12)
        .map_or(curve.len(), |i| i + 1);
    let layers = curve[..k]
        .iter()
        .filter(|p| profile[p.layer] > 0.0)
        .map(|p| p.layer)
        .collect();
    LayerPool::new(layers, profile.len())
}

/// Selects every channel whose score is at least `eps`. Not budgeted.
pub fn threshold_mask(
    scores: &BTreeMap<ChannelId, f64>,
    channel_counts: &[usize],
    eps: f64,
) -> Result<SelectionMask> {
    let mut mask = SelectionMask::empty(channel_counts);
    for (l, &n) in channel_counts.iter().enumerate() {
        for c in 0..n {
            let id = ChannelId::new(l, c);
            let s = scores.get(&id).ok_or(Error::MissingScore { layer: l, channel: c })?;
            mask.set(id, *s >= eps);
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    /// Uniform random channels from every conv layer.
    FullRandom,
    /// Uniform random channels from a pre-selected layer pool.
    #[serde(rename = "topk_random")]
    TopKRandom,
    /// Highest-RGN channels from a full-gradient profiling pass.
    DetRgn,
    /// Highest raw-norm channels from a full-gradient profiling pass.
    DetRawNorm,
    /// Every channel whose score reaches `eps`, ignoring the budget.
    Threshold { eps: f64, metric: ScoreMetric },
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FullRandom => "full_random",
            Self::TopKRandom => "topk_random",
            Self::DetRgn => "det_rgn",
            Self::DetRawNorm => "det_raw_norm",
            Self::Threshold { .. } => "threshold",
        }
    }

    pub fn is_budgeted(&self) -> bool {
        !matches!(self, Self::Threshold { .. })
    }

    pub fn needs_scores(&self) -> bool {
        !matches!(self, Self::FullRandom | Self::TopKRandom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One mask chosen at epoch 0 and reused.
    Static,
    /// A fresh mask every epoch.
    Dynamic,
}

/// Per-run selection state owned by the training loop.
#[derive(Debug, Clone)]
pub struct StrategyState {
    kind: StrategyKind,
    mode: Mode,
    pool: LayerPool,
    table: ChannelCostTable,
    budget: usize,
    rng: ChaCha8Rng,
    cached: Option<SelectionMask>,
}

impl StrategyState {
    /// `FullRandom` always uses every conv layer regardless of `pool`.
    pub fn new(
        kind: StrategyKind,
        mode: Mode,
        pool: LayerPool,
        table: ChannelCostTable,
        budget: usize,
        seed: u64,
    ) -> Self {
        let pool = match kind {
            StrategyKind::FullRandom => LayerPool::all(table.num_layers()),
            _ => pool,
        };
        Self {
            kind,
            mode,
            pool,
            table,
            budget,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached: None,
        }
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn pool(&self) -> &LayerPool {
        &self.pool
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Whether the next `step` needs channel scores from a full-gradient pass.
    pub fn needs_profiling(&self) -> bool {
        self.kind.needs_scores() && (self.mode == Mode::Dynamic || self.cached.is_none())
    }

    /// Mask for `epoch`. `scores` must come from a full-gradient pass whenever
    /// `needs_profiling` is true.
    pub fn step(&mut self, epoch: usize, scores: Option<&[ChannelScore]>) -> Result<SelectionMask> {
        if self.mode == Mode::Static {
            if let Some(mask) = &self.cached {
                return Ok(mask.clone());
            }
        }
        let mask = self.fresh(scores).map_err(|e| Error::Epoch {
            epoch,
            source: Box::new(e),
        })?;
        if self.mode == Mode::Static {
            self.cached = Some(mask.clone());
        }
        Ok(mask)
    }

    fn fresh(&mut self, scores: Option<&[ChannelScore]>) -> Result<SelectionMask> {
        let need = |scores: Option<&[ChannelScore]>, metric| {
            scores
                .map(|s| score_map(s, metric))
                .ok_or(Error::MissingProfile(self.kind.name()))
        };
        match self.kind {
            StrategyKind::FullRandom | StrategyKind::TopKRandom => {
                Ok(sample_random_fill(&self.pool, &self.table, self.budget, &mut self.rng))
            }
            StrategyKind::DetRgn => select_by_score(&need(scores, ScoreMetric::Rgn)?, &self.table, self.budget, &self.pool),
            StrategyKind::DetRawNorm => {
                select_by_score(&need(scores, ScoreMetric::Raw)?, &self.table, self.budget, &self.pool)
            }
            StrategyKind::Threshold { eps, metric } => {
                threshold_mask(&need(scores, metric)?, &self.table.channel_counts(), eps)
            }
        }
    }
}
