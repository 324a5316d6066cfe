//! One training run: pretraining with every channel trainable, or budgeted
//! fine-tuning under a channel-selection strategy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trady_core::analysis::{TopologyKind, TopologyVector};
use trady_core::cost::{selection_cost, sparsity_report, ChannelCostTable};
use trady_core::layers::softmax_cross_entropy;
use trady_core::metrics::{channel_scores, ChannelScore, LayerRgnProfile};
use trady_core::network::{backward, cosine_warmup_lr, forward, predict, sgd_step, GradientSet, NetworkSpec, Parameters};
use trady_core::selection::{top_k_layers, LayerPool, Mode, StrategyState};
use trady_core::stable::{estimate_alpha, AlphaEstimate, GradientTraceMatrix};
use trady_core::SelectionMask;

use crate::checkpoint;
use crate::config::{DataSource, ExperimentConfig, PoolSource};
use crate::data::{epoch_batches, load_idx_dataset, Dataset};
use crate::error::{HarnessError, Result};

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub slots_used: usize,
    /// Absent for strategies that ignore the budget.
    pub budget: Option<usize>,
    pub weight_sparsity: f64,
    pub activation_sparsity: f64,
    /// Weight-gradient MACs issued during the epoch.
    pub wgrad_macs: u64,
    pub macs_saved_fraction: f64,
    pub alpha_hat: Option<f64>,
}

/// Everything a run produces apart from the final weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub strategy: String,
    pub mode: Option<Mode>,
    pub seed: u64,
    pub budget: Option<usize>,
    pub total_slots: usize,
    pub pool: Vec<usize>,
    pub rows: Vec<EpochRow>,
    /// Per epoch; includes the unclipped estimate.
    pub alpha: Vec<Option<AlphaEstimate>>,
    /// Weight-gradient MACs of full-gradient profiling passes, per epoch.
    /// Not counted in `wgrad_macs`.
    pub profiling_macs: Vec<u64>,
    /// Backward passes whose MAC counter matched the cost model.
    pub checked_backwards: usize,
    /// Test accuracy of the starting weights, before any update.
    pub initial_test_acc: f64,
    /// Full-gradient layer profile of the starting weights used to pick a top-k pool.
    pub pool_profile: Option<LayerRgnProfile>,
    /// Per-layer sum over epochs of the epoch gradient's channel norms.
    pub layer_raw_topology: Vec<f64>,
    pub layer_rgn_topology: Vec<f64>,
    /// Per-channel sum over epochs of epoch gradient norms, in (layer, channel) order.
    pub channel_raw_topology: Vec<f64>,
    #[serde(skip)]
    pub masks: Vec<SelectionMask>,
}

/// Which accumulated gradient-norm vector to compare across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyField {
    LayerRaw,
    LayerRgn,
    ChannelRaw,
}

impl RunRecord {
    pub fn final_test_acc(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.test_acc)
    }

    pub fn topology(&self, field: TopologyField, label: impl Into<String>) -> TopologyVector {
        let (kind, values) = match field {
            TopologyField::LayerRaw => (TopologyKind::Layer, &self.layer_raw_topology),
            TopologyField::LayerRgn => (TopologyKind::Layer, &self.layer_rgn_topology),
            TopologyField::ChannelRaw => (TopologyKind::Channel, &self.channel_raw_topology),
        };
        TopologyVector {
            kind,
            label: label.into(),
            values: values.clone(),
        }
    }
}

/// Training and test data, standardized with training statistics if requested.
pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &config.data {
        DataSource::Synthetic(task) => task.generate()?,
        DataSource::Idx { paths, classes } => {
            let train = load_idx_dataset(&paths.train_images, &paths.train_labels, *classes)?;
            let k = classes.unwrap_or(train.classes);
            let mut test = load_idx_dataset(&paths.test_images, &paths.test_labels, Some(k))?;
            test.classes = k;
            (train, test)
        }
    };
    if train.sample_shape() != test.sample_shape() {
        return Err(HarnessError::Config(format!(
            "train samples are {:?} but test samples are {:?}",
            train.sample_shape(),
            test.sample_shape()
        )));
    }
    if config.standardize {
        let stats = train.channel_stats();
        train.standardize(&stats);
        test.standardize(&stats);
    }
    Ok((train, test))
}

/// Builds the network and starting weights for a run.
pub fn starting_point(config: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<(NetworkSpec, Parameters)> {
    let spec = config.network.build(train.sample_shape(), train.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = match &config.checkpoint {
        Some(path) => {
            let mut p = checkpoint::load(path)?;
            if config.reinit_classifier {
                let (w, b) = Parameters::init_classifier(&spec, &mut rng);
                p.classifier_weight = w;
                p.classifier_bias = b;
            }
            p
        }
        None => Parameters::init(&spec, &mut rng)?,
    };
    params.check(&spec)?;
    params.conv.shrink_to_fit();
    Ok((spec, params))
}

/// Mean over batches of the full-mask gradient, visiting the data in order.
pub fn full_gradient(spec: &NetworkSpec, params: &Parameters, data: &Dataset, batch_size: usize) -> Result<(GradientSet, u64)> {
    let full = SelectionMask::full(&spec.mask_shape()?);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total: Option<GradientSet> = None;
    let mut batches = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let (logits, cache) = forward(spec, params, &x, &full)?;
        let (_, dl) = softmax_cross_entropy(&logits, &y)?;
        let g = backward(spec, params, &cache, &dl, &full)?;
        match &mut total {
            Some(t) => t.accumulate(&g)?,
            None => total = Some(g),
        }
        batches += 1;
    }
    let mut g = total.ok_or_else(|| HarnessError::Config("empty training set".into()))?;
    let macs = g.wgrad_macs();
    let s = 1.0 / batches as f64;
    for w in &mut g.conv {
        w.grad = w.grad.scale(s);
    }
    g.classifier_weight = g.classifier_weight.scale(s);
    g.classifier_bias.iter_mut().for_each(|b| *b *= s);
    Ok((g, macs))
}

/// Layer RGN profile of the full gradient at `params`.
pub fn profile_layers(spec: &NetworkSpec, params: &Parameters, data: &Dataset, batch_size: usize) -> Result<LayerRgnProfile> {
    let table = ChannelCostTable::from_spec(spec)?;
    let (g, _) = full_gradient(spec, params, data, batch_size)?;
    let mut profile = LayerRgnProfile::zeros(table.num_layers());
    profile.add_full_gradient(spec, &g, &table)?;
    Ok(profile)
}

pub fn accuracy(spec: &NetworkSpec, params: &Parameters, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let logits = predict(spec, params, &x)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn count_correct(logits: &trady_core::Tensor4, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &y)| {
            let row = logits.outer(n);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count()
}

enum Selector {
    Full,
    Strategy(Box<StrategyState>),
}

/// Trains every channel with an all-true mask.
pub fn run_pretrain(config: &ExperimentConfig, seed: u64) -> Result<(RunRecord, Parameters)> {
    let (train, test) = load_data(config)?;
    run_pretrain_on(config, seed, &train, &test)
}

pub fn run_pretrain_on(config: &ExperimentConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<(RunRecord, Parameters)> {
    config.validate()?;
    let (spec, params) = starting_point(config, train, seed)?;
    train_loop(config, seed, spec, params, Selector::Full, Vec::new(), train, test)
}

/// Budgeted fine-tuning under the configured strategy.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<(RunRecord, Parameters)> {
    let (train, test) = load_data(config)?;
    run_experiment_on(config, seed, &train, &test)
}

pub fn run_experiment_on(config: &ExperimentConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<(RunRecord, Parameters)> {
    config.validate()?;
    let (spec, params) = starting_point(config, train, seed)?;
    let table = ChannelCostTable::from_spec(&spec)?;
    let n = table.num_layers();
    let mut pool_profile = None;
    let pool = match &config.pool {
        PoolSource::All => LayerPool::all(n),
        PoolSource::Layers { layers } => LayerPool::new(layers.clone(), n)?,
        PoolSource::TopK { theta } => {
            let profile = profile_layers(&spec, &params, train, config.batch_size)?;
            let pool = top_k_layers(&profile.rgn, *theta)?;
            pool_profile = Some(profile);
            pool
        }
    };
    let pool_layers = pool.layers().to_vec();
    let budget = config.budget.resolve(&table);
    let state = StrategyState::new(config.strategy, config.mode, pool, table, budget, seed ^ 0x7472_6164_795f_7331);
    let (mut record, params) = train_loop(config, seed, spec, params, Selector::Strategy(Box::new(state)), pool_layers, train, test)?;
    record.pool_profile = pool_profile;
    Ok((record, params))
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    config: &ExperimentConfig,
    seed: u64,
    spec: NetworkSpec,
    mut params: Parameters,
    mut selector: Selector,
    pool: Vec<usize>,
    train: &Dataset,
    test: &Dataset,
) -> Result<(RunRecord, Parameters)> {
    let table = ChannelCostTable::from_spec(&spec)?;
    let counts = table.channel_counts();
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(1);

    let (strategy, mode, budget) = match &selector {
        Selector::Full => ("full".to_string(), None, Some(table.total_slots())),
        Selector::Strategy(s) => (
            s.kind().name().to_string(),
            Some(s.mode()),
            s.kind().is_budgeted().then_some(s.budget()),
        ),
    };
    let mut record = RunRecord {
        label: config.label.clone(),
        strategy,
        mode,
        seed,
        budget,
        total_slots: table.total_slots(),
        pool,
        rows: Vec::with_capacity(config.epochs),
        alpha: Vec::new(),
        profiling_macs: Vec::new(),
        checked_backwards: 0,
        initial_test_acc: accuracy(&spec, &params, test)?,
        pool_profile: None,
        layer_raw_topology: vec![0.0; counts.len()],
        layer_rgn_topology: vec![0.0; counts.len()],
        channel_raw_topology: vec![0.0; table.total_channels()],
        masks: Vec::new(),
    };
    let channel_offsets: Vec<usize> = counts
        .iter()
        .scan(0, |acc, &c| {
            let o = *acc;
            *acc += c;
            Some(o)
        })
        .collect();

    for epoch in 0..config.epochs {
        let lr = cosine_warmup_lr(epoch, config.epochs, config.warmup_epochs, config.lr_max)?;
        let (mask, profiling) = match &mut selector {
            Selector::Full => (SelectionMask::full(&counts), 0),
            Selector::Strategy(state) => {
                let (scores, macs): (Option<Vec<ChannelScore>>, u64) = if state.needs_profiling() {
                    let (g, macs) = full_gradient(&spec, &params, train, config.batch_size)?;
                    (Some(channel_scores(&spec, &g, &table)?), macs)
                } else {
                    (None, 0)
                };
                (state.step(epoch, scores.as_deref())?, macs)
            }
        };
        let cost = selection_cost(&mask, &table)?;
        if let Some(b) = record.budget {
            if cost.slots > b {
                return Err(HarnessError::BudgetViolation {
                    epoch,
                    slots: cost.slots,
                    budget: b,
                });
            }
        }

        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut wgrad_macs = 0u64;
        let mut epoch_grad: Option<GradientSet> = None;
        let mut trace: Vec<Vec<f64>> = Vec::new();
        let mut report = None;
        for idx in epoch_batches(train.len(), config.batch_size, &mut data_rng) {
            let (x, y) = train.batch(&idx);
            let (logits, cache) = forward(&spec, &params, &x, &mask)?;
            let (loss, dl) = softmax_cross_entropy(&logits, &y)?;
            loss_sum += loss * y.len() as f64;
            correct += count_correct(&logits, &y);
            let grads = backward(&spec, &params, &cache, &dl, &mask)?;
            report = Some(sparsity_report(&mask, &table, grads.wgrad_macs(), y.len())?);
            record.checked_backwards += 1;
            wgrad_macs += grads.wgrad_macs();
            if config.collect_alpha {
                trace.push(grads.computed_values(&spec)?);
            }
            sgd_step(&spec, &mut params, &grads, lr)?;
            match &mut epoch_grad {
                Some(e) => e.accumulate(&grads)?,
                None => epoch_grad = Some(grads),
            }
        }
        if let Some(g) = &epoch_grad {
            for s in channel_scores(&spec, g, &table)? {
                record.layer_raw_topology[s.id.layer] += s.raw_norm;
                record.layer_rgn_topology[s.id.layer] += s.rgn;
                record.channel_raw_topology[channel_offsets[s.id.layer] + s.id.channel] += s.raw_norm;
            }
        }
        let alpha = if config.collect_alpha {
            GradientTraceMatrix::from_steps(&trace)
                .and_then(|m| estimate_alpha(m.data()))
                .ok()
                .map(|mut a| {
                    a.epoch = Some(epoch);
                    a
                })
        } else {
            None
        };
        let report = match report {
            Some(r) => r,
            None => sparsity_report(&mask, &table, 0, 0)?,
        };
        record.rows.push(EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / train.len().max(1) as f64,
            train_acc: correct as f64 / train.len().max(1) as f64,
            test_acc: accuracy(&spec, &params, test)?,
            slots_used: cost.slots,
            budget: record.budget,
            weight_sparsity: report.weight_sparsity,
            activation_sparsity: report.activation_sparsity,
            wgrad_macs,
            macs_saved_fraction: report.macs_saved_fraction,
            alpha_hat: alpha.map(|a| a.alpha_hat),
        });
        record.alpha.push(alpha);
        record.profiling_macs.push(profiling);
        record.masks.push(mask);
    }
    Ok((record, params))
}
