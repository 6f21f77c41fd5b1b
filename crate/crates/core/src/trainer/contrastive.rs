use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{epoch_seed, Checkpoint, Mode, ModelConfig, TrainConfig, TrainMeta};
use crate::augment::{derive_seed, make_views};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::matcher::Matcher;
use crate::objectives::{anchor_contrastive_loss, full_contrastive_loss, sample_anchors, ContrastiveBatch};
use crate::tensor::{Adam, AdamConfig, GradMap, ParamSet, Tape};

/// Work and memory figures for one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Mean loss over the sampled anchors.
    pub loss: f64,
    pub anchors: usize,
    pub sim_ops: u64,
    /// Largest number of node-pair similarity entries alive on one tape.
    pub peak_held_entries: u64,
}

/// Gradient of the mean anchor loss over `anchors`. Every anchor gets its
/// own tape, which is dropped after its backward pass, and the per-anchor
/// gradients are summed and divided by the anchor count.
pub fn accumulated_gradient(
    encoder: &Encoder,
    matcher: &Matcher,
    params: &ParamSet,
    batch: &ContrastiveBatch,
    anchors: &[usize],
    tau: f64,
) -> Result<(GradMap, StepStats)> {
    let mut acc = GradMap::zeros_like(params);
    let mut stats = StepStats {
        anchors: anchors.len(),
        ..StepStats::default()
    };
    for &anchor in anchors {
        let tape = Tape::new();
        let bound = params.bind_all(&tape);
        let (loss, counts) = anchor_contrastive_loss(&tape, &bound, encoder, matcher, batch, anchor, tau)?;
        stats.loss += tape.item(loss);
        stats.sim_ops += counts.sim_ops;
        stats.peak_held_entries = stats.peak_held_entries.max(tape.held_similarity_entries());
        let grads = tape.backward(loss)?;
        acc.add_assign(&GradMap::collect(&grads, &bound, params))?;
    }
    let q = anchors.len().max(1) as f64;
    acc.scale(1.0 / q);
    stats.loss /= q;
    Ok((acc, stats))
}

/// Loss and gradient of the exact all-anchor objective on a single tape.
pub fn full_gradient(
    encoder: &Encoder,
    matcher: &Matcher,
    params: &ParamSet,
    batch: &ContrastiveBatch,
    tau: f64,
) -> Result<(f64, GradMap)> {
    let tape = Tape::new();
    let bound = params.bind_all(&tape);
    let (loss, _) = full_contrastive_loss(&tape, &bound, encoder, matcher, batch, tau)?;
    let value = tape.item(loss);
    let grads = tape.backward(loss)?;
    Ok((value, GradMap::collect(&grads, &bound, params)))
}

/// Model, parameters and optimizer state of a contrastive run.
#[derive(Clone, Debug)]
pub struct ContrastiveState {
    pub encoder: Encoder,
    pub matcher: Matcher,
    pub params: ParamSet,
    adam: Adam,
}

impl ContrastiveState {
    pub fn new(encoder: Encoder, matcher: Matcher, params: ParamSet, adam: AdamConfig) -> Self {
        Self {
            encoder,
            matcher,
            params,
            adam: Adam::new(adam),
        }
    }

    pub fn init(model: &ModelConfig, node_dim: usize, edge_dim: usize, lr: f64, seed: u64) -> Result<Self> {
        let (encoder, matcher) = model.build(node_dim, edge_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = encoder.init_params(&mut rng);
        params.extend(matcher.init_params(&mut rng));
        Ok(Self::new(encoder, matcher, params, AdamConfig::with_lr(lr)))
    }

    /// Accumulates over `anchors`, then takes one Adam step.
    pub fn step(&mut self, batch: &ContrastiveBatch, anchors: &[usize], tau: f64) -> Result<StepStats> {
        let (grads, stats) = accumulated_gradient(&self.encoder, &self.matcher, &self.params, batch, anchors, tau)?;
        self.adam.step(&mut self.params, &grads)?;
        Ok(stats)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub sim_ops: u64,
    pub peak_held_entries: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ClRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Contrastive pre-training with `q` sampled anchors per batch.
pub fn pretrain_cl(data: &GraphDataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<ClRun> {
    cfg.validate()?;
    let mut state = ContrastiveState::init(model, data.node_dim(), data.edge_dim(), cfg.lr, cfg.seed)?;
    let graphs = data.graphs();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let seed = epoch_seed(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut sim_ops = 0;
        let mut peak = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.is_empty() {
                log::warn!("skipping empty batch {b} in epoch {epoch}");
                continue;
            }
            let pairs = chunk
                .iter()
                .map(|&gi| make_views(&graphs[gi], &cfg.augment, seed, gi as u64))
                .collect::<Result<Vec<_>>>()?;
            let batch = ContrastiveBatch::from_pairs(pairs)?;
            let q = cfg.q.min(batch.num_views());
            let anchors = sample_anchors(batch.num_views(), q, derive_seed(seed, b as u64, 0xa7c))?;
            let stats = state.step(&batch, &anchors, cfg.tau)?;
            loss_sum += stats.loss;
            batches += 1;
            sim_ops += stats.sim_ops;
            peak = peak.max(stats.peak_held_entries);
        }
        let e = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches.max(1) as f64,
            sim_ops,
            peak_held_entries: peak,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "cl epoch {}/{}: loss {:.5}, sim ops {}, peak entries {}, {:.1}s",
            e.epoch,
            cfg.epochs,
            e.mean_loss,
            e.sim_ops,
            e.peak_held_entries,
            e.seconds
        );
        history.push(e);
    }
    let checkpoint = Checkpoint {
        encoder: state.encoder.config().clone(),
        matcher: Some(state.matcher.config().clone()),
        meta: TrainMeta {
            mode: Mode::Cl,
            epochs: cfg.epochs,
            seed: cfg.seed,
        },
        params: state.params,
    };
    Ok(ClRun { checkpoint, history })
}

/// One row of the work and memory benchmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub q: usize,
    pub seconds: f64,
    pub sim_ops: u64,
    pub peak_held_entries: u64,
}

/// One pre-training epoch per anchor count in `qs`, over the largest prefix
/// of `data` that fills whole batches, so every batch sees the same `q`.
/// Work grows with the size of each sampled anchor's view, so `sim_ops` is
/// exactly proportional to `q` when all views share one size and
/// proportional in expectation otherwise.
pub fn bench_q(data: &GraphDataset, model: &ModelConfig, cfg: &TrainConfig, qs: &[usize]) -> Result<Vec<BenchRow>> {
    let full = data.len() / cfg.batch_size * cfg.batch_size;
    if full == 0 {
        return Err(Error::Data(format!(
            "bench needs at least one full batch of {} graphs, got {}",
            cfg.batch_size,
            data.len()
        )));
    }
    let subset = GraphDataset::new(data.graphs()[..full].to_vec(), data.splits()[..full].to_vec())?;
    qs.iter()
        .map(|&q| {
            let run = pretrain_cl(
                &subset,
                model,
                &TrainConfig {
                    mode: Mode::Cl,
                    epochs: 1,
                    q,
                    ..cfg.clone()
                },
            )?;
            let e = &run.history[0];
            Ok(BenchRow {
                q,
                seconds: e.seconds,
                sim_ops: e.sim_ops,
                peak_held_entries: e.peak_held_entries,
            })
        })
        .collect()
}
