use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_seed, Checkpoint, Mode, ModelConfig, TrainConfig, TrainMeta};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{multi_task_auc, MultiTaskAuc};
use crate::graph::{Graph, GraphBatch, GraphDataset, Split};
use crate::init::{glorot_uniform, zeros_row};
use crate::tensor::{Adam, AdamConfig, Bound, GradMap, ParamSet, Tape, Tensor, Var};

pub const HEAD_PREFIX: &str = "head.";
const HEAD_W: &str = "head.weight";
const HEAD_B: &str = "head.bias";

/// Encoder, mean readout and a linear multi-task head.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    encoder: Encoder,
    params: ParamSet,
    tasks: usize,
}

impl FinetuneModel {
    /// Adds a freshly initialized head to the given encoder parameters.
    pub fn new(encoder: Encoder, encoder_params: ParamSet, tasks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = encoder_params;
        params.insert(HEAD_W, glorot_uniform(&mut rng, encoder.hidden(), tasks));
        params.insert(HEAD_B, zeros_row(tasks));
        Self { encoder, params, tasks }
    }

    /// Randomly initialized encoder, the no-pre-training baseline.
    pub fn random(config: EncoderConfig, tasks: usize, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(config)?;
        let params = encoder.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self::new(encoder, params, tasks, seed ^ 0x4ead))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, tasks: usize, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(ckpt.encoder.clone())?;
        Ok(Self::new(encoder, ckpt.encoder_params(), tasks, seed ^ 0x4ead))
    }

    /// Rebuilds a model saved by [`FinetuneModel::to_checkpoint`].
    pub fn from_finetuned(ckpt: &Checkpoint) -> Result<Self> {
        let encoder = Encoder::new(ckpt.encoder.clone())?;
        let w = ckpt
            .params
            .get(HEAD_W)
            .ok_or_else(|| Error::Checkpoint("checkpoint has no prediction head".into()))?;
        if w.rows() != encoder.hidden() {
            return Err(Error::Checkpoint(format!(
                "head expects width {}, encoder has {}",
                w.rows(),
                encoder.hidden()
            )));
        }
        let tasks = w.cols();
        let mut params = ckpt.encoder_params();
        for name in [HEAD_W, HEAD_B] {
            let t = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
            params.insert(name, t.clone());
        }
        Ok(Self { encoder, params, tasks })
    }

    /// Encoder and head parameters; no matching head.
    pub fn to_checkpoint(&self, epochs: usize, seed: u64) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.config().clone(),
            matcher: None,
            meta: TrainMeta {
                mode: Mode::Finetune,
                epochs,
                seed,
            },
            params: self.params.clone(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn logits(&self, tape: &Tape, bound: &Bound, graphs: &[&Graph]) -> Result<Var> {
        let batch = GraphBatch::new(graphs)?;
        let h = self.encoder.encode_nodes(tape, bound, batch.union())?;
        let total = batch.union().num_nodes();
        let mut pool = Tensor::zeros(graphs.len(), total);
        for i in 0..graphs.len() {
            let (start, len) = batch.span(i);
            if len == 0 {
                return Err(Error::Contract("readout of an empty node set".into()));
            }
            for v in start..start + len {
                pool.set(i, v, 1.0 / len as f64);
            }
        }
        let z = tape.matmul(tape.constant(pool), h)?;
        tape.add_row(tape.matmul(z, bound.get(HEAD_W)?)?, bound.get(HEAD_B)?)
    }

    /// Logits, one row per graph.
    pub fn predict(&self, graphs: &[&Graph]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let out = self.logits(&tape, &bound, graphs)?;
        Ok(tape.value(out))
    }

    /// Masked BCE over `graphs` and its gradient. With `freeze_encoder` the
    /// encoder is constant and its gradient entries are zero.
    pub fn loss_and_gradients(&self, graphs: &[&Graph], freeze_encoder: bool) -> Result<(f64, GradMap)> {
        let (targets, mask) = label_matrix(graphs, self.tasks)?;
        let tape = Tape::new();
        let bound = self
            .params
            .bind(&tape, |name| !freeze_encoder || name.starts_with(HEAD_PREFIX));
        let logits = self.logits(&tape, &bound, graphs)?;
        let loss = tape.bce_with_logits(logits, &targets, Some(&mask))?;
        let value = tape.item(loss);
        let grads = tape.backward(loss)?;
        Ok((value, GradMap::collect(&grads, &bound, &self.params)))
    }

    pub fn evaluate(&self, graphs: &[&Graph]) -> Result<MultiTaskAuc> {
        let (targets, mask) = label_matrix(graphs, self.tasks)?;
        multi_task_auc(&self.predict(graphs)?, &targets, Some(&mask))
    }
}

fn label_matrix(graphs: &[&Graph], tasks: usize) -> Result<(Tensor, Vec<bool>)> {
    let mut targets = Tensor::zeros(graphs.len(), tasks);
    let mut mask = Vec::with_capacity(graphs.len() * tasks);
    for (i, g) in graphs.iter().enumerate() {
        let label = g
            .label()
            .ok_or_else(|| Error::Data(format!("graph {i} has no label")))?;
        if label.len() != tasks {
            return Err(Error::shape("labels", (1, tasks), (1, label.len())));
        }
        let observed = g.observed().unwrap_or_else(|| vec![true; tasks]);
        for t in 0..tasks {
            if observed[t] {
                targets.set(i, t, label[t]);
            }
        }
        mask.extend(observed);
    }
    Ok((targets, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub pretrained: bool,
    pub best_epoch: usize,
    pub val_auc: Option<f64>,
    pub test: MultiTaskAuc,
    pub history: Vec<FinetuneEpoch>,
}

/// Trains encoder and head on the train split with masked BCE, keeps the
/// epoch with the best validation mean AUC (stopping after `patience`
/// epochs without improvement) and reports test AUCs for it. Without a
/// checkpoint the encoder starts from random parameters.
pub fn finetune(
    ckpt: Option<&Checkpoint>,
    data: &GraphDataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FinetuneReport, FinetuneModel)> {
    cfg.validate()?;
    let tasks = data
        .num_tasks()
        .ok_or_else(|| Error::Data("fine-tuning needs labels".into()))?;
    let mut current = match ckpt {
        Some(c) => {
            c.check_dims(data.node_dim(), data.edge_dim())?;
            FinetuneModel::from_checkpoint(c, tasks, cfg.seed)?
        }
        None => FinetuneModel::random(model.encoder_config(data.node_dim(), data.edge_dim()), tasks, cfg.seed)?,
    };
    let graphs = data.graphs();
    let pick = |split| -> Vec<&Graph> { data.split_indices(split).into_iter().map(|i| &graphs[i]).collect() };
    let (train, valid, test) = (pick(Split::Train), pick(Split::Valid), pick(Split::Test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train and test splits".into()));
    }

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<&Graph> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, mut grads) = match current.loss_and_gradients(&members, cfg.freeze_encoder) {
                Ok(r) => r,
                Err(Error::Contract(msg)) if msg.contains("no observed") => continue,
                Err(e) => return Err(e),
            };
            if cfg.freeze_encoder {
                let mut head = GradMap::default();
                for (name, g) in grads.iter().filter(|(n, _)| n.starts_with(HEAD_PREFIX)) {
                    head.insert(name, g.clone());
                }
                grads = head;
            }
            adam.step(&mut current.params, &grads)?;
            total += loss;
            steps += 1;
        }
        let val_auc = if valid.is_empty() {
            None
        } else {
            current.evaluate(&valid).ok().map(|r| r.mean)
        };
        history.push(FinetuneEpoch {
            epoch: epoch + 1,
            train_loss: total / f64::from(steps.max(1)),
            val_auc,
        });
        log::debug!("finetune epoch {}: loss {:.5}, val auc {:?}", epoch + 1, total / f64::from(steps.max(1)), val_auc);
        let score = val_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch + 1, current.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (val, best_epoch) = match best {
        Some((score, epoch, params)) => {
            current.params = params;
            (score.is_finite().then_some(score), epoch)
        }
        None => (None, 0),
    };
    let test = current.evaluate(&test)?;
    log::info!("finetune: best epoch {best_epoch}, val auc {val:?}, test auc {:.4}", test.mean);
    Ok((
        FinetuneReport {
            pretrained: ckpt.is_some(),
            best_epoch,
            val_auc: val,
            test,
            history,
        },
        current,
    ))
}
