use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{epoch_seed, Checkpoint, Mode, ModelConfig, TrainConfig, TrainMeta};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch, GraphDataset};
use crate::matcher::{match_pair, Matcher};
use crate::objectives::{init_sup_heads, label_similarity, sup_continuous_loss, sup_discrete_loss, Labels};
use crate::tensor::{Adam, AdamConfig, GradMap, Tape};

#[derive(Clone, Debug)]
pub struct SupRun {
    pub checkpoint: Checkpoint,
    /// Mean pair loss of every epoch.
    pub history: Vec<f64>,
}

/// Supervised pre-training on random graph pairs. Each epoch shuffles the
/// graphs and pairs consecutive ones; an odd graph out sits the epoch out.
pub fn pretrain_sup(data: &GraphDataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<SupRun> {
    cfg.validate()?;
    let continuous = match cfg.mode {
        Mode::SupContinuous => true,
        Mode::SupDiscrete => false,
        other => return Err(Error::Config(format!("pretrain_sup cannot run mode {other:?}"))),
    };
    let graphs = data.graphs();
    if graphs.len() < 2 {
        return Err(Error::Data("supervised pre-training needs at least two graphs".into()));
    }
    let tasks = data
        .num_tasks()
        .ok_or_else(|| Error::Data("supervised pre-training needs labels".into()))?;
    if continuous && !graphs.iter().all(Graph::has_complete_label) {
        return Err(Error::Data("Sup requires complete labels".into()));
    }

    let (encoder, matcher) = model.build(data.node_dim(), data.edge_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = encoder.init_params(&mut rng);
    params.extend(matcher.init_params(&mut rng));
    if !continuous {
        params.extend(init_sup_heads(&mut rng, tasks, model.hidden));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mut total = 0.0;
        for group in pairs.chunks(cfg.batch_size) {
            let members: Vec<&Graph> = group.iter().flat_map(|&(a, b)| [&graphs[a], &graphs[b]]).collect();
            let batch = GraphBatch::new(&members)?;
            let tape = Tape::new();
            let bound = params.bind_all(&tape);
            let prepared = matcher.prepare_batch(&tape, &bound, &encoder, &batch)?;
            let mut losses = Vec::with_capacity(group.len());
            for (p, &(a, b)) in group.iter().enumerate() {
                let pair = matcher.match_prepared(&tape, &bound, &prepared[2 * p], &prepared[2 * p + 1])?;
                let (ya, yb) = (Labels::of(&graphs[a])?, Labels::of(&graphs[b])?);
                losses.push(if continuous {
                    sup_continuous_loss(&tape, pair.zg1, pair.zg2, ya, yb)?
                } else {
                    sup_discrete_loss(&tape, &bound, pair.zg1, pair.zg2, ya, yb)?
                });
            }
            let loss = tape.mean(tape.concat_cols(&losses)?)?;
            total += tape.item(loss) * group.len() as f64;
            let grads = tape.backward(loss)?;
            let grads = GradMap::collect(&grads, &bound, &params);
            adam.step(&mut params, &grads)?;
        }
        let mean = total / pairs.len() as f64;
        log::info!("sup epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        history.push(mean);
    }

    Ok(SupRun {
        checkpoint: Checkpoint {
            encoder: encoder.config().clone(),
            matcher: Some(matcher.config().clone()),
            meta: TrainMeta {
                mode: cfg.mode,
                epochs: cfg.epochs,
                seed: cfg.seed,
            },
            params,
        },
        history,
    })
}

/// Mean `|cos(y1, y2) - cos(z1, z2)|` over `pairs` under the parameters of
/// `ckpt`.
pub fn continuous_gap(ckpt: &Checkpoint, pairs: &[(&Graph, &Graph)]) -> Result<f64> {
    let encoder = Encoder::new(ckpt.encoder.clone())?;
    let matcher = Matcher::new(
        ckpt.matcher
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no matcher".into()))?,
    )?;
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for &(a, b) in pairs {
        let tape = Tape::new();
        let bound = ckpt.params.bind(&tape, |_| false);
        let pair = match_pair(&tape, &bound, &encoder, &matcher, a, b)?;
        let s_g = tape.item(tape.cosine(pair.zg1, pair.zg2)?);
        let s_p = label_similarity(Labels::of(a)?, Labels::of(b)?)?;
        total += (s_p - s_g).abs();
    }
    Ok(total / pairs.len() as f64)
}
