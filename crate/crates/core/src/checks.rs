//! Self-checks run by `graphmatch gradcheck`: finite-difference gradient
//! checks of every tape primitive and of the whole model, plus numerical
//! properties of the matching head, the losses and the metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::evaluation::roc_auc;
use crate::graph::Graph;
use crate::matcher::{match_pair, Matcher, MatcherConfig, Similarity};
use crate::objectives::{
    anchor_loss_value, full_contrastive_loss, init_sup_heads, sup_continuous_loss, sup_discrete_loss,
    ContrastiveBatch, Labels,
};
use crate::tensor::{grad_check, grad_check_piecewise, ParamSet, PiecewiseCheck, Tape, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Uniform entries in `[lo, hi)`, pushed at least `gap` away from zero.
fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(lo..hi);
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

/// Random symmetric graph with `n` nodes, edge probability `p` and random
/// attributes.
pub fn random_graph(rng: &mut impl Rng, n: usize, node_dim: usize, edge_dim: usize, p: f64) -> Graph {
    let x = random_tensor(rng, n, node_dim, -1.0, 1.0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let e = random_tensor(rng, edges.len(), edge_dim, -1.0, 1.0);
    Graph::try_new(x, edges, e)
        .and_then(|g| g.symmetrize())
        .expect("valid by construction")
}

type Primitive = fn(&Tape, Var, &Tensor) -> Result<Var>;

/// Name, input shape, input range and the function under test.
type PrimitiveCase = (&'static str, (usize, usize), (f64, f64), Primitive);

/// Reduces any output to a scalar through fixed random weights, so every
/// output entry contributes a distinct gradient.
fn project(t: &Tape, out: Var, w: &Tensor) -> Result<Var> {
    let (r, c) = t.shape(out);
    let w = Tensor::new(r, c, w.data()[..r * c].to_vec())?;
    Ok(t.sum(t.mul(out, t.constant(w))?))
}

fn primitives() -> Vec<PrimitiveCase> {
    fn c(t: &Tape, seed: u64, r: usize, cols: usize) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t.constant(random_tensor(&mut rng, r, cols, -1.0, 1.0))
    }
    vec![
        ("matmul", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.matmul(x, c(t, 1, 4, 2))?, w)),
        ("matmul_nt", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.matmul_nt(x, c(t, 2, 2, 4))?, w)),
        ("matmul_tn", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.matmul_tn(x, c(t, 3, 3, 2))?, w)),
        ("add", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.add(x, t.mul(x, x)?)?, w)),
        ("add_row", (1, 4), (-1.0, 1.0), |t, x, w| project(t, t.add_row(c(t, 4, 3, 4), x)?, w)),
        ("sub", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.sub(c(t, 5, 3, 4), t.mul(x, x)?)?, w)),
        ("mul", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.mul(x, c(t, 6, 3, 4))?, w)),
        ("scale", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.scale(x, -2.5), w)),
        ("relu", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.relu(x), w)),
        ("row_softmax", (3, 4), (-2.0, 2.0), |t, x, w| project(t, t.row_softmax(x), w)),
        ("log", (3, 4), (0.5, 2.0), |t, x, w| project(t, t.log(x), w)),
        ("exp", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.exp(x), w)),
        ("sum", (3, 4), (-1.0, 1.0), |t, x, _| Ok(t.sum(t.mul(x, x)?))),
        ("mean", (3, 4), (-1.0, 1.0), |t, x, _| t.mean(t.mul(x, x)?)),
        ("mean_rows", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.mean_rows(t.mul(x, x)?)?, w)),
        ("log_sum_exp", (1, 5), (-2.0, 2.0), |t, x, _| t.log_sum_exp(x)),
        ("concat_cols", (3, 2), (-1.0, 1.0), |t, x, w| {
            project(t, t.concat_cols(&[x, c(t, 7, 3, 1), t.mul(x, x)?])?, w)
        }),
        ("dot", (1, 4), (-1.0, 1.0), |t, x, _| t.dot(x, c(t, 8, 1, 4))),
        ("cosine", (1, 4), (-1.0, 1.0), |t, x, _| t.cosine(x, c(t, 9, 1, 4))),
        ("mse", (1, 4), (-1.0, 1.0), |t, x, _| t.mse(x, c(t, 10, 1, 4))),
        ("bce_with_logits", (2, 3), (-3.0, 3.0), |t, x, _| {
            let y = Tensor::new(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0])?;
            t.bce_with_logits(x, &y, Some(&[true, true, false, true, true, true]))
        }),
        ("gather_rows", (3, 2), (-1.0, 1.0), |t, x, w| project(t, t.gather_rows(x, &[2, 0, 2, 1])?, w)),
        ("scatter_add_rows", (3, 2), (-1.0, 1.0), |t, x, w| {
            project(t, t.scatter_add_rows(x, &[1, 1, 3], 4)?, w)
        }),
        ("slice_rows", (4, 2), (-1.0, 1.0), |t, x, w| project(t, t.slice_rows(x, 1, 2)?, w)),
        ("scale_rows", (3, 2), (-1.0, 1.0), |t, x, w| project(t, t.scale_rows(x, &[0.5, -1.0, 2.0])?, w)),
        ("normalize_rows", (3, 4), (-1.0, 1.0), |t, x, w| project(t, t.normalize_rows(x)?, w)),
        ("normalize_cols", (3, 4), (0.2, 1.0), |t, x, w| project(t, t.normalize_cols(x)?, w)),
    ]
}

/// Largest relative error of each primitive over `instances` random inputs.
pub fn primitive_gradchecks(seed: u64, instances: usize) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, (r, c), (lo, hi), f) in primitives() {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let x = random_tensor(&mut rng, r, c, lo, hi);
            let w = random_tensor(&mut rng, 8, 8, -1.0, 1.0);
            worst = worst.max(grad_check(|t, v| f(t, v, &w), &x, GRAD_EPS)?);
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}

fn tiny_model(rng: &mut ChaCha8Rng, sim: Similarity, target_normalize: bool) -> Result<(Encoder, Matcher, ParamSet)> {
    let encoder = Encoder::new(EncoderConfig::gin(2, 4, 3, 2))?;
    let matcher = Matcher::new(MatcherConfig {
        similarity: sim,
        target_normalize,
        ..MatcherConfig::new(4, 2)
    })?;
    let mut params = encoder.init_params(rng);
    params.extend(matcher.init_params(rng));
    // nonzero biases keep cosine inputs away from all-zero rows
    for (name, t) in params.iter_mut() {
        if name.ends_with("bias") {
            *t = random_tensor(rng, t.rows(), t.cols(), -0.5, 0.5);
        }
    }
    Ok((encoder, matcher, params))
}

/// Largest skipped share of coordinates before a pipeline check counts as
/// failed: a few stencils straddle a relu kink, most must not.
pub const MAX_SKIPPED_SHARE: f64 = 0.05;

fn merge(into: &mut PiecewiseCheck, r: PiecewiseCheck) {
    into.worst = into.worst.max(r.worst);
    into.skipped += r.skipped;
    into.compared += r.compared;
}

/// Relative error of the full encode, match and loss pipeline for each
/// objective over `instances` random models and graphs of at most five nodes.
/// Coordinates whose stencil crosses a relu kink are counted, not compared.
pub fn pipeline_gradchecks(seed: u64, instances: usize) -> Result<Vec<(String, PiecewiseCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [PiecewiseCheck {
        worst: 0.0,
        skipped: 0,
        compared: 0,
    }; 4];
    for i in 0..instances {
        let sim = if i % 2 == 0 { Similarity::Dot } else { Similarity::Cosine };
        let (encoder, matcher, mut params) = tiny_model(&mut rng, sim, i % 3 == 0)?;
        let views: Vec<Graph> = (0..4)
            .map(|_| {
                let n = rng.random_range(2..=5);
                random_graph(&mut rng, n, 3, 2, 0.5)
            })
            .collect();
        let batch = ContrastiveBatch::new(views.clone())?;
        merge(&mut worst[0], grad_check_piecewise(
            |t, b| Ok(full_contrastive_loss(t, b, &encoder, &matcher, &batch, 0.5)?.0),
            &params,
            GRAD_EPS,
        )?);

        let y1 = [1.0, 0.0, 1.0];
        let y2 = [0.5, 1.0, 0.0];
        merge(&mut worst[1], grad_check_piecewise(
            |t, b| {
                let pair = match_pair(t, b, &encoder, &matcher, &views[0], &views[1])?;
                sup_continuous_loss(t, pair.zg1, pair.zg2, Labels::new(&y1, None), Labels::new(&y2, None))
            },
            &params,
            GRAD_EPS,
        )?);

        params.extend(init_sup_heads(&mut rng, 3, 4));
        let y2 = [0.0, 1.0, 0.0];
        let mask = [true, false, true];
        merge(&mut worst[2], grad_check_piecewise(
            |t, b| {
                let pair = match_pair(t, b, &encoder, &matcher, &views[2], &views[3])?;
                sup_discrete_loss(
                    t,
                    b,
                    pair.zg1,
                    pair.zg2,
                    Labels::new(&y1, Some(&mask)),
                    Labels::new(&y2, None),
                )
            },
            &params,
            GRAD_EPS,
        )?);

        merge(&mut worst[3], grad_check_piecewise(
            |t, b| {
                let pair = match_pair(t, b, &encoder, &matcher, &views[1], &views[2])?;
                matcher.pair_score(t, &pair)
            },
            &params,
            GRAD_EPS,
        )?);
    }
    Ok(["contrastive", "sup-continuous", "sup-discrete", "pair-similarity"]
        .iter()
        .zip(worst)
        .map(|(n, w)| (format!("pipeline/{n}"), w))
        .collect())
}

/// Largest deviation from 1 of any attention row sum over `pairs` random
/// matched pairs.
pub fn attention_row_deviation(seed: u64, pairs: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let sim = if i % 2 == 0 { Similarity::Dot } else { Similarity::Cosine };
        let (encoder, matcher, params) = tiny_model(&mut rng, sim, false)?;
        let (n1, n2) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let g1 = random_graph(&mut rng, n1, 3, 2, 0.4);
        let g2 = random_graph(&mut rng, n2, 3, 2, 0.4);
        let tape = Tape::new();
        let bound = params.bind_all(&tape);
        let v = match_pair(&tape, &bound, &encoder, &matcher, &g1, &g2)?.values(&tape);
        for a in [&v.a12, &v.a21] {
            for r in 0..a.rows() {
                worst = worst.max((a.row_slice(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(worst)
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

/// Largest gap between [`roc_auc`] and the pairwise estimator over random
/// instances of up to `max_points` points, with ties.
pub fn auc_oracle_gap(seed: u64, instances: usize, max_points: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let n = rng.random_range(2..=max_points);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..25u8)) / 10.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&b| b) || labels.iter().all(|&b| !b) {
            continue;
        }
        worst = worst.max((roc_auc(&scores, &labels)? - brute_force_auc(&scores, &labels)).abs());
        done += 1;
    }
    Ok(worst)
}

/// Runs every check.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (name, err) in primitive_gradchecks(seed, 10)? {
        results.push(CheckResult::new(
            format!("gradcheck/{name}"),
            err < GRAD_TOLERANCE,
            format!("max relative error {err:.3e}"),
        ));
    }
    for (name, r) in pipeline_gradchecks(seed, 10)? {
        let share = r.skipped as f64 / (r.skipped + r.compared) as f64;
        results.push(CheckResult::new(
            format!("gradcheck/{name}"),
            r.worst < GRAD_TOLERANCE && share <= MAX_SKIPPED_SHARE,
            format!(
                "max relative error {:.3e}, {} of {} coordinates straddle a kink",
                r.worst,
                r.skipped,
                r.skipped + r.compared
            ),
        ));
    }
    let dev = attention_row_deviation(seed, 100)?;
    results.push(CheckResult::new(
        "attention rows sum to one",
        dev < 1e-6,
        format!("max deviation {dev:.3e}"),
    ));
    for views in [4usize, 6, 8] {
        let l = anchor_loss_value(&vec![0.4; views - 1], 0, 0.07)?;
        let expected = ((views - 1) as f64).ln();
        results.push(CheckResult::new(
            format!("uniform anchor loss, {views} views"),
            (l - expected).abs() < 1e-6,
            format!("{l:.9} vs {expected:.9}"),
        ));
    }
    let gap = auc_oracle_gap(seed, 100, 200)?;
    results.push(CheckResult::new(
        "roc-auc matches pairwise estimator",
        gap < 1e-12,
        format!("max gap {gap:.3e}"),
    ));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for (name, err) in primitive_gradchecks(1, 3).unwrap() {
            assert!(err < GRAD_TOLERANCE, "{name}: {err}");
        }
    }

    #[test]
    fn suite_passes() {
        let results = run_all(0).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}
