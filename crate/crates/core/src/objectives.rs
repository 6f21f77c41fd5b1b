//! Pre-training objectives.
//!
//! Contrastive views are interleaved: views `2i` and `2i + 1` come from the
//! same source graph, so the positive partner of view `i` is `i ^ 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch};
use crate::init::{glorot_uniform, zeros_row};
use crate::matcher::{match_pair, Matcher, PreparedSide};
use crate::tensor::{Bound, ParamSet, Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;
pub const SUP_PREFIX: &str = "sup.";

pub fn partner(i: usize) -> usize {
    i ^ 1
}

pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// `-log softmax(sims / tau)[positive]`, evaluated with max subtraction.
/// `sims` holds the anchor's similarity to every other view.
pub fn anchor_loss_value(sims: &[f64], positive: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if positive >= sims.len() {
        return Err(Error::Index {
            what: "positive",
            index: positive,
            len: sims.len(),
        });
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = max + sims.iter().map(|s| (s / tau - max).exp()).sum::<f64>().ln();
    Ok(lse - sims[positive] / tau)
}

/// Tape version of [`anchor_loss_value`]; every entry of `sims` is 1×1.
pub fn anchor_loss(tape: &Tape, sims: &[Var], positive: usize, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if positive >= sims.len() {
        return Err(Error::Index {
            what: "positive",
            index: positive,
            len: sims.len(),
        });
    }
    let row = tape.scale(tape.concat_cols(sims)?, 1.0 / tau);
    let lse = tape.log_sum_exp(row)?;
    tape.sub(lse, tape.scale(sims[positive], 1.0 / tau))
}

/// Two augmented views per source graph, encoded together.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    views: Vec<Graph>,
    batch: GraphBatch,
}

impl ContrastiveBatch {
    pub fn new(views: Vec<Graph>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Contract("contrastive batch needs at least one graph".into()));
        }
        if !views.len().is_multiple_of(2) {
            return Err(Error::Contract(format!("odd number of views: {}", views.len())));
        }
        let batch = GraphBatch::new(&views.iter().collect::<Vec<_>>())?;
        Ok(Self { views, batch })
    }

    pub fn from_pairs(pairs: Vec<(Graph, Graph)>) -> Result<Self> {
        Self::new(pairs.into_iter().flat_map(|(a, b)| [a, b]).collect())
    }

    /// Number of source graphs `n`; there are `2n` views.
    pub fn n(&self) -> usize {
        self.views.len() / 2
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn views(&self) -> &[Graph] {
        &self.views
    }

    pub fn graph_batch(&self) -> &GraphBatch {
        &self.batch
    }

    pub fn total_nodes(&self) -> usize {
        self.views.iter().map(Graph::num_nodes).sum()
    }
}

/// Matching work done while building a contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComparisonCounts {
    /// Ordered view pairs `(i, k)` whose similarity entered some anchor loss.
    pub raw_pairs: u64,
    /// Distinct unordered pairs actually matched.
    pub matched_pairs: u64,
    /// Node-pair similarity evaluations.
    pub sim_ops: u64,
}

/// `sim(z_i|j, z_j|i)` of two graphs under the adaptive representations.
pub fn pair_similarity(
    tape: &Tape,
    params: &Bound,
    encoder: &Encoder,
    matcher: &Matcher,
    gi: &Graph,
    gj: &Graph,
) -> Result<Var> {
    let pair = match_pair(tape, params, encoder, matcher, gi, gj)?;
    matcher.pair_score(tape, &pair)
}

fn prepared_similarity(
    tape: &Tape,
    params: &Bound,
    matcher: &Matcher,
    a: &PreparedSide,
    b: &PreparedSide,
) -> Result<Var> {
    let pair = matcher.match_prepared(tape, params, a, b)?;
    matcher.pair_score(tape, &pair)
}

/// Mean anchor loss over all `2n` anchors. Each unordered similarity is
/// computed once and reused for both of its anchors.
pub fn full_contrastive_loss(
    tape: &Tape,
    params: &Bound,
    encoder: &Encoder,
    matcher: &Matcher,
    batch: &ContrastiveBatch,
    tau: f64,
) -> Result<(Var, ComparisonCounts)> {
    check_tau(tau)?;
    let before = tape.sim_ops();
    let m = batch.num_views();
    let prepared = matcher.prepare_batch(tape, params, encoder, batch.graph_batch())?;
    let mut cache: Vec<Vec<Option<Var>>> = vec![vec![None; m]; m];
    for i in 0..m {
        for k in i + 1..m {
            let s = prepared_similarity(tape, params, matcher, &prepared[i], &prepared[k])?;
            cache[i][k] = Some(s);
            cache[k][i] = Some(s);
        }
    }
    let mut losses = Vec::with_capacity(m);
    for (i, row) in cache.iter().enumerate() {
        let (sims, positive) = anchor_row(i, m, |k| row[k].expect("cached similarity"));
        losses.push(anchor_loss(tape, &sims, positive, tau)?);
    }
    let loss = tape.mean(tape.concat_cols(&losses)?)?;
    let counts = ComparisonCounts {
        raw_pairs: (m * (m - 1)) as u64,
        matched_pairs: (m * (m - 1) / 2) as u64,
        sim_ops: tape.sim_ops() - before,
    };
    Ok((loss, counts))
}

/// Similarities of anchor `i` to every other view, and the position of its
/// partner among them.
fn anchor_row<T>(i: usize, m: usize, mut sim: impl FnMut(usize) -> T) -> (Vec<T>, usize) {
    let mut sims = Vec::with_capacity(m - 1);
    let mut positive = 0;
    for k in (0..m).filter(|&k| k != i) {
        if k == partner(i) {
            positive = sims.len();
        }
        sims.push(sim(k));
    }
    (sims, positive)
}

/// Loss of a single anchor: matches view `anchor` against every other view
/// of the batch and nothing else.
pub fn anchor_contrastive_loss(
    tape: &Tape,
    params: &Bound,
    encoder: &Encoder,
    matcher: &Matcher,
    batch: &ContrastiveBatch,
    anchor: usize,
    tau: f64,
) -> Result<(Var, ComparisonCounts)> {
    check_tau(tau)?;
    let m = batch.num_views();
    if anchor >= m {
        return Err(Error::Index {
            what: "anchor",
            index: anchor,
            len: m,
        });
    }
    let before = tape.sim_ops();
    let prepared = matcher.prepare_batch(tape, params, encoder, batch.graph_batch())?;
    let mut sims = Vec::with_capacity(m - 1);
    let mut positive = 0;
    for k in (0..m).filter(|&k| k != anchor) {
        if k == partner(anchor) {
            positive = sims.len();
        }
        sims.push(prepared_similarity(tape, params, matcher, &prepared[anchor], &prepared[k])?);
    }
    let loss = anchor_loss(tape, &sims, positive, tau)?;
    let counts = ComparisonCounts {
        raw_pairs: (m - 1) as u64,
        matched_pairs: (m - 1) as u64,
        sim_ops: tape.sim_ops() - before,
    };
    Ok((loss, counts))
}

/// `q` distinct anchors out of `2n`, uniformly without replacement, in
/// increasing order.
pub fn sample_anchors(num_views: usize, q: usize, seed: u64) -> Result<Vec<usize>> {
    if q == 0 || q > num_views {
        return Err(Error::Config(format!(
            "anchor count q = {q} must lie in 1..={num_views}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, num_views, q).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Full similarity matrix of a batch with off-tape values, mainly for
/// inspection and tests. Entry `(i, i)` is left at zero.
pub fn similarity_matrix(
    params: &ParamSet,
    encoder: &Encoder,
    matcher: &Matcher,
    views: &[Graph],
) -> Result<Tensor> {
    let m = views.len();
    let mut out = Tensor::zeros(m, m);
    for i in 0..m {
        for k in i + 1..m {
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| false);
            let s = tape.item(pair_similarity(&tape, &bound, encoder, matcher, &views[i], &views[k])?);
            out.set(i, k, s);
            out.set(k, i, s);
        }
    }
    Ok(out)
}

/// Mean anchor loss computed from a precomputed similarity matrix.
pub fn contrastive_loss_from_matrix(sims: &Tensor, tau: f64) -> Result<f64> {
    let m = sims.rows();
    if m < 2 || !m.is_multiple_of(2) || sims.cols() != m {
        return Err(Error::Contract(format!(
            "similarity matrix must be square with an even side, got {:?}",
            sims.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..m {
        let (row, positive) = anchor_row(i, m, |k| sims.get(i, k));
        total += anchor_loss_value(&row, positive, tau)?;
    }
    Ok(total / m as f64)
}

/// Label vector and observation mask of one graph.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub values: &'a [f64],
    pub mask: Option<&'a [bool]>,
}

impl<'a> Labels<'a> {
    pub fn new(values: &'a [f64], mask: Option<&'a [bool]>) -> Self {
        Self { values, mask }
    }

    pub fn of(g: &'a Graph) -> Result<Self> {
        let values = g
            .label()
            .ok_or_else(|| Error::Data("graph has no label".into()))?;
        Ok(Self {
            values,
            mask: g.label_mask(),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.mask.is_none_or(|m| m.iter().all(|&b| b))
    }

    fn observed_count(&self) -> usize {
        match self.mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.values.len(),
        }
    }
}

fn cosine_value(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine of a zero label vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Label similarity used as the regression target of the continuous loss.
pub fn label_similarity(y1: Labels<'_>, y2: Labels<'_>) -> Result<f64> {
    if !y1.is_complete() || !y2.is_complete() {
        return Err(Error::Data("Sup requires complete labels".into()));
    }
    if y1.values.len() != y2.values.len() {
        return Err(Error::shape("label_similarity", (1, y1.values.len()), (1, y2.values.len())));
    }
    cosine_value(y1.values, y2.values)
}

/// `(cos(y1, y2) - cos(z1, z2))^2`.
pub fn sup_continuous_loss(tape: &Tape, z1: Var, z2: Var, y1: Labels<'_>, y2: Labels<'_>) -> Result<Var> {
    let target = label_similarity(y1, y2)?;
    let s_g = tape.cosine(z1, z2)?;
    tape.mse(s_g, tape.constant(Tensor::scalar(target)))
}

/// Fresh prediction heads `W_k` (T×d) and `b_k` for the two graphs of a pair.
pub fn init_sup_heads(rng: &mut impl Rng, tasks: usize, hidden: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for k in 1..=2 {
        p.insert(format!("sup.head{k}.weight"), glorot_uniform(rng, tasks, hidden));
        p.insert(format!("sup.head{k}.bias"), zeros_row(tasks));
    }
    p
}

/// Masked-mean BCE of each graph's head prediction, summed over both graphs.
/// A graph without any observed task contributes nothing.
pub fn sup_discrete_loss(
    tape: &Tape,
    params: &Bound,
    z1: Var,
    z2: Var,
    y1: Labels<'_>,
    y2: Labels<'_>,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (k, z, y) in [(1, z1, y1), (2, z2, y2)] {
        if y.observed_count() == 0 {
            continue;
        }
        let w = params.get(&format!("sup.head{k}.weight"))?;
        let b = params.get(&format!("sup.head{k}.bias"))?;
        let logits = tape.add_row(tape.matmul_nt(z, w)?, b)?;
        terms.push(tape.bce_with_logits(logits, &Tensor::row(y.values.to_vec()), y.mask)?);
    }
    match terms.as_slice() {
        [] => Err(Error::Data("no observed tasks".into())),
        [one] => Ok(*one),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::matcher::{MatcherConfig, Similarity};
    use crate::tensor::{grad_check, grad_check_params};

    #[test]
    fn uniform_similarities_give_log_of_negatives() {
        for (views, expected) in [(4usize, 3f64.ln()), (6, 5f64.ln()), (8, 7f64.ln())] {
            let sims = vec![0.3; views - 1];
            let l = anchor_loss_value(&sims, 1, 0.07).unwrap();
            assert!((l - expected).abs() < 1e-12, "{views}: {l}");
            let mut m = Tensor::filled(views, views, 0.3);
            for i in 0..views {
                m.set(i, i, 0.0);
            }
            assert!((contrastive_loss_from_matrix(&m, 0.5).unwrap() - expected).abs() < 1e-12);
        }
        assert!((anchor_loss_value(&[0.0; 7], 0, 1.0).unwrap() - 1.945910).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_anchor_loss() {
        let l = anchor_loss_value(&[1.0, 0.0, 0.0], 0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-15);
        assert!((l - 0.551445).abs() < 1e-6);
        let tape = Tape::new();
        let vars: Vec<Var> = [1.0, 0.0, 0.0].iter().map(|&s| tape.constant(Tensor::scalar(s))).collect();
        assert!((tape.item(anchor_loss(&tape, &vars, 0, 1.0).unwrap()) - l).abs() < 1e-15);
    }

    #[test]
    fn single_negative_free_denominator_is_zero() {
        assert_eq!(anchor_loss_value(&[5.0], 0, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn anchor_loss_rejects_bad_temperature() {
        assert!(matches!(anchor_loss_value(&[1.0, 2.0], 0, 0.0), Err(Error::Config(_))));
        assert!(matches!(anchor_loss_value(&[1.0, 2.0], 0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn anchor_loss_shift_invariance_and_monotonicity() {
        let sims = [0.4, -1.2, 2.0, 0.1, 0.7];
        let base = anchor_loss_value(&sims, 2, 0.5).unwrap();
        let shifted: Vec<f64> = sims.iter().map(|s| s + 3.7).collect();
        assert!((anchor_loss_value(&shifted, 2, 0.5).unwrap() - base).abs() < 1e-9);
        let mut more = sims;
        more[2] += 0.1;
        assert!(anchor_loss_value(&more, 2, 0.5).unwrap() < base);
    }

    #[test]
    fn extreme_similarities_stay_finite() {
        let l = anchor_loss_value(&[500.0, -500.0, 499.0], 0, 0.07).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn anchor_loss_gradient() {
        let x = Tensor::new(1, 5, vec![0.3, -0.8, 1.1, 0.2, -0.4]).unwrap();
        let err = grad_check(
            |t, v| {
                let sims: Vec<Var> = (0..5).map(|k| t.slice_rows(t.matmul_nt(v, t.constant(Tensor::new(1, 5, (0..5).map(|j| if j == k { 1.0 } else { 0.0 }).collect()).unwrap())).unwrap(), 0, 1).unwrap()).collect();
                anchor_loss(t, &sims, 3, 0.5)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn anchor_sampling_contract() {
        assert_eq!(sample_anchors(6, 6, 1).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        for seed in 0..200 {
            let a = sample_anchors(10, 4, seed).unwrap();
            assert_eq!(a.len(), 4);
            assert!(a.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(a, sample_anchors(10, 4, seed).unwrap());
        }
        assert!(sample_anchors(4, 0, 0).is_err());
        assert!(sample_anchors(4, 5, 0).is_err());
    }

    #[test]
    fn singleton_anchors_are_uniform() {
        let views = 8;
        let draws = 10_000;
        let mut counts = vec![0usize; views];
        for seed in 0..draws {
            counts[sample_anchors(views, 1, seed as u64).unwrap()[0]] += 1;
        }
        let expected = draws as f64 / views as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, 0.999 quantile
        assert!(chi2 < 24.32, "chi2 = {chi2}, counts = {counts:?}");
    }

    fn labels(v: &[f64]) -> Labels<'_> {
        Labels::new(v, None)
    }

    #[test]
    fn continuous_loss_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::row(vec![1.0, 2.0, -1.0]));
        let l = sup_continuous_loss(&tape, z, z, labels(&[1.0, 0.0]), labels(&[1.0, 0.0])).unwrap();
        assert!(tape.item(l).abs() < 1e-15);
        let l = sup_continuous_loss(&tape, z, z, labels(&[1.0, 0.0]), labels(&[0.0, 1.0])).unwrap();
        assert!((tape.item(l) - 1.0).abs() < 1e-15);

        let (y1, y2) = ([0.3, 1.0, 0.0, 2.0], [1.0, 0.5, 0.5, 0.0]);
        let (a, b) = ([0.2, -0.1, 0.4, 1.0], [0.9, 0.3, -0.2, 0.1]);
        let cos = |u: &[f64], v: &[f64]| {
            let d: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            d / (u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let expected = (cos(&y1, &y2) - cos(&a, &b)).powi(2);
        let za = tape.constant(Tensor::row(a.to_vec()));
        let zb = tape.constant(Tensor::row(b.to_vec()));
        let l = sup_continuous_loss(&tape, za, zb, labels(&y1), labels(&y2)).unwrap();
        assert!((tape.item(l) - expected).abs() < 1e-14);
    }

    #[test]
    fn continuous_loss_rejects_missing_labels() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let mask = [true, false];
        let err = sup_continuous_loss(&tape, z, z, Labels::new(&[1.0, 0.0], Some(&mask)), labels(&[1.0, 1.0]))
            .unwrap_err();
        assert!(err.to_string().contains("Sup requires complete labels"));
    }

    fn zero_heads(tasks: usize, hidden: usize) -> ParamSet {
        let mut p = ParamSet::new();
        for k in 1..=2 {
            p.insert(format!("sup.head{k}.weight"), Tensor::zeros(tasks, hidden));
            p.insert(format!("sup.head{k}.bias"), Tensor::zeros(1, tasks));
        }
        p
    }

    #[test]
    fn discrete_loss_examples() {
        let tape = Tape::new();
        let heads = zero_heads(3, 2).bind_all(&tape);
        let z = tape.constant(Tensor::row(vec![0.5, -0.5]));
        let ones = [1.0; 3];
        let l = sup_discrete_loss(&tape, &heads, z, z, labels(&ones), labels(&ones)).unwrap();
        assert!((tape.item(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((tape.item(l) - 1.386294).abs() < 1e-6);

        let none = [false; 3];
        let err = sup_discrete_loss(
            &tape,
            &heads,
            z,
            z,
            Labels::new(&ones, Some(&none)),
            Labels::new(&ones, Some(&none)),
        )
        .unwrap_err();
        assert!(err.to_string().contains("no observed tasks"));
    }

    #[test]
    fn discrete_loss_matches_brute_force_on_observed_tasks() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = init_sup_heads(&mut rng, 4, 3);
        let tape = Tape::new();
        let bound = heads.bind_all(&tape);
        let z1v = vec![0.3, -1.0, 0.8];
        let z2v = vec![-0.2, 0.4, 1.5];
        let (y1, m1) = ([1.0, 0.0, 1.0, 0.0], [true, false, true, true]);
        let (y2, m2) = ([0.0, 0.0, 1.0, 1.0], [true, true, true, true]);
        let z1 = tape.constant(Tensor::row(z1v.clone()));
        let z2 = tape.constant(Tensor::row(z2v.clone()));
        let l = sup_discrete_loss(&tape, &bound, z1, z2, Labels::new(&y1, Some(&m1)), Labels::new(&y2, Some(&m2)))
            .unwrap();
        let brute = |k: usize, z: &[f64], y: &[f64], m: &[bool]| {
            let w = heads.get(&format!("sup.head{k}.weight")).unwrap();
            let mut total = 0.0;
            let mut count = 0.0;
            for t in 0..4 {
                if !m[t] {
                    continue;
                }
                let x: f64 = (0..3).map(|c| w.get(t, c) * z[c]).sum();
                let p = 1.0 / (1.0 + (-x).exp());
                total -= y[t] * p.ln() + (1.0 - y[t]) * (1.0 - p).ln();
                count += 1.0;
            }
            total / count
        };
        let expected = brute(1, &z1v, &y1, &m1) + brute(2, &z2v, &y2, &m2);
        assert!((tape.item(l) - expected).abs() < 1e-12);
    }

    fn tiny_setup(sim: Similarity) -> (Encoder, Matcher, ParamSet, Vec<Graph>) {
        use rand::SeedableRng;
        let enc = Encoder::new(EncoderConfig::gin(2, 3, 2, 1)).unwrap();
        let matcher = Matcher::new(MatcherConfig {
            similarity: sim,
            ..MatcherConfig::new(3, 1)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = enc.init_params(&mut rng);
        params.extend(matcher.init_params(&mut rng));
        let views = (0..4)
            .map(|i| {
                let n = 3 + i % 2;
                let x = Tensor::new(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let edges: Vec<(usize, usize)> = (0..n - 1).map(|v| (v, v + 1)).collect();
                let e = Tensor::filled(edges.len(), 1, 1.0);
                Graph::try_new(x, edges, e).unwrap().symmetrize().unwrap()
            })
            .collect();
        (enc, matcher, params, views)
    }

    #[test]
    fn cached_loss_matches_uncached_double_loop() {
        let (enc, matcher, params, views) = tiny_setup(Similarity::Dot);
        let batch = ContrastiveBatch::new(views.clone()).unwrap();
        let tape = Tape::new();
        let bound = params.bind_all(&tape);
        let (loss, counts) = full_contrastive_loss(&tape, &bound, &enc, &matcher, &batch, 0.5).unwrap();
        assert_eq!(counts.raw_pairs, 12);
        assert_eq!(counts.matched_pairs, 6);

        let mut total = 0.0;
        for i in 0..4 {
            let mut row = Vec::new();
            let mut positive = 0;
            for k in 0..4 {
                if k == i {
                    continue;
                }
                if k == partner(i) {
                    positive = row.len();
                }
                let t = Tape::new();
                let b = params.bind_all(&t);
                row.push(t.item(pair_similarity(&t, &b, &enc, &matcher, &views[i], &views[k]).unwrap()));
            }
            total += anchor_loss_value(&row, positive, 0.5).unwrap();
        }
        assert!((tape.item(loss) - total / 4.0).abs() < 1e-12);

        let m = similarity_matrix(&params, &enc, &matcher, &views).unwrap();
        assert!((contrastive_loss_from_matrix(&m, 0.5).unwrap() - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_anchors_average_to_full_loss() {
        let (enc, matcher, params, views) = tiny_setup(Similarity::Cosine);
        let batch = ContrastiveBatch::new(views).unwrap();
        let tape = Tape::new();
        let bound = params.bind_all(&tape);
        let full = tape.item(full_contrastive_loss(&tape, &bound, &enc, &matcher, &batch, 0.2).unwrap().0);
        let mut sum = 0.0;
        for a in 0..4 {
            let t = Tape::new();
            let b = params.bind_all(&t);
            let (l, counts) = anchor_contrastive_loss(&t, &b, &enc, &matcher, &batch, a, 0.2).unwrap();
            let va = batch.views()[a].num_nodes() as u64;
            let others: u64 = (0..4).filter(|&k| k != a).map(|k| batch.views()[k].num_nodes() as u64).sum();
            assert_eq!(counts.sim_ops, 2 * va * others);
            sum += t.item(l);
        }
        assert!((sum / 4.0 - full).abs() < 1e-9);
    }

    #[test]
    fn contrastive_pipeline_gradcheck() {
        let (enc, matcher, params, views) = tiny_setup(Similarity::Dot);
        let batch = ContrastiveBatch::new(views).unwrap();
        let err = grad_check_params(
            |t, b| Ok(full_contrastive_loss(t, b, &enc, &matcher, &batch, 0.5)?.0),
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn two_view_batch_has_zero_loss() {
        let (enc, matcher, params, views) = tiny_setup(Similarity::Dot);
        let batch = ContrastiveBatch::new(vec![views[0].clone(), views[0].clone()]).unwrap();
        let tape = Tape::new();
        let bound = params.bind_all(&tape);
        let (loss, _) = full_contrastive_loss(&tape, &bound, &enc, &matcher, &batch, 0.07).unwrap();
        assert_eq!(tape.item(loss), 0.0);
        assert!(ContrastiveBatch::new(vec![]).is_err());
        assert!(ContrastiveBatch::new(views[..3].to_vec()).is_err());
    }

    #[test]
    fn pair_similarity_is_symmetric_and_deterministic() {
        let (enc, matcher, params, views) = tiny_setup(Similarity::Dot);
        let tape = Tape::new();
        let b = params.bind_all(&tape);
        let s01 = tape.item(pair_similarity(&tape, &b, &enc, &matcher, &views[0], &views[1]).unwrap());
        let s10 = tape.item(pair_similarity(&tape, &b, &enc, &matcher, &views[1], &views[0]).unwrap());
        let again = tape.item(pair_similarity(&tape, &b, &enc, &matcher, &views[0], &views[1]).unwrap());
        assert!((s01 - s10).abs() < 1e-9);
        assert_eq!(s01.to_bits(), again.to_bits());
        let s00 = tape.item(pair_similarity(&tape, &b, &enc, &matcher, &views[0], &views[0]).unwrap());
        assert!(s00 > 0.0);
    }
}
