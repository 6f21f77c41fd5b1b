//! A 3-node toy pair recomputed with plain loops over `f64`, independently
//! of the tape: intra messages, cross-graph attention, inter messages, node
//! update and mean readout.

use graphmatch::encoder::{Encoder, EncoderConfig};
use graphmatch::graph::Graph;
use graphmatch::matcher::{match_pair, Matcher, MatcherConfig, Similarity};
use graphmatch::tensor::{ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn rows(p: &ParamSet, name: &str) -> Mat {
    p.get(name).unwrap().to_rows()
}

fn times(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len()).map(|j| x.iter().zip(w).map(|(xi, wr)| xi * wr[j]).sum()).collect()
}

fn sim(a: &[f64], b: &[f64], kind: Similarity) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    match kind {
        Similarity::Dot => dot,
        Similarity::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        }
    }
}

/// `att[s][t]`, softmax over `t` for each source `s`.
fn attention(src: &Mat, tgt: &Mat, kind: Similarity) -> Mat {
    src.iter()
        .map(|s| {
            let scores: Vec<f64> = tgt.iter().map(|t| sim(s, t, kind)).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| e / total).collect()
        })
        .collect()
}

fn inter(src: &Mat, att: &Mat, per_target: bool) -> Mat {
    let nt = att[0].len();
    let d = src[0].len();
    (0..nt)
        .map(|t| {
            let col: f64 = if per_target { att.iter().map(|r| r[t]).sum() } else { 1.0 };
            let mut m = vec![0.0; d];
            for (s, hs) in src.iter().enumerate() {
                for k in 0..d {
                    m[k] += att[s][t] / col * hs[k];
                }
            }
            m
        })
        .collect()
}

fn intra(g: &Graph, h: &Mat, w_edge: &Mat) -> Mat {
    let mut m = vec![vec![0.0; h[0].len()]; h.len()];
    for (i, &(s, t)) in g.edges().iter().enumerate() {
        let e = times(g.edge_attrs().row_slice(i), w_edge);
        for k in 0..h[0].len() {
            m[t][k] += h[s][k] + e[k];
        }
    }
    m
}

fn update(h: &Mat, m_intra: &Mat, mu: &Mat, p: &ParamSet) -> Mat {
    let (w1, b1) = (rows(p, "matcher.update.mlp1.weight"), rows(p, "matcher.update.mlp1.bias"));
    let (w2, b2) = (rows(p, "matcher.update.mlp2.weight"), rows(p, "matcher.update.mlp2.bias"));
    (0..h.len())
        .map(|t| {
            let x: Vec<f64> = h[t].iter().chain(&m_intra[t]).chain(&mu[t]).copied().collect();
            let hidden: Vec<f64> = times(&x, &w1).iter().zip(&b1[0]).map(|(v, b)| (v + b).max(0.0)).collect();
            times(&hidden, &w2).iter().zip(&b2[0]).map(|(v, b)| v + b).collect()
        })
        .collect()
}

fn mean(z: &Mat) -> Vec<f64> {
    (0..z[0].len()).map(|k| z.iter().map(|r| r[k]).sum::<f64>() / z.len() as f64).collect()
}

fn graph(rng: &mut ChaCha8Rng, edges: Vec<(usize, usize)>) -> Graph {
    let x = Tensor::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let e = Tensor::new(edges.len(), 2, (0..2 * edges.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    Graph::try_new(x, edges, e).unwrap().symmetrize().unwrap()
}

fn max_gap(a: &Mat, b: &Tensor) -> f64 {
    a.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().zip(b.row_slice(r)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn check(kind: Similarity, per_target: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = graph(&mut rng, vec![(0, 1), (1, 2)]);
    let triangle = graph(&mut rng, vec![(0, 1), (1, 2), (0, 2)]);
    let encoder = Encoder::new(EncoderConfig::gin(2, 4, 3, 2)).unwrap();
    let matcher = Matcher::new(MatcherConfig {
        similarity: kind,
        target_normalize: per_target,
        ..MatcherConfig::new(4, 2)
    })
    .unwrap();
    let mut params = encoder.init_params(&mut rng);
    params.extend(matcher.init_params(&mut rng));
    for name in ["matcher.update.mlp1.bias", "matcher.update.mlp2.bias"] {
        let b = Tensor::new(1, 4, (0..4).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        params.insert(name, b);
    }

    let tape = Tape::new();
    let bound = params.bind_all(&tape);
    let h1 = tape.value(encoder.encode_nodes(&tape, &bound, &path).unwrap()).to_rows();
    let h2 = tape.value(encoder.encode_nodes(&tape, &bound, &triangle).unwrap()).to_rows();
    let got = match_pair(&tape, &bound, &encoder, &matcher, &path, &triangle).unwrap().values(&tape);

    let w_edge = rows(&params, "matcher.intra.edge.weight");
    let a12 = attention(&h1, &h2, kind);
    let a21 = attention(&h2, &h1, kind);
    let z1 = update(&h1, &intra(&path, &h1, &w_edge), &inter(&h2, &a21, per_target), &params);
    let z2 = update(&h2, &intra(&triangle, &h2, &w_edge), &inter(&h1, &a12, per_target), &params);

    for (name, want, have) in [
        ("a12", &a12, &got.a12),
        ("a21", &a21, &got.a21),
        ("z1", &z1, &got.z1),
        ("z2", &z2, &got.z2),
        ("zg1", &vec![mean(&z1)], &got.zg1),
        ("zg2", &vec![mean(&z2)], &got.zg2),
    ] {
        let gap = max_gap(want, have);
        assert!(gap < 1e-12, "{kind:?} per_target={per_target} {name}: {gap}");
    }
}

#[test]
fn toy_pair_matches_straight_line_evaluation() {
    for (i, kind) in [Similarity::Dot, Similarity::Cosine].into_iter().enumerate() {
        for per_target in [false, true] {
            check(kind, per_target, 10 + i as u64);
        }
    }
}

#[test]
fn attention_example_by_hand() {
    let e = std::f64::consts::E;
    let att = attention(&vec![vec![1.0, 0.0]], &vec![vec![1.0, 0.0], vec![0.0, 1.0]], Similarity::Dot);
    assert!((att[0][0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((att[0][0] - 0.7311).abs() < 1e-4 && (att[0][1] - 0.2689).abs() < 1e-4);
}
