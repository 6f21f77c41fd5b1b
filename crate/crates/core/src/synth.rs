//! Synthetic benchmark with planted motifs and a size-based OOD split.
//!
//! A base graph is sparse Erdos-Renyi (mean degree about 3), pruned until it
//! is triangle-free with maximum degree 3, so none of the motifs occur in it
//! by chance. Motifs (triangle, 4-star, 4-clique) are added as new node
//! groups hanging off a base node of degree at most 2 through a single
//! bridge edge. Labels record which motifs are present, found by
//! enumeration on the finished graph.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset, Split};
use crate::tensor::Tensor;

/// Node count of the triangle, 4-star and 4-clique motifs.
const MOTIF_SIZES: [usize; 3] = [3, 5, 4];
const MAX_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCounts {
    pub pretrain: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SynthCounts {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            train: 180,
            valid: 60,
            test: 60,
        }
    }
}

/// Inclusive node-count ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub pretrain: (usize, usize),
    pub train: (usize, usize),
    pub valid: (usize, usize),
    pub test: (usize, usize),
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            pretrain: (10, 40),
            train: (10, 20),
            valid: (21, 24),
            test: (25, 40),
        }
    }
}

/// Which motifs a graph contains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MotifPresence {
    pub triangle: bool,
    pub star: bool,
    pub clique: bool,
}

fn adjacency(g: &Graph) -> Vec<BTreeSet<usize>> {
    let mut adj = vec![BTreeSet::new(); g.num_nodes()];
    for &(u, v) in g.edges() {
        if u != v {
            adj[u].insert(v);
            adj[v].insert(u);
        }
    }
    adj
}

pub fn count_triangles(g: &Graph) -> usize {
    let adj = adjacency(g);
    let mut count = 0;
    for u in 0..adj.len() {
        for &v in adj[u].range(u + 1..) {
            count += adj[v].range(v + 1..).filter(|w| adj[u].contains(w)).count();
        }
    }
    count
}

pub fn detect_motifs(g: &Graph) -> MotifPresence {
    let adj = adjacency(g);
    let star = adj.iter().any(|nb| {
        let nb: Vec<usize> = nb.iter().copied().collect();
        has_independent_set(&adj, &nb, 4, &mut Vec::new(), 0)
    });
    let mut clique = false;
    for u in 0..adj.len() {
        for &v in adj[u].range(u + 1..) {
            for &w in adj[v].range(v + 1..).filter(|w| adj[u].contains(w)) {
                if adj[w].range(w + 1..).any(|x| adj[u].contains(x) && adj[v].contains(x)) {
                    clique = true;
                }
            }
        }
    }
    MotifPresence {
        triangle: count_triangles(g) > 0,
        star,
        clique,
    }
}

fn has_independent_set(adj: &[BTreeSet<usize>], pool: &[usize], k: usize, chosen: &mut Vec<usize>, from: usize) -> bool {
    if chosen.len() == k {
        return true;
    }
    for i in from..pool.len() {
        let c = pool[i];
        if chosen.iter().all(|&o| !adj[o].contains(&c)) {
            chosen.push(c);
            if has_independent_set(adj, pool, k, chosen, i + 1) {
                return true;
            }
            chosen.pop();
        }
    }
    false
}

/// Sparse triangle-free base graph with maximum degree 3.
fn base_edges(rng: &mut impl Rng, n: usize) -> Vec<BTreeSet<usize>> {
    let mut adj = vec![BTreeSet::new(); n];
    if n < 2 {
        return adj;
    }
    let p = (3.0 / (n - 1) as f64).min(1.0);
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) && adj[u].len() < 3 && adj[v].len() < 3 && adj[u].is_disjoint(&adj[v]) {
                adj[u].insert(v);
                adj[v].insert(u);
            }
        }
    }
    adj
}

fn build_graph(rng: &mut ChaCha8Rng, size: usize, motifs: [bool; 3], noise: &Normal<f64>) -> Option<Graph> {
    let motif_nodes: usize = motifs.iter().zip(MOTIF_SIZES).filter(|m| *m.0).map(|m| m.1).sum();
    let base = size.checked_sub(motif_nodes).filter(|&b| b >= 1)?;
    let mut adj = base_edges(rng, base);
    let mut anchors: Vec<usize> = (0..base).filter(|&v| adj[v].len() <= 2).collect();
    anchors.shuffle(rng);
    let wanted = motifs.iter().filter(|&&m| m).count();
    if anchors.len() < wanted {
        return None;
    }
    adj.resize(size, BTreeSet::new());
    let link = |adj: &mut Vec<BTreeSet<usize>>, u: usize, v: usize| {
        adj[u].insert(v);
        adj[v].insert(u);
    };
    let mut next = base;
    let mut anchors = anchors.into_iter();
    for (kind, _) in motifs.iter().enumerate().filter(|m| *m.1) {
        let nodes: Vec<usize> = (next..next + MOTIF_SIZES[kind]).collect();
        next += MOTIF_SIZES[kind];
        match kind {
            1 => nodes[1..].iter().for_each(|&leaf| link(&mut adj, nodes[0], leaf)),
            _ => {
                for i in 0..nodes.len() {
                    for j in i + 1..nodes.len() {
                        link(&mut adj, nodes[i], nodes[j]);
                    }
                }
            }
        }
        // the star hangs off a leaf, so its center keeps degree exactly 4
        let attach = if kind == 1 { nodes[1] } else { nodes[0] };
        link(&mut adj, anchors.next()?, attach);
    }

    let mut perm: Vec<usize> = (0..size).collect();
    perm.shuffle(rng);
    let mut edges = Vec::new();
    for (u, nb) in adj.iter().enumerate() {
        for &v in nb {
            edges.push((perm[u], perm[v]));
        }
    }
    edges.sort_unstable();
    let mut x = Tensor::zeros(size, 3);
    for (u, nb) in adj.iter().enumerate() {
        let row = x.row_slice_mut(perm[u]);
        row[0] = nb.len() as f64 + 0.25 * noise.sample(rng);
        row[1] = noise.sample(rng);
        row[2] = 1.0;
    }
    let e = Tensor::filled(edges.len(), 1, 1.0);
    Some(Graph::new_unchecked(x, edges, e))
}

/// A graph of `size` nodes containing exactly the motifs in `motifs`
/// (triangle, star, clique). Retries with other random draws, and fails if
/// the motifs cannot fit.
pub fn planted_graph(rng: &mut ChaCha8Rng, size: usize, motifs: [bool; 3]) -> Result<Graph> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..MAX_TRIES {
        if let Some(g) = build_graph(rng, size, motifs, &noise) {
            return Ok(g);
        }
    }
    Err(Error::Config(format!("cannot plant motifs {motifs:?} into {size} nodes")))
}

/// Random graph in `sizes` with a random motif subset; subsets that do not
/// fit are redrawn.
fn sample_graph(rng: &mut ChaCha8Rng, sizes: (usize, usize)) -> Result<Graph> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..MAX_TRIES {
        let size = rng.random_range(sizes.0..=sizes.1);
        let motifs = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        if let Some(g) = build_graph(rng, size, motifs, &noise) {
            return Ok(g);
        }
    }
    Err(Error::Config(format!("sizes {sizes:?} cannot hold the motifs")))
}

/// Downstream label: presence of triangle, star and clique.
pub fn downstream_label(g: &Graph) -> Vec<f64> {
    let m = detect_motifs(g);
    [m.triangle, m.star, m.clique].iter().map(|&b| f64::from(u8::from(b))).collect()
}

/// Coarse pre-training label: the three presence bits plus "no motif".
pub fn coarse_label(g: &Graph) -> Vec<f64> {
    let mut y = downstream_label(g);
    let none = y.iter().all(|&v| v == 0.0);
    y.push(f64::from(u8::from(none)));
    y
}

fn check_range(name: &str, r: (usize, usize)) -> Result<()> {
    if r.0 == 0 || r.0 > r.1 {
        return Err(Error::Config(format!("invalid {name} size range {r:?}")));
    }
    // the largest graphs must be able to hold every motif at once
    if r.1 < MOTIF_SIZES.iter().sum::<usize>() + 1 {
        return Err(Error::Config(format!(
            "{name} size range {r:?} cannot hold all motifs (needs at least {} nodes)",
            MOTIF_SIZES.iter().sum::<usize>() + 1
        )));
    }
    Ok(())
}

/// Builds the unlabeled-usable pre-training set (coarse labels attached)
/// and the labeled downstream set with its OOD split.
pub fn synth_motif_benchmark(seed: u64, counts: SynthCounts, sizes: SynthSizes) -> Result<(GraphDataset, GraphDataset)> {
    for (name, c) in [
        ("pretrain", counts.pretrain),
        ("train", counts.train),
        ("valid", counts.valid),
        ("test", counts.test),
    ] {
        if c == 0 {
            return Err(Error::Config(format!("{name} graph count must be positive")));
        }
    }
    for (name, r) in [
        ("pretrain", sizes.pretrain),
        ("train", sizes.train),
        ("valid", sizes.valid),
        ("test", sizes.test),
    ] {
        check_range(name, r)?;
    }
    let ranges = [sizes.train, sizes.valid, sizes.test];
    for i in 0..3 {
        for j in i + 1..3 {
            if ranges[i].0 <= ranges[j].1 && ranges[j].0 <= ranges[i].1 {
                return Err(Error::Config("downstream size ranges must be disjoint".into()));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let mut pretrain = Vec::with_capacity(counts.pretrain);
    for _ in 0..counts.pretrain {
        let g = sample_graph(&mut rng, sizes.pretrain)?;
        let y = coarse_label(&g);
        pretrain.push(g.with_label(y, None)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let mut graphs = Vec::new();
    let mut splits = Vec::new();
    for (split, count, range) in [
        (Split::Train, counts.train, sizes.train),
        (Split::Valid, counts.valid, sizes.valid),
        (Split::Test, counts.test, sizes.test),
    ] {
        for _ in 0..count {
            let g = sample_graph(&mut rng, range)?;
            let y = downstream_label(&g);
            graphs.push(g.with_label(y, None)?);
            splits.push(Some(split));
        }
    }
    let n = pretrain.len();
    Ok((GraphDataset::new(pretrain, vec![None; n])?, GraphDataset::new(graphs, splits)?))
}
