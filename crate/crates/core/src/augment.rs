//! Stochastic graph augmentations producing two correlated views per graph.
//!
//! Every augmentation is a pure function of `(graph, ratio, seed)`. Seeds for
//! a view are derived from `(global seed, graph index, view index)`, so a
//! batch of views can be rebuilt exactly.

use std::collections::{BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub const DEFAULT_RATIO: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    NodeDrop,
    EdgePerturb,
    SubgraphRw,
    AttrMask,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub kind: AugmentKind,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

fn default_ratio() -> f64 {
    DEFAULT_RATIO
}

impl Augmentation {
    pub fn new(kind: AugmentKind, ratio: f64) -> Self {
        Self { kind, ratio }
    }

    pub fn identity() -> Self {
        Self::new(AugmentKind::Identity, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "augmentation ratio must lie in [0, 1), got {}",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn apply(&self, g: &Graph, seed: u64) -> Result<Graph> {
        self.validate()?;
        match self.kind {
            AugmentKind::NodeDrop => node_drop(g, self.ratio, seed),
            AugmentKind::EdgePerturb => edge_perturb(g, self.ratio, seed).map(|p| p.graph),
            AugmentKind::SubgraphRw => subgraph_rw(g, self.ratio, seed),
            AugmentKind::AttrMask => attr_mask(g, self.ratio, seed),
            AugmentKind::Identity => Ok(g.clone()),
        }
    }
}

/// Augmentations for the first and second view of every graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub first: Augmentation,
    pub second: Augmentation,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self::same(Augmentation::identity())
    }

    pub fn same(aug: Augmentation) -> Self {
        Self {
            first: aug,
            second: aug,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()
    }
}

impl Default for AugmentSpec {
    /// Node dropping for one view, random-walk subgraph for the other.
    fn default() -> Self {
        Self {
            first: Augmentation::new(AugmentKind::NodeDrop, DEFAULT_RATIO),
            second: Augmentation::new(AugmentKind::SubgraphRw, DEFAULT_RATIO),
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for one view of one graph.
pub fn derive_seed(global: u64, graph_index: u64, view_index: u64) -> u64 {
    mix(mix(mix(global) ^ graph_index) ^ view_index)
}

fn drop_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).floor() as usize).min(n)
}

/// Drops `floor(ratio * n)` uniformly chosen nodes, always keeping at least one.
pub fn node_drop(g: &Graph, ratio: f64, seed: u64) -> Result<Graph> {
    let n = g.num_nodes();
    let k = drop_count(n, ratio).min(n - 1);
    if k == 0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dropped: HashSet<usize> = sample(&mut rng, n, k).into_iter().collect();
    let keep: BTreeSet<usize> = (0..n).filter(|v| !dropped.contains(v)).collect();
    g.induced_subgraph(&keep)
}

/// Result of [`edge_perturb`]; `added < removed` when too few absent pairs exist.
#[derive(Clone, Debug)]
pub struct Perturbed {
    pub graph: Graph,
    pub removed: usize,
    pub added: usize,
}

/// Removes `floor(ratio * m)` of the `m` undirected edges and adds as many
/// pairs that were absent from the input, with zero attributes.
pub fn edge_perturb(g: &Graph, ratio: f64, seed: u64) -> Result<Perturbed> {
    if !g.is_symmetric() {
        return Err(Error::Graph("edge perturbation needs a symmetric graph".into()));
    }
    let n = g.num_nodes();
    let present: HashSet<(usize, usize)> = g.edges().iter().copied().collect();
    let undirected: Vec<(usize, usize)> = g.edges().iter().copied().filter(|(s, d)| s < d).collect();
    let k = drop_count(undirected.len(), ratio);
    if k == 0 {
        return Ok(Perturbed {
            graph: g.clone(),
            removed: 0,
            added: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed: HashSet<(usize, usize)> = sample(&mut rng, undirected.len(), k)
        .into_iter()
        .map(|i| undirected[i])
        .collect();
    let mut absent = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if !present.contains(&(u, v)) {
                absent.push((u, v));
            }
        }
    }
    let add = k.min(absent.len());
    let mut chosen: Vec<usize> = sample(&mut rng, absent.len(), add).into_vec();
    chosen.sort_unstable();

    let mut edges = Vec::with_capacity(g.num_edges());
    let mut rows = Vec::with_capacity(g.num_edges());
    for (i, &(s, d)) in g.edges().iter().enumerate() {
        if !removed.contains(&(s.min(d), s.max(d))) {
            edges.push((s, d));
            rows.push(i);
        }
    }
    let de = g.edge_dim();
    let mut data = g.edge_attrs().select_rows(&rows).into_data();
    for i in chosen {
        let (u, v) = absent[i];
        edges.push((u, v));
        edges.push((v, u));
        data.extend(std::iter::repeat_n(0.0, 2 * de));
    }
    let edge_attrs = Tensor::new(edges.len(), de, data)?;
    let mut graph = Graph::new_unchecked(g.node_attrs().clone(), edges, edge_attrs);
    if let Some(label) = g.label() {
        graph = graph.with_label(label.to_vec(), g.label_mask().map(<[bool]>::to_vec))?;
    }
    Ok(Perturbed {
        graph,
        removed: k,
        added: add,
    })
}

/// Collects `n - floor(ratio * n)` distinct nodes with a random walk from a
/// uniform start and returns the induced subgraph. The walk jumps to a random
/// unvisited node at a dead end, or when it stops finding new nodes.
pub fn subgraph_rw(g: &Graph, ratio: f64, seed: u64) -> Result<Graph> {
    let n = g.num_nodes();
    let target = (n - drop_count(n, ratio)).max(1);
    if target == n {
        return Ok(g.clone());
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in g.edges() {
        if s != d {
            adj[s].push(d);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited = BTreeSet::new();
    let mut current = rng.random_range(0..n);
    visited.insert(current);
    let patience = 4 * n;
    let mut stale = 0;
    while visited.len() < target {
        if adj[current].is_empty() || stale >= patience {
            let unvisited: Vec<usize> = (0..n).filter(|v| !visited.contains(v)).collect();
            current = unvisited[rng.random_range(0..unvisited.len())];
            stale = 0;
        } else {
            current = adj[current][rng.random_range(0..adj[current].len())];
        }
        if visited.insert(current) {
            stale = 0;
        } else {
            stale += 1;
        }
    }
    g.induced_subgraph(&visited)
}

/// Zeroes the attribute rows of `floor(ratio * n)` uniformly chosen nodes.
pub fn attr_mask(g: &Graph, ratio: f64, seed: u64) -> Result<Graph> {
    let n = g.num_nodes();
    let k = drop_count(n, ratio);
    let mut out = g.clone();
    if k == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in sample(&mut rng, n, k) {
        out.node_attrs_mut().row_slice_mut(v).fill(0.0);
    }
    Ok(out)
}

/// The two views of graph `graph_index`.
pub fn make_views(g: &Graph, spec: &AugmentSpec, seed: u64, graph_index: u64) -> Result<(Graph, Graph)> {
    let a = spec.first.apply(g, derive_seed(seed, graph_index, 0))?;
    let b = spec.second.apply(g, derive_seed(seed, graph_index, 1))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn undirected(n: usize, pairs: &[(usize, usize)]) -> Graph {
        let x = Tensor::new(n, 2, (0..2 * n).map(|v| v as f64 + 1.0).collect()).unwrap();
        let e = Tensor::filled(pairs.len(), 1, 1.0);
        Graph::try_new(x, pairs.to_vec(), e).unwrap().symmetrize().unwrap()
    }

    fn ring(n: usize) -> Graph {
        let pairs: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        undirected(n, &pairs)
    }

    fn undirected_set(g: &Graph) -> BTreeSet<(usize, usize)> {
        g.edges().iter().map(|&(s, d)| (s.min(d), s.max(d))).collect()
    }

    #[test]
    fn zero_ratio_is_identity_for_every_kind() {
        let g = ring(7);
        for kind in [AugmentKind::NodeDrop, AugmentKind::EdgePerturb, AugmentKind::SubgraphRw, AugmentKind::AttrMask] {
            assert_eq!(Augmentation::new(kind, 0.0).apply(&g, 3).unwrap(), g, "{kind:?}");
        }
    }

    #[test]
    fn node_drop_on_single_node_keeps_it() {
        let g = undirected(1, &[]);
        assert_eq!(node_drop(&g, 0.9, 1).unwrap(), g);
    }

    #[test]
    fn node_drop_twenty_percent_of_ten() {
        let g = ring(10);
        let a = node_drop(&g, 0.2, 42).unwrap();
        assert_eq!(a.num_nodes(), 8);
        assert_eq!(a, node_drop(&g, 0.2, 42).unwrap());
    }

    #[test]
    fn edge_perturb_swaps_exactly_one_triangle_edge() {
        // triangle 0-1-2 plus an isolated node 3, so absent pairs exist
        let g = undirected(4, &[(0, 1), (1, 2), (0, 2)]);
        let original = undirected_set(&g);
        let absent: Vec<(usize, usize)> = vec![(0, 3), (1, 3), (2, 3)];
        let mut candidates = Vec::new();
        for removed in &original {
            for added in &absent {
                let mut s = original.clone();
                s.remove(removed);
                s.insert(*added);
                candidates.push(s);
            }
        }
        assert_eq!(candidates.len(), 9);
        for seed in 0..20 {
            let p = edge_perturb(&g, 1.0 / 3.0, seed).unwrap();
            assert_eq!((p.removed, p.added), (1, 1));
            assert!(p.graph.is_symmetric());
            assert!(p.graph.validate().is_empty());
            assert!(candidates.contains(&undirected_set(&p.graph)));
        }
    }

    #[test]
    fn edge_perturb_on_complete_graph_reports_shortfall() {
        let g = undirected(3, &[(0, 1), (1, 2), (0, 2)]);
        let p = edge_perturb(&g, 0.5, 0).unwrap();
        assert_eq!((p.removed, p.added), (1, 0));
    }

    #[test]
    fn edge_perturb_adds_zero_attribute_edges() {
        let g = ring(8);
        let p = edge_perturb(&g, 0.5, 5).unwrap();
        let before = undirected_set(&g);
        for (i, &(s, d)) in p.graph.edges().iter().enumerate() {
            if !before.contains(&(s.min(d), s.max(d))) {
                assert_eq!(p.graph.edge_attrs().row_slice(i), &[0.0]);
            }
        }
        assert_eq!(undirected_set(&p.graph).len(), 8);
    }

    #[test]
    fn subgraph_rw_on_star_keeps_center_and_a_leaf() {
        let g = undirected(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        for seed in 0..50 {
            let s = subgraph_rw(&g, 0.6, seed).unwrap();
            assert_eq!(s.num_nodes(), 2);
            // every 2-node walk outcome on a star is {center, leaf}: connected
            assert_eq!(s.num_edges(), 2);
        }
        let full = subgraph_rw(&ring(6), 0.0, 1).unwrap();
        assert_eq!(full.num_nodes(), 6);
    }

    #[test]
    fn subgraph_rw_terminates_on_disconnected_graphs() {
        let g = undirected(6, &[(0, 1), (2, 3)]);
        // two isolated nodes plus two 2-node components
        for seed in 0..20 {
            assert_eq!(subgraph_rw(&g, 0.34, seed).unwrap().num_nodes(), 4);
            assert_eq!(subgraph_rw(&g, 0.17, seed).unwrap().num_nodes(), 5);
        }
    }

    #[test]
    fn attr_mask_zeroes_rows_and_keeps_edges() {
        let g = ring(10);
        let m = attr_mask(&g, 0.3, 9).unwrap();
        assert_eq!(m.edges(), g.edges());
        let zero_rows = (0..10).filter(|&v| m.node_attrs().row_slice(v).iter().all(|&x| x == 0.0)).count();
        assert_eq!(zero_rows, 3);
    }

    #[test]
    fn make_views_examples() {
        let g = ring(10);
        let (a, b) = make_views(&g, &AugmentSpec::identity(), 1, 0).unwrap();
        assert_eq!((&a, &b), (&g, &g));
        let spec = AugmentSpec::same(Augmentation::new(AugmentKind::NodeDrop, 0.2));
        let (a, b) = make_views(&g, &spec, 7, 3).unwrap();
        assert_eq!((a.num_nodes(), b.num_nodes()), (8, 8));
        assert_ne!(a, b);
        assert_eq!(make_views(&g, &spec, 7, 3).unwrap(), (a, b));
    }

    #[test]
    fn ratio_must_be_below_one() {
        assert!(Augmentation::new(AugmentKind::NodeDrop, 1.0).apply(&ring(3), 0).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (1usize..12).prop_flat_map(|n| {
            proptest::collection::btree_set((0..n, 0..n), 0..20).prop_map(move |set| {
                let pairs: BTreeSet<(usize, usize)> = set.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))).collect();
                undirected(n, &pairs.into_iter().collect::<Vec<_>>())
            })
        })
    }

    fn arb_kind() -> impl Strategy<Value = AugmentKind> {
        prop_oneof![
            Just(AugmentKind::NodeDrop),
            Just(AugmentKind::EdgePerturb),
            Just(AugmentKind::SubgraphRw),
            Just(AugmentKind::AttrMask),
            Just(AugmentKind::Identity),
        ]
    }

    proptest! {
        #[test]
        fn outputs_are_valid_and_replayable(g in arb_graph(), kind in arb_kind(), ratio in 0.0f64..0.95, seed in any::<u64>()) {
            let aug = Augmentation::new(kind, ratio);
            let out = aug.apply(&g, seed).unwrap();
            prop_assert!(out.validate().is_empty());
            prop_assert!(out.is_symmetric());
            prop_assert_eq!(&out, &aug.apply(&g, seed).unwrap());
        }

        #[test]
        fn node_drop_count_formula(g in arb_graph(), ratio in 0.0f64..0.99, seed in any::<u64>()) {
            let n = g.num_nodes();
            let expected = 1.max(n - (ratio * n as f64).floor() as usize);
            prop_assert_eq!(node_drop(&g, ratio, seed).unwrap().num_nodes(), expected);
        }
    }
}
