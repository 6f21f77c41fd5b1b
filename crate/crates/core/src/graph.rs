//! Attributed graphs and the structural operations every other module uses.
//!
//! Graphs are stored directed. Undirected inputs become two directed edges
//! per pair through [`Graph::symmetrize`], so message passing is a single pass
//! over `edges`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    node_attrs: Tensor,
    edges: Vec<(usize, usize)>,
    edge_attrs: Tensor,
    label: Option<Vec<f64>>,
    label_mask: Option<Vec<bool>>,
}

/// One broken invariant found by [`Graph::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoNodes,
    EndpointOutOfRange { edge: usize, node: usize },
    EdgeAttrMisalignment { edges: usize, rows: usize },
    LabelMaskLength { label: usize, mask: usize },
    MaskWithoutLabel,
    NonFiniteAttribute,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoNodes => write!(f, "graph has no nodes"),
            Violation::EndpointOutOfRange { edge, node } => {
                write!(f, "endpoint out of range: edge {edge} references node {node}")
            }
            Violation::EdgeAttrMisalignment { edges, rows } => {
                write!(f, "edge attr misalignment: {edges} edges but {rows} attribute rows")
            }
            Violation::LabelMaskLength { label, mask } => {
                write!(f, "label has length {label} but mask has length {mask}")
            }
            Violation::MaskWithoutLabel => write!(f, "label mask present without a label"),
            Violation::NonFiniteAttribute => write!(f, "non-finite attribute value"),
        }
    }
}

impl Graph {
    /// Builds a graph without checking it; call [`Graph::validate`] or use
    /// [`Graph::try_new`].
    pub fn new_unchecked(node_attrs: Tensor, edges: Vec<(usize, usize)>, edge_attrs: Tensor) -> Self {
        Self {
            node_attrs,
            edges,
            edge_attrs,
            label: None,
            label_mask: None,
        }
    }

    pub fn try_new(node_attrs: Tensor, edges: Vec<(usize, usize)>, edge_attrs: Tensor) -> Result<Self> {
        let g = Self::new_unchecked(node_attrs, edges, edge_attrs);
        g.ensure_valid()?;
        Ok(g)
    }

    /// Attaches a label vector. `mask[i] == false` marks task `i` as missing.
    pub fn with_label(mut self, label: Vec<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.len() != label.len() {
                return Err(Error::Graph(
                    Violation::LabelMaskLength {
                        label: label.len(),
                        mask: m.len(),
                    }
                    .to_string(),
                ));
            }
        }
        self.label = Some(label);
        self.label_mask = mask;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_attrs.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_dim(&self) -> usize {
        self.node_attrs.cols()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_attrs.cols()
    }

    pub fn node_attrs(&self) -> &Tensor {
        &self.node_attrs
    }

    pub fn node_attrs_mut(&mut self) -> &mut Tensor {
        &mut self.node_attrs
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_attrs(&self) -> &Tensor {
        &self.edge_attrs
    }

    pub fn label(&self) -> Option<&[f64]> {
        self.label.as_deref()
    }

    pub fn label_mask(&self) -> Option<&[bool]> {
        self.label_mask.as_deref()
    }

    /// Per-task observation flags; all observed when no mask was given.
    pub fn observed(&self) -> Option<Vec<bool>> {
        let label = self.label.as_ref()?;
        Some(
            self.label_mask
                .clone()
                .unwrap_or_else(|| vec![true; label.len()]),
        )
    }

    pub fn has_complete_label(&self) -> bool {
        self.label.is_some() && self.label_mask.as_ref().is_none_or(|m| m.iter().all(|&o| o))
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.num_nodes();
        if n == 0 {
            out.push(Violation::NoNodes);
        }
        for (i, &(s, d)) in self.edges.iter().enumerate() {
            for node in [s, d] {
                if node >= n {
                    out.push(Violation::EndpointOutOfRange { edge: i, node });
                }
            }
        }
        if self.edge_attrs.rows() != self.edges.len() {
            out.push(Violation::EdgeAttrMisalignment {
                edges: self.edges.len(),
                rows: self.edge_attrs.rows(),
            });
        }
        match (&self.label, &self.label_mask) {
            (Some(l), Some(m)) if l.len() != m.len() => out.push(Violation::LabelMaskLength {
                label: l.len(),
                mask: m.len(),
            }),
            (None, Some(_)) => out.push(Violation::MaskWithoutLabel),
            _ => {}
        }
        let finite = |t: &Tensor| t.data().iter().all(|v| v.is_finite());
        if !finite(&self.node_attrs) || !finite(&self.edge_attrs) {
            out.push(Violation::NonFiniteAttribute);
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        if report.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = report.iter().map(ToString::to_string).collect();
            Err(Error::Graph(msgs.join("; ")))
        }
    }

    /// Adds the reverse of every non-loop edge that lacks one, copying its
    /// attributes. Existing edges keep their order; added reverses follow.
    pub fn symmetrize(&self) -> Result<Graph> {
        self.ensure_valid()?;
        let mut seen = HashSet::with_capacity(self.edges.len());
        for &e in &self.edges {
            if !seen.insert(e) {
                return Err(Error::Graph(format!("duplicate edge ({}, {})", e.0, e.1)));
            }
        }
        let index: std::collections::HashMap<(usize, usize), usize> =
            self.edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let mut edges = self.edges.clone();
        let mut extra_rows = Vec::new();
        for (i, &(s, d)) in self.edges.iter().enumerate() {
            if let Some(&j) = index.get(&(d, s)) {
                if self.edge_attrs.row_slice(i) != self.edge_attrs.row_slice(j) {
                    return Err(Error::Graph(format!(
                        "edges ({s}, {d}) and ({d}, {s}) carry different attributes"
                    )));
                }
            } else if s != d {
                edges.push((d, s));
                extra_rows.push(i);
            }
        }
        let mut data = self.edge_attrs.data().to_vec();
        for i in extra_rows {
            data.extend_from_slice(self.edge_attrs.row_slice(i));
        }
        let edge_attrs = Tensor::new(edges.len(), self.edge_dim(), data)?;
        Ok(Graph {
            node_attrs: self.node_attrs.clone(),
            edges,
            edge_attrs,
            label: self.label.clone(),
            label_mask: self.label_mask.clone(),
        })
    }

    /// True if every non-loop edge has a reverse with identical attributes.
    pub fn is_symmetric(&self) -> bool {
        let index: std::collections::HashMap<(usize, usize), usize> =
            self.edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        self.edges.iter().enumerate().all(|(i, &(s, d))| {
            s == d
                || index
                    .get(&(d, s))
                    .is_some_and(|&j| self.edge_attrs.row_slice(i) == self.edge_attrs.row_slice(j))
        })
    }

    /// Out-edges of `v` as `(neighbor, edge index)`, in stored order.
    pub fn neighbors(&self, v: usize) -> Result<Vec<(usize, usize)>> {
        if v >= self.num_nodes() {
            return Err(Error::Index {
                what: "node",
                index: v,
                len: self.num_nodes(),
            });
        }
        Ok(self
            .edges
            .iter()
            .enumerate()
            .filter(|(_, &(s, _))| s == v)
            .map(|(i, &(_, d))| (d, i))
            .collect())
    }

    /// Number of incoming edges per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(_, d) in &self.edges {
            deg[d] += 1;
        }
        deg
    }

    /// Keeps the nodes in `keep` (renumbered densely in ascending order) and
    /// the edges between them.
    pub fn induced_subgraph(&self, keep: &BTreeSet<usize>) -> Result<Graph> {
        if keep.is_empty() {
            return Err(Error::Graph("empty subgraph".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&v| v >= self.num_nodes()) {
            return Err(Error::Index {
                what: "node",
                index: bad,
                len: self.num_nodes(),
            });
        }
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let kept: Vec<usize> = keep.iter().copied().collect();
        let mut edges = Vec::new();
        let mut edge_rows = Vec::new();
        for (i, &(s, d)) in self.edges.iter().enumerate() {
            if remap[s] != usize::MAX && remap[d] != usize::MAX {
                edges.push((remap[s], remap[d]));
                edge_rows.push(i);
            }
        }
        Ok(Graph {
            node_attrs: self.node_attrs.select_rows(&kept),
            edges,
            edge_attrs: self.edge_attrs.select_rows(&edge_rows),
            label: self.label.clone(),
            label_mask: self.label_mask.clone(),
        })
    }

    /// Same graph with nodes renumbered so that old node `v` becomes `perm[v]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        let mut inverse = vec![usize::MAX; n];
        if perm.len() != n {
            return Err(Error::Contract("permutation length differs from node count".into()));
        }
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inverse[new] != usize::MAX {
                return Err(Error::Contract("not a permutation".into()));
            }
            inverse[new] = old;
        }
        Ok(Graph {
            node_attrs: self.node_attrs.select_rows(&inverse),
            edges: self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect(),
            edge_attrs: self.edge_attrs.clone(),
            label: self.label.clone(),
            label_mask: self.label_mask.clone(),
        })
    }
}

/// Several graphs laid out as one disjoint union, so that a batch can be
/// encoded with a single pass of large matrix products.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    union: Graph,
    offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Contract("empty graph batch".into()))?;
        let (dv, de) = (first.node_dim(), first.edge_dim());
        let mut node_data = Vec::new();
        let mut edge_data = Vec::new();
        let mut edges = Vec::new();
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        let mut base = 0;
        for g in graphs {
            if g.node_dim() != dv || g.edge_dim() != de {
                return Err(Error::shape(
                    "graph batch dims",
                    (dv, de),
                    (g.node_dim(), g.edge_dim()),
                ));
            }
            offsets.push(base);
            node_data.extend_from_slice(g.node_attrs().data());
            edge_data.extend_from_slice(g.edge_attrs().data());
            edges.extend(g.edges().iter().map(|&(s, d)| (s + base, d + base)));
            base += g.num_nodes();
        }
        offsets.push(base);
        let union = Graph::new_unchecked(
            Tensor::new(base, dv, node_data)?,
            edges.clone(),
            Tensor::new(edges.len(), de, edge_data)?,
        );
        Ok(Self { union, offsets })
    }

    pub fn union(&self) -> &Graph {
        &self.union
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(first row, node count)` of member `i` in the union.
    pub fn span(&self, i: usize) -> (usize, usize) {
        (self.offsets[i], self.offsets[i + 1] - self.offsets[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "val")]
    Valid,
    Test,
}

/// Graphs sharing node/edge attribute widths and, when labeled, task count.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    graphs: Vec<Graph>,
    splits: Vec<Option<Split>>,
    node_dim: usize,
    edge_dim: usize,
    num_tasks: Option<usize>,
}

impl GraphDataset {
    pub fn new(graphs: Vec<Graph>, splits: Vec<Option<Split>>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        if splits.len() != graphs.len() {
            return Err(Error::Data("one split tag per graph required".into()));
        }
        let (node_dim, edge_dim) = (graphs[0].node_dim(), graphs[0].edge_dim());
        let mut num_tasks = None;
        for (i, g) in graphs.iter().enumerate() {
            g.ensure_valid()
                .map_err(|e| Error::Data(format!("graph {i}: {e}")))?;
            if g.node_dim() != node_dim || g.edge_dim() != edge_dim {
                return Err(Error::Data(format!(
                    "graph {i}: dims (d_v={}, d_e={}) differ from (d_v={node_dim}, d_e={edge_dim})",
                    g.node_dim(),
                    g.edge_dim()
                )));
            }
            if let Some(l) = g.label() {
                match num_tasks {
                    None => num_tasks = Some(l.len()),
                    Some(t) if t != l.len() => {
                        return Err(Error::Data(format!(
                            "graph {i}: {} tasks, expected {t}",
                            l.len()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            graphs,
            splits,
            node_dim,
            edge_dim,
            num_tasks,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn splits(&self) -> &[Option<Split>] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn num_tasks(&self) -> Option<usize> {
        self.num_tasks
    }

    /// Indices of graphs tagged with `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(split))
            .map(|(i, _)| i)
            .collect()
    }
}
