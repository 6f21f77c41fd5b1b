//! Line-delimited JSON datasets and TOML run configurations.
//!
//! Each dataset line is one graph:
//!
//! ```json
//! {"nodes": [[1.0], [0.5]], "edges": [[0, 1]], "edge_attrs": [[1.0]], "label": [1, null], "split": "train"}
//! ```
//!
//! Undirected edges appear once on disk and are symmetrized when loaded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset, Split};
use crate::tensor::Tensor;
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub nodes: Vec<Vec<f64>>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub edge_attrs: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn matrix(rows: &[Vec<f64>], width: usize, what: &str) -> Result<Tensor> {
    if let Some(i) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::Data(format!(
            "{what} row {i} has {} values, expected {width}",
            rows[i].len()
        )));
    }
    Tensor::new(rows.len(), width, rows.concat())
}

impl GraphRecord {
    /// Converts to a symmetrized graph. `edge_dim` supplies the attribute
    /// width for graphs without edges.
    pub fn into_graph(self, edge_dim: usize) -> Result<(Graph, Option<Split>)> {
        if self.nodes.is_empty() {
            return Err(Error::Data("graph has no nodes".into()));
        }
        let x = matrix(&self.nodes, self.nodes[0].len(), "node")?;
        if self.edge_attrs.len() != self.edges.len() {
            return Err(Error::Data(format!(
                "{} edges but {} edge attribute rows",
                self.edges.len(),
                self.edge_attrs.len()
            )));
        }
        let e = matrix(&self.edge_attrs, edge_dim, "edge attribute")?;
        let edges = self.edges.iter().map(|&[u, v]| (u, v)).collect();
        let mut g = Graph::try_new(x, edges, e)?.symmetrize()?;
        if let Some(label) = self.label {
            let mask: Vec<bool> = label.iter().map(Option::is_some).collect();
            let values = label.iter().map(|v| v.unwrap_or(0.0)).collect();
            let mask = if mask.iter().all(|&b| b) { None } else { Some(mask) };
            g = g.with_label(values, mask)?;
        }
        Ok((g, self.split))
    }

    /// Inverse of [`GraphRecord::into_graph`] for a symmetric graph: keeps
    /// each undirected edge once, in its `u <= v` orientation.
    pub fn from_graph(g: &Graph, split: Option<Split>) -> Self {
        let mut edges = Vec::new();
        let mut edge_attrs = Vec::new();
        for (i, &(u, v)) in g.edges().iter().enumerate() {
            if u <= v {
                edges.push([u, v]);
                edge_attrs.push(g.edge_attrs().row_slice(i).to_vec());
            }
        }
        let label = g.label().map(|values| {
            let observed = g.observed().unwrap_or_else(|| vec![true; values.len()]);
            values.iter().zip(observed).map(|(&v, o)| o.then_some(v)).collect()
        });
        Self {
            nodes: g.node_attrs().to_rows(),
            edges,
            edge_attrs,
            label,
            split,
        }
    }
}

fn at_line(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line}: {e}"))
}

pub fn parse_dataset(text: &str) -> Result<GraphDataset> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(line).map_err(|e| at_line(i + 1, e))?;
        records.push((i + 1, rec));
    }
    if records.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let edge_dim = records
        .iter()
        .find_map(|(_, r)| r.edge_attrs.first().map(Vec::len))
        .unwrap_or(0);
    let mut graphs = Vec::with_capacity(records.len());
    let mut splits = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let (g, split) = rec.into_graph(edge_dim).map_err(|e| at_line(line, e))?;
        graphs.push(g);
        splits.push(split);
    }
    GraphDataset::new(graphs, splits)
}

pub fn load_dataset(path: &Path) -> Result<GraphDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_string(data: &GraphDataset) -> String {
    let mut out = String::new();
    for (g, split) in data.graphs().iter().zip(data.splits()) {
        let rec = GraphRecord::from_graph(g, *split);
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, data: &GraphDataset) -> Result<()> {
    fs::write(path, dataset_to_string(data)).map_err(|e| Error::io(path, e))
}

/// Everything a CLI run needs besides file paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentKind;
    use crate::trainer::Mode;

    #[test]
    fn empty_file_is_rejected() {
        assert!(parse_dataset("").unwrap_err().to_string().contains("empty dataset"));
        assert!(parse_dataset("\n  \n").unwrap_err().to_string().contains("empty dataset"));
    }

    #[test]
    fn minimal_record() {
        let d = parse_dataset(r#"{"nodes": [[1.0]]}"#).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.graphs()[0].num_nodes(), 1);
        assert_eq!(d.edge_dim(), 0);
    }

    #[test]
    fn edges_are_symmetrized_and_nulls_masked() {
        let d = parse_dataset(
            r#"{"nodes": [[1.0], [2.0], [3.0]], "edges": [[0, 1], [1, 2]], "edge_attrs": [[0.5], [0.25]], "label": [1, null, 0], "split": "valid"}"#,
        )
        .unwrap();
        let g = &d.graphs()[0];
        assert_eq!(g.num_edges(), 4);
        assert!(g.is_symmetric());
        assert_eq!(g.label_mask(), Some(&[true, false, true][..]));
        assert_eq!(d.splits()[0], Some(Split::Valid));
    }

    #[test]
    fn errors_name_the_line() {
        let text = "{\"nodes\": [[1.0]]}\n{\"nodes\": [[1.0], [2.0]], \"edges\": [[0, 5]], \"edge_attrs\": [[1.0]]}\n";
        let err = parse_dataset(text).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_dataset("{\"nodes\": [[1.0]]}\n{\"nodes\": 3}").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_dataset("{\"nodes\": [[1.0]], \"colour\": 1}").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = parse_dataset("{\"nodes\": [[1.0]]}\n{\"nodes\": [[1.0, 2.0]]}").unwrap_err();
        assert!(matches!(err, Error::Data(_) | Error::Graph(_)), "{err}");
    }

    #[test]
    fn round_trip_preserves_fields() {
        let text = concat!(
            r#"{"nodes":[[0.1,-2.0],[1e-300,3.5],[0.3333333333333333,0.0]],"edges":[[0,1],[1,2],[2,2]],"edge_attrs":[[1.0],[0.7],[-0.2]],"label":[1.0,null],"split":"train"}"#,
            "\n",
            r#"{"nodes":[[5.0,5.0]],"edges":[],"edge_attrs":[],"label":[null,0.0]}"#,
            "\n"
        );
        let d = parse_dataset(text).unwrap();
        let saved = dataset_to_string(&d);
        let back = parse_dataset(&saved).unwrap();
        assert_eq!(back.graphs(), d.graphs());
        assert_eq!(back.splits(), d.splits());
        assert_eq!(dataset_to_string(&back), saved);
    }

    #[test]
    fn run_config_parsing() {
        let cfg = RunConfig::from_toml(
            r#"
            [train]
            mode = "sup-discrete"
            epochs = 5
            [train.augment.first]
            kind = "edge-perturb"
            ratio = 0.1
            [train.augment.second]
            kind = "identity"
            [model]
            hidden = 16
            similarity = "cosine"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.mode, Mode::SupDiscrete);
        assert_eq!(cfg.train.augment.first.kind, AugmentKind::EdgePerturb);
        assert_eq!(cfg.model.hidden, 16);
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(RunConfig::from_toml("[train]\nepochz = 1").is_err());
        assert!(RunConfig::from_toml("[optim]\nlr = 1").is_err());
    }
}
