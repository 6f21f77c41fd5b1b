//! GIN-style node encoder and mean readout.
//!
//! Each layer computes `h_v <- MLP_k(h_v + AGG_{u in N(v)} (h_u + E_k e_uv))`
//! where `AGG` is a sum (GIN) or a degree-normalized mean (GCN-mean). The MLP
//! is two linear maps with a ReLU between them; a ReLU also separates layers,
//! but none follows the last one. `h^0` is a linear projection of the node
//! attributes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::{glorot_uniform, zeros_row};
use crate::tensor::{Bound, ParamSet, Tape, Var};

pub const PREFIX: &str = "encoder.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    #[default]
    Gin,
    GcnMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub layers: usize,
    pub hidden: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
}

impl EncoderConfig {
    pub fn gin(layers: usize, hidden: usize, node_dim: usize, edge_dim: usize) -> Self {
        Self {
            arch: Arch::Gin,
            layers,
            hidden,
            node_dim,
            edge_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
}

fn layer_name(k: usize, part: &str) -> String {
    format!("{PREFIX}layer{k}.{part}")
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::Config(format!(
                "encoder needs at least one layer and positive width, got layers={} hidden={}",
                config.layers, config.hidden
            )));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let EncoderConfig {
            layers,
            hidden: d,
            node_dim,
            edge_dim,
            ..
        } = self.config;
        let mut p = ParamSet::new();
        p.insert(format!("{PREFIX}input.weight"), glorot_uniform(rng, node_dim, d));
        p.insert(format!("{PREFIX}input.bias"), zeros_row(d));
        for k in 0..layers {
            p.insert(layer_name(k, "edge.weight"), glorot_uniform(rng, edge_dim, d));
            p.insert(layer_name(k, "mlp1.weight"), glorot_uniform(rng, d, d));
            p.insert(layer_name(k, "mlp1.bias"), zeros_row(d));
            p.insert(layer_name(k, "mlp2.weight"), glorot_uniform(rng, d, d));
            p.insert(layer_name(k, "mlp2.bias"), zeros_row(d));
        }
        p
    }

    fn check_dims(&self, g: &Graph) -> Result<()> {
        let want = (self.config.node_dim, self.config.edge_dim);
        let got = (g.node_dim(), g.edge_dim());
        if want != got {
            return Err(Error::shape("encoder input dims (d_v, d_e)", want, got));
        }
        Ok(())
    }

    /// Node representations `H`, one row per node.
    pub fn encode_nodes(&self, tape: &Tape, params: &Bound, g: &Graph) -> Result<Var> {
        self.check_dims(g)?;
        let n = g.num_nodes();
        let src: Vec<usize> = g.edges().iter().map(|e| e.0).collect();
        let dst: Vec<usize> = g.edges().iter().map(|e| e.1).collect();
        let mean_scale: Option<Vec<f64>> = match self.config.arch {
            Arch::Gin => None,
            Arch::GcnMean => Some(
                g.in_degrees()
                    .into_iter()
                    .map(|d| if d == 0 { 0.0 } else { 1.0 / d as f64 })
                    .collect(),
            ),
        };

        let x = tape.constant(g.node_attrs().clone());
        let e = tape.constant(g.edge_attrs().clone());
        let proj = tape.matmul(x, params.get(&format!("{PREFIX}input.weight"))?)?;
        let mut h = tape.add_row(proj, params.get(&format!("{PREFIX}input.bias"))?)?;

        for k in 0..self.config.layers {
            let from = tape.gather_rows(h, &src)?;
            let edge_term = tape.matmul(e, params.get(&layer_name(k, "edge.weight"))?)?;
            let msg = tape.add(from, edge_term)?;
            let mut agg = tape.scatter_add_rows(msg, &dst, n)?;
            if let Some(scale) = &mean_scale {
                agg = tape.scale_rows(agg, scale)?;
            }
            let pre = tape.add(h, agg)?;
            h = self.mlp(tape, params, k, pre)?;
            if k + 1 < self.config.layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn mlp(&self, tape: &Tape, params: &Bound, k: usize, x: Var) -> Result<Var> {
        let a = tape.matmul(x, params.get(&layer_name(k, "mlp1.weight"))?)?;
        let a = tape.relu(tape.add_row(a, params.get(&layer_name(k, "mlp1.bias"))?)?);
        let b = tape.matmul(a, params.get(&layer_name(k, "mlp2.weight"))?)?;
        tape.add_row(b, params.get(&layer_name(k, "mlp2.bias"))?)
    }

    /// Static graph representation: mean of the encoded node rows.
    pub fn encode_graph(&self, tape: &Tape, params: &Bound, g: &Graph) -> Result<Var> {
        let h = self.encode_nodes(tape, params, g)?;
        readout_mean(tape, h)
    }
}

/// Column-wise mean of `H`.
pub fn readout_mean(tape: &Tape, h: Var) -> Result<Var> {
    if tape.shape(h).0 == 0 {
        return Err(Error::Contract("readout of an empty node set".into()));
    }
    tape.mean_rows(h)
}
