//! Neural graph matching head.
//!
//! Given node representations `H1`, `H2` of two graphs, one matching round
//! computes
//!
//! * intra-graph messages `m_t = sum_{s in N(t)} (h_s + E e_st)`,
//! * cross-graph attention `A12[s, t] = softmax_t sim(h1_s, h2_t)` (normalized
//!   over targets for each source node) and messages `mu2_t = sum_s A12[s, t] h1_s`,
//!   and symmetrically `A21` and `mu1`,
//! * contextual node features `z_t = MLP([h_t ; m_t ; mu_t])`,
//! * the adaptive graph representation `z_G = mean_t z_t`.
//!
//! `z_G` depends on the partner graph, so one graph gets a different
//! representation in every pair it takes part in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch};
use crate::init::{glorot_uniform, zeros_row};
use crate::tensor::{Bound, ParamSet, Tape, Tensor, Var};

pub const PREFIX: &str = "matcher.";

const INTRA_EDGE: &str = "matcher.intra.edge.weight";
const MLP1_W: &str = "matcher.update.mlp1.weight";
const MLP1_B: &str = "matcher.update.mlp1.bias";
const MLP2_W: &str = "matcher.update.mlp2.weight";
const MLP2_B: &str = "matcher.update.mlp2.bias";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    /// Similarity of two equally shaped vectors on the tape.
    pub fn apply(self, tape: &Tape, a: Var, b: Var) -> Result<Var> {
        match self {
            Similarity::Dot => tape.dot(a, b),
            Similarity::Cosine => tape.cosine(a, b),
        }
    }

    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        match self {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherConfig {
    pub hidden: usize,
    pub edge_dim: usize,
    #[serde(default)]
    pub similarity: Similarity,
    /// Additionally normalize attention over the source nodes that reach
    /// each target when aggregating inter-graph messages.
    #[serde(default)]
    pub target_normalize: bool,
}

impl MatcherConfig {
    pub fn new(hidden: usize, edge_dim: usize) -> Self {
        Self {
            hidden,
            edge_dim,
            similarity: Similarity::Dot,
            target_normalize: false,
        }
    }
}

/// Output of one matching round between two graphs.
#[derive(Clone, Copy, Debug)]
pub struct MatchedPair {
    pub z1: Var,
    pub z2: Var,
    pub zg1: Var,
    pub zg2: Var,
    pub a12: Var,
    pub a21: Var,
    pub sim_op_count: u64,
}

/// One graph's encoder output and the part of the update that does not
/// depend on the partner graph.
#[derive(Clone, Copy, Debug)]
pub struct PreparedSide {
    pub h: Var,
    partner_free: Var,
    pub num_nodes: usize,
}

#[derive(Clone, Debug)]
pub struct Matcher {
    config: MatcherConfig,
}

/// Row-stochastic attention from every source node over the target nodes.
pub fn inter_attention(tape: &Tape, h_src: Var, h_tgt: Var, sim: Similarity) -> Result<Var> {
    let (ns, ds) = tape.shape(h_src);
    let (nt, dt) = tape.shape(h_tgt);
    if ns == 0 || nt == 0 {
        return Err(Error::Contract("attention over an empty node set".into()));
    }
    if ds != dt {
        return Err(Error::shape("inter_attention", (ns, ds), (nt, dt)));
    }
    let scores = match sim {
        Similarity::Dot => tape.matmul_nt(h_src, h_tgt)?,
        Similarity::Cosine => {
            let degenerate = |_| Error::Contract("degenerate cosine input".into());
            let s = tape.normalize_rows(h_src).map_err(degenerate)?;
            let t = tape.normalize_rows(h_tgt).map_err(degenerate)?;
            tape.matmul_nt(s, t)?
        }
    };
    tape.record_similarity_ops(ns, nt);
    Ok(tape.row_softmax(scores))
}

/// Message arriving at each target: `sum_s A[s, t] * h_src[s]`.
pub fn inter_messages(tape: &Tape, h_src: Var, attention: Var, target_normalize: bool) -> Result<Var> {
    let (ns, _) = tape.shape(h_src);
    let (ar, _) = tape.shape(attention);
    if ar != ns {
        return Err(Error::shape("inter_messages", tape.shape(attention), tape.shape(h_src)));
    }
    let a = if target_normalize {
        tape.normalize_cols(attention)?
    } else {
        attention
    };
    tape.matmul_tn(a, h_src)
}

impl Matcher {
    pub fn new(config: MatcherConfig) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Config("matcher width must be positive".into()));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    pub fn similarity(&self) -> Similarity {
        self.config.similarity
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let d = self.config.hidden;
        let mut p = ParamSet::new();
        p.insert(INTRA_EDGE, glorot_uniform(rng, self.config.edge_dim, d));
        p.insert(MLP1_W, glorot_uniform(rng, 3 * d, d));
        p.insert(MLP1_B, zeros_row(d));
        p.insert(MLP2_W, glorot_uniform(rng, d, d));
        p.insert(MLP2_B, zeros_row(d));
        p
    }

    /// `sum_{s in N(t)} (h_s + E e_st)` for every node `t`.
    pub fn intra_messages(&self, tape: &Tape, params: &Bound, g: &Graph, h: Var) -> Result<Var> {
        let (n, d) = tape.shape(h);
        if n != g.num_nodes() || d != self.config.hidden {
            return Err(Error::shape("intra_messages", (g.num_nodes(), self.config.hidden), (n, d)));
        }
        let src: Vec<usize> = g.edges().iter().map(|e| e.0).collect();
        let dst: Vec<usize> = g.edges().iter().map(|e| e.1).collect();
        let from = tape.gather_rows(h, &src)?;
        let e = tape.constant(g.edge_attrs().clone());
        let edge_term = tape.matmul(e, params.get(INTRA_EDGE)?)?;
        let msg = tape.add(from, edge_term)?;
        tape.scatter_add_rows(msg, &dst, n)
    }

    fn mlp1_blocks(&self, tape: &Tape, params: &Bound) -> Result<[Var; 3]> {
        let w = params.get(MLP1_W)?;
        let d = self.config.hidden;
        Ok([
            tape.slice_rows(w, 0, d)?,
            tape.slice_rows(w, d, d)?,
            tape.slice_rows(w, 2 * d, d)?,
        ])
    }

    fn mlp2(&self, tape: &Tape, params: &Bound, hidden: Var) -> Result<Var> {
        let out = tape.matmul(tape.relu(hidden), params.get(MLP2_W)?)?;
        tape.add_row(out, params.get(MLP2_B)?)
    }

    /// `Z = MLP([H ; M_intra ; M_inter])`, one row per node.
    pub fn update_nodes(&self, tape: &Tape, params: &Bound, h: Var, m_intra: Var, m_inter: Var) -> Result<Var> {
        let s = tape.shape(h);
        for other in [m_intra, m_inter] {
            if tape.shape(other) != s {
                return Err(Error::shape("update_nodes", s, tape.shape(other)));
            }
        }
        let x = tape.concat_cols(&[h, m_intra, m_inter])?;
        let hidden = tape.add_row(tape.matmul(x, params.get(MLP1_W)?)?, params.get(MLP1_B)?)?;
        self.mlp2(tape, params, hidden)
    }

    /// Precomputes `h W_self + m_intra W_intra + b1` for one graph.
    pub fn prepare(&self, tape: &Tape, params: &Bound, g: &Graph, h: Var) -> Result<PreparedSide> {
        let m_intra = self.intra_messages(tape, params, g, h)?;
        let partner_free = self.partner_free(tape, params, h, m_intra)?;
        Ok(PreparedSide {
            h,
            partner_free,
            num_nodes: g.num_nodes(),
        })
    }

    fn partner_free(&self, tape: &Tape, params: &Bound, h: Var, m_intra: Var) -> Result<Var> {
        let [w_self, w_intra, _] = self.mlp1_blocks(tape, params)?;
        let a = tape.matmul(h, w_self)?;
        let b = tape.matmul(m_intra, w_intra)?;
        tape.add_row(tape.add(a, b)?, params.get(MLP1_B)?)
    }

    /// Encodes every graph of `batch` in one pass and prepares each member.
    pub fn prepare_batch(
        &self,
        tape: &Tape,
        params: &Bound,
        encoder: &Encoder,
        batch: &GraphBatch,
    ) -> Result<Vec<PreparedSide>> {
        let union = batch.union();
        let h = encoder.encode_nodes(tape, params, union)?;
        let m_intra = self.intra_messages(tape, params, union, h)?;
        let partner_free = self.partner_free(tape, params, h, m_intra)?;
        (0..batch.len())
            .map(|i| {
                let (start, len) = batch.span(i);
                Ok(PreparedSide {
                    h: tape.slice_rows(h, start, len)?,
                    partner_free: tape.slice_rows(partner_free, start, len)?,
                    num_nodes: len,
                })
            })
            .collect()
    }

    /// One matching round between two prepared graphs.
    pub fn match_prepared(
        &self,
        tape: &Tape,
        params: &Bound,
        first: &PreparedSide,
        second: &PreparedSide,
    ) -> Result<MatchedPair> {
        let before = tape.sim_ops();
        let sim = self.config.similarity;
        let a12 = inter_attention(tape, first.h, second.h, sim)?;
        let a21 = inter_attention(tape, second.h, first.h, sim)?;
        let mu2 = inter_messages(tape, first.h, a12, self.config.target_normalize)?;
        let mu1 = inter_messages(tape, second.h, a21, self.config.target_normalize)?;
        let [_, _, w_inter] = self.mlp1_blocks(tape, params)?;
        let finish = |side: &PreparedSide, mu: Var| -> Result<Var> {
            let hidden = tape.add(side.partner_free, tape.matmul(mu, w_inter)?)?;
            self.mlp2(tape, params, hidden)
        };
        let z1 = finish(first, mu1)?;
        let z2 = finish(second, mu2)?;
        tape.hold_similarity_entries(first.num_nodes * second.num_nodes);
        Ok(MatchedPair {
            z1,
            z2,
            zg1: tape.mean_rows(z1)?,
            zg2: tape.mean_rows(z2)?,
            a12,
            a21,
            sim_op_count: tape.sim_ops() - before,
        })
    }

    /// Similarity of the two adaptive graph representations of a pair.
    pub fn pair_score(&self, tape: &Tape, pair: &MatchedPair) -> Result<Var> {
        self.config.similarity.apply(tape, pair.zg1, pair.zg2)
    }
}

/// Encodes both graphs and runs one matching round.
pub fn match_pair(
    tape: &Tape,
    params: &Bound,
    encoder: &Encoder,
    matcher: &Matcher,
    g1: &Graph,
    g2: &Graph,
) -> Result<MatchedPair> {
    let h1 = encoder.encode_nodes(tape, params, g1)?;
    let h2 = encoder.encode_nodes(tape, params, g2)?;
    let p1 = matcher.prepare(tape, params, g1, h1)?;
    let p2 = matcher.prepare(tape, params, g2, h2)?;
    matcher.match_prepared(tape, params, &p1, &p2)
}

/// Values of a matched pair, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedValues {
    pub z1: Tensor,
    pub z2: Tensor,
    pub zg1: Tensor,
    pub zg2: Tensor,
    pub a12: Tensor,
    pub a21: Tensor,
    pub sim_op_count: u64,
}

impl MatchedPair {
    pub fn values(&self, tape: &Tape) -> MatchedValues {
        MatchedValues {
            z1: tape.value(self.z1),
            z2: tape.value(self.z2),
            zg1: tape.value(self.zg1),
            zg2: tape.value(self.zg2),
            a12: tape.value(self.a12),
            a21: tape.value(self.a21),
            sim_op_count: self.sim_op_count,
        }
    }
}
