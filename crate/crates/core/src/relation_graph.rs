//! Per-note bipartite graph between all major codes and the top-K codes,
//! and the edge-aware graph transformer that updates the lower nodes.

use rand::Rng;
use serde::Serialize;

use crate::code_attention::Linear;
use crate::code_space::CodeSpace;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::ontology::{CodeId, EdgeTypeTable, MajorCodeIndex, Ontology};

/// The `K` highest-probability positions of a probability vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionResult {
    /// Positions sorted by descending probability, ties by ascending position.
    pub selected: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Selects `min(k, len)` positions. NaN never occurs here because tape
/// values are checked for finiteness.
pub fn select_top_k<T: Scalar>(probs: &[T], k: usize) -> SelectionResult {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(probs.len()));
    let mut mask = vec![false; probs.len()];
    for &i in &order {
        mask[i] = true;
    }
    SelectionResult {
        selected: order,
        mask,
    }
}

/// Complete bipartite graph: every major code is an upper node, the
/// selected codes are the lower nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationGraph {
    pub uppers: Vec<usize>,
    /// Target-code indices of the lower nodes, in selection order.
    pub lowers: Vec<usize>,
    /// `A×K` row-major edge types.
    pub edge_types: Vec<usize>,
}

impl RelationGraph {
    pub fn num_edges(&self) -> usize {
        self.edge_types.len()
    }

    pub fn edge_type(&self, a: usize, k: usize) -> usize {
        self.edge_types[a * self.lowers.len() + k]
    }

    /// Number of edges per edge type.
    pub fn histogram(&self, bucket_count: usize) -> Vec<usize> {
        let mut h = vec![0; bucket_count];
        for &t in &self.edge_types {
            h[t] += 1;
        }
        h
    }

    /// Graph over `lowers` using the edge types cached in the code space.
    pub fn from_code_space(lowers: Vec<usize>, cs: &CodeSpace) -> Self {
        let a_count = cs.num_majors();
        let mut edge_types = Vec::with_capacity(a_count * lowers.len());
        for a in 0..a_count {
            edge_types.extend(lowers.iter().map(|&i| cs.edge_type(a, i)));
        }
        Self {
            uppers: (0..a_count).collect(),
            lowers,
            edge_types,
        }
    }
}

/// Builds the graph for the selected target codes by querying the ontology
/// for every (major, code) pair.
pub fn build_relation_graph(
    lowers: &[usize],
    targets: &[CodeId],
    majors: &MajorCodeIndex,
    ont: &Ontology,
    table: &EdgeTypeTable,
) -> Result<RelationGraph> {
    let mut edge_types = Vec::with_capacity(majors.len() * lowers.len());
    for major in majors.majors() {
        for &i in lowers {
            let code = targets
                .get(i)
                .ok_or_else(|| Error::UnknownCode(format!("target index {i}")))?;
            edge_types.push(table.edge_type(major, code, ont)?);
        }
    }
    Ok(RelationGraph {
        uppers: (0..majors.len()).collect(),
        lowers: lowers.to_vec(),
        edge_types,
    })
}

/// Floats held by the per-note edge embeddings: `A·K·e_r`.
pub fn edge_memory_proxy(a: usize, k: usize, edge_dim: usize) -> usize {
    a * k * edge_dim
}

#[derive(Clone, Debug, Serialize)]
pub struct GraphStats {
    pub majors: usize,
    pub k: usize,
    pub edges: usize,
    pub histogram: Vec<usize>,
    /// `(K, A·K·e_r)` for each probed `K`.
    pub memory_proxy: Vec<(usize, usize)>,
}

pub fn graph_stats(graph: &RelationGraph, bucket_count: usize, edge_dim: usize, probe_ks: &[usize]) -> GraphStats {
    let a = graph.uppers.len();
    GraphStats {
        majors: a,
        k: graph.lowers.len(),
        edges: graph.num_edges(),
        histogram: graph.histogram(bucket_count),
        memory_proxy: probe_ks
            .iter()
            .map(|&k| (k, edge_memory_proxy(a, k, edge_dim)))
            .collect(),
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert_full(format!("{name}.gain"), 1, width, T::one())?,
            bias: store.insert_full(format!("{name}.bias"), 1, width, T::zero())?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
struct GraphLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    we: ParamId,
    wo: ParamId,
    norm1: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct GraphTransformer {
    pub dim: usize,
    pub edge_embedding: ParamId,
    layers: Vec<GraphLayer>,
}

impl GraphTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        width: usize,
        dim: usize,
        edge_dim: usize,
        ffn_dim: usize,
        layers: usize,
        bucket_count: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let edge_embedding = store.insert_uniform("graph.edge_embedding", bucket_count, edge_dim, 0.5, rng)?;
        let layers = (0..layers)
            .map(|l| {
                let p = format!("graph.layer{l}");
                Ok(GraphLayer {
                    wq: store.insert_glorot(format!("{p}.wq"), width, dim, rng)?,
                    wk: store.insert_glorot(format!("{p}.wk"), width, dim, rng)?,
                    wv: store.insert_glorot(format!("{p}.wv"), width, dim, rng)?,
                    we: store.insert_glorot(format!("{p}.we"), edge_dim, dim, rng)?,
                    wo: store.insert_glorot(format!("{p}.wo"), dim, width, rng)?,
                    norm1: LayerNorm::init(store, &format!("{p}.norm1"), width)?,
                    ffn_in: Linear::init(store, &format!("{p}.ffn_in"), width, ffn_dim, rng)?,
                    ffn_out: Linear::init(store, &format!("{p}.ffn_out"), ffn_dim, width, rng)?,
                    norm2: LayerNorm::init(store, &format!("{p}.norm2"), width)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            edge_embedding,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Updates the `K×e` lower embeddings from the `A×e` upper embeddings.
    /// Returns the updated lowers and the `K×A` attention of each layer.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        graph: &RelationGraph,
        lowers: Var,
        uppers: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (k, a) = (graph.lowers.len(), graph.uppers.len());
        let (lv, uv) = (tape.value(lowers), tape.value(uppers));
        if lv.rows() != k || uv.rows() != a {
            return Err(Error::Shape {
                op: "graph_transformer",
                left: vec![k, a],
                right: vec![lv.rows(), uv.rows()],
            });
        }
        let table = tape.param(self.edge_embedding);
        let inv_sqrt = T::one() / T::count(self.dim).sqrt();
        let mut v = lowers;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let wq = tape.param(layer.wq);
            let wk = tape.param(layer.wk);
            let wv = tape.param(layer.wv);
            let we = tape.param(layer.we);
            let wo = tape.param(layer.wo);
            let q = tape.matmul(v, wq)?;
            let keys = tape.matmul(uppers, wk)?;
            let values = tape.matmul(uppers, wv)?;
            let edges = tape.matmul(table, we)?;
            let scores = tape.edge_scores(q, keys, edges, &graph.edge_types)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.softmax_rows(scores)?;
            let msg = tape.matmul(attn, values)?;
            let msg = tape.matmul(msg, wo)?;
            let res = tape.add(v, msg)?;
            let h = layer.norm1.forward(tape, res)?;
            let f = layer.ffn_in.forward(tape, h)?;
            let f = tape.gelu(f)?;
            let f = layer.ffn_out.forward(tape, f)?;
            let res = tape.add(h, f)?;
            v = layer.norm2.forward(tape, res)?;
            attention.push(attn);
        }
        Ok((v, attention))
    }
}
