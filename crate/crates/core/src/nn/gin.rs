//! GIN encoder with mean readout.
//!
//! Layer `k` computes, for every node `v`,
//! `h_v = MLP_k((1 + eps_k) * h_v + sum_{u in N(v)} h_u)`
//! over undirected neighborhoods, and the graph embedding is the mean of the
//! final node rows over a pooling set (all nodes for whole cells, the anchor
//! nodes for context rings).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, Mlp, MlpTape, Mode, Parameterized};
use crate::error::{Error, Result};
use crate::graph::CellGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    /// Hidden width of each layer's MLP; defaults to `embed_dim`.
    pub hidden_dim: Option<usize>,
    pub dropout: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            embed_dim: 32,
            hidden_dim: None,
            dropout: 0.1,
            bn_momentum: 0.1,
        }
    }
}

/// Encoder input: node ops, undirected neighbor lists, and the nodes to
/// average in the readout.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub ops: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    pub pool: Vec<usize>,
}

impl GraphInput {
    pub fn from_graph(graph: &CellGraph) -> Self {
        Self {
            ops: graph.ops().to_vec(),
            neighbors: graph.neighbor_lists(),
            pool: (0..graph.num_nodes()).collect(),
        }
    }
}

/// Disjoint union of several inputs, encoded in one pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    features: Matrix,
    neighbors: Vec<Vec<usize>>,
    pools: Vec<Vec<usize>>,
    offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(inputs: &[GraphInput], vocab_size: usize) -> Result<Self> {
        let total: usize = inputs.iter().map(|g| g.ops.len()).sum();
        let mut features = Matrix::zeros(total, vocab_size);
        let mut neighbors = Vec::with_capacity(total);
        let mut pools = Vec::with_capacity(inputs.len());
        let mut offsets = Vec::with_capacity(inputs.len() + 1);
        let mut base = 0;
        for input in inputs {
            let n = input.ops.len();
            if input.neighbors.len() != n {
                return Err(Error::Dimension("neighbor lists do not match node count".into()));
            }
            if input.pool.is_empty() || input.pool.iter().any(|&p| p >= n) {
                return Err(Error::Dimension("readout pool is empty or out of range".into()));
            }
            offsets.push(base);
            for (v, &op) in input.ops.iter().enumerate() {
                if op >= vocab_size {
                    return Err(Error::UnknownOp {
                        node: v,
                        op,
                        vocab: vocab_size,
                    });
                }
                features.set(base + v, op, 1.0);
                if input.neighbors[v].iter().any(|&u| u >= n) {
                    return Err(Error::NodeOutOfRange { index: v, len: n });
                }
                neighbors.push(input.neighbors[v].iter().map(|&u| base + u).collect());
            }
            pools.push(input.pool.iter().map(|&p| base + p).collect());
            base += n;
        }
        offsets.push(base);
        Ok(Self {
            features,
            neighbors,
            pools,
            offsets,
        })
    }

    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a CellGraph>, vocab_size: usize) -> Result<Self> {
        let inputs: Vec<GraphInput> = graphs.into_iter().map(GraphInput::from_graph).collect();
        Self::new(&inputs, vocab_size)
    }

    pub fn num_graphs(&self) -> usize {
        self.pools.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Node range of graph `g` within the batch.
    pub fn node_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub epsilon: f64,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub layers: Vec<GinLayer>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// One row per graph in the batch.
    pub graphs: Matrix,
    /// One row per node in the batch.
    pub nodes: Matrix,
}

#[derive(Debug, Clone)]
pub struct EncoderTape {
    layer_inputs: Vec<Matrix>,
    mlps: Vec<MlpTape>,
}

impl EncoderTape {
    /// ReLU pattern of every layer, in layer order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.mlps.iter().flat_map(MlpTape::relu_pattern).collect()
    }
}

impl Encoder {
    pub fn new(input_dim: usize, cfg: &EncoderConfig, rng: &mut dyn RngCore) -> Result<Self> {
        if cfg.layers == 0 || cfg.embed_dim == 0 || input_dim == 0 {
            return Err(Error::Dimension(
                "encoder needs at least one layer and positive dims".into(),
            ));
        }
        let hidden = cfg.hidden_dim.unwrap_or(cfg.embed_dim);
        let mut layers = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let in_dim = if k == 0 { input_dim } else { cfg.embed_dim };
            layers.push(GinLayer {
                epsilon: 0.0,
                mlp: Mlp::new(
                    &[in_dim, hidden, cfg.embed_dim],
                    true,
                    cfg.dropout,
                    cfg.bn_momentum,
                    rng,
                )?,
            });
        }
        Ok(Self {
            input_dim,
            embed_dim: cfg.embed_dim,
            layers,
        })
    }

    pub fn forward(
        &self,
        batch: &GraphBatch,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(EncoderOutput, EncoderTape)> {
        if batch.features.cols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "encoder expects {} feature columns, batch has {}",
                self.input_dim,
                batch.features.cols()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut mlps = Vec::with_capacity(self.layers.len());
        let mut h = batch.features.clone();
        for layer in &self.layers {
            let agg = aggregate(&h, &batch.neighbors, layer.epsilon);
            let (out, tape) = layer.mlp.forward(&agg, mode, rng)?;
            layer_inputs.push(h);
            mlps.push(tape);
            h = out;
        }
        let graphs = readout(&h, &batch.pools);
        Ok((EncoderOutput { graphs, nodes: h }, EncoderTape { layer_inputs, mlps }))
    }

    /// Inference-only forward pass; `mode` must not be [`Mode::Train`].
    pub fn infer(&self, batch: &GraphBatch, mode: Mode) -> Result<EncoderOutput> {
        if mode == Mode::Train {
            return Err(Error::Dimension("inference requires eval or partial mode".into()));
        }
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(batch, mode, &mut unused)?.0)
    }

    /// Gradients for all encoder tensors and for the input features, given
    /// upstream gradients on the graph embeddings and optionally on the
    /// node embeddings.
    pub fn backward(
        &self,
        batch: &GraphBatch,
        tape: &EncoderTape,
        d_graphs: &Matrix,
        d_nodes: Option<&Matrix>,
    ) -> Result<(Gradients, Matrix)> {
        if d_graphs.shape() != (batch.num_graphs(), self.embed_dim) {
            return Err(Error::Dimension(format!(
                "graph gradient {:?} does not match ({}, {})",
                d_graphs.shape(),
                batch.num_graphs(),
                self.embed_dim
            )));
        }
        if tape.mlps.len() != self.layers.len() {
            return Err(Error::Dimension("tape does not match encoder depth".into()));
        }
        let mut g = Matrix::zeros(batch.num_nodes(), self.embed_dim);
        for (gi, pool) in batch.pools.iter().enumerate() {
            let w = 1.0 / pool.len() as f64;
            for &v in pool {
                for (dst, &src) in g.row_mut(v).iter_mut().zip(d_graphs.row(gi)) {
                    *dst += w * src;
                }
            }
        }
        if let Some(dn) = d_nodes {
            g.add_assign(dn)?;
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (mlp_grads, d_agg) = layer.mlp.backward(&tape.mlps[k], &g)?;
            let h_in = &tape.layer_inputs[k];
            let d_eps: f64 = h_in.data().iter().zip(d_agg.data()).map(|(a, b)| a * b).sum();
            let d_in = aggregate_transpose(&d_agg, &batch.neighbors, layer.epsilon);
            let mut tensors = vec![vec![d_eps]];
            tensors.extend(mlp_grads.0);
            per_layer.push(tensors);
            g = d_in;
        }
        per_layer.reverse();
        Ok((Gradients(per_layer.into_iter().flatten().collect()), g))
    }

    pub fn update_running_stats(&mut self, tape: &EncoderTape) {
        for (layer, t) in self.layers.iter_mut().zip(&tape.mlps) {
            layer.mlp.update_running_stats(t);
        }
    }

    /// Graph embedding and per-node embeddings of a single cell.
    pub fn encode_graph(&self, graph: &CellGraph, mode: Mode) -> Result<(Vec<f64>, Matrix)> {
        let batch = GraphBatch::from_graphs([graph], self.input_dim)?;
        let out = self.infer(&batch, mode)?;
        Ok((out.graphs.row(0).to_vec(), out.nodes))
    }
}

/// `(1 + eps) * h_v + sum of neighbor rows`.
fn aggregate(h: &Matrix, neighbors: &[Vec<usize>], eps: f64) -> Matrix {
    let mut out = h.clone();
    out.scale(1.0 + eps);
    for (v, nbrs) in neighbors.iter().enumerate() {
        for &u in nbrs {
            for j in 0..h.cols() {
                let x = out.get(v, j) + h.get(u, j);
                out.set(v, j, x);
            }
        }
    }
    out
}

/// Adjoint of [`aggregate`]: scatters each row back to its neighbors.
fn aggregate_transpose(d: &Matrix, neighbors: &[Vec<usize>], eps: f64) -> Matrix {
    let mut out = d.clone();
    out.scale(1.0 + eps);
    for (v, nbrs) in neighbors.iter().enumerate() {
        for &u in nbrs {
            for j in 0..d.cols() {
                let x = out.get(u, j) + d.get(v, j);
                out.set(u, j, x);
            }
        }
    }
    out
}

fn readout(nodes: &Matrix, pools: &[Vec<usize>]) -> Matrix {
    let mut out = Matrix::zeros(pools.len(), nodes.cols());
    for (g, pool) in pools.iter().enumerate() {
        let w = 1.0 / pool.len() as f64;
        for &v in pool {
            for (dst, &src) in out.row_mut(g).iter_mut().zip(nodes.row(v)) {
                *dst += src;
            }
        }
        for x in out.row_mut(g) {
            *x *= w;
        }
    }
    out
}

impl Parameterized for Encoder {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(std::slice::from_ref(&layer.epsilon));
            out.extend(layer.mlp.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(std::slice::from_mut(&mut layer.epsilon));
            out.extend(layer.mlp.tensors_mut());
        }
        out
    }
}
