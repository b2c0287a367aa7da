//! Context-aware self-supervised pretraining.
//!
//! For a central node `v`, the main encoder embeds the `K`-hop neighborhood
//! and the auxiliary encoder embeds the ring of nodes at hop distance
//! `K..=R`, read out over the anchors at distance exactly `K`. Matching
//! (neighborhood, ring) pairs from the same graph are pushed to a high inner
//! product, pairs across graphs to a low one.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CellGraph;
use crate::nn::{Adam, AdamState, Encoder, EncoderConfig, GraphBatch, GraphInput, Matrix, Mode, Parameterized};
use crate::predictor::{sigmoid, softplus};

/// Undirected hop distance from `v` to every node, `None` if unreachable.
pub fn hop_distances(graph: &CellGraph, v: usize) -> Result<Vec<Option<usize>>> {
    let n = graph.num_nodes();
    if v >= n {
        return Err(Error::NodeOutOfRange { index: v, len: n });
    }
    let nbrs = graph.neighbor_lists();
    let mut dist = vec![None; n];
    dist[v] = Some(0);
    let mut queue = VecDeque::from([v]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].expect("queued nodes have a distance");
        for &w in &nbrs[u] {
            if dist[w].is_none() {
                dist[w] = Some(d + 1);
                queue.push_back(w);
            }
        }
    }
    Ok(dist)
}

/// Induced subgraph of a parent cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph<'a> {
    pub parent: &'a CellGraph,
    /// Sorted parent node indices.
    pub nodes: Vec<usize>,
    /// Sorted subset of `nodes` used for the readout; empty means all.
    pub anchors: Vec<usize>,
}

impl Subgraph<'_> {
    /// Parent edges with both ends inside, as parent indices.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent
            .edges()
            .into_iter()
            .filter(|(u, v)| self.nodes.binary_search(u).is_ok() && self.nodes.binary_search(v).is_ok())
            .collect()
    }

    /// Encoder input with local node numbering.
    pub fn to_input(&self) -> GraphInput {
        let local = |p: usize| self.nodes.binary_search(&p).expect("node belongs to subgraph");
        let mut neighbors = vec![Vec::new(); self.nodes.len()];
        for (u, v) in self.edges() {
            let (a, b) = (local(u), local(v));
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let pool = if self.anchors.is_empty() {
            (0..self.nodes.len()).collect()
        } else {
            self.anchors.iter().map(|&a| local(a)).collect()
        };
        GraphInput {
            ops: self.nodes.iter().map(|&p| self.parent.ops()[p]).collect(),
            neighbors,
            pool,
        }
    }
}

/// Nodes within `k` undirected hops of `v`.
pub fn extract_k_hop(graph: &CellGraph, v: usize, k: usize) -> Result<Subgraph<'_>> {
    if k == 0 {
        return Err(Error::Config("hop count K must be at least 1".into()));
    }
    let dist = hop_distances(graph, v)?;
    Ok(Subgraph {
        parent: graph,
        nodes: (0..dist.len()).filter(|&u| dist[u].is_some_and(|d| d <= k)).collect(),
        anchors: Vec::new(),
    })
}

/// Nodes at hop distance in `k..=r` from `v`, anchored at distance `k`.
/// `None` when no node lies that far.
pub fn extract_context_ring(graph: &CellGraph, v: usize, k: usize, r: usize) -> Result<Option<Subgraph<'_>>> {
    if k == 0 || k >= r {
        return Err(Error::Config(format!("need 1 <= K < R, got K={k} R={r}")));
    }
    let dist = hop_distances(graph, v)?;
    let nodes: Vec<usize> = (0..dist.len())
        .filter(|&u| dist[u].is_some_and(|d| (k..=r).contains(&d)))
        .collect();
    let anchors: Vec<usize> = nodes.iter().copied().filter(|&u| dist[u] == Some(k)).collect();
    if anchors.is_empty() {
        return Ok(None);
    }
    Ok(Some(Subgraph {
        parent: graph,
        nodes,
        anchors,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub k: usize,
    pub r: usize,
    pub negative_ratio: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Set by the caller, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            k: 1,
            r: 2,
            negative_ratio: 1,
            batch_size: 64,
            epochs: 20,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.k == 0 || self.k >= self.r {
            return Err(Error::Config(format!(
                "pretrain needs 1 <= k < r, got k={} r={}",
                self.k, self.r
            )));
        }
        if self.negative_ratio == 0 {
            return Err(Error::Config("pretrain negative_ratio must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pretrain batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("pretrain learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Indices into the central and context embedding rows of a [`PairBatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextPair {
    pub central: usize,
    pub context: usize,
    pub label: u8,
}

/// Encoder inputs for the usable graphs of a batch and the pairs over them.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub central: GraphBatch,
    pub context: GraphBatch,
    pub pairs: Vec<ContextPair>,
}

/// One central node per graph, one positive and `negative_ratio` negatives
/// per usable graph. `None` when fewer than two graphs have a context ring.
pub fn build_batch_pairs(
    graphs: &[&CellGraph],
    cfg: &PretrainConfig,
    vocab_size: usize,
    rng: &mut dyn RngCore,
) -> Result<Option<PairBatch>> {
    let mut central = Vec::new();
    let mut context = Vec::new();
    for g in graphs {
        let mut candidates = Vec::new();
        for v in 0..g.num_nodes() {
            if let Some(ring) = extract_context_ring(g, v, cfg.k, cfg.r)? {
                candidates.push((v, ring));
            }
        }
        if candidates.is_empty() {
            continue;
        }
        let (v, ring) = candidates.swap_remove(rng.random_range(0..candidates.len()));
        central.push(extract_k_hop(g, v, cfg.k)?.to_input());
        context.push(ring.to_input());
    }
    let m = central.len();
    if m < 2 {
        return Ok(None);
    }
    let mut pairs = Vec::with_capacity(m * (1 + cfg.negative_ratio));
    for i in 0..m {
        pairs.push(ContextPair {
            central: i,
            context: i,
            label: 1,
        });
        for _ in 0..cfg.negative_ratio {
            let mut j = rng.random_range(0..m - 1);
            if j >= i {
                j += 1;
            }
            pairs.push(ContextPair {
                central: i,
                context: j,
                label: 0,
            });
        }
    }
    Ok(Some(PairBatch {
        central: GraphBatch::new(&central, vocab_size)?,
        context: GraphBatch::new(&context, vocab_size)?,
        pairs,
    }))
}

/// Mean binary cross-entropy of `sigmoid(h . c)` against the pair labels,
/// with gradients for both embedding matrices.
#[derive(Debug, Clone)]
pub struct ContextLoss {
    pub loss: f64,
    pub d_central: Matrix,
    pub d_context: Matrix,
    /// Mean `sigmoid(h . c)` over positive and negative pairs.
    pub positive_sim: f64,
    pub negative_sim: f64,
}

pub fn context_loss(central: &Matrix, context: &Matrix, pairs: &[ContextPair]) -> Result<ContextLoss> {
    if pairs.is_empty() {
        return Err(Error::Empty("context pairs"));
    }
    if central.cols() != context.cols() {
        return Err(Error::Dimension(
            "central and context embeddings differ in width".into(),
        ));
    }
    if !central.is_finite() || !context.is_finite() {
        return Err(Error::NonFinite("context embeddings".into()));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut d_central = Matrix::zeros(central.rows(), central.cols());
    let mut d_context = Matrix::zeros(context.rows(), context.cols());
    let mut loss = 0.0;
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for p in pairs {
        if p.central >= central.rows() || p.context >= context.rows() {
            return Err(Error::Dimension("pair index outside the embedding rows".into()));
        }
        let (h, c) = (central.row(p.central), context.row(p.context));
        let z: f64 = h.iter().zip(c).map(|(a, b)| a * b).sum();
        let y = f64::from(p.label);
        loss += softplus(z) - y * z;
        let s = sigmoid(z);
        if p.label == 1 {
            pos += s;
            n_pos += 1;
        } else {
            neg += s;
            n_neg += 1;
        }
        let dz = (s - y) * inv;
        for (d, &x) in d_central.row_mut(p.central).iter_mut().zip(c) {
            *d += dz * x;
        }
        for (d, &x) in d_context.row_mut(p.context).iter_mut().zip(h) {
            *d += dz * x;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(ContextLoss {
        loss: loss * inv,
        d_central,
        d_context,
        positive_sim: mean(pos, n_pos),
        negative_sim: mean(neg, n_neg),
    })
}

/// Main encoder (kept for prediction) and auxiliary context encoder
/// (discarded after pretraining).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextModel {
    pub main: Encoder,
    pub aux: Encoder,
}

impl ContextModel {
    pub fn new(vocab_size: usize, cfg: &EncoderConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let main = Encoder::new(vocab_size, cfg, rng)?;
        let aux = Encoder::new(vocab_size, cfg, rng)?;
        Ok(Self { main, aux })
    }

    /// Context embedding of a ring: mean of the auxiliary encoder's anchor rows.
    pub fn embed_context(&self, ring: &Subgraph<'_>, mode: Mode) -> Result<Vec<f64>> {
        if ring.anchors.is_empty() {
            return Err(Error::Empty("context ring anchors"));
        }
        let batch = GraphBatch::new(&[ring.to_input()], self.aux.input_dim)?;
        Ok(self.aux.infer(&batch, mode)?.graphs.row(0).to_vec())
    }

    /// Loss, gradients and similarity statistics of one pair batch.
    pub fn loss_and_gradients(
        &self,
        batch: &PairBatch,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(ContextLoss, crate::nn::Gradients, [crate::nn::EncoderTape; 2])> {
        let (h, main_tape) = self.main.forward(&batch.central, mode, rng)?;
        let (c, aux_tape) = self.aux.forward(&batch.context, mode, rng)?;
        let cl = context_loss(&h.graphs, &c.graphs, &batch.pairs)?;
        let (g_main, _) = self.main.backward(&batch.central, &main_tape, &cl.d_central, None)?;
        let (g_aux, _) = self.aux.backward(&batch.context, &aux_tape, &cl.d_context, None)?;
        Ok((cl, g_main.concat(g_aux), [main_tape, aux_tape]))
    }
}

impl Parameterized for ContextModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.main.tensors();
        t.extend(self.aux.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.main.tensors_mut();
        t.extend(self.aux.tensors_mut());
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub positive_sim: f64,
    pub negative_sim: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: ContextModel,
    pub optimizer: AdamState,
    pub history: Vec<EpochStats>,
}

/// Trains both encoders jointly on unlabeled cells.
pub fn pretrain(
    graphs: &[CellGraph],
    vocab_size: usize,
    encoder_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    if graphs.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ContextModel::new(vocab_size, encoder_cfg, &mut rng)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&CellGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let Some(batch) = build_batch_pairs(&refs, cfg, vocab_size, &mut rng)? else {
                continue;
            };
            let (cl, grads, tapes) = model.loss_and_gradients(&batch, Mode::Train, &mut rng)?;
            if !cl.loss.is_finite() {
                return Err(Error::Diverged(format!("context loss at epoch {epoch}")));
            }
            opt.step(&mut model, &grads).map_err(|e| match e {
                Error::NonFinite(w) => Error::Diverged(format!("non-finite {w} at epoch {epoch}")),
                other => other,
            })?;
            model.main.update_running_stats(&tapes[0]);
            model.aux.update_running_stats(&tapes[1]);
            acc[0] += cl.loss;
            acc[1] += cl.positive_sim;
            acc[2] += cl.negative_sim;
            batches += 1;
        }
        let b = batches as f64;
        history.push(EpochStats {
            epoch,
            loss: acc[0] / b,
            positive_sim: acc[1] / b,
            negative_sim: acc[2] / b,
        });
    }
    Ok(PretrainOutput {
        model,
        optimizer: opt.state,
        history,
    })
}

/// Mean `sigmoid(h . c)` of positive and negative pairs on `graphs`, with
/// both encoders in eval mode.
pub fn context_agreement(
    model: &ContextModel,
    graphs: &[CellGraph],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&CellGraph> = graphs.iter().collect();
    let batch = build_batch_pairs(&refs, cfg, model.main.input_dim, &mut rng)?
        .ok_or(Error::Empty("graphs with a context ring"))?;
    let (h, _) = model.main.forward(&batch.central, Mode::Eval, &mut rng)?;
    let (c, _) = model.aux.forward(&batch.context, Mode::Eval, &mut rng)?;
    let cl = context_loss(&h.graphs, &c.graphs, &batch.pairs)?;
    Ok((cl.positive_sim, cl.negative_sim))
}
