//! Cell graphs: the labeled DAG encoding of a neural-architecture cell.
//!
//! A cell is stored as an operation list plus a dense adjacency matrix, where
//! `adj[i][j]` means a directed edge `i -> j`. Operation labels index into an
//! [`OpVocabulary`] whose first two entries are always the `INPUT` and `OUTPUT`
//! markers. Cells whose operations live on edges (NB201/DARTS style) are
//! described by [`EdgeOpCell`] and converted with [`edge_ops_to_node_ops`].

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the input marker in every vocabulary.
pub const INPUT: usize = 0;
/// Index of the output marker in every vocabulary.
pub const OUTPUT: usize = 1;

/// Ordered set of operation labels. Index 0 is `input`, index 1 is `output`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpVocabulary {
    names: Vec<String>,
}

impl OpVocabulary {
    /// Builds a vocabulary from the operation labels, prepending the reserved
    /// `input`/`output` markers.
    pub fn new<S: AsRef<str>>(ops: &[S]) -> Result<Self> {
        let mut names = vec!["input".to_string(), "output".to_string()];
        names.extend(ops.iter().map(|s| s.as_ref().to_string()));
        Self::from_names(names)
    }

    /// Builds a vocabulary from a complete label list that already starts with
    /// the two reserved markers.
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() < 3 {
            return Err(Error::InvalidGraph(format!(
                "vocabulary needs at least 3 labels, got {}",
                names.len()
            )));
        }
        if names[INPUT] != "input" || names[OUTPUT] != "output" {
            return Err(Error::InvalidGraph(
                "vocabulary must start with `input`, `output`".into(),
            ));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidGraph("vocabulary labels must be unique".into()));
        }
        Ok(Self { names })
    }

    /// The NAS-Bench-101 style vocabulary used by the synthetic benchmark:
    /// `input, output, conv3x3, conv1x1, maxpool3x3`.
    pub fn nasbench() -> Self {
        Self::new(&["conv3x3", "conv1x1", "maxpool3x3"]).expect("static vocabulary")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Indices of the operations that may appear on interior nodes.
    pub fn interior_ops(&self) -> std::ops::Range<usize> {
        2..self.names.len()
    }
}

/// A cell as an operation list and a dense adjacency matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellGraph {
    ops: Vec<usize>,
    adj: Vec<Vec<bool>>,
}

impl CellGraph {
    /// Creates a graph after checking shapes only. Use [`validate`] for the
    /// full cell contract.
    pub fn new(ops: Vec<usize>, adj: Vec<Vec<bool>>) -> Result<Self> {
        let n = ops.len();
        if adj.len() != n || adj.iter().any(|row| row.len() != n) {
            return Err(Error::Dimension(format!("adjacency must be {n}x{n} to match {n} ops")));
        }
        Ok(Self { ops, adj })
    }

    /// Creates a graph from a directed edge list.
    pub fn from_edges(ops: Vec<usize>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = ops.len();
        let mut adj = vec![vec![false; n]; n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::NodeOutOfRange {
                    index: u.max(v),
                    len: n,
                });
            }
            adj[u][v] = true;
        }
        Ok(Self { ops, adj })
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    pub fn ops(&self) -> &[usize] {
        &self.ops
    }

    pub fn adj(&self) -> &[Vec<bool>] {
        &self.adj
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u][v]
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().flatten().filter(|&&b| b).count()
    }

    /// Directed edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for u in 0..n {
            for v in 0..n {
                if self.adj[u][v] {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn successors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[v].iter().enumerate().filter_map(|(j, &e)| e.then_some(j))
    }

    pub fn predecessors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj
            .iter()
            .enumerate()
            .filter_map(move |(i, row)| row[v].then_some(i))
    }

    pub(crate) fn set_op(&mut self, v: usize, op: usize) {
        self.ops[v] = op;
    }

    pub(crate) fn toggle_edge(&mut self, u: usize, v: usize) {
        self.adj[u][v] = !self.adj[u][v];
    }

    /// Undirected neighbor lists for every node, sorted ascending.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        (0..self.num_nodes())
            .map(|v| {
                (0..self.num_nodes())
                    .filter(|&u| u != v && (self.adj[u][v] || self.adj[v][u]))
                    .collect()
            })
            .collect()
    }

    /// Number of edges on the longest directed path from the input node to the
    /// output node. `None` when the graph has no topological order or no path.
    pub fn longest_path(&self) -> Option<usize> {
        let order = topological_order(self)?;
        let src = self.ops.iter().position(|&o| o == INPUT)?;
        let dst = self.ops.iter().position(|&o| o == OUTPUT)?;
        let mut dist: Vec<Option<usize>> = vec![None; self.num_nodes()];
        dist[src] = Some(0);
        for &u in &order {
            let Some(du) = dist[u] else { continue };
            for v in self.successors(u) {
                if dist[v].is_none_or(|dv| dv < du + 1) {
                    dist[v] = Some(du + 1);
                }
            }
        }
        dist[dst]
    }
}

/// Kahn's algorithm; `None` if the graph contains a directed cycle.
fn topological_order(g: &CellGraph) -> Option<Vec<usize>> {
    let n = g.num_nodes();
    let mut indegree: Vec<usize> = (0..n).map(|v| g.predecessors(v).count()).collect();
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for v in g.successors(u) {
            indegree[v] -= 1;
            if indegree[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// One violated cell invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    SelfLoop(usize),
    Cycle,
    InputCount(usize),
    OutputCount(usize),
    InputHasPredecessor(usize),
    OutputHasSuccessor(usize),
    /// The node is not on any directed input-to-output path.
    Dangling(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "graph has no nodes"),
            Violation::SelfLoop(v) => write!(f, "self-loop on node {v}"),
            Violation::Cycle => write!(f, "graph contains a directed cycle"),
            Violation::InputCount(n) => write!(f, "expected exactly one input node, found {n}"),
            Violation::OutputCount(n) => write!(f, "expected exactly one output node, found {n}"),
            Violation::InputHasPredecessor(v) => write!(f, "input node {v} has incoming edges"),
            Violation::OutputHasSuccessor(v) => write!(f, "output node {v} has outgoing edges"),
            Violation::Dangling(v) => write!(f, "node {v} is not on any input->output path"),
        }
    }
}

/// Every invariant violation found in a graph. Empty iff the graph is a valid cell.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidGraph(msg))
    }
}

pub fn validate(graph: &CellGraph) -> ValidationReport {
    let mut violations = Vec::new();
    let n = graph.num_nodes();
    if n == 0 {
        violations.push(Violation::Empty);
        return ValidationReport { violations };
    }
    for v in 0..n {
        if graph.adj[v][v] {
            violations.push(Violation::SelfLoop(v));
        }
    }
    if topological_order(graph).is_none() {
        violations.push(Violation::Cycle);
    }
    let inputs: Vec<usize> = (0..n).filter(|&v| graph.ops[v] == INPUT).collect();
    let outputs: Vec<usize> = (0..n).filter(|&v| graph.ops[v] == OUTPUT).collect();
    if inputs.len() != 1 {
        violations.push(Violation::InputCount(inputs.len()));
    }
    if outputs.len() != 1 {
        violations.push(Violation::OutputCount(outputs.len()));
    }
    for &v in &inputs {
        if graph.predecessors(v).next().is_some() {
            violations.push(Violation::InputHasPredecessor(v));
        }
    }
    for &v in &outputs {
        if graph.successors(v).next().is_some() {
            violations.push(Violation::OutputHasSuccessor(v));
        }
    }
    if let ([src], [dst]) = (inputs.as_slice(), outputs.as_slice()) {
        let forward = reachable(n, *src, |u| graph.successors(u).collect());
        let backward = reachable(n, *dst, |u| graph.predecessors(u).collect());
        for v in 0..n {
            if !(forward[v] && backward[v]) {
                violations.push(Violation::Dangling(v));
            }
        }
    }
    ValidationReport { violations }
}

fn reachable(n: usize, start: usize, next: impl Fn(usize) -> Vec<usize>) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        for w in next(u) {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    seen
}

/// A cell with operations on edges. Node 0 is the source and
/// `num_nodes - 1` the sink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeOpCell {
    pub num_nodes: usize,
    /// `(tail, head, op)` with `tail < head` and `op` a vocabulary index.
    pub edge_ops: Vec<(usize, usize, usize)>,
}

/// Moves operations from edges onto nodes.
///
/// Every edge-operation becomes a node. Edge-node `a` feeds edge-node `b` when
/// `head(a) == tail(b)`. Edges leaving the source are fed by a new `INPUT`
/// node and edges entering the sink feed a new `OUTPUT` node. Nodes are laid
/// out as `[INPUT, edge-nodes in list order..., OUTPUT]`.
pub fn edge_ops_to_node_ops(cell: &EdgeOpCell, vocab: &OpVocabulary) -> Result<CellGraph> {
    if cell.num_nodes < 2 {
        return Err(Error::InvalidGraph("edge-op cell needs at least 2 positions".into()));
    }
    let sink = cell.num_nodes - 1;
    let mut seen = BTreeSet::new();
    for &(tail, head, op) in &cell.edge_ops {
        if tail >= head || head > sink {
            return Err(Error::InvalidGraph(format!("malformed edge {tail}->{head}")));
        }
        if !seen.insert((tail, head)) {
            return Err(Error::InvalidGraph(format!("duplicate edge {tail}->{head}")));
        }
        if !vocab.interior_ops().contains(&op) {
            return Err(Error::UnknownOp {
                node: tail,
                op,
                vocab: vocab.len(),
            });
        }
    }

    let m = cell.edge_ops.len();
    let n = m + 2;
    let out_node = n - 1;
    let mut ops = Vec::with_capacity(n);
    ops.push(INPUT);
    ops.extend(cell.edge_ops.iter().map(|&(_, _, op)| op));
    ops.push(OUTPUT);
    let mut adj = vec![vec![false; n]; n];
    for (a, &(tail_a, head_a, _)) in cell.edge_ops.iter().enumerate() {
        if tail_a == 0 {
            adj[0][a + 1] = true;
        }
        if head_a == sink {
            adj[a + 1][out_node] = true;
        }
        for (b, &(tail_b, _, _)) in cell.edge_ops.iter().enumerate() {
            if head_a == tail_b {
                adj[a + 1][b + 1] = true;
            }
        }
    }
    let graph = CellGraph { ops, adj };
    validate(&graph).into_result()?;
    Ok(graph)
}

/// Union of in- and out-neighbors of `v`.
pub fn undirected_neighbors(graph: &CellGraph, v: usize) -> Result<BTreeSet<usize>> {
    let n = graph.num_nodes();
    if v >= n {
        return Err(Error::NodeOutOfRange { index: v, len: n });
    }
    Ok(graph.predecessors(v).chain(graph.successors(v)).collect())
}

/// Relabels nodes so that node `i` moves to position `perm[i]`.
pub fn permute(graph: &CellGraph, perm: &[usize]) -> Result<CellGraph> {
    let n = graph.num_nodes();
    let mut hit = vec![false; n];
    if perm.len() != n {
        return Err(Error::Dimension(format!(
            "permutation has {} entries for {n} nodes",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut hit[p], true) {
            return Err(Error::InvalidGraph("permutation is not a bijection".into()));
        }
    }
    let mut ops = vec![0; n];
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        ops[perm[i]] = graph.ops[i];
        for j in 0..n {
            adj[perm[i]][perm[j]] = graph.adj[i][j];
        }
    }
    Ok(CellGraph { ops, adj })
}

/// 64-bit FNV-1a. Stable across platforms and compiler versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Weisfeiler-Lehman color-refinement hash as a 16-digit hex string.
///
/// Colors start from the op labels. Each round a node's new color hashes its
/// own color with the sorted colors of its predecessors and of its
/// successors. The result hashes the sorted color multiset of every round.
pub fn wl_hash(graph: &CellGraph, iterations: usize) -> String {
    let n = graph.num_nodes();
    let preds: Vec<Vec<usize>> = (0..n).map(|v| graph.predecessors(v).collect()).collect();
    let succs: Vec<Vec<usize>> = (0..n).map(|v| graph.successors(v).collect()).collect();
    let mut colors: Vec<String> = graph.ops.iter().map(|op| format!("o{op}")).collect();
    let mut rounds = vec![sorted_join(colors.iter(), ",")];
    for _ in 0..iterations.max(1) {
        colors = (0..n)
            .map(|v| {
                let ins = sorted_join(preds[v].iter().map(|&u| &colors[u]), ",");
                let outs = sorted_join(succs[v].iter().map(|&u| &colors[u]), ",");
                let key = format!("{}|{}|{}", colors[v], ins, outs);
                format!("{:016x}", fnv1a64(key.as_bytes()))
            })
            .collect();
        rounds.push(sorted_join(colors.iter(), ","));
    }
    format!("{:016x}", fnv1a64(rounds.join(";").as_bytes()))
}

/// WL hash with one refinement round per node.
pub fn graph_hash(graph: &CellGraph) -> String {
    wl_hash(graph, graph.num_nodes())
}

fn sorted_join<'a>(items: impl Iterator<Item = &'a String>, sep: &str) -> String {
    let mut v: Vec<&str> = items.map(String::as_str).collect();
    v.sort_unstable();
    v.join(sep)
}

/// One-hot node features, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
}

pub fn one_hot_features(graph: &CellGraph, vocab: &OpVocabulary) -> Result<FeatureMatrix> {
    let rows = graph
        .ops
        .iter()
        .enumerate()
        .map(|(node, &op)| {
            if op >= vocab.len() {
                return Err(Error::UnknownOp {
                    node,
                    op,
                    vocab: vocab.len(),
                });
            }
            let mut row = vec![0.0; vocab.len()];
            row[op] = 1.0;
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(FeatureMatrix { rows })
}
