//! Search-space samplers, the synthetic accuracy oracle, and the JSON-lines
//! dataset format.
//!
//! Dataset files hold one JSON object per line:
//!
//! ```text
//! {"id":"a1","ops":[0,2,1],"adj":[[0,1,0],[0,0,1],[0,0,0]],"val_acc":0.84,"test_acc":0.83}
//! ```
//!
//! `ops` are vocabulary indices (0 = input, 1 = output) and `adj[i][j] = 1`
//! is a directed edge `i -> j`. Accuracies are fractions in `[0, 1]`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{edge_ops_to_node_ops, graph_hash, validate, CellGraph, EdgeOpCell, OpVocabulary, INPUT, OUTPUT};

/// An architecture with its measured accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedArch {
    pub id: String,
    pub graph: CellGraph,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceFamily {
    /// Operations on nodes, at most `max_nodes` nodes and `max_edges` edges.
    NodeOps101Like,
    /// Operations on the edges of a complete DAG over `num_positions` nodes,
    /// transformed to operations on nodes.
    EdgeOps201Like,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSpec {
    pub family: SpaceFamily,
    pub max_nodes: usize,
    pub max_edges: usize,
    pub num_positions: usize,
    /// Interior operation labels; `input`/`output` are implicit.
    pub ops: Vec<String>,
}

impl Default for SpaceSpec {
    fn default() -> Self {
        Self::node_ops_101_like()
    }
}

impl SpaceSpec {
    pub fn node_ops_101_like() -> Self {
        Self {
            family: SpaceFamily::NodeOps101Like,
            max_nodes: 7,
            max_edges: 9,
            num_positions: 4,
            ops: vec!["conv3x3".into(), "conv1x1".into(), "maxpool3x3".into()],
        }
    }

    pub fn edge_ops_201_like() -> Self {
        Self {
            family: SpaceFamily::EdgeOps201Like,
            ..Self::node_ops_101_like()
        }
    }

    pub fn vocabulary(&self) -> Result<OpVocabulary> {
        OpVocabulary::new(&self.ops)
    }

    pub fn check(&self) -> Result<()> {
        self.vocabulary()?;
        match self.family {
            SpaceFamily::NodeOps101Like if self.max_nodes < 2 || self.max_edges == 0 => Err(Error::Config(
                "node-op spaces need max_nodes >= 2 and max_edges >= 1".into(),
            )),
            SpaceFamily::EdgeOps201Like if self.num_positions < 2 => {
                Err(Error::Config("edge-op spaces need num_positions >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether `graph` is a valid member of this space.
    pub fn contains(&self, graph: &CellGraph) -> bool {
        let vocab_len = self.ops.len() + 2;
        if graph.ops().iter().any(|&o| o >= vocab_len) || !validate(graph).is_valid() {
            return false;
        }
        match self.family {
            SpaceFamily::NodeOps101Like => graph.num_nodes() <= self.max_nodes && graph.num_edges() <= self.max_edges,
            SpaceFamily::EdgeOps201Like => {
                let pairs = self.num_positions * (self.num_positions - 1) / 2;
                graph.num_nodes() <= pairs + 2
            }
        }
    }

    /// Draws one valid graph by rejection sampling.
    pub fn sample_one(&self, rng: &mut dyn RngCore) -> Result<CellGraph> {
        let vocab = self.vocabulary()?;
        let interior = vocab.interior_ops();
        for _ in 0..100_000 {
            let candidate = match self.family {
                SpaceFamily::NodeOps101Like => {
                    let n = rng.random_range(3..=self.max_nodes.max(3));
                    let mut ops = vec![INPUT];
                    ops.extend((1..n - 1).map(|_| rng.random_range(interior.clone())));
                    ops.push(OUTPUT);
                    let mut edges = Vec::new();
                    for j in 1..n {
                        for i in 0..j {
                            if rng.random_bool(0.5) {
                                edges.push((i, j));
                            }
                        }
                    }
                    if edges.len() > self.max_edges {
                        continue;
                    }
                    CellGraph::from_edges(ops, &edges)?
                }
                SpaceFamily::EdgeOps201Like => {
                    let mut edge_ops = Vec::new();
                    for j in 1..self.num_positions {
                        for i in 0..j {
                            // one extra draw stands for the `none` operation
                            let pick = rng.random_range(interior.start..=interior.end);
                            if pick < interior.end {
                                edge_ops.push((i, j, pick));
                            }
                        }
                    }
                    let cell = EdgeOpCell {
                        num_nodes: self.num_positions,
                        edge_ops,
                    };
                    match edge_ops_to_node_ops(&cell, &vocab) {
                        Ok(g) => g,
                        Err(_) => continue,
                    }
                }
            };
            if self.contains(&candidate) {
                return Ok(candidate);
            }
        }
        Err(Error::SamplerExhausted { requested: 1, found: 0 })
    }
}

/// `n` valid graphs, pairwise distinct under the WL hash, deterministic in `seed`.
pub fn sample_space(spec: &SpaceSpec, n: usize, seed: u64) -> Result<Vec<CellGraph>> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let cap = n.saturating_mul(200).max(10_000);
    for _ in 0..cap {
        let g = spec.sample_one(&mut rng)?;
        if seen.insert(graph_hash(&g)) {
            out.push(g);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::SamplerExhausted {
        requested: n,
        found: out.len(),
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Closed-form accuracy over the `input, output, conv3x3, conv1x1, maxpool3x3`
/// vocabulary:
/// `raw = 2*#conv3x3 + #conv1x1 - #maxpool3x3 + longest_path`,
/// `acc = 0.80 + 0.15 * sigmoid(0.5 * (raw - 6))`.
pub fn synth_accuracy(graph: &CellGraph) -> Result<f64> {
    let mut raw = 0.0;
    for (node, &op) in graph.ops().iter().enumerate() {
        raw += match op {
            INPUT | OUTPUT => 0.0,
            2 => 2.0,
            3 => 1.0,
            4 => -1.0,
            _ => return Err(Error::UnknownOp { node, op, vocab: 5 }),
        };
    }
    let lp = graph
        .longest_path()
        .ok_or_else(|| Error::InvalidGraph("no input->output path".into()))?;
    raw += lp as f64;
    Ok(0.80 + 0.15 * sigmoid(0.5 * (raw - 6.0)))
}

/// The synthetic space as annotated records, ids are WL hashes.
pub fn synthetic_dataset(spec: &SpaceSpec, n: usize, seed: u64) -> Result<Vec<AnnotatedArch>> {
    sample_space(spec, n, seed)?
        .into_iter()
        .map(|graph| {
            let acc = synth_accuracy(&graph)?;
            Ok(AnnotatedArch {
                id: graph_hash(&graph),
                graph,
                val_acc: acc,
                test_acc: acc,
            })
        })
        .collect()
}

/// Validation and test accuracy returned by a benchmark lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Source of true accuracies. `None` means the architecture is not part of
/// the benchmark.
pub trait Benchmark {
    fn query(&self, graph: &CellGraph) -> Option<Annotation>;
}

/// Every member of a [`SpaceSpec`], scored with [`synth_accuracy`].
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub spec: SpaceSpec,
}

impl Benchmark for SyntheticBenchmark {
    fn query(&self, graph: &CellGraph) -> Option<Annotation> {
        if !self.spec.contains(graph) {
            return None;
        }
        let acc = synth_accuracy(graph).ok()?;
        Some(Annotation {
            val_acc: acc,
            test_acc: acc,
        })
    }
}

/// Lookup table over annotated records, keyed by WL hash.
#[derive(Debug, Clone, Default)]
pub struct TableBenchmark {
    table: HashMap<String, Annotation>,
}

impl TableBenchmark {
    pub fn new(records: &[AnnotatedArch]) -> Self {
        let table = records
            .iter()
            .map(|r| {
                (
                    graph_hash(&r.graph),
                    Annotation {
                        val_acc: r.val_acc,
                        test_acc: r.test_acc,
                    },
                )
            })
            .collect();
        Self { table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Benchmark for TableBenchmark {
    fn query(&self, graph: &CellGraph) -> Option<Annotation> {
        self.table.get(&graph_hash(graph)).copied()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    ops: Vec<usize>,
    adj: Vec<Vec<u8>>,
    val_acc: f64,
    test_acc: f64,
}

impl From<&AnnotatedArch> for Record {
    fn from(a: &AnnotatedArch) -> Self {
        Record {
            id: a.id.clone(),
            ops: a.graph.ops().to_vec(),
            adj: a
                .graph
                .adj()
                .iter()
                .map(|row| row.iter().map(|&b| u8::from(b)).collect())
                .collect(),
            val_acc: a.val_acc,
            test_acc: a.test_acc,
        }
    }
}

impl TryFrom<Record> for AnnotatedArch {
    type Error = String;

    fn try_from(r: Record) -> std::result::Result<Self, String> {
        for (name, acc) in [("val_acc", r.val_acc), ("test_acc", r.test_acc)] {
            if !(0.0..=1.0).contains(&acc) {
                return Err(format!("{name} {acc} is outside [0, 1]"));
            }
        }
        if r.adj.iter().flatten().any(|&b| b > 1) {
            return Err("adjacency entries must be 0 or 1".into());
        }
        let adj = r.adj.iter().map(|row| row.iter().map(|&b| b == 1).collect()).collect();
        let graph = CellGraph::new(r.ops, adj).map_err(|e| e.to_string())?;
        validate(&graph).into_result().map_err(|e| e.to_string())?;
        Ok(AnnotatedArch {
            id: r.id,
            graph,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
        })
    }
}

pub fn write_dataset(path: &Path, records: &[AnnotatedArch]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&Record::from(r))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<AnnotatedArch>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        out.push(AnnotatedArch::try_from(record).map_err(fail)?);
    }
    Ok(out)
}
