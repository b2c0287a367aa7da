//! Query-budgeted search: aging evolution guided by predictor scores,
//! random search, and rank-then-query.
//!
//! Every true-accuracy lookup goes through [`SearchState::query`], which
//! records it and enforces the budget. Re-querying an architecture already
//! seen (by WL hash) is free.

use std::collections::{HashMap, VecDeque};

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bench::{AnnotatedArch, Annotation, Benchmark, SpaceSpec};
use crate::error::{Error, Result};
use crate::graph::{fnv1a64, graph_hash, validate, CellGraph, INPUT, OUTPUT};
use crate::nn::{Encoder, EncoderConfig};
use crate::predictor::{finetune, FinetuneConfig, Predictor, Scorer};

/// One true query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub step: usize,
    pub graph: CellGraph,
    pub wl_hash: String,
    pub predicted: Option<f64>,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Highest `val_acc` up to and including this record.
    pub best_so_far: f64,
}

/// Outcome of [`SearchState::query`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookup {
    /// Newly queried, budget consumed.
    Fresh(Annotation),
    /// Already in the history, budget untouched.
    Repeat(Annotation),
    /// Not part of the benchmark.
    Missing,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    /// Aging population of (graph, predicted fitness).
    pub population: VecDeque<(CellGraph, f64)>,
    pub history: Vec<QueryRecord>,
    pub budget: usize,
    /// Set when the search stopped before spending its budget.
    pub truncated: bool,
    seen: HashMap<String, Annotation>,
    best: Option<usize>,
}

impl SearchState {
    pub fn new(budget: usize) -> Self {
        Self {
            population: VecDeque::new(),
            history: Vec::new(),
            budget,
            truncated: false,
            seen: HashMap::new(),
            best: None,
        }
    }

    pub fn queries_used(&self) -> usize {
        self.history.len()
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.history.len()
    }

    /// Record with the highest `val_acc`, earliest on ties.
    pub fn best(&self) -> Option<&QueryRecord> {
        self.best.map(|i| &self.history[i])
    }

    pub fn query(&mut self, bench: &dyn Benchmark, graph: &CellGraph, predicted: Option<f64>) -> Result<Lookup> {
        let hash = graph_hash(graph);
        if let Some(&a) = self.seen.get(&hash) {
            return Ok(Lookup::Repeat(a));
        }
        if self.remaining() == 0 {
            return Err(Error::BudgetExhausted(self.budget));
        }
        let Some(a) = bench.query(graph) else {
            return Ok(Lookup::Missing);
        };
        let step = self.history.len();
        let prev_best = self.best().map(|b| b.val_acc);
        if prev_best.is_none_or(|b| a.val_acc > b) {
            self.best = Some(step);
        }
        let best_so_far = prev_best.map_or(a.val_acc, |b| b.max(a.val_acc));
        self.seen.insert(hash.clone(), a);
        self.history.push(QueryRecord {
            step,
            graph: graph.clone(),
            wl_hash: hash,
            predicted,
            val_acc: a.val_acc,
            test_acc: a.test_acc,
            best_so_far,
        });
        Ok(Lookup::Fresh(a))
    }
}

/// Where fresh candidates come from.
#[derive(Debug, Clone, Copy)]
pub enum Space<'a> {
    /// Rejection sampling within the space limits.
    Spec(&'a SpaceSpec),
    /// Uniform draws from a fixed list.
    List(&'a [CellGraph]),
}

impl Space<'_> {
    pub fn sample(&self, rng: &mut dyn RngCore) -> Result<CellGraph> {
        match self {
            Space::Spec(spec) => spec.sample_one(rng),
            Space::List([]) => Err(Error::Empty("search space")),
            Space::List(list) => Ok(list[rng.random_range(0..list.len())].clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationSpec {
    pub op_mutation_prob: f64,
    pub edge_mutation_prob: f64,
    pub max_attempts: usize,
}

impl Default for MutationSpec {
    fn default() -> Self {
        Self {
            op_mutation_prob: 0.5,
            edge_mutation_prob: 0.5,
            max_attempts: 100,
        }
    }
}

/// Relabels one interior node or flips one adjacency bit, retrying until the
/// child is valid and differs from the parent by WL hash. Returns the parent
/// when both probabilities are zero or every attempt fails.
pub fn mutate(graph: &CellGraph, spec: &MutationSpec, vocab_size: usize, rng: &mut dyn RngCore) -> CellGraph {
    let total = spec.op_mutation_prob + spec.edge_mutation_prob;
    let n = graph.num_nodes();
    if total <= 0.0 || n < 2 {
        return graph.clone();
    }
    let parent_hash = graph_hash(graph);
    let mutable: Vec<usize> = (0..n).filter(|&v| !matches!(graph.ops()[v], INPUT | OUTPUT)).collect();
    for _ in 0..spec.max_attempts {
        let mut child = graph.clone();
        if rng.random::<f64>() * total < spec.op_mutation_prob {
            if mutable.is_empty() || vocab_size < 4 {
                continue;
            }
            let v = mutable[rng.random_range(0..mutable.len())];
            // draw among the interior labels other than the current one
            let mut op = rng.random_range(2..vocab_size - 1);
            if op >= graph.ops()[v] {
                op += 1;
            }
            child.set_op(v, op);
        } else {
            let u = rng.random_range(0..n);
            let mut v = rng.random_range(0..n - 1);
            if v >= u {
                v += 1;
            }
            child.toggle_edge(u, v);
        }
        if validate(&child).is_valid() && graph_hash(&child) != parent_hash {
            return child;
        }
    }
    graph.clone()
}

/// Supplies fitness scores, optionally trained on the queries made so far.
pub trait Guide {
    fn fit(&mut self, _history: &[QueryRecord]) -> Result<()> {
        Ok(())
    }

    fn score(&self, graphs: &[&CellGraph]) -> Result<Vec<f64>>;
}

/// A fixed scorer that ignores the history.
pub struct ScorerGuide<S>(pub S);

impl<S: Scorer> Guide for ScorerGuide<S> {
    fn score(&self, graphs: &[&CellGraph]) -> Result<Vec<f64>> {
        self.0.score(graphs)
    }
}

/// Uniform pseudo-random scores keyed by WL hash, stable across calls.
pub fn random_scorer(seed: u64) -> impl Fn(&CellGraph) -> f64 {
    move |g| fnv1a64(format!("{seed}:{}", graph_hash(g)).as_bytes()) as f64 / u64::MAX as f64
}

/// Fine-tunes a predictor on the queried architectures when asked to fit.
#[derive(Debug, Clone)]
pub struct PredictorGuide {
    pub pretrained: Option<Encoder>,
    pub encoder_cfg: EncoderConfig,
    pub finetune_cfg: FinetuneConfig,
    pub vocab_size: usize,
    pub predictor: Option<Predictor>,
}

impl PredictorGuide {
    pub fn new(
        pretrained: Option<Encoder>,
        encoder_cfg: EncoderConfig,
        finetune_cfg: FinetuneConfig,
        vocab_size: usize,
    ) -> Self {
        Self {
            pretrained,
            encoder_cfg,
            finetune_cfg,
            vocab_size,
            predictor: None,
        }
    }
}

impl Guide for PredictorGuide {
    fn fit(&mut self, history: &[QueryRecord]) -> Result<()> {
        let data: Vec<AnnotatedArch> = history
            .iter()
            .map(|r| AnnotatedArch {
                id: r.wl_hash.clone(),
                graph: r.graph.clone(),
                val_acc: r.val_acc,
                test_acc: r.test_acc,
            })
            .collect();
        let out = finetune(
            self.pretrained.as_ref(),
            &data,
            &self.finetune_cfg,
            &self.encoder_cfg,
            self.vocab_size,
        )?;
        self.predictor = Some(out.predictor);
        Ok(())
    }

    fn score(&self, graphs: &[&CellGraph]) -> Result<Vec<f64>> {
        self.predictor
            .as_ref()
            .ok_or(Error::Empty("predictor has not been fitted"))?
            .predict(graphs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveConfig {
    pub budget: usize,
    pub pop_size: usize,
    pub tournament_size: usize,
    pub mutation: MutationSpec,
    /// Refit the guide on the full history after this many fresh child
    /// queries and rescore the population; 0 fits once on the initial
    /// population only.
    pub refit_every: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            budget: 150,
            pop_size: 50,
            tournament_size: 10,
            mutation: MutationSpec::default(),
            refit_every: 0,
        }
    }
}

impl EvolveConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.budget >= self.pop_size && self.pop_size >= self.tournament_size && self.tournament_size >= 1) {
            return Err(Error::Config(format!(
                "search needs budget >= pop_size >= tournament_size >= 1, got {} / {} / {}",
                self.budget, self.pop_size, self.tournament_size
            )));
        }
        let m = &self.mutation;
        if ![m.op_mutation_prob, m.edge_mutation_prob]
            .iter()
            .all(|p| (0.0..=1.0).contains(p))
        {
            return Err(Error::Config("mutation probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Draws per fresh query before a search gives up and marks itself truncated.
const DRAWS_PER_QUERY: usize = 1000;

/// Aging evolution. The initial population is true-queried, the guide is fit
/// on it, and from then on tournaments are decided by guide scores while each
/// child is true-queried.
pub fn evolve(
    bench: &dyn Benchmark,
    space: Space<'_>,
    vocab_size: usize,
    guide: &mut dyn Guide,
    cfg: &EvolveConfig,
    rng: &mut dyn RngCore,
) -> Result<SearchState> {
    cfg.check()?;
    let mut state = SearchState::new(cfg.budget);
    let mut draws = cfg.budget * DRAWS_PER_QUERY;
    let mut initial = Vec::with_capacity(cfg.pop_size);
    while initial.len() < cfg.pop_size && draws > 0 {
        draws -= 1;
        let g = space.sample(rng)?;
        if let Lookup::Fresh(_) = state.query(bench, &g, None)? {
            initial.push(g);
        }
    }
    if initial.len() < cfg.pop_size {
        state.truncated = true;
        return Ok(state);
    }
    guide.fit(&state.history)?;
    let refs: Vec<&CellGraph> = initial.iter().collect();
    let fitness = guide.score(&refs)?;
    state.population = initial.into_iter().zip(fitness).collect();
    let mut since_fit = 0;

    while state.remaining() > 0 {
        if cfg.refit_every > 0 && since_fit >= cfg.refit_every {
            guide.fit(&state.history)?;
            let refs: Vec<&CellGraph> = state.population.iter().map(|(g, _)| g).collect();
            let fitness = guide.score(&refs)?;
            for ((_, f), s) in state.population.iter_mut().zip(fitness) {
                *f = s;
            }
            since_fit = 0;
        }
        if draws == 0 {
            state.truncated = true;
            break;
        }
        draws -= 1;
        let picks = index::sample(rng, state.population.len(), cfg.tournament_size);
        let parent = picks
            .iter()
            .reduce(|a, b| {
                if state.population[b].1 > state.population[a].1 {
                    b
                } else {
                    a
                }
            })
            .expect("tournament is nonempty");
        let parent = state.population[parent].0.clone();
        let mut child = None;
        for _ in 0..cfg.mutation.max_attempts.max(1) {
            let c = mutate(&parent, &cfg.mutation, vocab_size, rng);
            if bench.query(&c).is_some() {
                child = Some(c);
                break;
            }
        }
        let Some(child) = child else { continue };
        let predicted = guide.score(&[&child])?[0];
        match state.query(bench, &child, Some(predicted))? {
            Lookup::Missing => continue,
            Lookup::Fresh(_) => since_fit += 1,
            Lookup::Repeat(_) => {}
        }
        state.population.push_back((child, predicted));
        state.population.pop_front();
    }
    Ok(state)
}

/// Uniform sampling until the budget is spent.
pub fn random_search(
    bench: &dyn Benchmark,
    space: Space<'_>,
    budget: usize,
    rng: &mut dyn RngCore,
) -> Result<SearchState> {
    let mut state = SearchState::new(budget);
    let mut draws = budget * DRAWS_PER_QUERY;
    while state.remaining() > 0 {
        if draws == 0 {
            state.truncated = true;
            break;
        }
        draws -= 1;
        let g = space.sample(rng)?;
        state.query(bench, &g, None)?;
    }
    Ok(state)
}

/// Queries `n_train` random members, fits the guide on them, then queries
/// the `top_k` best-scored of the rest. The result is the best over all
/// `n_train + top_k` queries.
pub fn rank_then_query(
    bench: &dyn Benchmark,
    space: &[CellGraph],
    n_train: usize,
    top_k: usize,
    guide: &mut dyn Guide,
    rng: &mut dyn RngCore,
) -> Result<SearchState> {
    if n_train + top_k > space.len() {
        return Err(Error::InsufficientIds {
            requested: n_train + top_k,
            available: space.len(),
        });
    }
    let mut state = SearchState::new(n_train + top_k);
    let mut order: Vec<usize> = (0..space.len()).collect();
    order.shuffle(rng);
    let (train, rest) = order.split_at(n_train);
    for &i in train {
        if let Lookup::Missing = state.query(bench, &space[i], None)? {
            return Err(Error::InvalidGraph(format!("space member {i} is not in the benchmark")));
        }
    }
    guide.fit(&state.history)?;
    let refs: Vec<&CellGraph> = rest.iter().map(|&i| &space[i]).collect();
    let scores = guide.score(&refs)?;
    let mut ranked: Vec<usize> = (0..rest.len()).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    for &r in ranked.iter().take(top_k) {
        state.query(bench, &space[rest[r]], Some(scores[r]))?;
    }
    state.truncated = state.remaining() > 0;
    Ok(state)
}
