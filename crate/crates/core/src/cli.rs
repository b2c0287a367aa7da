//! The `cap` command line: experiment config, subcommands and output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bench::{
    read_dataset, synthetic_dataset, write_dataset, AnnotatedArch, Benchmark, SpaceSpec, SyntheticBenchmark,
    TableBenchmark,
};
use crate::checkpoint::{Checkpoint, Payload, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_ranking, make_split, summarize};
use crate::graph::{fnv1a64, CellGraph};
use crate::nn::{Encoder, EncoderConfig, GraphBatch};
use crate::predictor::{finetune, FinetuneConfig};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::search::{
    evolve, random_search, rank_then_query, EvolveConfig, MutationSpec, PredictorGuide, SearchState, Space,
};

#[derive(Debug, Parser)]
#[command(
    name = "cap",
    version,
    about = "Context-aware neural architecture performance predictor"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample or load the architecture corpus and write it as JSON lines.
    Generate(ConfigArg),
    /// Pretrain the encoder on unlabeled architectures.
    Pretrain(ConfigArg),
    /// Fine-tune on seeded splits and report Kendall's tau per run.
    Rank(RankArgs),
    /// Run a query-budgeted architecture search.
    Search(SearchArgs),
    /// Export architecture embeddings.
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Pretraining checkpoint to start from.
    #[arg(long, required_unless_present = "scratch", conflicts_with = "scratch")]
    pub pretrained: Option<PathBuf>,
    /// Start from a freshly initialized encoder.
    #[arg(long)]
    pub scratch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Strategy {
    Evolve,
    RankThenQuery,
    Random,
}

impl Strategy {
    fn name(self) -> &'static str {
        match self {
            Strategy::Evolve => "evolve",
            Strategy::RankThenQuery => "rank_then_query",
            Strategy::Random => "random",
        }
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    /// Pretraining checkpoint for the predictor; trained from scratch otherwise.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Number of test architectures: a count or every remaining one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TestSize {
    #[default]
    All,
    Count(usize),
}

impl TestSize {
    fn count(self) -> Option<usize> {
        match self {
            TestSize::All => None,
            TestSize::Count(n) => Some(n),
        }
    }
}

impl Serialize for TestSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TestSize::All => s.serialize_str("all"),
            TestSize::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TestSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(TestSize::Count(n)),
            Raw::Word(w) if w == "all" => Ok(TestSize::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a count or \"all\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of architectures to sample when no dataset file is given.
    pub size: usize,
    /// JSON-lines dataset to use instead of the synthetic benchmark.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { size: 2000, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: TestSize,
    pub runs: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_val: 0,
            n_test: TestSize::All,
            runs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub budget: usize,
    pub pop_size: usize,
    pub tournament_size: usize,
    pub mutation: MutationSpec,
    pub refit_every: usize,
    /// Annotated architectures for rank-then-query.
    pub n_train: usize,
    /// Top-ranked architectures queried by rank-then-query.
    pub top_k: usize,
    pub runs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let e = EvolveConfig::default();
        Self {
            budget: e.budget,
            pop_size: e.pop_size,
            tournament_size: e.tournament_size,
            mutation: e.mutation,
            refit_every: e.refit_every,
            n_train: 50,
            top_k: 50,
            runs: 1,
        }
    }
}

impl SearchConfig {
    fn evolve(&self) -> EvolveConfig {
        EvolveConfig {
            budget: self.budget,
            pop_size: self.pop_size,
            tournament_size: self.tournament_size,
            mutation: self.mutation.clone(),
            refit_every: self.refit_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub space: SpaceSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub search: SearchConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn check(&self) -> Result<()> {
        self.space.check()?;
        self.pretrain.check()?;
        self.finetune.check()?;
        self.search.evolve().check()?;
        if self.split.runs == 0 || self.search.runs == 0 {
            return Err(Error::Config("split.runs and search.runs must be >= 1".into()));
        }
        if self.data.path.is_none() && self.data.size == 0 {
            return Err(Error::Config("data.size must be >= 1".into()));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canonical.as_bytes()))
    }

    /// Synthetic corpus, or the configured dataset file.
    pub fn dataset(&self) -> Result<Vec<AnnotatedArch>> {
        match &self.data.path {
            Some(p) => {
                let data = read_dataset(p)?;
                let vocab = self.space.ops.len() + 2;
                for a in &data {
                    if let Some(&op) = a.graph.ops().iter().find(|&&o| o >= vocab) {
                        return Err(Error::Config(format!(
                            "dataset record {} uses op index {op} outside the configured vocabulary of {vocab}",
                            a.id
                        )));
                    }
                }
                Ok(data)
            }
            None => synthetic_dataset(&self.space, self.data.size, self.seed),
        }
    }

    fn vocab_size(&self) -> usize {
        self.space.ops.len() + 2
    }

    fn vocabulary(&self) -> Vec<String> {
        let mut v = vec!["input".to_string(), "output".to_string()];
        v.extend(self.space.ops.iter().cloned());
        v
    }
}

/// Runs the parsed command line and maps errors to exit codes: 0 success,
/// 1 runtime failure, 2 usage or config error.
pub fn run(cli: Cli) -> ExitCode {
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(&a.config),
        Command::Pretrain(a) => cmd_pretrain(&a.config),
        Command::Rank(a) => cmd_rank(&a),
        Command::Search(a) => cmd_search(&a),
        Command::Embed(a) => cmd_embed(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InsufficientIds { .. } => 2,
        _ => 1,
    }
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    Ok(&cfg.output_dir)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn header(cfg: &ExperimentConfig, extra: &str) -> String {
    format!("# seed={} config_hash={}{extra}\n", cfg.seed, cfg.hash())
}

fn cmd_generate(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.dataset()?;
    let out = prepare_output(&cfg)?.join("dataset.jsonl");
    write_dataset(&out, &data)?;
    eprintln!("wrote {} architectures to {}", data.len(), out.display());
    Ok(())
}

fn cmd_pretrain(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let graphs: Vec<CellGraph> = cfg.dataset()?.into_iter().map(|a| a.graph).collect();
    let pcfg = PretrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain.clone()
    };
    let out = pretrain(&graphs, cfg.vocab_size(), &cfg.encoder, &pcfg)?;
    let dir = prepare_output(&cfg)?;

    let mut csv = header(&cfg, "");
    csv.push_str("epoch,loss,positive_sim,negative_sim\n");
    for h in &out.history {
        writeln!(csv, "{},{},{},{}", h.epoch, h.loss, h.positive_sim, h.negative_sim).expect("string write");
    }
    write_file(&dir.join("pretrain_loss.csv"), &csv)?;

    let ckpt = Checkpoint {
        version: FORMAT_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        vocabulary: cfg.vocabulary(),
        encoder_config: cfg.encoder.clone(),
        payload: Payload::Pretrained {
            model: out.model,
            optimizer: out.optimizer,
        },
    };
    let path = dir.join("pretrain_checkpoint.json");
    ckpt.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Pretrained encoder and the encoder config it was built with.
fn load_pretrained(path: &Path, cfg: &ExperimentConfig) -> Result<(Encoder, EncoderConfig)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.vocabulary != cfg.vocabulary() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained on vocabulary {:?}, config uses {:?}",
            path.display(),
            ckpt.vocabulary,
            cfg.vocabulary()
        )));
    }
    let (enc, _) = ckpt.encoder();
    Ok((enc.clone(), ckpt.encoder_config))
}

fn cmd_rank(args: &RankArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let data = cfg.dataset()?;
    let s = &cfg.split;
    let splits = (0..s.runs as u64)
        .map(|r| make_split(&data, s.n_train, s.n_val, s.n_test.count(), cfg.seed + r))
        .collect::<Result<Vec<_>>>()?;
    let (pretrained, enc_cfg, init) = match &args.pretrained {
        Some(p) => {
            let (e, c) = load_pretrained(p, &cfg)?;
            (Some(e), c, "pretrained")
        }
        None => (None, cfg.encoder.clone(), "scratch"),
    };

    let mut csv = header(&cfg, &format!(" init={init}"));
    csv.push_str("seed,n_train,n_val,n_test,tau\n");
    let mut taus = Vec::with_capacity(splits.len());
    for split in &splits {
        let fcfg = FinetuneConfig {
            seed: split.seed,
            ..cfg.finetune.clone()
        };
        let out = finetune(pretrained.as_ref(), &split.train, &fcfg, &enc_cfg, cfg.vocab_size())?;
        let report = evaluate_ranking(&out.predictor, &split.test)?;
        writeln!(
            csv,
            "{},{},{},{},{}",
            split.seed,
            split.train.len(),
            split.val.len(),
            split.test.len(),
            report.tau
        )
        .expect("string write");
        taus.push(report.tau);
    }
    let dir = prepare_output(&cfg)?;
    write_file(&dir.join(format!("rank_{init}.csv")), &csv)?;

    let sum = summarize(&taus)?;
    let mut agg = header(&cfg, &format!(" init={init}"));
    agg.push_str("init,runs,mean_tau,std_tau\n");
    writeln!(agg, "{init},{},{},{}", sum.n, sum.mean, sum.std).expect("string write");
    write_file(&dir.join(format!("rank_{init}_summary.csv")), &agg)?;
    eprintln!("{init}: mean tau {:.4} +- {:.4} over {} runs", sum.mean, sum.std, sum.n);
    Ok(())
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    seed: u64,
    config_hash: &'a str,
    strategy: &'a str,
    step: usize,
    wl_hash: &'a str,
    predicted: Option<f64>,
    val_acc: f64,
    test_acc: f64,
    best_so_far: f64,
}

fn cmd_search(args: &SearchArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let data = cfg.dataset()?;
    let space: Vec<CellGraph> = data.iter().map(|a| a.graph.clone()).collect();
    let table = TableBenchmark::new(&data);
    let synthetic = SyntheticBenchmark {
        spec: cfg.space.clone(),
    };
    // a dataset file is a closed table; the synthetic oracle covers the whole space
    let (bench, proposals): (&dyn Benchmark, Space<'_>) = match cfg.data.path {
        Some(_) => (&table, Space::List(&space)),
        None => (&synthetic, Space::Spec(&cfg.space)),
    };
    let (pretrained, enc_cfg) = match &args.pretrained {
        Some(p) => {
            let (e, c) = load_pretrained(p, &cfg)?;
            (Some(e), c)
        }
        None => (None, cfg.encoder.clone()),
    };
    let strategy = args.strategy.name();
    let hash = cfg.hash();
    let mut trace = String::new();
    let mut summary = header(&cfg, &format!(" strategy={strategy}"));
    summary.push_str("strategy,seed,budget,queries,best_val_acc,best_test_acc\n");

    for r in 0..cfg.search.runs as u64 {
        let seed = cfg.seed + r;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut guide = PredictorGuide::new(
            pretrained.clone(),
            enc_cfg.clone(),
            FinetuneConfig {
                seed,
                ..cfg.finetune.clone()
            },
            cfg.vocab_size(),
        );
        let (state, budget): (SearchState, usize) = match args.strategy {
            Strategy::Evolve => {
                let ecfg = cfg.search.evolve();
                let s = evolve(bench, proposals, cfg.vocab_size(), &mut guide, &ecfg, &mut rng)?;
                (s, ecfg.budget)
            }
            Strategy::Random => (
                random_search(bench, proposals, cfg.search.budget, &mut rng)?,
                cfg.search.budget,
            ),
            Strategy::RankThenQuery => {
                let budget = cfg.search.n_train + cfg.search.top_k;
                let s = rank_then_query(
                    &table,
                    &space,
                    cfg.search.n_train,
                    cfg.search.top_k,
                    &mut guide,
                    &mut rng,
                )?;
                (s, budget)
            }
        };
        for q in &state.history {
            let rec = TraceRecord {
                seed,
                config_hash: &hash,
                strategy,
                step: q.step,
                wl_hash: &q.wl_hash,
                predicted: q.predicted,
                val_acc: q.val_acc,
                test_acc: q.test_acc,
                best_so_far: q.best_so_far,
            };
            trace.push_str(&serde_json::to_string(&rec)?);
            trace.push('\n');
        }
        let best = state.best().ok_or(Error::Empty("search history"))?;
        writeln!(
            summary,
            "{strategy},{seed},{budget},{},{},{}",
            state.queries_used(),
            best.val_acc,
            best.test_acc
        )
        .expect("string write");
        if state.truncated {
            eprintln!(
                "warning: run {seed} stopped after {} of {budget} queries",
                state.queries_used()
            );
        }
    }
    let dir = prepare_output(&cfg)?;
    write_file(&dir.join(format!("search_{strategy}_trace.jsonl")), &trace)?;
    write_file(&dir.join(format!("search_{strategy}_summary.csv")), &summary)?;
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = read_dataset(&args.dataset)?;
    let (encoder, mode) = ckpt.encoder();
    let mut csv = format!("# checkpoint_seed={} config_hash={}\n", ckpt.seed, ckpt.config_hash);
    csv.push_str("id");
    for j in 0..encoder.embed_dim {
        write!(csv, ",e{j}").expect("string write");
    }
    csv.push_str(",test_acc\n");
    for chunk in data.chunks(256) {
        let batch = GraphBatch::from_graphs(chunk.iter().map(|a| &a.graph), encoder.input_dim)?;
        let out = encoder.infer(&batch, mode)?;
        for (i, a) in chunk.iter().enumerate() {
            csv.push_str(&a.id);
            for x in out.graphs.row(i) {
                write!(csv, ",{x}").expect("string write");
            }
            writeln!(csv, ",{}", a.test_acc).expect("string write");
        }
    }
    match &args.output {
        Some(p) => write_file(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
