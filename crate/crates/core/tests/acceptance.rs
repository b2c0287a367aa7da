//! Acceptance suite. Each test prints one PASS/FAIL line; run with
//! `cargo test --test acceptance -- --test-threads=1` to keep them ordered.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cap_core::bench::{
    read_dataset, synthetic_dataset, write_dataset, AnnotatedArch, SpaceSpec, SyntheticBenchmark, TableBenchmark,
};
use cap_core::evaluation::{evaluate_ranking, kendall_tau, make_split, summarize};
use cap_core::graph::{permute, CellGraph};
use cap_core::nn::{Encoder, EncoderConfig, Gradients, GraphBatch, Matrix, Mlp, Mode, Parameterized};
use cap_core::predictor::{bpr_loss, finetune, loss, FinetuneConfig, FinetuneMode, LossKind, Predictor};
use cap_core::pretrain::{
    build_batch_pairs, extract_context_ring, extract_k_hop, pretrain, ContextModel, PretrainConfig,
};
use cap_core::search::{evolve, random_search, rank_then_query, EvolveConfig, PredictorGuide, Space};
use cap_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 5;
const SPACE_SIZE: usize = 2000;
const SEEDS: u64 = 10;

/// Bypasses the test harness capture so the verdict always reaches the log.
fn verdict(id: u32, name: &str, pass: bool, detail: &str, started: Instant) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {id:>2} {tag}: {name}: {detail} ({:.1?})\n",
        started.elapsed()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} failed: {detail}");
}

fn space() -> &'static Vec<AnnotatedArch> {
    static DATA: OnceLock<Vec<AnnotatedArch>> = OnceLock::new();
    DATA.get_or_init(|| synthetic_dataset(&SpaceSpec::default(), SPACE_SIZE, 0).unwrap())
}

fn pretrained() -> &'static Encoder {
    static ENC: OnceLock<Encoder> = OnceLock::new();
    ENC.get_or_init(|| {
        let graphs: Vec<CellGraph> = space().iter().map(|a| a.graph.clone()).collect();
        let cfg = PretrainConfig {
            seed: 0,
            ..Default::default()
        };
        pretrain(&graphs, VOCAB, &EncoderConfig::default(), &cfg)
            .unwrap()
            .model
            .main
    })
}

/// Mean test tau over the paired seeds for 50 and 100 labels, pretrained
/// and scratch. The 50-label set is a prefix of the 100-label one and all
/// four share the held-out 500.
struct GainTable {
    pre50: f64,
    scratch50: f64,
    pre100: f64,
    scratch100: f64,
    elapsed: Duration,
}

fn gain_table() -> &'static GainTable {
    static TABLE: OnceLock<GainTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let t = Instant::now();
        let enc_cfg = EncoderConfig::default();
        let mut taus = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for seed in 0..SEEDS {
            let split = make_split(space(), 100, 0, Some(500), seed).unwrap();
            for (col, n, init) in [(0, 50, true), (1, 50, false), (2, 100, true), (3, 100, false)] {
                let cfg = FinetuneConfig {
                    seed,
                    ..Default::default()
                };
                let init = init.then(pretrained);
                let out = finetune(init, &split.train[..n], &cfg, &enc_cfg, VOCAB).unwrap();
                taus[col].push(evaluate_ranking(&out.predictor, &split.test).unwrap().tau);
            }
        }
        let m = |v: &[f64]| summarize(v).unwrap().mean;
        GainTable {
            pre50: m(&taus[0]),
            scratch50: m(&taus[1]),
            pre100: m(&taus[2]),
            scratch100: m(&taus[3]),
            elapsed: t.elapsed(),
        }
    })
}

fn random_graph(rng: &mut ChaCha8Rng) -> CellGraph {
    SpaceSpec::default().sample_one(rng).unwrap()
}

// ---------------------------------------------------------------- 1

#[derive(Clone)]
struct Stack {
    encoder: Encoder,
    head: Mlp,
}

impl Parameterized for Stack {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.head.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.head.tensors_mut());
        t
    }
}

/// Loss and the ReLU pattern of every layer it passed through.
type Eval<'a, P> = Box<dyn Fn(&P) -> (f64, Vec<bool>) + 'a>;

/// Worst relative error over `n` random coordinates, and the number of draws
/// rejected because the step crossed a ReLU kink, where the function has no
/// derivative and finite differences measure nothing.
fn probe<P: Parameterized + Clone>(
    model: &P,
    analytic: &Gradients,
    f: Eval<'_, P>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    let h = 1e-5;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let (_, pattern) = f(model);
    let (mut worst, mut accepted, mut rejected) = (0.0f64, 0, 0);
    while accepted < n {
        let t = rng.random_range(0..sizes.len());
        let i = rng.random_range(0..sizes[t]);
        let mut plus = model.clone();
        plus.tensors_mut()[t][i] += h;
        let mut minus = model.clone();
        minus.tensors_mut()[t][i] -= h;
        let ((lp, pp), (lm, pm)) = (f(&plus), f(&minus));
        if pp != pattern || pm != pattern {
            rejected += 1;
            assert!(rejected < 100 * n, "no smooth coordinates");
            continue;
        }
        accepted += 1;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic.0[t][i];
        worst = worst.max((a - numeric).abs() / (1e-4 + a.abs().max(numeric.abs())));
    }
    (worst, rejected)
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc_cfg = EncoderConfig {
        dropout: 0.0,
        ..Default::default()
    };
    let (mut worst, mut probes, mut kinks) = (0.0f64, 0, 0);
    let mut record = |(w, k): (f64, usize)| {
        worst = worst.max(w);
        kinks += k;
        probes += 20;
    };
    for _ in 0..20 {
        let graphs: Vec<CellGraph> = (0..6).map(|_| random_graph(&mut rng)).collect();
        let labels: Vec<f64> = (0..6).map(|i| 0.8 + 0.01 * i as f64).collect();
        let batch = GraphBatch::from_graphs(&graphs, VOCAB).unwrap();
        let stack = Stack {
            encoder: Encoder::new(VOCAB, &enc_cfg, &mut rng).unwrap(),
            head: Mlp::new(&[32, 32, 1], false, 0.0, 0.1, &mut rng).unwrap(),
        };
        for mode in [Mode::Train, Mode::Eval, Mode::Partial] {
            for kind in [LossKind::Bpr, LossKind::Mse] {
                let batch = &batch;
                let labels = &labels;
                let value: Eval<'_, Stack> = Box::new(move |s: &Stack| {
                    let mut r = ChaCha8Rng::seed_from_u64(0);
                    let (e, et) = s.encoder.forward(batch, mode, &mut r).unwrap();
                    let (y, ht) = s.head.forward(&e.graphs, Mode::Eval, &mut r).unwrap();
                    let mut pattern = et.relu_pattern();
                    pattern.extend(ht.relu_pattern());
                    (loss(kind, y.data(), labels).unwrap().loss, pattern)
                });
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let (e, et) = stack.encoder.forward(batch, mode, &mut r).unwrap();
                let (y, ht) = stack.head.forward(&e.graphs, Mode::Eval, &mut r).unwrap();
                let lg = loss(kind, y.data(), labels).unwrap();
                let d = Matrix::from_vec(6, 1, lg.grad).unwrap();
                let (hg, de) = stack.head.backward(&ht, &d).unwrap();
                let (eg, _) = stack.encoder.backward(batch, &et, &de, None).unwrap();
                record(probe(&stack, &eg.concat(hg), value, 20, &mut rng));
            }
        }

        let refs: Vec<&CellGraph> = graphs.iter().collect();
        let pairs = build_batch_pairs(&refs, &PretrainConfig::default(), VOCAB, &mut rng)
            .unwrap()
            .expect("sampled cells have rings");
        let model = ContextModel::new(VOCAB, &enc_cfg, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Eval, Mode::Partial] {
            let pairs = &pairs;
            let value: Eval<'_, ContextModel> = Box::new(move |m: &ContextModel| {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let (cl, _, [a, b]) = m.loss_and_gradients(pairs, mode, &mut r).unwrap();
                let mut pattern = a.relu_pattern();
                pattern.extend(b.relu_pattern());
                (cl.loss, pattern)
            });
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (_, g, _) = model.loss_and_gradients(pairs, mode, &mut r).unwrap();
            record(probe(&model, &g, value, 20, &mut rng));
        }
    }
    let pass = worst < 1e-4 && started.elapsed() < Duration::from_secs(60);
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!("{probes} probes, max relative error {worst:.2e}, {kinks} kink-crossing draws redrawn"),
        started,
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_isomorphism_invariance() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let encoder = Encoder::new(VOCAB, &EncoderConfig::default(), &mut rng).unwrap();
    let predictor = Predictor::new(encoder, FinetuneMode::Partial, &mut rng).unwrap();
    let (mut emb_err, mut score_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let g = random_graph(&mut rng);
        let (e0, _) = predictor.encoder.encode_graph(&g, Mode::Partial).unwrap();
        let s0 = predictor.predict_score(&g).unwrap();
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
            perm.shuffle(&mut rng);
            let q = permute(&g, &perm).unwrap();
            let (e1, _) = predictor.encoder.encode_graph(&q, Mode::Partial).unwrap();
            for (a, b) in e0.iter().zip(&e1) {
                emb_err = emb_err.max((a - b).abs());
            }
            score_err = score_err.max((s0 - predictor.predict_score(&q).unwrap()).abs());
        }
    }
    let pass = emb_err <= 1e-9 && score_err <= 1e-9;
    verdict(
        2,
        "isomorphism invariance",
        pass,
        &format!("1000 permutations, max embedding diff {emb_err:.1e}, max score diff {score_err:.1e}"),
        started,
    );
}

// ---------------------------------------------------------------- 3

/// All-pairs undirected hop counts by Floyd-Warshall.
#[allow(clippy::needless_range_loop)]
fn all_pairs_hops(g: &CellGraph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        for j in 0..n {
            if g.has_edge(i, j) || g.has_edge(j, i) {
                d[i][j] = d[i][j].min(1);
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    d
}

#[test]
#[allow(clippy::needless_range_loop)]
fn criterion_03_subgraph_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = 0usize;
    let mut mismatches = 0usize;
    for _ in 0..500 {
        let g = random_graph(&mut rng);
        let d = all_pairs_hops(&g);
        let n = g.num_nodes();
        for v in 0..n {
            for (k, r) in [(1, 2), (1, 3), (2, 3)] {
                checks += 1;
                let central: BTreeSet<usize> = (0..n).filter(|&u| d[v][u] <= k).collect();
                let ring: BTreeSet<usize> = (0..n).filter(|&u| d[v][u] >= k && d[v][u] <= r).collect();
                let anchors: Vec<usize> = central.intersection(&ring).copied().collect();
                let got_central = extract_k_hop(&g, v, k).unwrap();
                let got_ring = extract_context_ring(&g, v, k, r).unwrap();
                let central_ok = got_central.nodes == central.iter().copied().collect::<Vec<_>>();
                let ring_ok = match got_ring {
                    None => anchors.is_empty(),
                    Some(s) => s.nodes == ring.iter().copied().collect::<Vec<_>>() && s.anchors == anchors,
                };
                if !(central_ok && ring_ok) {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(
        3,
        "subgraph oracle",
        mismatches == 0,
        &format!("{checks} (graph, node, K, R) cases, {mismatches} mismatches"),
        started,
    );
}

// ---------------------------------------------------------------- 4

fn brute_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut num, mut untied_x, mut untied_y) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).signum() as i64 * i64::from(x[i] != x[j]);
            let b = (y[i] - y[j]).signum() as i64 * i64::from(y[i] != y[j]);
            num += a * b;
            untied_x += u64::from(a != 0);
            untied_y += u64::from(b != 0);
        }
    }
    num as f64 / ((untied_x as f64) * (untied_y as f64)).sqrt()
}

#[test]
fn criterion_04_kendall_tau_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut cases = 0;
    while cases < 200 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        match kendall_tau(&x, &y) {
            Ok(t) => {
                cases += 1;
                if t != brute_tau_b(&x, &y) {
                    mismatches += 1;
                }
            }
            Err(Error::AllTied(_)) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    let id: Vec<f64> = (0..10).map(f64::from).collect();
    let rev: Vec<f64> = id.iter().rev().copied().collect();
    let identity = kendall_tau(&id, &id).unwrap();
    let reversal = kendall_tau(&id, &rev).unwrap();
    let swap = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    let pass = mismatches == 0 && identity == 1.0 && reversal == -1.0 && (swap - 2.0 / 3.0).abs() <= 1e-12;
    verdict(
        4,
        "Kendall tau oracle",
        pass,
        &format!("{cases} tied vectors, {mismatches} mismatches; identity {identity}, reversal {reversal}, single swap {swap:.6}"),
        started,
    );
}

// ---------------------------------------------------------------- 5

#[test]
#[allow(clippy::approx_constant)]
fn criterion_05_bpr_hand_cases() {
    let started = Instant::now();
    let one = bpr_loss(&[1.0, 0.0], &[0.9, 0.8]).unwrap().loss;
    let equal = bpr_loss(&[0.4, 0.4], &[0.9, 0.8]).unwrap().loss;
    let pass = (one - 0.31326).abs() <= 1e-5 && (equal - 0.69315).abs() <= 1e-5;
    verdict(
        5,
        "BPR hand cases",
        pass,
        &format!("(1,0) -> {one:.6}, equal -> {equal:.6}"),
        started,
    );
}

// ---------------------------------------------------------------- 6, 7

#[test]
fn criterion_06_pretraining_gain() {
    let started = Instant::now();
    let t = gain_table();
    let gain = t.pre100 - t.scratch100;
    let pass = gain > 0.0 && t.pre100 >= 0.5;
    verdict(
        6,
        "pretraining gain at 100 labels",
        pass,
        &format!(
            "mean tau pretrained {:.4}, scratch {:.4}, gain {gain:+.4} over {SEEDS} seeds (table built in {:.1?})",
            t.pre100, t.scratch100, t.elapsed
        ),
        started,
    );
}

#[test]
fn criterion_07_few_label_advantage() {
    let started = Instant::now();
    let t = gain_table();
    let pass = t.pre50 >= t.scratch100;
    verdict(
        7,
        "few-label advantage",
        pass,
        &format!(
            "pretrained@50 {:.4} vs scratch@100 {:.4} (scratch@50 {:.4}, pretrained@100 {:.4})",
            t.pre50, t.scratch100, t.scratch50, t.pre100
        ),
        started,
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_search() {
    let started = Instant::now();
    let spec = SpaceSpec::default();
    let oracle = SyntheticBenchmark { spec: spec.clone() };
    let ecfg = EvolveConfig::default();
    let guide = |seed| {
        PredictorGuide::new(
            Some(pretrained().clone()),
            EncoderConfig::default(),
            FinetuneConfig {
                seed,
                ..Default::default()
            },
            VOCAB,
        )
    };
    let (mut evo, mut rnd) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = evolve(&oracle, Space::Spec(&spec), VOCAB, &mut guide(seed), &ecfg, &mut rng).unwrap();
        evo.push(s.best().unwrap().test_acc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_search(&oracle, Space::Spec(&spec), ecfg.budget, &mut rng).unwrap();
        rnd.push(s.best().unwrap().test_acc);
    }
    let (evo_mean, rnd_mean) = (summarize(&evo).unwrap().mean, summarize(&rnd).unwrap().mean);

    let graphs: Vec<CellGraph> = space().iter().map(|a| a.graph.clone()).collect();
    let table = TableBenchmark::new(space());
    let mut accs: Vec<f64> = space().iter().map(|a| a.test_acc).collect();
    accs.sort_by(|a, b| b.total_cmp(a));
    let cutoff = accs[SPACE_SIZE / 50 - 1];
    let mut hits = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rank_then_query(&table, &graphs, 50, 50, &mut guide(seed), &mut rng).unwrap();
        hits += usize::from(s.best().unwrap().test_acc >= cutoff);
    }
    let pass = evo_mean > rnd_mean && hits >= 8 && started.elapsed() < Duration::from_secs(300);
    verdict(
        8,
        "search",
        pass,
        &format!(
            "evolve mean best {evo_mean:.4} vs random {rnd_mean:.4}; rank_then_query top-2% on {hits}/{SEEDS} seeds"
        ),
        started,
    );
}

// ---------------------------------------------------------------- 9

fn cap(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cap"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_09_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = "seed = 5\noutput_dir = \"out\"\n[data]\nsize = 200\n[pretrain]\nepochs = 2\n\
                  [finetune]\nepochs = 10\n[split]\nn_train = 40\nruns = 2\n\
                  [search]\nbudget = 40\npop_size = 10\nn_train = 20\ntop_k = 20\n";
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["generate", "--config", "exp.toml"],
        vec!["pretrain", "--config", "exp.toml"],
        vec!["rank", "--config", "exp.toml", "--scratch"],
        vec![
            "rank",
            "--config",
            "exp.toml",
            "--pretrained",
            "out/pretrain_checkpoint.json",
        ],
        vec![
            "search",
            "--config",
            "exp.toml",
            "--strategy",
            "evolve",
            "--pretrained",
            "out/pretrain_checkpoint.json",
        ],
        vec!["search", "--config", "exp.toml", "--strategy", "rank_then_query"],
        vec!["search", "--config", "exp.toml", "--strategy", "random"],
        vec![
            "embed",
            "--checkpoint",
            "out/pretrain_checkpoint.json",
            "--dataset",
            "out/dataset.jsonl",
            "--output",
            "out/embed.csv",
        ],
    ];
    let run_all = || {
        for c in &commands {
            let out = cap(c, dir.path());
            assert!(out.status.success(), "{c:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        snapshot(&dir.path().join("out"))
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let pass = first.len() == 14 && first.len() == second.len() && differing.is_empty();
    verdict(
        9,
        "determinism",
        pass,
        &format!(
            "{} commands, {} result files, differing: {differing:?}",
            commands.len(),
            first.len()
        ),
        started,
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_dataset_contract() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let records = synthetic_dataset(&SpaceSpec::default(), 1000, 10).unwrap();
    write_dataset(&path, &records).unwrap();
    let back = read_dataset(&path).unwrap();
    let identity = back == records;

    let good = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = good.lines().take(6).collect();
    let mut bad_cases: Vec<(usize, String)> = Vec::new();
    let mut v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    v.as_object_mut().unwrap().remove("adj");
    bad_cases.push((3, v.to_string()));
    let mut v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    v["val_acc"] = serde_json::json!(1.5);
    bad_cases.push((5, v.to_string()));
    bad_cases.push((2, "{not json".to_string()));
    let mut rejected = 0;
    for (line_no, bad) in &bad_cases {
        let mut text: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        text[line_no - 1] = bad.clone();
        let p = dir.path().join(format!("bad{line_no}.jsonl"));
        std::fs::write(&p, text.join("\n") + "\n").unwrap();
        if let Err(Error::Dataset { line, .. }) = read_dataset(&p) {
            rejected += usize::from(line == *line_no);
        }
    }
    let pass = identity && rejected == bad_cases.len();
    verdict(
        10,
        "dataset contract",
        pass,
        &format!(
            "1000-record round trip identical: {identity}; {rejected}/{} malformed lines rejected at the right line",
            bad_cases.len()
        ),
        started,
    );
}
