//! Score head, ranking/regression losses and the three fine-tuning regimes.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::AnnotatedArch;
use crate::error::{Error, Result};
use crate::graph::CellGraph;
use crate::nn::{Adam, AdamState, Encoder, EncoderConfig, GraphBatch, Matrix, Mlp, Mode};

/// Anything that assigns a higher-is-better score to architectures.
pub trait Scorer {
    fn score(&self, graphs: &[&CellGraph]) -> Result<Vec<f64>>;
}

impl<F: Fn(&CellGraph) -> f64> Scorer for F {
    fn score(&self, graphs: &[&CellGraph]) -> Result<Vec<f64>> {
        Ok(graphs.iter().map(|g| self(g)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Encoder frozen, only the head is trained.
    DecoderOnly,
    /// Everything trained, encoder in train mode.
    Full,
    /// Everything trained, batch-norm and dropout bypassed.
    #[default]
    Partial,
}

impl FinetuneMode {
    /// Encoder mode used for scoring.
    pub fn inference_mode(self) -> Mode {
        match self {
            FinetuneMode::Partial => Mode::Partial,
            FinetuneMode::DecoderOnly | FinetuneMode::Full => Mode::Eval,
        }
    }

    fn training_mode(self) -> Mode {
        match self {
            FinetuneMode::DecoderOnly => Mode::Eval,
            FinetuneMode::Full => Mode::Train,
            FinetuneMode::Partial => Mode::Partial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bpr,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Set per run by the caller, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Partial,
            loss: LossKind::Bpr,
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 || (self.loss == LossKind::Bpr && self.batch_size < 2) {
            return Err(Error::Config(
                "finetune batch_size must be >= 2 for bpr and >= 1 for mse".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("finetune learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder plus a two-layer regression head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub encoder: Encoder,
    pub head: Mlp,
    pub mode: FinetuneMode,
}

const SCORE_CHUNK: usize = 256;

impl Predictor {
    pub fn new(encoder: Encoder, mode: FinetuneMode, rng: &mut dyn RngCore) -> Result<Self> {
        let d = encoder.embed_dim;
        let head = Mlp::new(&[d, d, 1], false, 0.0, 0.0, rng)?;
        Ok(Self { encoder, head, mode })
    }

    /// Scores in the mode's inference setting; deterministic.
    pub fn predict(&self, graphs: &[&CellGraph]) -> Result<Vec<f64>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(SCORE_CHUNK) {
            let batch = GraphBatch::from_graphs(chunk.iter().copied(), self.encoder.input_dim)?;
            let emb = self.encoder.infer(&batch, self.mode.inference_mode())?;
            let (s, _) = self.head.forward(&emb.graphs, Mode::Eval, &mut unused)?;
            out.extend_from_slice(s.data());
        }
        Ok(out)
    }

    pub fn predict_score(&self, graph: &CellGraph) -> Result<f64> {
        Ok(self.predict(&[graph])?[0])
    }
}

impl Scorer for Predictor {
    fn score(&self, graphs: &[&CellGraph]) -> Result<Vec<f64>> {
        self.predict(graphs)
    }
}

/// Loss value and its gradient with respect to the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_scores(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// `-(1/|D|) sum ln sigmoid(s_i - s_j)` over pairs with `label_i > label_j`.
pub fn bpr_loss(scores: &[f64], labels: &[f64]) -> Result<LossGrad> {
    check_scores(scores, labels)?;
    let mut pairs = 0usize;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] > labels[j] {
                let d = scores[i] - scores[j];
                loss += softplus(-d);
                let g = sigmoid(-d);
                grad[i] -= g;
                grad[j] += g;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::NoOrderedPair);
    }
    let inv = 1.0 / pairs as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossGrad { loss: loss * inv, grad })
}

pub fn mse_loss(scores: &[f64], labels: &[f64]) -> Result<LossGrad> {
    check_scores(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Empty("mse batch"));
    }
    let n = scores.len() as f64;
    let loss = scores.iter().zip(labels).map(|(s, y)| (s - y).powi(2)).sum::<f64>() / n;
    let grad = scores.iter().zip(labels).map(|(s, y)| 2.0 * (s - y) / n).collect();
    Ok(LossGrad { loss, grad })
}

pub fn loss(kind: LossKind, scores: &[f64], labels: &[f64]) -> Result<LossGrad> {
    match kind {
        LossKind::Bpr => bpr_loss(scores, labels),
        LossKind::Mse => mse_loss(scores, labels),
    }
}

/// Fine-tuned predictor with its optimizer moments and per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub predictor: Predictor,
    pub encoder_optimizer: AdamState,
    pub head_optimizer: AdamState,
    pub history: Vec<f64>,
}

/// Trains on `val_acc`. Without `pretrained` the encoder is initialized
/// fresh from `cfg.seed`.
pub fn finetune(
    pretrained: Option<&Encoder>,
    data: &[AnnotatedArch],
    cfg: &FinetuneConfig,
    encoder_cfg: &EncoderConfig,
    vocab_size: usize,
) -> Result<FinetuneOutput> {
    if data.is_empty() {
        return Err(Error::Empty("fine-tuning data"));
    }
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = match pretrained {
        Some(e) => e.clone(),
        None => Encoder::new(vocab_size, encoder_cfg, &mut rng)?,
    };
    let mut p = Predictor::new(encoder, cfg.mode, &mut rng)?;
    let mut enc_opt = Adam::new(cfg.learning_rate);
    let mut head_opt = Adam::new(cfg.learning_rate);
    let train_mode = cfg.mode.training_mode();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<f64> = chunk.iter().map(|&i| data[i].val_acc).collect();
            let batch = GraphBatch::from_graphs(chunk.iter().map(|&i| &data[i].graph), p.encoder.input_dim)?;
            let (emb, enc_tape) = p.encoder.forward(&batch, train_mode, &mut rng)?;
            let (scores, head_tape) = p.head.forward(&emb.graphs, Mode::Eval, &mut rng)?;
            let lg = match loss(cfg.loss, scores.data(), &labels) {
                Ok(lg) => lg,
                Err(Error::NoOrderedPair) => continue,
                Err(e) => return Err(e),
            };
            if !lg.loss.is_finite() {
                return Err(Error::Diverged(format!("fine-tuning loss at epoch {epoch}")));
            }
            let d_scores = Matrix::from_vec(chunk.len(), 1, lg.grad)?;
            let (head_grads, d_emb) = p.head.backward(&head_tape, &d_scores)?;
            head_opt.step(&mut p.head, &head_grads).map_err(diverged)?;
            if cfg.mode != FinetuneMode::DecoderOnly {
                let (enc_grads, _) = p.encoder.backward(&batch, &enc_tape, &d_emb, None)?;
                enc_opt.step(&mut p.encoder, &enc_grads).map_err(diverged)?;
                if train_mode == Mode::Train {
                    p.encoder.update_running_stats(&enc_tape);
                }
            }
            total += lg.loss;
            batches += 1;
        }
        history.push(if batches > 0 { total / batches as f64 } else { f64::NAN });
    }
    Ok(FinetuneOutput {
        predictor: p,
        encoder_optimizer: enc_opt.state,
        head_optimizer: head_opt.state,
        history,
    })
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged(format!("non-finite {what} during fine-tuning")),
        other => other,
    }
}
