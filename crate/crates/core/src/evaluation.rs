//! Kendall's tau-b, seeded data splits and ranking reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::AnnotatedArch;
use crate::error::{Error, Result};
use crate::predictor::Scorer;

/// Tie-corrected Kendall rank correlation, O(n log n).
///
/// Fails with [`Error::AllTied`] when either input has no two distinct values.
pub fn kendall_tau(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "kendall tau over {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Empty("kendall tau needs at least two items"));
    }
    if pred.iter().chain(truth).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("kendall tau input".into()));
    }
    let n = pred.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(truth[a].total_cmp(&truth[b])));

    let n0 = (n * (n - 1) / 2) as u64;
    let ties_pred = tied_pairs(idx.iter().map(|&i| pred[i]));
    let ties_joint = joint_tied_pairs(&idx, pred, truth);
    let mut ys: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
    let swaps = merge_sort_count(&mut ys);
    let ties_truth = tied_pairs(ys.iter().copied());

    if ties_pred == n0 {
        return Err(Error::AllTied("pred"));
    }
    if ties_truth == n0 {
        return Err(Error::AllTied("truth"));
    }
    let num = n0 as i64 - ties_pred as i64 - ties_truth as i64 + ties_joint as i64 - 2 * swaps as i64;
    Ok(tau_from_counts(num, n0 - ties_pred, n0 - ties_truth))
}

/// `(concordant - discordant) / sqrt(untied_pred * untied_truth)`.
pub(crate) fn tau_from_counts(num: i64, untied_pred: u64, untied_truth: u64) -> f64 {
    num as f64 / ((untied_pred as f64) * (untied_truth as f64)).sqrt()
}

/// Pairs sharing a value in an already sorted sequence.
fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for x in sorted {
        if prev == Some(x) {
            run += 1;
        } else {
            total += run * (run.saturating_sub(1)) / 2;
            run = 1;
        }
        prev = Some(x);
    }
    total + run * (run.saturating_sub(1)) / 2
}

fn joint_tied_pairs(idx: &[usize], pred: &[f64], truth: &[f64]) -> u64 {
    let mut total = 0;
    let mut start = 0;
    for i in 1..=idx.len() {
        if i == idx.len() || pred[idx[i]] != pred[idx[i - 1]] || truth[idx[i]] != truth[idx[i - 1]] {
            let run = (i - start) as u64;
            total += run * (run - 1) / 2;
            start = i;
        }
    }
    total
}

/// Sorts ascending and returns the number of strict inversions.
fn merge_sort_count(xs: &mut [f64]) -> u64 {
    let n = xs.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_sort_count(&mut xs[..mid]) + merge_sort_count(&mut xs[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if xs[j] < xs[i] {
            merged.push(xs[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            merged.push(xs[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&xs[i..mid]);
    merged.extend_from_slice(&xs[j..]);
    xs.copy_from_slice(&merged);
    swaps
}

/// Fraction of strictly ordered label pairs whose scores are in the same
/// strict order.
pub fn pairwise_accuracy(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("scores and labels differ in length".into()));
    }
    let (mut ordered, mut correct) = (0u64, 0u64);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                ordered += 1;
                correct += u64::from(scores[i] > scores[j]);
            }
        }
    }
    if ordered == 0 {
        return Err(Error::NoOrderedPair);
    }
    Ok(correct as f64 / ordered as f64)
}

/// Disjoint train/validation/test ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

/// Uniform random split; `n_test = None` takes every remaining id.
pub fn make_split<T: Clone>(
    ids: &[T],
    n_train: usize,
    n_val: usize,
    n_test: Option<usize>,
    seed: u64,
) -> Result<Split<T>> {
    let requested = n_train + n_val + n_test.unwrap_or(0);
    if requested > ids.len() {
        return Err(Error::InsufficientIds {
            requested,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng);
    let pick = |r: &[usize]| r.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    let test_end = n_test.map_or(ids.len(), |t| n_train + n_val + t);
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..test_end]),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub tau: f64,
    pub n: usize,
}

/// Scores every test architecture and correlates with its test accuracy.
pub fn evaluate_ranking(scorer: &dyn Scorer, test: &[AnnotatedArch]) -> Result<RankReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let graphs: Vec<_> = test.iter().map(|a| &a.graph).collect();
    let scores = scorer.score(&graphs)?;
    let truth: Vec<f64> = test.iter().map(|a| a.test_acc).collect();
    Ok(RankReport {
        tau: kendall_tau(&scores, &truth)?,
        n: test.len(),
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("summary values"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, std, n })
}
