//! Identification metrics and the approximate-randomization test.
//!
//! Ranking ties are broken by the lower class index everywhere, so results
//! do not depend on sort stability or platform.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{bail, Result};
use crate::rng;

/// Class indices ordered by descending score, ties by ascending index.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Number of classes ranked strictly ahead of `label`.
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

fn check_scores<S: AsRef<[f64]>>(scores: &[S], labels: &[usize]) -> Result<usize> {
    if scores.is_empty() {
        bail!(Usage, "no predictions to score");
    }
    if scores.len() != labels.len() {
        bail!(Usage, "{} score vectors for {} labels", scores.len(), labels.len());
    }
    let n = scores[0].as_ref().len();
    if scores.iter().any(|s| s.as_ref().len() != n) {
        bail!(Usage, "score vectors differ in length");
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n) {
        bail!(Data, "label {l} out of range for {n} classes");
    }
    Ok(n)
}

/// Fraction of items whose label is among the `k` highest scores; `k` is
/// clamped to the number of classes.
pub fn topk_accuracy<S: AsRef<[f64]>>(scores: &[S], labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        bail!(Usage, "k must be >= 1");
    }
    let n = check_scores(scores, labels)?;
    let k = k.min(n);
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| rank_of(s.as_ref(), l) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Argmax with ties to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    rank_classes(scores)[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class precision, recall and F1 averaged with weights proportional to
/// true-class support. A class never predicted has precision 0.
pub fn weighted_prf(truth: &[usize], pred: &[usize]) -> Result<Prf> {
    if truth.is_empty() {
        bail!(Usage, "weighted_prf on empty input");
    }
    if truth.len() != pred.len() {
        bail!(Usage, "{} true labels vs {} predictions", truth.len(), pred.len());
    }
    let classes = truth.iter().chain(pred).max().map_or(0, |m| m + 1);
    let mut support = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let total = truth.len() as f64;
    let mut out = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let w = support[c] as f64 / total;
        let p = if predicted[c] > 0 {
            correct[c] as f64 / predicted[c] as f64
        } else {
            0.0
        };
        let r = correct[c] as f64 / support[c] as f64;
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        out.precision += w * p;
        out.recall += w * r;
        out.f1 += w * f;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub label: usize,
    /// Up to five best classes, best first.
    pub ranked: Vec<usize>,
    pub top1: bool,
    pub top5: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub items: Vec<EvalItem>,
    pub top1: f64,
    pub top5: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn top1_flags(&self) -> Vec<f64> {
        self.items.iter().map(|i| if i.top1 { 1.0 } else { 0.0 }).collect()
    }
}

pub fn evaluate<S: AsRef<[f64]>>(scores: &[S], labels: &[usize]) -> Result<EvalReport> {
    let n = check_scores(scores, labels)?;
    let k5 = 5.min(n);
    let items: Vec<EvalItem> = scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| {
            let s = s.as_ref();
            let rank = rank_of(s, l);
            let mut ranked = rank_classes(s);
            ranked.truncate(k5);
            EvalItem {
                label: l,
                ranked,
                top1: rank == 0,
                top5: rank < k5,
            }
        })
        .collect();
    let pred: Vec<usize> = items.iter().map(|i| i.ranked[0]).collect();
    let prf = weighted_prf(labels, &pred)?;
    let frac = |f: fn(&EvalItem) -> bool| items.iter().filter(|i| f(i)).count() as f64 / items.len() as f64;
    Ok(EvalReport {
        top1: frac(|i| i.top1),
        top5: frac(|i| i.top5),
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        items,
    })
}

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ArResult {
    /// `|mean(a) - mean(b)|`.
    pub observed: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

/// Paired two-sided approximate randomization test.
///
/// Each round swaps every pair `(a_i, b_i)` with probability 1/2 and
/// recomputes `|mean(a) - mean(b)|`. The p-value is
/// `(#{rounds with statistic >= observed} + 1) / (rounds + 1)`.
pub fn approx_randomization(a: &[f64], b: &[f64], n_permutations: usize, seed: u64) -> Result<ArResult> {
    if a.len() != b.len() {
        bail!(Usage, "paired scores differ in length ({} vs {})", a.len(), b.len());
    }
    if a.is_empty() {
        bail!(Usage, "approximate randomization on empty scores");
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed_sum = libm::fabs(diffs.iter().sum::<f64>());
    let tol = 1e-12 * observed_sum.max(1.0);
    let mut rng = rng::stream(seed, "ar");
    let mut at_least = 0usize;
    for _ in 0..n_permutations {
        let mut sum = 0.0;
        for chunk in diffs.chunks(64) {
            let bits = rng.next_u64();
            for (i, d) in chunk.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    sum -= d;
                } else {
                    sum += d;
                }
            }
        }
        if libm::fabs(sum) >= observed_sum - tol {
            at_least += 1;
        }
    }
    Ok(ArResult {
        observed: observed_sum / a.len() as f64,
        p_value: (at_least + 1) as f64 / (n_permutations + 1) as f64,
        n_permutations,
        seed,
    })
}
