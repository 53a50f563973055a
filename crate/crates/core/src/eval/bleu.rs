use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    pub bleu: f64,
    /// Modified precisions p_1..p_4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, hypothesis n-grams) for order `n`.
fn clipped<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hyp, n);
    let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Unsmoothed corpus BLEU-4 with a single reference per hypothesis.
pub fn bleu4<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("BLEU needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::ExtentMismatch {
            what: "BLEU references",
            expected: hypotheses.len(),
            found: references.len(),
        });
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut ref_totals = [0usize; MAX_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped(h, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
            ref_totals[n - 1] += r.len().saturating_sub(n - 1);
        }
    }
    // An order with no n-grams on either side has nothing to miss.
    let precisions = std::array::from_fn(|i| match (totals[i], ref_totals[i]) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (t, _) => matches[i] as f64 / t as f64,
    });
    let hyp_len = hypotheses.iter().map(Vec::len).sum();
    let ref_len = references.iter().map(Vec::len).sum();
    let brevity_penalty = brevity_penalty(hyp_len, ref_len);
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Add-one smoothed sentence BLEU-4, for diagnostics.
pub fn sentence_bleu4<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> f64 {
    let log_mean = (1..=MAX_ORDER)
        .map(|n| {
            let (m, t) = clipped(hyp, reference, n);
            ((m + 1) as f64 / (t + 1) as f64).ln()
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    brevity_penalty(hyp.len(), reference.len()) * log_mean.exp()
}

pub fn tokenize_lines(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split_whitespace().map(str::to_owned).collect()).collect()
}
