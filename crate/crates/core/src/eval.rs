//! Corpus BLEU, forward/backward consistency and copy-constraint analysis.
//!
//! Inputs are pre-tokenized; nothing here re-tokenizes.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "k")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds `k` to matches and totals of every order above one.
    AddK(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with clipped n-gram precisions and the exponential
/// brevity penalty, on a 0–100 scale.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize, smoothing: Smoothing) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::Input("no hypotheses".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be positive".into()));
    }
    let mut matches = vec![0.0; max_n];
    let mut totals = vec![0.0; max_n];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &hc {
                matches[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0)) as f64;
                totals[n - 1] += *k as f64;
            }
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = match smoothing {
                Smoothing::AddK(k) if i > 0 => (matches[i] + k, totals[i] + k),
                _ => (matches[i], totals[i]),
            };
            if t > 0.0 {
                m / t
            } else {
                0.0
            }
        })
        .collect();
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        100.0 * bp * mean_log.exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// BLEU-4 without smoothing.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    Ok(corpus_bleu(hyps, refs, 4, Smoothing::None)?.score)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyMode {
    /// Mean of BLEU in both directions.
    #[default]
    Symmetric,
    /// BLEU of the forward outputs against the reversed backward outputs.
    Forward,
}

/// Agreement between left-to-right outputs and right-to-left outputs (given
/// in right-to-left order, reversed here before comparison).
pub fn consistency_score<T: Eq + Hash + Clone>(fwd: &[Vec<T>], bwd: &[Vec<T>], mode: ConsistencyMode) -> Result<f64> {
    let rev: Vec<Vec<T>> = bwd.iter().map(|s| s.iter().rev().cloned().collect()).collect();
    let a = bleu(fwd, &rev)?;
    Ok(match mode {
        ConsistencyMode::Forward => a,
        ConsistencyMode::Symmetric => 0.5 * (a + bleu(&rev, fwd)?),
    })
}

/// Percentages of source token occurrences by where they reappear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyReport {
    pub exclusive: f64,
    pub both: f64,
    pub punct: f64,
    pub lost: f64,
}

/// Token made only of punctuation, symbols or digits.
pub fn is_punct_or_digit(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_numeric() || !(c.is_alphabetic() || c.is_whitespace()))
}

/// Classifies each source token occurrence by whether it reappears in one
/// output, both outputs, or neither. Counts are clipped: a type occurring
/// `c` times in the source is covered at most `min(c, c1 + c2)` times, and as
/// many covered occurrences as the counts allow are credited to both outputs.
/// Punctuation and digits found in both outputs form their own category.
pub fn copy_constraint_report<S: AsRef<str>>(src: &[S], hyp1: &[S], hyp2: &[S]) -> Result<CopyReport> {
    if src.is_empty() {
        return Err(Error::Input("empty source".into()));
    }
    fn count<S: AsRef<str>>(xs: &[S]) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for x in xs {
            *m.entry(x.as_ref()).or_insert(0) += 1;
        }
        m
    }
    let (cs, c1, c2) = (count(src), count(hyp1), count(hyp2));
    let (mut excl, mut both, mut punct, mut lost) = (0usize, 0usize, 0usize, 0usize);
    for (tok, &n) in &cs {
        let a = c1.get(tok).copied().unwrap_or(0);
        let b = c2.get(tok).copied().unwrap_or(0);
        let cov = n.min(a + b);
        let shared = a.min(b).min(a + b - cov).min(cov);
        lost += n - cov;
        excl += cov - shared;
        if is_punct_or_digit(tok) {
            punct += shared;
        } else {
            both += shared;
        }
    }
    let pct = |x: usize| 100.0 * x as f64 / src.len() as f64;
    Ok(CopyReport {
        exclusive: pct(excl),
        both: pct(both),
        punct: pct(punct),
        lost: pct(lost),
    })
}
