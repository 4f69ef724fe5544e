//! Text-overlap scores, embedding cosine, answer accuracy and judge-sheet
//! aggregation.
//!
//! BLEU and ROUGE are reported on a 0–100 scale. BLEU is corpus-level and
//! unsmoothed; ROUGE scores are means of per-pair F1.

mod judge;
mod report;

pub use judge::{judge_aggregate, JudgeReport, JudgeSheet, Preference};
pub use report::{evaluate_model, EmbeddingTable, Evaluation, MetricsReport, RationaleSource, RecordOutput};

use std::collections::BTreeMap;

use crate::error::{contract, Result};

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Size of the multiset intersection of the n-grams of `a` and `b`.
fn clipped_overlap<T: Ord>(cand: &[T], reference: &[T], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(cand, n)
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`.
pub fn bleu<T: Ord>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return contract("BLEU over an empty corpus");
    }
    if candidates.len() != references.len() {
        return contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        ));
    }
    if max_n == 0 {
        return contract("BLEU order must be at least 1");
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let mut matched = 0;
        let mut total = 0;
        for (c, r) in candidates.iter().zip(references) {
            matched += clipped_overlap(c, r, n);
            total += c.len().saturating_sub(n - 1);
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_p += (matched as f64 / total as f64).ln() / max_n as f64;
    }
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0);
    Ok(100.0 * (log_p + bp).exp())
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// ROUGE-N F1 for one pair. Pairs shorter than `n` score 0.
pub fn rouge_n<T: Ord>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return contract("ROUGE order must be at least 1");
    }
    if candidate.len() < n || reference.len() < n {
        return Ok(0.0);
    }
    let overlap = clipped_overlap(candidate, reference, n);
    Ok(f1(overlap, candidate.len() + 1 - n, reference.len() + 1 - n))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 for one pair.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    f1(lcs_len(candidate, reference), candidate.len(), reference.len())
}

fn check_pairs<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.is_empty() {
        return contract("metric over an empty corpus");
    }
    if candidates.len() != references.len() {
        return contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        ));
    }
    Ok(())
}

/// Corpus mean of per-pair ROUGE-N.
pub fn mean_rouge_n<T: Ord>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    check_pairs(candidates, references)?;
    let mut s = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        s += rouge_n(c, r, n)?;
    }
    Ok(s / candidates.len() as f64)
}

/// Corpus mean of per-pair ROUGE-L.
pub fn mean_rouge_l<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let s: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(s / candidates.len() as f64)
}

/// Mean cosine between mean-pooled token vectors of each pair.
pub fn sentence_cosine<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    table: &EmbeddingTable,
) -> Result<f64> {
    check_pairs(candidates, references)?;
    let s: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cosine(&table.sentence_vector(c), &table.sentence_vector(r)))
        .sum();
    Ok(s / candidates.len() as f64)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Percent of predictions equal to the gold index.
pub fn vqa_accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    check_pairs(predictions, gold)?;
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

#[cfg(test)]
mod tests;
