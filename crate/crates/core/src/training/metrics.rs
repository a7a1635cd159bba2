use std::collections::HashMap;
use std::hash::Hash;

use super::TrainError;

/// Stand-in precision for an n-gram order with no clipped matches.
pub const BLEU_SMOOTHING: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

fn check_aligned<W>(candidates: &[Vec<W>], references: &[Vec<Vec<W>>]) -> Result<(), TrainError> {
    if candidates.is_empty() {
        return Err(TrainError::Contract(
            "metric needs at least one candidate".into(),
        ));
    }
    if candidates.len() != references.len() {
        return Err(TrainError::Contract(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(TrainError::Contract(format!("item {i} has no references")));
    }
    Ok(())
}

fn ngram_counts<W: Hash + Eq>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform 1..4-gram weights, clipped counts and the
/// brevity penalty against the closest reference length per item.
pub fn bleu4<W: Hash + Eq>(
    candidates: &[Vec<W>],
    references: &[Vec<Vec<W>>],
) -> Result<f64, TrainError> {
    check_aligned(candidates, references)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .unwrap_or(0);
        for n in 1..=4 {
            let counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[W], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if matches[n] == 0 {
            BLEU_SMOOTHING
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<W: Eq>(a: &[W], b: &[W]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_pair<W: Eq>(cand: &[W], reference: &[W]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// LCS F-measure, best reference per item, averaged over items.
pub fn rouge_l<W: Eq>(
    candidates: &[Vec<W>],
    references: &[Vec<Vec<W>>],
) -> Result<f64, TrainError> {
    check_aligned(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| rouge_pair(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / candidates.len() as f64)
}
