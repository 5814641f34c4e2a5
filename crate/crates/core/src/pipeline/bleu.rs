//! Corpus-level 4-gram BLEU with brevity penalty.
//!
//! Modified n-gram precisions are summed over the whole corpus. Zero
//! higher-order precisions (n ≥ 2) are smoothed by adding one to both the
//! clipped-match count and the total; unigram precision is left unsmoothed so
//! garbage output still scores zero.

use super::PipelineError;
use std::collections::HashMap;

const MAX_N: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Scores `hypotheses` against one reference each, returning a value in
/// [0, 100]. All-empty hypotheses score 0.
pub fn corpus_bleu(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<f64, PipelineError> {
    if hypotheses.len() != references.len() {
        return Err(PipelineError::CountMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(PipelineError::Empty { what: "corpus" });
    }

    let mut clipped = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, re) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += re.len();
        for n in 1..=MAX_N {
            let ref_counts = ngram_counts(re, n);
            for (gram, count) in ngram_counts(hyp, n) {
                let allowed = ref_counts.get(gram).copied().unwrap_or(0);
                clipped[n - 1] += count.min(allowed);
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 1..=MAX_N {
        let (mut num, mut den) = (clipped[n - 1] as f64, totals[n - 1] as f64);
        if n >= 2 && num == 0.0 {
            num += 1.0;
            den += 1.0;
        }
        if num == 0.0 || den == 0.0 {
            return Ok(0.0); // no unigram matches: log precision is -inf
        }
        log_sum += (num / den).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / MAX_N as f64).exp())
}
