//! Token-level error rate via Levenshtein alignment with operation counts.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerBreakdown {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal-edit alignment of hypothesis against reference. The reference
/// must be nonempty for the rate to be defined.
pub fn word_error_rate(hypothesis: &[usize], reference: &[usize]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::usage("WER undefined for an empty reference".to_string()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    // dp[i][j]: cost of aligning ref[..i] with hyp[..j]
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        dp[i][0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }

    // Backtrace for S/D/I counts, preferring matches/substitutions.
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + sub_cost {
                s += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown {
        wer: (s + d + ins) as f64 / n as f64,
        substitutions: s,
        deletions: d,
        insertions: ins,
        reference_len: n,
    })
}
