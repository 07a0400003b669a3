//! Word-level edit distance, corpus WER and relative WER reduction.

use crate::error::{Error, Result};

/// Counts from one minimal word alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `None` when the reference is empty.
    pub fn wer(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.errors() as f64 / self.ref_words as f64)
    }
}

impl std::ops::AddAssign for WerBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.substitutions += rhs.substitutions;
        self.deletions += rhs.deletions;
        self.insertions += rhs.insertions;
        self.ref_words += rhs.ref_words;
    }
}

/// Splits on single spaces after trimming; empty pieces are dropped.
pub fn words(text: &str) -> Vec<&str> {
    text.trim().split(' ').filter(|w| !w.is_empty()).collect()
}

// Lexicographic cost: total edits, then insertions, then deletions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Cost {
    total: usize,
    ins: usize,
    del: usize,
}

impl Cost {
    const ZERO: Cost = Cost {
        total: 0,
        ins: 0,
        del: 0,
    };

    fn sub(self) -> Cost {
        Cost {
            total: self.total + 1,
            ..self
        }
    }

    fn ins(self) -> Cost {
        Cost {
            total: self.total + 1,
            ins: self.ins + 1,
            ..self
        }
    }

    fn del(self) -> Cost {
        Cost {
            total: self.total + 1,
            del: self.del + 1,
            ..self
        }
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`. Among
/// cost-minimal alignments the one with fewest insertions, then fewest
/// deletions, is reported.
pub fn edit_distance<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> WerBreakdown {
    let n = reference.len();
    let m = hyp.len();
    let width = m + 1;
    let mut table = vec![Cost::ZERO; (n + 1) * width];
    for j in 1..=m {
        table[j] = table[j - 1].ins();
    }
    for i in 1..=n {
        table[i * width] = table[(i - 1) * width].del();
        for j in 1..=m {
            let diag = table[(i - 1) * width + j - 1];
            let matched = if reference[i - 1].as_ref() == hyp[j - 1].as_ref() {
                diag
            } else {
                diag.sub()
            };
            let deleted = table[(i - 1) * width + j].del();
            let inserted = table[i * width + j - 1].ins();
            table[i * width + j] = matched.min(deleted).min(inserted);
        }
    }
    let best = table[n * width + m];
    WerBreakdown {
        substitutions: best.total - best.ins - best.del,
        deletions: best.del,
        insertions: best.ins,
        ref_words: n,
    }
}

/// Edit-distance breakdown of two whitespace-separated transcripts.
pub fn text_breakdown(reference: &str, hyp: &str) -> WerBreakdown {
    edit_distance(&words(reference), &words(hyp))
}

/// Σ(S+D+I) / Σ ref_words over `(reference, hypothesis)` pairs.
pub fn corpus_wer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<f64> {
    let mut total = WerBreakdown::default();
    for (r, h) in pairs {
        total += text_breakdown(r.as_ref(), h.as_ref());
    }
    total
        .wer()
        .ok_or_else(|| Error::Metric("corpus has zero reference words".into()))
}

/// Relative WER reduction in percent. Negative when the model is worse than
/// the reference system.
pub fn werr(wer_reference: f64, wer_model: f64) -> Result<f64> {
    if !(wer_reference > 0.0) {
        return Err(Error::Metric(format!(
            "reference WER must be positive, got {wer_reference}"
        )));
    }
    Ok(100.0 * (wer_reference - wer_model) / wer_reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bd(r: &str, h: &str) -> (usize, usize, usize) {
        let b = text_breakdown(r, h);
        (b.substitutions, b.deletions, b.insertions)
    }

    #[test]
    fn identical_sequences_have_no_errors() {
        assert_eq!(bd("a b c", "a b c"), (0, 0, 0));
    }

    #[test]
    fn empty_reference_counts_insertions() {
        assert_eq!(bd("", "x y"), (0, 0, 2));
        assert_eq!(text_breakdown("", "x y").wer(), None);
    }

    #[test]
    fn substitution_and_deletion() {
        assert_eq!(bd("a b c d", "a x c"), (1, 1, 0));
    }

    #[test]
    fn prefers_substitution_over_insert_delete_pair() {
        // "a" vs "b": one substitution beats delete + insert.
        assert_eq!(bd("a", "b"), (1, 0, 0));
        // Equal totals: fewer insertions wins.
        assert_eq!(bd("a b", "b c"), (2, 0, 0));
    }

    #[test]
    fn corpus_wer_sums_over_pairs() {
        assert_eq!(corpus_wer(&[("a b", "a b"), ("c", "c")]).unwrap(), 0.0);
        assert_eq!(corpus_wer(&[("a b c d", "a x c")]).unwrap(), 0.5);
        let mixed = [("a b c d", "a x c"), ("e f", "e f g h")];
        // (1+1) + 2 insertions over 6 reference words.
        assert!((corpus_wer(&mixed).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(matches!(corpus_wer(&[("", "x")]), Err(Error::Metric(_))));
    }

    #[test]
    fn wer_may_exceed_one() {
        assert_eq!(corpus_wer(&[("a", "x y z")]).unwrap(), 3.0);
    }

    #[test]
    fn adjacent_swap_costs_two() {
        let b = text_breakdown("a b c d", "a c b d");
        assert_eq!(b.errors(), 2);
        assert_eq!(b.wer(), Some(0.5));
    }

    #[test]
    fn werr_values() {
        assert_eq!(werr(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(werr(0.20, 0.10).unwrap(), 50.0);
        assert!((werr(0.2000, 0.1306).unwrap() - 34.7).abs() < 0.05);
        assert!(werr(0.2, 0.25).unwrap() < 0.0);
        assert!(werr(0.0, 0.1).is_err());
        assert!(werr(-1.0, 0.1).is_err());
    }

    #[test]
    fn werr_strictly_decreasing_in_model_wer() {
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let w = werr(0.2, k as f64 * 0.01).unwrap();
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn words_split_on_single_spaces() {
        assert_eq!(words("  ab cd  "), vec!["ab", "cd"]);
        assert!(words("").is_empty());
    }
}
