//! Perplexity and BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::text::TokenId;

/// Anything that assigns a log-probability to a sentence.
pub trait SentenceScorer {
    /// Natural-log probability of `sentence` followed by EOS. May be
    /// negative infinity.
    fn sentence_logprob(&self, sentence: &[TokenId]) -> Result<f64>;
}

impl SentenceScorer for crate::ngram::NgramModel {
    fn sentence_logprob(&self, sentence: &[TokenId]) -> Result<f64> {
        Ok(crate::ngram::NgramModel::sentence_logprob(self, sentence))
    }
}

impl SentenceScorer for crate::ngram::ArpaModel {
    fn sentence_logprob(&self, sentence: &[TokenId]) -> Result<f64> {
        Ok(crate::ngram::ArpaModel::sentence_logprob(self, sentence))
    }
}

/// Assigns `1/|V|` to every token.
#[derive(Clone, Copy, Debug)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl SentenceScorer for UniformScorer {
    fn sentence_logprob(&self, sentence: &[TokenId]) -> Result<f64> {
        Ok(-((sentence.len() + 1) as f64) * (self.vocab_size as f64).ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    pub value: f64,
    /// Number of predicted tokens, counting one EOS per sentence.
    pub tokens: usize,
    pub total_logprob: f64,
}

/// `exp(-(1/N) sum log p)`, over all tokens and end-of-sentence events.
/// Any zero-probability event makes the result infinite.
pub fn perplexity<S: SentenceScorer + ?Sized>(scorer: &S, corpus: &[Vec<TokenId>]) -> Result<Perplexity> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for s in corpus {
        total += scorer.sentence_logprob(s)?;
        tokens += s.len() + 1;
    }
    Ok(Perplexity {
        value: perplexity_from_logprob(total, tokens),
        tokens,
        total_logprob: total,
    })
}

pub fn perplexity_from_logprob(total_logprob: f64, tokens: usize) -> f64 {
    if total_logprob == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        (-total_logprob / tokens as f64).exp()
    }
}

/// `b^(-(1/N) sum log_b p)` for natural-log step scores; equal to the
/// natural-base perplexity for every base `b > 1`.
pub fn perplexity_in_base(step_logprobs: &[f64], base: f64) -> f64 {
    let lb = base.ln();
    let mean: f64 = step_logprobs.iter().map(|lp| lp / lb).sum::<f64>() / step_logprobs.len() as f64;
    base.powf(-mean)
}

pub const BLEU_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuStats {
    /// Clipped n-gram matches per order.
    pub matches: [u64; BLEU_ORDER],
    /// Candidate n-gram totals per order.
    pub totals: [u64; BLEU_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub bleu: f64,
    /// The lowest order with zero precision, which forces BLEU to 0.
    pub zero_order: Option<usize>,
}

impl BleuStats {
    pub fn len_ratio(&self) -> f64 {
        self.candidate_len as f64 / self.reference_len as f64
    }

    pub fn report_line(&self) -> String {
        let p = self.precisions;
        format!(
            "BLEU={:.6} BP={:.6} p1={:.6} p2={:.6} p3={:.6} p4={:.6} len_ratio={:.6}",
            self.bleu,
            self.brevity_penalty,
            p[0],
            p[1],
            p[2],
            p[3],
            self.len_ratio()
        )
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn check_aligned<T>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::LineCountMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    Ok(())
}

/// Corpus-level clipped matches and candidate totals of order `n`.
fn clipped_counts<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> (u64, u64) {
    let mut matched = 0;
    let mut total = 0;
    for (cand, reference) in candidates.iter().zip(references) {
        let ref_counts = ngram_counts(reference, n);
        for (gram, c) in ngram_counts(cand, n) {
            total += c;
            matched += c.min(ref_counts.get(gram).copied().unwrap_or(0));
        }
    }
    (matched, total)
}

/// Clipped n-gram precision over a corpus of candidate/reference pairs.
pub fn modified_precision<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    check_aligned(candidates, references)?;
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    let (m, t) = clipped_counts(candidates, references, n);
    Ok(if t == 0 { 0.0 } else { m as f64 / t as f64 })
}

/// `1` when `l >= r`, else `exp(1 - r / l)`.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len >= reference_len {
        1.0
    } else if candidate_len == 0 {
        0.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuStats> {
    bleu_with_reference_length(candidates, references, None)
}

/// BLEU with the total reference length optionally fixed by the caller
/// instead of counted from `references`.
pub fn bleu_with_reference_length<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    reference_len: Option<usize>,
) -> Result<BleuStats> {
    check_aligned(candidates, references)?;
    let candidate_len: usize = candidates.iter().map(Vec::len).sum();
    let reference_len = reference_len.unwrap_or_else(|| references.iter().map(Vec::len).sum());
    if reference_len == 0 {
        return Err(Error::Empty("reference corpus"));
    }
    let mut matches = [0; BLEU_ORDER];
    let mut totals = [0; BLEU_ORDER];
    let mut precisions = [0.0; BLEU_ORDER];
    for n in 1..=BLEU_ORDER {
        let (m, t) = clipped_counts(candidates, references, n);
        matches[n - 1] = m;
        totals[n - 1] = t;
        precisions[n - 1] = if t == 0 { 0.0 } else { m as f64 / t as f64 };
    }
    let brevity_penalty = brevity_penalty(candidate_len, reference_len);
    let zero_order = precisions.iter().position(|&p| p == 0.0).map(|i| i + 1);
    let bleu = match zero_order {
        Some(_) => 0.0,
        None => {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
            brevity_penalty * mean_log.exp()
        }
    };
    Ok(BleuStats {
        matches,
        totals,
        candidate_len,
        reference_len,
        precisions,
        brevity_penalty,
        bleu,
        zero_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn clipping_example() {
        let p = modified_precision(&[toks("the the the the")], &[toks("the cat")], 1).unwrap();
        assert_eq!(p, 0.25);
    }

    #[test]
    fn brevity_examples() {
        assert_eq!(brevity_penalty(10, 8), 1.0);
        assert!((brevity_penalty(4, 8) - 0.367_879_441_171_442_3).abs() < 1e-12);
        assert!((brevity_penalty(4, 15) - 0.063_927_861_206_707_57).abs() < 1e-12);
    }

    #[test]
    fn identical_corpus_scores_one() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        let s = bleu(&c, &c).unwrap();
        assert_eq!(s.bleu, 1.0);
        assert!(s.report_line().starts_with("BLEU=1.000000 BP=1.000000"));
    }

    #[test]
    fn zero_precision_gives_zero() {
        let s = bleu(&[toks("a b c")], &[toks("a b c")]).unwrap();
        assert_eq!(s.zero_order, Some(4));
        assert_eq!(s.bleu, 0.0);
    }

    #[test]
    fn uniform_perplexity() {
        let corpus = vec![vec![TokenId(5); 7], vec![TokenId(9); 2]];
        let p = perplexity(&UniformScorer { vocab_size: 100 }, &corpus).unwrap();
        assert!((p.value - 100.0).abs() < 1e-9 * 100.0);
        assert_eq!(p.tokens, 11);
    }

    #[test]
    fn base_invariance() {
        let steps = [-0.1, -2.3, -0.7, -4.0];
        let natural = perplexity_from_logprob(steps.iter().sum(), steps.len());
        for b in [2.0, 10.0, std::f64::consts::E] {
            assert!((perplexity_in_base(&steps, b) - natural).abs() < 1e-9 * natural);
        }
    }
}
