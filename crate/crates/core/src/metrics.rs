//! Corpus-level automatic evaluation: BLEU-1/2/3, Distinct-1/2 and
//! knowledge recall/precision/F1.
//!
//! BLEU is corpus-level modified n-gram precision with the standard
//! brevity penalty, uniform weights over orders 1..n and no smoothing
//! (any order with zero matches zeroes the score). Distinct-n divides
//! unique n-grams by total n-grams across all hypotheses. Knowledge
//! recall/precision compare non-stopword unigram sets of a hypothesis
//! and its knowledge collection, macro-averaged per example. The
//! stopword list ships with the crate and is hash-pinned; results are
//! not comparable across different lists.

use std::collections::{HashMap, HashSet};

use crate::corpus::RESERVED_TOKENS;
use crate::error::{Error, Result};

/// The pinned stopword list (one token per line, includes standalone
/// punctuation marks produced by the tokenizer).
pub const STOPWORDS_RAW: &str = include_str!("stopwords.txt");

pub fn stopwords() -> HashSet<&'static str> {
    STOPWORDS_RAW.lines().filter(|l| !l.is_empty()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n over aligned hypothesis/reference lists.
pub fn bleu_n(hypotheses: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Contract("bleu: empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Misaligned(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut log_precision_sum = 0.0;
    for order in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (hyp, reference) in hypotheses.iter().zip(references) {
            let hyp_counts = ngram_counts(hyp, order);
            let ref_counts = ngram_counts(reference, order);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched += count.min(clip);
                total += count;
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched as f64 / total as f64).ln();
    }
    let hyp_len: usize = hypotheses.iter().map(|h| h.len()).sum();
    let ref_len: usize = references.iter().map(|r| r.len()).sum();
    let brevity = if hyp_len > ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(brevity * (log_precision_sum / n as f64).exp())
}

/// Unique n-grams divided by total n-grams across all hypotheses.
/// An empty corpus of n-grams scores 0.
pub fn distinct_n(hypotheses: &[Vec<String>], n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Contract("distinct: empty corpus".into()));
    }
    let mut unique: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for hyp in hypotheses {
        if hyp.len() >= n {
            for window in hyp.windows(n) {
                unique.insert(window);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Non-stopword unigram set; reserved ids' surface forms are ignored too.
fn content_set<'a>(tokens: &'a [String], stop: &HashSet<&str>) -> HashSet<&'a str> {
    tokens
        .iter()
        .map(|t| t.as_str())
        .filter(|t| !stop.contains(*t) && !RESERVED_TOKENS.contains(t))
        .collect()
}

/// Recall, precision and F1 of a hypothesis against its knowledge
/// collection. `None` when the knowledge collection has no non-stopword
/// tokens (the example is skipped).
pub fn knowledge_rpf(
    hypothesis: &[String],
    knowledge: &[Vec<String>],
    stop: &HashSet<&str>,
) -> Option<(f64, f64, f64)> {
    let mut knowledge_words: HashSet<&str> = HashSet::new();
    for sentence in knowledge {
        knowledge_words.extend(content_set(sentence, stop));
    }
    if knowledge_words.is_empty() {
        return None;
    }
    let hyp_words = content_set(hypothesis, stop);
    let overlap = hyp_words.intersection(&knowledge_words).count() as f64;
    let recall = overlap / knowledge_words.len() as f64;
    let precision = if hyp_words.is_empty() {
        0.0
    } else {
        overlap / hyp_words.len() as f64
    };
    let f1 = if recall + precision > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    };
    Some((recall, precision, f1))
}

/// Aggregated corpus metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub knowledge_recall: Option<f64>,
    pub knowledge_precision: Option<f64>,
    pub knowledge_f1: Option<f64>,
    pub nll_per_token: Option<f64>,
    pub perplexity: Option<f64>,
    pub examples: usize,
    pub tokens: usize,
    /// Examples skipped by the knowledge metrics (empty knowledge after
    /// stopword removal).
    pub knowledge_skipped: usize,
}

impl MetricsReport {
    /// Flat `key = value` rendering, machine-parseable.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("bleu1", self.bleu1.to_string());
        push("bleu2", self.bleu2.to_string());
        push("bleu3", self.bleu3.to_string());
        push("distinct1", self.distinct1.to_string());
        push("distinct2", self.distinct2.to_string());
        if let (Some(r), Some(p), Some(f1)) = (
            self.knowledge_recall,
            self.knowledge_precision,
            self.knowledge_f1,
        ) {
            push("knowledge_recall", r.to_string());
            push("knowledge_precision", p.to_string());
            push("knowledge_f1", f1.to_string());
        }
        if let Some(nll) = self.nll_per_token {
            push("nll_per_token", nll.to_string());
        }
        if let Some(ppl) = self.perplexity {
            push("perplexity", ppl.to_string());
        }
        push("examples", self.examples.to_string());
        push("tokens", self.tokens.to_string());
        push("knowledge_skipped", self.knowledge_skipped.to_string());
        out
    }
}

/// Score hypotheses against references (and optionally knowledge
/// collections) without a model.
pub fn score_corpus(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    knowledge: Option<&[Vec<Vec<String>>]>,
) -> Result<MetricsReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Misaligned(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if let Some(k) = knowledge {
        if k.len() != hypotheses.len() {
            return Err(Error::Misaligned(format!(
                "{} hypotheses vs {} knowledge collections",
                hypotheses.len(),
                k.len()
            )));
        }
    }
    let stop = stopwords();
    let mut report = MetricsReport {
        bleu1: bleu_n(hypotheses, references, 1)?,
        bleu2: bleu_n(hypotheses, references, 2)?,
        bleu3: bleu_n(hypotheses, references, 3)?,
        distinct1: distinct_n(hypotheses, 1)?,
        distinct2: distinct_n(hypotheses, 2)?,
        knowledge_recall: None,
        knowledge_precision: None,
        knowledge_f1: None,
        nll_per_token: None,
        perplexity: None,
        examples: hypotheses.len(),
        tokens: hypotheses.iter().map(|h| h.len()).sum(),
        knowledge_skipped: 0,
    };
    if let Some(collections) = knowledge {
        let mut sums = (0.0, 0.0, 0.0);
        let mut counted = 0usize;
        for (hyp, coll) in hypotheses.iter().zip(collections) {
            match knowledge_rpf(hyp, coll, &stop) {
                Some((r, p, f1)) => {
                    sums.0 += r;
                    sums.1 += p;
                    sums.2 += f1;
                    counted += 1;
                }
                None => report.knowledge_skipped += 1,
            }
        }
        if counted > 0 {
            report.knowledge_recall = Some(sums.0 / counted as f64);
            report.knowledge_precision = Some(sums.1 / counted as f64);
            report.knowledge_f1 = Some(sums.2 / counted as f64);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toks(items: &[&str]) -> Vec<Vec<String>> {
        items.iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn stopword_list_is_hash_pinned() {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(STOPWORDS_RAW.as_bytes());
        let hex: String = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(
            hex, "4654bbfa655308eb8cadb73f4578271c59c908038d9d067e2d5dc87d730d01ae",
            "stopword list changed; knowledge metrics are no longer comparable"
        );
        assert_eq!(stopwords().len(), 157);
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let hyps = toks(&["violet skies shimmer", "granite peaks"]);
        for n in 1..=3 {
            let score = bleu_n(&hyps, &hyps, n).unwrap();
            assert!((score - 1.0).abs() < 1e-12, "order {n}: {score}");
        }
    }

    #[test]
    fn bleu_disjoint_vocab_is_zero() {
        let hyps = toks(&["alpha beta"]);
        let refs = toks(&["gamma delta"]);
        for n in 1..=3 {
            assert_eq!(bleu_n(&hyps, &refs, n).unwrap(), 0.0);
        }
    }

    #[test]
    fn bleu_hand_example() {
        // hyp "a b c" vs ref "a b d": p1 = 2/3, p2 = 1/2, equal lengths
        let hyps = toks(&["a b c"]);
        let refs = toks(&["a b d"]);
        let b1 = bleu_n(&hyps, &refs, 1).unwrap();
        let b2 = bleu_n(&hyps, &refs, 2).unwrap();
        assert!((b1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((b2 - (2.0 / 3.0f64 * 0.5).sqrt()).abs() < 1e-12);
        assert!((b2 - 0.5773502691896257).abs() < 1e-9);
    }

    #[test]
    fn bleu_empty_corpus_is_an_error() {
        assert!(bleu_n(&[], &[], 1).is_err());
    }

    #[test]
    fn distinct_hand_examples() {
        let single = toks(&["i love rock music love"]);
        assert!((distinct_n(&single, 1).unwrap() - 0.8).abs() < 1e-12);

        let unique = toks(&["one two", "three four"]);
        assert_eq!(distinct_n(&unique, 1).unwrap(), 1.0);

        let repeated = toks(&["same same", "same same same"]);
        assert!((distinct_n(&repeated, 1).unwrap() - 1.0 / 5.0).abs() < 1e-12);

        let empty: Vec<Vec<String>> = vec![vec![], vec![]];
        assert_eq!(distinct_n(&empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn distinct_never_increases_with_duplicate_hypothesis() {
        let mut hyps = toks(&["red wine", "blue sky", "red wine tonight"]);
        let before = distinct_n(&hyps, 1).unwrap();
        hyps.push(hyps[0].clone());
        let after = distinct_n(&hyps, 1).unwrap();
        assert!(after <= before + 1e-15);
    }

    #[test]
    fn knowledge_rpf_hand_cases() {
        let stop = stopwords();
        // identical non-empty sets
        let hyp = tokenize("violet skies");
        let k = vec![tokenize("violet skies")];
        assert_eq!(knowledge_rpf(&hyp, &k, &stop), Some((1.0, 1.0, 1.0)));

        // disjoint sets: zero-division rule gives f1 = 0
        let hyp = tokenize("red");
        let k = vec![tokenize("stone cold")];
        assert_eq!(knowledge_rpf(&hyp, &k, &stop), Some((0.0, 0.0, 0.0)));

        // W_Y = {alpha, beta, gamma}, W_K = {beta, gamma, delta, epsilon}
        let hyp = tokenize("alpha beta gamma");
        let k = vec![tokenize("beta gamma"), tokenize("delta epsilon")];
        let (r, p, f1) = knowledge_rpf(&hyp, &k, &stop).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 4.0 / 7.0).abs() < 1e-12);
        assert!((f1 - 0.5714285714285714).abs() < 1e-9);

        // harmonic-mean identity
        assert!((f1 - 2.0 * r * p / (r + p)).abs() < 1e-12);

        // all-stopword knowledge: skipped
        let k = vec![tokenize("the of and")];
        assert_eq!(knowledge_rpf(&hyp, &k, &stop), None);
    }

    #[test]
    fn score_corpus_is_order_invariant() {
        let hyps = toks(&["alpha beta", "gamma delta", "alpha gamma"]);
        let refs = toks(&["alpha beta", "gamma zeta", "beta gamma"]);
        let know: Vec<Vec<Vec<String>>> = vec![
            vec![tokenize("alpha omega")],
            vec![tokenize("gamma ray")],
            vec![tokenize("nothing here")],
        ];
        let base = score_corpus(&hyps, &refs, Some(&know)).unwrap();
        let perm = [2usize, 0, 1];
        let hyps_p: Vec<_> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let refs_p: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let know_p: Vec<_> = perm.iter().map(|&i| know[i].clone()).collect();
        let permuted = score_corpus(&hyps_p, &refs_p, Some(&know_p)).unwrap();
        assert!((base.bleu1 - permuted.bleu1).abs() < 1e-15);
        assert!((base.bleu2 - permuted.bleu2).abs() < 1e-15);
        assert!((base.distinct1 - permuted.distinct1).abs() < 1e-15);
        assert_eq!(base.knowledge_f1.is_some(), permuted.knowledge_f1.is_some());
        assert!((base.knowledge_f1.unwrap() - permuted.knowledge_f1.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let hyps = toks(&["one", "two"]);
        let refs = toks(&["one"]);
        assert!(matches!(
            score_corpus(&hyps, &refs, None),
            Err(Error::Misaligned(_))
        ));
    }
}
