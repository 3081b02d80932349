//! Reference-based generation metrics and perplexities.
//!
//! Every corpus-level function takes one hypothesis and one reference per
//! example, each a token sequence.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Sentence = [String];

fn ngrams(tokens: &Sentence, n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches(hyp: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    hyp.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

fn check_corpus(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::InvalidInput("metric needs a non-empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidInput(format!("n-gram order {n} outside 1..=4")));
    }
    Ok(())
}

/// Corpus BLEU up to order `n` with brevity penalty. Orders above 1 use
/// add-one smoothing; zero unigram precision gives 0.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs, n)?;
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hg = ngrams(h, k);
            matched += clipped_matches(&hg, &ngrams(r, k));
            total += hg.values().sum::<usize>();
        }
        let p = if k == 1 {
            if matched == 0 {
                return Ok(0.0);
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Cumulative NIST score up to order `n`, with information weights estimated
/// from the reference side.
pub fn nist(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs, n)?;
    let mut ref_counts: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); n + 1];
    for r in refs {
        for (k, counts) in ref_counts.iter_mut().enumerate().skip(1) {
            for (g, c) in ngrams(r, k) {
                *counts.entry(g).or_insert(0) += c;
            }
        }
    }
    let ref_words: usize = refs.iter().map(Vec::len).sum();
    let info = |g: &[String]| -> f64 {
        let k = g.len();
        let count = ref_counts[k][g] as f64;
        let prefix = if k == 1 {
            ref_words as f64
        } else {
            ref_counts[k - 1][&g[..k - 1]] as f64
        };
        (prefix / count).log2()
    };
    let mut score = 0.0;
    for k in 1..=n {
        let (mut gain, mut total) = (0.0, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hg = ngrams(h, k);
            let rg = ngrams(r, k);
            for (g, &c) in &hg {
                let m = c.min(rg.get(g).copied().unwrap_or(0));
                if m > 0 {
                    gain += m as f64 * info(g);
                }
            }
            total += hg.values().sum::<usize>();
        }
        if total > 0 {
            score += gain / total as f64;
        }
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let ratio = (c as f64 / ref_words.max(1) as f64).min(1.0);
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    let bp = if ratio <= 0.0 { 0.0 } else { (beta * ratio.ln().powi(2)).exp() };
    Ok(score * bp)
}

/// Sentence-averaged n-gram recall. Sentences whose reference has no n-gram
/// of order `n` are skipped.
pub fn rouge_n(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs, n)?;
    let scores: Vec<f64> = hyps
        .iter()
        .zip(refs)
        .filter_map(|(h, r)| {
            let rg = ngrams(r, n);
            let total: usize = rg.values().sum();
            (total > 0).then(|| clipped_matches(&ngrams(h, n), &rg) as f64 / total as f64)
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::InvalidInput(format!("no reference has a {n}-gram")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Longest common subsequence length.
pub fn lcs_len(a: &Sentence, b: &Sentence) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-averaged LCS F1.
pub fn rouge_l(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_corpus(hyps, refs, 1)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let l = lcs_len(h, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / h.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Strips one common English suffix, keeping at least three characters.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

/// Hypothesis position to reference position for exact, then stem matches.
fn meteor_alignment(hyp: &Sentence, reference: &Sentence) -> Vec<Option<usize>> {
    let mut align = vec![None; hyp.len()];
    let mut used = vec![false; reference.len()];
    let stages: [fn(&str) -> &str; 2] = [|w| w, stem];
    for key in stages {
        for (i, h) in hyp.iter().enumerate() {
            if align[i].is_some() {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !used[j] && key(&reference[j]) == key(h)) {
                used[j] = true;
                align[i] = Some(j);
            }
        }
    }
    align
}

/// Single-pair METEOR-lite: `Fmean * (1 - 0.5 (chunks / m)^3)` with
/// `Fmean = 10 P R / (R + 9 P)`.
pub fn meteor_sentence(hyp: &Sentence, reference: &Sentence) -> f64 {
    let align = meteor_alignment(hyp, reference);
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (prev, a) {
            (Some(pj), Some(j)) if *j == pj + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_lite(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_corpus(hyps, refs, 1)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| meteor_sentence(h, r)).sum::<f64>() / hyps.len() as f64)
}

fn corpus_ngrams(hyps: &[Vec<String>], n: usize) -> Result<HashMap<&[String], usize>> {
    if n == 0 {
        return Err(Error::InvalidInput("n-gram order must be positive".into()));
    }
    let mut counts = HashMap::new();
    for h in hyps {
        for (g, c) in ngrams(h, n) {
            *counts.entry(g).or_insert(0) += c;
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidInput(format!("no hypothesis has a {n}-gram")));
    }
    Ok(counts)
}

/// Distinct n-grams over total n-grams across the corpus.
pub fn dist_n(hyps: &[Vec<String>], n: usize) -> Result<f64> {
    let counts = corpus_ngrams(hyps, n)?;
    Ok(counts.len() as f64 / counts.values().sum::<usize>() as f64)
}

/// Shannon entropy in nats of the corpus n-gram distribution.
pub fn entropy_n(hyps: &[Vec<String>], n: usize) -> Result<f64> {
    let counts = corpus_ngrams(hyps, n)?;
    let total = counts.values().sum::<usize>() as f64;
    let mut ps: Vec<f64> = counts.values().map(|&c| c as f64 / total).collect();
    ps.sort_by(f64::total_cmp);
    Ok(-ps.iter().map(|p| p * p.ln()).sum::<f64>())
}

/// Probability a model assigned to one reference token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepProbs {
    /// Under the vocabulary distribution.
    pub vocab: f64,
    /// Under the copy distribution when the token names a subgraph concept.
    pub copy: Option<f64>,
    /// Under the mixture.
    pub mixture: f64,
}

fn exp_mean_nll(probs: impl Iterator<Item = f64>) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for p in probs {
        nll -= p.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("perplexity needs at least one token".into()));
    }
    Ok((nll / n as f64).exp())
}

/// `exp` of the mean negative log mixture probability.
pub fn perplexity(steps: &[StepProbs]) -> Result<f64> {
    exp_mean_nll(steps.iter().map(|s| s.mixture))
}

/// Perplexity scoring concept tokens under the copy distribution and all other
/// tokens under the vocabulary distribution.
pub fn concept_ppl(steps: &[StepProbs]) -> Result<f64> {
    exp_mean_nll(steps.iter().map(|s| s.copy.unwrap_or(s.vocab)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub nist_1: f64,
    pub nist_2: f64,
    pub nist_3: f64,
    pub nist_4: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub dist_1: f64,
    pub dist_2: f64,
    pub entropy_4: f64,
    pub ppl: f64,
    pub concept_ppl: f64,
}

impl EvalReport {
    /// Text metrics from decoded hypotheses plus perplexities from teacher-forced
    /// step probabilities. Diversity metrics with no n-grams of their order are 0.
    pub fn compute(hyps: &[Vec<String>], refs: &[Vec<String>], steps: &[StepProbs]) -> Result<Self> {
        let or_zero = |r: Result<f64>, name: &str| {
            r.unwrap_or_else(|e| {
                log::warn!("{name}: {e}; reporting 0");
                0.0
            })
        };
        Ok(Self {
            bleu_1: bleu(hyps, refs, 1)?,
            bleu_2: bleu(hyps, refs, 2)?,
            bleu_3: bleu(hyps, refs, 3)?,
            bleu_4: bleu(hyps, refs, 4)?,
            nist_1: nist(hyps, refs, 1)?,
            nist_2: nist(hyps, refs, 2)?,
            nist_3: nist(hyps, refs, 3)?,
            nist_4: nist(hyps, refs, 4)?,
            rouge_1: or_zero(rouge_n(hyps, refs, 1), "rouge_1"),
            rouge_2: or_zero(rouge_n(hyps, refs, 2), "rouge_2"),
            rouge_l: rouge_l(hyps, refs)?,
            meteor_lite: meteor_lite(hyps, refs)?,
            dist_1: or_zero(dist_n(hyps, 1), "dist_1"),
            dist_2: or_zero(dist_n(hyps, 2), "dist_2"),
            entropy_4: or_zero(entropy_n(hyps, 4), "entropy_4"),
            ppl: perplexity(steps)?,
            concept_ppl: concept_ppl(steps)?,
        })
    }

    pub fn columns(&self) -> [(&'static str, f64); 17] {
        [
            ("PPL", self.ppl),
            ("Concept-PPL", self.concept_ppl),
            ("BLEU-1", self.bleu_1),
            ("BLEU-2", self.bleu_2),
            ("BLEU-3", self.bleu_3),
            ("BLEU-4", self.bleu_4),
            ("NIST-1", self.nist_1),
            ("NIST-2", self.nist_2),
            ("NIST-3", self.nist_3),
            ("NIST-4", self.nist_4),
            ("ROUGE-1", self.rouge_1),
            ("ROUGE-2", self.rouge_2),
            ("ROUGE-L", self.rouge_l),
            ("METEOR-lite", self.meteor_lite),
            ("Entropy-4", self.entropy_4),
            ("Dist-1", self.dist_1),
            ("Dist-2", self.dist_2),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.columns();
        let cells: Vec<String> = cols.iter().map(|(_, v)| format!("{v:.4}")).collect();
        let widths: Vec<usize> = cols.iter().zip(&cells).map(|((n, _), c)| n.len().max(c.len())).collect();
        let header: Vec<String> = cols.iter().zip(&widths).map(|((n, _), w)| format!("{n:>w$}")).collect();
        let values: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(f, "{}", header.join("  "))?;
        writeln!(f, "{}", values.join("  "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_scores() {
        let h = vec![s("the cat sat on the mat"), s("a dog barks")];
        assert!((bleu(&h, &h, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((bleu(&h, &h, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!((rouge_l(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        assert!((rouge_n(&h, &h, 2).unwrap() - 1.0).abs() < 1e-12);
        let m = meteor_lite(&h, &h).unwrap();
        let expected = ((1.0 - 0.5 / 216.0) + (1.0 - 0.5 / 27.0)) / 2.0;
        assert!((m - expected).abs() < 1e-12);
    }

    #[test]
    fn disjoint_unigrams() {
        assert_eq!(bleu(&[s("a b")], &[s("c d")], 1).unwrap(), 0.0);
        assert!(bleu(&[s("a b")], &[s("c d")], 4).unwrap() < 1e-3);
        assert_eq!(meteor_lite(&[s("a b")], &[s("c d")]).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(bleu(&[], &[], 1).is_err());
        assert!(nist(&[], &[], 1).is_err());
        assert!(rouge_l(&[], &[]).is_err());
        assert!(meteor_lite(&[], &[]).is_err());
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn lcs_hand() {
        assert_eq!(lcs_len(&s("a b c"), &s("a x c")), 2);
        let f = rouge_l(&[s("a b c")], &[s("a x c")]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dist_and_entropy() {
        assert!((dist_n(&[s("a a a")], 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(dist_n(&[s("a b c")], 1).unwrap(), 1.0);
        assert!(dist_n(&[s("a b")], 3).is_err());
        let e = entropy_n(&[s("a a b b")], 1).unwrap();
        assert!((e - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stemmer() {
        assert_eq!(stem("walking"), "walk");
        assert_eq!(stem("dogs"), "dog");
        assert_eq!(stem("is"), "is");
        let m = meteor_sentence(&s("dogs"), &s("dog"));
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_ppl_is_vocab_size() {
        let steps = vec![
            StepProbs {
                vocab: 0.1,
                copy: None,
                mixture: 0.1
            };
            7
        ];
        assert!((perplexity(&steps).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(concept_ppl(&steps).unwrap(), perplexity(&steps).unwrap());
    }

    #[test]
    fn table_has_header_and_values() {
        let text = EvalReport::default().to_string();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().trim_start().starts_with("PPL"));
    }
}
