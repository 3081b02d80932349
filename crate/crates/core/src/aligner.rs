//! Concept-to-concept alignment with IBM Model 1.
//!
//! Posts and responses are reduced to the concepts they mention, then
//! `t(target | source)` is estimated by expectation maximization.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogPair, Token};
use crate::error::{Error, Result};
use crate::fsutil::open_reader;
use crate::kgraph::KnowledgeGraph;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptPair {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

/// Keeps only graph concepts on each side; pairs left with an empty side are dropped.
pub fn prepare_concept_pairs(pairs: &[DialogPair], graph: &KnowledgeGraph) -> Vec<ConceptPair> {
    let keep = |toks: &[Token]| -> Vec<Token> {
        toks.iter().filter(|t| graph.node(t.as_str()).is_some()).cloned().collect()
    };
    pairs
        .iter()
        .map(|p| ConceptPair {
            source: keep(&p.post),
            target: keep(&p.response),
        })
        .filter(|cp| !cp.source.is_empty() && !cp.target.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub em_iterations: usize,
    /// Adds an empty source word that can absorb unaligned targets.
    pub null_word: bool,
    /// Entries below this probability are dropped after training and rows renormalized.
    pub min_prob_floor: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            em_iterations: 10,
            null_word: true,
            min_prob_floor: 0.0,
        }
    }
}

/// Sparse `t(target | source)`; each row is sorted by descending probability, then target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentTable {
    rows: BTreeMap<String, Vec<(String, f64)>>,
    null_row: Vec<(String, f64)>,
}

impl AlignmentTable {
    /// Builds a table from raw rows; each row is normalized and sorted.
    pub fn from_rows<I, S, T>(rows: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<(T, f64)>)>,
        S: Into<String>,
        T: Into<String>,
    {
        let rows = rows
            .into_iter()
            .map(|(s, row)| {
                let row: Vec<(String, f64)> = row.into_iter().map(|(t, p)| (t.into(), p)).collect();
                (s.into(), normalize_row(row))
            })
            .filter(|(_, row)| !row.is_empty())
            .collect();
        Self {
            rows,
            null_row: Vec::new(),
        }
    }

    /// Source concepts in lexicographic order (the NULL word is not listed).
    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn num_sources(&self) -> usize {
        self.rows.len()
    }

    pub fn prob(&self, source: &str, target: &str) -> Option<f64> {
        self.rows
            .get(source)?
            .iter()
            .find(|(t, _)| t == target)
            .map(|&(_, p)| p)
    }

    pub fn ranked_targets(&self, source: &str) -> &[(String, f64)] {
        self.rows.get(source).map_or(&[], Vec::as_slice)
    }

    /// At most `k` targets by descending probability, ties lexicographic.
    pub fn top_k_targets(&self, source: &str, k: usize) -> Vec<(String, f64)> {
        self.ranked_targets(source).iter().take(k).cloned().collect()
    }

    pub fn null_row(&self) -> &[(String, f64)] {
        &self.null_row
    }

    /// Reads the format of [`Self::write_tsv`]; probabilities are kept as written.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let mut rows: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, line) in open_reader(path)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [source, target, prob] = fields[..] else {
                return Err(Error::parse(path, i + 1, "expected source<TAB>target<TAB>prob"));
            };
            let p: f64 = prob
                .parse()
                .ok()
                .filter(|p: &f64| (0.0..=1.0).contains(p))
                .ok_or_else(|| Error::parse(path, i + 1, format!("bad probability {prob:?}")))?;
            rows.entry(source.to_string()).or_default().push((target.to_string(), p));
        }
        for row in rows.values_mut() {
            sort_row(row);
        }
        Ok(Self {
            rows,
            null_row: Vec::new(),
        })
    }

    /// `source<TAB>target<TAB>prob` sorted by (source, -prob, target).
    pub fn write_tsv<W: Write + ?Sized>(&self, out: &mut W) -> std::io::Result<()> {
        for (s, row) in &self.rows {
            for (t, p) in row {
                writeln!(out, "{s}\t{t}\t{p}")?;
            }
        }
        Ok(())
    }
}

fn sort_row(row: &mut [(String, f64)]) {
    row.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

fn normalize_row(mut row: Vec<(String, f64)>) -> Vec<(String, f64)> {
    row.retain(|(_, p)| *p > 0.0);
    let total: f64 = row.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut row {
        *p /= total;
    }
    sort_row(&mut row);
    row
}

#[derive(Clone, Debug)]
pub struct Ibm1Run {
    pub table: AlignmentTable,
    /// Corpus log-likelihood before each iteration and after the last one.
    pub log_likelihoods: Vec<f64>,
    /// Largest `|sum_t t(t|s) - 1|` seen after any M-step.
    pub max_normalization_error: f64,
}

pub fn train_ibm1(pairs: &[ConceptPair], config: &AlignmentConfig) -> Result<AlignmentTable> {
    Ok(train_ibm1_traced(pairs, config)?.table)
}

pub fn train_ibm1_traced(pairs: &[ConceptPair], config: &AlignmentConfig) -> Result<Ibm1Run> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("alignment needs at least one concept pair".into()));
    }
    if config.em_iterations == 0 {
        return Err(Error::InvalidInput("em_iterations must be >= 1".into()));
    }

    // Intern concepts; source id 0 is the NULL word when enabled.
    let offset = usize::from(config.null_word);
    let mut src_ids: HashMap<&str, usize> = HashMap::new();
    let mut src_names: Vec<&str> = Vec::new();
    let mut tgt_ids: HashMap<&str, usize> = HashMap::new();
    let mut tgt_names: Vec<&str> = Vec::new();
    let mut corpus: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut src: Vec<usize> = Vec::with_capacity(p.source.len() + offset);
        if config.null_word {
            src.push(0);
        }
        for t in &p.source {
            let n = src_names.len();
            let id = *src_ids.entry(t.as_str()).or_insert_with(|| {
                src_names.push(t.as_str());
                n
            });
            src.push(id + offset);
        }
        let tgt = p
            .target
            .iter()
            .map(|t| {
                let n = tgt_names.len();
                *tgt_ids.entry(t.as_str()).or_insert_with(|| {
                    tgt_names.push(t.as_str());
                    n
                })
            })
            .collect();
        corpus.push((src, tgt));
    }

    // Uniform start over the targets each source co-occurs with.
    let num_src = src_names.len() + offset;
    let mut t: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); num_src];
    for (src, tgt) in &corpus {
        for &s in src {
            for &f in tgt {
                t[s].insert(f, 0.0);
            }
        }
    }
    for row in &mut t {
        let u = 1.0 / row.len() as f64;
        row.values_mut().for_each(|p| *p = u);
    }

    let log_likelihood = |t: &[BTreeMap<usize, f64>]| -> f64 {
        corpus
            .iter()
            .map(|(src, tgt)| {
                tgt.iter()
                    .map(|f| (src.iter().map(|&s| t[s][f]).sum::<f64>() / src.len() as f64).ln())
                    .sum::<f64>()
            })
            .sum()
    };

    let mut history = Vec::with_capacity(config.em_iterations + 1);
    let mut max_norm_err: f64 = 0.0;
    for _ in 0..config.em_iterations {
        history.push(log_likelihood(&t));
        let mut counts: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); num_src];
        let mut totals = vec![0.0; num_src];
        for (src, tgt) in &corpus {
            for &f in tgt {
                let z: f64 = src.iter().map(|&s| t[s][&f]).sum();
                for &s in src {
                    let c = t[s][&f] / z;
                    *counts[s].entry(f).or_insert(0.0) += c;
                    totals[s] += c;
                }
            }
        }
        for (s, row) in counts.into_iter().enumerate() {
            t[s] = row.into_iter().map(|(f, c)| (f, c / totals[s])).collect();
            let sum: f64 = t[s].values().sum();
            max_norm_err = max_norm_err.max((sum - 1.0).abs());
        }
    }
    history.push(log_likelihood(&t));

    let finish = |row: &BTreeMap<usize, f64>| -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = row.iter().map(|(&f, &p)| (tgt_names[f].to_string(), p)).collect();
        sort_row(&mut out);
        if config.min_prob_floor > 0.0 && out.first().is_some_and(|(_, p)| *p >= config.min_prob_floor) {
            out.retain(|(_, p)| *p >= config.min_prob_floor);
            out = normalize_row(out);
        }
        out
    };
    let rows = src_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.to_string(), finish(&t[i + offset])))
        .collect();
    let null_row = if config.null_word { finish(&t[0]) } else { Vec::new() };

    Ok(Ibm1Run {
        table: AlignmentTable { rows, null_row },
        log_likelihoods: history,
        max_normalization_error: max_norm_err,
    })
}
