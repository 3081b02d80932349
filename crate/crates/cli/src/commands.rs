use std::fmt;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use edgeflow::aligner::{prepare_concept_pairs, train_ibm1, AlignmentTable};
use edgeflow::corpus::{build_vocab, load_corpus, tokenize, DialogPair, PosLexicon, Vocabulary};
use edgeflow::evalsuite::EvalReport;
use edgeflow::fsutil::write_atomic;
use edgeflow::genmodel::{DecodeOptions, GraphSeq2Seq, PreparedExample};
use edgeflow::kgraph::{
    ablate_edges, coverage_stats, enhance, extract_new_edges, extract_new_nodes, CoverageStats, KnowledgeGraph,
};
use edgeflow::numcore::ParamStore;
use edgeflow::subgraph::retrieve;
use edgeflow::trainer::{collect_step_probs, config_hash, write_loss_csv, Checkpoint, Trainer};
use rand::SeedableRng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command};

const CHECKPOINT: &str = "checkpoint.efck";
const VOCAB: &str = "vocab.tsv";
const CONFIG: &str = "config.json";
const LOSS_LOG: &str = "loss.csv";

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Picks the flag, then the config value, and checks the file exists.
fn input(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| usage(format!("missing --{what} (no path given and none configured)")))?;
    if !path.exists() {
        return Err(usage(format!("{what} file {} does not exist", path.display())));
    }
    Ok(path)
}

fn optional_input(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>> {
    match flag.as_ref().or(configured.as_ref()) {
        None => Ok(None),
        Some(_) => input(flag, configured, what).map(Some),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = cli.k {
        cfg.enhancement.alignment_top_k = k;
    }
    if let Some(m) = cli.m {
        cfg.enhancement.node_percentile = m;
    }
    if let Some(n) = cli.n {
        cfg.ablation_fraction = n;
    }
    if let Some(l) = cli.layers {
        cfg.edge_transformer.num_layers = l;
    }
    if let Some(c) = cli.cap {
        cfg.retrieval.two_hop_cap = c;
    }
    cfg.finish().map_err(|e| usage(format!("{e:#}")))
}

fn write_out(out: &Option<PathBuf>, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    match out {
        Some(p) => Ok(write_atomic(p, f)?),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_out(out, |w| writeln!(w, "{text}"))
}

fn load_pairs(path: &Path) -> Result<Vec<DialogPair>> {
    let loaded = load_corpus(path)?;
    if loaded.rejected > 0 {
        log::warn!("{}: {} records rejected", path.display(), loaded.rejected);
    }
    Ok(loaded.pairs)
}

fn load_lexicon(path: &Option<PathBuf>) -> Result<PosLexicon> {
    Ok(match path {
        Some(p) => PosLexicon::load_tsv(p)?,
        None => PosLexicon::new(),
    })
}

/// IBM Model 1 over concepts of `graph` plus new corpus nouns. Returns an empty
/// table when no pair mentions concepts on both sides.
fn align_concepts(pairs: &[DialogPair], graph: &KnowledgeGraph, lexicon: &PosLexicon, cfg: &RunConfig) -> Result<AlignmentTable> {
    let nodes = extract_new_nodes(pairs, graph, lexicon, &cfg.enhancement);
    let extended = enhance(graph, &nodes, &[])?;
    let concept_pairs = prepare_concept_pairs(pairs, &extended);
    if concept_pairs.is_empty() {
        log::warn!("no pair mentions concepts on both sides; alignment is empty");
        return Ok(AlignmentTable::default());
    }
    Ok(train_ibm1(&concept_pairs, &cfg.alignment)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let p = &cfg.paths;
    match &cli.command {
        Command::Align {
            corpus,
            graph,
            lexicon,
            out,
        } => {
            let pairs = load_pairs(&input(corpus, &p.corpus, "corpus")?)?;
            let graph = KnowledgeGraph::load_triples(&input(graph, &p.graph, "graph")?)?;
            let lexicon = load_lexicon(&optional_input(lexicon, &p.lexicon, "lexicon")?)?;
            let table = align_concepts(&pairs, &graph, &lexicon, &cfg)?;
            write_out(out, |w| table.write_tsv(w))
        }
        Command::BuildGraph { triples, out } => {
            let path = input(&Some(triples.clone()), &None, "triples")?;
            let graph = KnowledgeGraph::load_triples(&path)?;
            log::info!("graph: {} nodes, {} edges", graph.num_nodes(), graph.num_edges());
            write_out(out, |w| graph.write_triples(w))
        }
        Command::Enhance {
            corpus,
            graph,
            lexicon,
            alignment,
            out,
        } => {
            let pairs = load_pairs(&input(corpus, &p.corpus, "corpus")?)?;
            let graph = KnowledgeGraph::load_triples(&input(graph, &p.graph, "graph")?)?;
            let lexicon = load_lexicon(&optional_input(lexicon, &p.lexicon, "lexicon")?)?;
            let nodes = extract_new_nodes(&pairs, &graph, &lexicon, &cfg.enhancement);
            let table = match optional_input(alignment, &p.alignment, "alignment")? {
                Some(path) => AlignmentTable::load_tsv(&path)?,
                None => align_concepts(&pairs, &graph, &lexicon, &cfg)?,
            };
            let with_nodes = enhance(&graph, &nodes, &[])?;
            let edges = extract_new_edges(&table, &with_nodes, &cfg.enhancement);
            let enhanced = enhance(&with_nodes, &Default::default(), &edges)?;
            log::info!(
                "enhanced graph: +{} nodes, +{} edges",
                enhanced.num_nodes() - graph.num_nodes(),
                enhanced.num_edges() - graph.num_edges()
            );
            write_out(out, |w| enhanced.write_triples(w))
        }
        Command::Ablate { graph, alignment, out } => {
            let graph = KnowledgeGraph::load_triples(&input(graph, &p.enhanced_graph, "graph")?)?;
            let table = AlignmentTable::load_tsv(&input(alignment, &p.alignment, "alignment")?)?;
            let ablated = ablate_edges(&graph, &table, cfg.ablation_fraction)?;
            write_out(out, |w| ablated.write_triples(w))
        }
        Command::Retrieve { graph, post, out } => {
            let graph_path = input(graph, &p.enhanced_graph.clone().or_else(|| p.graph.clone()), "graph")?;
            let graph = KnowledgeGraph::load_triples(&graph_path)?;
            let tokens = tokenize(post);
            if tokens.is_empty() {
                return Err(usage("--post must contain at least one token"));
            }
            let sg = retrieve(&tokens, &graph, &cfg.retrieval);
            write_json(out, &sg.to_view(&graph))
        }
        Command::Stats {
            corpus,
            graph,
            enhanced,
            out,
        } => {
            #[derive(Serialize)]
            struct StatsReport {
                #[serde(rename = "G")]
                base: CoverageStats,
                #[serde(rename = "G_e", skip_serializing_if = "Option::is_none")]
                enhanced: Option<CoverageStats>,
            }
            let pairs = load_pairs(&input(corpus, &p.corpus, "corpus")?)?;
            let base = KnowledgeGraph::load_triples(&input(graph, &p.graph, "graph")?)?;
            let report = StatsReport {
                base: coverage_stats(&base, &pairs, &cfg.retrieval),
                enhanced: match optional_input(enhanced, &p.enhanced_graph, "enhanced")? {
                    Some(path) => Some(coverage_stats(&KnowledgeGraph::load_triples(&path)?, &pairs, &cfg.retrieval)),
                    None => None,
                },
            };
            write_json(out, &report)
        }
        Command::Train {
            corpus,
            graph,
            out,
            epochs,
            max_steps,
            resume,
        } => {
            let mut cfg = cfg.clone();
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = *max_steps;
            }
            let corpus = input(corpus, &p.corpus, "corpus")?;
            let graph_path = input(graph, &p.enhanced_graph.clone().or_else(|| p.graph.clone()), "graph")?;
            let dir = out
                .clone()
                .or_else(|| p.model_dir.clone())
                .ok_or_else(|| usage("missing --out model directory"))?;
            train(&cfg, &corpus, &graph_path, &dir, *resume)
        }
        Command::Eval {
            model,
            corpus,
            graph,
            out,
        } => {
            let dir = input(model, &p.model_dir, "model")?;
            let corpus = input(corpus, &p.test_corpus, "corpus")?;
            let graph_path = input(graph, &p.enhanced_graph.clone().or_else(|| p.graph.clone()), "graph")?;
            evaluate(&dir, &corpus, &graph_path, out)
        }
        Command::Chat { model, graph } => {
            let dir = input(model, &p.model_dir, "model")?;
            let graph_path = input(graph, &p.enhanced_graph.clone().or_else(|| p.graph.clone()), "graph")?;
            chat(&dir, &graph_path)
        }
    }
}

fn train(cfg: &RunConfig, corpus: &Path, graph_path: &Path, dir: &Path, resume: bool) -> Result<()> {
    let pairs = load_pairs(corpus)?;
    if pairs.is_empty() {
        return Err(usage(format!("{} has no usable dialog pairs", corpus.display())));
    }
    let graph = KnowledgeGraph::load_triples(graph_path)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let vocab = if resume {
        Vocabulary::load_tsv(&dir.join(VOCAB))?
    } else {
        build_vocab(&pairs, cfg.vocab.max_size, cfg.vocab.min_freq)
    };
    let examples: Vec<PreparedExample> = pairs
        .iter()
        .map(|pair| PreparedExample::new(pair, &vocab, &graph, &cfg.retrieval))
        .collect();
    let (v, n, r) = (vocab.len(), graph.num_nodes(), graph.num_relations());
    let (seq, edge) = (&cfg.seq2seq, &cfg.edge_transformer);
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&dir.join(CHECKPOINT))?;
        Trainer::resume(seq, edge, &cfg.train, v, n, r, &ckpt)?
    } else {
        let mut t = Trainer::new(seq, edge, &cfg.train, v, n, r)?;
        if let Some(path) = &cfg.paths.embeddings {
            let set = t.model.node_embedding.load_pretrained(&mut t.store, &graph, path)?;
            log::info!("loaded {set} pretrained node vectors");
        }
        t
    };
    let config_text = serde_json::to_string_pretty(cfg)?;
    write_atomic(&dir.join(CONFIG), |w| writeln!(w, "{config_text}"))?;
    write_atomic(&dir.join(VOCAB), |w| vocab.write_tsv(w))?;

    let save = |t: &Trainer| -> Result<()> {
        t.checkpoint().save(&dir.join(CHECKPOINT))?;
        write_atomic(&dir.join(LOSS_LOG), |w| write_loss_csv(&t.log, w))?;
        Ok(())
    };
    while trainer.epochs_done < trainer.config.epochs && !trainer.step_limit_reached() {
        let complete = trainer.train_epoch(&examples)?;
        save(&trainer)?;
        if !complete {
            break;
        }
    }
    save(&trainer)
}

/// Rebuilds a trained model from its directory; `graph` must be the training graph.
fn load_model(dir: &Path, graph: &KnowledgeGraph) -> Result<(RunConfig, Vocabulary, GraphSeq2Seq, ParamStore)> {
    let cfg = RunConfig::load(&dir.join(CONFIG))?;
    let vocab = Vocabulary::load_tsv(&dir.join(VOCAB))?;
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT))?;
    let (v, n, r) = (vocab.len(), graph.num_nodes(), graph.num_relations());
    ckpt.check_hash(&config_hash(&cfg.seq2seq, &cfg.edge_transformer, &cfg.train, v, n, r))
        .context("model directory does not match this graph or configuration")?;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = GraphSeq2Seq::new(&mut store, &cfg.seq2seq, &cfg.edge_transformer, v, n, r, &mut rng)?;
    ckpt.restore_params(&mut store)?;
    Ok((cfg, vocab, model, store))
}

fn decode_options(cfg: &RunConfig) -> DecodeOptions {
    DecodeOptions {
        max_len: cfg.seq2seq.max_decode_len,
        beam_width: cfg.seq2seq.beam_width,
        gate_override: None,
    }
}

fn evaluate(dir: &Path, corpus: &Path, graph_path: &Path, out: &Option<PathBuf>) -> Result<()> {
    let graph = KnowledgeGraph::load_triples(graph_path)?;
    let (cfg, vocab, model, store) = load_model(dir, &graph)?;
    let pairs = load_pairs(corpus)?;
    if pairs.is_empty() {
        return Err(usage(format!("{} has no usable dialog pairs", corpus.display())));
    }
    let examples: Vec<PreparedExample> = pairs
        .iter()
        .map(|pair| PreparedExample::new(pair, &vocab, &graph, &cfg.retrieval))
        .collect();
    let opts = decode_options(&cfg);
    let mut hyps = Vec::with_capacity(examples.len());
    for ex in &examples {
        hyps.push(model.decode(&store, &ex.post_ids, &ex.subgraph, &vocab, &graph, &opts)?.tokens);
    }
    let refs: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| p.response.iter().map(|t| t.as_str().to_string()).collect())
        .collect();
    let steps = collect_step_probs(&model, &store, &examples)?;
    let report = EvalReport::compute(&hyps, &refs, &steps)?;
    print!("{report}");
    match out {
        Some(_) => write_json(out, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn chat(dir: &Path, graph_path: &Path) -> Result<()> {
    let graph = KnowledgeGraph::load_triples(graph_path)?;
    let (cfg, vocab, model, store) = load_model(dir, &graph)?;
    let opts = decode_options(&cfg);
    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let mut stdout = std::io::stdout().lock();
    let prompt = |w: &mut dyn Write| -> std::io::Result<()> {
        if interactive {
            write!(w, "> ")?;
            w.flush()?;
        }
        Ok(())
    };
    prompt(&mut stdout)?;
    for line in stdin.lock().lines() {
        let line = line?;
        let post = tokenize(&line);
        if post.is_empty() {
            prompt(&mut stdout)?;
            continue;
        }
        let sg = retrieve(&post, &graph, &cfg.retrieval);
        let ids: Vec<usize> = post.iter().map(|t| vocab.id(t.as_str())).collect();
        let decoded = model.decode(&store, &ids, &sg, &vocab, &graph, &opts)?;
        let concepts: Vec<&str> = sg.v0.iter().map(|&n| graph.concept(n)).collect();
        writeln!(stdout, "{}", decoded.tokens.join(" "))?;
        writeln!(stdout, "  concepts: {}", concepts.join(" "))?;
        prompt(&mut stdout)?;
    }
    Ok(())
}
