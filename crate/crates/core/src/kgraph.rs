//! Typed directed concept graph, corpus-driven enhancement and edge ablation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aligner::AlignmentTable;
use crate::corpus::{noun_tokens, token_frequencies, DialogPair, PosLexicon, Token};
use crate::error::{Error, Result};
use crate::fsutil::open_reader;
use crate::subgraph::{retrieve, RetrievalConfig};

pub const DIALOG_FLOW_TO: &str = "DialogFlowTo";
pub const SELF_TO: &str = "SelfTO";
pub const FROM_TEXT: &str = "FromText";
pub const TO_TEXT: &str = "ToText";

/// Relations present in every graph, with ids 0..4 in this order.
pub const RESERVED_RELATIONS: [&str; 4] = [DIALOG_FLOW_TO, SELF_TO, FROM_TEXT, TO_TEXT];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u16);

impl RelationId {
    pub const DIALOG_FLOW_TO: RelationId = RelationId(0);
    pub const SELF_TO: RelationId = RelationId(1);
    pub const FROM_TEXT: RelationId = RelationId(2);
    pub const TO_TEXT: RelationId = RelationId(3);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub head: NodeId,
    pub relation: RelationId,
    pub tail: NodeId,
}

/// An edge named by concept strings, possibly between concepts not yet in a graph.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptEdge {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Directed multigraph of concepts with typed edges. Duplicate triples are ignored.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    concepts: Vec<String>,
    concept_index: HashMap<String, NodeId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    edges: Vec<Edge>,
    edge_set: HashSet<Edge>,
    out_adj: Vec<Vec<usize>>,
    in_adj: Vec<Vec<usize>>,
}

impl Default for KnowledgeGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.concepts == other.concepts && self.relations == other.relations && self.edges == other.edges
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        let mut g = Self {
            concepts: Vec::new(),
            concept_index: HashMap::new(),
            relations: Vec::new(),
            relation_index: HashMap::new(),
            edges: Vec::new(),
            edge_set: HashSet::new(),
            out_adj: Vec::new(),
            in_adj: Vec::new(),
        };
        for name in RESERVED_RELATIONS {
            g.add_relation(name);
        }
        g
    }

    /// Same nodes and relations, no edges.
    fn empty_like(&self) -> Self {
        Self {
            concepts: self.concepts.clone(),
            concept_index: self.concept_index.clone(),
            relations: self.relations.clone(),
            relation_index: self.relation_index.clone(),
            edges: Vec::new(),
            edge_set: HashSet::new(),
            out_adj: vec![Vec::new(); self.concepts.len()],
            in_adj: vec![Vec::new(); self.concepts.len()],
        }
    }

    pub fn add_node(&mut self, concept: &str) -> NodeId {
        let concept = concept.to_lowercase();
        if let Some(&id) = self.concept_index.get(&concept) {
            return id;
        }
        let id = NodeId(self.concepts.len() as u32);
        self.concept_index.insert(concept.clone(), id);
        self.concepts.push(concept);
        self.out_adj.push(Vec::new());
        self.in_adj.push(Vec::new());
        id
    }

    pub fn add_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = RelationId(self.relations.len() as u16);
        self.relation_index.insert(name.to_string(), id);
        self.relations.push(name.to_string());
        id
    }

    /// Returns false if the triple was already present.
    pub fn add_edge(&mut self, head: NodeId, relation: RelationId, tail: NodeId) -> Result<bool> {
        if head.index() >= self.concepts.len() || tail.index() >= self.concepts.len() {
            return Err(Error::Graph(format!("edge endpoint out of range: {head:?} -> {tail:?}")));
        }
        if relation.index() >= self.relations.len() {
            return Err(Error::Graph(format!("unregistered relation {relation:?}")));
        }
        let edge = Edge { head, relation, tail };
        if !self.edge_set.insert(edge) {
            return Ok(false);
        }
        self.out_adj[head.index()].push(self.edges.len());
        self.in_adj[tail.index()].push(self.edges.len());
        self.edges.push(edge);
        Ok(true)
    }

    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.add_node(head);
        let t = self.add_node(tail);
        let r = self.add_relation(relation);
        self.add_edge(h, r, t).expect("endpoints registered")
    }

    pub fn node(&self, concept: &str) -> Option<NodeId> {
        self.concept_index.get(concept).copied()
    }

    pub fn concept(&self, id: NodeId) -> &str {
        &self.concepts[id.index()]
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id.index()]
    }

    pub fn num_nodes(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// All registered relations, reserved ones included.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn base_relation_count(&self) -> usize {
        self.relations.len() - RESERVED_RELATIONS.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn out_edges(&self, node: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.out_adj[node.index()].iter().map(move |&i| &self.edges[i])
    }

    pub fn in_edges(&self, node: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.in_adj[node.index()].iter().map(move |&i| &self.edges[i])
    }

    pub fn contains_edge(&self, edge: &Edge) -> bool {
        self.edge_set.contains(edge)
    }

    /// Whether any relation links `head` to `tail`.
    pub fn connected(&self, head: NodeId, tail: NodeId) -> bool {
        self.out_edges(head).any(|e| e.tail == tail)
    }

    pub fn concept_edge(&self, e: &Edge) -> ConceptEdge {
        ConceptEdge {
            head: self.concept(e.head).to_string(),
            relation: self.relation_name(e.relation).to_string(),
            tail: self.concept(e.tail).to_string(),
        }
    }

    pub fn load_triples(path: &Path) -> Result<Self> {
        Self::parse_triples(open_reader(path)?, path)
    }

    /// Reads `head<TAB>relation<TAB>tail` lines. `@node<TAB>concept` and
    /// `@relation<TAB>name` lines pre-register ids; `#` lines are comments.
    pub fn parse_triples<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let mut g = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            match fields[..] {
                ["@node", concept] if !concept.is_empty() => {
                    g.add_node(concept);
                }
                ["@relation", name] if !name.is_empty() => {
                    g.add_relation(name);
                }
                [head, relation, tail] if !head.is_empty() && !relation.is_empty() && !tail.is_empty() => {
                    g.add_triple(head, relation, tail);
                }
                _ => {
                    return Err(Error::parse(origin, i + 1, "expected head<TAB>relation<TAB>tail"));
                }
            }
        }
        Ok(g)
    }

    /// Writes a file that [`KnowledgeGraph::load_triples`] reads back with identical ids.
    pub fn write_triples<W: Write + ?Sized>(&self, out: &mut W) -> std::io::Result<()> {
        for name in &self.relations[RESERVED_RELATIONS.len()..] {
            writeln!(out, "@relation\t{name}")?;
        }
        for c in &self.concepts {
            writeln!(out, "@node\t{c}")?;
        }
        for e in &self.edges {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.concept(e.head),
                self.relation_name(e.relation),
                self.concept(e.tail)
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} nodes, {} edges, {} base relations",
            self.num_nodes(),
            self.num_edges(),
            self.base_relation_count()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancementConfig {
    /// Fraction `m` of graph nodes whose corpus frequency sets the new-node threshold.
    pub node_percentile: f64,
    /// Number `k` of top aligned targets linked from each source concept.
    pub alignment_top_k: usize,
    pub new_relation: String,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self {
            node_percentile: 0.20,
            alignment_top_k: 5,
            new_relation: DIALOG_FLOW_TO.to_string(),
        }
    }
}

impl EnhancementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.node_percentile > 0.0 && self.node_percentile <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "node_percentile must be in (0, 1], got {}",
                self.node_percentile
            )));
        }
        if self.alignment_top_k == 0 {
            return Err(Error::InvalidInput("alignment_top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Corpus frequency of the node at the top-`m` position among all graph nodes.
pub fn node_frequency_threshold(pairs: &[DialogPair], graph: &KnowledgeGraph, m: f64) -> u64 {
    let counts = token_frequencies(pairs);
    let mut freqs: Vec<u64> = graph
        .concepts()
        .iter()
        .map(|c| counts.get(c.as_str()).copied().unwrap_or(0))
        .collect();
    if freqs.is_empty() {
        return 0;
    }
    freqs.sort_unstable_by(|a, b| b.cmp(a));
    let rank = ((m * freqs.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    freqs[rank.min(freqs.len()) - 1]
}

/// Corpus nouns outside the graph whose frequency is strictly above the threshold.
pub fn extract_new_nodes(
    pairs: &[DialogPair],
    graph: &KnowledgeGraph,
    lexicon: &PosLexicon,
    config: &EnhancementConfig,
) -> BTreeSet<Token> {
    let threshold = node_frequency_threshold(pairs, graph, config.node_percentile);
    let counts = token_frequencies(pairs);
    noun_tokens(pairs, lexicon)
        .into_iter()
        .filter(|t| graph.node(t.as_str()).is_none())
        .filter(|t| counts.get(t.as_str()).copied().unwrap_or(0) > threshold)
        .collect()
}

/// Links each aligned source to its top-k targets unless the two are already
/// connected by some relation or are the same concept.
pub fn extract_new_edges(
    table: &AlignmentTable,
    graph: &KnowledgeGraph,
    config: &EnhancementConfig,
) -> Vec<ConceptEdge> {
    let mut out = Vec::new();
    for source in table.sources() {
        for (target, _) in table.top_k_targets(source, config.alignment_top_k) {
            if target == source {
                continue;
            }
            let exists = match (graph.node(source), graph.node(&target)) {
                (Some(h), Some(t)) => graph.connected(h, t),
                _ => false,
            };
            if !exists {
                out.push(ConceptEdge {
                    head: source.to_string(),
                    relation: config.new_relation.clone(),
                    tail: target,
                });
            }
        }
    }
    out
}

/// Returns a new graph with the extra nodes and edges; the input is untouched.
pub fn enhance(
    graph: &KnowledgeGraph,
    new_nodes: &BTreeSet<Token>,
    new_edges: &[ConceptEdge],
) -> Result<KnowledgeGraph> {
    let mut g = graph.clone();
    for n in new_nodes {
        g.add_node(n.as_str());
    }
    for e in new_edges {
        let (Some(h), Some(t)) = (g.node(&e.head), g.node(&e.tail)) else {
            return Err(Error::Graph(format!(
                "dangling edge endpoint in {} -{}-> {}",
                e.head, e.relation, e.tail
            )));
        };
        let r = g.add_relation(&e.relation);
        g.add_edge(h, r, t)?;
    }
    Ok(g)
}

/// Number of entries in the bottom `fraction` of a ranking of `len` items.
pub fn bottom_count(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64) + 1e-9).floor().min(len as f64) as usize
}

/// Removes edges from each aligned source to the targets in the bottom `fraction`
/// of its alignment ranking.
pub fn ablate_edges(graph: &KnowledgeGraph, table: &AlignmentTable, fraction: f64) -> Result<KnowledgeGraph> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("ablation fraction must be in [0, 1], got {fraction}")));
    }
    let mut doomed: HashSet<(NodeId, NodeId)> = HashSet::new();
    for source in table.sources() {
        let Some(h) = graph.node(source) else { continue };
        let ranked = table.ranked_targets(source);
        let cut = bottom_count(ranked.len(), fraction);
        for (target, _) in &ranked[ranked.len() - cut..] {
            if let Some(t) = graph.node(target) {
                doomed.insert((h, t));
            }
        }
    }
    let mut g = graph.empty_like();
    for e in graph.edges() {
        if !doomed.contains(&(e.head, e.tail)) {
            g.add_edge(e.head, e.relation, e.tail)?;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HopCoverage {
    pub amount: f64,
    pub golden: f64,
}

/// Per-example averages over a corpus of retrieved and golden node counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub nodes: usize,
    pub edges: usize,
    pub response_nodes: f64,
    pub hop0: HopCoverage,
    pub hop1: HopCoverage,
    pub hop2: HopCoverage,
}

impl CoverageStats {
    pub fn hops(&self) -> [HopCoverage; 3] {
        [self.hop0, self.hop1, self.hop2]
    }
}

pub fn coverage_stats(graph: &KnowledgeGraph, pairs: &[DialogPair], retrieval: &RetrievalConfig) -> CoverageStats {
    let mut stats = CoverageStats {
        nodes: graph.num_nodes(),
        edges: graph.num_edges(),
        ..Default::default()
    };
    if pairs.is_empty() {
        return stats;
    }
    let mut sums = [0usize; 7];
    for pair in pairs {
        let response: BTreeSet<NodeId> = pair.response.iter().filter_map(|t| graph.node(t.as_str())).collect();
        let sg = retrieve(&pair.post, graph, retrieval);
        sums[0] += response.len();
        for (h, hop) in [&sg.v0, &sg.v1, &sg.v2].into_iter().enumerate() {
            sums[1 + 2 * h] += hop.len();
            sums[2 + 2 * h] += hop.iter().filter(|n| response.contains(n)).count();
        }
    }
    let n = pairs.len() as f64;
    let avg = |i: usize| sums[i] as f64 / n;
    stats.response_nodes = avg(0);
    stats.hop0 = HopCoverage { amount: avg(1), golden: avg(2) };
    stats.hop1 = HopCoverage { amount: avg(3), golden: avg(4) };
    stats.hop2 = HopCoverage { amount: avg(5), golden: avg(6) };
    stats
}
