//! Per-post subgraph retrieval with hop-partitioned node sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::kgraph::{Edge, KnowledgeGraph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Maximum number of 2-hop nodes kept.
    pub two_hop_cap: usize,
    /// When set, only these nodes may enter the 2-hop set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub two_hop_base: Option<BTreeSet<NodeId>>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            two_hop_cap: 100,
            two_hop_base: None,
        }
    }
}

/// Retrieved neighbourhood of a post: disjoint hop sets and the edges among them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Subgraph {
    pub v0: BTreeSet<NodeId>,
    pub v1: BTreeSet<NodeId>,
    pub v2: BTreeSet<NodeId>,
    /// Sorted by (head, relation, tail).
    pub edges: Vec<Edge>,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.v0.is_empty() && self.v1.is_empty() && self.v2.is_empty()
    }

    pub fn len(&self) -> usize {
        self.v0.len() + self.v1.len() + self.v2.len()
    }

    /// v0, then v1, then v2, each ascending by node id.
    pub fn node_order(&self) -> Vec<NodeId> {
        self.v0.iter().chain(&self.v1).chain(&self.v2).copied().collect()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.v0.contains(&node) || self.v1.contains(&node) || self.v2.contains(&node)
    }

    pub fn to_view(&self, graph: &KnowledgeGraph) -> SubgraphView {
        let names = |s: &BTreeSet<NodeId>| s.iter().map(|&n| graph.concept(n).to_string()).collect();
        SubgraphView {
            v0: names(&self.v0),
            v1: names(&self.v1),
            v2: names(&self.v2),
            edges: self
                .edges
                .iter()
                .map(|e| {
                    [
                        graph.concept(e.head).to_string(),
                        graph.relation_name(e.relation).to_string(),
                        graph.concept(e.tail).to_string(),
                    ]
                })
                .collect(),
        }
    }
}

/// JSON form of a [`Subgraph`] with concept names in place of ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphView {
    pub v0: Vec<String>,
    pub v1: Vec<String>,
    pub v2: Vec<String>,
    pub edges: Vec<[String; 3]>,
}

/// Graph nodes whose concept equals a post token.
pub fn match_source_nodes(post: &[Token], graph: &KnowledgeGraph) -> BTreeSet<NodeId> {
    post.iter().filter_map(|t| graph.node(t.as_str())).collect()
}

pub fn retrieve(post: &[Token], graph: &KnowledgeGraph, config: &RetrievalConfig) -> Subgraph {
    let v0 = match_source_nodes(post, graph);
    let mut v1 = BTreeSet::new();
    let mut edges = BTreeSet::new();

    for &a in &v0 {
        for e in graph.out_edges(a) {
            edges.insert(*e);
            if !v0.contains(&e.tail) {
                v1.insert(e.tail);
            }
        }
    }

    // 2-hop candidates with the set of distinct 1-hop parents pointing at them.
    let mut parents: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    let mut pending = Vec::new();
    for &a in &v1 {
        for e in graph.out_edges(a) {
            let b = e.tail;
            if v0.contains(&b) || v1.contains(&b) {
                edges.insert(*e);
            } else if config.two_hop_base.as_ref().is_none_or(|base| base.contains(&b)) {
                parents.entry(b).or_default().insert(a);
                pending.push(*e);
            }
        }
    }

    let mut ranked: Vec<(NodeId, usize)> = parents.into_iter().map(|(n, p)| (n, p.len())).collect();
    ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate(config.two_hop_cap);
    let v2: BTreeSet<NodeId> = ranked.into_iter().map(|(n, _)| n).collect();
    edges.extend(pending.into_iter().filter(|e| v2.contains(&e.tail)));

    Subgraph {
        v0,
        v1,
        v2,
        edges: edges.into_iter().collect(),
    }
}
