//! Edge-aware transformer encoder over a retrieved subgraph.
//!
//! Node `p` attends only to its sources `S(p)` (tails attend to heads), itself
//! and the post node. Each attention score gets a learned scalar bias chosen by
//! the type of the edge `q -> p`. One layer computes
//!
//! ```text
//! a[p, q] = softmax_q( Q(h_p) . K(h_q) / sqrt(d) + R(e[q, p]) )   over allowed q
//! u_p     = sum_q a[p, q] V(h_q)
//! h'_p    = FFN(h_p + u_p)
//! ```

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::open_reader;
use crate::kgraph::{KnowledgeGraph, NodeId, RelationId};
use crate::numcore::nn::{Ffn, Linear};
use crate::numcore::{Init, NumError, ParamId, ParamStore, Tape, Var};
use crate::subgraph::Subgraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeTransformerConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub use_post_node: bool,
    pub use_edge_mask: bool,
    pub use_edge_embedding: bool,
}

impl Default for EdgeTransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden_dim: 64,
            num_heads: 1,
            use_post_node: true,
            use_edge_mask: true,
            use_edge_embedding: true,
        }
    }
}

impl EdgeTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(Error::InvalidInput("edge transformer dims must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidInput(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Dense attention structure for a subgraph plus the optional post node.
///
/// Row `p`, column `q` is allowed when `q` may send to `p`; `types` holds the
/// relation of that slot. The post node, when present, is the last row.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedGraph {
    pub nodes: Vec<NodeId>,
    pub has_post_node: bool,
    pub mask: Vec<bool>,
    pub types: Vec<Option<RelationId>>,
}

impl AugmentedGraph {
    pub fn size(&self) -> usize {
        self.nodes.len() + usize::from(self.has_post_node)
    }

    pub fn allows(&self, p: usize, q: usize) -> bool {
        self.mask[p * self.size() + q]
    }

    pub fn edge_type(&self, p: usize, q: usize) -> Option<RelationId> {
        self.types[p * self.size() + q]
    }

    /// Row index of the post node, if any.
    pub fn post_index(&self) -> Option<usize> {
        self.has_post_node.then_some(self.nodes.len())
    }
}

/// Builds mask and edge types. Parallel edges `q -> p` with different relations
/// share one slot typed by the lowest relation id. The diagonal is always `SelfTO`.
pub fn augment(subgraph: &Subgraph, config: &EdgeTransformerConfig) -> AugmentedGraph {
    let nodes = subgraph.node_order();
    let position: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let has_post_node = config.use_post_node;
    let n = nodes.len() + usize::from(has_post_node);
    let mut mask = vec![!config.use_edge_mask; n * n];
    let mut types: Vec<Option<RelationId>> = vec![None; n * n];

    for e in &subgraph.edges {
        let (Some(&q), Some(&p)) = (position.get(&e.head), position.get(&e.tail)) else {
            continue;
        };
        if p == q {
            continue;
        }
        mask[p * n + q] = true;
        let slot = &mut types[p * n + q];
        *slot = Some(slot.map_or(e.relation, |r| r.min(e.relation)));
    }
    for p in 0..n {
        mask[p * n + p] = true;
        types[p * n + p] = Some(RelationId::SELF_TO);
    }
    if has_post_node {
        let x = nodes.len();
        for p in 0..nodes.len() {
            // X' -> p is FromText; p -> X' is ToText.
            mask[p * n + x] = true;
            types[p * n + x] = Some(RelationId::FROM_TEXT);
            mask[x * n + p] = true;
            types[x * n + p] = Some(RelationId::TO_TEXT);
        }
    }
    AugmentedGraph {
        nodes,
        has_post_node,
        mask,
        types,
    }
}

#[derive(Clone, Debug)]
pub struct EdgeLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// `num_relations x num_heads` scalar biases.
    pub relation_bias: ParamId,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct EdgeTransformer {
    pub config: EdgeTransformerConfig,
    pub layers: Vec<EdgeLayer>,
    pub num_relations: usize,
}

/// Per-layer node states; `layers[0]` is the input and `output` the last layer.
#[derive(Clone, Debug)]
pub struct GraphEncoding {
    pub layers: Vec<Var>,
    /// `[layer][head]` attention matrices.
    pub attention: Vec<Vec<Var>>,
    pub output: Var,
    pub rows: usize,
}

impl EdgeTransformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &EdgeTransformerConfig,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let layers = (0..config.num_layers)
            .map(|l| -> Result<EdgeLayer, NumError> {
                let prefix = format!("{name}.layer{l}");
                Ok(EdgeLayer {
                    query: Linear::new(store, &format!("{prefix}.query"), d, d, rng)?,
                    key: Linear::without_bias(store, &format!("{prefix}.key"), d, d, rng)?,
                    value: Linear::new(store, &format!("{prefix}.value"), d, d, rng)?,
                    relation_bias: store.register(
                        format!("{prefix}.relation_bias"),
                        num_relations,
                        config.num_heads,
                        Init::Uniform(0.1),
                        rng,
                    )?,
                    ffn: Ffn::new(store, &format!("{prefix}.ffn"), d, d, d, rng)?,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config: config.clone(),
            layers,
            num_relations,
        })
    }

    /// Runs all layers. `node_inputs` has one row per subgraph node in
    /// `ag.nodes` order; `post` is the `1 x d` post vector, required when the
    /// augmented graph has a post node.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ag: &AugmentedGraph,
        node_inputs: Var,
        post: Option<Var>,
    ) -> Result<GraphEncoding> {
        let d = self.config.hidden_dim;
        let shape = tape.value(node_inputs).shape();
        if shape != [ag.nodes.len(), d] && !(ag.nodes.is_empty() && shape[0] == 0) {
            return Err(NumError::ShapeMismatch {
                op: "edgeformer.encode",
                left: shape,
                right: [ag.nodes.len(), d],
            }
            .into());
        }
        if let Some(bad) = ag.types.iter().flatten().find(|r| r.index() >= self.num_relations) {
            return Err(Error::Graph(format!("relation id {} has no bias entry", bad.0)));
        }
        let mut h = match (ag.has_post_node, post) {
            (true, Some(p)) => {
                let ps = tape.value(p).shape();
                if ps != [1, d] {
                    return Err(NumError::ShapeMismatch {
                        op: "edgeformer.post_vector",
                        left: ps,
                        right: [1, d],
                    }
                    .into());
                }
                if ag.nodes.is_empty() {
                    p
                } else {
                    tape.concat_rows(&[node_inputs, p])?
                }
            }
            (true, None) => {
                return Err(Error::InvalidInput("augmented graph has a post node but no post vector".into()))
            }
            (false, _) => node_inputs,
        };

        let n = ag.size();
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = vec![h];
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if n == 0 {
                layers.push(h);
                attention.push(Vec::new());
                continue;
            }
            let q = layer.query.forward(tape, store, h)?;
            let k = layer.key.forward(tape, store, h)?;
            let v = layer.value.forward(tape, store, h)?;
            let bias = tape.param(store, layer.relation_bias);
            let mut head_out = Vec::with_capacity(heads);
            let mut head_att = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, hd * dh, (hd + 1) * dh)?,
                        tape.slice_cols(k, hd * dh, (hd + 1) * dh)?,
                        tape.slice_cols(v, hd * dh, (hd + 1) * dh)?,
                    )
                };
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let mut scores = tape.scale(scores, scale)?;
                if self.config.use_edge_embedding {
                    let index = ag.types.iter().map(|t| t.map(|r| r.index() * heads + hd)).collect();
                    let b = tape.gather_elems(bias, index, n, n)?;
                    scores = tape.add(scores, b)?;
                }
                let a = tape.masked_softmax(scores, ag.mask.clone())?;
                head_att.push(a);
                head_out.push(tape.matmul(a, vh)?);
            }
            let u = if heads == 1 { head_out[0] } else { tape.concat_cols(&head_out)? };
            let hu = tape.add(h, u)?;
            h = layer.ffn.forward(tape, store, hu)?;
            layers.push(h);
            attention.push(head_att);
        }
        Ok(GraphEncoding {
            output: h,
            layers,
            attention,
            rows: n,
        })
    }
}

/// Trainable input vector per graph node.
#[derive(Clone, Debug)]
pub struct NodeEmbeddings {
    pub table: ParamId,
}

impl NodeEmbeddings {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        num_nodes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.register(format!("{name}.table"), num_nodes.max(1), dim, Init::Normal(0.5), rng)?;
        Ok(Self { table })
    }

    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, nodes: &[NodeId]) -> Result<Var> {
        let table = tape.param(store, self.table);
        let ids: Vec<usize> = nodes.iter().map(|n| n.index()).collect();
        Ok(tape.gather_rows(table, &ids)?)
    }

    /// Overwrites rows with vectors from a `concept<TAB>v1,v2,...` file. Returns
    /// the number of rows set; concepts missing from the file keep their random init.
    pub fn load_pretrained(&self, store: &mut ParamStore, graph: &KnowledgeGraph, path: &Path) -> Result<usize> {
        let dim = store.get(self.table).cols();
        let mut loaded = 0;
        for (i, line) in open_reader(path)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let Some((concept, values)) = line.split_once('\t') else {
                return Err(Error::parse(path, i + 1, "expected concept<TAB>v1,v2,..."));
            };
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if values.len() != dim {
                return Err(Error::parse(path, i + 1, format!("expected {dim} values, found {}", values.len())));
            }
            if let Some(node) = graph.node(&concept.to_lowercase()) {
                store.get_mut(self.table).row_mut(node.index()).copy_from_slice(&values);
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}
