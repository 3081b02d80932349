#![allow(dead_code)]

use std::collections::BTreeSet;

use edgeflow::kgraph::{Edge, NodeId, RelationId};
use edgeflow::numcore::{NumError, ParamId, ParamStore, Tensor};
use edgeflow::subgraph::Subgraph;
use edgeflow::Error;
use rand::Rng;

/// Relation ids 0..4 are reserved; tests use 4.. for graph edges.
pub const FIRST_BASE_RELATION: u16 = 4;

pub fn num(e: Error) -> NumError {
    match e {
        Error::Num(n) => n,
        other => NumError::InvalidArgument(other.to_string()),
    }
}

/// All nodes in the 0-hop set, random typed edges without self-loops.
pub fn random_subgraph<R: Rng>(rng: &mut R, n: usize, p_edge: f64, relations: u16) -> Subgraph {
    let v0: BTreeSet<NodeId> = (0..n as u32).map(NodeId).collect();
    let mut edges = BTreeSet::new();
    for h in 0..n as u32 {
        for t in 0..n as u32 {
            if h != t && rng.gen_bool(p_edge) {
                let r = FIRST_BASE_RELATION + rng.gen_range(0..relations);
                edges.insert(Edge {
                    head: NodeId(h),
                    relation: RelationId(r),
                    tail: NodeId(t),
                });
            }
        }
    }
    Subgraph {
        v0,
        v1: BTreeSet::new(),
        v2: BTreeSet::new(),
        edges: edges.into_iter().collect(),
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn param_rows(store: &ParamStore, id: ParamId) -> Vec<Vec<f64>> {
    to_rows(store.get(id))
}

/// `x W + b` on plain rows.
pub fn affine(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().zip(w).map(|(xi, wr)| xi * wr[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Independent single-head transformer layer without masking or biases:
/// `FFN(h + softmax(Q K^T / sqrt(d)) V)`.
pub fn vanilla_layer(store: &ParamStore, layer: &edgeflow::edgeformer::EdgeLayer, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let lin = |l: &edgeflow::numcore::nn::Linear, x: &[Vec<f64>]| {
        let cols = store.get(l.weight).cols();
        let bias = l.bias.map_or(vec![0.0; cols], |b| store.get(b).row(0).to_vec());
        affine(x, &param_rows(store, l.weight), &bias)
    };
    let q = lin(&layer.query, h);
    let k = lin(&layer.key, h);
    let v = lin(&layer.value, h);
    let d = h[0].len() as f64;
    let mut x = Vec::with_capacity(h.len());
    for p in 0..h.len() {
        let scores: Vec<f64> = k
            .iter()
            .map(|kq| q[p].iter().zip(kq).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let a = softmax(&scores);
        let row: Vec<f64> = (0..h[p].len())
            .map(|j| h[p][j] + a.iter().zip(&v).map(|(w, vq)| w * vq[j]).sum::<f64>())
            .collect();
        x.push(row);
    }
    let inner: Vec<Vec<f64>> = lin(&layer.ffn.inner, &x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    lin(&layer.ffn.outer, &inner)
}

/// Complete digraph on `n` nodes with a single base relation.
pub fn complete_subgraph(n: usize) -> Subgraph {
    let mut edges = Vec::new();
    for h in 0..n as u32 {
        for t in 0..n as u32 {
            if h != t {
                edges.push(Edge {
                    head: NodeId(h),
                    relation: RelationId(FIRST_BASE_RELATION),
                    tail: NodeId(t),
                });
            }
        }
    }
    Subgraph {
        v0: (0..n as u32).map(NodeId).collect(),
        v1: BTreeSet::new(),
        v2: BTreeSet::new(),
        edges,
    }
}

/// Nodes that can reach `target` within `hops` steps along allowed attention slots
/// (`q` reaches `p` in one step when row `p` allows column `q`).
pub fn reach_within(ag: &edgeflow::edgeformer::AugmentedGraph, target: usize, hops: usize) -> Vec<bool> {
    let n = ag.size();
    let mut reach = vec![false; n];
    reach[target] = true;
    for _ in 0..hops {
        let mut next = reach.clone();
        for p in 0..n {
            if reach[p] {
                for (q, slot) in next.iter_mut().enumerate() {
                    if ag.allows(p, q) {
                        *slot = true;
                    }
                }
            }
        }
        reach = next;
    }
    reach
}
