//! GRU encoder-decoder with text and graph attention and a copy gate.
//!
//! At step `t` the decoder state is updated from the previous token and the
//! previous contexts, then
//!
//! ```text
//! sigma   = sigmoid(FFN_gate(s_t))
//! p_vocab = softmax(FFN_vocab(s_t))
//! p_copy  = graph attention restricted to subgraph nodes, renormalized
//! p_t     = [(1 - sigma) p_vocab ; sigma p_copy]      over V + N slots
//! ```
//!
//! Training minimizes `L_gen + L_copy + L_gate` with copy supervision given by
//! reference tokens that name a subgraph concept.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogPair, Token, Vocabulary, BOS, EOS};
use crate::edgeformer::{augment, EdgeTransformer, EdgeTransformerConfig, NodeEmbeddings};
use crate::error::{Error, Result};
use crate::evalsuite::StepProbs;
use crate::kgraph::{KnowledgeGraph, NodeId};
use crate::numcore::nn::{Ffn, GruCell, Linear};
use crate::numcore::{sigmoid, softmax_row, Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::subgraph::{retrieve, RetrievalConfig, Subgraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seq2SeqConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub max_decode_len: usize,
    /// 1 is greedy decoding.
    pub beam_width: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            hidden_dim: 64,
            embedding_dim: 64,
            max_decode_len: 20,
            beam_width: 1,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers == 0
            || self.decoder_layers == 0
            || self.hidden_dim == 0
            || self.embedding_dim == 0
            || self.beam_width == 0
        {
            return Err(Error::InvalidInput("seq2seq dims, layers and beam width must be positive".into()));
        }
        Ok(())
    }
}

/// Dropout switch threaded through a forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut dyn RngCore) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => Ok(tape.dropout(x, self.rate, rng)?),
            _ => Ok(x),
        }
    }
}

/// `score_i = v . tanh(W_m m_i + W_q q + b)`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub memory: Linear,
    pub query: ParamId,
    pub score: ParamId,
}

/// Memory rows with their attention projection precomputed.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMemory {
    pub states: Var,
    pub proj: Var,
    pub rows: usize,
}

impl AdditiveAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        memory_dim: usize,
        query_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            memory: Linear::new(store, &format!("{name}.memory"), memory_dim, attn_dim, rng)?,
            query: store.register(format!("{name}.query"), query_dim, attn_dim, Init::Xavier, rng)?,
            score: store.register(format!("{name}.score"), attn_dim, 1, Init::Xavier, rng)?,
        })
    }

    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, states: Var) -> Result<AttentionMemory> {
        let rows = tape.value(states).rows();
        let proj = self.memory.forward(tape, store, states)?;
        Ok(AttentionMemory { states, proj, rows })
    }

    /// `1 x rows` unnormalized scores.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, mem: &AttentionMemory, query: Var) -> Result<Var> {
        let wq = tape.param(store, self.query);
        let q = tape.matmul(query, wq)?;
        let e = tape.add_row(mem.proj, q)?;
        let e = tape.tanh(e)?;
        let v = tape.param(store, self.score);
        let s = tape.matmul(e, v)?;
        Ok(tape.transpose(s)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// Top-layer state `s_t`.
    pub s: Var,
    pub c_text: Var,
    pub c_graph: Var,
}

/// Differentiable outputs of one decoder step.
#[derive(Clone, Debug)]
pub struct StepOutputs {
    pub layer_states: Vec<Var>,
    pub state: DecoderState,
    pub vocab_logits: Var,
    /// `None` when the subgraph has no nodes; the gate is then fixed at 0.
    pub gate_logit: Option<Var>,
    /// Graph attention logits over every row of `H`, including the post node.
    pub graph_logits: Option<Var>,
    /// Logits over subgraph nodes only.
    pub copy_logits: Option<Var>,
}

/// Plain-value record of one decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationStep {
    pub sigma: f64,
    pub p_vocab: Vec<f64>,
    /// Over subgraph `node_order`; empty for an empty subgraph.
    pub p_copy: Vec<f64>,
    /// Over all rows of `H`.
    pub a_t: Vec<f64>,
    /// `V + N` slots: vocabulary first, then subgraph nodes.
    pub p_t: Vec<f64>,
}

impl GenerationStep {
    pub fn from_distributions(sigma: f64, p_vocab: Vec<f64>, p_copy: Vec<f64>, a_t: Vec<f64>) -> Self {
        let sigma = if p_copy.is_empty() { 0.0 } else { sigma };
        let p_t = mixture(sigma, &p_vocab, &p_copy);
        Self {
            sigma,
            p_vocab,
            p_copy,
            a_t,
            p_t,
        }
    }
}

/// `[(1 - sigma) p_vocab ; sigma p_copy]`.
pub fn mixture(sigma: f64, p_vocab: &[f64], p_copy: &[f64]) -> Vec<f64> {
    p_vocab
        .iter()
        .map(|p| (1.0 - sigma) * p)
        .chain(p_copy.iter().map(|p| sigma * p))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gen: f64,
    pub l_copy: f64,
    pub l_gate: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_gen: f64, l_copy: f64, l_gate: f64) -> Self {
        Self {
            l_gen,
            l_copy,
            l_gate,
            total: l_gen + l_copy + l_gate,
        }
    }

    /// Loss from plain step records.
    pub fn from_steps(steps: &[GenerationStep], reference: &[usize], copy_targets: &[Option<usize>]) -> Result<Self> {
        check_lengths(steps.len(), reference.len(), copy_targets.len())?;
        let (mut gen, mut n_gen, mut copy, mut n_copy, mut gate) = (0.0, 0usize, 0.0, 0usize, 0.0);
        for ((step, &tok), target) in steps.iter().zip(reference).zip(copy_targets) {
            let label = target.is_some();
            gate -= if label { step.sigma.ln() } else { (1.0 - step.sigma).ln() };
            match target {
                Some(node) => {
                    copy -= step.p_copy[*node].ln();
                    n_copy += 1;
                }
                None => {
                    gen -= step.p_vocab[tok].ln();
                    n_gen += 1;
                }
            }
        }
        Ok(Self::new(mean(gen, n_gen), mean(copy, n_copy), gate / steps.len().max(1) as f64))
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn check_lengths(steps: usize, reference: usize, targets: usize) -> Result<()> {
    if steps != reference || steps != targets {
        return Err(Error::InvalidInput(format!(
            "loss needs one step per reference token: {steps} steps, {reference} tokens, {targets} copy labels"
        )));
    }
    Ok(())
}

/// Loss terms on the tape plus their values.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Three-part loss over recorded decoder steps.
pub fn compute_loss(
    tape: &mut Tape,
    steps: &[StepOutputs],
    reference: &[usize],
    copy_targets: &[Option<usize>],
) -> Result<LossVars> {
    check_lengths(steps.len(), reference.len(), copy_targets.len())?;
    let mut gen = Vec::new();
    let mut copy = Vec::new();
    let mut gate = Vec::new();
    for ((step, &tok), target) in steps.iter().zip(reference).zip(copy_targets) {
        if let Some(g) = step.gate_logit {
            gate.push(tape.bce_logits(g, if target.is_some() { 1.0 } else { 0.0 })?);
        }
        match (target, step.copy_logits) {
            (Some(node), Some(logits)) => copy.push(tape.cross_entropy_logits(logits, None, *node)?),
            (Some(_), None) => return Err(Error::InvalidInput("copy target without subgraph nodes".into())),
            (None, _) => gen.push(tape.cross_entropy_logits(step.vocab_logits, None, tok)?),
        }
    }
    let n = steps.len();
    let term = |tape: &mut Tape, parts: &[Var], denom: usize| -> Result<Option<Var>> {
        if parts.is_empty() {
            return Ok(None);
        }
        let joined = tape.concat_cols(parts)?;
        let s = tape.sum(joined)?;
        Ok(Some(tape.scale(s, 1.0 / denom as f64)?))
    };
    let l_gen = term(tape, &gen, gen.len())?;
    let l_copy = term(tape, &copy, copy.len())?;
    let l_gate = term(tape, &gate, n)?;
    let value = |tape: &Tape, v: Option<Var>| v.map_or(Ok(0.0), |v| tape.scalar(v));
    let breakdown = LossBreakdown::new(value(tape, l_gen)?, value(tape, l_copy)?, value(tape, l_gate)?);
    let parts: Vec<Var> = [l_gen, l_copy, l_gate].into_iter().flatten().collect();
    let total = match parts.as_slice() {
        [] => tape.constant(Tensor::scalar(0.0))?,
        [one] => *one,
        many => {
            let j = tape.concat_cols(many)?;
            tape.sum(j)?
        }
    };
    Ok(LossVars { total, breakdown })
}

/// Copy target per reference token: index into `node_order` of the first node
/// whose concept equals the token.
pub fn copy_targets(reference: &[Token], subgraph: &Subgraph, graph: &KnowledgeGraph) -> Vec<Option<usize>> {
    let order = subgraph.node_order();
    reference
        .iter()
        .map(|t| order.iter().position(|&n| graph.concept(n) == t.as_str()))
        .collect()
}

/// A dialog pair resolved against a vocabulary and graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub post_ids: Vec<usize>,
    /// Response ids followed by EOS.
    pub target_ids: Vec<usize>,
    pub copy_targets: Vec<Option<usize>>,
    pub subgraph: Subgraph,
}

impl PreparedExample {
    pub fn new(pair: &DialogPair, vocab: &Vocabulary, graph: &KnowledgeGraph, retrieval: &RetrievalConfig) -> Self {
        let subgraph = retrieve(&pair.post, graph, retrieval);
        Self::with_subgraph(pair, vocab, graph, subgraph)
    }

    pub fn with_subgraph(pair: &DialogPair, vocab: &Vocabulary, graph: &KnowledgeGraph, subgraph: Subgraph) -> Self {
        let mut target_ids: Vec<usize> = pair.response.iter().map(|t| vocab.id(t.as_str())).collect();
        target_ids.push(EOS);
        let mut targets = copy_targets(&pair.response, &subgraph, graph);
        targets.push(None);
        Self {
            post_ids: pair.post.iter().map(|t| vocab.id(t.as_str())).collect(),
            target_ids,
            copy_targets: targets,
            subgraph,
        }
    }
}

/// Encoder outputs consumed by the decoder.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    pub text: AttentionMemory,
    pub graph: Option<AttentionMemory>,
    pub num_nodes: usize,
    pub nodes: Vec<NodeId>,
    pub final_states: Vec<Var>,
    pub post_vector: Var,
}

/// Decoding controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub beam_width: usize,
    /// Replaces the learned gate on non-empty subgraphs.
    pub gate_override: Option<f64>,
}

/// Emitted token with the slot it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Emission {
    Vocab(usize),
    Copy(NodeId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<String>,
    pub emissions: Vec<Emission>,
    pub log_prob: f64,
}

/// The full generator: embeddings, GRU encoder, edge transformer and decoder.
#[derive(Clone, Debug)]
pub struct GraphSeq2Seq {
    pub config: Seq2SeqConfig,
    pub edge_config: EdgeTransformerConfig,
    pub vocab_size: usize,
    pub word_embedding: ParamId,
    pub node_embedding: NodeEmbeddings,
    pub encoder: Vec<GruCell>,
    pub decoder: Vec<GruCell>,
    pub edge: EdgeTransformer,
    pub text_attention: AdditiveAttention,
    pub graph_attention: AdditiveAttention,
    pub gate: Ffn,
    pub vocab_out: Ffn,
}

impl GraphSeq2Seq {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &Seq2SeqConfig,
        edge_config: &EdgeTransformerConfig,
        vocab_size: usize,
        num_graph_nodes: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        edge_config.validate()?;
        let h = config.hidden_dim;
        let e = config.embedding_dim;
        if edge_config.hidden_dim != h {
            return Err(Error::InvalidInput(format!(
                "edge transformer hidden_dim {} must equal seq2seq hidden_dim {h}",
                edge_config.hidden_dim
            )));
        }
        let word_embedding = store.register("embedding.words", vocab_size, e, Init::Normal(0.5), rng)?;
        let node_embedding = NodeEmbeddings::new(store, "embedding.nodes", num_graph_nodes, h, rng)?;
        let encoder = (0..config.encoder_layers)
            .map(|l| GruCell::new(store, &format!("encoder.gru{l}"), if l == 0 { e } else { h }, h, rng))
            .collect::<Result<_, _>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|l| GruCell::new(store, &format!("decoder.gru{l}"), if l == 0 { e + 2 * h } else { h }, h, rng))
            .collect::<Result<_, _>>()?;
        let edge = EdgeTransformer::new(store, "graph", edge_config, num_relations, rng)?;
        Ok(Self {
            config: config.clone(),
            edge_config: edge_config.clone(),
            vocab_size,
            word_embedding,
            node_embedding,
            encoder,
            decoder,
            edge,
            text_attention: AdditiveAttention::new(store, "attention.text", h, h, h, rng)?,
            graph_attention: AdditiveAttention::new(store, "attention.graph", h, h, h, rng)?,
            gate: Ffn::new(store, "gate", h, h, 1, rng)?,
            vocab_out: Ffn::new(store, "vocab", h, h, vocab_size, rng)?,
        })
    }

    fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let table = tape.param(store, self.word_embedding);
        Ok(tape.gather_rows(table, ids)?)
    }

    /// Runs the stacked GRU over the post. Returns the top-layer state per token
    /// (`len x hidden`) and the final state of every layer; the post vector is
    /// the last row of the former.
    pub fn encode_post(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        post: &[usize],
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        if post.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty post".into()));
        }
        let h = self.config.hidden_dim;
        let emb = self.embed(tape, store, post)?;
        let emb = dropout.apply(tape, emb)?;
        let mut inputs: Vec<Var> = (0..post.len())
            .map(|i| tape.slice_rows(emb, i, i + 1))
            .collect::<Result<_, _>>()?;
        let mut finals = Vec::with_capacity(self.encoder.len());
        for (l, cell) in self.encoder.iter().enumerate() {
            let mut state = tape.constant(Tensor::zeros(1, h))?;
            let mut outputs = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                state = cell.forward(tape, store, x, state)?;
                outputs.push(state);
            }
            finals.push(state);
            inputs = if l + 1 < self.encoder.len() {
                outputs
                    .into_iter()
                    .map(|o| dropout.apply(tape, o))
                    .collect::<Result<_>>()?
            } else {
                outputs
            };
        }
        let states = tape.concat_rows(&inputs)?;
        Ok((states, finals))
    }

    /// Encodes post and subgraph into the decoder's attention memories.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        post: &[usize],
        subgraph: &Subgraph,
        dropout: &mut Dropout<'_>,
    ) -> Result<EncodedInput> {
        let (states, finals) = self.encode_post(tape, store, post, dropout)?;
        let post_vector = *finals.last().expect("at least one encoder layer");
        let text = self.text_attention.prepare(tape, store, states)?;
        let ag = augment(subgraph, &self.edge_config);
        let graph = if ag.size() == 0 {
            None
        } else {
            let node_inputs = if ag.nodes.is_empty() {
                tape.constant(Tensor::zeros(0, self.config.hidden_dim))?
            } else {
                self.node_embedding.lookup(tape, store, &ag.nodes)?
            };
            let post = ag.has_post_node.then_some(post_vector);
            let enc = self.edge.encode(tape, store, &ag, node_inputs, post)?;
            Some(self.graph_attention.prepare(tape, store, enc.output)?)
        };
        Ok(EncodedInput {
            text,
            graph,
            num_nodes: ag.nodes.len(),
            nodes: ag.nodes,
            final_states: finals,
            post_vector,
        })
    }

    /// Decoder state before the first step.
    pub fn initial_state(&self, tape: &mut Tape, input: &EncodedInput) -> Result<(Vec<Var>, DecoderState)> {
        let h = self.config.hidden_dim;
        let zero = tape.constant(Tensor::zeros(1, h))?;
        let layers: Vec<Var> = (0..self.decoder.len())
            .map(|l| input.final_states.get(l).copied().unwrap_or(zero))
            .collect();
        let state = DecoderState {
            s: *layers.last().expect("at least one decoder layer"),
            c_text: zero,
            c_graph: zero,
        };
        Ok((layers, state))
    }

    /// One decoder update from `y_prev` and the previous contexts.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &EncodedInput,
        prev_layers: &[Var],
        prev: &DecoderState,
        y_prev: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<StepOutputs> {
        let y = self.embed(tape, store, &[y_prev])?;
        let y = dropout.apply(tape, y)?;
        let mut x = tape.concat_cols(&[y, prev.c_text, prev.c_graph])?;
        let mut layer_states = Vec::with_capacity(self.decoder.len());
        for (l, (cell, &h)) in self.decoder.iter().zip(prev_layers).enumerate() {
            let s = cell.forward(tape, store, x, h)?;
            layer_states.push(s);
            x = if l + 1 < self.decoder.len() { dropout.apply(tape, s)? } else { s };
        }
        let s = x;

        let text_logits = self.text_attention.logits(tape, store, &input.text, s)?;
        let text_w = tape.softmax(text_logits)?;
        let c_text = tape.matmul(text_w, input.text.states)?;

        let (c_graph, graph_logits, copy_logits) = match &input.graph {
            Some(mem) => {
                let logits = self.graph_attention.logits(tape, store, mem, s)?;
                let w = tape.softmax(logits)?;
                let c = tape.matmul(w, mem.states)?;
                let copy = if input.num_nodes > 0 {
                    Some(tape.slice_cols(logits, 0, input.num_nodes)?)
                } else {
                    None
                };
                (c, Some(logits), copy)
            }
            None => (tape.constant(Tensor::zeros(1, self.config.hidden_dim))?, None, None),
        };
        let gate_logit = match copy_logits {
            Some(_) => Some(self.gate.forward(tape, store, s)?),
            None => None,
        };
        let vocab_logits = self.vocab_out.forward(tape, store, s)?;
        Ok(StepOutputs {
            layer_states,
            state: DecoderState { s, c_text, c_graph },
            vocab_logits,
            gate_logit,
            graph_logits,
            copy_logits,
        })
    }

    /// Teacher-forced pass over a prepared example.
    pub fn forward_steps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        example: &PreparedExample,
        dropout: &mut Dropout<'_>,
    ) -> Result<Vec<StepOutputs>> {
        let input = self.encode(tape, store, &example.post_ids, &example.subgraph, dropout)?;
        let (mut layers, mut state) = self.initial_state(tape, &input)?;
        let mut y_prev = BOS;
        let mut steps = Vec::with_capacity(example.target_ids.len());
        for &y in &example.target_ids {
            let out = self.decoder_step(tape, store, &input, &layers, &state, y_prev, dropout)?;
            layers = out.layer_states.clone();
            state = out.state;
            steps.push(out);
            y_prev = y;
        }
        Ok(steps)
    }

    /// Records the full loss of one example on `tape`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        example: &PreparedExample,
        dropout: &mut Dropout<'_>,
    ) -> Result<LossVars> {
        let steps = self.forward_steps(tape, store, example, dropout)?;
        compute_loss(tape, &steps, &example.target_ids, &example.copy_targets)
    }

    /// Teacher-forced plain step records with dropout off.
    pub fn generation_steps(&self, store: &ParamStore, example: &PreparedExample) -> Result<Vec<GenerationStep>> {
        let mut tape = Tape::new();
        let steps = self.forward_steps(&mut tape, store, example, &mut Dropout::off())?;
        steps.iter().map(|s| step_values(&tape, s, None)).collect()
    }

    /// Probability of each reference token under `p_vocab`, `p_copy` and `p_t`.
    pub fn step_probs(&self, store: &ParamStore, example: &PreparedExample) -> Result<Vec<StepProbs>> {
        let steps = self.generation_steps(store, example)?;
        Ok(steps
            .iter()
            .zip(&example.target_ids)
            .zip(&example.copy_targets)
            .map(|((step, &tok), target)| {
                let copy = target.map(|i| step.p_copy[i]);
                let mut mixture = (1.0 - step.sigma) * step.p_vocab[tok];
                if let Some(i) = target {
                    mixture += step.sigma * step.p_copy[*i];
                }
                StepProbs {
                    vocab: step.p_vocab[tok],
                    copy,
                    mixture,
                }
            })
            .collect())
    }

    /// Greedy or beam decoding over the `V + N` output slots. Ties go to the
    /// lowest slot index.
    pub fn decode(
        &self,
        store: &ParamStore,
        post: &[usize],
        subgraph: &Subgraph,
        vocab: &Vocabulary,
        graph: &KnowledgeGraph,
        options: &DecodeOptions,
    ) -> Result<Decoded> {
        let mut tape = Tape::new();
        let mut off = Dropout::off();
        let input = self.encode(&mut tape, store, post, subgraph, &mut off)?;
        let (layers, state) = self.initial_state(&mut tape, &input)?;

        struct Hyp {
            layers: Vec<Var>,
            state: DecoderState,
            last: usize,
            emissions: Vec<Emission>,
            log_prob: f64,
            done: bool,
        }
        let width = options.beam_width.max(1);
        let mut beam = vec![Hyp {
            layers,
            state,
            last: BOS,
            emissions: Vec::new(),
            log_prob: 0.0,
            done: false,
        }];
        for _ in 0..options.max_len {
            if beam.iter().all(|h| h.done) {
                break;
            }
            let mut next: Vec<Hyp> = Vec::new();
            for hyp in beam {
                if hyp.done {
                    next.push(hyp);
                    continue;
                }
                let out = self.decoder_step(&mut tape, store, &input, &hyp.layers, &hyp.state, hyp.last, &mut off)?;
                let step = step_values(&tape, &out, options.gate_override)?;
                for slot in top_slots(&step.p_t, width) {
                    let p = step.p_t[slot];
                    let (emission, word) = if slot < self.vocab_size {
                        (Emission::Vocab(slot), slot)
                    } else {
                        let node = input.nodes[slot - self.vocab_size];
                        (Emission::Copy(node), vocab.id(graph.concept(node)))
                    };
                    let done = emission == Emission::Vocab(EOS);
                    let mut emissions = hyp.emissions.clone();
                    emissions.push(emission);
                    next.push(Hyp {
                        layers: out.layer_states.clone(),
                        state: out.state,
                        last: word,
                        emissions,
                        log_prob: hyp.log_prob + p.ln(),
                        done,
                    });
                }
            }
            // Stable sort keeps expansion order among equal scores.
            next.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
            next.truncate(width);
            beam = next;
        }
        let best = beam.into_iter().next().expect("beam is never empty");
        let tokens = best
            .emissions
            .iter()
            .filter(|e| **e != Emission::Vocab(EOS))
            .map(|e| match e {
                Emission::Vocab(id) => vocab.token(*id).to_string(),
                Emission::Copy(node) => graph.concept(*node).to_string(),
            })
            .collect();
        Ok(Decoded {
            tokens,
            emissions: best.emissions,
            log_prob: best.log_prob,
        })
    }
}

/// Indices of the `k` largest entries, by descending value then ascending index.
fn top_slots(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Reads plain distributions off a recorded step.
pub fn step_values(tape: &Tape, out: &StepOutputs, gate_override: Option<f64>) -> Result<GenerationStep> {
    let p_vocab = softmax_row(tape.value(out.vocab_logits).data());
    let a_t = out
        .graph_logits
        .map(|l| softmax_row(tape.value(l).data()))
        .unwrap_or_default();
    let p_copy = out
        .copy_logits
        .map(|l| softmax_row(tape.value(l).data()))
        .unwrap_or_default();
    let sigma = match (out.gate_logit, gate_override) {
        (None, _) => 0.0,
        (Some(_), Some(s)) => s,
        (Some(g), None) => sigmoid(tape.scalar(g)?),
    };
    Ok(GenerationStep::from_distributions(sigma, p_vocab, p_copy, a_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;
    use std::path::Path;

    fn small() -> (Seq2SeqConfig, EdgeTransformerConfig) {
        let s = Seq2SeqConfig {
            hidden_dim: 6,
            embedding_dim: 5,
            max_decode_len: 6,
            ..Default::default()
        };
        let e = EdgeTransformerConfig {
            hidden_dim: 6,
            num_layers: 2,
            ..Default::default()
        };
        (s, e)
    }

    fn fixture() -> (KnowledgeGraph, Vocabulary, DialogPair) {
        let g = KnowledgeGraph::parse_triples(Cursor::new("dog\tIsA\tanimal\nanimal\tRelatedTo\tpet\n"), Path::new("m"))
            .unwrap();
        let pair = DialogPair::from_text("i like my dog", "a pet animal").unwrap();
        let vocab = build_vocab(std::slice::from_ref(&pair), 100, 1);
        (g, vocab, pair)
    }

    fn model(g: &KnowledgeGraph, vocab: &Vocabulary, seed: u64) -> (ParamStore, GraphSeq2Seq) {
        let (s, e) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = GraphSeq2Seq::new(&mut store, &s, &e, vocab.len(), g.num_nodes(), g.num_relations(), &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn empty_post_rejected() {
        let (g, v, _) = fixture();
        let (store, m) = model(&g, &v, 0);
        assert!(m.encode_post(&mut Tape::new(), &store, &[], &mut Dropout::off()).is_err());
    }

    #[test]
    fn single_token_post_vector_is_top_state() {
        let (g, v, _) = fixture();
        let (store, m) = model(&g, &v, 0);
        let mut tape = Tape::new();
        let (states, finals) = m.encode_post(&mut tape, &store, &[5], &mut Dropout::off()).unwrap();
        assert_eq!(tape.value(states), tape.value(finals[1]));
    }

    #[test]
    fn post_order_matters() {
        let (g, v, _) = fixture();
        let (store, m) = model(&g, &v, 0);
        let mut tape = Tape::new();
        let (_, a) = m.encode_post(&mut tape, &store, &[4, 5, 6], &mut Dropout::off()).unwrap();
        let (_, b) = m.encode_post(&mut tape, &store, &[6, 5, 4], &mut Dropout::off()).unwrap();
        assert_ne!(tape.value(a[1]), tape.value(b[1]));
    }

    #[test]
    fn copy_labels_mark_subgraph_concepts() {
        let (g, v, pair) = fixture();
        let ex = PreparedExample::new(&pair, &v, &g, &RetrievalConfig::default());
        // Subgraph is dog, animal, pet; response "a pet animal <eos>".
        assert_eq!(ex.copy_targets, vec![None, Some(2), Some(1), None]);
        assert_eq!(*ex.target_ids.last().unwrap(), EOS);
    }

    #[test]
    fn mixture_endpoints() {
        let pv = vec![0.2, 0.8];
        let pc = vec![0.5, 0.25, 0.25];
        assert_eq!(mixture(0.0, &pv, &pc)[..2], pv[..]);
        let m1 = mixture(1.0, &pv, &pc);
        assert_eq!(&m1[..2], &[0.0, 0.0]);
        assert_eq!(&m1[2..], &pc[..]);
    }

    #[test]
    fn steps_are_normalized() {
        let (g, v, pair) = fixture();
        let (store, m) = model(&g, &v, 3);
        let ex = PreparedExample::new(&pair, &v, &g, &RetrievalConfig::default());
        for step in m.generation_steps(&store, &ex).unwrap() {
            for dist in [&step.p_vocab, &step.p_copy, &step.a_t, &step.p_t] {
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_subgraph_forces_gate_to_zero() {
        let (g, v, _) = fixture();
        let (store, m) = model(&g, &v, 1);
        let pair = DialogPair::from_text("hello there", "hi").unwrap();
        let ex = PreparedExample::new(&pair, &v, &g, &RetrievalConfig::default());
        assert!(ex.subgraph.is_empty());
        for step in m.generation_steps(&store, &ex).unwrap() {
            assert_eq!(step.sigma, 0.0);
            assert!(step.p_copy.is_empty());
            assert_eq!(step.p_t, step.p_vocab);
        }
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let (g, v, pair) = fixture();
        let (store, m) = model(&g, &v, 2);
        let ex = PreparedExample::new(&pair, &v, &g, &RetrievalConfig::default());
        let mut tape = Tape::new();
        let lv = m.loss(&mut tape, &store, &ex, &mut Dropout::off()).unwrap();
        let steps = m.generation_steps(&store, &ex).unwrap();
        let plain = LossBreakdown::from_steps(&steps, &ex.target_ids, &ex.copy_targets).unwrap();
        for (a, b) in [
            (lv.breakdown.l_gen, plain.l_gen),
            (lv.breakdown.l_copy, plain.l_copy),
            (lv.breakdown.l_gate, plain.l_gate),
            (tape.scalar(lv.total).unwrap(), plain.total),
        ] {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn loss_length_mismatch() {
        assert!(LossBreakdown::from_steps(&[], &[1], &[None]).is_err());
    }

    #[test]
    fn decode_is_deterministic_and_gate_one_copies() {
        let (g, v, pair) = fixture();
        let (store, m) = model(&g, &v, 7);
        let ex = PreparedExample::new(&pair, &v, &g, &RetrievalConfig::default());
        let opts = DecodeOptions {
            max_len: 5,
            beam_width: 1,
            gate_override: None,
        };
        let a = m.decode(&store, &ex.post_ids, &ex.subgraph, &v, &g, &opts).unwrap();
        let b = m.decode(&store, &ex.post_ids, &ex.subgraph, &v, &g, &opts).unwrap();
        assert_eq!(a, b);
        let forced = DecodeOptions {
            gate_override: Some(1.0),
            ..opts
        };
        let c = m.decode(&store, &ex.post_ids, &ex.subgraph, &v, &g, &forced).unwrap();
        assert_eq!(c.tokens.len(), 5);
        assert!(c.emissions.iter().all(|e| matches!(e, Emission::Copy(_))));
        let concepts = ["dog", "animal", "pet"];
        assert!(c.tokens.iter().all(|t| concepts.contains(&t.as_str())));
    }

    #[test]
    fn top_slots_tie_break() {
        assert_eq!(top_slots(&[0.25, 0.5, 0.25], 3), vec![1, 0, 2]);
    }
}
