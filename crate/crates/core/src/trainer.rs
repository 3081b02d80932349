//! Adam training loop, binary checkpoints and perplexity evaluation.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edgeformer::EdgeTransformerConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{perplexity, StepProbs};
use crate::fsutil::{open_reader, write_atomic};
use crate::genmodel::{Dropout, GraphSeq2Seq, LossBreakdown, PreparedExample, Seq2SeqConfig};
use crate::numcore::{Gradients, NumError, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub dropout: f64,
    pub epochs: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 30,
            grad_clip_norm: 5.0,
            dropout: 0.2,
            epochs: 10,
            max_steps: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::InvalidInput("grad_clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidInput("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, config: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - config.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= config.lr * mhat / (vhat.sqrt() + config.eps);
            }
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub ppl: f64,
}

pub fn write_loss_csv<W: Write + ?Sized>(log: &[EpochLog], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "epoch,L_gen,L_copy,L_gate,L,ppl")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.loss.l_gen, e.loss.l_copy, e.loss.l_gate, e.loss.total, e.ppl
        )?;
    }
    Ok(())
}

/// SHA-256 over everything that fixes the parameter layout and the update rule.
/// Epoch count and step limit are excluded so a run can be extended on resume.
pub fn config_hash(
    seq: &Seq2SeqConfig,
    edge: &EdgeTransformerConfig,
    train: &TrainConfig,
    vocab_size: usize,
    num_nodes: usize,
    num_relations: usize,
) -> [u8; 32] {
    let train = TrainConfig {
        epochs: 0,
        max_steps: None,
        ..train.clone()
    };
    let canonical = serde_json::json!({
        "seq2seq": seq,
        "edge": edge,
        "train": train,
        "vocab_size": vocab_size,
        "num_nodes": num_nodes,
        "num_relations": num_relations,
    });
    Sha256::digest(canonical.to_string().as_bytes()).into()
}

/// Serialized ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub value: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub epochs_done: u64,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
    pub log: Vec<EpochLog>,
}

const MAGIC: &[u8; 4] = b"EFCK";
const VERSION: u32 = 1;

impl Checkpoint {
    /// Layout, all little-endian: magic, version, config hash, step, epochs,
    /// rng (seed, stream, word position), parameter records (name, shape,
    /// values, Adam moments), loss log, then a SHA-256 of all preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.epochs_done.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            b.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            b.extend_from_slice(p.name.as_bytes());
            b.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for t in [&p.value, &p.adam_m, &p.adam_v] {
                for x in t.data() {
                    b.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        b.extend_from_slice(&(self.log.len() as u32).to_le_bytes());
        for e in &self.log {
            b.extend_from_slice(&e.epoch.to_le_bytes());
            for x in [e.loss.l_gen, e.loss.l_copy, e.loss.l_gate, e.loss.total, e.ppl] {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing EFCK header".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len().saturating_sub(32));
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
        }
        let mut r = Cursor { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = r.array::<32>()?;
        let step = r.u64()?;
        let epochs_done = r.u64()?;
        let rng = RngState {
            seed: r.array::<32>()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array::<16>()?),
        };
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut tensor = || -> Result<Tensor> {
                let count = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::Checkpoint("parameter shape overflows".into()))?;
                let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Tensor::from_vec(rows, cols, data)?)
            };
            let value = tensor()?;
            let adam_m = tensor()?;
            let adam_v = tensor()?;
            params.push(ParamRecord {
                name,
                value,
                adam_m,
                adam_v,
            });
        }
        let n = r.u32()? as usize;
        let mut log = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let epoch = r.u64()?;
            let (g, c, gt, total, ppl) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            log.push(EpochLog {
                epoch,
                loss: LossBreakdown {
                    l_gen: g,
                    l_copy: c,
                    l_gate: gt,
                    total,
                },
                ppl,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            step,
            epochs_done,
            rng,
            params,
            log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        open_reader(path)?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn check_hash(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_hash != expected {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        Ok(())
    }

    /// Copies parameter values into `store`, which must have the same layout.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, rec) in ids.into_iter().zip(&self.params) {
            if store.name(id) != rec.name || store.get(id).shape() != rec.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    rec.name,
                    rec.value.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = rec.value.clone();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

/// Mixture perplexity over teacher-forced reference tokens, dropout off.
pub fn evaluate_ppl(model: &GraphSeq2Seq, store: &ParamStore, examples: &[PreparedExample]) -> Result<f64> {
    perplexity(&collect_step_probs(model, store, examples)?)
}

pub fn collect_step_probs(
    model: &GraphSeq2Seq,
    store: &ParamStore,
    examples: &[PreparedExample],
) -> Result<Vec<StepProbs>> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let mut out = Vec::new();
    for ex in examples {
        out.extend(model.step_probs(store, ex)?);
    }
    Ok(out)
}

/// Mutable training state: model parameters, optimizer, rng and loss log.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: GraphSeq2Seq,
    pub store: ParamStore,
    pub config: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epochs_done: u64,
    pub log: Vec<EpochLog>,
    pub config_hash: [u8; 32],
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl Trainer {
    /// Builds a fresh model; parameter init draws from the training rng.
    pub fn new(
        seq: &Seq2SeqConfig,
        edge: &EdgeTransformerConfig,
        config: &TrainConfig,
        vocab_size: usize,
        num_nodes: usize,
        num_relations: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = GraphSeq2Seq::new(&mut store, seq, edge, vocab_size, num_nodes, num_relations, &mut rng)?;
        let adam = Adam::new(&store);
        Ok(Self {
            model,
            store,
            config: config.clone(),
            adam,
            rng,
            step: 0,
            epochs_done: 0,
            log: Vec::new(),
            config_hash: config_hash(seq, edge, config, vocab_size, num_nodes, num_relations),
        })
    }

    /// Rebuilds the trainer state stored in `ckpt`.
    pub fn resume(
        seq: &Seq2SeqConfig,
        edge: &EdgeTransformerConfig,
        config: &TrainConfig,
        vocab_size: usize,
        num_nodes: usize,
        num_relations: usize,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(seq, edge, config, vocab_size, num_nodes, num_relations)?;
        ckpt.check_hash(&t.config_hash)?;
        ckpt.restore_params(&mut t.store)?;
        for (i, rec) in ckpt.params.iter().enumerate() {
            t.adam.m[i] = rec.adam_m.clone();
            t.adam.v[i] = rec.adam_v.clone();
        }
        t.adam.t = ckpt.step;
        t.rng = ckpt.rng.restore();
        t.step = ckpt.step;
        t.epochs_done = ckpt.epochs_done;
        t.log = ckpt.log.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash,
            step: self.step,
            epochs_done: self.epochs_done,
            rng: RngState::capture(&self.rng),
            params: self
                .store
                .iter()
                .map(|(id, p)| ParamRecord {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    adam_m: self.adam.m[id.index()].clone(),
                    adam_v: self.adam.v[id.index()].clone(),
                })
                .collect(),
            log: self.log.clone(),
        }
    }

    /// Mean loss and gradient over `batch`, accumulated in batch order.
    pub fn batch_gradients(&mut self, batch: &[&PreparedExample]) -> Result<(LossBreakdown, Gradients)> {
        let mut grads = self.store.zero_grads();
        let mut sum = LossBreakdown::default();
        for ex in batch {
            let mut tape = Tape::new();
            let mut dropout = Dropout::train(self.config.dropout, &mut self.rng);
            let lv = self.model.loss(&mut tape, &self.store, ex, &mut dropout)?;
            grads.accumulate(&tape.backward(lv.total, &self.store)?)?;
            sum.l_gen += lv.breakdown.l_gen;
            sum.l_copy += lv.breakdown.l_copy;
            sum.l_gate += lv.breakdown.l_gate;
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((LossBreakdown::new(sum.l_gen / n, sum.l_copy / n, sum.l_gate / n), grads))
    }

    /// One clipped Adam update.
    pub fn train_step(&mut self, batch: &[&PreparedExample]) -> Result<StepReport> {
        let step = self.step;
        let non_finite = |e: Error| match e {
            Error::Num(NumError::NonFinite { .. }) => Error::NonFiniteLoss { step },
            other => other,
        };
        let (loss, mut grads) = self.batch_gradients(batch).map_err(non_finite)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grad_norm = grads.clip_global_norm(self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let clipped_norm = grads.global_norm();
        self.adam.step(&mut self.store, &grads, &self.config);
        self.step += 1;
        Ok(StepReport {
            loss,
            grad_norm,
            clipped_norm,
        })
    }

    pub fn step_limit_reached(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Runs one epoch over a seeded shuffle of `examples` and appends its log
    /// row. Returns `false` when the step limit stopped the epoch early.
    pub fn train_epoch(&mut self, examples: &[PreparedExample]) -> Result<bool> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        let mut complete = true;
        for chunk in order.chunks(self.config.batch_size) {
            if self.step_limit_reached() {
                complete = false;
                break;
            }
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let report = self.train_step(&batch)?;
            let k = batch.len() as f64;
            sum.l_gen += report.loss.l_gen * k;
            sum.l_copy += report.loss.l_copy * k;
            sum.l_gate += report.loss.l_gate * k;
            seen += batch.len();
            log::debug!("step {} loss {:.6} grad norm {:.4}", self.step, report.loss.total, report.grad_norm);
        }
        if seen == 0 {
            return Ok(false);
        }
        let n = seen as f64;
        let loss = LossBreakdown::new(sum.l_gen / n, sum.l_copy / n, sum.l_gate / n);
        let ppl = evaluate_ppl(&self.model, &self.store, examples)?;
        self.epochs_done += 1;
        let row = EpochLog {
            epoch: self.epochs_done,
            loss,
            ppl,
        };
        log::info!(
            "epoch {} step {} L {:.6} (gen {:.6} copy {:.6} gate {:.6}) ppl {:.4}",
            row.epoch,
            self.step,
            loss.total,
            loss.l_gen,
            loss.l_copy,
            loss.l_gate,
            ppl
        );
        self.log.push(row);
        Ok(complete)
    }

    /// Trains until `config.epochs` epochs are done or the step limit is hit.
    pub fn train(&mut self, examples: &[PreparedExample]) -> Result<()> {
        while self.epochs_done < self.config.epochs && !self.step_limit_reached() {
            if !self.train_epoch(examples)? {
                break;
            }
        }
        Ok(())
    }
}
