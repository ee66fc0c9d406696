//! Toy multimodal language model.
//!
//! Frozen random featurizers per modality feed a trainable two-layer
//! projection into the embedding space of a small pre-norm decoder-only
//! transformer. The transformer body is frozen after pretraining; low-rank
//! adapters on the attention projections carry all task learning.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{softmax, Graph, Mat, Var};
use crate::config::ModelDims;
use crate::error::{Error, Result};
use crate::syndata::{Payload, AUDIO_EVENTS, GRID, MAX_OBJECTS, VIDEO_FRAMES};
use crate::types::Modality;
use crate::vocab::{placeholder_id, TokenId, BOS_ID, EOS_ID, SEP_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Encoder(Modality),
    Projection(Modality),
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    /// (A, B) pairs for q, k, v, o.
    lora: [(usize, usize); 4],
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: [Option<usize>; 3],
    proj: [Option<[usize; 4]>; 3],
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    final_norm: usize,
    lm_head: usize,
}

fn midx(m: Modality) -> usize {
    match m {
        Modality::Image => 0,
        Modality::Audio => 1,
        Modality::Video => 2,
    }
}

/// Number of encoder slots (rows of modality embeddings) per modality.
pub fn slot_count(m: Modality) -> usize {
    match m {
        Modality::Image => MAX_OBJECTS,
        Modality::Audio => AUDIO_EVENTS,
        Modality::Video => VIDEO_FRAMES * MAX_OBJECTS,
    }
}

const OBJ_FEATS: usize = 4 + 4 + GRID as usize * 2 + 1;
const AUD_FEATS: usize = 4 + 2 + AUDIO_EVENTS;

/// Width of the one-hot slot description fed to a modality's encoder.
pub fn raw_feature_dim(m: Modality) -> usize {
    match m {
        Modality::Image | Modality::Video => OBJ_FEATS,
        Modality::Audio => AUD_FEATS,
    }
}

fn object_rows(objects: &[crate::syndata::Object], out: &mut Mat, start: usize) {
    for slot in 0..MAX_OBJECTS {
        let mut row = out.row_mut(start + slot);
        match objects.get(slot) {
            Some(o) => {
                row[o.color.index()] = 1.0;
                row[4 + o.shape.index()] = 1.0;
                row[8 + o.row as usize] = 1.0;
                row[8 + GRID as usize + o.col as usize] = 1.0;
            }
            None => row[OBJ_FEATS - 1] = 1.0,
        }
    }
}

/// One-hot slot description of a payload; one row per object, event or
/// frame cell.
pub fn raw_features(payload: &Payload) -> Mat {
    let m = payload.modality();
    let mut out = Mat::zeros((slot_count(m), raw_feature_dim(m)));
    match payload {
        Payload::Image(s) => object_rows(&s.objects, &mut out, 0),
        Payload::Video(v) => {
            for (f, frame) in v.frames.iter().enumerate() {
                object_rows(&frame.objects, &mut out, f * MAX_OBJECTS);
            }
        }
        Payload::Audio(a) => {
            for (i, e) in a.events.iter().enumerate() {
                let mut row = out.row_mut(i);
                row[e.event.index()] = 1.0;
                row[4 + e.loudness.index()] = 1.0;
                row[6 + i] = 1.0;
            }
        }
    }
    out
}

/// One training or scoring sequence. With a payload the layout is
/// `[BOS, <m>, slots.., prompt.., SEP, target..]`; text-only sequences drop
/// the modality part, and drop SEP as well when the prompt is empty.
/// Predictions start at the last prefix row and end with EOS.
#[derive(Debug, Clone)]
pub struct SeqInput<'a> {
    pub payload: Option<&'a Payload>,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SeqInput<'_> {
    fn prefix_len(&self) -> usize {
        let modal = self.payload.map(|p| 1 + slot_count(p.modality())).unwrap_or(0);
        let sep = usize::from(self.payload.is_some() || !self.prompt.is_empty());
        1 + modal + self.prompt.len() + sep
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Targets of the prediction rows: the target tokens then EOS.
    pub fn labels(&self) -> Vec<TokenId> {
        let mut t = self.target.clone();
        t.push(EOS_ID);
        t
    }
}

/// Output of a batched forward pass.
pub struct Forward {
    pub logits: Var,
    /// Rows of `logits` belonging to each sample.
    pub rows: Vec<Range<usize>>,
    pub labels: Vec<TokenId>,
}

/// Per-position next-token probabilities for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    pub probs: Mat,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    pub vocab_size: usize,
    pub params: Vec<ParamTensor>,
    layout: Layout,
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<ParamTensor>,
}

impl Init {
    fn add(&mut self, name: String, kind: ParamKind, rows: usize, cols: usize, std: f64) -> usize {
        let value = if std == 0.0 {
            Mat::zeros((rows, cols))
        } else {
            let rng = &mut self.rng;
            Mat::from_shape_simple_fn((rows, cols), || {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
        };
        self.params.push(ParamTensor {
            name,
            kind,
            value: Arc::new(value),
        });
        self.params.len() - 1
    }

    fn ones(&mut self, name: String, kind: ParamKind, cols: usize) -> usize {
        self.params.push(ParamTensor {
            name,
            kind,
            value: Arc::new(Mat::ones((1, cols))),
        });
        self.params.len() - 1
    }
}

impl ModelState {
    /// Fresh model with encoders and projections for every modality.
    pub fn new(dims: ModelDims, vocab_size: usize, seed: u64) -> Result<Self> {
        Self::with_modalities(dims, vocab_size, seed, &Modality::ALL)
    }

    pub fn with_modalities(
        dims: ModelDims,
        vocab_size: usize,
        seed: u64,
        modalities: &[Modality],
    ) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let f = dims.feat_dim;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let depth = inv(2 * dims.n_layers);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        };
        let mut enc = [None; 3];
        let mut proj = [None; 3];
        for m in Modality::ALL {
            if modalities.contains(&m) {
                let code = m.code().to_ascii_lowercase();
                enc[midx(m)] = Some(init.add(
                    format!("enc.{code}"),
                    ParamKind::Encoder(m),
                    raw_feature_dim(m),
                    f,
                    0.5,
                ));
            }
        }
        for m in Modality::ALL {
            if modalities.contains(&m) {
                let code = m.code().to_ascii_lowercase();
                let k = ParamKind::Projection(m);
                proj[midx(m)] = Some([
                    init.add(format!("proj.{code}.w1"), k, f, d, inv(f)),
                    init.add(format!("proj.{code}.b1"), k, 1, d, 0.0),
                    init.add(format!("proj.{code}.w2"), k, d, d, inv(d)),
                    init.add(format!("proj.{code}.b2"), k, 1, d, 0.0),
                ]);
            }
        }
        let b = ParamKind::Base;
        let tok_emb = init.add("tok_emb".into(), b, vocab_size, d, 1.0);
        let pos_emb = init.add("pos_emb".into(), b, dims.context, d, 0.5);
        let mut layers = Vec::with_capacity(dims.n_layers);
        for l in 0..dims.n_layers {
            let attn_norm = init.ones(format!("layer{l}.attn_norm"), b, d);
            let wq = init.add(format!("layer{l}.wq"), b, d, d, inv(d));
            let wk = init.add(format!("layer{l}.wk"), b, d, d, inv(d));
            let wv = init.add(format!("layer{l}.wv"), b, d, d, inv(d));
            let wo = init.add(format!("layer{l}.wo"), b, d, d, inv(d) * depth);
            let ffn_norm = init.ones(format!("layer{l}.ffn_norm"), b, d);
            let w1 = init.add(format!("layer{l}.ff.w1"), b, d, dims.d_ff, inv(d));
            let b1 = init.add(format!("layer{l}.ff.b1"), b, 1, dims.d_ff, 0.0);
            let w2 = init.add(format!("layer{l}.ff.w2"), b, dims.d_ff, d, inv(dims.d_ff) * depth);
            let b2 = init.add(format!("layer{l}.ff.b2"), b, 1, d, 0.0);
            let mut lora = [(0, 0); 4];
            for (slot, name) in ["q", "k", "v", "o"].iter().enumerate() {
                let a = init.add(format!("layer{l}.lora_{name}.a"), ParamKind::Adapter, d, dims.rank, inv(d));
                let bb = init.add(format!("layer{l}.lora_{name}.b"), ParamKind::Adapter, dims.rank, d, 0.0);
                lora[slot] = (a, bb);
            }
            layers.push(LayerIds {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w1,
                b1,
                w2,
                b2,
                lora,
            });
        }
        let final_norm = init.ones("final_norm".into(), b, d);
        let lm_head = init.add("lm_head".into(), b, d, vocab_size, inv(d));
        Ok(Self {
            dims,
            vocab_size,
            params: init.params,
            layout: Layout {
                enc,
                proj,
                tok_emb,
                pos_emb,
                layers,
                final_norm,
                lm_head,
            },
        })
    }

    /// Rebuild a model from named tensors, checking names, kinds and shapes
    /// against a fresh layout for `dims`.
    pub fn from_tensors(
        dims: ModelDims,
        vocab_size: usize,
        modalities: &[Modality],
        tensors: Vec<(String, Mat)>,
    ) -> Result<Self> {
        let mut model = Self::with_modalities(dims, vocab_size, 0, modalities)?;
        if tensors.len() != model.params.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(tensors) {
            if p.name != name {
                return Err(Error::InvalidCheckpoint(format!(
                    "expected tensor '{}', found '{name}'",
                    p.name
                )));
            }
            if p.value.dim() != value.dim() {
                return Err(Error::InvalidCheckpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    value.dim(),
                    p.value.dim()
                )));
            }
            p.value = Arc::new(value);
        }
        Ok(model)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.layout.enc[midx(*m)].is_some())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: usize) -> &Arc<Mat> {
        &self.params[id].value
    }

    /// Mutable access; copies the tensor first if a snapshot shares it.
    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        Arc::make_mut(&mut self.params[id].value)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn ids_where(&self, pred: impl Fn(ParamKind) -> bool) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| pred(self.params[i].kind))
            .collect()
    }

    /// `θ`: the adapter tensors.
    pub fn adapter_ids(&self) -> Vec<usize> {
        self.ids_where(|k| k == ParamKind::Adapter)
    }

    pub fn base_ids(&self) -> Vec<usize> {
        self.ids_where(|k| k == ParamKind::Base)
    }

    /// Tensors updated while training a task of modality `m`.
    pub fn task_trainable_ids(&self, m: Modality) -> Vec<usize> {
        self.ids_where(|k| k == ParamKind::Adapter || k == ParamKind::Projection(m))
    }

    pub fn mask(&self, ids: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for &i in ids {
            mask[i] = true;
        }
        mask
    }

    pub fn param_count(&self, ids: &[usize]) -> usize {
        ids.iter().map(|&i| self.params[i].value.len()).sum()
    }

    /// Immutable value copy sharing storage until either side is written.
    pub fn snapshot(&self) -> ModelState {
        self.clone()
    }

    /// SHA-256 over names, shapes and little-endian values of the given tensors.
    pub fn hash_of(&self, ids: &[usize]) -> String {
        let mut h = Sha256::new();
        for &i in ids {
            let p = &self.params[i];
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn content_hash(&self) -> String {
        self.hash_of(&(0..self.params.len()).collect::<Vec<_>>())
    }

    /// Frozen encoder output: `tanh(onehot · E)`, one row per slot.
    pub fn encode(&self, payload: &Payload) -> Result<Mat> {
        let m = payload.modality();
        let id = self.layout.enc[midx(m)]
            .ok_or_else(|| Error::UnregisteredModality(m.code().to_string()))?;
        Ok(raw_features(payload).dot(&**self.value(id)).mapv(f64::tanh))
    }

    /// Projected modality embeddings (`slots × d`), evaluated without a graph.
    pub fn encode_and_project(&self, payload: &Payload) -> Result<Mat> {
        let mut g = Graph::new();
        let mut b = Binder::new(self, &[]);
        let f = g.constant_owned(self.encode(payload)?);
        let out = b.project(&mut g, payload.modality(), f)?;
        Ok(g.value(out).clone())
    }

    /// Teacher-forced forward over a batch. Tensors whose `trainable` flag
    /// is set become gradient leaves; the rest are constants.
    pub fn forward(&self, g: &mut Graph, inputs: &[SeqInput], trainable: &[bool]) -> Result<Forward> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rows = Vec::with_capacity(inputs.len());
        let mut pred_rows = Vec::new();
        let mut labels = Vec::new();
        let mut start = 0;
        for s in inputs {
            let n = s.len();
            let p = s.prefix_len();
            pred_rows.extend((start + p - 1)..(start + n));
            let before = labels.len();
            labels.extend(s.labels());
            rows.push(before..labels.len());
            start += n;
        }
        let mut b = Binder::new(self, trainable);
        let h = b.body(g, inputs)?;
        let sel = g.select_rows(h, &pred_rows);
        let logits = b.head(g, sel);
        Ok(Forward {
            logits,
            rows,
            labels,
        })
    }

    /// Logit values for a batch, no gradients.
    pub fn logits(&self, inputs: &[SeqInput]) -> Result<(Mat, Vec<Range<usize>>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, inputs, &[])?;
        Ok((g.value(out.logits).clone(), out.rows))
    }

    /// Teacher-forced next-token distributions, one per input.
    pub fn distributions(&self, inputs: &[SeqInput]) -> Result<Vec<SequenceDistribution>> {
        let (logits, rows) = self.logits(inputs)?;
        let probs = softmax(&logits);
        Ok(rows
            .into_iter()
            .map(|r| SequenceDistribution {
                probs: probs.slice(ndarray::s![r.clone(), ..]).to_owned(),
                mask: vec![true; r.len()],
            })
            .collect())
    }

    /// Greedy decoding for a batch of `(payload, prompt)` pairs. Stops at
    /// EOS, at `max_len` tokens, or when the context is full.
    pub fn generate_batch(
        &self,
        items: &[(Option<&Payload>, Vec<TokenId>)],
        max_len: usize,
    ) -> Result<Vec<Vec<TokenId>>> {
        let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); items.len()];
        let mut active: Vec<usize> = (0..items.len()).collect();
        for (p, prompt) in items {
            let probe = SeqInput {
                payload: *p,
                prompt: prompt.clone(),
                target: Vec::new(),
            };
            if probe.len() > self.dims.context {
                return Err(Error::ContextOverflow {
                    len: probe.len(),
                    context: self.dims.context,
                });
            }
        }
        for _ in 0..max_len {
            active.retain(|&i| {
                let s = SeqInput {
                    payload: items[i].0,
                    prompt: items[i].1.clone(),
                    target: out[i].clone(),
                };
                s.len() < self.dims.context
            });
            if active.is_empty() {
                break;
            }
            let inputs: Vec<SeqInput> = active
                .iter()
                .map(|&i| SeqInput {
                    payload: items[i].0,
                    prompt: items[i].1.clone(),
                    target: out[i].clone(),
                })
                .collect();
            let mut g = Graph::new();
            let mut b = Binder::new(self, &[]);
            let h = b.body(&mut g, &inputs)?;
            let mut last = Vec::with_capacity(inputs.len());
            let mut end = 0;
            for s in &inputs {
                end += s.len();
                last.push(end - 1);
            }
            let sel = g.select_rows(h, &last);
            let logits = b.head(&mut g, sel);
            let z = g.value(logits);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let row = z.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best != EOS_ID {
                    out[i].push(best);
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(out)
    }

    pub fn generate_greedy(
        &self,
        payload: Option<&Payload>,
        prompt: &[TokenId],
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        Ok(self
            .generate_batch(&[(payload, prompt.to_vec())], max_len)?
            .pop()
            .unwrap())
    }
}

/// Maps tensors into a graph, as leaves or constants, once per pass.
struct Binder<'a> {
    model: &'a ModelState,
    trainable: &'a [bool],
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    fn new(model: &'a ModelState, trainable: &'a [bool]) -> Self {
        Self {
            model,
            trainable,
            vars: vec![None; model.params.len()],
        }
    }

    fn var(&mut self, g: &mut Graph, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let value = self.model.params[id].value.clone();
        let v = if self.trainable.get(id).copied().unwrap_or(false) {
            g.param(id, value)
        } else {
            g.constant(value)
        };
        self.vars[id] = Some(v);
        v
    }

    fn project(&mut self, g: &mut Graph, m: Modality, feats: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.model.layout.proj[midx(m)]
            .ok_or_else(|| Error::UnregisteredModality(m.code().to_string()))?;
        let (w1, b1, w2, b2) = (self.var(g, w1), self.var(g, b1), self.var(g, w2), self.var(g, b2));
        let h = g.matmul(feats, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        Ok(g.add_row(h, b2))
    }

    fn linear(&mut self, g: &mut Graph, x: Var, w: usize, lora: (usize, usize)) -> Var {
        let w = self.var(g, w);
        let (a, b) = (self.var(g, lora.0), self.var(g, lora.1));
        let base = g.matmul(x, w);
        let xa = g.matmul(x, a);
        let delta = g.matmul(xa, b);
        g.add(base, delta)
    }

    /// Final hidden states for every row of the concatenated batch.
    fn body(&mut self, g: &mut Graph, inputs: &[SeqInput]) -> Result<Var> {
        let model = self.model;
        let ctx = model.dims.context;
        // sources: 0 = token table, 1.. = projected slots per modality
        let mut feats: [Vec<Mat>; 3] = Default::default();
        let mut slot_base: Vec<usize> = Vec::with_capacity(inputs.len());
        for s in inputs {
            if s.len() > ctx {
                return Err(Error::ContextOverflow { len: s.len(), context: ctx });
            }
            match s.payload {
                Some(p) => {
                    let k = midx(p.modality());
                    slot_base.push(feats[k].iter().map(|f| f.nrows()).sum());
                    feats[k].push(model.encode(p)?);
                }
                None => slot_base.push(0),
            }
        }
        let tok = self.var(g, model.layout.tok_emb);
        let mut sources = vec![tok];
        let mut source_of = [0usize; 3];
        for m in Modality::ALL {
            let k = midx(m);
            if feats[k].is_empty() {
                continue;
            }
            let views: Vec<_> = feats[k].iter().map(|f| f.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let f = g.constant_owned(stacked);
            let p = self.project(g, m, f)?;
            source_of[k] = sources.len();
            sources.push(p);
        }
        let mut map = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for (s, &base) in inputs.iter().zip(&slot_base) {
            let start = map.len();
            map.push((0, BOS_ID));
            if let Some(p) = s.payload {
                let m = p.modality();
                map.push((0, placeholder_id(m)));
                for j in 0..slot_count(m) {
                    map.push((source_of[midx(m)], base + j));
                }
            }
            map.extend(s.prompt.iter().map(|&t| (0, t)));
            if s.payload.is_some() || !s.prompt.is_empty() {
                map.push((0, SEP_ID));
            }
            map.extend(s.target.iter().map(|&t| (0, t)));
            let len = map.len() - start;
            positions.extend(0..len);
            segments.push((start, len));
        }
        for &(src, row) in &map {
            if src == 0 && row >= model.vocab_size {
                return Err(Error::UnknownTokenId(row));
            }
        }
        let x = g.assemble(&sources, map);
        let pos = self.var(g, model.layout.pos_emb);
        let p = g.select_rows(pos, &positions);
        let mut x = g.add(x, p);
        for l in 0..model.layout.layers.len() {
            let ids = model.layout.layers[l].clone();
            let norm = self.var(g, ids.attn_norm);
            let h = g.rms_norm(x, norm);
            let q = self.linear(g, h, ids.wq, ids.lora[0]);
            let k = self.linear(g, h, ids.wk, ids.lora[1]);
            let v = self.linear(g, h, ids.wv, ids.lora[2]);
            let a = g.attention(q, k, v, segments.clone(), model.dims.n_heads);
            let o = self.linear(g, a, ids.wo, ids.lora[3]);
            x = g.add(x, o);
            let norm = self.var(g, ids.ffn_norm);
            let h = g.rms_norm(x, norm);
            let (w1, b1, w2, b2) = (
                self.var(g, ids.w1),
                self.var(g, ids.b1),
                self.var(g, ids.w2),
                self.var(g, ids.b2),
            );
            let f = g.matmul(h, w1);
            let f = g.add_row(f, b1);
            let f = g.gelu(f);
            let f = g.matmul(f, w2);
            let f = g.add_row(f, b2);
            x = g.add(x, f);
        }
        Ok(x)
    }

    fn head(&mut self, g: &mut Graph, h: Var) -> Var {
        let norm = self.var(g, self.model.layout.final_norm);
        let h = g.rms_norm(h, norm);
        let w = self.var(g, self.model.layout.lm_head);
        g.matmul(h, w)
    }
}
