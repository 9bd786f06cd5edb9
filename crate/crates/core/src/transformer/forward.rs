use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lsq::{self, Linearization};
use crate::tensor::Tensor;

use super::state::{
    layer_param, quant_sites, ModelState, Site, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT,
    NUM_SEGMENTS, POSITION_EMBEDDING, SEGMENT_EMBEDDING, WORD_EMBEDDING,
};

/// Fixed-length batch of token sequences, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub labels: Vec<usize>,
    pub size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        let n = self.size * self.seq_len;
        if self.size == 0 || self.tokens.len() != n || self.segments.len() != n {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: vec![self.size, self.seq_len],
                rhs: vec![self.tokens.len(), self.segments.len()],
            });
        }
        if !self.labels.is_empty() && self.labels.len() != self.size {
            return Err(Error::ShapeMismatch {
                op: "batch labels",
                lhs: vec![self.size],
                rhs: vec![self.labels.len()],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Full precision, no dropout.
    Teacher,
    /// Fake-quantized according to the config's bit-widths.
    Student,
}

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Register weights and scale-factors as differentiable leaves.
    pub trainable: bool,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Collects the input of every activation site, quantized or not.
    pub capture: Option<&'a mut BTreeMap<String, Tensor>>,
    pub linearization: Option<&'a mut Linearization>,
}

impl<'a> ForwardOptions<'a> {
    pub fn teacher() -> Self {
        Self {
            mode: Mode::Teacher,
            trainable: false,
            dropout: 0.0,
            rng: None,
            capture: None,
            linearization: None,
        }
    }

    /// Student forward without dropout.
    pub fn student() -> Self {
        Self {
            mode: Mode::Student,
            ..Self::teacher()
        }
    }

    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn with_dropout(mut self, rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        self.dropout = rate;
        self.rng = Some(rng);
        self
    }

    pub fn with_capture(mut self, capture: &'a mut BTreeMap<String, Tensor>) -> Self {
        self.capture = Some(capture);
        self
    }

    pub fn with_linearization(mut self, lin: &'a mut Linearization) -> Self {
        self.linearization = Some(lin);
        self
    }
}

/// Graph handles of everything distillation needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Embedding output followed by each layer's output (`L + 1` entries).
    pub hidden: Vec<Var>,
    /// Pre-softmax attention scores per layer, `[batch, heads, n, n]`.
    pub scores: Vec<Var>,
    pub logits: Var,
}

/// Materialized trace, e.g. a teacher's outputs carried into a student graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceValues {
    pub hidden: Vec<Tensor>,
    pub scores: Vec<Tensor>,
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn values(&self, g: &Graph) -> TraceValues {
        TraceValues {
            hidden: self.hidden.iter().map(|&v| g.value(v).clone()).collect(),
            scores: self.scores.iter().map(|&v| g.value(v).clone()).collect(),
            logits: g.value(self.logits).clone(),
        }
    }
}

impl TraceValues {
    /// Inserts the values into `g` as constants.
    pub fn constants(&self, g: &mut Graph) -> ForwardTrace {
        ForwardTrace {
            hidden: self.hidden.iter().map(|t| g.constant(t.clone())).collect(),
            scores: self.scores.iter().map(|t| g.constant(t.clone())).collect(),
            logits: g.constant(self.logits.clone()),
        }
    }
}

/// Graph leaves bound for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    pub params: BTreeMap<String, Var>,
    pub scales: BTreeMap<String, Var>,
}

/// Stateful builder of one encoder forward pass.
pub struct Encoder<'s, 'o> {
    state: &'s ModelState,
    opts: ForwardOptions<'o>,
    sites: BTreeMap<String, Site>,
    bindings: Bindings,
}

impl<'s, 'o> Encoder<'s, 'o> {
    pub fn new(g: &mut Graph, state: &'s ModelState, opts: ForwardOptions<'o>) -> Result<Self> {
        state.config.validate()?;
        let student = opts.mode == Mode::Student;
        let trainable = opts.trainable;
        let sites: BTreeMap<String, Site> = quant_sites(&state.config)
            .into_iter()
            .map(|s| (s.id.clone(), s))
            .collect();

        let mut bindings = Bindings::default();
        for (name, t) in &state.params {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            bindings.params.insert(name.clone(), v);
        }
        if student {
            for site in sites.values().filter(|s| s.spec(&state.config).is_some()) {
                let sf = state
                    .scales
                    .get(&site.id)
                    .ok_or_else(|| Error::Uncalibrated(site.id.clone()))?;
                let t = Tensor::scalar(sf.value);
                let v = if trainable { g.param(t) } else { g.constant(t) };
                bindings.scales.insert(site.id.clone(), v);
            }
        }
        Ok(Self {
            state,
            opts,
            sites,
            bindings,
        })
    }

    pub fn bindings(&self) -> &Bindings {
        &self.bindings
    }

    fn param(&self, name: &str) -> Result<Var> {
        self.bindings
            .params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.opts.mode == Mode::Teacher || self.opts.dropout <= 0.0 {
            return x;
        }
        match self.opts.rng.as_deref_mut() {
            Some(rng) => g.dropout(x, self.opts.dropout, rng),
            None => x,
        }
    }

    fn quantize(&mut self, g: &mut Graph, site_id: &str, x: Var) -> Result<Var> {
        if self.opts.mode == Mode::Teacher {
            return Ok(x);
        }
        let site = &self.sites[site_id];
        let Some(spec) = site.spec(&self.state.config) else {
            return Ok(x);
        };
        let kind = site.kind();
        let s = self.bindings.scales[site_id];
        match self.opts.linearization.as_deref_mut() {
            Some(lin) => lin.fake_quantize(g, x, s, spec, kind),
            None => lsq::fake_quantize(g, x, s, spec, kind),
        }
    }

    /// Weight tensor as seen by the forward pass (fake-quantized if its
    /// site is active).
    pub fn weight(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let w = self.param(name)?;
        if self.sites.contains_key(name) {
            self.quantize(g, name, w)
        } else {
            Ok(w)
        }
    }

    fn activation(&mut self, g: &mut Graph, site_id: &str, x: Var) -> Result<Var> {
        if let Some(capture) = self.opts.capture.as_deref_mut() {
            capture.insert(site_id.to_string(), g.value(x).clone());
        }
        self.quantize(g, site_id, x)
    }

    /// Word (quantized) + segment + position embeddings, `[batch·n × d]`.
    pub fn embed(&mut self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        batch.validate()?;
        let cfg = &self.state.config;
        if batch.seq_len > cfg.max_seq {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: batch.seq_len,
                limit: cfg.max_seq,
            });
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: bad,
                limit: cfg.vocab,
            });
        }
        if let Some(&bad) = batch.segments.iter().find(|&&s| s >= NUM_SEGMENTS) {
            return Err(Error::IndexOutOfRange {
                what: "segment id",
                index: bad,
                limit: NUM_SEGMENTS,
            });
        }
        let positions: Vec<usize> = (0..batch.size).flat_map(|_| 0..batch.seq_len).collect();

        let word = self.weight(g, WORD_EMBEDDING)?;
        let seg = self.param(SEGMENT_EMBEDDING)?;
        let pos = self.param(POSITION_EMBEDDING)?;
        let e = g.gather_rows(word, &batch.tokens)?;
        let s = g.gather_rows(seg, &batch.segments)?;
        let p = g.gather_rows(pos, &positions)?;
        let es = g.add(e, s)?;
        let h = g.add(es, p)?;
        Ok(self.dropout(g, h))
    }

    fn linear(&mut self, g: &mut Graph, x: Var, input_site: &str, weight: &str) -> Result<Var> {
        let xq = self.activation(g, input_site, x)?;
        let w = self.weight(g, weight)?;
        g.matmul(xq, w)
    }

    /// All attention heads of layer `l`. Returns the concatenated head
    /// outputs `[batch·n × d]` and pre-softmax scores `[batch·heads × n × n]`.
    pub fn attention_heads(
        &mut self,
        g: &mut Graph,
        l: usize,
        h: Var,
        batch_size: usize,
    ) -> Result<(Var, Var)> {
        let heads = self.state.config.heads;
        let scale = self.state.config.attention_scale();
        let q = self.linear(g, h, &layer_param(l, "attn.q_in"), &layer_param(l, "attn.wq"))?;
        let k = self.linear(g, h, &layer_param(l, "attn.k_in"), &layer_param(l, "attn.wk"))?;
        let v = self.linear(g, h, &layer_param(l, "attn.v_in"), &layer_param(l, "attn.wv"))?;
        let q = g.split_heads(q, batch_size, heads)?;
        let k = g.split_heads(k, batch_size, heads)?;
        let v = g.split_heads(v, batch_size, heads)?;

        let q = self.activation(g, &layer_param(l, "attn.qk.lhs"), q)?;
        let k = self.activation(g, &layer_param(l, "attn.qk.rhs"), k)?;
        let raw = g.batched_matmul(q, k, true)?;
        let scores = g.scale(raw, scale);
        let probs = g.softmax(scores, 2)?;
        let probs = self.dropout(g, probs);

        let probs = self.activation(g, &layer_param(l, "attn.pv.lhs"), probs)?;
        let v = self.activation(g, &layer_param(l, "attn.pv.rhs"), v)?;
        let ctx = g.batched_matmul(probs, v, false)?;
        let merged = g.merge_heads(ctx, batch_size, heads)?;
        Ok((merged, scores))
    }

    /// Multi-head attention: concatenated heads times `W^O`.
    pub fn mha(&mut self, g: &mut Graph, l: usize, h: Var, batch_size: usize) -> Result<(Var, Var)> {
        let (ctx, scores) = self.attention_heads(g, l, h, batch_size)?;
        let out = self.linear(g, ctx, &layer_param(l, "attn.o_in"), &layer_param(l, "attn.wo"))?;
        Ok((out, scores))
    }

    /// `GeLU(X W1 + b1) W2 + b2`.
    pub fn ffn(&mut self, g: &mut Graph, l: usize, x: Var) -> Result<Var> {
        let h = self.linear(g, x, &layer_param(l, "ffn.w1_in"), &layer_param(l, "ffn.w1"))?;
        let h = g.add_bias(h, self.param(&layer_param(l, "ffn.b1"))?)?;
        let h = g.gelu(h);
        let out = self.linear(g, h, &layer_param(l, "ffn.w2_in"), &layer_param(l, "ffn.w2"))?;
        g.add_bias(out, self.param(&layer_param(l, "ffn.b2"))?)
    }

    /// Post-norm Transformer layer. Returns the layer output and its
    /// pre-softmax scores.
    pub fn layer(&mut self, g: &mut Graph, l: usize, h: Var, batch_size: usize) -> Result<(Var, Var)> {
        let eps = self.state.config.layer_norm_eps;
        let (m, scores) = self.mha(g, l, h, batch_size)?;
        let m = self.dropout(g, m);
        let r = g.add(h, m)?;
        let x = g.layer_norm(
            r,
            self.param(&layer_param(l, "attn_ln.gain"))?,
            self.param(&layer_param(l, "attn_ln.bias"))?,
            eps,
        )?;
        let f = self.ffn(g, l, x)?;
        let f = self.dropout(g, f);
        let r = g.add(x, f)?;
        let out = g.layer_norm(
            r,
            self.param(&layer_param(l, "ffn_ln.gain"))?,
            self.param(&layer_param(l, "ffn_ln.bias"))?,
            eps,
        )?;
        Ok((out, scores))
    }

    /// Mean-pools the final hidden states and applies the full-precision
    /// classifier.
    pub fn classify(&mut self, g: &mut Graph, h: Var, batch: &Batch) -> Result<Var> {
        let d = self.state.config.hidden;
        let h3 = g.reshape(h, &[batch.size, batch.seq_len, d])?;
        let pooled = g.mean_axis1(h3)?;
        let logits = g.matmul(pooled, self.param(CLASSIFIER_WEIGHT)?)?;
        g.add_bias(logits, self.param(CLASSIFIER_BIAS)?)
    }

    pub fn run(mut self, g: &mut Graph, batch: &Batch) -> Result<(ForwardTrace, Bindings)> {
        let cfg = &self.state.config;
        let (layers, heads, n) = (cfg.layers, cfg.heads, batch.seq_len);
        let mut h = self.embed(g, batch)?;
        let mut hidden = vec![h];
        let mut scores = Vec::with_capacity(layers);
        for l in 0..layers {
            let (out, s) = self.layer(g, l, h, batch.size)?;
            scores.push(g.reshape(s, &[batch.size, heads, n, n])?);
            hidden.push(out);
            h = out;
        }
        let logits = self.classify(g, h, batch)?;
        Ok((
            ForwardTrace {
                hidden,
                scores,
                logits,
            },
            self.bindings,
        ))
    }
}

/// Full encoder forward pass.
pub fn forward(
    g: &mut Graph,
    state: &ModelState,
    batch: &Batch,
    opts: ForwardOptions<'_>,
) -> Result<(ForwardTrace, Bindings)> {
    Encoder::new(g, state, opts)?.run(g, batch)
}

/// Teacher outputs for `batch`, computed in a throwaway graph.
pub fn teacher_trace(state: &ModelState, batch: &Batch) -> Result<TraceValues> {
    let mut g = Graph::new();
    let (trace, _) = forward(&mut g, state, batch, ForwardOptions::teacher())?;
    Ok(trace.values(&g))
}

/// Predicted class per sequence.
pub fn predict(state: &ModelState, batch: &Batch, mode: Mode) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        mode,
        ..ForwardOptions::teacher()
    };
    let (trace, _) = forward(&mut g, state, batch, opts)?;
    let logits = g.value(trace.logits);
    let k = logits.last_dim();
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}
