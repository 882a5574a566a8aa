//! Pre-LN transformer encoder and decoders, a BiLSTM alternative encoder,
//! and greedy / beam decoding.

use serde::{Deserialize, Serialize};
use titkit_tensor::{log_softmax, Scalar, Tensor, Var};

use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::encoders::{pad_batch, FeatureSequence};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Ctx, Embedding, Init, LayerNorm, Linear};

/// Additive mask value for disallowed attention.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TransformerConfig {
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            ffn: 2048,
            enc_layers: 6,
            dec_layers: 6,
            dropout: 0.1,
        }
    }

    /// No dropout: the toy runs are too short to overfit.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn: 128,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.0,
        }
    }

    /// D=8, one head, one layer each side, no dropout.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            heads: 1,
            ffn: 16,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `[B, 1, 1, L]` additive mask hiding positions at or beyond each length.
pub fn padding_mask<T: Scalar>(lengths: &[usize], len: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(lengths.len() * len);
    for &n in lengths {
        data.extend((0..len).map(|j| T::of(if j < n { 0.0 } else { MASKED })));
    }
    Tensor::new(vec![lengths.len(), 1, 1, len], data)
}

/// `[1, 1, L, L]` additive mask hiding future positions.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * len);
    for i in 0..len {
        data.extend((0..len).map(|j| T::of(if j <= i { 0.0 } else { MASKED })));
    }
    Tensor::new(vec![1, 1, len, len], data)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(&mut init.scope("q"), d, d, true),
            k: Linear::new(&mut init.scope("k"), d, d, true),
            v: Linear::new(&mut init.scope("v"), d, d, true),
            o: Linear::new(&mut init.scope("o"), d, d, true),
            heads,
        }
    }

    fn split<'g, T: Scalar>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let (b, l, d) = (x.dim(0), x.dim(1), x.dim(2));
        let h = self.heads;
        x.reshape(&[b, l, h, d / h]).permute(&[0, 2, 1, 3]).reshape(&[b * h, l, d / h])
    }

    /// `mask` broadcasts to `[B, heads, Lq, Lk]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        query: Var<'g, T>,
        memory: Var<'g, T>,
        mask: &Tensor<T>,
        dropout: f64,
    ) -> Var<'g, T> {
        let (b, lq, d) = (query.dim(0), query.dim(1), query.dim(2));
        let lk = memory.dim(1);
        let h = self.heads;
        let q = self.split(self.q.forward(cx, query));
        let k = self.split(self.k.forward(cx, memory));
        let v = self.split(self.v.forward(cx, memory));
        let scores = q
            .matmul_nt(k)
            .scale(1.0 / ((d / h) as f64).sqrt())
            .reshape(&[b, h, lq, lk])
            .add(cx.constant(mask.clone()));
        let attn = cx.dropout(scores.softmax(), dropout).reshape(&[b * h, lq, lk]);
        let ctx = attn
            .matmul(v)
            .reshape(&[b, h, lq, d / h])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, lq, d]);
        self.o.forward(cx, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(init: &mut Init<'_, T>, d: usize, ffn: usize) -> Self {
        Self {
            fc1: Linear::new(&mut init.scope("fc1"), d, ffn, true),
            fc2: Linear::new(&mut init.scope("fc2"), ffn, d, true),
        }
    }

    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>, dropout: f64) -> Var<'g, T> {
        self.fc2.forward(cx, cx.dropout(self.fc1.forward(cx, x).relu(), dropout))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub ln: LayerNorm,
    pub dropout: f64,
}

impl Encoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &TransformerConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                let mut s = init.scope(&format!("layer{i}"));
                EncoderLayer {
                    ln1: LayerNorm::new(&mut s.scope("ln1"), d),
                    attn: MultiHeadAttention::new(&mut s.scope("attn"), d, cfg.heads),
                    ln2: LayerNorm::new(&mut s.scope("ln2"), d),
                    ffn: FeedForward::new(&mut s.scope("ffn"), d, cfg.ffn),
                }
            })
            .collect();
        Self {
            layers,
            ln: LayerNorm::new(&mut init.scope("ln"), d),
            dropout: cfg.dropout,
        }
    }

    /// Adds positions, then runs the self-attention stack under a padding mask.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, input: &FeatureSequence<'g, T>) -> FeatureSequence<'g, T> {
        let (l, d) = (input.len(), input.dim());
        let mask = padding_mask::<T>(&input.lengths, l);
        let mut x = cx.dropout(
            input.features.add(cx.constant(sinusoidal_positions(l, d))),
            self.dropout,
        );
        for layer in &self.layers {
            let h = layer.ln1.forward(cx, x);
            x = x.add(cx.dropout(layer.attn.forward(cx, h, h, &mask, self.dropout), self.dropout));
            let h = layer.ln2.forward(cx, x);
            x = x.add(cx.dropout(layer.ffn.forward(cx, h, self.dropout), self.dropout));
        }
        FeatureSequence {
            features: self.ln.forward(cx, x),
            lengths: input.lengths.clone(),
        }
    }
}

/// One direction of an LSTM. Gate order in the `4h` axis: input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl LstmCell {
    fn new<T: Scalar>(init: &mut Init<'_, T>, d_in: usize, hidden: usize) -> Self {
        let input = Linear::new(&mut init.scope("input"), d_in, 4 * hidden, false);
        let recurrent = {
            let mut s = init.scope("recurrent");
            let bound = (1.0 / hidden as f64).sqrt();
            let w = s.uniform("weight", &[hidden, 4 * hidden], bound);
            // Forget gate starts open.
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
            let b = s.add("bias", Tensor::from_f64([4 * hidden], &b));
            Linear { w, b: Some(b) }
        };
        Self {
            input,
            recurrent,
            hidden,
        }
    }

    /// `[B, L, D]` to `[B, L, h]`, scanning left to right.
    fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let (b, l) = (x.dim(0), x.dim(1));
        let h = self.hidden;
        let xi = self.input.forward(cx, x);
        let mut hs = cx.constant(Tensor::zeros(vec![b, h]));
        let mut cs = cx.constant(Tensor::zeros(vec![b, h]));
        let mut outs = Vec::with_capacity(l);
        for t in 0..l {
            let gates = xi
                .narrow(1, t, 1)
                .reshape(&[b, 4 * h])
                .add(self.recurrent.forward(cx, hs));
            let i = gates.narrow(1, 0, h).sigmoid();
            let f = gates.narrow(1, h, h).sigmoid();
            let g = gates.narrow(1, 2 * h, h).tanh();
            let o = gates.narrow(1, 3 * h, h).sigmoid();
            cs = f.mul(cs).add(i.mul(g));
            hs = o.mul(cs.tanh());
            outs.push(hs.reshape(&[b, 1, h]));
        }
        Var::concat(&outs, 1)
    }
}

/// `[B, L, L]` permutation reversing each item's first `len` positions.
fn reversal<T: Scalar>(lengths: &[usize], l: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); lengths.len() * l * l];
    for (b, &n) in lengths.iter().enumerate() {
        for i in 0..l {
            let j = if i < n { n - 1 - i } else { i };
            data[b * l * l + i * l + j] = T::one();
        }
    }
    Tensor::new(vec![lengths.len(), l, l], data)
}

/// Bidirectional LSTM; each direction has `D/2` units, concatenated to `D`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub ln: LayerNorm,
}

impl BiLstm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d: usize) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::Config("BiLSTM needs an even model width".into()));
        }
        Ok(Self {
            fwd: LstmCell::new(&mut init.scope("fwd"), d, d / 2),
            bwd: LstmCell::new(&mut init.scope("bwd"), d, d / 2),
            ln: LayerNorm::new(&mut init.scope("ln"), d),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, input: &FeatureSequence<'g, T>) -> FeatureSequence<'g, T> {
        let x = input.features;
        let rev = cx.constant(reversal(&input.lengths, input.len()));
        let f = self.fwd.forward(cx, x);
        let r = rev.matmul(self.bwd.forward(cx, rev.matmul(x)));
        FeatureSequence {
            features: self.ln.forward(cx, Var::concat(&[f, r], 2)),
            lengths: input.lengths.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SeqEncoderKind {
    #[default]
    Transformer,
    Bilstm,
}

#[derive(Clone, Debug)]
pub enum SeqEncoder {
    Transformer(Encoder),
    BiLstm(BiLstm),
}

impl SeqEncoder {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, input: &FeatureSequence<'g, T>) -> FeatureSequence<'g, T> {
        match self {
            SeqEncoder::Transformer(e) => e.forward(cx, input),
            SeqEncoder::BiLstm(e) => e.forward(cx, input),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

/// Token embedding, causal decoder stack and an untied `[V, D]` output head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Embedding,
    pub layers: Vec<DecoderLayer>,
    pub ln: LayerNorm,
    /// `W_o`, `[V, D]`.
    pub head: titkit_tensor::ParamId,
    pub vocab: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &TransformerConfig, vocab: usize, max_len: usize) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.dec_layers)
            .map(|i| {
                let mut s = init.scope(&format!("layer{i}"));
                DecoderLayer {
                    ln1: LayerNorm::new(&mut s.scope("ln1"), d),
                    self_attn: MultiHeadAttention::new(&mut s.scope("self_attn"), d, cfg.heads),
                    ln2: LayerNorm::new(&mut s.scope("ln2"), d),
                    cross_attn: MultiHeadAttention::new(&mut s.scope("cross_attn"), d, cfg.heads),
                    ln3: LayerNorm::new(&mut s.scope("ln3"), d),
                    ffn: FeedForward::new(&mut s.scope("ffn"), d, cfg.ffn),
                }
            })
            .collect();
        Self {
            embed: Embedding::new(&mut init.scope("embed"), vocab, d),
            layers,
            ln: LayerNorm::new(&mut init.scope("ln"), d),
            head: init.normal("head", &[vocab, d], (d as f64).powf(-0.5)),
            vocab,
            dropout: cfg.dropout,
            max_len,
        }
    }

    /// Logits `[B, L, V]` for a `[B, L]` block of input ids.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        memory: &FeatureSequence<'g, T>,
        ids: &[usize],
        len: usize,
    ) -> Var<'g, T> {
        let b = memory.batch();
        let d = self.embed.dim;
        let self_mask = causal_mask::<T>(len);
        let mem_mask = padding_mask::<T>(&memory.lengths, memory.len());
        let mut x = self
            .embed
            .forward(cx, ids, b, len)
            .scale((d as f64).sqrt())
            .add(cx.constant(sinusoidal_positions(len, d)));
        x = cx.dropout(x, self.dropout);
        for layer in &self.layers {
            let h = layer.ln1.forward(cx, x);
            x = x.add(cx.dropout(layer.self_attn.forward(cx, h, h, &self_mask, self.dropout), self.dropout));
            let h = layer.ln2.forward(cx, x);
            x = x.add(cx.dropout(
                layer.cross_attn.forward(cx, h, memory.features, &mem_mask, self.dropout),
                self.dropout,
            ));
            let h = layer.ln3.forward(cx, x);
            x = x.add(cx.dropout(layer.ffn.forward(cx, h, self.dropout), self.dropout));
        }
        self.ln.forward(cx, x).matmul_nt(cx.p(self.head))
    }

    /// Teacher-forced logits for EOS-terminated targets: the input is the
    /// target shifted right behind BOS. Returns logits and the padded labels.
    pub fn decode_train<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        memory: &FeatureSequence<'g, T>,
        targets: &[&[usize]],
    ) -> Result<(Var<'g, T>, Vec<usize>)> {
        if targets.len() != memory.batch() {
            return Err(Error::Shape(format!(
                "{} targets for a batch of {}",
                targets.len(),
                memory.batch()
            )));
        }
        if let Some(t) = targets.iter().find(|t| t.len() > self.max_len) {
            return Err(Error::InvalidArgument(format!(
                "target of length {} exceeds the maximum {}",
                t.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = targets.iter().flat_map(|t| t.iter()).find(|&&id| id >= self.vocab) {
            return Err(Error::IndexOutOfVocabulary {
                index: bad,
                size: self.vocab,
            });
        }
        let (labels, len, _) = pad_batch(targets);
        let mut inputs = Vec::with_capacity(labels.len());
        for row in labels.chunks(len.max(1)) {
            inputs.push(BOS);
            inputs.extend_from_slice(&row[..len.saturating_sub(1)]);
        }
        Ok((self.forward(cx, memory, &inputs, len), labels))
    }

    /// Log-probabilities of the next token after each prefix, `[B, V]`, with
    /// PAD, BOS and UNK removed from consideration.
    fn next_logprobs<T: Scalar>(&self, cx: &Ctx<'_, T>, memory: &FeatureSequence<'_, T>, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let len = prefixes[0].len();
        let flat: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let logits = self.forward(cx, memory, &flat, len).value();
        let v = self.vocab;
        let b = prefixes.len();
        let mut last = Vec::with_capacity(b * v);
        for i in 0..b {
            let o = (i * len + len - 1) * v;
            last.extend_from_slice(&logits.data()[o..o + v]);
        }
        let lp = log_softmax(&Tensor::new(vec![b, v], last));
        lp.data()
            .chunks(v)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, x)| if j == PAD || j == BOS || j == UNK { f64::NEG_INFINITY } else { x.as_f64() })
                    .collect()
            })
            .collect()
    }

    /// Argmax decoding; outputs exclude BOS and EOS. Stops at EOS or `max_len` tokens.
    pub fn greedy<T: Scalar>(&self, cx: &Ctx<'_, T>, memory: &FeatureSequence<'_, T>, max_len: usize) -> Vec<Vec<usize>> {
        let b = memory.batch();
        let mut prefixes = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            let lp = self.next_logprobs(cx, memory, &prefixes);
            for (i, row) in lp.iter().enumerate() {
                let tok = if done[i] { PAD } else { argmax(row) };
                prefixes[i].push(tok);
                if tok == EOS {
                    done[i] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        prefixes.into_iter().map(strip).collect()
    }

    /// Beam search with length-normalized scores, one input at a time.
    pub fn beam<T: Scalar>(
        &self,
        cx: &Ctx<'_, T>,
        memory: &FeatureSequence<'_, T>,
        beam: usize,
        max_len: usize,
    ) -> Vec<Vec<usize>> {
        assert!(beam > 0, "beam width must be positive");
        (0..memory.batch())
            .map(|i| {
                let item = FeatureSequence {
                    features: memory.features.narrow(0, i, 1),
                    lengths: vec![memory.lengths[i]],
                };
                self.beam_one(cx, &item, beam, max_len)
            })
            .collect()
    }

    /// Greedy for `beam <= 1`, beam search otherwise.
    pub fn search<T: Scalar>(&self, cx: &Ctx<'_, T>, memory: &FeatureSequence<'_, T>, beam: usize, max_len: usize) -> Vec<Vec<usize>> {
        if beam <= 1 {
            self.greedy(cx, memory, max_len)
        } else {
            self.beam(cx, memory, beam, max_len)
        }
    }

    fn beam_one<T: Scalar>(&self, cx: &Ctx<'_, T>, memory: &FeatureSequence<'_, T>, beam: usize, max_len: usize) -> Vec<usize> {
        struct Hyp {
            tokens: Vec<usize>,
            logp: f64,
        }
        let norm = |h: &Hyp| h.logp / (h.tokens.len() - 1) as f64;
        let mut alive = vec![Hyp {
            tokens: vec![BOS],
            logp: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..max_len {
            let feats: Vec<_> = alive.iter().map(|_| memory.features).collect();
            let expanded = FeatureSequence {
                features: Var::concat(&feats, 0),
                lengths: vec![memory.lengths[0]; alive.len()],
            };
            let prefixes: Vec<Vec<usize>> = alive.iter().map(|h| h.tokens.clone()).collect();
            let lp = self.next_logprobs(cx, &expanded, &prefixes);
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for (hi, row) in lp.iter().enumerate() {
                for (tok, &l) in row.iter().enumerate() {
                    if l.is_finite() {
                        cand.push((alive[hi].logp + l, hi, tok));
                    }
                }
            }
            // Highest cumulative log-prob first; ties broken by lower hypothesis then token index.
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (logp, hi, tok) in cand.into_iter().take(beam) {
                let mut tokens = alive[hi].tokens.clone();
                tokens.push(tok);
                let h = Hyp { tokens, logp };
                if tok == EOS {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            }
            alive = next;
            if alive.is_empty() {
                break;
            }
        }
        finished.extend(alive);
        let best = finished
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| norm(a).total_cmp(&norm(b)).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("at least one hypothesis");
        strip(std::mem::take(&mut finished[best].tokens))
    }

    /// Sum of token log-probs of `tokens` (EOS included if present) given one memory item.
    pub fn sequence_logprob<T: Scalar>(&self, cx: &Ctx<'_, T>, memory: &FeatureSequence<'_, T>, tokens: &[usize]) -> f64 {
        let mut input = vec![BOS];
        input.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        let logits = self.forward(cx, memory, &input, input.len()).value();
        let v = self.vocab;
        let lp = log_softmax(&(*logits).clone().reshape(vec![input.len(), v]));
        tokens.iter().enumerate().map(|(t, &tok)| lp.data()[t * v + tok].as_f64()).sum()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Drops the leading BOS and everything from EOS on.
fn strip(tokens: Vec<usize>) -> Vec<usize> {
    tokens.into_iter().skip(1).take_while(|&t| t != EOS && t != PAD).collect()
}
