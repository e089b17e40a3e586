//! Transformer caption decoder: token embedding with sinusoidal positions,
//! causally masked self-attention, cross-attention over the image embedding,
//! and a feed-forward network, all inside a whole-layer residual that adds the
//! input word embedding back onto each layer's output. A linear projection and
//! row softmax turn the final embedding into word probabilities.
//!
//! Sub-layers are post-norm: residual add, then layer norm. Inference is
//! greedy and autoregressive, starting from START and stopping at END.

use crate::data::FeaturePair;
use crate::encoder::{self, EncoderConfig, EncoderIds};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::vocab::{self, TokenSequence};

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    pub d_emb: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub depth: usize,
    /// Vocabulary size m.
    pub vocab_size: usize,
    /// Fixed token budget n per caption.
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal positions need an even embedding width, got {}",
                self.d_emb
            )));
        }
        if self.heads == 0 || self.d_emb % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} not divisible by head count {}",
                self.d_emb, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.vocab_size <= vocab::UNK {
            return Err(Error::Config("vocabulary lacks the reserved specials".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must fit START and END".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ln3_gain: Tensor,
    pub ln3_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embedding: Tensor,
    pub layers: Vec<DecoderLayerParams>,
    pub vocab_proj: Tensor,
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_in(-limit, limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

fn init_attn(rng: &mut Rng, d: usize) -> AttnParams {
    AttnParams {
        wq: glorot(rng, d, d),
        wk: glorot(rng, d, d),
        wv: glorot(rng, d, d),
        wo: glorot(rng, d, d),
    }
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_emb;
        let layers = (0..cfg.depth)
            .map(|_| DecoderLayerParams {
                self_attn: init_attn(rng, d),
                cross_attn: init_attn(rng, d),
                ffn_w1: glorot(rng, d, cfg.ffn_dim),
                ffn_b1: Tensor::zeros(vec![cfg.ffn_dim]),
                ffn_w2: glorot(rng, cfg.ffn_dim, d),
                ffn_b2: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::filled(vec![d], 1.0),
                ln1_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::filled(vec![d], 1.0),
                ln2_bias: Tensor::zeros(vec![d]),
                ln3_gain: Tensor::filled(vec![d], 1.0),
                ln3_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(DecoderParams {
            embedding: glorot(rng, cfg.vocab_size, d),
            layers,
            vocab_proj: glorot(rng, d, cfg.vocab_size),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("decoder.embedding".to_string(), &self.embedding)];
        for (j, layer) in self.layers.iter().enumerate() {
            let base = format!("decoder.layer{j}");
            for (tag, attn) in [("self", &layer.self_attn), ("cross", &layer.cross_attn)] {
                out.push((format!("{base}.{tag}.wq"), &attn.wq));
                out.push((format!("{base}.{tag}.wk"), &attn.wk));
                out.push((format!("{base}.{tag}.wv"), &attn.wv));
                out.push((format!("{base}.{tag}.wo"), &attn.wo));
            }
            out.push((format!("{base}.ffn.w1"), &layer.ffn_w1));
            out.push((format!("{base}.ffn.b1"), &layer.ffn_b1));
            out.push((format!("{base}.ffn.w2"), &layer.ffn_w2));
            out.push((format!("{base}.ffn.b2"), &layer.ffn_b2));
            out.push((format!("{base}.ln1.gain"), &layer.ln1_gain));
            out.push((format!("{base}.ln1.bias"), &layer.ln1_bias));
            out.push((format!("{base}.ln2.gain"), &layer.ln2_gain));
            out.push((format!("{base}.ln2.bias"), &layer.ln2_bias));
            out.push((format!("{base}.ln3.gain"), &layer.ln3_gain));
            out.push((format!("{base}.ln3.bias"), &layer.ln3_bias));
        }
        out.push(("decoder.vocab_proj".to_string(), &self.vocab_proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("decoder.embedding".to_string(), &mut self.embedding)];
        for (j, layer) in self.layers.iter_mut().enumerate() {
            let base = format!("decoder.layer{j}");
            for (tag, attn) in [
                ("self", &mut layer.self_attn),
                ("cross", &mut layer.cross_attn),
            ] {
                out.push((format!("{base}.{tag}.wq"), &mut attn.wq));
                out.push((format!("{base}.{tag}.wk"), &mut attn.wk));
                out.push((format!("{base}.{tag}.wv"), &mut attn.wv));
                out.push((format!("{base}.{tag}.wo"), &mut attn.wo));
            }
            out.push((format!("{base}.ffn.w1"), &mut layer.ffn_w1));
            out.push((format!("{base}.ffn.b1"), &mut layer.ffn_b1));
            out.push((format!("{base}.ffn.w2"), &mut layer.ffn_w2));
            out.push((format!("{base}.ffn.b2"), &mut layer.ffn_b2));
            out.push((format!("{base}.ln1.gain"), &mut layer.ln1_gain));
            out.push((format!("{base}.ln1.bias"), &mut layer.ln1_bias));
            out.push((format!("{base}.ln2.gain"), &mut layer.ln2_gain));
            out.push((format!("{base}.ln2.bias"), &mut layer.ln2_bias));
            out.push((format!("{base}.ln3.gain"), &mut layer.ln3_gain));
            out.push((format!("{base}.ln3.bias"), &mut layer.ln3_bias));
        }
        out.push(("decoder.vocab_proj".to_string(), &mut self.vocab_proj));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> DecoderIds {
        let mut stage_one = |t: &Tensor| {
            let mut staged = t.clone();
            staged.requires_grad = trainable;
            tape.leaf(staged)
        };
        self.stage_impl(&mut stage_one)
    }

    /// Stage with the tensor at position `index` (in [`Self::named`] order)
    /// replaced by an existing tape id, for probing single parameters.
    pub fn stage_overriding(&self, tape: &mut Tape, index: usize, probe: TensorId) -> DecoderIds {
        let mut at = 0;
        let mut stage_one = |t: &Tensor| {
            let id = if at == index {
                probe
            } else {
                tape.leaf(t.clone())
            };
            at += 1;
            id
        };
        self.stage_impl(&mut stage_one)
    }

    fn stage_impl(&self, mut stage_one: &mut impl FnMut(&Tensor) -> TensorId) -> DecoderIds {
        let stage_attn = |a: &AttnParams, stage_one: &mut dyn FnMut(&Tensor) -> TensorId| AttnIds {
            wq: stage_one(&a.wq),
            wk: stage_one(&a.wk),
            wv: stage_one(&a.wv),
            wo: stage_one(&a.wo),
        };
        DecoderIds {
            embedding: stage_one(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerIds {
                    self_attn: stage_attn(&l.self_attn, &mut stage_one),
                    cross_attn: stage_attn(&l.cross_attn, &mut stage_one),
                    ffn_w1: stage_one(&l.ffn_w1),
                    ffn_b1: stage_one(&l.ffn_b1),
                    ffn_w2: stage_one(&l.ffn_w2),
                    ffn_b2: stage_one(&l.ffn_b2),
                    ln1_gain: stage_one(&l.ln1_gain),
                    ln1_bias: stage_one(&l.ln1_bias),
                    ln2_gain: stage_one(&l.ln2_gain),
                    ln2_bias: stage_one(&l.ln2_bias),
                    ln3_gain: stage_one(&l.ln3_gain),
                    ln3_bias: stage_one(&l.ln3_bias),
                })
                .collect(),
            vocab_proj: stage_one(&self.vocab_proj),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub self_attn: AttnIds,
    pub cross_attn: AttnIds,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub ln1_gain: TensorId,
    pub ln1_bias: TensorId,
    pub ln2_gain: TensorId,
    pub ln2_bias: TensorId,
    pub ln3_gain: TensorId,
    pub ln3_bias: TensorId,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub embedding: TensorId,
    pub layers: Vec<LayerIds>,
    pub vocab_proj: TensorId,
}

impl DecoderIds {
    /// Staged ids in the same order as [`DecoderParams::named`].
    pub fn ordered(&self) -> Vec<TensorId> {
        let mut out = vec![self.embedding];
        for layer in &self.layers {
            for attn in [&layer.self_attn, &layer.cross_attn] {
                out.extend([attn.wq, attn.wk, attn.wv, attn.wo]);
            }
            out.extend([
                layer.ffn_w1,
                layer.ffn_b1,
                layer.ffn_w2,
                layer.ffn_b2,
                layer.ln1_gain,
                layer.ln1_bias,
                layer.ln2_gain,
                layer.ln2_bias,
                layer.ln3_gain,
                layer.ln3_bias,
            ]);
        }
        out.push(self.vocab_proj);
        out
    }
}

// ── Building blocks ─────────────────────────────────────────────────────

/// Sinusoidal position table: entry (pos, 2k) = sin(pos / 10000^(2k/d)),
/// entry (pos, 2k+1) = cos of the same angle.
pub fn sinusoidal_positions(n: usize, d_emb: usize) -> Result<Tensor> {
    if d_emb % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal positions need an even embedding width, got {d_emb}"
        )));
    }
    let mut data = vec![0.0; n * d_emb];
    for pos in 0..n {
        for k in 0..d_emb / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d_emb as f64);
            data[pos * d_emb + 2 * k] = angle.sin();
            data[pos * d_emb + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n, d_emb], data)
}

/// Lower-triangular allowed pattern: entry (i, j) is 1 iff j <= i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut mask = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            mask.data_mut()[i * n + j] = 1.0;
        }
    }
    mask
}

/// Token embedding lookup plus sinusoidal positions.
pub fn embed_tokens(tape: &mut Tape, ids: &[usize], embedding: TensorId) -> Result<TensorId> {
    let d_emb = tape.value(embedding).shape()[1];
    let looked_up = tape.gather_rows(embedding, ids)?;
    let positions = tape.constant(sinusoidal_positions(ids.len(), d_emb)?);
    tape.add(looked_up, positions)
}

/// Multi-head attention: queries from `q_input`, keys/values from `kv_input`.
/// With `mask` set, attention weights are restricted to the allowed pattern.
/// `probs_sink`, when present, receives the head-averaged attention weights.
pub(crate) fn multi_head(
    tape: &mut Tape,
    q_input: TensorId,
    kv_input: TensorId,
    attn: &AttnIds,
    heads: usize,
    mask: Option<&Tensor>,
    probs_sink: Option<&mut Vec<Vec<f64>>>,
) -> Result<TensorId> {
    let (n_q, d) = tape.value(q_input).dims2("multi_head")?;
    let (n_kv, d_kv) = tape.value(kv_input).dims2("multi_head")?;
    if d_kv != d {
        return Err(Error::ShapeMismatch {
            op: "multi_head",
            lhs: vec![n_q, d],
            rhs: vec![n_kv, d_kv],
        });
    }
    let d_k = d / heads;
    let q = tape.matmul(q_input, attn.wq)?;
    let k = tape.matmul(kv_input, attn.wk)?;
    let v = tape.matmul(kv_input, attn.wv)?;

    let mut mean_probs = vec![vec![0.0; n_kv]; n_q];
    let mut head_outs = Vec::with_capacity(heads);
    for l in 0..heads {
        let qh = tape.slice_cols(q, l * d_k, d_k)?;
        let kh = tape.slice_cols(k, l * d_k, d_k)?;
        let vh = tape.slice_cols(v, l * d_k, d_k)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
        let probs = match mask {
            Some(m) => tape.masked_softmax_rows(scaled, m)?,
            None => tape.softmax_rows(scaled)?,
        };
        if probs_sink.is_some() {
            let pd = tape.value(probs).data();
            for (i, row) in mean_probs.iter_mut().enumerate() {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += pd[i * n_kv + j] / heads as f64;
                }
            }
        }
        head_outs.push(tape.matmul(probs, vh)?);
    }
    if let Some(sink) = probs_sink {
        *sink = mean_probs;
    }
    let merged = tape.concat_cols(&head_outs)?;
    tape.matmul(merged, attn.wo)
}

/// Causally masked self-attention sub-layer: post-norm residual around
/// multi-head attention.
pub fn masked_self_attention(
    tape: &mut Tape,
    e: TensorId,
    layer: &LayerIds,
    heads: usize,
) -> Result<TensorId> {
    let (n, _) = tape.value(e).dims2("masked_self_attention")?;
    let mask = causal_mask(n);
    let attn = multi_head(tape, e, e, &layer.self_attn, heads, Some(&mask), None)?;
    let summed = tape.add(e, attn)?;
    tape.layer_norm(summed, layer.ln1_gain, layer.ln1_bias)
}

/// Cross-attention sub-layer: queries from the text stream, keys and values
/// from the image embedding, no causal mask, post-norm residual.
pub fn cross_attention(
    tape: &mut Tape,
    s_text: TensorId,
    e_img: TensorId,
    layer: &LayerIds,
    heads: usize,
    probs_sink: Option<&mut Vec<Vec<f64>>>,
) -> Result<TensorId> {
    let attn = multi_head(
        tape,
        s_text,
        e_img,
        &layer.cross_attn,
        heads,
        None,
        probs_sink,
    )?;
    let summed = tape.add(s_text, attn)?;
    tape.layer_norm(summed, layer.ln2_gain, layer.ln2_bias)
}

/// One decoder layer with the whole-layer residual of the word embedding:
/// `E_j = FFN(CA(MHA(E_prev), E_img)) + E_prev`.
pub fn decoder_layer(
    tape: &mut Tape,
    e_prev: TensorId,
    e_img: TensorId,
    layer: &LayerIds,
    heads: usize,
    probs_sink: Option<&mut Vec<Vec<f64>>>,
) -> Result<TensorId> {
    let s_text = masked_self_attention(tape, e_prev, layer, heads)?;
    let s_ti = cross_attention(tape, s_text, e_img, layer, heads, probs_sink)?;
    let h1 = tape.matmul(s_ti, layer.ffn_w1)?;
    let h1 = tape.add_bias_row(h1, layer.ffn_b1)?;
    let act = tape.relu(h1);
    let h2 = tape.matmul(act, layer.ffn_w2)?;
    let h2 = tape.add_bias_row(h2, layer.ffn_b2)?;
    let summed = tape.add(s_ti, h2)?;
    let ffn_out = tape.layer_norm(summed, layer.ln3_gain, layer.ln3_bias)?;
    tape.add(ffn_out, e_prev)
}

/// Run every decoder layer. The attention sink, when given, captures the
/// cross-attention weights of the final layer.
pub fn decoder_stack(
    tape: &mut Tape,
    dec: &DecoderIds,
    e_text: TensorId,
    e_img: TensorId,
    heads: usize,
    mut probs_sink: Option<&mut Vec<Vec<f64>>>,
) -> Result<TensorId> {
    let mut e = e_text;
    let last = dec.layers.len() - 1;
    for (j, layer) in dec.layers.iter().enumerate() {
        let sink = if j == last { probs_sink.take() } else { None };
        e = decoder_layer(tape, e, e_img, layer, heads, sink)?;
    }
    Ok(e)
}

/// Linear projection to vocabulary logits followed by a row softmax.
pub fn project_vocab(tape: &mut Tape, e: TensorId, vocab_proj: TensorId) -> Result<TensorId> {
    let logits = tape.matmul(e, vocab_proj)?;
    tape.softmax_rows(logits)
}

/// Teacher-forced cross entropy: position i predicts token i+1; PAD targets
/// are excluded and the loss averages over the counted positions.
pub fn cross_entropy_loss(tape: &mut Tape, probs: TensorId, ids: &[usize]) -> Result<TensorId> {
    let targets: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(_, &token)| token != vocab::PAD)
        .map(|(pos, &token)| (pos - 1, token))
        .collect();
    if targets.is_empty() {
        return Err(Error::Config(
            "cross entropy: no counted target positions".into(),
        ));
    }
    tape.nll_loss(probs, &targets)
}

/// Whole training-path forward: encode the feature pair, run the decoder
/// teacher-forced over the full padded sequence, and compute the loss, all
/// on one tape so backward reaches every parameter.
pub fn forward_teacher_forced(
    tape: &mut Tape,
    enc_ids: &EncoderIds,
    enc_cfg: &EncoderConfig,
    dec_ids: &DecoderIds,
    dec_cfg: &DecoderConfig,
    features: &FeaturePair,
    tokens: &TokenSequence,
) -> Result<(TensorId, TensorId)> {
    let f1 = tape.constant(features.f1().clone());
    let f2 = tape.constant(features.f2().clone());
    let e_img = encoder::encode(tape, enc_ids, f1, f2, enc_cfg)?;
    let e_text = embed_tokens(tape, &tokens.ids, dec_ids.embedding)?;
    let decoded = decoder_stack(tape, dec_ids, e_text, e_img, dec_cfg.heads, None)?;
    let probs = project_vocab(tape, decoded, dec_ids.vocab_proj)?;
    let loss = cross_entropy_loss(tape, probs, &tokens.ids)?;
    Ok((probs, loss))
}

// ── Greedy decoding ─────────────────────────────────────────────────────

/// Pick the next token: highest probability wins, ties go to the lowest id.
/// PAD and START are structural and never emitted.
fn argmax_next(row: &[f64]) -> usize {
    let mut best = vocab::END;
    let mut best_p = f64::NEG_INFINITY;
    for (id, &p) in row.iter().enumerate() {
        if id == vocab::PAD || id == vocab::START {
            continue;
        }
        if p > best_p {
            best_p = p;
            best = id;
        }
    }
    best
}

/// Greedy autoregressive decoding from a precomputed image embedding.
/// Generates until END or until the token budget forces one.
pub fn greedy_decode(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    e_img: &Tensor,
) -> Result<TokenSequence> {
    Ok(greedy_decode_traced(params, cfg, e_img)?.0)
}

/// Greedy decoding that also returns, per generated token, the final layer's
/// head-averaged cross-attention row over the image positions.
pub fn greedy_decode_traced(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    e_img: &Tensor,
) -> Result<(TokenSequence, Vec<Vec<f64>>)> {
    let mut ids = vec![vocab::START];
    let mut attention = Vec::new();
    loop {
        if ids.len() == cfg.max_len - 1 {
            ids.push(vocab::END);
            break;
        }
        let mut tape = Tape::new();
        let dec_ids = params.stage(&mut tape, false);
        let img = tape.constant(e_img.clone());
        let e_text = embed_tokens(&mut tape, &ids, dec_ids.embedding)?;
        let mut sink = Vec::new();
        let decoded = decoder_stack(
            &mut tape,
            &dec_ids,
            e_text,
            img,
            cfg.heads,
            Some(&mut sink),
        )?;
        let probs = project_vocab(&mut tape, decoded, dec_ids.vocab_proj)?;
        let last = ids.len() - 1;
        let m = tape.value(probs).shape()[1];
        let row = &tape.value(probs).data()[last * m..(last + 1) * m];
        let next = argmax_next(row);
        attention.push(sink.swap_remove(last));
        ids.push(next);
        if next == vocab::END {
            break;
        }
    }
    ids.resize(cfg.max_len, vocab::PAD);
    Ok((TokenSequence::new(ids)?, attention))
}
