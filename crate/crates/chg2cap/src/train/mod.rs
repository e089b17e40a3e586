//! Training harness: Adam optimization with a step learning-rate schedule,
//! validation-based model selection by BLEU-4, and greedy-decoding evaluation.
//!
//! A run is fully determined by (seed, config, dataset): the shuffle order,
//! per-epoch caption sampling, and parameter initialization all come from one
//! seeded generator, and every reduction has a fixed summation order.

mod checkpoint;

pub use checkpoint::Checkpoint;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetRecord, FeaturePair, Split};
use crate::decoder::{self, DecoderConfig, DecoderParams};
use crate::encoder::{self, AblationFlags, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::vocab::{self, encode_caption, TokenSequence, Vocabulary};

/// Full run configuration. The defaults are the reference operating point:
/// Adam at 1e-4 halved every 5 epochs, 50 epochs, batch 32, 8 heads,
/// 512-wide feed-forward, 2048-channel features and embeddings, encoder
/// depth 3 and decoder depth 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Attention projection width; must equal `c`.
    pub c_t: usize,
    pub d_emb: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Token budget per caption, START and END included.
    pub max_len: usize,
    /// Minimum corpus frequency for a word to enter the vocabulary.
    pub min_freq: usize,
    pub pos_emb: bool,
    pub dsa: bool,
    pub jsa: bool,
    pub cos_mask: bool,
    pub res_block: bool,
    pub seed: u64,
    /// Stop once the epoch mean loss drops below this, when set.
    pub early_stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_decay: 0.5,
            decay_every: 5,
            epochs: 50,
            batch_size: 32,
            h: 8,
            w: 8,
            c: 2048,
            c_t: 2048,
            d_emb: 2048,
            ffn_dim: 512,
            heads: 8,
            encoder_depth: 3,
            decoder_depth: 1,
            max_len: 41,
            min_freq: 1,
            pos_emb: true,
            dsa: true,
            jsa: true,
            cos_mask: true,
            res_block: true,
            seed: 0,
            early_stop_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_t != self.c {
            return Err(Error::Config(format!(
                "projection width c_t ({}) must equal c ({})",
                self.c_t, self.c
            )));
        }
        if self.lr0 <= 0.0 || !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::Config(
                "lr0 must be positive and lr_decay in (0, 1]".into(),
            ));
        }
        if self.decay_every == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "decay_every, epochs, and batch_size must be positive".into(),
            ));
        }
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        self.encoder_config().validate()?;
        // Decoder width checks that do not need the vocabulary size.
        self.decoder_config(vocab::UNK + 1).validate()
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            pos_emb: self.pos_emb,
            dsa: self.dsa,
            jsa: self.jsa,
            cos_mask: self.cos_mask,
            res_block: self.res_block,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            h: self.h,
            w: self.w,
            c: self.c,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            depth: self.encoder_depth,
            d_emb: self.d_emb,
            flags: self.flags(),
        }
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            d_emb: self.d_emb,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            depth: self.decoder_depth,
            vocab_size,
            max_len: self.max_len,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Step schedule: the base rate decays by `lr_decay` every `decay_every`
/// epochs.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

/// Encoder and decoder weights of one model instance.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Model {
    pub fn init(cfg: &TrainConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        Ok(Model {
            encoder: EncoderParams::init(&cfg.encoder_config(), &mut rng)?,
            decoder: DecoderParams::init(&cfg.decoder_config(vocab_size), &mut rng)?,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        out.extend(self.decoder.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_mut();
        out.extend(self.decoder.named_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor, plus the
/// shared timestep.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn for_model(model: &Model) -> Self {
        let sizes: Vec<usize> = model.named().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over aligned parameter/gradient lists.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam_step: {} params vs {} grads vs {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bias1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bias2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (slot, ((_, tensor), grad)) in params.iter_mut().zip(grads).enumerate() {
        if tensor.numel() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: tensor.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for (i, value) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            *value -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

// ── Training loop ───────────────────────────────────────────────────────

/// Everything a training run produces: the selected checkpoint plus the
/// final weights and per-epoch traces for inspection.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub final_model: Model,
    pub vocab: Vocabulary,
    pub loss_trace: Vec<f64>,
    pub val_bleu4_trace: Vec<f64>,
    pub best_epoch: usize,
}

fn check_feature_shapes(records: &[&DatasetRecord], cfg: &TrainConfig) -> Result<()> {
    for record in records {
        let dims = record.features.dims();
        if dims != (cfg.h, cfg.w, cfg.c) {
            return Err(Error::ShapeMismatch {
                op: "dataset_features",
                lhs: vec![dims.0, dims.1, dims.2],
                rhs: vec![cfg.h, cfg.w, cfg.c],
            });
        }
    }
    Ok(())
}

/// Train on the train split, score each epoch on the validation split by
/// greedy-decoded BLEU-4, and keep the best epoch (ties go to the earlier
/// one).
pub fn train(dataset: &[(DatasetRecord, Split)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_records: Vec<&DatasetRecord> = dataset
        .iter()
        .filter(|(_, s)| *s == Split::Train)
        .map(|(r, _)| r)
        .collect();
    let val_records: Vec<&DatasetRecord> = dataset
        .iter()
        .filter(|(_, s)| *s == Split::Val)
        .map(|(r, _)| r)
        .collect();
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::Config(format!(
            "need non-empty train and val splits, got {} train / {} val",
            train_records.len(),
            val_records.len()
        )));
    }
    check_feature_shapes(&train_records, cfg)?;
    check_feature_shapes(&val_records, cfg)?;

    let train_captions: Vec<Vec<String>> = train_records
        .iter()
        .flat_map(|r| r.captions.iter().cloned())
        .collect();
    let vocab = Vocabulary::build(&train_captions, cfg.min_freq)?;
    for record in train_records.iter().chain(&val_records) {
        for caption in &record.captions {
            if caption.len() + 2 > cfg.max_len {
                return Err(Error::CaptionTooLong {
                    words: caption.len(),
                    max_len: cfg.max_len,
                });
            }
        }
    }

    let enc_cfg = cfg.encoder_config();
    let dec_cfg = cfg.decoder_config(vocab.len());
    let mut model = Model::init(cfg, vocab.len())?;
    let mut adam = AdamState::for_model(&model);
    let hyper = AdamHyper::default();
    let mut rng = Rng::new(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut val_trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        // One reference caption per image per epoch.
        let sampled: Vec<TokenSequence> = train_records
            .iter()
            .map(|r| {
                let pick = rng.below(r.captions.len());
                encode_caption(&r.captions[pick], &vocab, cfg.max_len)
            })
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = model
                .named()
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let enc_ids = model.encoder.stage(&mut tape, true);
                let dec_ids = model.decoder.stage(&mut tape, true);
                let (_, loss) = decoder::forward_teacher_forced(
                    &mut tape,
                    &enc_ids,
                    &enc_cfg,
                    &dec_ids,
                    &dec_cfg,
                    &train_records[i].features,
                    &sampled[i],
                )?;
                let loss_value = tape.value(loss).data()[0];
                if !loss_value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became non-finite at epoch {epoch} on record {}",
                        train_records[i].id
                    )));
                }
                loss_sum += loss_value;
                tape.backward(loss)?;
                let ordered: Vec<_> = enc_ids
                    .ordered()
                    .into_iter()
                    .chain(dec_ids.ordered())
                    .collect();
                for (slot, id) in ordered.into_iter().enumerate() {
                    if let Some(g) = tape.grad(id) {
                        for (acc, gv) in grads[slot].iter_mut().zip(g) {
                            *acc += gv * inv;
                        }
                    }
                }
            }
            let mut params = model.named_mut();
            adam_step(&mut params, &grads, &mut adam, lr, &hyper)?;
        }
        let epoch_loss = loss_sum / train_records.len() as f64;
        loss_trace.push(epoch_loss);

        // Validation BLEU-4 with greedy decoding.
        let mut candidates = Vec::with_capacity(val_records.len());
        let mut references = Vec::with_capacity(val_records.len());
        for record in &val_records {
            let e_img = embed_image(&model, &enc_cfg, &record.features)?;
            let seq = decoder::greedy_decode(&model.decoder, &dec_cfg, &e_img)?;
            candidates.push(vocab::decode_caption(&seq.ids, &vocab).words);
            references.push(record.captions.clone());
        }
        let bleu4 = metrics::bleu_n(&candidates, &references, 4)?;
        val_trace.push(bleu4);
        if best.as_ref().is_none_or(|(b, _, _)| bleu4 > *b) {
            best = Some((bleu4, epoch, model.clone()));
        }

        if cfg.early_stop_loss.is_some_and(|stop| epoch_loss < stop) {
            break;
        }
    }

    let (best_bleu4, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: Checkpoint {
            config: cfg.clone(),
            vocab: vocab.clone(),
            epoch: best_epoch,
            best_bleu4,
            model: best_model,
        },
        final_model: model,
        vocab,
        loss_trace,
        val_bleu4_trace: val_trace,
        best_epoch,
    })
}

/// Encoder forward pass with frozen weights, yielding the image embedding.
pub fn embed_image(model: &Model, enc_cfg: &EncoderConfig, features: &FeaturePair) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc_ids = model.encoder.stage(&mut tape, false);
    let f1 = tape.constant(features.f1().clone());
    let f2 = tape.constant(features.f2().clone());
    let e_img = encoder::encode(&mut tape, &enc_ids, f1, f2, enc_cfg)?;
    Ok(tape.value(e_img).clone())
}

/// Greedy-decode every record of one split and score against its references.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &[(DatasetRecord, Split)],
    split: Split,
    with_per_image: bool,
) -> Result<EvalReport> {
    let records: Vec<&DatasetRecord> = dataset
        .iter()
        .filter(|(_, s)| *s == split)
        .map(|(r, _)| r)
        .collect();
    if records.is_empty() {
        return Err(Error::Metrics(format!("split {split:?} is empty")));
    }
    check_feature_shapes(&records, &ckpt.config)?;
    let enc_cfg = ckpt.config.encoder_config();
    let dec_cfg = ckpt.config.decoder_config(ckpt.vocab.len());
    let mut ids = Vec::with_capacity(records.len());
    let mut candidates = Vec::with_capacity(records.len());
    let mut references = Vec::with_capacity(records.len());
    for record in records {
        let e_img = embed_image(&ckpt.model, &enc_cfg, &record.features)?;
        let seq = decoder::greedy_decode(&ckpt.model.decoder, &dec_cfg, &e_img)?;
        ids.push(record.id.clone());
        candidates.push(vocab::decode_caption(&seq.ids, &ckpt.vocab).words);
        references.push(record.captions.clone());
    }
    metrics::evaluate_corpus(&ids, &candidates, &references, with_per_image)
}

/// Caption one feature pair: the decoded sentence plus, per generated token,
/// the final layer's head-averaged cross-attention over image positions.
pub fn caption_features(
    ckpt: &Checkpoint,
    features: &FeaturePair,
) -> Result<(String, Vec<Vec<f64>>)> {
    check_feature_shapes(&[&DatasetRecord {
        id: String::new(),
        features: features.clone(),
        captions: vec![],
    }], &ckpt.config)?;
    let enc_cfg = ckpt.config.encoder_config();
    let dec_cfg = ckpt.config.decoder_config(ckpt.vocab.len());
    let e_img = embed_image(&ckpt.model, &enc_cfg, features)?;
    let (seq, attention) = decoder::greedy_decode_traced(&ckpt.model.decoder, &dec_cfg, &e_img)?;
    let words = vocab::decode_caption(&seq.ids, &ckpt.vocab).words;
    Ok((words.join(" "), attention))
}
