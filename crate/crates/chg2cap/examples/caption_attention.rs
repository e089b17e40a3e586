//! Overfit a tiny model, caption one scene, and show where the decoder's
//! cross-attention looks while emitting each word.
//!
//!     cargo run --release --example caption_attention

use chg2cap::data::{gen_synthetic, DatasetRecord, Split, SyntheticConfig};
use chg2cap::train::{train, Checkpoint, TrainConfig};

fn main() -> Result<(), chg2cap::Error> {
    let cfg = TrainConfig {
        lr0: 3e-3,
        lr_decay: 1.0,
        decay_every: 1000,
        epochs: 300,
        batch_size: 32,
        h: 4,
        w: 4,
        c: 16,
        c_t: 16,
        d_emb: 32,
        ffn_dim: 64,
        heads: 4,
        encoder_depth: 3,
        decoder_depth: 1,
        max_len: 12,
        min_freq: 1,
        seed: 11,
        early_stop_loss: Some(0.01),
        ..TrainConfig::default()
    };
    let dataset: Vec<(DatasetRecord, Split)> =
        gen_synthetic(11, 8, &SyntheticConfig { h: 4, w: 4, c: 16 })
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.captions.truncate(1);
                (r, if i == 7 { Split::Val } else { Split::Train })
            })
            .collect();

    let outcome = train(&dataset, &cfg)?;
    let ckpt = Checkpoint {
        config: cfg,
        vocab: outcome.vocab.clone(),
        epoch: outcome.loss_trace.len() - 1,
        best_bleu4: *outcome.val_bleu4_trace.last().unwrap(),
        model: outcome.final_model,
    };

    let record = &dataset[0].0;
    let (sentence, attention) = chg2cap::train::caption_features(&ckpt, &record.features)?;
    println!("{}:", record.id);
    println!("  caption: \"{sentence}\"");
    println!("  target:  \"{}\"", record.captions[0].join(" "));
    println!("  cross-attention over the 4x4 grid per generated token:");
    let words: Vec<&str> = sentence.split_whitespace().collect();
    for (step, row) in attention.iter().enumerate() {
        let label = words.get(step).copied().unwrap_or("<end>");
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, v)| (i / 4, i % 4, v))
            .unwrap();
        println!(
            "    {label:<10} peak at cell ({}, {}) with weight {:.3}",
            peak.0, peak.1, peak.2
        );
    }
    Ok(())
}
