//! Overfit a toy model on a handful of synthetic records until it reproduces
//! its training captions, then decode them back.
//!
//!     cargo run --release --example train_overfit

use chg2cap::data::{gen_synthetic, DatasetRecord, Split, SyntheticConfig};
use chg2cap::train::{evaluate, train, TrainConfig};

fn main() -> Result<(), chg2cap::Error> {
    let cfg = TrainConfig {
        lr0: 3e-3,
        lr_decay: 1.0,
        decay_every: 1000,
        epochs: 500,
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
        seed: 7,
        early_stop_loss: Some(0.01),
        ..TrainConfig::default()
    };

    // Eight records; one fixed reference caption per record so the model has
    // a single target to memorize. Six train, one val, one test.
    let records = gen_synthetic(7, 8, &SyntheticConfig { h: 4, w: 4, c: 16 });
    let dataset: Vec<(DatasetRecord, Split)> = records
        .into_iter()
        .enumerate()
        .map(|(i, mut record)| {
            record.captions.truncate(1);
            let split = match i {
                6 => Split::Val,
                7 => Split::Test,
                _ => Split::Train,
            };
            (record, split)
        })
        .collect();

    let start = std::time::Instant::now();
    let outcome = train(&dataset, &cfg)?;
    let epochs_ran = outcome.loss_trace.len();
    println!(
        "trained {epochs_ran} epochs in {:.1}s, final loss {:.6}",
        start.elapsed().as_secs_f64(),
        outcome.loss_trace.last().unwrap()
    );
    for (i, loss) in outcome.loss_trace.iter().enumerate() {
        if i % 25 == 0 || i + 1 == epochs_ran {
            println!("  epoch {i:3}  loss {loss:.6}  val BLEU-4 {:.3}", outcome.val_bleu4_trace[i]);
        }
    }

    // Decode the training records with the final weights.
    let final_ckpt = chg2cap::train::Checkpoint {
        config: cfg.clone(),
        vocab: outcome.vocab.clone(),
        epoch: epochs_ran - 1,
        best_bleu4: *outcome.val_bleu4_trace.last().unwrap(),
        model: outcome.final_model.clone(),
    };
    for (record, split) in &dataset {
        if *split != Split::Train {
            continue;
        }
        let (sentence, _) = chg2cap::train::caption_features(&final_ckpt, &record.features)?;
        let target = record.captions[0].join(" ");
        let mark = if sentence == target { "==" } else { "!=" };
        println!("  {}: \"{sentence}\" {mark} \"{target}\"", record.id);
    }
    let report = evaluate(&final_ckpt, &dataset, Split::Train, false)?;
    println!(
        "train split: BLEU-4 {:.4}, ROUGE-L {:.4}, CIDEr-D {:.4}, METEOR-x {:.4}",
        report.bleu[3], report.rouge_l, report.cider_d, report.meteor_x
    );
    Ok(())
}
