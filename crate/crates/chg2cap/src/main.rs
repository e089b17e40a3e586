//! Command-line front end: synthetic data generation, vocabulary building,
//! training, evaluation, captioning, and gradient checking as subcommands.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chg2cap::data::{
    gen_synthetic, load_dataset, load_manifest, write_feature_file, write_manifest,
    load_feature_file, ManifestEntry, Split, SyntheticConfig,
};
use chg2cap::decoder::DecoderConfig;
use chg2cap::encoder::{AblationFlags, EncoderConfig};
use chg2cap::error::{Error, Result};
use chg2cap::rng::Rng;
use chg2cap::tensor::{grad_check, Tensor};
use chg2cap::train::{caption_features, evaluate, train, Checkpoint, TrainConfig};
use chg2cap::vocab::{tokenize, Vocabulary};

const USAGE: &str = "usage: chg2cap <subcommand> [flags]

subcommands:
  gen-synthetic --seed N --count N --out DIR [--h N --w N --c N]
  build-vocab   --manifest FILE --min-freq N --out FILE
  train         --manifest FILE --config FILE --out-ckpt FILE
  evaluate      --ckpt FILE --manifest FILE --split train|val|test --json-out FILE
  caption       --ckpt FILE --features FILE [--attn FILE]
  gradcheck     [--module tensor|encoder|decoder|composed]";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(err) = run(&args) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        return Err(Error::Config(USAGE.into()));
    };
    let flags = parse_flags(&args[1..])?;
    match command.as_str() {
        "gen-synthetic" => cmd_gen_synthetic(&flags),
        "build-vocab" => cmd_build_vocab(&flags),
        "train" => cmd_train(&flags),
        "evaluate" => cmd_evaluate(&flags),
        "caption" => cmd_caption(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        other => Err(Error::Config(format!(
            "unknown subcommand {other:?}\n{USAGE}"
        ))),
    }
}

fn parse_flags(args: &[String]) -> Result<HashMap<String, String>> {
    let mut flags = HashMap::new();
    let mut iter = args.iter();
    while let Some(key) = iter.next() {
        let Some(name) = key.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --flag, got {key:?}\n{USAGE}")));
        };
        let Some(value) = iter.next() else {
            return Err(Error::Config(format!("flag --{name} needs a value")));
        };
        flags.insert(name.to_string(), value.clone());
    }
    Ok(flags)
}

fn required<'a>(flags: &'a HashMap<String, String>, name: &str) -> Result<&'a str> {
    flags
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("missing required flag --{name}\n{USAGE}")))
}

fn parse_num<T: std::str::FromStr>(value: &str, name: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("flag --{name}: cannot parse {value:?}")))
}

fn cmd_gen_synthetic(flags: &HashMap<String, String>) -> Result<()> {
    let seed: u64 = parse_num(required(flags, "seed")?, "seed")?;
    let count: usize = parse_num(required(flags, "count")?, "count")?;
    let out = PathBuf::from(required(flags, "out")?);
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let cfg = SyntheticConfig {
        h: flags.get("h").map_or(Ok(4), |v| parse_num(v, "h"))?,
        w: flags.get("w").map_or(Ok(4), |v| parse_num(v, "w"))?,
        c: flags.get("c").map_or(Ok(16), |v| parse_num(v, "c"))?,
    };
    let records_dir = out.join("records");
    std::fs::create_dir_all(&records_dir).map_err(|e| Error::Io {
        path: records_dir.display().to_string(),
        message: e.to_string(),
    })?;

    let mut entries = Vec::with_capacity(count);
    for (i, record) in gen_synthetic(seed, count, &cfg).into_iter().enumerate() {
        let file = format!("records/{}.cgft", record.id);
        write_feature_file(&out.join(&file), &record.features)?;
        // Deterministic splits: every 8th record goes to val then test.
        let split = match i % 8 {
            6 => Split::Val,
            7 => Split::Test,
            _ => Split::Train,
        };
        entries.push(ManifestEntry {
            id: record.id,
            feature_file: file,
            captions: record.captions.iter().map(|c| c.join(" ")).collect(),
            split,
        });
    }
    let manifest = out.join("manifest.json");
    write_manifest(&manifest, &entries)?;
    println!(
        "wrote {count} records ({}x{}x{}) and {}",
        cfg.h,
        cfg.w,
        cfg.c,
        manifest.display()
    );
    Ok(())
}

fn cmd_build_vocab(flags: &HashMap<String, String>) -> Result<()> {
    let manifest = PathBuf::from(required(flags, "manifest")?);
    let min_freq: usize = parse_num(required(flags, "min-freq")?, "min-freq")?;
    let out = PathBuf::from(required(flags, "out")?);
    let entries = load_manifest(&manifest)?;
    let captions: Vec<Vec<String>> = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .flat_map(|e| e.captions.iter().map(|c| tokenize(c)))
        .collect();
    let vocab = Vocabulary::build(&captions, min_freq)?;
    vocab.save(&out)?;
    println!("vocabulary of {} tokens written to {}", vocab.len(), out.display());
    Ok(())
}

fn cmd_train(flags: &HashMap<String, String>) -> Result<()> {
    let manifest = PathBuf::from(required(flags, "manifest")?);
    let config = TrainConfig::load(Path::new(required(flags, "config")?))?;
    let out_ckpt = PathBuf::from(required(flags, "out-ckpt")?);
    let dataset = load_dataset(&manifest)?;
    let outcome = train(&dataset, &config)?;
    for (epoch, (loss, bleu4)) in outcome
        .loss_trace
        .iter()
        .zip(&outcome.val_bleu4_trace)
        .enumerate()
    {
        println!("epoch {epoch:3}  loss {loss:.6}  val BLEU-4 {bleu4:.4}");
    }
    outcome.best.save(&out_ckpt)?;
    println!(
        "best epoch {} (val BLEU-4 {:.4}) saved to {}",
        outcome.best_epoch,
        outcome.best.best_bleu4,
        out_ckpt.display()
    );
    Ok(())
}

fn split_from_str(value: &str) -> Result<Split> {
    match value {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "--split must be train, val, or test, got {other:?}"
        ))),
    }
}

fn cmd_evaluate(flags: &HashMap<String, String>) -> Result<()> {
    let ckpt = Checkpoint::load(Path::new(required(flags, "ckpt")?))?;
    let dataset = load_dataset(Path::new(required(flags, "manifest")?))?;
    let split = split_from_str(required(flags, "split")?)?;
    let json_out = PathBuf::from(required(flags, "json-out")?);
    let n_images = dataset.iter().filter(|(_, s)| *s == split).count();
    if n_images == 1 {
        eprintln!("warning: single-image corpus, CIDEr-D idf is degenerate");
    }
    let report = evaluate(&ckpt, &dataset, split, true)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Parse(format!("report serialization: {e}")))?;
    std::fs::write(&json_out, &json).map_err(|e| Error::Io {
        path: json_out.display().to_string(),
        message: e.to_string(),
    })?;
    println!(
        "BLEU-1..4 {:.4} {:.4} {:.4} {:.4}  ROUGE-L {:.4}  CIDEr-D {:.4}  METEOR-x {:.4}",
        report.bleu[0],
        report.bleu[1],
        report.bleu[2],
        report.bleu[3],
        report.rouge_l,
        report.cider_d,
        report.meteor_x
    );
    println!("report written to {}", json_out.display());
    Ok(())
}

fn cmd_caption(flags: &HashMap<String, String>) -> Result<()> {
    let ckpt = Checkpoint::load(Path::new(required(flags, "ckpt")?))?;
    let features = load_feature_file(Path::new(required(flags, "features")?))?;
    let (sentence, attention) = caption_features(&ckpt, &features)?;
    println!("{sentence}");
    if let Some(attn_path) = flags.get("attn") {
        let words: Vec<String> = sentence.split_whitespace().map(str::to_string).collect();
        let mut tokens: Vec<String> = words.iter().take(attention.len()).cloned().collect();
        while tokens.len() < attention.len() {
            tokens.push("<end>".to_string());
        }
        let payload = serde_json::json!({
            "caption": sentence,
            "tokens": tokens,
            "weights": attention,
        });
        let text = serde_json::to_string_pretty(&payload)
            .map_err(|e| Error::Parse(format!("attention serialization: {e}")))?;
        std::fs::write(attn_path, text).map_err(|e| Error::Io {
            path: attn_path.clone(),
            message: e.to_string(),
        })?;
        println!("attention weights written to {attn_path}");
    }
    Ok(())
}

fn cmd_gradcheck(flags: &HashMap<String, String>) -> Result<()> {
    let module = flags.get("module").map(String::as_str).unwrap_or("all");
    let known = ["all", "tensor", "encoder", "decoder", "composed"];
    if !known.contains(&module) {
        return Err(Error::Config(format!(
            "--module must be one of {known:?}, got {module:?}"
        )));
    }
    let tolerance = 1e-4;
    let mut rng = Rng::new(17);
    let mut worst: (String, f64) = (String::new(), 0.0);
    let check = |name: &str, err: f64, worst: &mut (String, f64)| {
        println!("  {name:<28} max rel err {err:.3e}");
        if err > worst.1 {
            *worst = (name.to_string(), err);
        }
    };

    let rand = |shape: Vec<usize>, rng: &mut Rng| {
        let numel = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| rng.normal()).collect()).unwrap()
    };

    if module == "all" || module == "tensor" {
        println!("tensor ops:");
        let x = rand(vec![3, 4], &mut rng);
        let b = rand(vec![4, 2], &mut rng);
        let b2 = b.clone();
        check(
            "matmul",
            grad_check(
                move |t, id| {
                    let c = t.constant(b2.clone());
                    let y = t.matmul(id, c)?;
                    let s = t.mul(y, y)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-5,
            )?,
            &mut worst,
        );
        check(
            "softmax_rows",
            grad_check(
                |t, id| {
                    let y = t.softmax_rows(id)?;
                    let s = t.mul(y, y)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-5,
            )?,
            &mut worst,
        );
        let gain = rand(vec![4], &mut rng);
        let bias = rand(vec![4], &mut rng);
        check(
            "layer_norm",
            grad_check(
                move |t, id| {
                    let g = t.constant(gain.clone());
                    let b = t.constant(bias.clone());
                    let y = t.layer_norm(id, g, b)?;
                    let s = t.mul(y, y)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-5,
            )?,
            &mut worst,
        );
        let img = rand(vec![3, 3, 2], &mut rng);
        let kernel = rand(vec![3, 3, 2, 2], &mut rng);
        check(
            "conv2d",
            grad_check(
                move |t, id| {
                    let k = t.constant(kernel.clone());
                    let y = t.conv2d(id, k, 1)?;
                    let flat = t.reshape(y, &[9, 2])?;
                    let s = t.mul(flat, flat)?;
                    Ok(t.sum(s))
                },
                &img,
                1e-5,
            )?,
            &mut worst,
        );
        let other = rand(vec![3, 4], &mut rng);
        check(
            "cosine_rows",
            grad_check(
                move |t, id| {
                    let o = t.constant(other.clone());
                    let y = t.cosine_rows(id, o)?;
                    let s = t.mul(y, y)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-5,
            )?,
            &mut worst,
        );
        let logits = rand(vec![3, 5], &mut rng);
        check(
            "softmax_nll",
            grad_check(
                |t, id| {
                    let p = t.softmax_rows(id)?;
                    t.nll_loss(p, &[(0, 1), (1, 4), (2, 0)])
                },
                &logits,
                1e-5,
            )?,
            &mut worst,
        );
    }

    let enc_cfg = EncoderConfig {
        h: 2,
        w: 2,
        c: 4,
        heads: 2,
        ffn_dim: 4,
        depth: 1,
        d_emb: 6,
        flags: AblationFlags::default(),
    };
    let dec_cfg = DecoderConfig {
        d_emb: 6,
        heads: 2,
        ffn_dim: 4,
        depth: 1,
        vocab_size: 9,
        max_len: 6,
    };
    let enc = chg2cap::encoder::EncoderParams::init(&enc_cfg, &mut rng)?;
    let dec = chg2cap::decoder::DecoderParams::init(&dec_cfg, &mut rng)?;
    let pair = {
        let records = gen_synthetic(5, 1, &SyntheticConfig { h: 2, w: 2, c: 4 });
        records.into_iter().next().unwrap().features
    };

    if module == "all" || module == "encoder" {
        println!("encoder:");
        let f2 = pair.f2().clone();
        let enc2 = enc.clone();
        check(
            "encode wrt f1",
            grad_check(
                move |t, id| {
                    let ids = enc2.stage(t, false);
                    let f2c = t.constant(f2.clone());
                    let e = chg2cap::encoder::encode(t, &ids, id, f2c, &enc_cfg)?;
                    let s = t.mul(e, e)?;
                    Ok(t.sum(s))
                },
                pair.f1(),
                1e-5,
            )?,
            &mut worst,
        );
    }

    let tokens = chg2cap::vocab::TokenSequence::new(vec![1, 4, 7, 2, 0, 0]).unwrap();
    if module == "all" || module == "decoder" {
        println!("decoder:");
        let e_img = rand(vec![4, 6], &mut rng);
        let dec2 = dec.clone();
        let tokens2 = tokens.clone();
        check(
            "decoder wrt embedding",
            grad_check(
                move |t, id| {
                    let mut ids = dec2.stage(t, false);
                    ids.embedding = id;
                    let img = t.constant(e_img.clone());
                    let e_text =
                        chg2cap::decoder::embed_tokens(t, &tokens2.ids, ids.embedding)?;
                    let out = chg2cap::decoder::decoder_stack(
                        t, &ids, e_text, img, dec_cfg.heads, None,
                    )?;
                    let probs = chg2cap::decoder::project_vocab(t, out, ids.vocab_proj)?;
                    chg2cap::decoder::cross_entropy_loss(t, probs, &tokens2.ids)
                },
                &dec.embedding,
                1e-5,
            )?,
            &mut worst,
        );
    }

    if module == "all" || module == "composed" {
        println!("composed encoder+decoder loss:");
        for (name, probe) in [
            ("wrt encoder out_proj", enc.out_proj.clone()),
            ("wrt decoder vocab_proj", dec.vocab_proj.clone()),
        ] {
            let (enc3, dec3, pair3, tokens3) =
                (enc.clone(), dec.clone(), pair.clone(), tokens.clone());
            let is_encoder = name.contains("encoder");
            check(
                name,
                grad_check(
                    move |t, id| {
                        let mut enc_ids = enc3.stage(t, false);
                        let mut dec_ids = dec3.stage(t, false);
                        if is_encoder {
                            enc_ids.out_proj = id;
                        } else {
                            dec_ids.vocab_proj = id;
                        }
                        let (_, loss) = chg2cap::decoder::forward_teacher_forced(
                            t, &enc_ids, &enc_cfg, &dec_ids, &dec_cfg, &pair3, &tokens3,
                        )?;
                        Ok(loss)
                    },
                    &probe,
                    1e-5,
                )?,
                &mut worst,
            );
        }
    }

    println!("worst: {} at {:.3e} (tolerance {tolerance:.0e})", worst.0, worst.1);
    if worst.1 > tolerance {
        return Err(Error::Numeric(format!(
            "gradient check failed: {} at {:.3e} exceeds {tolerance:.0e}",
            worst.0, worst.1
        )));
    }
    println!("all gradient checks passed");
    Ok(())
}
