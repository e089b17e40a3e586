//! Run the attentive encoder on a bitemporal pair and look at the cosine
//! mask: unchanged scenes sit at 1.0 everywhere, changed cells drop.
//!
//!     cargo run --release --example encode_features

use chg2cap::data::{gen_synthetic_labeled, ChangeType, SyntheticConfig};
use chg2cap::encoder::{encode_with_mask, AblationFlags, EncoderConfig, EncoderParams};
use chg2cap::rng::Rng;
use chg2cap::tensor::Tape;

fn main() -> Result<(), chg2cap::Error> {
    let cfg = EncoderConfig {
        h: 4,
        w: 4,
        c: 16,
        heads: 4,
        ffn_dim: 64,
        depth: 3,
        d_emb: 32,
        flags: AblationFlags::default(),
    };
    let mut rng = Rng::new(1);
    let params = EncoderParams::init(&cfg, &mut rng)?;
    println!("encoder parameters: {}", params.param_count());

    let labeled = gen_synthetic_labeled(13, 16, &SyntheticConfig { h: 4, w: 4, c: 16 });
    let changed = labeled
        .iter()
        .find(|l| l.change != ChangeType::NoChange)
        .expect("a changed record");
    let unchanged = labeled
        .iter()
        .find(|l| l.change == ChangeType::NoChange)
        .expect("an unchanged record");

    for l in [unchanged, changed] {
        let mut tape = Tape::new();
        let f1 = tape.constant(l.record.features.f1().clone());
        let f2 = tape.constant(l.record.features.f2().clone());
        let ids = params.stage(&mut tape, false);
        let (e_img, mask) = encode_with_mask(&mut tape, &ids, f1, f2, &cfg)?;
        let mask = tape.value(mask.expect("cosine mask enabled")).data();
        let min = mask.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        println!(
            "{}: E_img {:?}, mask mean {mean:.4}, min {min:.4}",
            l.record.id,
            tape.value(e_img).shape()
        );
        // The mask as a 4x4 grid, row by row.
        for row in mask.chunks(4) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:+.2}")).collect();
            println!("    {}", cells.join(" "));
        }
    }
    Ok(())
}
