//! Score candidate captions against references with BLEU-1..4, ROUGE-L,
//! CIDEr-D, and METEOR-x, and print the JSON report the evaluate command
//! emits.
//!
//!     cargo run --release --example evaluate_metrics

use chg2cap::metrics::evaluate_corpus;
use chg2cap::vocab::tokenize;

fn main() -> Result<(), chg2cap::Error> {
    let data = [
        (
            "scene-0",
            "many houses are built in the north",
            vec![
                "many houses are built in the north",
                "new houses appear in the north",
                "houses are built in the north area",
            ],
        ),
        (
            "scene-1",
            "a road is built in the east",
            vec![
                "a new road appears in the east",
                "a road is built across the east",
            ],
        ),
        (
            "scene-2",
            "the scene is unchanged",
            vec!["there is no change", "the scene looks the same"],
        ),
    ];

    let ids: Vec<String> = data.iter().map(|(id, _, _)| id.to_string()).collect();
    let candidates: Vec<Vec<String>> = data.iter().map(|(_, c, _)| tokenize(c)).collect();
    let references: Vec<Vec<Vec<String>>> = data
        .iter()
        .map(|(_, _, refs)| refs.iter().map(|r| tokenize(r)).collect())
        .collect();

    let report = evaluate_corpus(&ids, &candidates, &references, true)?;
    println!(
        "BLEU-1..4 {:.4} {:.4} {:.4} {:.4}",
        report.bleu[0], report.bleu[1], report.bleu[2], report.bleu[3]
    );
    println!("ROUGE-L   {:.4}", report.rouge_l);
    println!("CIDEr-D   {:.4}", report.cider_d);
    println!("METEOR-x  {:.4}", report.meteor_x);
    println!();
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}
