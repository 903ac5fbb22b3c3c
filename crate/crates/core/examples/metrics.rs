//! Word-overlap, diversity and embedding metrics on a few hand-made pairs,
//! and a paired bootstrap between two sets of per-example scores.
//!
//!     cargo run --release --example metrics

use anyhow::Result;
use pvgru::metrics::{
    bleu_n, distinct_n, embedding_metrics, paired_significance, rouge_l, EvalPair, WordVectors,
};

fn main() -> Result<()> {
    let pairs = [
        EvalPair::from_text("i went to the park", "i went to the park yesterday"),
        EvalPair::from_text("the music was great", "the music was loud"),
        EvalPair::from_text("no idea", "i liked the food"),
    ];
    for n in 1..=4 {
        println!("BLEU-{n} {:.4}", bleu_n(&pairs, n)?);
    }
    println!("ROUGE-L {:.4}", rouge_l(&pairs)?);

    let hyps: Vec<Vec<&str>> = vec![vec!["i", "do", "not", "know"], vec!["i", "do", "not", "know"], vec!["sounds", "fun"]];
    println!("Distinct-1 {:.4}  Distinct-2 {:.4}", distinct_n(&hyps, 1), distinct_n(&hyps, 2));

    let words: Vec<&str> = pairs
        .iter()
        .flat_map(|p| p.hypothesis.iter().chain(&p.reference))
        .map(String::as_str)
        .collect();
    let vectors = WordVectors::random(&words, 50, 0)?;
    let (e, skipped) = embedding_metrics(&pairs, &vectors);
    println!(
        "embedding average {:.4} extrema {:.4} greedy {:.4} ({skipped} pairs skipped)",
        e.average, e.extrema, e.greedy
    );

    let a = [0.61, 0.55, 0.72, 0.58, 0.66, 0.70, 0.52, 0.64];
    let b = [0.54, 0.56, 0.63, 0.50, 0.61, 0.62, 0.51, 0.60];
    println!("paired bootstrap p = {:.4}", paired_significance(&a, &b, 10_000, 0)?);
    Ok(())
}
