//! Trains the desk-sized PVHD model until it memorizes a 16-dialogue corpus,
//! then decodes the training contexts greedily.
//!
//!     cargo run --example memorize [corpus.jsonl]

use std::time::Instant;

use anyhow::Result;
use pvgru::cells::SampleMode;
use pvgru::corpus::{detokenize, load_corpus};
use pvgru::decoding::{SearchConfig, Strategy};
use pvgru::harness::{decode_corpus, DecodeOptions, ExperimentConfig, Preset, Trainer};
use pvgru::metrics::{bleu_n, EvalPair};

fn main() -> Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/memorize.jsonl").into());
    let corpus = load_corpus(&path)?;
    let cfg = ExperimentConfig::preset(Preset::Desk);
    let mut trainer = Trainer::new(&cfg, &corpus)?;
    println!("{} dialogues, vocabulary {}", corpus.len(), trainer.vocab.len());

    let opts = DecodeOptions {
        strategy: Strategy::Greedy,
        search: SearchConfig {
            max_len: cfg.model.max_tokens + 1,
            ..SearchConfig::default()
        },
        mode: SampleMode::Mean,
        seed: 0,
    };
    let greedy_bleu = |trainer: &Trainer| -> Result<(f64, Vec<Vec<String>>)> {
        let hyps = decode_corpus(&trainer.model, &trainer.vocab, &corpus, &opts)?;
        let pairs: Vec<EvalPair> = corpus
            .iter()
            .zip(&hyps)
            .map(|(d, h)| EvalPair::new(h, &d.response))
            .collect();
        Ok((bleu_n(&pairs, 1)?, hyps))
    };

    let start = Instant::now();
    let (mut ppl, mut bleu) = (f64::INFINITY, 0.0);
    while trainer.epoch < cfg.train.max_epochs {
        let log = trainer.train_epoch(&corpus)?;
        if log.epoch % 10 == 0 {
            ppl = trainer.perplexity(&corpus)?;
            bleu = greedy_bleu(&trainer)?.0;
            println!(
                "epoch {:>3}  ll {:8.4}  r {:8.4}  c {:8.4}  ppl(mean) {:.4}  bleu-1 {:.4}  {:.0?}",
                log.epoch,
                log.loss_ll,
                log.loss_r,
                log.loss_c,
                ppl,
                bleu,
                start.elapsed()
            );
            if ppl <= 1.5 && bleu == 1.0 {
                break;
            }
        }
    }

    let (_, hyps) = greedy_bleu(&trainer)?;
    for (d, h) in corpus.iter().zip(&hyps).take(4) {
        println!("{}  ->  {}", detokenize(d.context.last().unwrap()), detokenize(h));
    }
    println!("epoch {}, ppl {ppl:.4}, greedy BLEU-1 {bleu:.4}", trainer.epoch);
    Ok(())
}
