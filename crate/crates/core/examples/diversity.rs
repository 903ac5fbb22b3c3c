//! Trains PVHD and HRED-GRU on a one-to-many toy corpus over several seeds and
//! compares the lexical diversity of their responses.
//!
//!     cargo run --release --example diversity [epochs] [seeds]

use std::time::Instant;

use anyhow::Result;
use pvgru::cells::{CellKind, SampleMode};
use pvgru::corpus::Dialogue;
use pvgru::decoding::{SearchConfig, Strategy};
use pvgru::harness::{decode_corpus, one_to_many_corpus, DecodeOptions, ExperimentConfig, Preset, Trainer};
use pvgru::metrics::{distinct_n, paired_significance};
use pvgru::model::Architecture;

fn distinct_after_training(arch: Architecture, cell: CellKind, mode: SampleMode, epochs: usize, seed: u64, corpus: &[Dialogue]) -> Result<f64> {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.model.architecture = arch;
    cfg.model.cell = cell;
    cfg.train.max_epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.train.seed = seed;
    let mut trainer = Trainer::new(&cfg, corpus)?;
    trainer.run(corpus, None, |_, _| Ok(()))?;

    // one row per distinct context
    let mut contexts: Vec<Dialogue> = Vec::new();
    for d in corpus {
        if contexts.last().map_or(true, |c| c.context != d.context) {
            contexts.push(d.clone());
        }
    }
    let opts = DecodeOptions {
        strategy: Strategy::Greedy,
        search: SearchConfig { max_len: cfg.model.max_tokens, ..SearchConfig::default() },
        mode,
        seed,
    };
    let hyps = decode_corpus(&trainer.model, &trainer.vocab, &contexts, &opts)?;
    Ok(distinct_n(&hyps, 1))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let corpus = one_to_many_corpus(50, 4, 0)?;
    let start = Instant::now();
    let (mut pv, mut hr) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        pv.push(distinct_after_training(Architecture::Pvhd, CellKind::Pvgru, SampleMode::Sample, epochs, seed, &corpus)?);
        hr.push(distinct_after_training(Architecture::Hred, CellKind::Gru, SampleMode::Mean, epochs, seed, &corpus)?);
        println!("seed {seed}: pvhd {:.4}  hred {:.4}  {:.0?}", pv[pv.len() - 1], hr[hr.len() - 1], start.elapsed());
    }
    let p = paired_significance(&pv, &hr, 1000, 0)?;
    println!("median distinct-1: pvhd {:.4}, hred {:.4}, p = {p:.4}", median(&pv), median(&hr));
    Ok(())
}
