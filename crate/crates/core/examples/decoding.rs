//! Trains a small PVHD briefly, then decodes the same contexts greedily and
//! with growing beams, in mean mode and with sampled summary variables.
//!
//!     cargo run --release --example decoding

use anyhow::Result;
use pvgru::cells::SampleMode;
use pvgru::corpus::load_corpus;
use pvgru::decoding::{SearchConfig, Strategy};
use pvgru::harness::{respond, DecodeOptions, ExperimentConfig, Preset, Trainer};

fn main() -> Result<()> {
    let corpus = load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/memorize.jsonl"))?;
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.model.d_embed = 32;
    cfg.model.d_hidden = 32;
    cfg.train.max_epochs = 40;
    let mut trainer = Trainer::new(&cfg, &corpus)?;
    trainer.run(&corpus, None, |_, _| Ok(()))?;

    let context = ["do you want to get lunch ?"];
    let strategies = [Strategy::Greedy, Strategy::Beam(1), Strategy::Beam(3), Strategy::Beam(8)];
    for mode in [SampleMode::Mean, SampleMode::Sample] {
        for strategy in strategies {
            let opts = DecodeOptions {
                strategy,
                search: SearchConfig {
                    max_len: 15,
                    ..SearchConfig::default()
                },
                mode,
                seed: 3,
            };
            let reply = respond(&trainer.model, &trainer.vocab, &context, &opts)?;
            println!("{mode:?} {strategy:?}: {reply}");
        }
    }
    Ok(())
}
