//! Training interrupted by a checkpoint round trip ends bit-identical to an
//! uninterrupted run; the trained model's summarizing variables are then
//! written as tab-separated rows.
//!
//!     cargo run --release --example resume

use anyhow::Result;
use pvgru::cells::SampleMode;
use pvgru::corpus::load_corpus;
use pvgru::harness::{export_variables, Checkpoint, ExperimentConfig, Preset, Trainer};

fn main() -> Result<()> {
    let corpus = load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/memorize.jsonl"))?;
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.model.d_embed = 16;
    cfg.model.d_hidden = 16;
    cfg.train.max_epochs = 6;

    let mut straight = Trainer::new(&cfg, &corpus)?;
    straight.run(&corpus, None, |_, _| Ok(()))?;

    let mut first = Trainer::new(&cfg, &corpus)?;
    first.config.max_epochs = 3;
    first.run(&corpus, None, |_, _| Ok(()))?;
    let bytes = first.checkpoint().to_bytes()?;
    println!("checkpoint after epoch 3: {} bytes", bytes.len());
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes)?)?;
    resumed.config.max_epochs = 6;
    resumed.run(&corpus, None, |log, _| {
        println!("resumed epoch {} total {:.6}", log.epoch, log.loss_total);
        Ok(())
    })?;
    println!(
        "identical to the uninterrupted run: {}",
        straight.checkpoint().to_bytes()? == resumed.checkpoint().to_bytes()?
    );

    let mut out = Vec::new();
    let rows = export_variables(&resumed.model, &resumed.vocab, &corpus[..2], SampleMode::Mean, 0, &mut out)?;
    let text = String::from_utf8(out)?;
    println!("{rows} rows exported, first:");
    println!("{}", text.lines().next().unwrap_or_default().chars().take(160).collect::<String>());
    Ok(())
}
