//! The three training terms on one random batch: closed-form KL, Huber
//! reconstruction and the per-term breakdown under each ablation.
//!
//!     cargo run --release --example losses

use anyhow::Result;
use pvgru::autodiff::{Binder, Tape};
use pvgru::cells::{CellKind, SampleMode, Sampler};
use pvgru::harness::{random_batch, tiny_config, GradcheckDims};
use pvgru::model::{Architecture, Model};
use pvgru::objectives::{kl_diag_gaussian_values, LossWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let kl = kl_diag_gaussian_values((&[0.0, 1.0], &[0.0, 0.5]), (&[0.5, 0.0], &[-0.5, 0.0]))?;
    println!("KL(N(p) || N(q)) = {kl:.6}");

    let dims = GradcheckDims {
        d: 8,
        vocab_size: 20,
        turns: 3,
        tokens: 6,
    };
    let model = Model::new(tiny_config(Architecture::Pvhd, CellKind::Pvgru, dims, 1), &mut ChaCha8Rng::seed_from_u64(0))?;
    let batch = random_batch(dims, 0)?;
    let full = LossWeights::default();
    let settings = [
        ("all terms", full),
        ("no reconstruction", LossWeights { use_reconstruction: false, ..full }),
        ("no consistency", LossWeights { use_consistency: false, ..full }),
        ("likelihood only", LossWeights::likelihood_only()),
    ];
    for (name, weights) in settings {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&model.params);
        let bound = model.bind(&mut tape, &mut binder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sampler = Sampler::new(&mut rng, SampleMode::Sample);
        let b = bound.forward_train(&mut tape, &batch, &weights, &mut sampler)?.breakdown;
        println!(
            "{name:<18} total {:9.4} = ll {:9.4} + r {:7.4} + c {:7.4}",
            b.total, b.ll, b.r, b.c
        );
    }
    Ok(())
}
