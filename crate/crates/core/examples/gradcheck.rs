//! Reverse-mode gradients against central differences, first on a small
//! hand-written function and then on every model combination.
//!
//!     cargo run --release --example gradcheck

use anyhow::Result;
use pvgru::autodiff::{finite_difference_check, GradCheck, ParamStore, Tensor};
use pvgru::harness::{gradcheck_suite, GradcheckDims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamStore::new();
    params.insert("w", Tensor::randn([3, 4], 1.0, &mut rng))?;
    params.insert("b", Tensor::randn([1, 4], 1.0, &mut rng))?;
    let x = Tensor::randn([2, 3], 1.0, &mut rng);

    // sum(tanh(x W + b)^2)
    let report = finite_difference_check(&params, GradCheck::default(), |tape, binder| {
        let w = binder.bind(tape, "w")?;
        let b = binder.bind(tape, "b")?;
        let x = tape.constant(x.clone());
        let xw = tape.matmul(x, w)?;
        let b = tape.broadcast_rows(b, 2)?;
        let z = tape.add(xw, b)?;
        let a = tape.tanh(z);
        let sq = tape.square(a);
        Ok(tape.sum(sq))
    })?;
    println!(
        "tanh layer: {} elements, max relative error {:.2e}",
        report.elements_checked, report.max_rel_error
    );

    for (name, r) in gradcheck_suite(GradcheckDims::default(), 0)? {
        println!(
            "{name:<14} {} elements  max relative error {:.2e}  {}",
            r.elements_checked,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
