//! Unrolls one PVGRU cell over a random sequence. Sample mode gives a
//! different trajectory for every noise seed while mean mode is fixed; with
//! the summary weights zeroed the cell follows a plain GRU exactly.
//!
//!     cargo run --release --example cells

use anyhow::Result;
use pvgru::autodiff::{Binder, ParamStore, Tape, Tensor, Var};
use pvgru::cells::{
    binding, initial_state, initializer, unroll, CellDims, CellKind, CellParams, SampleMode, Sampler, SeqMask,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 6;

fn trajectory(kind: CellKind, store: &ParamStore, dims: CellDims, xs: &[Tensor], mode: SampleMode, noise: u64) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(store);
    let p = CellParams::build(kind, "cell", dims, &mut binding(&mut tape, &mut binder))?;
    let inputs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(noise);
    let mut sampler = Sampler::new(&mut rng, mode);
    let init = initial_state(&mut tape, kind, 1, dims.d_h, &mut sampler);
    let states = unroll(&mut tape, &p, &inputs, init, &SeqMask::single(STEPS, STEPS)?, &mut sampler)?;
    Ok(states.iter().map(|s| tape.value(s.h).data().to_vec()).collect())
}

fn gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn main() -> Result<()> {
    let dims = CellDims {
        d_x: 4,
        d_h: 8,
        bias: true,
        head_depth: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pv = ParamStore::new();
    CellParams::build(CellKind::Pvgru, "cell", dims, &mut initializer(&mut pv, &mut rng))?;
    let xs: Vec<Tensor> = (0..STEPS).map(|_| Tensor::randn([1, dims.d_x], 1.0, &mut rng)).collect();
    println!("pvgru parameters: {}", pv.names().collect::<Vec<_>>().join(" "));

    let a = trajectory(CellKind::Pvgru, &pv, dims, &xs, SampleMode::Sample, 1)?;
    let b = trajectory(CellKind::Pvgru, &pv, dims, &xs, SampleMode::Sample, 2)?;
    let m1 = trajectory(CellKind::Pvgru, &pv, dims, &xs, SampleMode::Mean, 1)?;
    let m2 = trajectory(CellKind::Pvgru, &pv, dims, &xs, SampleMode::Mean, 2)?;
    println!("sample mode, two noise seeds: max |h1 - h2| = {:.4}", gap(&a, &b));
    println!("mean mode, two noise seeds:   max |h1 - h2| = {:.1e}", gap(&m1, &m2));

    for name in ["cell.v_r", "cell.v_z", "cell.v_h", "cell.v_g"] {
        pv.get_mut(name)?.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut gru = ParamStore::new();
    CellParams::build(CellKind::Gru, "cell", dims, &mut initializer(&mut gru, &mut rng))?;
    let shared: Vec<String> = gru.names().map(str::to_string).collect();
    for name in shared {
        *gru.get_mut(&name)? = pv.get(&name)?.clone();
    }
    let p = trajectory(CellKind::Pvgru, &pv, dims, &xs, SampleMode::Sample, 3)?;
    let g = trajectory(CellKind::Gru, &gru, dims, &xs, SampleMode::Sample, 3)?;
    println!("zeroed summary weights vs gru: max |h_pv - h_gru| = {:.1e}", gap(&p, &g));
    Ok(())
}
