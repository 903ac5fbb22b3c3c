//! Consistency, reconstruction, and likelihood objectives and their sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Tape, Tensor, Var};
use crate::cells::{Build, InputDistHead, ReconstructionHead, StepState};
use crate::error::{Error, Result};

/// Per-term switches for the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub use_reconstruction: bool,
    pub use_consistency: bool,
    /// Huber threshold of the reconstruction loss.
    pub delta: f64,
    /// Apply the auxiliary terms to the word-level encoder cells.
    pub aux_encoder: bool,
    /// ... to the utterance-level context cell.
    pub aux_context: bool,
    /// ... to the decoder cell.
    pub aux_decoder: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            use_reconstruction: true,
            use_consistency: true,
            delta: 1.0,
            aux_encoder: true,
            aux_context: true,
            aux_decoder: true,
        }
    }
}

impl LossWeights {
    /// Only the likelihood term.
    pub fn likelihood_only() -> Self {
        LossWeights {
            use_reconstruction: false,
            use_consistency: false,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(vec![format!("delta must be > 0, got {}", self.delta)]));
        }
        Ok(())
    }

    pub fn any_aux(&self) -> bool {
        self.use_reconstruction || self.use_consistency
    }
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians given as `(μ, logvar)`.
pub fn kl_diag_gaussian_values(p: (&[f64], &[f64]), q: (&[f64], &[f64])) -> Result<f64> {
    let (m1, l1) = p;
    let (m2, l2) = q;
    let n = m1.len();
    if l1.len() != n || m2.len() != n || l2.len() != n {
        return Err(Error::Dimension("kl_diag_gaussian: parameter lengths differ".into()));
    }
    Ok((0..n)
        .map(|i| {
            0.5 * (l2[i] - l1[i]) + (l1[i].exp() + (m1[i] - m2[i]).powi(2)) / (2.0 * l2[i].exp()) - 0.5
        })
        .sum())
}

/// Per-row `KL(p ‖ q)`, summed over columns: `[B × d] → [B]`.
pub fn kl_diag_gaussian_rows(tape: &mut Tape, p: (Var, Var), q: (Var, Var)) -> Result<Var> {
    let (m1, l1) = p;
    let (m2, l2) = q;
    for v in [l1, m2, l2] {
        if tape.shape(v) != tape.shape(m1) {
            return Err(Error::shape("kl_diag_gaussian", tape.shape(m1), tape.shape(v)));
        }
    }
    // 0.5·(l2 − l1) + 0.5·(e^{l1} + (m1 − m2)²)·e^{−l2} − 0.5
    let dl = tape.sub(l2, l1)?;
    let log_term = tape.scale(dl, 0.5);
    let var1 = tape.exp(l1);
    let dm = tape.sub(m1, m2)?;
    let dm2 = tape.square(dm);
    let num = tape.add(var1, dm2)?;
    let neg_l2 = tape.neg(l2);
    let inv_var2 = tape.exp(neg_l2);
    let ratio = tape.mul(num, inv_var2)?;
    let ratio = tape.scale(ratio, 0.5);
    let sum = tape.add(log_term, ratio)?;
    let kl = tape.add_scalar(sum, -0.5);
    if tape.value(kl).rank() == 2 {
        tape.reduce(Reduction::Sum, kl, Some(1))
    } else {
        Ok(tape.sum(kl))
    }
}

/// Scalar `KL(p ‖ q)` summed over all elements.
pub fn kl_diag_gaussian(tape: &mut Tape, p: (Var, Var), q: (Var, Var)) -> Result<Var> {
    let rows = kl_diag_gaussian_rows(tape, p, q)?;
    Ok(tape.sum(rows))
}

/// Auxiliary heads owned by one PVGRU instance.
#[derive(Clone, Debug)]
pub struct AuxHeads<T> {
    pub input_dist: InputDistHead<T>,
    pub reconstruction: ReconstructionHead<T>,
}

impl<T> AuxHeads<T> {
    pub fn build(prefix: &str, d_x: usize, d_h: usize, depth: usize, bias: bool, b: &mut Build<T>) -> Result<Self> {
        Ok(AuxHeads {
            input_dist: InputDistHead::build(&format!("{prefix}.psi"), d_x, d_h, depth, bias, b)?,
            reconstruction: ReconstructionHead::build(&format!("{prefix}.recon"), d_h, depth, bias, b)?,
        })
    }
}

/// Per-row consistency loss `KL(ψ(x_t) ‖ N(μ_t, exp(logvar_t)))`: `[B]`.
pub fn consistency_rows(tape: &mut Tape, x: Var, mu: Var, logvar: Var, psi: &InputDistHead<Var>) -> Result<Var> {
    let (mx, lx) = psi.forward(tape, x)?;
    kl_diag_gaussian_rows(tape, (mx, lx), (mu, logvar))
}

/// Scalar consistency loss summed over rows.
pub fn consistency_loss(tape: &mut Tape, x: Var, mu: Var, logvar: Var, psi: &InputDistHead<Var>) -> Result<Var> {
    let rows = consistency_rows(tape, x, mu, logvar, psi)?;
    Ok(tape.sum(rows))
}

/// Per-row Huber reconstruction loss on `f(v_t) − h_t`: `[B]`.
pub fn reconstruction_rows(
    tape: &mut Tape,
    v: Var,
    h: Var,
    f: &ReconstructionHead<Var>,
    delta: f64,
) -> Result<Var> {
    if delta <= 0.0 {
        return Err(Error::Invalid(format!("delta must be positive, got {delta}")));
    }
    let recon = f.forward(tape, v)?;
    let e = tape.sub(recon, h)?;
    let hub = tape.huber(e, delta)?;
    tape.reduce(Reduction::Sum, hub, Some(1))
}

pub fn reconstruction_loss(
    tape: &mut Tape,
    v: Var,
    h: Var,
    f: &ReconstructionHead<Var>,
    delta: f64,
) -> Result<Var> {
    let rows = reconstruction_rows(tape, v, h, f, delta)?;
    Ok(tape.sum(rows))
}

/// Masked token-level negative log-likelihood, summed over valid rows.
pub fn nll_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, targets, mask)
}

/// `Σ_b mask_b · rows_b` as a scalar.
pub fn masked_sum(tape: &mut Tape, rows: Var, mask: &[f64]) -> Result<Var> {
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(tape.sum(rows));
    }
    let m = tape.constant(Tensor::new(tape.shape(rows).to_vec(), mask.to_vec())?);
    let kept = tape.mul(rows, m)?;
    Ok(tape.sum(kept))
}

/// The enabled auxiliary losses of one PVGRU step, masked by row.
pub fn step_aux_losses(
    tape: &mut Tape,
    x: Var,
    state: &StepState,
    heads: &AuxHeads<Var>,
    weights: &LossWeights,
    mask: &[f64],
) -> Result<(Option<Var>, Option<Var>)> {
    let (Some(stats), Some(v)) = (state.stats, state.v) else {
        return Ok((None, None));
    };
    let r = if weights.use_reconstruction {
        let rows = reconstruction_rows(tape, v, state.h, &heads.reconstruction, weights.delta)?;
        Some(masked_sum(tape, rows, mask)?)
    } else {
        None
    };
    let c = if weights.use_consistency {
        let rows = consistency_rows(tape, x, stats.mu, stats.logvar, &heads.input_dist)?;
        Some(masked_sum(tape, rows, mask)?)
    } else {
        None
    };
    Ok((r, c))
}

/// Per-step loss scalars collected over every cell instance of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct StepTerms {
    pub ll: Vec<Var>,
    pub r: Vec<Var>,
    pub c: Vec<Var>,
}

/// Batch-averaged loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ll: f64,
    pub r: f64,
    pub c: f64,
}

/// `Σ_t` of each enabled term, divided by the batch size, then added.
///
/// Disabled terms contribute exactly zero and are reported as zero.
pub fn total_loss_values(ll: &[f64], r: &[f64], c: &[f64], weights: &LossWeights, batch_size: usize) -> LossBreakdown {
    let inv_b = 1.0 / batch_size.max(1) as f64;
    let sum = |xs: &[f64]| xs.iter().fold(0.0, |acc, x| acc + x) * inv_b;
    let ll = sum(ll);
    let r = if weights.use_reconstruction { sum(r) } else { 0.0 };
    let c = if weights.use_consistency { sum(c) } else { 0.0 };
    let mut total = ll;
    if weights.use_reconstruction {
        total += r;
    }
    if weights.use_consistency {
        total += c;
    }
    LossBreakdown { total, ll, r, c }
}

/// Tape version of [`total_loss_values`] with the same summation order.
/// Scalar nodes of the batch objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossVars {
    pub total: Var,
    pub ll: Var,
    /// `ℓ_r + ℓ_c` over the enabled terms, if any.
    pub aux: Option<Var>,
}

pub fn total_loss(
    tape: &mut Tape,
    terms: &StepTerms,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<(LossVars, LossBreakdown)> {
    let b = batch_size.max(1) as f64;
    let mut sum = |xs: &[Var]| -> Result<Var> {
        let mut acc = tape.constant(Tensor::scalar(0.0));
        for &x in xs {
            acc = tape.add(acc, x)?;
        }
        Ok(tape.scale(acc, 1.0 / b))
    };
    let ll = sum(&terms.ll)?;
    let r = if weights.use_reconstruction { Some(sum(&terms.r)?) } else { None };
    let c = if weights.use_consistency { Some(sum(&terms.c)?) } else { None };
    let mut total = ll;
    if let Some(r) = r {
        total = tape.add(total, r)?;
    }
    if let Some(c) = c {
        total = tape.add(total, c)?;
    }
    let aux = match (r, c) {
        (Some(r), Some(c)) => Some(tape.add(r, c)?),
        (r, c) => r.or(c),
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        ll: tape.value(ll).item(),
        r: r.map_or(0.0, |r| tape.value(r).item()),
        c: c.map_or(0.0, |c| tape.value(c).item()),
    };
    Ok((LossVars { total, ll, aux }, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, Binder, GradCheck, ParamStore};
    use crate::cells::{binding, initializer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn row(tape: &mut Tape, xs: &[f64]) -> Var {
        tape.constant(Tensor::row(xs))
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian_values((&[0.3], &[0.2]), (&[0.3], &[0.2])).unwrap(), 0.0);
        assert_eq!(kl_diag_gaussian_values((&[1.0], &[0.0]), (&[0.0], &[0.0])).unwrap(), 0.5);
        // N(0, e) against N(0, 1): logvar1 = 1
        let kl = kl_diag_gaussian_values((&[0.0], &[1.0]), (&[0.0], &[0.0])).unwrap();
        assert!((kl - (0.5 * (1f64.exp() - 1.0) - 0.5)).abs() < 1e-15);
        assert!((kl - 0.3591).abs() < 1e-4);

        let mut tape = Tape::new();
        let (a, b, z) = (row(&mut tape, &[1.0]), row(&mut tape, &[0.0]), row(&mut tape, &[0.0]));
        let kl = kl_diag_gaussian(&mut tape, (a, z), (b, z)).unwrap();
        assert_eq!(tape.value(kl).item(), 0.5);
        let bad = row(&mut tape, &[0.0, 0.0]);
        assert!(kl_diag_gaussian(&mut tape, (a, z), (bad, z)).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..3 {
            let draw = |rng: &mut ChaCha8Rng, s: f64| -> Vec<f64> {
                (0..4).map(|_| { let z: f64 = StandardNormal.sample(rng); s * z }).collect::<Vec<f64>>()
            };
            let (m1, l1, m2, l2) = (draw(&mut rng, 1.0), draw(&mut rng, 0.5), draw(&mut rng, 1.0), draw(&mut rng, 0.5));
            let exact = kl_diag_gaussian_values((&m1, &l1), (&m2, &l2)).unwrap();
            let mc = monte_carlo_kl(&m1, &l1, &m2, &l2, 100_000, &mut rng);
            assert!((mc - exact).abs() / exact < 0.01, "mc {mc} exact {exact}");
        }
    }

    pub(crate) fn monte_carlo_kl(m1: &[f64], l1: &[f64], m2: &[f64], l2: &[f64], n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let log_density = |x: f64, m: f64, l: f64| -0.5 * (l + (x - m).powi(2) / l.exp());
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..m1.len() {
                let eps: f64 = StandardNormal.sample(rng);
                let x = m1[i] + (0.5 * l1[i]).exp() * eps;
                acc += log_density(x, m1[i], l1[i]) - log_density(x, m2[i], l2[i]);
            }
        }
        acc / n as f64
    }

    #[test]
    fn huber_hand_values_and_knot() {
        let mut tape = Tape::new();
        for (e, expected) in [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
            let x = row(&mut tape, &[e]);
            let h = tape.huber(x, 1.0).unwrap();
            assert_eq!(tape.value(h).item(), expected);
        }
        for delta in [0.5, 1.0, 3.0] {
            for e in [delta, -delta] {
                let quad = 0.5 * e * e;
                let lin = delta * f64::abs(e) - 0.5 * delta * delta;
                assert_eq!(quad, lin);
                assert_eq!(e, delta * f64::signum(e));
            }
        }
        let x = row(&mut tape, &[1.0]);
        assert!(tape.huber(x, 0.0).is_err());
    }

    fn heads_store(d_x: usize, d_h: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AuxHeads::build("aux", d_x, d_h, 1, true, &mut initializer(&mut store, &mut rng)).unwrap();
        store
    }

    fn zero_out(store: &mut ParamStore, prefix: &str) {
        for (n, t) in store.iter_mut() {
            if n.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    #[test]
    fn reconstruction_examples() {
        let mut store = heads_store(1, 1, 0);
        zero_out(&mut store, "aux.recon");
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let heads = AuxHeads::build("aux", 1, 1, 1, true, &mut binding(&mut tape, &mut binder)).unwrap();
        // f ≡ 0, so e = −h
        let v = row(&mut tape, &[3.0]);
        for (h, expected) in [(0.0, 0.0), (-0.5, 0.125), (-2.0, 1.5)] {
            let hv = row(&mut tape, &[h]);
            let l = reconstruction_loss(&mut tape, v, hv, &heads.reconstruction, 1.0).unwrap();
            assert_eq!(tape.value(l).item(), expected);
        }
        let hv = row(&mut tape, &[0.0]);
        assert!(reconstruction_loss(&mut tape, v, hv, &heads.reconstruction, -1.0).is_err());
    }

    #[test]
    fn consistency_examples() {
        let mut store = heads_store(2, 3, 4);
        zero_out(&mut store, "aux.psi");
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let heads = AuxHeads::build("aux", 2, 3, 1, true, &mut binding(&mut tape, &mut binder)).unwrap();
        let x = row(&mut tape, &[0.7, -0.1]);
        // ψ ≡ N(0, 1)
        let zeros = row(&mut tape, &[0.0; 3]);
        let l = consistency_loss(&mut tape, x, zeros, zeros, &heads.input_dist).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let ones = row(&mut tape, &[1.0; 3]);
        let l = consistency_loss(&mut tape, x, ones, zeros, &heads.input_dist).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
    }

    #[test]
    fn nll_examples() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros([3, 4]));
        let l = nll_loss(&mut tape, logits, &[0, 1, 2], &[1.0, 1.0, 0.0]).unwrap();
        assert!((tape.value(l).item() - 2.0 * 4f64.ln()).abs() < 1e-15);
        let l = nll_loss(&mut tape, logits, &[0, 1, 2], &[0.0; 3]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss_values(&[0.0], &[0.0], &[0.0], &w, 1).total, 0.0);
        assert_eq!(total_loss_values(&[4.0, 6.0], &[], &[], &w, 2).total, 5.0);

        let (ll, r, c) = ([1.25, 0.5], [0.75, 0.125], [2.0, 0.25]);
        let on = total_loss_values(&ll, &r, &c, &w, 2);
        let off = total_loss_values(&ll, &r, &c, &LossWeights { use_reconstruction: false, ..w }, 2);
        assert_eq!(off.r, 0.0);
        assert_eq!(off.total, on.ll + on.c);
        assert_eq!(on.total, on.ll + on.r + on.c);
        assert!((on.total - on.r - off.total).abs() < 1e-15);
    }

    #[test]
    fn tape_and_value_totals_agree() {
        let mut tape = Tape::new();
        let vals = [[0.3, 1.7, 2.2], [0.01, 0.4, 0.0], [5.0, 0.25, 1.0]];
        let mut terms = StepTerms::default();
        for (i, v) in vals.iter().enumerate() {
            let vars: Vec<Var> = v.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
            match i {
                0 => terms.ll = vars,
                1 => terms.r = vars,
                _ => terms.c = vars,
            }
        }
        for w in [LossWeights::default(), LossWeights::likelihood_only()] {
            let (_, b) = total_loss(&mut tape, &terms, &w, 3).unwrap();
            assert_eq!(b, total_loss_values(&vals[0], &vals[1], &vals[2], &w, 3));
        }
    }

    #[test]
    fn aux_losses_pass_gradient_check() {
        let store = heads_store(3, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<Tensor> = (0..4).map(|_| Tensor::randn([2, 4], 1.0, &mut rng)).collect();
        let x = Tensor::randn([2, 3], 1.0, &mut rng);
        let mut all = store.clone();
        all.insert("in.mu", inputs[0].clone()).unwrap();
        all.insert("in.lv", inputs[1].clone()).unwrap();
        all.insert("in.v", Tensor::new([2, 4], inputs[2].data().iter().map(|x| 2.0 * x).collect()).unwrap()).unwrap();
        all.insert("in.h", inputs[3].clone()).unwrap();
        all.insert("in.x", x).unwrap();
        let report = finite_difference_check(&all, GradCheck::default(), |tape, binder| {
            let heads = AuxHeads::build("aux", 3, 4, 1, true, &mut binding(tape, binder))?;
            let mu = binder.bind(tape, "in.mu")?;
            let lv = binder.bind(tape, "in.lv")?;
            let v = binder.bind(tape, "in.v")?;
            let h = binder.bind(tape, "in.h")?;
            let x = binder.bind(tape, "in.x")?;
            let c = consistency_loss(tape, x, mu, lv, &heads.input_dist)?;
            let r = reconstruction_loss(tape, v, h, &heads.reconstruction, 0.7)?;
            let ll = nll_loss(tape, mu, &[1, 3], &[1.0, 1.0])?;
            let s = tape.add(c, r)?;
            tape.add(s, ll)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..12).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 * z }).collect();
            let kl = kl_diag_gaussian_values((&v[0..3], &v[3..6]), (&v[6..9], &v[9..12])).unwrap();
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let mut tape = Tape::new();
        let rows = tape.param(Tensor::new([3], vec![1.0, 2.0, 4.0]).unwrap());
        let s = masked_sum(&mut tape, rows, &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tape.value(s).item(), 5.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(rows).unwrap().data(), &[1.0, 0.0, 1.0]);
    }
}
