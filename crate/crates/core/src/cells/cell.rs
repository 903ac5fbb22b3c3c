use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{add_bias, Build, VariationHead, LOGVAR_MAX, LOGVAR_MIN};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Pvgru,
}

/// Whether Gaussian variables are sampled or replaced by their means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Sample,
    Mean,
}

/// Source of the standard-normal noise consumed by a forward pass.
pub struct Sampler<'r> {
    rng: &'r mut dyn RngCore,
    mode: SampleMode,
    share_rows: bool,
}

impl<'r> Sampler<'r> {
    pub fn new(rng: &'r mut dyn RngCore, mode: SampleMode) -> Self {
        Sampler {
            rng,
            mode,
            share_rows: false,
        }
    }

    /// One noise row per draw, repeated for every batch row.
    ///
    /// Beam search uses this so that all hypotheses in a step see the same noise.
    pub fn shared_rows(mut self, share: bool) -> Self {
        self.share_rows = share;
        self
    }

    pub fn mode(&self) -> SampleMode {
        self.mode
    }

    /// A `rows × cols` standard-normal draw.
    pub fn normal(&mut self, rows: usize, cols: usize) -> Tensor {
        let drawn_rows = if self.share_rows { rows.min(1) } else { rows };
        let mut data: Vec<f64> = (0..drawn_rows * cols)
            .map(|_| StandardNormal.sample(&mut *self.rng))
            .collect();
        if self.share_rows && rows > 1 {
            let row = data.clone();
            for _ in 1..rows {
                data.extend_from_slice(&row);
            }
        }
        Tensor::new(vec![rows, cols], data).expect("sized by construction")
    }
}

/// Initial summarizing variable: `N(0, I)` when sampling, else its mean `0`.
pub fn init_summarizing(sampler: &mut Sampler, rows: usize, d_h: usize) -> Tensor {
    match sampler.mode() {
        SampleMode::Sample => sampler.normal(rows, d_h),
        SampleMode::Mean => Tensor::zeros([rows, d_h]),
    }
}

/// Reparameterized draw `μ + exp(½·logvar) ⊙ ε`, or `μ` in mean mode.
pub fn sample_gaussian(tape: &mut Tape, mu: Var, logvar: Var, sampler: &mut Sampler) -> Result<Var> {
    if tape.shape(mu) != tape.shape(logvar) {
        return Err(Error::shape("sample_gaussian", tape.shape(mu), tape.shape(logvar)));
    }
    match sampler.mode() {
        SampleMode::Mean => Ok(mu),
        SampleMode::Sample => {
            let (rows, cols) = tape.value(mu).dims2()?;
            let eps = tape.constant(sampler.normal(rows, cols));
            let lv = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
            let half = tape.scale(lv, 0.5);
            let sigma = tape.exp(half);
            let noise = tape.mul(sigma, eps)?;
            tape.add(mu, noise)
        }
    }
}

/// Weights of a GRU cell. Matrices act on row vectors: `x·W`.
#[derive(Clone, Debug)]
pub struct GruParams<T> {
    pub w_r: T,
    pub u_r: T,
    pub w_z: T,
    pub u_z: T,
    pub w_h: T,
    pub u_h: T,
    pub b_r: Option<T>,
    pub b_z: Option<T>,
    pub b_h: Option<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellDims {
    pub d_x: usize,
    pub d_h: usize,
    pub bias: bool,
    /// Hidden layers in the variation head.
    pub head_depth: usize,
}

impl<T> GruParams<T> {
    pub fn build(prefix: &str, dims: CellDims, b: &mut Build<T>) -> Result<Self> {
        let CellDims { d_x, d_h, bias, .. } = dims;
        let mut bias_row = |name: &str| -> Result<Option<T>> {
            if bias {
                Ok(Some(b(&format!("{prefix}.{name}"), &[1, d_h])?))
            } else {
                Ok(None)
            }
        };
        let b_r = bias_row("b_r")?;
        let b_z = bias_row("b_z")?;
        let b_h = bias_row("b_h")?;
        Ok(GruParams {
            w_r: b(&format!("{prefix}.w_r"), &[d_x, d_h])?,
            u_r: b(&format!("{prefix}.u_r"), &[d_h, d_h])?,
            w_z: b(&format!("{prefix}.w_z"), &[d_x, d_h])?,
            u_z: b(&format!("{prefix}.u_z"), &[d_h, d_h])?,
            w_h: b(&format!("{prefix}.w_h"), &[d_x, d_h])?,
            u_h: b(&format!("{prefix}.u_h"), &[d_h, d_h])?,
            b_r,
            b_z,
            b_h,
        })
    }
}

/// GRU weights plus the summarizing-variable paths and variation head.
#[derive(Clone, Debug)]
pub struct PvgruParams<T> {
    pub gru: GruParams<T>,
    pub v_r: T,
    pub v_z: T,
    pub v_h: T,
    pub w_g: T,
    pub u_g: T,
    pub v_g: T,
    pub b_g: Option<T>,
    pub head: VariationHead<T>,
}

impl<T> PvgruParams<T> {
    pub fn build(prefix: &str, dims: CellDims, b: &mut Build<T>) -> Result<Self> {
        let gru = GruParams::build(prefix, dims, b)?;
        let CellDims { d_x, d_h, bias, .. } = dims;
        Ok(PvgruParams {
            gru,
            v_r: b(&format!("{prefix}.v_r"), &[d_h, d_h])?,
            v_z: b(&format!("{prefix}.v_z"), &[d_h, d_h])?,
            v_h: b(&format!("{prefix}.v_h"), &[d_h, d_h])?,
            w_g: b(&format!("{prefix}.w_g"), &[d_x, d_h])?,
            u_g: b(&format!("{prefix}.u_g"), &[d_h, d_h])?,
            v_g: b(&format!("{prefix}.v_g"), &[d_h, d_h])?,
            b_g: if bias {
                Some(b(&format!("{prefix}.b_g"), &[1, d_h])?)
            } else {
                None
            },
            head: VariationHead::build(&format!("{prefix}.head"), d_h, dims.head_depth, bias, b)?,
        })
    }
}

#[derive(Clone, Debug)]
pub enum CellParams<T> {
    Gru(GruParams<T>),
    Pvgru(PvgruParams<T>),
}

impl<T> CellParams<T> {
    pub fn build(kind: CellKind, prefix: &str, dims: CellDims, b: &mut Build<T>) -> Result<Self> {
        Ok(match kind {
            CellKind::Gru => CellParams::Gru(GruParams::build(prefix, dims, b)?),
            CellKind::Pvgru => CellParams::Pvgru(PvgruParams::build(prefix, dims, b)?),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Gru(_) => CellKind::Gru,
            CellParams::Pvgru(_) => CellKind::Pvgru,
        }
    }

    pub fn gru(&self) -> &GruParams<T> {
        match self {
            CellParams::Gru(p) => p,
            CellParams::Pvgru(p) => &p.gru,
        }
    }
}

/// Per-step Gaussian statistics and gate of a PVGRU step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub mu: Var,
    pub logvar: Var,
    pub g: Var,
    /// The draw `ṽ_t`.
    pub v_tilde: Var,
}

/// Recurrent state after one step. GRU cells carry only `h`.
#[derive(Clone, Copy, Debug)]
pub struct StepState {
    pub h: Var,
    pub v: Option<Var>,
    pub stats: Option<StepStats>,
}

impl StepState {
    pub fn hidden(h: Var) -> Self {
        StepState {
            h,
            v: None,
            stats: None,
        }
    }

    pub fn with_summary(h: Var, v: Var) -> Self {
        StepState {
            h,
            v: Some(v),
            stats: None,
        }
    }
}

/// `x·W + h·U [+ v·V] [+ b]`, summed in that order.
fn gate_input(
    tape: &mut Tape,
    x: Var,
    w: Var,
    h: Var,
    u: Var,
    extra: Option<(Var, Var)>,
    bias: Option<Var>,
) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let mut pre = tape.add(xw, hu)?;
    if let Some((v, m)) = extra {
        let vv = tape.matmul(v, m)?;
        pre = tape.add(pre, vv)?;
    }
    add_bias(tape, pre, bias)
}

/// `z ⊙ h_prev + (1 − z) ⊙ h̃`.
fn interpolate(tape: &mut Tape, z: Var, keep: Var, fresh: Var) -> Result<Var> {
    let a = tape.mul(z, keep)?;
    let one_minus = tape.one_minus(z);
    let b = tape.mul(one_minus, fresh)?;
    tape.add(a, b)
}

/// One GRU step on a batch of rows `x: [B × d_x]`, `h_prev: [B × d_h]`.
pub fn gru_step(tape: &mut Tape, x: Var, h_prev: Var, p: &GruParams<Var>) -> Result<Var> {
    let r_in = gate_input(tape, x, p.w_r, h_prev, p.u_r, None, p.b_r)?;
    let r = tape.sigmoid(r_in);
    let z_in = gate_input(tape, x, p.w_z, h_prev, p.u_z, None, p.b_z)?;
    let z = tape.sigmoid(z_in);
    let rh = tape.mul(r, h_prev)?;
    let c_in = gate_input(tape, x, p.w_h, rh, p.u_h, None, p.b_h)?;
    let candidate = tape.tanh(c_in);
    interpolate(tape, z, h_prev, candidate)
}

/// One PVGRU step.
///
/// Gates see the previous summarizing variable; the new hidden state's
/// increment drives the variation head, whose draw is blended into the
/// summarizing variable through the same gate `g` that scales it inside
/// the candidate state.
pub fn pvgru_step(
    tape: &mut Tape,
    x: Var,
    prev: &StepState,
    p: &PvgruParams<Var>,
    sampler: &mut Sampler,
) -> Result<StepState> {
    let h_prev = prev.h;
    let v_prev = prev
        .v
        .ok_or_else(|| Error::Invalid("pvgru step needs a summarizing variable".into()))?;
    let q = &p.gru;
    let r_in = gate_input(tape, x, q.w_r, h_prev, q.u_r, Some((v_prev, p.v_r)), q.b_r)?;
    let r = tape.sigmoid(r_in);
    let z_in = gate_input(tape, x, q.w_z, h_prev, q.u_z, Some((v_prev, p.v_z)), q.b_z)?;
    let z = tape.sigmoid(z_in);
    let g_in = gate_input(tape, x, p.w_g, h_prev, p.u_g, Some((v_prev, p.v_g)), p.b_g)?;
    let g = tape.sigmoid(g_in);
    let rh = tape.mul(r, h_prev)?;
    let gv = tape.mul(g, v_prev)?;
    let c_in = gate_input(tape, x, q.w_h, rh, q.u_h, Some((gv, p.v_h)), q.b_h)?;
    let candidate = tape.tanh(c_in);
    let h = interpolate(tape, z, h_prev, candidate)?;

    let increment = tape.sub(h, h_prev)?;
    let (mu, logvar) = p.head.forward(tape, increment)?;
    let v_tilde = sample_gaussian(tape, mu, logvar, sampler)?;
    let v = interpolate(tape, g, v_tilde, v_prev)?;
    Ok(StepState {
        h,
        v: Some(v),
        stats: Some(StepStats {
            mu,
            logvar,
            g,
            v_tilde,
        }),
    })
}

/// Dispatches to [`gru_step`] or [`pvgru_step`].
pub fn cell_step(
    tape: &mut Tape,
    x: Var,
    prev: &StepState,
    p: &CellParams<Var>,
    sampler: &mut Sampler,
) -> Result<StepState> {
    match p {
        CellParams::Gru(q) => Ok(StepState::hidden(gru_step(tape, x, prev.h, q)?)),
        CellParams::Pvgru(q) => pvgru_step(tape, x, prev, q, sampler),
    }
}

/// Zero hidden state plus, for PVGRU, an initial summarizing variable.
pub fn initial_state(tape: &mut Tape, kind: CellKind, rows: usize, d_h: usize, sampler: &mut Sampler) -> StepState {
    let h = tape.constant(Tensor::zeros([rows, d_h]));
    match kind {
        CellKind::Gru => StepState::hidden(h),
        CellKind::Pvgru => {
            let v0 = init_summarizing(sampler, rows, d_h);
            let v = tape.constant(v0);
            StepState::with_summary(h, v)
        }
    }
}
