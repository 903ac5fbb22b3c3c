use super::cell::{cell_step, CellParams, Sampler, StepState};
use super::layers::{Build, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Right-padded validity mask for a batch of sequences, stored as lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqMask {
    lengths: Vec<usize>,
    steps: usize,
}

impl SeqMask {
    pub fn from_lengths(lengths: Vec<usize>, steps: usize) -> Result<Self> {
        if let Some(row) = lengths.iter().position(|&l| l > steps) {
            return Err(Error::Mask { row });
        }
        Ok(SeqMask { lengths, steps })
    }

    /// Builds from 0/1 rows; every row must be ones followed by zeros.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let steps = rows.first().map_or(0, |r| r.as_ref().len());
        let mut lengths = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != steps {
                return Err(Error::Mask { row: i });
            }
            let len = r.iter().take_while(|&&m| m != 0.0).count();
            if r[len..].iter().any(|&m| m != 0.0) {
                return Err(Error::Mask { row: i });
            }
            lengths.push(len);
        }
        Ok(SeqMask { lengths, steps })
    }

    /// A single row of `len` valid steps out of `steps`.
    pub fn single(len: usize, steps: usize) -> Result<Self> {
        SeqMask::from_lengths(vec![len], steps)
    }

    pub fn full(rows: usize, steps: usize) -> Self {
        SeqMask {
            lengths: vec![steps; rows],
            steps,
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn active(&self, t: usize) -> Vec<bool> {
        self.lengths.iter().map(|&l| t < l).collect()
    }

    pub fn weights(&self, t: usize) -> Vec<f64> {
        self.lengths
            .iter()
            .map(|&l| if t < l { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Runs a cell over `inputs` (one `[B × d_x]` var per step).
///
/// Rows whose mask is zero carry their previous `h` and `v` through
/// unchanged. Steps where every row is masked are skipped outright and draw
/// no noise, so trailing padding never changes a result.
pub fn unroll(
    tape: &mut Tape,
    p: &CellParams<Var>,
    inputs: &[Var],
    init: StepState,
    mask: &SeqMask,
    sampler: &mut Sampler,
) -> Result<Vec<StepState>> {
    if inputs.len() != mask.steps() {
        return Err(Error::Dimension(format!(
            "unroll: {} inputs for a mask of {} steps",
            inputs.len(),
            mask.steps()
        )));
    }
    let mut states = Vec::with_capacity(inputs.len());
    let mut prev = init;
    for (t, &x) in inputs.iter().enumerate() {
        let active = mask.active(t);
        if !active.iter().any(|&a| a) {
            let carried = StepState {
                stats: None,
                ..prev
            };
            states.push(carried);
            continue;
        }
        let mut next = cell_step(tape, x, &prev, p, sampler)?;
        if !active.iter().all(|&a| a) {
            next.h = tape.select_rows(&active, next.h, prev.h)?;
            if let (Some(nv), Some(pv)) = (next.v, prev.v) {
                next.v = Some(tape.select_rows(&active, nv, pv)?);
            }
        }
        states.push(next);
        prev = next;
    }
    Ok(states)
}

/// Final state of an unroll: the last step, or `init` when there are none.
pub fn final_state(states: &[StepState], init: StepState) -> StepState {
    states.last().copied().unwrap_or(init)
}

/// Linear maps folding `[forward; backward]` states back to `d_h`.
#[derive(Clone, Debug)]
pub struct BiProjection<T> {
    pub h: Linear<T>,
    pub v: Option<Linear<T>>,
}

impl<T> BiProjection<T> {
    /// `with_v` adds the map for summarizing variables.
    pub fn build(prefix: &str, d_h: usize, with_v: bool, bias: bool, b: &mut Build<T>) -> Result<Self> {
        Ok(BiProjection {
            h: Linear::build(&format!("{prefix}.proj_h"), 2 * d_h, d_h, bias, b)?,
            v: if with_v {
                Some(Linear::build(&format!("{prefix}.proj_v"), 2 * d_h, d_h, bias, b)?)
            } else {
                None
            },
        })
    }
}

/// Result of [`bidirectional_encode`].
#[derive(Clone, Debug)]
pub struct BiEncoding {
    /// Projected per-position outputs, aligned with the input positions.
    pub outputs: Vec<Var>,
    pub final_state: StepState,
    pub forward: Vec<StepState>,
    /// Backward-direction states in processing order (last token first).
    pub backward: Vec<StepState>,
    /// Inputs as seen by the backward direction.
    pub reversed_inputs: Vec<Var>,
}

/// Reverses each row's valid prefix: step `t` of row `b` takes position
/// `len_b − 1 − t`. Padding positions keep their own value.
fn reverse_valid(tape: &mut Tape, seq: &[Var], mask: &SeqMask) -> Result<Vec<Var>> {
    let steps = seq.len();
    if steps == 0 {
        return Ok(vec![]);
    }
    let rows = mask.rows();
    if mask.lengths().iter().all(|&l| l == steps) {
        return Ok(seq.iter().rev().copied().collect());
    }
    let stacked = tape.concat_rows(seq)?;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let ids: Vec<usize> = mask
            .lengths()
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let src = if t < len { len - 1 - t } else { t };
                src * rows + b
            })
            .collect();
        out.push(tape.gather_rows(stacked, &ids)?);
    }
    Ok(out)
}

/// Bidirectional unroll with learned projections of the concatenated states.
///
/// When `with_outputs` is false the per-position outputs are not computed.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_encode(
    tape: &mut Tape,
    inputs: &[Var],
    mask: &SeqMask,
    fwd: &CellParams<Var>,
    bwd: &CellParams<Var>,
    proj: &BiProjection<Var>,
    init_fwd: StepState,
    init_bwd: StepState,
    sampler: &mut Sampler,
    with_outputs: bool,
) -> Result<BiEncoding> {
    if fwd.kind() != bwd.kind() {
        return Err(Error::Invalid("bidirectional cells must be of one kind".into()));
    }
    let forward = unroll(tape, fwd, inputs, init_fwd, mask, sampler)?;
    let reversed_inputs = reverse_valid(tape, inputs, mask)?;
    let backward = unroll(tape, bwd, &reversed_inputs, init_bwd, mask, sampler)?;

    let mut outputs = Vec::new();
    if with_outputs && !inputs.is_empty() {
        let bwd_h: Vec<Var> = backward.iter().map(|s| s.h).collect();
        let aligned = reverse_valid(tape, &bwd_h, mask)?;
        for (f, &b) in forward.iter().zip(&aligned) {
            let cat = tape.concat_cols(f.h, b)?;
            outputs.push(proj.h.forward(tape, cat)?);
        }
    }

    let f_last = final_state(&forward, init_fwd);
    let b_last = final_state(&backward, init_bwd);
    let cat_h = tape.concat_cols(f_last.h, b_last.h)?;
    let mut h = proj.h.forward(tape, cat_h)?;
    let mut v = match (f_last.v, b_last.v, &proj.v) {
        (Some(fv), Some(bv), Some(pv)) => {
            let cat = tape.concat_cols(fv, bv)?;
            Some(pv.forward(tape, cat)?)
        }
        _ => None,
    };
    let nonempty: Vec<bool> = mask.lengths().iter().map(|&l| l > 0).collect();
    if !nonempty.iter().all(|&n| n) {
        h = tape.select_rows(&nonempty, h, init_fwd.h)?;
        if let (Some(pv), Some(iv)) = (v, init_fwd.v) {
            v = Some(tape.select_rows(&nonempty, pv, iv)?);
        }
    }
    Ok(BiEncoding {
        outputs,
        final_state: StepState { h, v, stats: None },
        forward,
        backward,
        reversed_inputs,
    })
}
