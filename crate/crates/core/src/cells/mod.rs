//! GRU and pseudo-variational GRU cells, their parameter layouts, and
//! sequence unrolling (uni- and bidirectional).
//!
//! Cells operate on batches of row vectors: inputs are `[B × d_x]`, states
//! `[B × d_h]`, and weight matrices are stored `[in × out]`.

mod cell;
mod layers;
mod sequence;

pub use cell::{
    cell_step, gru_step, init_summarizing, initial_state, pvgru_step, sample_gaussian, CellDims,
    CellKind, CellParams, GruParams, PvgruParams, SampleMode, Sampler, StepState, StepStats,
};
pub use layers::{
    binding, initializer, Build, InputDistHead, Linear, Mlp, ReconstructionHead, VariationHead,
    LOGVAR_MAX, LOGVAR_MIN,
};
pub use sequence::{bidirectional_encode, final_state, unroll, BiEncoding, BiProjection, SeqMask};
