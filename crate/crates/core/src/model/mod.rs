//! Flat and hierarchical encoder-decoder dialogue models.
//!
//! Parameter names are hierarchical: `embed`, `enc.l{i}.{fwd,bwd}.*`,
//! `enc.l{i}.proj_{h,v}.*`, `ctx.*`, `dec.l{i}.*`, `out.{w,b}`, with the
//! auxiliary heads of each PVGRU under `<cell>.aux.{psi,recon}.*`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, ParamStore, Tape, Tensor, Var};
use crate::cells::{
    binding, bidirectional_encode, initial_state, initializer, unroll, BiProjection, Build, CellDims,
    CellKind, CellParams, Sampler, SeqMask, StepState,
};
use crate::corpus::{Batch, PAD, SEP};
use crate::error::{Error, Result};
use crate::objectives::{nll_loss, step_aux_losses, total_loss, AuxHeads, LossBreakdown, LossVars, LossWeights, StepTerms};


#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Context turns flattened into one token stream.
    Seq2seq,
    /// Word-level encoder, utterance-level context cell, decoder.
    Hred,
    /// `Hred` built from PVGRU cells throughout.
    Pvhd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub cell: CellKind,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub max_turns: usize,
    pub max_tokens: usize,
    pub tie_embeddings: bool,
    pub bias: bool,
    /// Hidden layers in each variation, input-distribution, and reconstruction head.
    pub head_depth: usize,
    /// Feed `[h; v]` of each utterance to the context cell instead of `h`.
    pub feed_encoder_v: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Pvhd,
            cell: CellKind::Pvgru,
            d_embed: 512,
            d_hidden: 512,
            encoder_layers: 2,
            decoder_layers: 1,
            vocab_size: 20_000,
            max_turns: 10,
            max_tokens: 50,
            tie_embeddings: false,
            bias: true,
            head_depth: 1,
            feed_encoder_v: false,
        }
    }
}

impl ModelConfig {
    /// Collects every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.architecture == Architecture::Pvhd && self.cell != CellKind::Pvgru {
            v.push("architecture pvhd requires cell = pvgru".to_string());
        }
        for (name, value) in [
            ("d_embed", self.d_embed),
            ("d_hidden", self.d_hidden),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_turns", self.max_turns),
            ("max_tokens", self.max_tokens),
        ] {
            if value == 0 {
                v.push(format!("{name} must be ≥ 1"));
            }
        }
        if self.vocab_size < 2 {
            v.push("vocab_size must be ≥ 2".to_string());
        }
        if self.tie_embeddings && self.d_embed != self.d_hidden {
            v.push("tie_embeddings requires d_embed = d_hidden".to_string());
        }
        if self.feed_encoder_v && (self.cell != CellKind::Pvgru || !self.hierarchical()) {
            v.push("feed_encoder_v requires a hierarchical pvgru model".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn hierarchical(&self) -> bool {
        self.architecture != Architecture::Seq2seq
    }

    fn dims(&self, d_x: usize) -> CellDims {
        CellDims {
            d_x,
            d_h: self.d_hidden,
            bias: self.bias,
            head_depth: self.head_depth,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T> {
    pub fwd: CellParams<T>,
    pub bwd: CellParams<T>,
    pub proj: BiProjection<T>,
    pub aux_fwd: Option<AuxHeads<T>>,
    pub aux_bwd: Option<AuxHeads<T>>,
}

#[derive(Clone, Debug)]
pub struct CellWithAux<T> {
    pub cell: CellParams<T>,
    pub aux: Option<AuxHeads<T>>,
}

/// Every parameter slot of a model.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub embed: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub context: Option<CellWithAux<T>>,
    pub decoder: Vec<CellWithAux<T>>,
    /// Absent when the output projection is tied to the embedding table.
    pub out_w: Option<T>,
    pub out_b: Option<T>,
}

fn cell_with_aux<T>(cfg: &ModelConfig, prefix: &str, d_x: usize, b: &mut Build<T>) -> Result<CellWithAux<T>> {
    let cell = CellParams::build(cfg.cell, prefix, cfg.dims(d_x), b)?;
    let aux = match cfg.cell {
        CellKind::Gru => None,
        CellKind::Pvgru => Some(AuxHeads::build(
            &format!("{prefix}.aux"),
            d_x,
            cfg.d_hidden,
            cfg.head_depth,
            cfg.bias,
            b,
        )?),
    };
    Ok(CellWithAux { cell, aux })
}

impl<T> ModelParams<T> {
    pub fn build(cfg: &ModelConfig, b: &mut Build<T>) -> Result<Self> {
        let d = cfg.d_hidden;
        let embed = b("embed", &[cfg.vocab_size, cfg.d_embed])?;
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let d_x = if l == 0 { cfg.d_embed } else { d };
            let prefix = format!("enc.l{l}");
            let fwd = cell_with_aux(cfg, &format!("{prefix}.fwd"), d_x, b)?;
            let bwd = cell_with_aux(cfg, &format!("{prefix}.bwd"), d_x, b)?;
            let top = l + 1 == cfg.encoder_layers;
            // the top layer's v is consumed only by a flat decoder or by feed_encoder_v
            let with_v = top && cfg.cell == CellKind::Pvgru && (!cfg.hierarchical() || cfg.feed_encoder_v);
            let proj = BiProjection::build(&prefix, d, with_v, cfg.bias, b)?;
            encoder.push(EncoderLayer {
                fwd: fwd.cell,
                bwd: bwd.cell,
                proj,
                aux_fwd: fwd.aux,
                aux_bwd: bwd.aux,
            });
        }
        let context = if cfg.hierarchical() {
            let d_x = if cfg.feed_encoder_v { 2 * d } else { d };
            Some(cell_with_aux(cfg, "ctx", d_x, b)?)
        } else {
            None
        };
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let d_x = if l == 0 { cfg.d_embed } else { d };
            decoder.push(cell_with_aux(cfg, &format!("dec.l{l}"), d_x, b)?);
        }
        let out_w = if cfg.tie_embeddings {
            None
        } else {
            Some(b("out.w", &[d, cfg.vocab_size])?)
        };
        let out_b = if cfg.bias { Some(b("out.b", &[1, cfg.vocab_size])?) } else { None };
        Ok(ModelParams {
            embed,
            encoder,
            context,
            decoder,
            out_w,
            out_b,
        })
    }
}

/// Names and shapes of every parameter `cfg` implies.
pub fn parameter_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut shapes = BTreeMap::new();
    ModelParams::build(cfg, &mut |name: &str, shape: &[usize]| {
        shapes.insert(name.to_string(), shape.to_vec());
        Ok(())
    })?;
    Ok(shapes)
}

/// A configuration together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters: `N(0, 1)` embeddings, `N(0, 1/fan_in)` matrices, zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        ModelParams::build(&config, &mut initializer(&mut params, rng))?;
        *params.get_mut("embed")? = Tensor::randn([config.vocab_size, config.d_embed], 1.0, rng);
        Ok(Model { config, params })
    }

    /// Checks that `params` holds exactly the slots `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = parameter_shapes(&config)?;
        for (name, shape) in &shapes {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", shape, t.shape()));
            }
        }
        if let Some(extra) = params.names().find(|n| !shapes.contains_key(*n)) {
            return Err(Error::Invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(Model { config, params })
    }

    /// Records every parameter on `tape` through `binder`.
    pub fn bind<'c>(&'c self, tape: &mut Tape, binder: &mut Binder) -> Result<Bound<'c>> {
        Bound::new(&self.config, tape, binder)
    }
}

/// Which kind of cell an auxiliary loss belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Encoder,
    Context,
    Decoder,
}

/// Whether a parameter belongs to the summarizing-variable machinery: the
/// PVGRU gate `g` and variation head, the auxiliary heads, and the
/// projection of bidirectional `v`.
pub fn is_summary_parameter(name: &str) -> bool {
    let mut parts = name.split('.');
    let last = name.rsplit('.').next().unwrap_or("");
    parts.any(|p| matches!(p, "aux" | "head" | "proj_v")) || matches!(last, "w_g" | "u_g" | "v_g" | "b_g")
}

/// Accumulates per-step loss terms during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Collector {
    pub weights: LossWeights,
    pub terms: StepTerms,
}

impl Collector {
    pub fn new(weights: LossWeights) -> Self {
        Collector {
            weights,
            terms: StepTerms::default(),
        }
    }

    fn enabled(&self, level: Level) -> bool {
        self.weights.any_aux()
            && match level {
                Level::Encoder => self.weights.aux_encoder,
                Level::Context => self.weights.aux_context,
                Level::Decoder => self.weights.aux_decoder,
            }
    }

    /// Adds the auxiliary losses of every PVGRU step of one unroll.
    pub fn cell(
        &mut self,
        tape: &mut Tape,
        level: Level,
        heads: Option<&AuxHeads<Var>>,
        inputs: &[Var],
        states: &[StepState],
        mask: &SeqMask,
    ) -> Result<()> {
        let Some(heads) = heads else { return Ok(()) };
        if !self.enabled(level) {
            return Ok(());
        }
        for (t, (&x, state)) in inputs.iter().zip(states).enumerate() {
            let (r, c) = step_aux_losses(tape, x, state, heads, &self.weights, &mask.weights(t))?;
            self.terms.r.extend(r);
            self.terms.c.extend(c);
        }
        Ok(())
    }
}

/// Word-level encoding of a set of utterances (one per row).
#[derive(Clone, Debug)]
pub struct UtteranceEncoding {
    /// Projected final state per row.
    pub final_state: StepState,
    /// Forward-direction states of the top layer, one per position.
    pub top_forward: Vec<StepState>,
    pub mask: SeqMask,
}

/// Utterance-level encoding of a batch of contexts.
#[derive(Clone, Debug)]
pub struct ContextEncoding {
    pub utterances: UtteranceEncoding,
    /// `(batch row, turn)` of every utterance row.
    pub rows: Vec<(usize, usize)>,
    /// Context-cell states per turn; empty for flat models.
    pub turns: Vec<StepState>,
    /// State handed to the decoder.
    pub final_state: StepState,
}

/// Result of [`Bound::forward_train`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub loss: Var,
    pub terms: LossVars,
    pub breakdown: LossBreakdown,
    /// Summed token negative log-likelihood.
    pub nll_sum: f64,
    pub target_tokens: usize,
}

/// Model parameters recorded on a tape.
pub struct Bound<'c> {
    pub config: &'c ModelConfig,
    pub p: ModelParams<Var>,
    out_w: Var,
}

impl<'c> Bound<'c> {
    pub fn new(config: &'c ModelConfig, tape: &mut Tape, binder: &mut Binder) -> Result<Self> {
        let p = ModelParams::build(config, &mut binding(tape, binder))?;
        let out_w = match p.out_w {
            Some(w) => w,
            None => tape.transpose(p.embed)?,
        };
        Ok(Bound { config, p, out_w })
    }

    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(self.p.embed, ids)
    }

    /// `[B × d_h] → [B × V]` logits.
    pub fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let y = tape.matmul(h, self.out_w)?;
        match self.p.out_b {
            None => Ok(y),
            Some(b) => {
                let rows = tape.shape(y)[0];
                let b = tape.broadcast_rows(b, rows)?;
                tape.add(y, b)
            }
        }
    }

    /// Stacked bidirectional encoding of token sequences, one row each.
    pub fn encode_utterances(
        &self,
        tape: &mut Tape,
        utterances: &[&[usize]],
        sampler: &mut Sampler,
        mut aux: Option<&mut Collector>,
    ) -> Result<UtteranceEncoding> {
        let cfg = self.config;
        let limit = if cfg.hierarchical() {
            cfg.max_tokens
        } else {
            cfg.max_turns * (cfg.max_tokens + 1)
        };
        if let Some(u) = utterances.iter().find(|u| u.len() > limit) {
            return Err(Error::Invalid(format!(
                "utterance of {} tokens exceeds the limit of {limit}; truncate first",
                u.len()
            )));
        }
        let rows = utterances.len();
        let steps = utterances.iter().map(|u| u.len()).max().unwrap_or(0);
        let mask = SeqMask::from_lengths(utterances.iter().map(|u| u.len()).collect(), steps)?;
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = utterances.iter().map(|u| u.get(t).copied().unwrap_or(PAD)).collect();
            inputs.push(self.embed(tape, &ids)?);
        }
        let layers = self.p.encoder.len();
        let mut enc = None;
        for (l, layer) in self.p.encoder.iter().enumerate() {
            let init_f = initial_state(tape, cfg.cell, rows, cfg.d_hidden, sampler);
            let init_b = initial_state(tape, cfg.cell, rows, cfg.d_hidden, sampler);
            let e = bidirectional_encode(
                tape,
                &inputs,
                &mask,
                &layer.fwd,
                &layer.bwd,
                &layer.proj,
                init_f,
                init_b,
                sampler,
                l + 1 < layers,
            )?;
            if let Some(c) = aux.as_deref_mut() {
                c.cell(tape, Level::Encoder, layer.aux_fwd.as_ref(), &inputs, &e.forward, &mask)?;
                c.cell(tape, Level::Encoder, layer.aux_bwd.as_ref(), &e.reversed_inputs, &e.backward, &mask)?;
            }
            inputs = std::mem::take(&mut enc.insert(e).outputs);
        }
        let e = enc.ok_or_else(|| Error::Invalid("model has no encoder layers".into()))?;
        Ok(UtteranceEncoding {
            final_state: e.final_state,
            top_forward: e.forward,
            mask,
        })
    }

    /// Encodes the contexts of `batch` into the decoder's initial state.
    pub fn encode_context(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        sampler: &mut Sampler,
        mut aux: Option<&mut Collector>,
    ) -> Result<ContextEncoding> {
        let cfg = self.config;
        if batch.max_turns > cfg.max_turns || batch.max_tokens > cfg.max_tokens {
            return Err(Error::Invalid(format!(
                "batch limits {}×{} exceed the model's {}×{}",
                batch.max_turns, batch.max_tokens, cfg.max_turns, cfg.max_tokens
            )));
        }
        if batch.turn_counts.contains(&0) {
            return Err(Error::Invalid("every context needs at least one turn".into()));
        }
        let b = batch.size();
        if !cfg.hierarchical() {
            let streams: Vec<Vec<usize>> = (0..b)
                .map(|r| {
                    let mut s = Vec::new();
                    for t in 0..batch.turn_counts[r] {
                        if t > 0 {
                            s.push(SEP);
                        }
                        s.extend_from_slice(batch.utterance(r, t));
                    }
                    s
                })
                .collect();
            let refs: Vec<&[usize]> = streams.iter().map(Vec::as_slice).collect();
            let utterances = self.encode_utterances(tape, &refs, sampler, aux)?;
            return Ok(ContextEncoding {
                final_state: utterances.final_state,
                rows: (0..b).map(|r| (r, 0)).collect(),
                turns: Vec::new(),
                utterances,
            });
        }

        let mut rows = Vec::new();
        let mut offsets = Vec::with_capacity(b);
        for r in 0..b {
            offsets.push(rows.len());
            rows.extend((0..batch.turn_counts[r]).map(|t| (r, t)));
        }
        let refs: Vec<&[usize]> = rows.iter().map(|&(r, t)| batch.utterance(r, t)).collect();
        let utterances = self.encode_utterances(tape, &refs, sampler, aux.as_deref_mut())?;
        let ctx = self.p.context.as_ref().expect("hierarchical models have a context cell");

        let steps = batch.turn_counts.iter().copied().max().unwrap_or(0);
        let turn_mask = SeqMask::from_lengths(batch.turn_counts.clone(), steps)?;
        let vectors = match (cfg.feed_encoder_v, utterances.final_state.v) {
            (true, Some(v)) => tape.concat_cols(utterances.final_state.h, v)?,
            _ => utterances.final_state.h,
        };
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = (0..b).map(|r| offsets[r] + t.min(batch.turn_counts[r] - 1)).collect();
            inputs.push(tape.gather_rows(vectors, &ids)?);
        }
        let init = initial_state(tape, cfg.cell, b, cfg.d_hidden, sampler);
        let turns = unroll(tape, &ctx.cell, &inputs, init, &turn_mask, sampler)?;
        if let Some(c) = aux {
            c.cell(tape, Level::Context, ctx.aux.as_ref(), &inputs, &turns, &turn_mask)?;
        }
        let final_state = turns.last().copied().unwrap_or(init);
        Ok(ContextEncoding {
            utterances,
            rows,
            turns,
            final_state,
        })
    }

    /// Initial state of every decoder layer.
    pub fn decoder_init(&self, context: &StepState) -> Vec<StepState> {
        vec![
            StepState {
                stats: None,
                ..*context
            };
            self.p.decoder.len()
        ]
    }

    /// One decoding step for a batch of rows: returns logits and the new states.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        states: &[StepState],
        sampler: &mut Sampler,
    ) -> Result<(Var, Vec<StepState>)> {
        let mut x = self.embed(tape, tokens)?;
        let mut next = Vec::with_capacity(states.len());
        for (layer, prev) in self.p.decoder.iter().zip(states) {
            let s = crate::cells::cell_step(tape, x, prev, &layer.cell, sampler)?;
            x = s.h;
            next.push(s);
        }
        Ok((self.logits(tape, x)?, next))
    }

    /// Teacher-forced decoding of the batch's responses.
    ///
    /// Returns the logits of every step and the per-step negative
    /// log-likelihood scalars (masked, summed over rows).
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        context: &StepState,
        batch: &Batch,
        sampler: &mut Sampler,
        mut aux: Option<&mut Collector>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let w = batch.max_tokens + 1;
        if batch.max_tokens > self.config.max_tokens {
            return Err(Error::Invalid("response longer than max_tokens".into()));
        }
        let b = batch.size();
        let steps = batch.response_lengths.iter().copied().max().unwrap_or(0);
        let mask = SeqMask::from_lengths(batch.response_lengths.clone(), steps)?;
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = (0..b).map(|r| batch.response_in[r * w + t]).collect();
            inputs.push(self.embed(tape, &ids)?);
        }
        for (layer, init) in self.p.decoder.iter().zip(self.decoder_init(context)) {
            let states = unroll(tape, &layer.cell, &inputs, init, &mask, sampler)?;
            if let Some(c) = aux.as_deref_mut() {
                c.cell(tape, Level::Decoder, layer.aux.as_ref(), &inputs, &states, &mask)?;
            }
            inputs = states.iter().map(|s| s.h).collect();
        }
        let mut logits = Vec::with_capacity(steps);
        let mut nll = Vec::with_capacity(steps);
        for (t, &h) in inputs.iter().enumerate() {
            let l = self.logits(tape, h)?;
            let targets: Vec<usize> = (0..b).map(|r| batch.response_out[r * w + t]).collect();
            nll.push(nll_loss(tape, l, &targets, &mask.weights(t))?);
            logits.push(l);
        }
        Ok((logits, nll))
    }

    /// Teacher-forced loss of a batch with its per-term breakdown.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        weights: &LossWeights,
        sampler: &mut Sampler,
    ) -> Result<ForwardOutput> {
        weights.validate()?;
        let mut collector = Collector::new(*weights);
        let ctx = self.encode_context(tape, batch, sampler, Some(&mut collector))?;
        let (_, nll) = self.decode_teacher_forced(tape, &ctx.final_state, batch, sampler, Some(&mut collector))?;
        let nll_sum = nll.iter().map(|&v| tape.value(v).item()).sum();
        collector.terms.ll = nll;
        let (terms, breakdown) = total_loss(tape, &collector.terms, weights, batch.size())?;
        Ok(ForwardOutput {
            loss: terms.total,
            terms,
            breakdown,
            nll_sum,
            target_tokens: batch.target_tokens(),
        })
    }
}

/// Summarizing-variable trajectories of one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SummaryTrace {
    /// `(batch row, step across the context's tokens, v)`.
    pub word: Vec<(usize, usize, Vec<f64>)>,
    /// `(batch row, turn, v)`.
    pub utterance: Vec<(usize, usize, Vec<f64>)>,
}

impl Bound<'_> {
    /// Word-level `v_t` of the top encoder layer's forward cell and the
    /// context cell's `v_t` after each turn.
    pub fn summary_trace(&self, tape: &mut Tape, batch: &Batch, sampler: &mut Sampler) -> Result<SummaryTrace> {
        if self.config.cell != CellKind::Pvgru {
            return Err(Error::Unsupported("gru cells have no summarizing variable".into()));
        }
        if !self.config.hierarchical() {
            return Err(Error::Unsupported("utterance-level variables need a hierarchical model".into()));
        }
        let ctx = self.encode_context(tape, batch, sampler, None)?;
        let row_of = |v: Var, r: usize, tape: &Tape| tape.value(v).row_slice(r).to_vec();
        let mut trace = SummaryTrace::default();
        let mut step = vec![0usize; batch.size()];
        for (i, &(r, _)) in ctx.rows.iter().enumerate() {
            for t in 0..ctx.utterances.mask.lengths()[i] {
                let v = ctx.utterances.top_forward[t].v.expect("pvgru state");
                trace.word.push((r, step[r], row_of(v, i, tape)));
                step[r] += 1;
            }
        }
        for r in 0..batch.size() {
            for t in 0..batch.turn_counts[r] {
                let v = ctx.turns[t].v.expect("pvgru state");
                trace.utterance.push((r, t, row_of(v, r, tape)));
            }
        }
        Ok(trace)
    }
}
