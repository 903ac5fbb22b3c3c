//! Greedy and beam-search generation.

use std::cmp::Ordering;

use rand::RngCore;

use crate::autodiff::{Binder, Tape, Var};
use crate::cells::{SampleMode, Sampler, StepState};
use crate::corpus::{Batch, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Bound, Model};

/// Search settings shared by greedy and beam decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub max_len: usize,
    pub beam: usize,
    /// Final ranking divides scores by `length^length_norm`.
    pub length_norm: f64,
    pub bos: usize,
    pub eos: usize,
    /// Draw one noise row per step for the whole beam instead of one per hypothesis.
    pub shared_noise: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_len: 50,
            beam: 5,
            length_norm: 0.0,
            bos: BOS,
            eos: EOS,
            shared_noise: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

/// A (partial) output sequence; `tokens` never includes EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Cumulative log-probability, EOS included when finished by it.
    pub score: f64,
    pub finished: bool,
    /// Whether the sequence ended with EOS rather than at `max_len`.
    pub ended: bool,
}

impl Hypothesis {
    fn length(&self) -> usize {
        (self.tokens.len() + usize::from(self.ended)).max(1)
    }

    pub fn normalized_score(&self, length_norm: f64) -> f64 {
        if length_norm == 0.0 {
            self.score
        } else {
            self.score / (self.length() as f64).powf(length_norm)
        }
    }
}

/// Row-wise log-softmax of a `[B × V]` logits tensor.
pub fn log_softmax_rows(tape: &Tape, logits: Var) -> Vec<Vec<f64>> {
    let t = tape.value(logits);
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn select_states(tape: &mut Tape, states: &[StepState], rows: &[usize]) -> Result<Vec<StepState>> {
    states
        .iter()
        .map(|s| {
            Ok(StepState {
                h: tape.gather_rows(s.h, rows)?,
                v: s.v.map(|v| tape.gather_rows(v, rows)).transpose()?,
                stats: None,
            })
        })
        .collect()
}

/// Feeds back the most probable token until EOS or `max_len` tokens.
pub fn greedy_decode(
    bound: &Bound,
    tape: &mut Tape,
    context: &StepState,
    cfg: &SearchConfig,
    sampler: &mut Sampler,
) -> Result<Vec<usize>> {
    if cfg.max_len == 0 {
        return Err(Error::Invalid("max_len must be ≥ 1".into()));
    }
    let mut states = bound.decoder_init(context);
    let mut prev = cfg.bos;
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let (logits, next) = bound.decoder_step(tape, &[prev], &states, sampler)?;
        let tok = argmax(&log_softmax_rows(tape, logits)[0]);
        if tok == cfg.eos {
            break;
        }
        out.push(tok);
        prev = tok;
        states = next;
    }
    Ok(out)
}

fn by_score_then_tokens(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}

/// Beam search over per-step log-softmax scores.
///
/// Candidates are ranked by score, ties by token sequence. EOS candidates
/// within the top `beam` ranks retire to a finished pool; the best `beam`
/// other candidates stay alive. Hypotheses still alive at `max_len` are
/// retired as they are. The search stops early once, without length
/// normalization, no live hypothesis can outscore the best finished one.
/// Returns the finished pool ranked best first.
pub fn beam_search(
    bound: &Bound,
    tape: &mut Tape,
    context: &StepState,
    cfg: &SearchConfig,
    sampler: &mut Sampler,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam == 0 {
        return Err(Error::Invalid("beam must be ≥ 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::Invalid("max_len must be ≥ 1".into()));
    }
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        ended: false,
    }];
    let mut states = bound.decoder_init(context);
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..cfg.max_len {
        let inputs: Vec<usize> = alive.iter().map(|h| h.tokens.last().copied().unwrap_or(cfg.bos)).collect();
        let (logits, next) = bound.decoder_step(tape, &inputs, &states, sampler)?;
        let lp = log_softmax_rows(tape, logits);

        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (i, h) in alive.iter().enumerate() {
            for (tok, &l) in lp[i].iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push((h.score + l, tokens, i));
            }
        }
        cands.sort_by(|a, b| by_score_then_tokens(&(a.0, a.1.clone()), &(b.0, b.1.clone())));

        let mut next_alive = Vec::new();
        let mut parents = Vec::new();
        for (rank, (score, mut tokens, parent)) in cands.into_iter().enumerate() {
            if next_alive.len() == cfg.beam {
                break;
            }
            if tokens.last() == Some(&cfg.eos) {
                if rank < cfg.beam {
                    tokens.pop();
                    finished.push(Hypothesis {
                        tokens,
                        score,
                        finished: true,
                        ended: true,
                    });
                }
                continue;
            }
            next_alive.push(Hypothesis {
                tokens,
                score,
                finished: false,
                ended: false,
            });
            parents.push(parent);
        }

        if step + 1 == cfg.max_len {
            finished.extend(next_alive.into_iter().map(|h| Hypothesis { finished: true, ..h }));
            break;
        }
        if next_alive.is_empty() {
            break;
        }
        if cfg.length_norm == 0.0 {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = next_alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_alive {
                break;
            }
        }
        states = select_states(tape, &next, &parents)?;
        alive = next_alive;
    }

    finished.sort_by(|a, b| {
        by_score_then_tokens(
            &(a.normalized_score(cfg.length_norm), a.tokens.clone()),
            &(b.normalized_score(cfg.length_norm), b.tokens.clone()),
        )
    });
    Ok(finished)
}

/// Encodes each context of `batch` and decodes a response for it.
///
/// Rows are processed in order with a single random stream, so results are
/// reproducible given the state of `rng`.
pub fn generate(
    model: &Model,
    batch: &Batch,
    strategy: Strategy,
    cfg: &SearchConfig,
    mode: SampleMode,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(batch.size());
    for r in 0..batch.size() {
        let one = batch.select(&[r]);
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&model.params);
        let bound = model.bind(&mut tape, &mut binder)?;
        let mut sampler = Sampler::new(&mut *rng, mode).shared_rows(cfg.shared_noise);
        let ctx = bound.encode_context(&mut tape, &one, &mut sampler, None)?;
        let tokens = match strategy {
            Strategy::Greedy => greedy_decode(&bound, &mut tape, &ctx.final_state, cfg, &mut sampler)?,
            Strategy::Beam(k) => {
                let cfg = SearchConfig { beam: k, ..*cfg };
                beam_search(&bound, &mut tape, &ctx.final_state, &cfg, &mut sampler)?
                    .into_iter()
                    .next()
                    .map(|h| h.tokens)
                    .unwrap_or_default()
            }
        };
        out.push(tokens);
    }
    Ok(out)
}
