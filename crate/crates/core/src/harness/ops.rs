use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, Binder, GradCheck, GradCheckReport, Tape};
use crate::cells::{CellKind, SampleMode, Sampler};
use crate::corpus::{batchify, detokenize, truncate, Batch, Dialogue, Vocab};
use crate::decoding::{generate, SearchConfig, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{paired_significance, perplexity, EvalPair, ExampleScores, MetricReport, WordVectors};
use crate::model::{Architecture, Bound, Model, ModelConfig};
use crate::objectives::LossWeights;

/// Dimension of the generated word-vector table used when none is supplied.
pub const RANDOM_VECTOR_DIM: usize = 50;

/// Fails unless `vocab` is the table `model` was trained with.
pub fn check_vocab(model: &Model, vocab: &Vocab) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Invalid(format!(
            "vocabulary mismatch: checkpoint expects {} tokens, vocabulary has {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub search: SearchConfig,
    pub mode: SampleMode,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            strategy: Strategy::Beam(5),
            search: SearchConfig::default(),
            mode: SampleMode::Mean,
            seed: 0,
        }
    }
}

/// Decodes one response per dialogue; returns surface tokens.
pub fn decode_corpus(model: &Model, vocab: &Vocab, corpus: &[Dialogue], opts: &DecodeOptions) -> Result<Vec<Vec<String>>> {
    check_vocab(model, vocab)?;
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(corpus.len());
    for batch in batchify(corpus, vocab, 16, 0, false, c.max_turns, c.max_tokens)? {
        for ids in generate(model, &batch, opts.strategy, &opts.search, opts.mode, &mut rng)? {
            out.push(vocab.decode(&ids));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutput {
    pub id: usize,
    pub context: Vec<String>,
    pub reference: String,
    pub hypothesis: String,
    pub scores: ExampleScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub examples: Vec<ExampleOutput>,
}

/// Generates for every dialogue and scores the result, perplexity included.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    corpus: &[Dialogue],
    vectors: Option<&WordVectors>,
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_vocab(model, vocab)?;
    let owned;
    let vectors = match vectors {
        Some(v) => v,
        None => {
            owned = WordVectors::random(vocab.tokens(), RANDOM_VECTOR_DIM, 0)?;
            &owned
        }
    };
    let c = &model.config;
    let hyps = decode_corpus(model, vocab, corpus, opts)?;
    let truncated: Vec<Dialogue> = corpus.iter().map(|d| truncate(d, c.max_turns, c.max_tokens)).collect();
    let pairs: Vec<EvalPair> = truncated
        .iter()
        .zip(&hyps)
        .map(|(d, h)| EvalPair {
            hypothesis: h.clone(),
            reference: d.response.clone(),
        })
        .collect();
    let (mut metrics, per) = MetricReport::compute(&pairs, vectors)?;
    let batches = batchify(corpus, vocab, 16, 0, false, c.max_turns, c.max_tokens)?;
    metrics.ppl = Some(perplexity(model, &batches)?);
    let examples = truncated
        .iter()
        .zip(hyps)
        .zip(per)
        .enumerate()
        .map(|(id, ((d, h), scores))| ExampleOutput {
            id,
            context: d.context.iter().map(|u| detokenize(u)).collect(),
            reference: detokenize(&d.response),
            hypothesis: detokenize(&h),
            scores,
        })
        .collect();
    Ok(EvalReport { metrics, examples })
}

/// Paired bootstrap p-value per metric for two reports over the same corpus.
pub fn compare(a: &EvalReport, b: &EvalReport, resamples: usize, seed: u64) -> Result<BTreeMap<String, f64>> {
    if a.examples.len() != b.examples.len() {
        return Err(Error::Invalid("reports cover different numbers of examples".into()));
    }
    let mut out = BTreeMap::new();
    let column = |r: &EvalReport, f: fn(&ExampleScores) -> f64| -> Vec<f64> { r.examples.iter().map(|e| f(&e.scores)).collect() };
    let scalar: [(&str, fn(&ExampleScores) -> f64); 5] = [
        ("bleu1", |s| s.bleu1),
        ("bleu2", |s| s.bleu2),
        ("rouge_l", |s| s.rouge_l),
        ("dist1", |s| s.dist1),
        ("dist2", |s| s.dist2),
    ];
    for (name, f) in scalar {
        out.insert(name.to_string(), paired_significance(&column(a, f), &column(b, f), resamples, seed)?);
    }
    let both: Vec<_> = a
        .examples
        .iter()
        .zip(&b.examples)
        .filter_map(|(x, y)| Some((x.scores.embedding?, y.scores.embedding?)))
        .collect();
    if !both.is_empty() {
        let emb: [(&str, fn(&crate::metrics::EmbeddingScores) -> f64); 3] =
            [("embed_average", |s| s.average), ("embed_extrema", |s| s.extrema), ("embed_greedy", |s| s.greedy)];
        for (name, f) in emb {
            let xa: Vec<f64> = both.iter().map(|(x, _)| f(x)).collect();
            let xb: Vec<f64> = both.iter().map(|(_, y)| f(y)).collect();
            out.insert(name.to_string(), paired_significance(&xa, &xb, resamples, seed)?);
        }
    }
    Ok(out)
}

/// Responds to one context given as a list of utterance strings.
pub fn respond<S: AsRef<str>>(model: &Model, vocab: &Vocab, context: &[S], opts: &DecodeOptions) -> Result<String> {
    let d = Dialogue::from_text(context, "")?;
    let out = decode_corpus(model, vocab, std::slice::from_ref(&d), opts)?;
    Ok(detokenize(&out[0]))
}

/// Writes word-level and utterance-level summarizing variables as
/// `level<TAB>dialogue<TAB>step<TAB>v_0 … v_{d-1}` rows. Returns the row count.
pub fn export_variables(
    model: &Model,
    vocab: &Vocab,
    corpus: &[Dialogue],
    mode: SampleMode,
    seed: u64,
    out: &mut dyn Write,
) -> Result<usize> {
    check_vocab(model, vocab)?;
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = 0;
    let io = |e| Error::io("<export>", e);
    for batch in batchify(corpus, vocab, 16, 0, false, c.max_turns, c.max_tokens)? {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&model.params);
        let bound = model.bind(&mut tape, &mut binder)?;
        let mut sampler = Sampler::new(&mut rng, mode);
        let trace = bound.summary_trace(&mut tape, &batch, &mut sampler)?;
        for (level, entries) in [("word", &trace.word), ("utterance", &trace.utterance)] {
            for (r, step, v) in entries {
                let values: Vec<String> = v.iter().map(f64::to_string).collect();
                writeln!(out, "{level}\t{}\t{step}\t{}", batch.ids[*r], values.join("\t")).map_err(io)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

/// Dimensions of the models exercised by [`gradcheck_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradcheckDims {
    pub d: usize,
    pub vocab_size: usize,
    pub turns: usize,
    pub tokens: usize,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        GradcheckDims {
            d: 3,
            vocab_size: 9,
            turns: 2,
            tokens: 3,
        }
    }
}

/// A model configuration of the given size.
pub fn tiny_config(arch: Architecture, cell: CellKind, dims: GradcheckDims, layers: usize) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        cell,
        d_embed: dims.d,
        d_hidden: dims.d,
        encoder_layers: layers,
        decoder_layers: 1,
        vocab_size: dims.vocab_size,
        max_turns: dims.turns,
        max_tokens: dims.tokens,
        ..ModelConfig::default()
    }
}

/// A batch of one dialogue with `turns` full utterances and a full response,
/// filled with content ids drawn from `seed`.
pub fn random_batch(dims: GradcheckDims, seed: u64) -> Result<Batch> {
    use rand::Rng;
    let content: Vec<String> = (0..dims.vocab_size.saturating_sub(5)).map(|i| format!("w{i}")).collect();
    if content.is_empty() {
        return Err(Error::Invalid("vocabulary leaves no content tokens".into()));
    }
    let vocab = Vocab::from_tokens(content.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utt = |n: usize| -> Vec<String> { (0..n).map(|_| content[rng.random_range(0..content.len())].clone()).collect() };
    let d = Dialogue {
        context: (0..dims.turns).map(|_| utt(dims.tokens)).collect(),
        response: utt(dims.tokens),
    };
    Batch::new(&[&d], &[0], &vocab, dims.turns, dims.tokens)
}

/// Finite-difference check of the full training loss of `model` on `batch`,
/// replaying the same noise on every evaluation.
pub fn gradcheck_model(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    noise_seed: u64,
    cfg: GradCheck,
) -> Result<GradCheckReport> {
    finite_difference_check(&model.params, cfg, |tape, binder| {
        let b = Bound::new(&model.config, tape, binder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut sampler = Sampler::new(&mut rng, SampleMode::Sample);
        Ok(b.forward_train(tape, batch, weights, &mut sampler)?.loss)
    })
}

/// Checks a small model of every architecture and cell combination.
pub fn gradcheck_suite(dims: GradcheckDims, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let combos = [
        (Architecture::Seq2seq, CellKind::Gru),
        (Architecture::Seq2seq, CellKind::Pvgru),
        (Architecture::Hred, CellKind::Gru),
        (Architecture::Pvhd, CellKind::Pvgru),
    ];
    let batch = random_batch(dims, seed)?;
    let mut out = Vec::new();
    for (arch, cell) in combos {
        let cfg = tiny_config(arch, cell, dims, 2);
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let report = gradcheck_model(&model, &batch, &LossWeights::default(), seed.wrapping_add(1), GradCheck::default())?;
        let name = |v: serde_json::Value| v.as_str().unwrap_or("?").to_string();
        let label = format!("{}/{}", name(serde_json::to_value(arch)?), name(serde_json::to_value(cell)?));
        out.push((label, report));
    }
    Ok(out)
}
