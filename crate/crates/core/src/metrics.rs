//! Automatic response-quality metrics and paired bootstrap significance.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, Tape};
use crate::cells::{SampleMode, Sampler};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::LossWeights;

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

/// A generated response and its reference, as surface tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new<S: AsRef<str>>(hypothesis: &[S], reference: &[S]) -> Self {
        let own = |xs: &[S]| xs.iter().map(|s| s.as_ref().to_string()).collect();
        EvalPair {
            hypothesis: own(hypothesis),
            reference: own(reference),
        }
    }

    /// Splits both sides on whitespace.
    pub fn from_text(hypothesis: &str, reference: &str) -> Self {
        let split = |s: &str| s.split_whitespace().map(String::from).collect();
        EvalPair {
            hypothesis: split(hypothesis),
            reference: split(reference),
        }
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU up to order `n`: clipped n-gram precisions (add-one smoothed
/// for orders ≥ 2), geometric mean, brevity penalty.
pub fn bleu_n(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(1..=4).contains(&n) {
        return Err(Error::Invalid(format!("BLEU order must be 1..=4, got {n}")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        hyp_len += p.hypothesis.len();
        ref_len += p.reference.len();
        for k in 1..=n {
            let h = ngrams(&p.hypothesis, k);
            let r = ngrams(&p.reference, k);
            total[k - 1] += h.values().sum::<usize>();
            matched[k - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if k == 0 {
            matched[0] as f64 / total[0] as f64
        } else {
            (matched[k] as f64 + 1.0) / (total[k] as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F-measure of one pair.
pub fn rouge_l_pair(p: &EvalPair) -> Result<f64> {
    if p.reference.is_empty() {
        return Err(Error::Invalid("ROUGE-L needs a nonempty reference".into()));
    }
    if p.hypothesis.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(&p.hypothesis, &p.reference) as f64;
    let r = lcs / p.reference.len() as f64;
    let prec = lcs / p.hypothesis.len() as f64;
    if r == 0.0 && prec == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * r * prec / (r + b2 * prec))
}

/// Mean of [`rouge_l_pair`] over the corpus.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += rouge_l_pair(p)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Unique n-grams across all hypotheses divided by the total number of tokens.
pub fn distinct_n<S: AsRef<str>>(hypotheses: &[Vec<S>], n: usize) -> f64 {
    let total: usize = hypotheses.iter().map(Vec::len).sum();
    if total == 0 || n == 0 {
        return 0.0;
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    for h in hypotheses {
        if h.len() >= n {
            for w in h.windows(n) {
                seen.insert(w.iter().map(AsRef::as_ref).collect());
            }
        }
    }
    seen.len() as f64 / total as f64
}

/// `exp(total NLL / tokens)`.
pub fn perplexity_from(nll_sum: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Invalid("perplexity needs at least one target token".into()));
    }
    Ok((nll_sum / tokens as f64).exp())
}

/// Summed teacher-forced NLL and target-token count with means in place of
/// samples.
pub fn corpus_nll(model: &Model, batches: &[Batch]) -> Result<(f64, usize)> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    // mean mode draws no noise
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in batches {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&model.params);
        let bound = model.bind(&mut tape, &mut binder)?;
        let mut sampler = Sampler::new(&mut rng, SampleMode::Mean);
        let out = bound.forward_train(&mut tape, batch, &LossWeights::likelihood_only(), &mut sampler)?;
        nll += out.nll_sum;
        tokens += out.target_tokens;
    }
    Ok((nll, tokens))
}

/// Teacher-forced perplexity in mean mode.
pub fn perplexity(model: &Model, batches: &[Batch]) -> Result<f64> {
    let (nll, tokens) = corpus_nll(model, batches)?;
    perplexity_from(nll, tokens)
}

/// Unit-norm word vectors of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl WordVectors {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (w, v) in entries {
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::Dimension(format!("vector for {w:?} has dimension {}", v.len())));
            }
            table.insert(w, unit(v));
        }
        match dim {
            Some(dim) if dim > 0 => Ok(WordVectors { dim, table }),
            _ => Err(Error::Invalid("word vectors must be nonempty".into())),
        }
    }

    /// Parses lines of the form `word v1 v2 … vd`.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: origin.into(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            entries.push((word.to_string(), v));
        }
        WordVectors::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        WordVectors::parse(&text, &path.display().to_string())
    }

    /// A frozen Gaussian table over `words`, reproducible from `seed`.
    pub fn random<S: AsRef<str>>(words: &[S], dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WordVectors::new(words.iter().map(|w| {
            let v = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            (w.as_ref().to_string(), v)
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.table.get(word).map(Vec::as_slice)
    }

    fn lookup<'a, S: AsRef<str>>(&'a self, tokens: &[S]) -> Vec<&'a [f64]> {
        tokens.iter().filter_map(|t| self.get(t.as_ref())).collect()
    }
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for v in vs {
        for (a, b) in m.iter_mut().zip(*v) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|x| *x /= vs.len() as f64);
    m
}

/// Per dimension, the coordinate of largest magnitude.
fn extrema_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| vs.iter().map(|v| v[d]).fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best }))
        .collect()
}

fn greedy_match(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    a.iter()
        .map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// Embedding scores of one pair, or `None` when a side has no known word.
pub fn embedding_pair(p: &EvalPair, vectors: &WordVectors) -> Option<EmbeddingScores> {
    let h = vectors.lookup(&p.hypothesis);
    let r = vectors.lookup(&p.reference);
    if h.is_empty() || r.is_empty() {
        return None;
    }
    let d = vectors.dim();
    Some(EmbeddingScores {
        average: cosine(&mean_vector(&h, d), &mean_vector(&r, d)),
        extrema: cosine(&extrema_vector(&h, d), &extrema_vector(&r, d)),
        greedy: 0.5 * (greedy_match(&h, &r) + greedy_match(&r, &h)),
    })
}

/// Corpus means of the embedding scores plus the number of skipped pairs.
pub fn embedding_metrics(pairs: &[EvalPair], vectors: &WordVectors) -> (EmbeddingScores, usize) {
    let mut acc = EmbeddingScores::default();
    let mut used = 0usize;
    for p in pairs {
        if let Some(s) = embedding_pair(p, vectors) {
            acc.average += s.average;
            acc.extrema += s.extrema;
            acc.greedy += s.greedy;
            used += 1;
        }
    }
    if used > 0 {
        let n = used as f64;
        acc.average /= n;
        acc.extrema /= n;
        acc.greedy /= n;
    }
    (acc, pairs.len() - used)
}

/// Two-sided paired bootstrap p-value for the mean of `a − b`.
///
/// With `q` the fraction of resampled mean differences below zero (ties
/// counted half), `p = 2·min(q, 1 − q)`. Identical inputs give `p = 1`.
pub fn paired_significance(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("score lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Invalid("significance test needs at least one example".into()));
    }
    if resamples < 100 {
        return Err(Error::Invalid(format!("need at least 100 resamples, got {resamples}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&x| x == 0.0) {
        return Ok(1.0);
    }
    let n = d.len();
    // resampled sums that should cancel exactly may carry roundoff
    let tie = 1e-12 * n as f64 * d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut below = 0.0;
    for _ in 0..resamples {
        let s: f64 = (0..n).map(|_| d[rng.random_range(0..n)]).sum();
        if s < -tie {
            below += 1.0;
        } else if s <= tie {
            below += 0.5;
        }
    }
    let q = below / resamples as f64;
    Ok(2.0 * q.min(1.0 - q))
}

/// Aggregate report over a generated corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub ppl: Option<f64>,
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub embed_average: f64,
    pub embed_extrema: f64,
    pub embed_greedy: f64,
    pub embed_skipped: usize,
}

/// Sentence-level scores used for paired significance tests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub embedding: Option<EmbeddingScores>,
}

impl MetricReport {
    /// Every metric except perplexity, which needs the model.
    pub fn compute(pairs: &[EvalPair], vectors: &WordVectors) -> Result<(Self, Vec<ExampleScores>)> {
        let hyps: Vec<Vec<String>> = pairs.iter().map(|p| p.hypothesis.clone()).collect();
        let (emb, skipped) = embedding_metrics(pairs, vectors);
        let report = MetricReport {
            examples: pairs.len(),
            ppl: None,
            bleu1: bleu_n(pairs, 1)?,
            bleu2: bleu_n(pairs, 2)?,
            rouge_l: rouge_l(pairs)?,
            dist1: distinct_n(&hyps, 1),
            dist2: distinct_n(&hyps, 2),
            embed_average: emb.average,
            embed_extrema: emb.extrema,
            embed_greedy: emb.greedy,
            embed_skipped: skipped,
        };
        let mut per = Vec::with_capacity(pairs.len());
        for p in pairs {
            let one = std::slice::from_ref(p);
            let h = std::slice::from_ref(&p.hypothesis);
            per.push(ExampleScores {
                bleu1: bleu_n(one, 1)?,
                bleu2: bleu_n(one, 2)?,
                rouge_l: rouge_l_pair(p)?,
                dist1: distinct_n(h, 1),
                dist2: distinct_n(h, 2),
                embedding: embedding_pair(p, vectors),
            });
        }
        Ok((report, per))
    }

    /// One `key=value` line per metric.
    pub fn to_key_value(&self) -> String {
        let mut lines = vec![format!("examples={}", self.examples)];
        if let Some(ppl) = self.ppl {
            lines.push(format!("ppl={ppl:.6}"));
        }
        for (k, v) in [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("rouge_l", self.rouge_l),
            ("dist1", self.dist1),
            ("dist2", self.dist2),
            ("embed_average", self.embed_average),
            ("embed_extrema", self.embed_extrema),
            ("embed_greedy", self.embed_greedy),
        ] {
            lines.push(format!("{k}={v:.6}"));
        }
        lines.push(format!("embed_skipped={}", self.embed_skipped));
        lines.join("\n") + "\n"
    }
}
