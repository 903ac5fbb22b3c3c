//! Dialogue corpora: JSON-lines loading, tokenization, vocabularies, and
//! padded batches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

const PUNCT: &[char] = &['.', ',', '!', '?', '\''];

/// A context of one or more utterances and its gold response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
}

impl Dialogue {
    pub fn from_text<S: AsRef<str>>(context: &[S], response: &str) -> Result<Self> {
        let context: Vec<Vec<String>> = context
            .iter()
            .map(|u| tokenize(u.as_ref()))
            .filter(|u| !u.is_empty())
            .collect();
        if context.is_empty() {
            return Err(Error::Invalid("dialogue context has no nonempty utterance".into()));
        }
        Ok(Dialogue {
            context,
            response: tokenize(response),
        })
    }

    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.context.iter().flatten().chain(&self.response)
    }
}

/// Lowercases, splits on whitespace, and detaches `. , ! ? '` as tokens.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in s.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens with spaces, attaching `. , ! ?` to the left and `'` to both sides.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let left_attached = matches!(tok, "." | "," | "!" | "?" | "'");
        if !out.is_empty() && !left_attached && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = tok == "'";
    }
    out
}

#[derive(Deserialize)]
struct RawDialogue {
    context: Vec<String>,
    response: String,
}

/// Parses JSON-lines text; `origin` names the source in errors.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.into(),
            line: i + 1,
            msg,
        };
        let raw: RawDialogue = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let d = Dialogue::from_text(&raw.context, &raw.response).map_err(|e| parse_err(e.to_string()))?;
        out.push(d);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

/// Keeps the last `max_turns` utterances and the first `max_tokens` tokens
/// of each utterance and of the response.
pub fn truncate(d: &Dialogue, max_turns: usize, max_tokens: usize) -> Dialogue {
    let skip = d.context.len().saturating_sub(max_turns);
    let clip = |u: &Vec<String>| u.iter().take(max_tokens).cloned().collect::<Vec<_>>();
    Dialogue {
        context: d.context[skip..].iter().map(clip).collect(),
        response: clip(&d.response),
    }
}

/// Token ↔ id maps with five reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(content: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(content).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line; the line number minus one is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Invalid("vocabulary must start with the reserved tokens".into()));
        }
        Vocab::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Vocab::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Ranks tokens by frequency, then lexicographically, and keeps the top
/// `max_size − 5` that occur at least `min_count` times.
pub fn build_vocab(corpus: &[Dialogue], max_size: usize, min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in corpus {
        for t in d.tokens() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && !RESERVED.contains(&t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let keep = max_size.saturating_sub(RESERVED.len());
    Vocab::from_tokens(ranked.into_iter().take(keep).map(|(t, _)| t.to_string()))
}

/// Padded id tensors for a group of dialogues.
///
/// Every mask is right-padded, so it is stored as a length per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub max_turns: usize,
    pub max_tokens: usize,
    /// `[B × max_turns × max_tokens]`, PAD where masked.
    pub context: Vec<usize>,
    pub turn_counts: Vec<usize>,
    /// `[B × max_turns]`; zero for padded turns.
    pub token_counts: Vec<usize>,
    /// `[B × (max_tokens + 1)]`: BOS followed by the response.
    pub response_in: Vec<usize>,
    /// `[B × (max_tokens + 1)]`: the response followed by EOS.
    pub response_out: Vec<usize>,
    /// Valid decoder steps per row (response length plus one).
    pub response_lengths: Vec<usize>,
    /// Corpus index of each row.
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn new(dialogues: &[&Dialogue], ids: &[usize], vocab: &Vocab, max_turns: usize, max_tokens: usize) -> Result<Self> {
        if dialogues.is_empty() || dialogues.len() != ids.len() {
            return Err(Error::Invalid("batch needs one id per dialogue and at least one dialogue".into()));
        }
        if max_turns == 0 || max_tokens == 0 {
            return Err(Error::Invalid("max_turns and max_tokens must be positive".into()));
        }
        let b = dialogues.len();
        let width = max_tokens + 1;
        let mut batch = Batch {
            max_turns,
            max_tokens,
            context: vec![PAD; b * max_turns * max_tokens],
            turn_counts: vec![0; b],
            token_counts: vec![0; b * max_turns],
            response_in: vec![PAD; b * width],
            response_out: vec![PAD; b * width],
            response_lengths: vec![0; b],
            ids: ids.to_vec(),
        };
        for (i, d) in dialogues.iter().enumerate() {
            let d = truncate(d, max_turns, max_tokens);
            if d.context.is_empty() {
                return Err(Error::Invalid(format!("dialogue {} has an empty context", ids[i])));
            }
            batch.turn_counts[i] = d.context.len();
            for (t, utt) in d.context.iter().enumerate() {
                batch.token_counts[i * max_turns + t] = utt.len();
                let base = (i * max_turns + t) * max_tokens;
                for (k, id) in vocab.encode(utt).into_iter().enumerate() {
                    batch.context[base + k] = id;
                }
            }
            let resp = vocab.encode(&d.response);
            let row = i * width;
            batch.response_in[row] = BOS;
            for (k, &id) in resp.iter().enumerate() {
                batch.response_in[row + k + 1] = id;
                batch.response_out[row + k] = id;
            }
            batch.response_out[row + resp.len()] = EOS;
            batch.response_lengths[i] = resp.len() + 1;
        }
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.turn_counts.len()
    }

    /// Token ids of utterance `turn` of row `b`, without padding.
    pub fn utterance(&self, b: usize, turn: usize) -> &[usize] {
        let base = (b * self.max_turns + turn) * self.max_tokens;
        &self.context[base..base + self.token_counts[b * self.max_turns + turn]]
    }

    pub fn response(&self, b: usize) -> &[usize] {
        let row = b * (self.max_tokens + 1);
        &self.response_out[row..row + self.response_lengths[b] - 1]
    }

    pub fn turn_mask(&self, b: usize) -> Vec<f64> {
        (0..self.max_turns).map(|t| f64::from(u8::from(t < self.turn_counts[b]))).collect()
    }

    pub fn token_mask(&self, b: usize, turn: usize) -> Vec<f64> {
        let n = self.token_counts[b * self.max_turns + turn];
        (0..self.max_tokens).map(|k| f64::from(u8::from(k < n))).collect()
    }

    pub fn response_mask(&self, b: usize) -> Vec<f64> {
        (0..=self.max_tokens).map(|k| f64::from(u8::from(k < self.response_lengths[b]))).collect()
    }

    /// Total number of valid target tokens, EOS included.
    pub fn target_tokens(&self) -> usize {
        self.response_lengths.iter().sum()
    }

    /// A batch holding only the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let (mt, mk, w) = (self.max_turns, self.max_tokens, self.max_tokens + 1);
        let mut out = Batch {
            max_turns: mt,
            max_tokens: mk,
            context: Vec::new(),
            turn_counts: Vec::new(),
            token_counts: Vec::new(),
            response_in: Vec::new(),
            response_out: Vec::new(),
            response_lengths: Vec::new(),
            ids: Vec::new(),
        };
        for &r in rows {
            out.context.extend_from_slice(&self.context[r * mt * mk..(r + 1) * mt * mk]);
            out.turn_counts.push(self.turn_counts[r]);
            out.token_counts.extend_from_slice(&self.token_counts[r * mt..(r + 1) * mt]);
            out.response_in.extend_from_slice(&self.response_in[r * w..(r + 1) * w]);
            out.response_out.extend_from_slice(&self.response_out[r * w..(r + 1) * w]);
            out.response_lengths.push(self.response_lengths[r]);
            out.ids.push(self.ids[r]);
        }
        out
    }
}

/// Splits `corpus` into batches, shuffled under `seed` when `shuffle` is set.
/// The last batch may be smaller than `batch_size`.
pub fn batchify(
    corpus: &[Dialogue],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    max_turns: usize,
    max_tokens: usize,
) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|ids| {
            let ds: Vec<&Dialogue> = ids.iter().map(|&i| &corpus[i]).collect();
            Batch::new(&ds, ids, vocab, max_turns, max_tokens)
        })
        .collect()
}
