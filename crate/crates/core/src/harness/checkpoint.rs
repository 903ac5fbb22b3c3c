//! Single-file checkpoints.
//!
//! Layout (little-endian): the magic `PVGRU1`, a `u32` entry count, then per
//! entry a `u32` name length, the UTF-8 name, a `u8` dtype tag (0 = f32,
//! 1 = f64), a `u32` rank, `u64` dims, and the raw element data. Text and
//! integer metadata are stored as f64 entries under `meta/`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::config::TrainConfig;
use crate::autodiff::{ParamStore, Tensor};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 6] = b"PVGRU1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// One named array of the file.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            dtype: DType::F64,
            shape,
            data,
        }
    }

    fn bytes(name: &str, bytes: &[u8]) -> Self {
        Entry::f64(name, vec![bytes.len()], bytes.iter().map(|&b| f64::from(b)).collect())
    }

    fn words(name: &str, words: &[u64]) -> Self {
        Entry::f64(name, vec![words.len()], words.iter().map(|&w| w as f64).collect())
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype as u8);
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &e.data {
            match e.dtype {
                DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a PVGRU1 checkpoint".into()));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let dtype = match r.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            t => return Err(Error::Checkpoint(format!("entry `{name}` has unknown dtype tag {t}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            DType::F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        entries.push(Entry { name, dtype, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(entries)
}

/// Optimizer, schedule position and noise stream of an interrupted run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub state: Option<TrainState>,
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let mut w: Vec<u64> = rng.get_seed().iter().map(|&b| u64::from(b)).collect();
    let stream = rng.get_stream();
    let pos = rng.get_word_pos();
    w.extend([stream & 0xffff_ffff, stream >> 32]);
    w.extend((0..4).map(|i| ((pos >> (32 * i)) & 0xffff_ffff) as u64));
    w
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    if w.len() != 38 {
        return Err(Error::Checkpoint(format!("rng state has {} words, expected 38", w.len())));
    }
    let mut seed = [0u8; 32];
    for (s, &b) in seed.iter_mut().zip(&w[..32]) {
        *s = b as u8;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[32] | (w[33] << 32));
    let pos = (0..4).fold(0u128, |acc, i| acc | (u128::from(w[34 + i]) << (32 * i)));
    rng.set_word_pos(pos);
    Ok(rng)
}

fn tensors<'a>(prefix: &'a str, store: &'a ParamStore) -> impl Iterator<Item = Entry> + 'a {
    store
        .iter()
        .map(move |(n, t)| Entry::f64(format!("{prefix}{n}"), t.shape().to_vec(), t.data().to_vec()))
}

impl Checkpoint {
    pub fn to_entries(&self) -> Result<Vec<Entry>> {
        let mut e = vec![
            Entry::bytes("meta/model_config", serde_json::to_string(&self.model.config)?.as_bytes()),
            Entry::bytes("meta/vocab", self.vocab.to_text().as_bytes()),
        ];
        e.extend(tensors("param/", &self.model.params));
        if let Some(s) = &self.state {
            e.push(Entry::bytes("meta/train_config", serde_json::to_string(&s.config)?.as_bytes()));
            e.push(Entry::words("meta/epoch", &[s.epoch as u64]));
            e.push(Entry::words("meta/adam_t", &[s.adam.t]));
            e.push(Entry::words("meta/rng", &rng_words(&s.rng)));
            e.extend(tensors("adam/m/", &s.adam.m));
            e.extend(tensors("adam/v/", &s.adam.v));
        }
        Ok(e)
    }

    pub fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut meta = std::collections::BTreeMap::new();
        let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        for e in entries {
            let name = e.name;
            let tensor = Tensor::new(e.shape, e.data);
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n, tensor?)?;
            } else if let Some(n) = name.strip_prefix("adam/m/") {
                m.insert(n, tensor?)?;
            } else if let Some(n) = name.strip_prefix("adam/v/") {
                v.insert(n, tensor?)?;
            } else if let Some(n) = name.strip_prefix("meta/") {
                meta.insert(n.to_string(), tensor?.into_data());
            } else {
                return Err(Error::Checkpoint(format!("unexpected entry `{name}`")));
            }
        }
        let text = |key: &str| -> Result<String> {
            let data = meta.get(key).ok_or_else(|| Error::Checkpoint(format!("missing meta/{key}")))?;
            let bytes: Vec<u8> = data.iter().map(|&x| x as u8).collect();
            String::from_utf8(bytes).map_err(|e| Error::Checkpoint(e.to_string()))
        };
        let word = |key: &str| -> Result<u64> {
            meta.get(key)
                .and_then(|d| d.first())
                .map(|&x| x as u64)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta/{key}")))
        };
        let config: ModelConfig = serde_json::from_str(&text("model_config")?)?;
        let vocab = Vocab::from_text(&text("vocab")?)?;
        let model = Model::from_params(config, params)?;
        let state = if meta.contains_key("train_config") {
            let config: TrainConfig = serde_json::from_str(&text("train_config")?)?;
            let words: Vec<u64> = meta["rng"].iter().map(|&x| x as u64).collect();
            let adam = Adam {
                config: adam_config(&config),
                t: word("adam_t")?,
                m,
                v,
            };
            for (name, t) in model.params.iter() {
                for store in [&adam.m, &adam.v] {
                    if store.get(name)?.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("optimizer moment `{name}` has the wrong shape")));
                    }
                }
            }
            Some(TrainState {
                epoch: word("epoch")? as usize,
                rng: rng_from_words(&words)?,
                adam,
                config,
            })
        } else {
            None
        };
        Ok(Checkpoint { model, vocab, state })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode(&self.to_entries()?))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        Checkpoint::from_entries(decode(buf)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn adam_config(t: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: t.learning_rate,
        beta1: t.adam_beta1,
        beta2: t.adam_beta2,
        eps: t.adam_eps,
        clip_norm: t.grad_clip_norm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::RngCore;

    fn tiny() -> Checkpoint {
        let config = ModelConfig {
            architecture: Architecture::Pvhd,
            d_embed: 3,
            d_hidden: 3,
            encoder_layers: 1,
            vocab_size: 7,
            max_turns: 2,
            max_tokens: 4,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(config, &mut rng).unwrap();
        let vocab = Vocab::from_tokens(["a", "b"].map(String::from)).unwrap();
        let train = TrainConfig::default();
        let mut adam = Adam::new(adam_config(&train), &model.params);
        adam.t = 3;
        for (_, t) in adam.m.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.25);
        }
        rng.next_u32();
        Checkpoint {
            model,
            vocab,
            state: Some(TrainState {
                config: train,
                epoch: 4,
                adam,
                rng,
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = tiny();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.config, c.model.config);
        assert_eq!(back.model.params, c.model.params);
        assert_eq!(back.vocab, c.vocab);
        let (s, b) = (c.state.unwrap(), back.state.unwrap());
        assert_eq!(b.adam, s.adam);
        assert_eq!(b.epoch, 4);
        assert_eq!(b.config, s.config);
        let (mut r1, mut r2) = (s.rng, b.rng);
        for _ in 0..10 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[Entry::f64("x", vec![2], vec![1.0, -2.5])]);
        assert_eq!(&bytes[..6], b"PVGRU1");
        assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(bytes[14], b'x');
        assert_eq!(bytes[15], 1);
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 44);
    }

    #[test]
    fn f32_entries_are_widened() {
        let e = Entry {
            name: "h".into(),
            dtype: DType::F32,
            shape: vec![1, 2],
            data: vec![0.5, 3.0],
        };
        let bytes = encode(std::slice::from_ref(&e));
        assert_eq!(bytes.len(), 6 + 4 + 4 + 1 + 1 + 4 + 16 + 8);
        assert_eq!(decode(&bytes).unwrap(), vec![e]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = tiny().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"PVGRU2\0\0\0\0").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let c = tiny();
        let entries: Vec<Entry> = c
            .to_entries()
            .unwrap()
            .into_iter()
            .filter(|e| e.name != "param/embed")
            .collect();
        assert!(Checkpoint::from_entries(entries).is_err());
    }
}
