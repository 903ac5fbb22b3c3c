use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::{adam_config, Checkpoint, TrainState};
use super::config::{AuxUpdates, ExperimentConfig, TrainConfig};
use crate::autodiff::{Binder, Tape, Tensor};
use std::collections::BTreeMap;
use crate::cells::Sampler;
use crate::corpus::{batchify, build_vocab, Batch, Dialogue, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{perplexity, perplexity_from};
use crate::model::{is_summary_parameter, ForwardOutput, Model};
use crate::objectives::LossBreakdown;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ll: f64,
    pub loss_r: f64,
    pub loss_c: f64,
    /// Perplexity of the training pass itself, under training-mode noise.
    pub train_ppl: f64,
    pub valid_ppl: Option<f64>,
}

/// Per-batch results of [`Trainer::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub breakdown: LossBreakdown,
    pub nll_sum: f64,
    pub target_tokens: usize,
    pub grad_norm: f64,
}

/// Model, optimizer and noise stream of a training run.
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocab,
    pub config: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
}

/// Per-parameter update directions for one forward pass.
///
/// With [`AuxUpdates::Summary`] the likelihood gradient reaches every
/// parameter and the auxiliary gradient only the summarizing-variable ones.
pub fn training_gradients(
    tape: &Tape,
    binder: &Binder,
    out: &ForwardOutput,
    scope: AuxUpdates,
) -> Result<BTreeMap<String, Tensor>> {
    let aux = match (scope, out.terms.aux) {
        (AuxUpdates::Summary, Some(aux)) => aux,
        _ => return Ok(binder.named_gradients(&tape.backward(out.loss)?)),
    };
    let mut grads = binder.named_gradients(&tape.backward(out.terms.ll)?);
    let aux_grads = binder.named_gradients(&tape.backward(aux)?);
    for (name, g) in aux_grads {
        if is_summary_parameter(&name) {
            let slot = grads.get_mut(&name).expect("same binder");
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(grads)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Trainer {
    /// Builds the vocabulary from `corpus` (capped at `model.vocab_size`) and
    /// initializes a model whose output layer matches it.
    pub fn new(cfg: &ExperimentConfig, corpus: &[Dialogue]) -> Result<Self> {
        cfg.validate()?;
        let vocab = build_vocab(corpus, cfg.model.vocab_size, cfg.train.vocab_min_count)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.vocab_size = vocab.len();
        Trainer::with_vocab(model_cfg, cfg.train.clone(), vocab)
    }

    pub fn with_vocab(model_cfg: crate::model::ModelConfig, config: TrainConfig, vocab: Vocab) -> Result<Self> {
        if model_cfg.vocab_size != vocab.len() {
            return Err(Error::Invalid(format!(
                "model expects {} tokens but the vocabulary has {}",
                model_cfg.vocab_size,
                vocab.len()
            )));
        }
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(model_cfg, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            adam: Adam::new(adam_config(&config), &model.params),
            model,
            vocab,
            config,
            rng,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt
            .state
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Trainer {
            model: ckpt.model,
            vocab: ckpt.vocab,
            config: state.config,
            adam: state.adam,
            rng: state.rng,
            epoch: state.epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            state: Some(TrainState {
                config: self.config.clone(),
                epoch: self.epoch,
                adam: self.adam.clone(),
                rng: self.rng.clone(),
            }),
        }
    }

    pub fn batches(&self, corpus: &[Dialogue], shuffle_epoch: Option<usize>) -> Result<Vec<Batch>> {
        let c = &self.model.config;
        let (seed, shuffle) = match shuffle_epoch {
            Some(e) if self.config.shuffle => (shuffle_seed(self.config.seed, e), true),
            _ => (0, false),
        };
        batchify(corpus, &self.vocab, self.config.batch_size, seed, shuffle, c.max_turns, c.max_tokens)
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepResult> {
        let (out, grads) = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.model.params);
            let bound = self.model.bind(&mut tape, &mut binder)?;
            let mut sampler = Sampler::new(&mut self.rng, self.config.train_mode);
            let out = bound.forward_train(&mut tape, batch, &self.config.loss, &mut sampler)?;
            let grads = training_gradients(&tape, &binder, &out, self.config.aux_updates)?;
            (out, grads)
        };
        let grad_norm = self.adam.step(&mut self.model.params, grads)?;
        Ok(StepResult {
            breakdown: out.breakdown,
            nll_sum: out.nll_sum,
            target_tokens: out.target_tokens,
            grad_norm,
        })
    }

    /// One pass over `corpus`; `valid_ppl` is left empty.
    pub fn train_epoch(&mut self, corpus: &[Dialogue]) -> Result<EpochLog> {
        let batches = self.batches(corpus, Some(self.epoch))?;
        let (mut total, mut ll, mut r, mut c, mut nll) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut rows, mut tokens) = (0usize, 0usize);
        for batch in &batches {
            let s = self.step(batch)?;
            let b = batch.size() as f64;
            total += s.breakdown.total * b;
            ll += s.breakdown.ll * b;
            r += s.breakdown.r * b;
            c += s.breakdown.c * b;
            nll += s.nll_sum;
            rows += batch.size();
            tokens += s.target_tokens;
        }
        self.epoch += 1;
        let n = rows as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            loss_total: total / n,
            loss_ll: ll / n,
            loss_r: r / n,
            loss_c: c / n,
            train_ppl: perplexity_from(nll, tokens)?,
            valid_ppl: None,
        })
    }

    /// Teacher-forced perplexity of `corpus` in mean mode.
    pub fn perplexity(&self, corpus: &[Dialogue]) -> Result<f64> {
        perplexity(&self.model, &self.batches(corpus, None)?)
    }

    /// Trains until `config.max_epochs`, calling `on_epoch` after each epoch.
    pub fn run<F>(&mut self, train: &[Dialogue], valid: Option<&[Dialogue]>, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&EpochLog, &Trainer) -> Result<()>,
    {
        while self.epoch < self.config.max_epochs {
            let mut log = self.train_epoch(train)?;
            let every = self.config.eval_every;
            if let Some(v) = valid {
                if every > 0 && (self.epoch % every == 0 || self.epoch == self.config.max_epochs) {
                    log.valid_ppl = Some(self.perplexity(v)?);
                }
            }
            on_epoch(&log, self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Preset;
    use crate::model::{Architecture, ModelConfig};

    fn toy_corpus() -> Vec<Dialogue> {
        [
            (&["hi there", "how are you"][..], "fine thanks"),
            (&["good morning"][..], "morning"),
            (&["what is that", "a cat"][..], "nice cat"),
            (&["bye"][..], "see you"),
        ]
        .iter()
        .map(|(c, r)| Dialogue::from_text(c, r).unwrap())
        .collect()
    }

    fn tiny(arch: Architecture, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(Preset::Desk);
        cfg.model = ModelConfig {
            architecture: arch,
            d_embed: 6,
            d_hidden: 6,
            encoder_layers: 1,
            max_turns: 3,
            max_tokens: 6,
            ..cfg.model
        };
        cfg.train.batch_size = 2;
        cfg.train.max_epochs = 2;
        cfg.train.seed = seed;
        cfg
    }

    fn run(cfg: &ExperimentConfig) -> Vec<EpochLog> {
        let corpus = toy_corpus();
        let mut t = Trainer::new(cfg, &corpus).unwrap();
        let mut logs = Vec::new();
        t.run(&corpus, Some(&corpus), |l, _| {
            logs.push(l.clone());
            Ok(())
        })
        .unwrap();
        logs
    }

    #[test]
    fn two_epochs_give_two_records() {
        let logs = run(&tiny(Architecture::Pvhd, 1));
        assert_eq!(logs.len(), 2);
        for l in &logs {
            assert!(l.loss_r > 0.0 && l.loss_c > 0.0 && l.loss_ll > 0.0);
            assert!((l.loss_total - (l.loss_ll + l.loss_r + l.loss_c)).abs() < 1e-12 * l.loss_total);
        }
    }

    #[test]
    fn ablation_flags_zero_their_terms() {
        let mut cfg = tiny(Architecture::Pvhd, 2);
        cfg.train.loss.use_reconstruction = false;
        for l in run(&cfg) {
            assert_eq!(l.loss_r, 0.0);
            assert!(l.loss_c > 0.0);
        }
        cfg.train.loss.use_consistency = false;
        for l in run(&cfg) {
            assert_eq!((l.loss_r, l.loss_c), (0.0, 0.0));
            assert_eq!(l.loss_total, l.loss_ll);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny(Architecture::Pvhd, 3);
        assert_eq!(run(&cfg), run(&cfg));
    }

    #[test]
    fn resume_continues_bit_identically() {
        let mut cfg = tiny(Architecture::Pvhd, 4);
        cfg.train.max_epochs = 4;
        let straight = run(&cfg);

        let corpus = toy_corpus();
        let mut first = Trainer::new(&cfg, &corpus).unwrap();
        first.config.max_epochs = 2;
        first.run(&corpus, Some(&corpus), |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.config.max_epochs = 4;
        let mut tail = Vec::new();
        resumed
            .run(&corpus, Some(&corpus), |l, _| {
                tail.push(l.clone());
                Ok(())
            })
            .unwrap();
        assert_eq!(tail, straight[2..]);
    }

    #[test]
    fn scoped_gradients_split_by_parameter_role() {
        let cfg = tiny(Architecture::Pvhd, 6);
        let corpus = toy_corpus();
        let t = Trainer::new(&cfg, &corpus).unwrap();
        let batch = &t.batches(&corpus, None).unwrap()[0];
        let grads = |weights: &crate::objectives::LossWeights, scope: AuxUpdates| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&t.model.params);
            let bound = t.model.bind(&mut tape, &mut binder).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut sampler = Sampler::new(&mut rng, crate::cells::SampleMode::Sample);
            let out = bound.forward_train(&mut tape, batch, weights, &mut sampler).unwrap();
            training_gradients(&tape, &binder, &out, scope).unwrap()
        };
        let full_weights = crate::objectives::LossWeights::default();
        let full = grads(&full_weights, AuxUpdates::All);
        let ll = grads(&crate::objectives::LossWeights::likelihood_only(), AuxUpdates::All);
        let scoped = grads(&full_weights, AuxUpdates::Summary);
        let (mut summary, mut backbone) = (0, 0);
        for (name, g) in &scoped {
            let expect = if is_summary_parameter(name) {
                summary += 1;
                &full[name]
            } else {
                backbone += 1;
                &ll[name]
            };
            let scale = expect.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
            assert!(g.max_abs_diff(expect) <= 1e-12 * scale, "{name}");
        }
        assert!(summary > 0 && backbone > 0);
        // the split matters: some backbone parameter sees a different direction
        assert!(full.iter().any(|(n, g)| !is_summary_parameter(n) && g.max_abs_diff(&ll[n]) > 1e-6));
    }

    #[test]
    fn training_lowers_the_loss() {
        let mut cfg = tiny(Architecture::Hred, 5);
        cfg.model.cell = crate::cells::CellKind::Gru;
        cfg.train.max_epochs = 30;
        let logs = run(&cfg);
        assert!(logs.last().unwrap().loss_ll < 0.8 * logs[0].loss_ll);
    }
}
