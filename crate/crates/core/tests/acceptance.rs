//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line is printed even
//! when all checks pass; the process fails if any criterion does.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use pvgru::autodiff::{Binder, GradCheck, ParamStore, Tape, Tensor, Var};
use pvgru::cells::{
    binding, initial_state, initializer, unroll, CellDims, CellKind, CellParams, ReconstructionHead, SampleMode,
    Sampler, SeqMask, StepState,
};
use pvgru::corpus::{load_corpus, Dialogue};
use pvgru::decoding::{beam_search, generate, log_softmax_rows, SearchConfig, Strategy};
use pvgru::harness::{
    decode_corpus, gradcheck_model, one_to_many_corpus, random_batch, tiny_config, Checkpoint, DecodeOptions,
    ExperimentConfig, GradcheckDims, Preset, Trainer,
};
use pvgru::metrics::{
    bleu_n, distinct_n, embedding_pair, paired_significance, perplexity, rouge_l, EvalPair, WordVectors,
};
use pvgru::model::{Architecture, Model, ModelConfig};
use pvgru::objectives::{kl_diag_gaussian_values, reconstruction_loss, LossWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn memorize_corpus() -> Vec<Dialogue> {
    load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/memorize.jsonl")).unwrap()
}

fn randomize(m: &mut Model, scale: f64, rng: &mut ChaCha8Rng) {
    for (_, t) in m.params.iter_mut() {
        *t = Tensor::randn(t.shape().to_vec(), scale, rng);
    }
}

// 1
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let dims = GradcheckDims {
        d: 6,
        vocab_size: 11,
        turns: 2,
        tokens: 4,
    };
    let cfg = tiny_config(Architecture::Pvhd, CellKind::Pvgru, dims, 2);
    let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = random_batch(dims, 1).unwrap();
    let total: usize = model.params.iter().map(|(_, t)| t.numel()).sum();
    let gc = GradCheck::default();
    let r = gradcheck_model(&model, &batch, &LossWeights::default(), 7, gc).unwrap();
    let elapsed = start.elapsed();
    let (worst, idx) = r.worst.clone().unwrap_or_default();
    outcome(
        r.passed && r.max_rel_error <= 1e-4 && r.elements_checked == total && elapsed < Duration::from_secs(60),
        format!(
            "max_rel_error={:.2e} (tol 1e-4) worst={worst}[{idx}] elements={}/{total} in {}",
            r.max_rel_error,
            r.elements_checked,
            secs(elapsed)
        ),
    )
}

// 2
fn gru_degeneracy() -> Outcome {
    let dims = CellDims {
        d_x: 5,
        d_h: 6,
        bias: true,
        head_depth: 1,
    };
    let mut worst = 0.0f64;
    for seq in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seq);
        let mut pv = ParamStore::new();
        CellParams::build(CellKind::Pvgru, "c", dims, &mut initializer(&mut pv, &mut rng)).unwrap();
        for (name, t) in pv.iter_mut() {
            let zero = ["c.v_r", "c.v_z", "c.v_h", "c.v_g"].contains(&name.as_str());
            let scale = if zero { 0.0 } else { 1.5 };
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let mut gru = ParamStore::new();
        CellParams::build(CellKind::Gru, "c", dims, &mut initializer(&mut gru, &mut rng)).unwrap();
        let names: Vec<String> = gru.names().map(str::to_string).collect();
        for n in names {
            *gru.get_mut(&n).unwrap() = pv.get(&n).unwrap().clone();
        }
        let len = rng.random_range(1..=12);
        let xs: Vec<Tensor> = (0..len).map(|_| Tensor::randn([1, dims.d_x], 1.0, &mut rng)).collect();
        let run = |kind: CellKind, store: &ParamStore| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let mut binder = Binder::new(store);
            let p = CellParams::build(kind, "c", dims, &mut binding(&mut tape, &mut binder)).unwrap();
            let inputs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let mut noise = ChaCha8Rng::seed_from_u64(seq + 1000);
            let mut s = Sampler::new(&mut noise, SampleMode::Sample);
            let init = initial_state(&mut tape, kind, 1, dims.d_h, &mut s);
            let mask = SeqMask::from_lengths(vec![len], len).unwrap();
            let states = unroll(&mut tape, &p, &inputs, init, &mask, &mut s).unwrap();
            states.iter().map(|st| tape.value(st.h).data().to_vec()).collect()
        };
        let (a, b) = (run(CellKind::Pvgru, &pv), run(CellKind::Gru, &gru));
        for (ha, hb) in a.iter().zip(&b) {
            for (x, y) in ha.iter().zip(hb) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max |h_pvgru - h_gru| = {worst:.2e} over 100 sequences (tol 1e-12)"))
}

// 3
fn monte_carlo_kl(p: (&[f64], &[f64]), q: (&[f64], &[f64]), draws: usize, rng: &mut ChaCha8Rng) -> f64 {
    let log_density = |x: &[f64], mu: &[f64], lv: &[f64]| -> f64 {
        x.iter()
            .zip(mu)
            .zip(lv)
            .map(|((x, m), l)| -0.5 * (l + (x - m).powi(2) / l.exp() + (2.0 * std::f64::consts::PI).ln()))
            .sum()
    };
    // antithetic pairs: each noise draw is used as +e and -e
    let d = p.0.len();
    let mut acc = 0.0;
    for _ in 0..draws / 2 {
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for sign in [1.0, -1.0] {
            let x: Vec<f64> = (0..d).map(|i| p.0[i] + (0.5 * p.1[i]).exp() * sign * e[i]).collect();
            acc += log_density(&x, p.0, p.1) - log_density(&x, q.0, q.1);
        }
    }
    acc / (2 * (draws / 2)) as f64
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_kl = 0.0f64;
    for _ in 0..20 {
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..4).map(|_| rng.random_range(lo..hi)).collect() };
        let (m1, l1, m2, l2) = (draw(-3.0, 3.0), draw(-1.0, 1.0), draw(-3.0, 3.0), draw(-1.0, 1.0));
        let exact = kl_diag_gaussian_values((&m1, &l1), (&m2, &l2)).unwrap();
        let mc = monte_carlo_kl((&m1, &l1), (&m2, &l2), 100_000, &mut rng);
        worst_kl = worst_kl.max((exact - mc).abs() / exact);
    }

    // a zero head reconstructs 0, so e = -h
    let mut store = ParamStore::new();
    ReconstructionHead::build("f", 1, 1, true, &mut initializer(&mut store, &mut rng)).unwrap();
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    // value and d/de at residual e
    let huber = |e: f64, delta: f64| -> (f64, f64) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let f = ReconstructionHead::build("f", 1, 1, true, &mut binding(&mut tape, &mut binder)).unwrap();
        let v = tape.constant(Tensor::row(&[0.3]));
        let h = tape.param(Tensor::row(&[-e]));
        let l = reconstruction_loss(&mut tape, v, h, &f, delta).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).item(), -g.get(h).unwrap().item())
    };
    let (a, b) = (huber(0.5, 1.0).0, huber(2.0, 1.0).0);
    let mut knot_ok = true;
    let mut knot = 0.0;
    for delta in [1.0, 0.5, 2.0] {
        for e in [delta, -delta] {
            let (value, slope) = huber(e, delta);
            let quadratic = (0.5 * e * e, e);
            let linear = (delta * e.abs() - 0.5 * delta * delta, delta * e.signum());
            knot_ok &= value == quadratic.0 && value == linear.0 && slope == quadratic.1 && slope == linear.1;
            if delta == 1.0 && e > 0.0 {
                knot = value;
            }
        }
    }
    outcome(
        worst_kl <= 0.01 && a == 0.125 && b == 1.5 && knot_ok,
        format!("KL vs Monte Carlo worst rel err {worst_kl:.4} (tol 0.01); huber(0.5)={a} huber(2)={b} knot={knot}"),
    )
}

// 4
fn additivity() -> Outcome {
    let dims = GradcheckDims {
        d: 5,
        vocab_size: 12,
        turns: 3,
        tokens: 5,
    };
    let cfg = tiny_config(Architecture::Pvhd, CellKind::Pvgru, dims, 1);
    let mut failures = Vec::new();
    let mut checked = 0;
    for seed in 0..10u64 {
        let model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let one = random_batch(dims, seed).unwrap();
        let rows: Vec<usize> = vec![0; 1 + seed as usize % 3];
        let batch = one.select(&rows);
        let run = |w: &LossWeights| {
            let mut tape = Tape::new();
            let mut binder = Binder::frozen(&model.params);
            let bound = model.bind(&mut tape, &mut binder).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let mut s = Sampler::new(&mut rng, SampleMode::Sample);
            bound.forward_train(&mut tape, &batch, w, &mut s).unwrap()
        };
        let both = LossWeights::default();
        let no_r = LossWeights {
            use_reconstruction: false,
            ..both
        };
        let no_c = LossWeights {
            use_consistency: false,
            ..both
        };
        let (f, fr, fc, fl) = (run(&both), run(&no_r), run(&no_c), run(&LossWeights::likelihood_only()));
        let b = f.breakdown;
        let per_row = f.nll_sum / batch.size() as f64;
        let ok = b.total == b.ll + b.r + b.c
            && (b.ll - per_row).abs() <= 1e-12 * per_row
            && b.r > 0.0
            && b.c > 0.0
            && fr.breakdown.r == 0.0
            && (fr.breakdown.ll, fr.breakdown.c) == (b.ll, b.c)
            && fr.breakdown.total == b.ll + b.c
            && fc.breakdown.c == 0.0
            && (fc.breakdown.ll, fc.breakdown.r) == (b.ll, b.r)
            && fc.breakdown.total == b.ll + b.r
            && fl.breakdown.total == b.ll;
        if !ok {
            failures.push(seed);
        }
        checked += 1;
    }
    outcome(
        failures.is_empty(),
        format!("{checked} batches, total = ll + r + c exactly, ablations drop only their term; failing seeds {failures:?}"),
    )
}

// 5
fn memorization() -> Outcome {
    let corpus = memorize_corpus();
    let cfg = ExperimentConfig::preset(Preset::Desk);
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg, &corpus).unwrap();
    let vocab_words = trainer.vocab.len() - pvgru::corpus::RESERVED.len();
    let opts = DecodeOptions {
        strategy: Strategy::Greedy,
        search: SearchConfig {
            max_len: cfg.model.max_tokens + 1,
            ..SearchConfig::default()
        },
        mode: SampleMode::Mean,
        seed: 0,
    };
    let bleu = |t: &Trainer| -> f64 {
        let hyps = decode_corpus(&t.model, &t.vocab, &corpus, &opts).unwrap();
        let pairs: Vec<EvalPair> = corpus.iter().zip(&hyps).map(|(d, h)| EvalPair::new(h, &d.response)).collect();
        bleu_n(&pairs, 1).unwrap()
    };
    let (mut ppl, mut b1, mut reached) = (f64::INFINITY, 0.0, None);
    while trainer.epoch < 500 {
        trainer.train_epoch(&corpus).unwrap();
        if trainer.epoch % 10 == 0 {
            ppl = trainer.perplexity(&corpus).unwrap();
            if ppl <= 1.5 && reached.is_none() {
                reached = Some(trainer.epoch);
            }
            b1 = bleu(&trainer);
            if reached.is_some() && b1 == 1.0 {
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        corpus.len() == 16
            && vocab_words <= 200
            && cfg.model.d_hidden == 64
            && reached.is_some()
            && b1 == 1.0
            && elapsed < Duration::from_secs(600),
        format!(
            "{} dialogues, {vocab_words} words; ppl<=1.5 at epoch {:?}, stopped at {} with ppl {ppl:.4}, greedy mean BLEU-1 {b1:.4}, {}",
            corpus.len(),
            reached,
            trainer.epoch,
            secs(elapsed)
        ),
    )
}

// 6
fn toy_decoder_config(v: usize, d: usize) -> ModelConfig {
    ModelConfig {
        architecture: Architecture::Pvhd,
        cell: CellKind::Pvgru,
        d_embed: d,
        d_hidden: d,
        encoder_layers: 1,
        decoder_layers: 1,
        vocab_size: v,
        max_turns: 2,
        max_tokens: 4,
        ..ModelConfig::default()
    }
}

/// Log-probability of `seq` (then EOS when `ended`) from a fixed context.
fn sequence_score(m: &Model, ctx: (&Tensor, &Tensor), seq: &[usize], ended: bool, cfg: &SearchConfig) -> f64 {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(&m.params);
    let bound = m.bind(&mut tape, &mut binder).unwrap();
    let context = StepState {
        h: tape.constant(ctx.0.clone()),
        v: Some(tape.constant(ctx.1.clone())),
        stats: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Sampler::new(&mut rng, SampleMode::Mean);
    let mut states = bound.decoder_init(&context);
    let mut prev = cfg.bos;
    let mut score = 0.0;
    for &y in seq.iter().chain(ended.then_some(&cfg.eos)) {
        let (logits, next) = bound.decoder_step(&mut tape, &[prev], &states, &mut s).unwrap();
        score += log_softmax_rows(&tape, logits)[0][y];
        states = next;
        prev = y;
    }
    score
}

fn decoding_exactness() -> Outcome {
    let mut mismatches = 0;
    for ctx in 0..50u64 {
        let dims = GradcheckDims {
            d: 6,
            vocab_size: 14,
            turns: 2,
            tokens: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(ctx);
        let mut m = Model::new(tiny_config(Architecture::Pvhd, CellKind::Pvgru, dims, 1), &mut rng).unwrap();
        randomize(&mut m, 1.2, &mut rng);
        let batch = random_batch(dims, ctx).unwrap();
        let cfg = SearchConfig {
            max_len: 8,
            ..SearchConfig::default()
        };
        for mode in [SampleMode::Mean, SampleMode::Sample] {
            let g = generate(&m, &batch, Strategy::Greedy, &cfg, mode, &mut ChaCha8Rng::seed_from_u64(ctx)).unwrap();
            let b = generate(&m, &batch, Strategy::Beam(1), &cfg, mode, &mut ChaCha8Rng::seed_from_u64(ctx)).unwrap();
            if g != b {
                mismatches += 1;
            }
        }
    }

    let cfg = SearchConfig {
        max_len: 3,
        beam: 27,
        length_norm: 0.0,
        bos: 0,
        eos: 2,
        shared_noise: true,
    };
    let mut outputs: Vec<(Vec<usize>, bool)> = vec![(vec![], true)];
    for a in [0, 1] {
        outputs.push((vec![a], true));
        for b in [0, 1] {
            outputs.push((vec![a, b], true));
            for c in [0, 1] {
                outputs.push((vec![a, b, c], false));
            }
        }
    }
    let mut wrong = 0;
    for model_seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + model_seed);
        let mut m = Model::new(toy_decoder_config(3, 3), &mut rng).unwrap();
        randomize(&mut m, 1.5, &mut rng);
        let h = Tensor::randn([1, 3], 0.5, &mut rng);
        let v = Tensor::randn([1, 3], 0.5, &mut rng);
        let (best, best_score) = outputs
            .iter()
            .map(|(s, e)| ((s.clone(), *e), sequence_score(&m, (&h, &v), s, *e, &cfg)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&m.params);
        let bound = m.bind(&mut tape, &mut binder).unwrap();
        let context = StepState {
            h: tape.constant(h),
            v: Some(tape.constant(v)),
            stats: None,
        };
        let mut nrng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Sampler::new(&mut nrng, SampleMode::Mean);
        let top = beam_search(&bound, &mut tape, &context, &cfg, &mut s).unwrap().remove(0);
        if (top.tokens, top.ended) != best || (top.score - best_score).abs() > 1e-12 {
            wrong += 1;
        }
    }
    outcome(
        mismatches == 0 && wrong == 0,
        format!("beam=1 vs greedy: {mismatches}/100 mismatches over 50 contexts x 2 modes; saturated beam: {wrong}/20 off the enumerated optimum"),
    )
}

// 7
fn metric_oracles() -> Outcome {
    let bleu = bleu_n(&[EvalPair::from_text("a b c", "a b d")], 1).unwrap();
    let rouge = rouge_l(&[EvalPair::from_text("a b c d", "a c d")]).unwrap();
    let dist = distinct_n(&[vec!["a", "a", "b"]], 1);

    let v = 11;
    let dims = GradcheckDims {
        d: 4,
        vocab_size: v,
        turns: 2,
        tokens: 4,
    };
    let mut m = Model::new(tiny_config(Architecture::Pvhd, CellKind::Pvgru, dims, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for name in ["out.w", "out.b"] {
        m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let batches: Vec<_> = (0..3).map(|s| random_batch(dims, s).unwrap()).collect();
    let ppl = perplexity(&m, &batches).unwrap();

    let words = ["the", "cat", "sat", "on", "mat"];
    let vectors = WordVectors::random(&words, 50, 4).unwrap();
    let same = EvalPair::from_text("the cat sat on the mat", "the cat sat on the mat");
    let e = embedding_pair(&same, &vectors).unwrap();
    let emb_ok = [e.average, e.extrema, e.greedy].iter().all(|x| (x - 1.0).abs() <= 1e-12);

    let checks = [
        ("bleu1", (bleu - 0.6667).abs() <= 1e-4),
        ("rouge_l", (rouge - 0.8876).abs() <= 1e-4),
        ("distinct1", (dist - 0.6667).abs() <= 1e-4),
        ("uniform_ppl", (ppl - v as f64).abs() <= 1e-12 * v as f64),
        ("embedding", emb_ok),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        format!(
            "bleu1={bleu:.4} rouge_l={rouge:.5} (expected 0.8876) distinct1={dist:.4} uniform ppl={ppl} (V={v}) embedding=({:.6},{:.6},{:.6}); failing: {failed:?}",
            e.average, e.extrema, e.greedy
        ),
    )
}

// 8
fn distinct_after_training(arch: Architecture, cell: CellKind, mode: SampleMode, seed: u64, corpus: &[Dialogue]) -> f64 {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.model.architecture = arch;
    cfg.model.cell = cell;
    cfg.train.max_epochs = DIVERSITY_EPOCHS;
    cfg.train.batch_size = 16;
    cfg.train.seed = seed;
    let mut trainer = Trainer::new(&cfg, corpus).unwrap();
    trainer.run(corpus, None, |_, _| Ok(())).unwrap();
    let mut contexts: Vec<Dialogue> = Vec::new();
    for d in corpus {
        if contexts.last().is_none_or(|c| c.context != d.context) {
            contexts.push(d.clone());
        }
    }
    let opts = DecodeOptions {
        strategy: Strategy::Greedy,
        search: SearchConfig {
            max_len: cfg.model.max_tokens,
            ..SearchConfig::default()
        },
        mode,
        seed,
    };
    let hyps = decode_corpus(&trainer.model, &trainer.vocab, &contexts, &opts).unwrap();
    distinct_n(&hyps, 1)
}

const DIVERSITY_EPOCHS: usize = 60;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn diversity() -> Outcome {
    let start = Instant::now();
    let corpus = one_to_many_corpus(50, 4, 0).unwrap();
    let (mut pv, mut hr) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        pv.push(distinct_after_training(Architecture::Pvhd, CellKind::Pvgru, SampleMode::Sample, seed, &corpus));
        hr.push(distinct_after_training(Architecture::Hred, CellKind::Gru, SampleMode::Mean, seed, &corpus));
    }
    let p = paired_significance(&pv, &hr, 10_000, 0).unwrap();
    let elapsed = start.elapsed();
    let (mp, mh) = (median(&pv), median(&hr));
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    outcome(
        mp > mh && p < 0.1 && elapsed < Duration::from_secs(1800),
        format!(
            "median Distinct-1 pvhd(sample)={mp:.4} [{}] hred-gru={mh:.4} [{}], p={p:.4} (need < 0.1), {DIVERSITY_EPOCHS} epochs each, {}",
            fmt(&pv),
            fmt(&hr),
            secs(elapsed)
        ),
    )
}

// 9
fn determinism() -> Outcome {
    let corpus = memorize_corpus();
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.model.d_embed = 16;
    cfg.model.d_hidden = 16;
    cfg.train.max_epochs = 3;
    cfg.train.seed = 11;
    let log = || -> String {
        let mut t = Trainer::new(&cfg, &corpus).unwrap();
        let mut out = String::new();
        t.run(&corpus, Some(&corpus), |l, _| {
            out.push_str(&serde_json::to_string(l).unwrap());
            out.push('\n');
            Ok(())
        })
        .unwrap();
        out
    };
    let (a, b) = (log(), log());

    let mut t = Trainer::new(&cfg, &corpus).unwrap();
    t.run(&corpus, None, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    t.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let batch = &t.batches(&corpus, None).unwrap()[0];
    let loss = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&m.params);
        let bound = m.bind(&mut tape, &mut binder).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = Sampler::new(&mut rng, SampleMode::Sample);
        bound.forward_train(&mut tape, batch, &LossWeights::default(), &mut s).unwrap().breakdown.total
    };
    let (before, after) = (loss(&t.model), loss(&loaded.model));
    outcome(
        a == b && !a.is_empty() && before.to_bits() == after.to_bits(),
        format!(
            "logs identical: {} ({} bytes); loss before/after reload {before:e} / {after:e}",
            a == b,
            a.len()
        ),
    )
}

// 10
/// Exact two-sided bootstrap p-value: every multiset of resampled indices
/// weighted by its multinomial probability.
fn exhaustive_p(d: &[f64]) -> f64 {
    let n = d.len();
    let ln_fact: Vec<f64> = (0..=n).scan(0.0, |acc, k| {
        if k > 0 {
            *acc += (k as f64).ln();
        }
        Some(*acc)
    })
    .collect();
    let tie = 1e-12 * n as f64 * d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (mut below, mut equal) = (0.0, 0.0);
    let mut counts = vec![0usize; n];
    fn walk(i: usize, left: usize, counts: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if i + 1 == counts.len() {
            counts[i] = left;
            visit(counts);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            walk(i + 1, left - c, counts, visit);
        }
    }
    walk(0, n, &mut counts, &mut |c| {
        let ln_w = ln_fact[n] - c.iter().map(|&k| ln_fact[k]).sum::<f64>() - n as f64 * (n as f64).ln();
        let w = ln_w.exp();
        let s: f64 = c.iter().zip(d).map(|(&k, x)| k as f64 * x).sum();
        if s < -tie {
            below += w;
        } else if s <= tie {
            equal += w;
        }
    });
    let q = below + 0.5 * equal;
    2.0 * q.min(1.0 - q)
}

fn significance_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut report = Vec::new();
    for shift in [0.0, 0.15, 0.3, 0.5, 0.8] {
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        let a: Vec<f64> = b.iter().map(|x| x + shift + rng.random_range(-0.5..0.5)).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let exact = exhaustive_p(&d);
        let boot = paired_significance(&a, &b, 10_000, 1).unwrap();
        worst = worst.max((exact - boot).abs());
        report.push(format!("{exact:.3}/{boot:.3}"));
    }
    outcome(
        worst <= 0.02,
        format!("exact/bootstrap p: {} ; worst |diff| {worst:.4} (tol 0.02)", report.join(" ")),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient-correctness", gradient_correctness),
        ("gru-degeneracy", gru_degeneracy),
        ("loss-oracles", loss_oracles),
        ("loss-additivity", additivity),
        ("memorization", memorization),
        ("decoding-exactness", decoding_exactness),
        ("metric-oracles", metric_oracles),
        ("directional-diversity", diversity),
        ("determinism-persistence", determinism),
        ("significance-oracle", significance_oracle),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!("{} {n:>2} {name}: {}", if result.passed { "PASS" } else { "FAIL" }, result.detail);
        failed += usize::from(!result.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
