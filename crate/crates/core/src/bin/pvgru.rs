use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pvgru::cells::SampleMode;
use pvgru::corpus::{load_corpus, Vocab};
use pvgru::decoding::{SearchConfig, Strategy};
use pvgru::harness::{
    compare, evaluate, export_variables, gradcheck_suite, respond, Checkpoint, DecodeOptions, ExperimentConfig,
    GradcheckDims, Preset, Trainer,
};
use pvgru::metrics::WordVectors;

#[derive(Parser)]
#[command(name = "pvgru", version, about = "Train and evaluate pseudo-variational dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, or resume from a checkpoint
    Train(TrainArgs),
    /// Generate for a corpus and report metrics as JSON
    Evaluate(EvalArgs),
    /// Respond to a context
    Generate(GenerateArgs),
    /// Dump word- and utterance-level summarizing variables
    ExportVars(ExportArgs),
    /// Compare tape gradients with finite differences on tiny models
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sample,
    Mean,
}

impl From<ModeArg> for SampleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sample => SampleMode::Sample,
            ModeArg::Mean => SampleMode::Mean,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper")]
    preset: PresetArg,
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus used for validation perplexity
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Resume from this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train until this many epochs have been completed
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long)]
    greedy: bool,
    #[arg(long = "max-len", default_value_t = 50)]
    max_len: usize,
    #[arg(long, value_enum, default_value = "mean")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DecodeArgs {
    fn options(&self) -> Result<DecodeOptions> {
        if self.beam == 0 {
            bail!("--beam must be at least 1");
        }
        if self.max_len == 0 {
            bail!("--max-len must be at least 1");
        }
        Ok(DecodeOptions {
            strategy: if self.greedy { Strategy::Greedy } else { Strategy::Beam(self.beam) },
            search: SearchConfig {
                max_len: self.max_len,
                ..SearchConfig::default()
            },
            mode: self.mode.into(),
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Word vectors, one `word v1 … vd` per line; a seeded random table otherwise
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Vocabulary file to use instead of the checkpoint's
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Second checkpoint to test against with a paired bootstrap
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// JSON report path
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One utterance of the context; repeat for several turns
    #[arg(long = "context", short = 'c')]
    context: Vec<String>,
    /// Respond to every context of this corpus instead
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "mean")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout otherwise
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    dim: usize,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Generate(a) => generate(a),
        Command::ExportVars(a) => export(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let valid = a.valid.as_deref().map(load_corpus).transpose()?;
    let mut trainer = match &a.checkpoint {
        Some(path) => Trainer::from_checkpoint(load_checkpoint(path)?)?,
        None => {
            let preset = match a.preset {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Desk => Preset::Desk,
            };
            let mut cfg = match &a.config {
                Some(path) => ExperimentConfig::load(path, preset)?,
                None => ExperimentConfig::preset(preset),
            };
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
            }
            Trainer::new(&cfg, &corpus)?
        }
    };
    if let Some(e) = a.epochs {
        trainer.config.max_epochs = e;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    trainer.vocab.save(a.out.join("vocab.txt"))?;
    let resumed = a.checkpoint.is_some();
    let log_path = a.out.join("log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let every = trainer.config.checkpoint_every;
    trainer.run(&corpus, valid.as_deref(), |entry, t| {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| pvgru::Error::io(&log_path, e))?;
        eprintln!(
            "epoch {:>4}  total {:.4}  ll {:.4}  r {:.4}  c {:.4}  ppl {:.3}",
            entry.epoch, entry.loss_total, entry.loss_ll, entry.loss_r, entry.loss_c, entry.train_ppl
        );
        if every > 0 && entry.epoch % every == 0 {
            t.checkpoint().save(a.out.join(format!("epoch-{}.ckpt", entry.epoch)))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(a.out.join("last.ckpt"))?;
    eprintln!("wrote {}", a.out.join("last.ckpt").display());
    Ok(())
}

fn evaluate_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => ckpt.vocab.clone(),
    };
    let corpus = load_corpus(&a.corpus)?;
    let vectors = a.vectors.as_deref().map(WordVectors::load).transpose()?;
    let opts = a.decode.options()?;
    let report = evaluate(&ckpt.model, &vocab, &corpus, vectors.as_ref(), &opts)?;
    print!("{}", report.metrics.to_key_value());
    let mut json = serde_json::to_value(&report)?;
    if let Some(other) = &a.compare {
        let other = load_checkpoint(other)?;
        let theirs = evaluate(&other.model, &other.vocab, &corpus, vectors.as_ref(), &opts)?;
        let p = compare(&report, &theirs, a.resamples, a.decode.seed)?;
        for (k, v) in &p {
            println!("p_{k}={v:.6}");
        }
        json["comparison"] = serde_json::json!({ "metrics": theirs.metrics, "p_values": p });
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&json)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let opts = a.decode.options()?;
    let contexts: Vec<Vec<String>> = match &a.corpus {
        Some(p) => load_corpus(p)?
            .into_iter()
            .map(|d| d.context.iter().map(|u| u.join(" ")).collect())
            .collect(),
        None if a.context.is_empty() => bail!("give at least one --context utterance or a --corpus"),
        None => vec![a.context.clone()],
    };
    for c in contexts {
        println!("{}", respond(&ckpt.model, &ckpt.vocab, &c, &opts)?);
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let rows = export_variables(&ckpt.model, &ckpt.vocab, &corpus, a.mode.into(), a.seed, &mut out)?;
    out.flush()?;
    eprintln!("{rows} rows");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let dims = GradcheckDims {
        d: a.dim,
        ..GradcheckDims::default()
    };
    let mut failed = false;
    for (name, r) in gradcheck_suite(dims, a.seed)? {
        let (worst, idx) = r.worst.clone().unwrap_or_default();
        println!(
            "{} {name:<14} max_rel_error={:.3e} worst={worst}[{idx}] analytic={:.6e} numeric={:.6e} elements={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.analytic_at_worst,
            r.numeric_at_worst,
            r.elements_checked
        );
        failed |= !r.passed;
    }
    if failed {
        std::process::exit(1);
    }
    Ok(())
}
