use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tacl::analysis::{
    compare_models, export_heatmap, layerwise_self_similarity, sample_sentences, self_sim_matrix, AnalysisConfig,
    SelfSimReport, DEFAULT_SAMPLE,
};
use tacl::corpus::{build_vocab, encode, Corpus, EncodedCorpus, Vocab};
use tacl::model::{init_params, ModelConfig, ModelParams};
use tacl::trainer::{Recipe, TrainConfig, Trainer, FINAL_PREFIX};
use tacl::verify::{check_op, gradient_suite, selftest, FULL_MODEL};
use tacl::Error;

const VOCAB_FILE: &str = "vocab.txt";
const COMMAND_FILE: &str = "command.json";
const DEFAULT_SEED: u64 = 13;

#[derive(Parser, Debug)]
#[command(name = "tacl", version, about = "Token-aware contrastive continual pre-training and anisotropy analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ContinualRecipe {
    Tacl,
    #[value(name = "baseline-mt", alias = "baseline")]
    BaselineMt,
    #[value(name = "model-1")]
    Model1,
    #[value(name = "model-2")]
    Model2,
}

impl From<ContinualRecipe> for Recipe {
    fn from(r: ContinualRecipe) -> Self {
        match r {
            ContinualRecipe::Tacl => Recipe::Tacl,
            ContinualRecipe::BaselineMt => Recipe::BaselineMt,
            ContinualRecipe::Model1 => Recipe::Model1,
            ContinualRecipe::Model2 => Recipe::Model2,
        }
    }
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// TOML file with training config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a subword vocabulary from a corpus file.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        min_freq: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base encoder with MLM and NSP from random initialization.
    PretrainBase {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Continue training a base checkpoint with one of the recipes.
    TrainTacl {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        recipe: ContinualRecipe,
        /// Defaults to the vocabulary stored next to the base checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Resume from this periodic checkpoint inside `--out`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Layer-wise averaged self-similarity over a sentence sample.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SAMPLE)]
        sample: usize,
        #[arg(long)]
        include_specials: bool,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-similarity matrix of one sentence as CSV and PGM.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Defaults to the final layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        include_specials: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer difference between two analysis reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, conflicts_with = "full_model")]
        op: Option<String>,
        #[arg(long)]
        full_model: bool,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Loss oracles, closed forms and masking statistics.
    Selftest {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Check(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn error_json(e: &Error) -> Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Config { keys, messages } = e {
        v["keys"] = json!(keys);
        v["messages"] = json!(messages);
    }
    v
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config { .. })
}

fn vocab_for(explicit: Option<&Path>, ckpt: &Path) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
    }
}

fn load_corpus(path: &Path, vocab: &Vocab) -> Result<EncodedCorpus, Error> {
    let corpus = Corpus::load(path)?;
    if corpus.num_sentences() == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(corpus.encode(vocab))
}

fn write_json(path: &Path, v: &Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn train_config(run: &RunArgs, base: TrainConfig) -> Result<TrainConfig, Error> {
    let text = match &run.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?,
        None => String::new(),
    };
    let mut overrides = run.overrides.clone();
    overrides.push(format!("recipe=\"{}\"", base.recipe.name()));
    if let Some(seed) = run.seed {
        overrides.push(format!("seed={seed}"));
    }
    TrainConfig::from_toml_with(&base, &text, &overrides)
}

/// Continual runs keep the base model's extents; recording them makes the
/// resolved config describe the model actually trained.
fn inherit_extents(cfg: TrainConfig, m: &ModelConfig) -> TrainConfig {
    TrainConfig {
        max_len: m.max_len,
        d_model: m.d_model,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        d_ff: m.d_ff,
        dropout_p: m.dropout_p,
        ..cfg
    }
}

fn check_extents(cfg: &TrainConfig, m: &ModelConfig) -> Result<(), Error> {
    let mut keys = Vec::new();
    let mut messages = Vec::new();
    let mut differ = |key: &str, set: String, base: String| {
        if set != base {
            keys.push(key.to_string());
            messages.push(format!("{key}: base checkpoint has {base}, got {set}"));
        }
    };
    differ("d_model", cfg.d_model.to_string(), m.d_model.to_string());
    differ("n_layers", cfg.n_layers.to_string(), m.n_layers.to_string());
    differ("n_heads", cfg.n_heads.to_string(), m.n_heads.to_string());
    differ("d_ff", cfg.d_ff.to_string(), m.d_ff.to_string());
    differ("dropout_p", cfg.dropout_p.to_string(), m.dropout_p.to_string());
    if cfg.max_len > m.max_len {
        keys.push("max_len".into());
        messages.push(format!("max_len: base checkpoint supports at most {}, got {}", m.max_len, cfg.max_len));
    }
    if keys.is_empty() {
        Ok(())
    } else {
        Err(Error::Config { keys, messages })
    }
}

fn summary(out: &Path, cfg: &TrainConfig, metrics: &[tacl::objectives::MetricsRecord]) -> Value {
    json!({
        "recipe": cfg.recipe.name(),
        "seed": cfg.seed,
        "steps": cfg.steps,
        "checkpoint": out.join(FINAL_PREFIX).display().to_string(),
        "final": metrics.last(),
    })
}

fn run(cli: Cli) -> Result<Value, Failure> {
    match cli.command {
        Command::BuildVocab { corpus, size, min_freq, out } => {
            let c = Corpus::load(&corpus)?;
            let vocab = build_vocab(c.sentences(), size, min_freq)?;
            vocab.save(&out)?;
            Ok(json!({ "vocab": out.display().to_string(), "size": vocab.len(), "min_freq": min_freq }))
        }
        Command::PretrainBase { corpus, vocab, run } => {
            let cfg = train_config(&run, TrainConfig::for_recipe(Recipe::PretrainBase))?;
            let v = Vocab::load(&vocab)?;
            let data = load_corpus(&corpus, &v)?;
            create_dir(&run.out)?;
            v.save(run.out.join(VOCAB_FILE))?;
            write_json(
                &run.out.join(COMMAND_FILE),
                &json!({ "command": "pretrain-base", "corpus": corpus, "vocab": vocab, "config": cfg }),
            )?;
            let params = init_params::<f32>(&cfg.model_config(v.len()), cfg.seed)?;
            let outcome = Trainer::new(cfg.clone(), params, &data, Some(&run.out))?.run(&data)?;
            Ok(summary(&run.out, &cfg, &outcome.metrics))
        }
        Command::TrainTacl { base, corpus, recipe, vocab, resume, run } => {
            let recipe = Recipe::from(recipe);
            let (params, _) = ModelParams::<f32>::load(resume.as_deref().unwrap_or(&base))?;
            let cfg = train_config(&run, inherit_extents(TrainConfig::for_recipe(recipe), &params.config))?;
            check_extents(&cfg, &params.config)?;
            let vocab_path = vocab_for(vocab.as_deref(), &base);
            let v = Vocab::load(&vocab_path)?;
            if params.config.vocab_size != v.len() {
                return Err(Failure::Runtime(Error::Invalid(format!(
                    "checkpoint vocabulary size {} does not match {} entries in {}",
                    params.config.vocab_size,
                    v.len(),
                    vocab_path.display()
                ))));
            }
            let data = load_corpus(&corpus, &v)?;
            create_dir(&run.out)?;
            v.save(run.out.join(VOCAB_FILE))?;
            write_json(
                &run.out.join(COMMAND_FILE),
                &json!({ "command": "train-tacl", "base": base, "corpus": corpus, "vocab": vocab_path, "resume": resume, "config": cfg }),
            )?;
            let trainer = match &resume {
                Some(ckpt) => Trainer::<f32>::resume(cfg.clone(), ckpt, &data, &run.out)?,
                None => Trainer::new(cfg.clone(), params, &data, Some(&run.out))?,
            };
            let outcome = trainer.run(&data)?;
            Ok(summary(&run.out, &cfg, &outcome.metrics))
        }
        Command::Analyze { ckpt, corpus, vocab, sample, include_specials, seed, tag, out } => {
            let (params, _) = ModelParams::<f32>::load(&ckpt)?;
            let v = Vocab::load(&vocab_for(vocab.as_deref(), &ckpt))?;
            let data = load_corpus(&corpus, &v)?;
            let sentences = sample_sentences(&data, sample, seed);
            let cfg = AnalysisConfig { include_specials, pad_to: None };
            let model_tag = tag.unwrap_or_else(|| ckpt.display().to_string());
            let report = layerwise_self_similarity(&params, &sentences, &cfg, &model_tag, &corpus.display().to_string())?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            report.save(&out)?;
            let mut snapshot = out.clone().into_os_string();
            snapshot.push(".command.json");
            write_json(
                Path::new(&snapshot),
                &json!({ "command": "analyze", "ckpt": ckpt, "corpus": corpus, "sample": sample, "seed": seed, "analysis": cfg }),
            )?;
            Ok(json!({ "report": out.display().to_string(), "seed": seed, "final_layer": report.final_layer() }))
        }
        Command::Heatmap { ckpt, text, vocab, layer, include_specials, out } => {
            let (params, _) = ModelParams::<f32>::load(&ckpt)?;
            if let Some(l) = layer.filter(|&l| l > params.config.n_layers) {
                return Err(Failure::Usage(format!("--layer {l} out of range 0..={}", params.config.n_layers)));
            }
            let v = Vocab::load(&vocab_for(vocab.as_deref(), &ckpt))?;
            let ids = encode(&text, &v);
            let m = self_sim_matrix(&params, &v, &ids, layer, include_specials)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let (csv, pgm) = export_heatmap(&m, &out)?;
            Ok(json!({
                "csv": csv.display().to_string(),
                "pgm": pgm.display().to_string(),
                "layer": layer.unwrap_or(params.config.n_layers),
                "tokens": m.tokens,
            }))
        }
        Command::Compare { a, b } => {
            let ra = SelfSimReport::load(&a)?;
            let rb = SelfSimReport::load(&b)?;
            Ok(serde_json::to_value(compare_models(&ra, &rb)?).map_err(Error::from)?)
        }
        Command::Gradcheck { op, full_model, instances, seed } => {
            let checks = match (op, full_model) {
                (Some(name), _) => vec![check_op(&name, instances, seed).map_err(|e| match e {
                    Error::Invalid(m) => Failure::Usage(m),
                    e => Failure::Runtime(e),
                })?],
                (None, true) => vec![check_op(FULL_MODEL, instances, seed)?],
                (None, false) => gradient_suite(instances, seed)?,
            };
            let passed = checks.iter().all(|c| c.passed);
            let v = json!({ "seed": seed, "instances": instances, "passed": passed, "checks": checks });
            if passed {
                Ok(v)
            } else {
                Err(Failure::Check(v))
            }
        }
        Command::Selftest { seed } => {
            let results = selftest(seed)?;
            let passed = results.iter().all(|r| r.passed);
            let v = json!({ "seed": seed, "passed": passed, "results": results });
            if passed {
                Ok(v)
            } else {
                Err(Failure::Check(v))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(message)) => {
            eprintln!("{}", json!({ "error": "usage", "message": message }));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
        Err(Failure::Check(v)) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            eprintln!("{}", json!({ "error": "check_failed", "message": "one or more checks failed" }));
            ExitCode::from(1)
        }
    }
}
