use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dact_core::complexity::{self, BenchDims, CSV_HEADER};
use dact_core::encoder::load_embeddings;
use dact_core::train::{fit, model_for_corpus};
use dact_core::viz::{mass_beyond, write_ppm, AttentionExport};
use dact_core::{
    evaluate, gen_synthetic, load_checkpoint, load_corpus, save_checkpoint, split_dialogue, write_corpus, Corpus,
    Model, OnlinePredictor, Setting, Split, SyntheticSpec,
};
use serde_json::json;

mod config;

use config::ConfigFlags;

#[derive(Debug, Parser)]
#[command(name = "dact", version, about = "Dialogue-act recognition with locality-biased self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics report
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for model.ckpt and metrics.json
        #[arg(long)]
        out: PathBuf,
        /// Pretrained embeddings, one `token v1 .. vd` per line
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = SettingArg::Both)]
        setting: SettingArg,
        /// Also write the report here
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Label utterances read from stdin, one per line, as they arrive
    PredictOnline {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export attention weights of one window as JSON and PPM heatmaps
    VizAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dialogue: String,
        /// 0-based window index within the dialogue
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
        /// Override the checkpoint's bias setting
        #[arg(long, value_name = "BOOL")]
        use_bias: Option<bool>,
        /// Pixels per matrix cell
        #[arg(long, default_value_t = 24)]
        cell: usize,
    },
    /// Count multiply-accumulates of the recurrent and attention context layers
    BenchComplexity {
        #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        model_dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// CSV destination; stdout when absent
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic corpus whose answers and statements need context
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SettingArg {
    Offline,
    Online,
    Both,
}

/// Errors in how the tool was invoked, reported with exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Usage(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(corpus_path: &Path, out: &Path, embeddings: Option<&Path>, flags: &ConfigFlags) -> Result<()> {
    existing(corpus_path, "corpus")?;
    let config = flags.resolve()?;
    let corpus = load_corpus(corpus_path)?;
    eprintln!("corpus: {}", corpus.stats());
    let mut model = model_for_corpus(&corpus, config)?;
    if let Some(path) = embeddings {
        existing(path, "embeddings file")?;
        let n = load_embeddings(path, &model.vocab, &mut model.encoder.embedding)?;
        eprintln!("loaded {n} pretrained embedding rows");
    }
    let report = fit(&mut model, &corpus, |e| {
        let valid = e.valid_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        eprintln!(
            "epoch {:>3}  loss {:.4}  train acc {:.4}  valid acc {valid}",
            e.epoch, e.train_loss, e.train_accuracy
        );
    })?;
    std::fs::create_dir_all(out)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;

    let test = if corpus.test.is_empty() {
        json!(null)
    } else {
        json!({
            "offline": evaluate(&model, &corpus.test, Setting::Offline)?,
            "online": evaluate(&model, &corpus.test, Setting::Online)?,
        })
    };
    let best_valid = report.epochs.get(report.best_epoch.saturating_sub(1)).and_then(|e| e.valid_accuracy);
    let metrics = json!({
        "config": model.config,
        "corpus": corpus.stats(),
        "vocab_size": model.vocab.len(),
        "labels": model.labels.names(),
        "epochs": report.epochs,
        "best_epoch": report.best_epoch,
        "best_valid_accuracy": best_valid,
        "test": test,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    if let Some(t) = metrics["test"].as_object() {
        eprintln!(
            "test accuracy: offline {:.4}  online {:.4}",
            t["offline"]["accuracy"].as_f64().unwrap_or(0.0),
            t["online"]["accuracy"].as_f64().unwrap_or(0.0)
        );
    }
    eprintln!("wrote {} and {}", ckpt.display(), out.join("metrics.json").display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    existing(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_eval(checkpoint: &Path, corpus_path: &Path, split: &str, setting: SettingArg, output: Option<&Path>) -> Result<()> {
    let split: Split = split.parse().map_err(|e: dact_core::Error| Usage(e.to_string()))?;
    existing(corpus_path, "corpus")?;
    let model = load_model(checkpoint)?;
    let corpus = load_corpus(corpus_path)?;
    let dialogues = corpus.split(split);
    if dialogues.is_empty() {
        bail!("split {} is empty", split.as_str());
    }
    let mut report = serde_json::Map::new();
    report.insert("split".into(), json!(split.as_str()));
    if setting != SettingArg::Online {
        report.insert("offline".into(), serde_json::to_value(evaluate(&model, dialogues, Setting::Offline)?)?);
    }
    if setting != SettingArg::Offline {
        report.insert("online".into(), serde_json::to_value(evaluate(&model, dialogues, Setting::Online)?)?);
    }
    let report = serde_json::Value::Object(report);
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = output {
        write_json(path, &report)?;
    }
    Ok(())
}

const ERROR_TOKEN: &str = "<error>";

fn cmd_predict_online(checkpoint: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let mut predictor = OnlinePredictor::new(&model);
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if input.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let label = match std::str::from_utf8(&buf) {
            Ok(text) if !text.trim().is_empty() => match predictor.push(text.trim_end_matches(['\n', '\r'])) {
                Ok(id) => model.labels.name(id).to_string(),
                Err(e) => {
                    eprintln!("line {line_no}: {e}");
                    ERROR_TOKEN.to_string()
                }
            },
            Ok(_) => {
                eprintln!("line {line_no}: empty utterance");
                ERROR_TOKEN.to_string()
            }
            Err(e) => {
                eprintln!("line {line_no}: {e}");
                ERROR_TOKEN.to_string()
            }
        };
        writeln!(out, "{label}")?;
        out.flush()?;
    }
    Ok(())
}

fn cmd_viz(
    checkpoint: &Path,
    corpus_path: &Path,
    dialogue_id: &str,
    window_index: usize,
    out: &Path,
    use_bias: Option<bool>,
    cell: usize,
) -> Result<()> {
    existing(corpus_path, "corpus")?;
    let model = load_model(checkpoint)?;
    let corpus: Corpus = load_corpus(corpus_path)?;
    let dialogue = corpus
        .find(dialogue_id)
        .ok_or_else(|| Usage(format!("no dialogue with id {dialogue_id:?} in {}", corpus_path.display())))?;
    let windows = split_dialogue(&dialogue.id, dialogue.len(), model.config.window, model.config.padding)?;
    let window = windows.get(window_index).ok_or_else(|| {
        Usage(format!(
            "window index {window_index} out of range: dialogue {dialogue_id:?} has {} windows (0-based)",
            windows.len()
        ))
    })?;
    let texts: Vec<&str> = window.indices.clone().map(|i| dialogue.utterances[i].text.as_str()).collect();
    let use_bias = use_bias.unwrap_or(model.config.use_bias);
    let maps = model.attention_maps(&texts, use_bias)?;

    std::fs::create_dir_all(out)?;
    for (h, m) in maps.heads.iter().enumerate() {
        write_ppm(&out.join(format!("head-{h}.ppm")), m, cell)?;
    }
    let mean = maps.head_mean();
    write_ppm(&out.join("mean.ppm"), &mean, cell)?;

    // same checkpoint with the prior toggled
    let distance = (model.config.center_bound.ceil() as usize) + 2;
    let with_bias = mass_beyond(&model.attention_maps(&texts, true)?.head_mean(), distance);
    let without_bias = mass_beyond(&model.attention_maps(&texts, false)?.head_mean(), distance);
    let mut export = serde_json::to_value(AttentionExport::new(window, &maps))?;
    export["acts"] = json!(window.indices.clone().map(|i| dialogue.utterances[i].act.as_str()).collect::<Vec<_>>());
    export["far_mass"] = json!({
        "distance": distance,
        "with_bias": with_bias,
        "without_bias": without_bias,
    });
    write_json(&out.join("attention.json"), &export)?;
    eprintln!(
        "window {window_index} of {dialogue_id}: {} utterances, mean weight beyond distance {distance}: {with_bias:.4} with bias, {without_bias:.4} without",
        window.len()
    );
    Ok(())
}

fn cmd_bench(lengths: &[usize], dims: BenchDims, output: Option<&Path>) -> Result<()> {
    let rows = complexity::measure(lengths, dims).map_err(|e| Usage(e.to_string()))?;
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    match output {
        Some(path) => write_file(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen(out: &Path, spec: SyntheticSpec) -> Result<()> {
    let syn = gen_synthetic(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_corpus(out, &syn.corpus)?;
    eprintln!("{}", syn.corpus.stats());
    eprintln!("context-free accuracy ceiling: {:.4}", syn.ceiling);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            corpus,
            out,
            embeddings,
            flags,
        } => cmd_train(&corpus, &out, embeddings.as_deref(), &flags),
        Command::Eval {
            checkpoint,
            corpus,
            split,
            setting,
            output,
        } => cmd_eval(&checkpoint, &corpus, &split, setting, output.as_deref()),
        Command::PredictOnline { checkpoint } => cmd_predict_online(&checkpoint),
        Command::VizAttention {
            checkpoint,
            corpus,
            dialogue,
            window,
            out,
            use_bias,
            cell,
        } => cmd_viz(&checkpoint, &corpus, &dialogue, window, &out, use_bias, cell),
        Command::BenchComplexity {
            lengths,
            model_dim,
            heads,
            head_dim,
            repeats,
            output,
        } => cmd_bench(
            &lengths,
            BenchDims {
                model_dim,
                heads,
                head_dim,
                use_bias: true,
                repeats,
            },
            output.as_deref(),
        ),
        Command::GenSynthetic {
            out,
            seed,
            train,
            valid,
            test,
            vocab_size,
        } => {
            let d = SyntheticSpec::default();
            cmd_gen(
                &out,
                SyntheticSpec {
                    seed: seed.unwrap_or(d.seed),
                    train_dialogues: train.unwrap_or(d.train_dialogues),
                    valid_dialogues: valid.unwrap_or(d.valid_dialogues),
                    test_dialogues: test.unwrap_or(d.test_dialogues),
                    vocab_size: vocab_size.unwrap_or(d.vocab_size),
                    ..d
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

