use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use qdetect::data::{encode_dataset, generate_synthetic, load_dataset, SynthConfig};
use qdetect::experiments::{
    declarative_analysis, declarative_table, prepare_data, render, run_grid, train_cell, write_tables,
    GridCell, GridOptions, GridSpec, RunConfig, TableFormat, LOG_FILE, MODEL_FILE,
};
use qdetect::features::MfccConfig;
use qdetect::model::{parse_cell, ModelRow, QuestionDetector, Regularizer};
use qdetect::training::{evaluate_scores, score_examples, EvalReport, ScoredExample, DEFAULT_THRESHOLD};

const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(name = "qdetect", version, about = "Question detection from text and audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: WAV files plus a records file.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one grid cell and report test F1.
    Train(TrainArgs),
    /// Score a dataset with a trained model and report F1.
    Eval {
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Add per-length-bucket lines to the report.
        #[arg(long)]
        buckets: bool,
        /// Also print the scores given to declarative questions.
        #[arg(long)]
        declarative: bool,
        /// Per-example score records; defaults to `<model-file>.scores.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run config whose `[data.mfcc]` section matches training.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Print one score record per input example.
    Predict {
        #[arg(long)]
        model_file: PathBuf,
        /// Records file or dataset directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Train the full 42-cell grid and write the result tables.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses one per core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Skip cells whose cached result matches the current settings.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Model family, e.g. text-c1 or condition-c2.
    #[arg(long)]
    model: ModelRow,
    #[arg(long, value_parser = parse_cell)]
    cell: qdetect::recurrent::CellKind,
    #[arg(long, default_value = "none")]
    reg: Regularizer,
    #[arg(long)]
    data: PathBuf,
    /// Seeds model initialization, dropout masks and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Run config (TOML) with optional `[data]`, `[model]` and `[train]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed),
        Command::Train(args) => train(&args),
        Command::Eval {
            model_file,
            data,
            buckets,
            declarative,
            out,
            config,
            threshold,
        } => {
            let out = out.unwrap_or_else(|| model_file.with_extension("scores.jsonl"));
            eval(&model_file, &data, buckets, declarative, &out, config.as_deref(), threshold)
        }
        Command::Predict {
            model_file,
            input,
            config,
            threshold,
        } => predict(&model_file, &input, config.as_deref(), threshold),
        Command::Grid {
            spec,
            out,
            jobs,
            resume,
        } => grid(&spec, &out, jobs, resume),
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate_synthetic(&cfg)?;
    corpus.write(out)?;
    println!("wrote {} examples to {}", corpus.examples.len(), out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = run_config(args.config.as_deref())?;
    let data = prepare_data(&args.data, &cfg.data)?;
    let cell = GridCell {
        row: args.model,
        cell: args.cell,
        regularizer: args.reg,
    };
    let model_cfg = cfg.model.model_config(cell, data.vocab.len(), data.audio_dim, args.seed);
    let train_cfg = qdetect::training::TrainConfig {
        seed: args.seed,
        ..cfg.train.clone()
    };
    log::info!(
        "training {cell} seed {}: {} train / {} valid / {} test examples",
        args.seed,
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    let mut trained = train_cell(&data, model_cfg, &train_cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let model_path = args.out.join(MODEL_FILE);
    trained.model.save(&model_path)?;
    trained.log.model_path = Some(model_path.display().to_string());
    trained.log.save(&args.out.join(LOG_FILE))?;
    let report_path = args.out.join(REPORT_FILE);
    fs::write(&report_path, serde_json::to_string_pretty(&trained.test)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "best epoch {} of {}, valid F1 {:.4}",
        trained.log.best_epoch,
        trained.log.epochs.len(),
        trained.log.best_valid_f1
    );
    print!("test {}", trained.test.render(true));
    Ok(())
}

/// Loads a model and encodes every example of `data` with its vocabulary.
fn load_scored(
    model_file: &Path,
    data: &Path,
    config: Option<&Path>,
) -> Result<(QuestionDetector<f64>, Vec<ScoredExample>, Vec<qdetect::data::EncodedExample>)> {
    let model = QuestionDetector::<f64>::load(model_file)?;
    let mfcc: MfccConfig = run_config(config)?.data.mfcc;
    if model.config.uses_audio() && mfcc.feature_dim() != model.config.audio_dim {
        bail!(
            "the audio settings produce {} features per chunk but the model expects {}",
            mfcc.feature_dim(),
            model.config.audio_dim
        );
    }
    let Some(vocab) = model.vocab.clone() else {
        bail!("{} carries no vocabulary", model_file.display());
    };
    let dataset = load_dataset(data)?;
    let encoded = encode_dataset(&dataset, &vocab, &mfcc)?;
    let scores = score_examples(&model, &encoded)?;
    Ok((model, scores, encoded))
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    id: &'a str,
    label: u8,
    score: f64,
    prediction: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<&'a str>,
}

fn score_lines(scores: &[ScoredExample], threshold: f64) -> Result<String> {
    let mut out = String::new();
    for s in scores {
        out.push_str(&serde_json::to_string(&ScoreRecord {
            id: &s.id,
            label: s.label,
            score: s.score,
            prediction: s.prediction(threshold),
            kind: s.kind.as_deref(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

fn eval(
    model_file: &Path,
    data: &Path,
    buckets: bool,
    declarative: bool,
    out: &Path,
    config: Option<&Path>,
    threshold: f64,
) -> Result<()> {
    let (model, scores, encoded) = load_scored(model_file, data, config)?;
    let report: EvalReport = evaluate_scores(&scores, threshold)?;
    print!("{}", report.render(buckets));
    fs::write(out, score_lines(&scores, threshold)?).with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote per-example scores to {}", out.display());
    if declarative {
        let row = model.config.row()?;
        let decl: Vec<_> = encoded
            .into_iter()
            .filter(|e| qdetect::experiments::is_declarative(e.kind.as_deref()))
            .collect();
        let table = declarative_analysis(&[(row, &model)], &decl)?;
        let texts = load_dataset(data)?
            .examples
            .into_iter()
            .map(|e| (e.id, e.text))
            .collect();
        let table = declarative_table(&table.with_texts(&texts), "Scores on declarative questions".into());
        println!();
        print!("{}", render(&table, TableFormat::Text)?);
    }
    Ok(())
}

fn predict(model_file: &Path, input: &Path, config: Option<&Path>, threshold: f64) -> Result<()> {
    let (_, scores, _) = load_scored(model_file, input, config)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(score_lines(&scores, threshold)?.as_bytes())?;
    Ok(())
}

fn grid(spec_path: &Path, out: &Path, jobs: usize, resume: bool) -> Result<()> {
    let spec = GridSpec::load(spec_path).with_context(|| format!("loading {}", spec_path.display()))?;
    let (result, stats) = run_grid(&spec, out, GridOptions { jobs, resume })?;
    let written = write_tables(&result, &out.join("tables"))?;
    println!(
        "cells: {} trained, {} cached, {} failed",
        stats.trained, stats.cached, stats.failed
    );
    print!(
        "{}",
        qdetect::experiments::emit_table(&result, qdetect::experiments::TableKind::Main, TableFormat::Text)?
    );
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}
