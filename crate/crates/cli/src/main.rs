//! Pipeline driver: synth -> bpe-train -> train (pretrain/stage1/stage2 or
//! direct) -> decode -> score/confusion -> report.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, missing
//! prerequisites), 2 runtime error.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use taitone::corpus::{gen_corpus, gen_source_corpus, load_utterances, read_manifest};
use taitone::decode::{beam_decode, greedy_decode};
use taitone::eval::{corpus_cer, render_report, tone_confusion, ReportRow, ReportSpec, TextForm};
use taitone::model::{load_checkpoint, save_checkpoint, ModelParams, StageTag};
use taitone::orthography::{normalize_text_with_report, HanTailoLexicon, MappingTable};
use taitone::tokenizer::BpeModel;
use taitone::training::{
    pretrain_encoder, train_stage, write_epoch_log, Dataset, Stage, TrainingError,
};

use config::{parse_freeze, RunConfig};

#[derive(Parser)]
#[command(
    name = "taitone",
    version,
    about = "Two-stage transducer ASR pipeline on a synthetic tonal language"
)]
struct Cli {
    /// Config file with [section] key = value lines; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. --set corpus.train_size=80 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Random seed driving corpus, init and shuffling (config: run.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory for outputs (config: paths.out_dir)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the target corpus and the pretraining source corpus
    Synth(SynthArgs),
    /// Train the byte-level BPE tokenizer from manifest transcripts
    BpeTrain(BpeTrainArgs),
    /// Train one stage: pretrain, stage1, stage2 or direct
    Train(TrainArgs),
    /// Decode a manifest into a hypothesis file
    Decode(DecodeArgs),
    /// Score hypotheses against a manifest field with CER
    Score(ScoreArgs),
    /// Tone-substitution confusion matrices from paired texts
    Confusion(ConfusionArgs),
    /// Apply a mapping table (romanized segments, numerals, variants)
    Normalize(NormalizeArgs),
    /// Render the CER/Rel. table plus provenance for a run
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus directory (default: <out_dir>/corpus)
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct BpeTrainArgs {
    /// Manifest(s) whose transcripts form the training corpus (repeatable)
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// Output model file (config: tokenizer.vocab_size sets the size)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// pretrain | stage1 | stage2 | direct
    #[arg(long)]
    stage: String,
    /// Checkpoint to start from; stage2 requires a stage1 checkpoint here
    #[arg(long)]
    init: Option<PathBuf>,
    /// Components to freeze this stage: encoder,prediction,joint
    #[arg(long)]
    freeze: Option<String>,
    /// Training manifest (source-language manifest for --stage pretrain)
    #[arg(long)]
    train_manifest: PathBuf,
    /// Trained BPE model file
    #[arg(long)]
    tokenizer: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Epoch log (JSON-lines); defaults next to the checkpoint
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Beam width; 1 is greedy (config: decode.beam)
    #[arg(long)]
    beam: Option<usize>,
    /// Per-frame emission cap (config: decode.max_symbols)
    #[arg(long)]
    max_symbols: Option<usize>,
    /// Output hypothesis file (JSON-lines {id, hyp_text})
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Field {
    Tailo,
    Han,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference manifest
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis file from `decode`
    #[arg(long)]
    hyp: PathBuf,
    /// Which transcript field to score against
    #[arg(long, value_enum, default_value = "han")]
    field: Field,
    /// Per-utterance alignment CSV
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ConfusionArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, value_enum, default_value = "han")]
    field: Field,
    /// Han-to-Tai-lo lexicon TSV; required when --field han
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Prefix for <prefix>_counts.csv and <prefix>_normalized.csv
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct NormalizeArgs {
    /// Mapping table TSV (romanized segments and variant characters)
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSV: header `model,<split>,...`, one row per model
    #[arg(long)]
    results: PathBuf,
    /// Baseline row name for the Rel. columns
    #[arg(long)]
    baseline: String,
    /// Confusion CSVs to copy into the report directory (repeatable)
    #[arg(long = "confusion")]
    confusion: Vec<PathBuf>,
    /// Report directory (default: <out_dir>/report)
    #[arg(long)]
    dir: Option<PathBuf>,
}

enum CliError {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Validation(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Validation)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.overrides {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set needs KEY=VALUE, got '{assignment}'")))?;
        config
            .set(key.trim(), value.trim())
            .map_err(CliError::Validation)?;
    }
    if let Some(seed) = cli.seed {
        config.set("run.seed", &seed.to_string()).map_err(CliError::Validation)?;
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }

    match cli.command {
        Command::Synth(args) => cmd_synth(&config, args),
        Command::BpeTrain(args) => cmd_bpe_train(&config, args),
        Command::Train(args) => cmd_train(&config, args),
        Command::Decode(args) => cmd_decode(&config, args),
        Command::Score(args) => cmd_score(args),
        Command::Confusion(args) => cmd_confusion(args),
        Command::Normalize(args) => cmd_normalize(args),
        Command::Report(args) => cmd_report(&config, args),
    }
}

fn cmd_synth(config: &RunConfig, args: SynthArgs) -> Result<(), CliError> {
    let dir = args.dir.unwrap_or_else(|| config.out_dir.join("corpus"));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::from)?;
    let target = gen_corpus(&config.corpus, &config.sizes, &dir)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let source = gen_source_corpus(&config.corpus, config.source_overlap, &config.source_sizes, &dir)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    for (split, entries) in target.entries.iter().chain(source.entries.iter()) {
        let total_frames: usize = entries.iter().map(|e| e.num_frames).sum();
        println!(
            "{split}: {} utterances, {total_frames} frames",
            entries.len()
        );
    }
    println!("corpus written to {}", dir.display());
    Ok(())
}

fn cmd_bpe_train(config: &RunConfig, args: BpeTrainArgs) -> Result<(), CliError> {
    let mut lines = Vec::new();
    for manifest in &args.manifests {
        let entries =
            read_manifest(manifest).map_err(|e| CliError::Validation(e.to_string()))?;
        for entry in entries {
            lines.push(entry.tailo_text);
            lines.push(entry.han_text);
        }
    }
    let model = BpeModel::train(&lines, config.vocab_size)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    model
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "tokenizer: vocab {} ({} merges) -> {}",
        model.vocab_size(),
        model.num_merges(),
        args.out.display()
    );
    Ok(())
}

fn load_tokenizer(path: &Path) -> Result<BpeModel, CliError> {
    BpeModel::load(path).map_err(|e| CliError::Validation(format!("tokenizer {}: {e}", path.display())))
}

fn load_ckpt(path: &Path) -> Result<ModelParams, CliError> {
    load_checkpoint(path)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))
}

fn cmd_train(config: &RunConfig, args: TrainArgs) -> Result<(), CliError> {
    let stage: Stage = args.stage.parse().map_err(CliError::Validation)?;
    let mut train_config = config.train.clone();
    if let Some(freeze) = &args.freeze {
        train_config.freeze = parse_freeze(freeze).map_err(CliError::Validation)?;
    }

    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let params = match (&args.init, stage) {
        (Some(path), _) => {
            let params = load_ckpt(path)?;
            if stage == Stage::Stage2 && params.stage != StageTag::Stage1 {
                return invalid(format!(
                    "--stage stage2 expects a stage1 checkpoint, got one tagged '{}' ({})",
                    params.stage.name(),
                    path.display()
                ));
            }
            params
        }
        (None, Stage::Stage2) => {
            return invalid(
                "--stage stage2 requires --init pointing at a stage1 checkpoint (run --stage stage1 first)",
            );
        }
        (None, _) => {
            let mut rng = rand_seed(config.seed);
            ModelParams::init(config.model_dims(tokenizer.vocab_size()), &mut rng)
        }
    };

    let utterances = load_utterances(&args.train_manifest)
        .map_err(|e| CliError::Validation(format!("manifest {}: {e}", args.train_manifest.display())))?;

    let outcome = if stage == Stage::Pretrain {
        pretrain_encoder(params, &utterances, &tokenizer, &train_config)
    } else {
        let dataset = Dataset::new(utterances, stage.label_field(), train_config.max_frames)
            .map_err(to_cli_error)?;
        if dataset.excluded() > 0 {
            println!(
                "excluded {} utterances over the {}-frame cap",
                dataset.excluded(),
                train_config.max_frames
            );
        }
        train_stage(params, &dataset, &tokenizer, &train_config, stage)
    }
    .map_err(to_cli_error)?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    save_checkpoint(&outcome.params, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let log_path = args
        .log
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    write_epoch_log(&log_path, &outcome.log)
        .with_context(|| format!("writing {}", log_path.display()))?;
    let last = outcome.log.last();
    println!(
        "{} done: {} optimizer steps, final mean loss {:.4} -> {}",
        stage.name(),
        outcome.optimizer_steps,
        last.map_or(f64::NAN, |l| l.mean_loss),
        args.out.display()
    );
    Ok(())
}

fn to_cli_error(e: TrainingError) -> CliError {
    match e {
        TrainingError::VocabMismatch { .. } | TrainingError::EmptyDataset { .. } => {
            CliError::Validation(e.to_string())
        }
        other => CliError::Runtime(anyhow::Error::new(other)),
    }
}

fn rand_seed(seed: u64) -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Serialize, Deserialize)]
struct HypEntry {
    id: String,
    hyp_text: String,
}

fn cmd_decode(config: &RunConfig, args: DecodeArgs) -> Result<(), CliError> {
    let params = load_ckpt(&args.ckpt)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    if tokenizer.vocab_size() != params.dims.vocab_size {
        return invalid(format!(
            "tokenizer vocab {} does not match checkpoint vocab {}",
            tokenizer.vocab_size(),
            params.dims.vocab_size
        ));
    }
    let utterances = load_utterances(&args.manifest)
        .map_err(|e| CliError::Validation(format!("manifest {}: {e}", args.manifest.display())))?;
    let beam = args.beam.unwrap_or(config.beam);
    let max_symbols = args.max_symbols.unwrap_or(config.max_symbols);

    let hyps: Result<Vec<HypEntry>, String> = utterances
        .par_iter()
        .map(|utt| {
            let ids = if beam <= 1 {
                greedy_decode(&params, &utt.features, max_symbols)
            } else {
                beam_decode(&params, &utt.features, beam, max_symbols)
            }
            .map_err(|e| format!("{}: {e}", utt.id))?;
            let text = tokenizer
                .decode(&ids)
                .map_err(|e| format!("{}: {e}", utt.id))?;
            Ok(HypEntry {
                id: utt.id.clone(),
                hyp_text: text.text,
            })
        })
        .collect();
    let hyps = hyps.map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;

    let mut out = String::new();
    for hyp in &hyps {
        out.push_str(&serde_json::to_string(hyp).expect("hyp serializes"));
        out.push('\n');
    }
    fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("decoded {} utterances -> {}", hyps.len(), args.out.display());
    Ok(())
}

fn read_refs(manifest: &Path, field: Field) -> Result<BTreeMap<String, String>, CliError> {
    let entries = read_manifest(manifest)
        .map_err(|e| CliError::Validation(format!("manifest {}: {e}", manifest.display())))?;
    Ok(entries
        .into_iter()
        .map(|e| {
            let text = match field {
                Field::Tailo => e.tailo_text,
                Field::Han => e.han_text,
            };
            (e.id, text)
        })
        .collect())
}

fn read_hyps(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("hypothesis file {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let entry: HypEntry = serde_json::from_str(line).map_err(|e| {
            CliError::Validation(format!("hypothesis file {} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.insert(entry.id, entry.hyp_text);
    }
    Ok(out)
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let refs = read_refs(&args.reference, args.field)?;
    let hyps = read_hyps(&args.hyp)?;
    let (value, per_utt) =
        corpus_cer(&refs, &hyps).map_err(|e| CliError::Validation(e.to_string()))?;
    println!("CER {value:.2}%");
    if let Some(csv_path) = &args.out_csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "S", "D", "I", "C", "CER"]).map_err(to_csv_err)?;
        for (id, stats) in &per_utt {
            w.write_record([
                id.clone(),
                stats.substitutions.to_string(),
                stats.deletions.to_string(),
                stats.insertions.to_string(),
                stats.ref_len().to_string(),
                format!("{:.2}", stats.cer_percent()),
            ])
            .map_err(to_csv_err)?;
        }
        let bytes = w.into_inner().expect("csv flush");
        fs::write(csv_path, bytes).with_context(|| format!("writing {}", csv_path.display()))?;
        println!("alignment stats -> {}", csv_path.display());
    }
    Ok(())
}

fn to_csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(anyhow::Error::new(e))
}

fn cmd_confusion(args: ConfusionArgs) -> Result<(), CliError> {
    let refs = read_refs(&args.reference, args.field)?;
    let hyps = read_hyps(&args.hyp)?;
    let ids: Vec<&String> = refs.keys().collect();
    let ref_texts: Vec<&String> = ids.iter().map(|id| &refs[*id]).collect();
    let empty = String::new();
    let hyp_texts: Vec<&String> = ids.iter().map(|id| hyps.get(*id).unwrap_or(&empty)).collect();

    let (form, lexicon) = match args.field {
        Field::Tailo => (TextForm::Tailo, None),
        Field::Han => {
            let path = args.lexicon.as_ref().ok_or_else(|| {
                CliError::Validation("--field han needs --lexicon for tone extraction".into())
            })?;
            let lex = HanTailoLexicon::load(path)
                .map_err(|e| CliError::Validation(format!("lexicon {}: {e}", path.display())))?;
            (TextForm::Han, Some(lex))
        }
    };
    let confusion = tone_confusion(&ref_texts, &hyp_texts, form, lexicon.as_ref())
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let counts_path = args.out_prefix.with_file_name(format!(
        "{}_counts.csv",
        args.out_prefix.file_name().unwrap_or_default().to_string_lossy()
    ));
    let normalized_path = args.out_prefix.with_file_name(format!(
        "{}_normalized.csv",
        args.out_prefix.file_name().unwrap_or_default().to_string_lossy()
    ));
    fs::write(&counts_path, confusion.counts_csv())
        .with_context(|| format!("writing {}", counts_path.display()))?;
    fs::write(&normalized_path, confusion.normalized_csv())
        .with_context(|| format!("writing {}", normalized_path.display()))?;
    println!(
        "{} substitution events -> {} / {}",
        confusion.total(),
        counts_path.display(),
        normalized_path.display()
    );
    Ok(())
}

fn cmd_normalize(args: NormalizeArgs) -> Result<(), CliError> {
    let table = MappingTable::load(&args.table)
        .map_err(|e| CliError::Validation(format!("table {}: {e}", args.table.display())))?;
    let input = fs::read_to_string(&args.input)
        .map_err(|e| CliError::Validation(format!("input {}: {e}", args.input.display())))?;
    let (output, report) = normalize_text_with_report(&input, &table);
    fs::write(&args.output, output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    println!(
        "replaced {} segments, converted {} digit runs, {} variants; {} romanized segments left unmatched",
        report.segments_replaced,
        report.digit_runs_converted,
        report.variants_applied,
        report.unknown_segments
    );
    Ok(())
}

fn cmd_report(config: &RunConfig, args: ReportArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.results)
        .map_err(|e| CliError::Validation(format!("results {}: {e}", args.results.display())))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CliError::Validation(format!("results csv: {e}")))?
        .clone();
    if headers.len() < 2 {
        return invalid("results csv needs a 'model' column plus at least one split column");
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Validation(format!("results csv: {e}")))?;
        let name = record.get(0).unwrap_or_default().to_string();
        let cers: Result<Vec<f64>, _> = record.iter().skip(1).map(str::parse::<f64>).collect();
        let cers = cers.map_err(|e| {
            CliError::Validation(format!("results csv row '{name}': bad CER value ({e})"))
        })?;
        rows.push(ReportRow { name, cers });
    }
    let spec = ReportSpec {
        columns,
        rows,
        baseline: args.baseline.clone(),
    };
    let rendered = render_report(&spec).map_err(|e| CliError::Validation(e.to_string()))?;

    let dir = args.dir.unwrap_or_else(|| config.out_dir.join("report"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut generated = vec!["report.csv".to_string(), "report.txt".to_string()];
    fs::write(dir.join("report.csv"), &rendered.csv)
        .with_context(|| format!("writing {}", dir.join("report.csv").display()))?;
    fs::write(dir.join("report.txt"), &rendered.text)
        .with_context(|| format!("writing {}", dir.join("report.txt").display()))?;
    for source in &args.confusion {
        let name = source
            .file_name()
            .ok_or_else(|| CliError::Validation(format!("bad confusion path {}", source.display())))?;
        fs::copy(source, dir.join(name))
            .with_context(|| format!("copying {}", source.display()))?;
        generated.push(name.to_string_lossy().into_owned());
    }
    let provenance = serde_json::json!({
        "command": "report",
        "config_hash": config.hash(),
        "seed": config.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "baseline": args.baseline,
        "files": generated,
    });
    fs::write(
        dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance).expect("provenance serializes"),
    )
    .with_context(|| format!("writing {}", dir.join("provenance.json").display()))?;
    println!("report -> {}", dir.display());
    print!("{}", rendered.text);
    Ok(())
}
