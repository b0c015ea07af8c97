//! Command-line front end: ingest, train, build, generate, features, report.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{BaseError, NeuralBase};
use crate::config::{load_config, ConfigError, FeatureConfig, PipelineConfig};
use crate::features::{self, FeatureError, Normalization, Trajectory};
use crate::generate::{self, GenerateError};
use crate::midi::{self, MidiError};
use crate::score::{tokenize, Corpus, PreprocessConfig, ScoreError, TokenizedPiece};
use crate::twin::{self, TwinError, TwinModel};

pub const BASE_FILE_VERSION: &str = "nbase-base-v1";
pub const LOG_ENV: &str = "NBASE_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("missing {0} (pass the flag or set it in the config file)")]
    Missing(&'static str),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "nbase", version, about = "Segment-retrieval music generation pipeline")]
struct Cli {
    /// JSON pipeline config; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize a directory of MIDI files laid out as <dir>/<Composer>/<file>.mid
    Ingest(IngestArgs),
    /// Train the twin encoder on one composer's adjacent segment pairs
    Train(TrainArgs),
    /// Index every corpus segment with a trained model
    Build(BuildArgs),
    /// Generate songs by chained retrieval
    Generate(GenerateArgs),
    /// Extract feature trajectories from MIDI files
    Features(FeaturesArgs),
    /// Compare generated trajectories with corpus trajectories
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Segment length in tokens
    #[arg(long = "segment-length")]
    segment_length: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    composer: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed from the clock instead of the config
    #[arg(long, conflicts_with = "seed")]
    time_seed: bool,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Song i uses seed + i
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "seed")]
    time_seed: bool,
    /// Segments per song
    #[arg(long)]
    length: Option<usize>,
    #[arg(long = "top-k")]
    top_k: Option<usize>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Label for every trajectory; defaults to each file's composer directory
    #[arg(long)]
    origin: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long = "max-rows")]
    max_rows: Option<usize>,
    #[arg(long, value_parser = parse_normalization)]
    normalization: Option<Normalization>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_normalization(s: &str) -> std::result::Result<Normalization, String> {
    match s {
        "minmax" => Ok(Normalization::MinMax),
        "zscore" => Ok(Normalization::ZScore),
        _ => Err(format!("expected minmax or zscore, got {s:?}")),
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs the CLI and returns the process exit code: 0 success, 1 runtime
/// failure, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Missing(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, config),
        Command::Train(a) => cmd_train(a, config),
        Command::Build(a) => cmd_build(a, config),
        Command::Generate(a) => cmd_generate(a, config),
        Command::Features(a) => cmd_features(a, config),
        Command::Report(a) => cmd_report(a),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn time_seed() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)
}

/// A MIDI file found under an input directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiSource {
    pub path: PathBuf,
    /// Path relative to the input directory, without extension, `/`-separated.
    pub name: String,
    /// First directory component, or the input directory's own name for
    /// files at the top level.
    pub composer: String,
}

/// Every `.mid`/`.midi` file below `dir`, sorted by relative path.
pub fn find_midi_files(dir: &Path) -> Result<Vec<MidiSource>> {
    let mut stack = vec![dir.to_path_buf()];
    let mut files = Vec::new();
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|source| CliError::Io { path: d.clone(), source })?;
        for entry in entries {
            let entry = entry.map_err(|source| CliError::Io { path: d.clone(), source })?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
            {
                files.push(path);
            }
        }
    }
    let top = dir.file_name().and_then(|n| n.to_str()).unwrap_or("Unknown").to_string();
    let mut out: Vec<MidiSource> = files
        .into_iter()
        .map(|path| {
            let rel = path.strip_prefix(dir).unwrap_or(&path).with_extension("");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            let composer = if parts.len() >= 2 { parts[0].clone() } else { top.clone() };
            MidiSource { name: parts.join("/"), composer, path }
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

fn load_notes(src: &MidiSource) -> Result<(Vec<midi::NoteEvent>, u16, u32)> {
    let bytes = read(&src.path)?;
    let file = midi::parse_smf(&bytes).map_err(|source| CliError::Midi { path: src.path.clone(), source })?;
    let (notes, tempo) = midi::extract_notes(&file);
    Ok((notes, file.ticks_per_quarter, tempo))
}

/// Tokenizes every readable MIDI file under `dir`; unreadable files are
/// skipped with a warning.
pub fn ingest_dir(dir: &Path, config: PreprocessConfig) -> Result<Corpus> {
    let mut pieces = Vec::new();
    for src in find_midi_files(dir)? {
        let (notes, tpq, tempo) = match load_notes(&src) {
            Ok(v) => v,
            Err(e) => {
                warn!("skipping {e}");
                continue;
            }
        };
        let tokens = tokenize(&notes, config.grouping(tpq));
        info!("{}: {} tokens ({})", src.name, tokens.len(), src.composer);
        pieces.push(TokenizedPiece { composer: src.composer, title: src.name, tpq, tempo, tokens });
    }
    if pieces.is_empty() {
        return Err(CliError::Other(format!("no readable MIDI files under {}", dir.display())));
    }
    Ok(Corpus::from_tokenized(config, &pieces)?)
}

fn cmd_ingest(a: IngestArgs, mut config: PipelineConfig) -> Result<()> {
    let input = a.input.or(config.paths.corpus_dir.take()).ok_or(CliError::Missing("--in"))?;
    let out = a.out.or(config.paths.corpus.take()).ok_or(CliError::Missing("--out"))?;
    if let Some(t) = a.segment_length {
        config.preprocess.segment_length = t;
    }
    let corpus = ingest_dir(&input, config.preprocess)?;
    info!("{} pieces, {} tokens in vocabulary, {} segments", corpus.pieces.len(), corpus.vocab.len(), corpus.segments().len());
    write(&out, &corpus.to_json())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::from_json(&read(path)?).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<TwinModel> {
    twin::load_checkpoint(&read(path)?).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs, mut config: PipelineConfig) -> Result<()> {
    let corpus_path = a.corpus.or(config.paths.corpus.take()).ok_or(CliError::Missing("--corpus"))?;
    let composer = a.composer.or(config.paths.composer.take()).ok_or(CliError::Missing("--composer"))?;
    let out = a.out.or(config.paths.checkpoint.take()).ok_or(CliError::Missing("--out"))?;
    let mut tc = config.train;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if a.time_seed {
        tc.seed = time_seed();
        info!("using clock seed {}", tc.seed);
    }
    let corpus = load_corpus(&corpus_path)?;
    if !corpus.composers().contains(&composer.as_str()) {
        return Err(CliError::Other(format!(
            "composer {composer:?} is not in the corpus (have: {})",
            corpus.composers().join(", ")
        )));
    }
    let (model, history) = twin::train_on_composer(&corpus, &composer, &tc, |s| {
        info!("epoch {:>4}  base {:.6}  uniformity {:.6}", s.epoch, s.base_loss, s.uniformity);
    })?;
    if let Some(l) = history.final_base_loss() {
        info!("final base loss {l:.6}");
    }
    write(&out, &twin::save_checkpoint(&model))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseFile {
    version: String,
    /// Relative paths are resolved against the base file's directory.
    corpus: PathBuf,
    model: PathBuf,
    index: serde_json::Value,
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf()))
}

/// `target` relative to `dir` when it lies inside it, otherwise absolute.
fn reference_from(dir: &Path, target: &Path) -> PathBuf {
    let (dir, target) = (absolute(dir), absolute(target));
    match target.strip_prefix(&dir) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => target,
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes the base file: the bucket index plus references to the model and
/// corpus it was built from.
pub fn save_base(base: &NeuralBase, out: &Path, corpus_path: &Path, model_path: &Path) -> Result<()> {
    let index: serde_json::Value =
        serde_json::from_slice(&base.to_json()).map_err(|source| CliError::Json { path: out.to_path_buf(), source })?;
    let dir = parent_dir(out);
    if !dir.exists() {
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    }
    let doc = BaseFile {
        version: BASE_FILE_VERSION.to_string(),
        corpus: reference_from(&dir, corpus_path),
        model: reference_from(&dir, model_path),
        index,
    };
    let bytes = serde_json::to_vec_pretty(&doc).map_err(|source| CliError::Json { path: out.to_path_buf(), source })?;
    write(out, &bytes)
}

pub fn load_base(path: &Path) -> Result<NeuralBase> {
    let doc: BaseFile = serde_json::from_slice(&read(path)?).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    if doc.version != BASE_FILE_VERSION {
        return Err(CliError::Other(format!("{}: unsupported base file version {:?}", path.display(), doc.version)));
    }
    let dir = parent_dir(path);
    let corpus = load_corpus(&dir.join(&doc.corpus))?;
    let model = load_model(&dir.join(&doc.model))?;
    let index = serde_json::to_vec(&doc.index).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    Ok(NeuralBase::from_json(&index, model, corpus)?)
}

fn cmd_build(a: BuildArgs, mut config: PipelineConfig) -> Result<()> {
    let corpus_path = a.corpus.or(config.paths.corpus.take()).ok_or(CliError::Missing("--corpus"))?;
    let model_path = a.model.or(config.paths.checkpoint.take()).ok_or(CliError::Missing("--model"))?;
    let out = a.out.or(config.paths.base.take()).ok_or(CliError::Missing("--out"))?;
    let base = NeuralBase::build(load_model(&model_path)?, load_corpus(&corpus_path)?)?;
    let stats = base.stats();
    info!(
        "{} segments in {} occupied buckets, occupancy entropy {:.4}",
        base.len(),
        stats.histogram.iter().filter(|&&c| c > 0).count(),
        stats.entropy
    );
    save_base(&base, &out, &corpus_path, &model_path)
}

fn cmd_generate(a: GenerateArgs, mut config: PipelineConfig) -> Result<()> {
    let base_path = a.base.or(config.paths.base.take()).ok_or(CliError::Missing("--base"))?;
    let out = a.out.or(config.paths.output_dir.take()).ok_or(CliError::Missing("--out"))?;
    let mut gc = config.generate;
    if let Some(s) = a.seed {
        gc.seed = s;
    }
    if a.time_seed {
        gc.seed = time_seed();
        info!("using clock seed {}", gc.seed);
    }
    if let Some(l) = a.length {
        gc.length_segments = l;
    }
    if let Some(k) = a.top_k {
        gc.top_k = k;
    }
    let base = load_base(&base_path)?;
    std::fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.clone(), source })?;
    for i in 0..a.count {
        let cfg = generate::GenerationConfig { seed: gc.seed.wrapping_add(i as u64), ..gc.clone() };
        let song = generate::generate(&base, &cfg)?;
        let bytes = generate::render(&song, &base.corpus.vocab, &cfg)?;
        write(&out.join(format!("song_{i:03}.mid")), &bytes)?;
        let prov = serde_json::to_vec_pretty(&song.provenance())
            .map_err(|source| CliError::Json { path: out.clone(), source })?;
        write(&out.join(format!("song_{i:03}.json")), &prov)?;
        info!("song {i}: {} segments, {} tokens", song.trace.len(), song.token_ids.len());
    }
    Ok(())
}

/// One trajectory per MIDI file under `dir` with at least one full window.
pub fn midi_trajectories(
    dir: &Path,
    origin: Option<&str>,
    preprocess: &PreprocessConfig,
    normalization: Normalization,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for src in find_midi_files(dir)? {
        let (notes, tpq, _) = match load_notes(&src) {
            Ok(v) => v,
            Err(e) => {
                warn!("skipping {e}");
                continue;
            }
        };
        let rows = features::feature_rows(&notes, preprocess.grouping(tpq), tpq, preprocess.segment_length);
        if rows.is_empty() {
            warn!("skipping {}: shorter than one window", src.path.display());
            continue;
        }
        out.push(Trajectory {
            song_id: src.name,
            origin: origin.map(str::to_string).unwrap_or(src.composer),
            points: features::reduce_rows(&rows, normalization)?,
        });
    }
    Ok(out)
}

fn cmd_features(a: FeaturesArgs, config: PipelineConfig) -> Result<()> {
    let fc = FeatureConfig {
        max_rows: a.max_rows.unwrap_or(config.features.max_rows),
        normalization: a.normalization.unwrap_or(config.features.normalization),
        ..config.features
    };
    let all = midi_trajectories(&a.input, a.origin.as_deref(), &config.preprocess, fc.normalization)?;
    let total = all.len();
    let kept = features::filter_by_length(all, fc.max_rows);
    info!("{} of {total} trajectories have at most {} rows", kept.len(), fc.max_rows);
    write(&a.out, &features::export_csv(&kept))?;
    if let Some(svg) = &a.svg {
        write(svg, &features::render_svg(&kept, fc.svg_width, fc.svg_height))?;
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let generated = features::parse_csv(&read(&a.generated)?)?;
    let corpus = features::parse_csv(&read(&a.corpus)?)?;
    let report = features::corpus_report(&generated, &corpus)?;
    let bytes = serde_json::to_vec_pretty(&report).map_err(|source| CliError::Json { path: a.out.clone(), source })?;
    write(&a.out, &bytes)?;
    print!("{}", report.to_table());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(run(["nbase", "--help"]), 0);
        assert_eq!(run(["nbase", "train", "--bogus"]), 2);
        assert_eq!(run(["nbase", "frobnicate"]), 2);
        assert_eq!(run(["nbase"]), 2);
        assert_eq!(run(["nbase", "train", "--corpus", "x.json"]), 2);
    }

    #[test]
    fn missing_file_is_runtime_error() {
        assert_eq!(run(["nbase", "build", "--corpus", "/nonexistent/c.json", "--model", "/nonexistent/m.json", "--out", "/tmp/b.json"]), 1);
        assert_eq!(run(["nbase", "--config", "/nonexistent/cfg.json", "ingest", "--in", ".", "--out", "x"]), 1);
    }

    #[test]
    fn normalization_flag() {
        assert_eq!(parse_normalization("zscore"), Ok(Normalization::ZScore));
        assert!(parse_normalization("z").is_err());
    }
}
