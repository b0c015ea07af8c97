//! Song generation by chained retrievals, and MIDI rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{BaseError, NeuralBase, SegmentRecord};
use crate::midi::{self, MidiError, DEFAULT_TEMPO_US_PER_QN};
use crate::score::{detokenize, ScoreError, SegmentRef, TokenVocab};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("the base needs at least two segments to generate")]
    BaseTooSmall,
    #[error("seed segment {0:?} is not in the base")]
    SeedNotFound(SegmentRef),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, GenerateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SeedMode {
    #[default]
    Random,
    Explicit { piece_id: u32, index: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub length_segments: usize,
    pub seed_mode: SeedMode,
    pub top_k: usize,
    pub seed: u64,
    /// `None` renders each token as half a quarter note.
    pub step_duration_ticks: Option<u64>,
    pub velocity: u8,
    pub tempo_us_per_qn: u32,
    pub ticks_per_quarter: u16,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            length_segments: 24,
            seed_mode: SeedMode::Random,
            top_k: 3,
            seed: 42,
            step_duration_ticks: None,
            velocity: 80,
            tempo_us_per_qn: DEFAULT_TEMPO_US_PER_QN,
            ticks_per_quarter: 480,
        }
    }
}

impl GenerationConfig {
    pub fn step_ticks(&self) -> u64 {
        self.step_duration_ticks.unwrap_or(u64::from(self.ticks_per_quarter) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_segments == 0 {
            return Err(GenerateError::Config("length_segments must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(GenerateError::Config("top_k must be at least 1".into()));
        }
        if self.velocity == 0 || self.velocity > 127 {
            return Err(GenerateError::Config("velocity must be in 1..=127".into()));
        }
        if self.ticks_per_quarter == 0 || self.ticks_per_quarter > 0x7FFF || self.step_ticks() == 0 {
            return Err(GenerateError::Config("ticks_per_quarter and step duration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub piece_id: u32,
    pub index: u32,
    pub composer: String,
    pub bucket: usize,
}

impl From<&SegmentRecord> for TraceEntry {
    fn from(r: &SegmentRecord) -> Self {
        Self { piece_id: r.piece_id, index: r.index, composer: r.composer.clone(), bucket: r.bucket }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSong {
    pub token_ids: Vec<u32>,
    pub trace: Vec<SegmentRecord>,
    pub config: GenerationConfig,
}

/// Sidecar document describing where each segment of a song came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config: GenerationConfig,
    pub trace: Vec<TraceEntry>,
}

impl GeneratedSong {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.config.seed,
            config: self.config.clone(),
            trace: self.trace.iter().map(TraceEntry::from).collect(),
        }
    }
}

/// Picks a seed segment and chains `length_segments - 1` retrievals, each
/// querying with the previous selection.
pub fn generate(base: &NeuralBase, config: &GenerationConfig) -> Result<GeneratedSong> {
    config.validate()?;
    if base.len() < 2 {
        return Err(GenerateError::BaseTooSmall);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let first = match config.seed_mode {
        SeedMode::Random => {
            let pick = rng.gen_range(0..base.len());
            base.records().nth(pick).expect("index within base").clone()
        }
        SeedMode::Explicit { piece_id, index } => {
            let r = SegmentRef { piece_id, index };
            base.find(r).ok_or(GenerateError::SeedNotFound(r))?.clone()
        }
    };
    let mut trace = vec![first];
    while trace.len() < config.length_segments {
        let current = trace.last().expect("non-empty trace").reference();
        let next = base.query_next(current, config.top_k, &mut rng)?;
        trace.push(next.selected);
    }
    let mut token_ids = Vec::with_capacity(trace.len() * base.corpus.segment_length());
    for rec in &trace {
        token_ids.extend_from_slice(base.tokens(rec.reference())?);
    }
    Ok(GeneratedSong { token_ids, trace, config: config.clone() })
}

/// Renders a song as a format-0 SMF whose length covers every token step.
pub fn render(song: &GeneratedSong, vocab: &TokenVocab, config: &GenerationConfig) -> Result<Vec<u8>> {
    config.validate()?;
    let tokens = vocab.decode(&song.token_ids)?;
    let step = config.step_ticks();
    let notes = detokenize(&tokens, step, config.velocity);
    let end = tokens.len() as u64 * step;
    let file = midi::notes_to_midi_until(&notes, config.ticks_per_quarter, config.tempo_us_per_qn, end)?;
    Ok(midi::write_smf(&file)?)
}
