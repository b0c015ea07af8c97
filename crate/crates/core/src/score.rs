//! Tokenization of note lists into pitch-set events, vocabulary, and
//! fixed-length segmentation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::midi::NoteEvent;

pub const REST: &str = "R";
pub const UNKNOWN: &str = "?";
pub const UNKNOWN_ID: u32 = 0;
pub const CORPUS_VERSION: &str = "nbase-corpus-v1";
pub const DEFAULT_SEGMENT_LENGTH: usize = 100;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("malformed token {0:?}")]
    BadToken(String),
    #[error("corpus version {0:?} is not supported")]
    Version(String),
    #[error("piece {0} not found")]
    UnknownPiece(u32),
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ScoreError>;

/// One onset event: a rest, or the set of pitches starting together.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Rest,
    Unknown,
    /// Strictly ascending, non-empty.
    Pitches(Vec<u8>),
}

impl Token {
    pub fn chord<I: IntoIterator<Item = u8>>(pitches: I) -> Token {
        let set: BTreeSet<u8> = pitches.into_iter().collect();
        if set.is_empty() {
            Token::Rest
        } else {
            Token::Pitches(set.into_iter().collect())
        }
    }

    pub fn parse(s: &str) -> Result<Token> {
        match s {
            REST => Ok(Token::Rest),
            UNKNOWN => Ok(Token::Unknown),
            _ => {
                let mut pitches = Vec::new();
                for part in s.split('.') {
                    let p: u8 = part.parse().map_err(|_| ScoreError::BadToken(s.to_string()))?;
                    if p > 127 || pitches.last().is_some_and(|&last| last >= p) {
                        return Err(ScoreError::BadToken(s.to_string()));
                    }
                    pitches.push(p);
                }
                Ok(Token::Pitches(pitches))
            }
        }
    }

    pub fn pitches(&self) -> &[u8] {
        match self {
            Token::Pitches(p) => p,
            _ => &[],
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Rest => f.write_str(REST),
            Token::Unknown => f.write_str(UNKNOWN),
            Token::Pitches(p) => {
                for (i, pitch) in p.iter().enumerate() {
                    if i > 0 {
                        f.write_str(".")?;
                    }
                    write!(f, "{pitch}")?;
                }
                Ok(())
            }
        }
    }
}

/// Onset event with the notes that produced it; the shared unit of
/// tokenization and feature windows.
#[derive(Debug, Clone, PartialEq)]
pub enum OnsetEvent {
    Rest,
    Group { onset: u64, notes: Vec<NoteEvent> },
}

impl OnsetEvent {
    pub fn token(&self) -> Token {
        match self {
            OnsetEvent::Rest => Token::Rest,
            OnsetEvent::Group { notes, .. } => Token::chord(notes.iter().map(|n| n.pitch)),
        }
    }
}

/// Tick parameters controlling how notes are grouped into events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grouping {
    pub merge_window_ticks: u64,
    pub rest_threshold_ticks: u64,
}

impl Grouping {
    /// `tpq/8` merge window and one-quarter rest threshold.
    pub fn defaults_for(ticks_per_quarter: u16) -> Self {
        let tpq = u64::from(ticks_per_quarter);
        Self { merge_window_ticks: tpq / 8, rest_threshold_ticks: tpq }
    }
}

/// Groups sorted notes into onset events. A group collects every note whose
/// onset lies within the merge window of the group's first onset; a single
/// rest separates groups whose onsets are more than the rest threshold apart.
pub fn onset_events(notes: &[NoteEvent], grouping: Grouping) -> Vec<OnsetEvent> {
    let mut events = Vec::new();
    let mut current: Option<(u64, Vec<NoteEvent>)> = None;
    for note in notes {
        match &mut current {
            Some((start, group)) if note.onset_ticks - *start <= grouping.merge_window_ticks => {
                group.push(*note);
            }
            _ => {
                if let Some((start, group)) = current.take() {
                    events.push(OnsetEvent::Group { onset: start, notes: group });
                    if note.onset_ticks - start > grouping.rest_threshold_ticks {
                        events.push(OnsetEvent::Rest);
                    }
                }
                current = Some((note.onset_ticks, vec![*note]));
            }
        }
    }
    if let Some((start, group)) = current {
        events.push(OnsetEvent::Group { onset: start, notes: group });
    }
    events
}

pub fn tokenize(notes: &[NoteEvent], grouping: Grouping) -> Vec<Token> {
    onset_events(notes, grouping).iter().map(OnsetEvent::token).collect()
}

/// Places token `k` at `[k*step, (k+1)*step)`. Runs of identical pitch-set
/// tokens become one held note per pitch; rests and unknowns emit nothing.
pub fn detokenize(tokens: &[Token], step_ticks: u64, velocity: u8) -> Vec<NoteEvent> {
    let mut notes = Vec::new();
    let mut k = 0;
    while k < tokens.len() {
        let run_start = k;
        while k + 1 < tokens.len() && tokens[k + 1] == tokens[run_start] {
            k += 1;
        }
        let run_len = (k - run_start + 1) as u64;
        for &pitch in tokens[run_start].pitches() {
            notes.push(NoteEvent::new(pitch, velocity, run_start as u64 * step_ticks, run_len * step_ticks));
        }
        k += 1;
    }
    crate::midi::sort_notes(&mut notes);
    notes
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenVocab {
    /// Sorted lexicographically into ids `1..V`; id 0 is the unknown token.
    pub fn build<'a, I, S>(sequences: I) -> Result<TokenVocab>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[Token]> + 'a + ?Sized,
    {
        let mut seen = false;
        let mut universe = BTreeSet::new();
        for seq in sequences {
            seen = true;
            for tok in seq.as_ref() {
                if *tok != Token::Unknown {
                    universe.insert(tok.to_string());
                }
            }
        }
        if !seen {
            return Err(ScoreError::EmptyCorpus);
        }
        let tokens = std::iter::once(UNKNOWN.to_string()).chain(universe).collect();
        Self::from_tokens(tokens)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<TokenVocab> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN) {
            return Err(ScoreError::Invalid("vocabulary must start with the unknown token".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            Token::parse(t)?;
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(ScoreError::Invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(TokenVocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &Token) -> u32 {
        self.index.get(&token.to_string()).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn token_str(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(ScoreError::IdOutOfRange { id, size: self.tokens.len() })
    }

    pub fn token(&self, id: u32) -> Result<Token> {
        Token::parse(self.token_str(id)?)
    }

    pub fn encode(&self, tokens: &[Token]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<Token>> {
        ids.iter().map(|&id| self.token(id)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn one_hot(id: u32, size: usize) -> Result<Vec<f64>> {
    if id as usize >= size {
        return Err(ScoreError::IdOutOfRange { id, size });
    }
    let mut v = vec![0.0; size];
    v[id as usize] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub id: u32,
    pub composer: String,
    pub title: String,
    pub tpq: u16,
    pub tempo: u32,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub piece_id: u32,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment<'a> {
    pub piece_id: u32,
    pub index: u32,
    pub token_ids: &'a [u32],
}

impl Segment<'_> {
    pub fn reference(&self) -> SegmentRef {
        SegmentRef { piece_id: self.piece_id, index: self.index }
    }
}

/// Disjoint windows of exactly `len` tokens; the remainder is dropped.
pub fn segment_piece(piece: &Piece, len: usize) -> Vec<Segment<'_>> {
    assert!(len >= 2, "segment length must be at least 2");
    piece
        .token_ids
        .chunks_exact(len)
        .enumerate()
        .map(|(i, w)| Segment { piece_id: piece.id, index: i as u32, token_ids: w })
        .collect()
}

/// `(s_i, s_{i+1})` for consecutive segments of one piece.
pub fn adjacent_pairs<'a>(segments: &[Segment<'a>]) -> Vec<(Segment<'a>, Segment<'a>)> {
    segments
        .windows(2)
        .filter(|w| w[0].piece_id == w[1].piece_id && w[0].index + 1 == w[1].index)
        .map(|w| (w[0], w[1]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    #[serde(rename = "T")]
    pub segment_length: usize,
    /// `None` uses `tpq/8` of each source file.
    pub merge_window_ticks: Option<u64>,
    /// `None` uses the `tpq` of each source file.
    pub rest_threshold_ticks: Option<u64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { segment_length: DEFAULT_SEGMENT_LENGTH, merge_window_ticks: None, rest_threshold_ticks: None }
    }
}

impl PreprocessConfig {
    pub fn grouping(&self, ticks_per_quarter: u16) -> Grouping {
        let d = Grouping::defaults_for(ticks_per_quarter);
        Grouping {
            merge_window_ticks: self.merge_window_ticks.unwrap_or(d.merge_window_ticks),
            rest_threshold_ticks: self.rest_threshold_ticks.unwrap_or(d.rest_threshold_ticks),
        }
    }
}

/// A tokenized source piece prior to vocabulary assignment.
#[derive(Debug, Clone)]
pub struct TokenizedPiece {
    pub composer: String,
    pub title: String,
    pub tpq: u16,
    pub tempo: u32,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: PreprocessConfig,
    pub vocab: TokenVocab,
    pub pieces: Vec<Piece>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusDoc {
    version: String,
    config: PreprocessConfig,
    vocab: Vec<String>,
    pieces: Vec<Piece>,
}

#[derive(Serialize)]
struct VocabKey<'a> {
    config: &'a PreprocessConfig,
    vocab: &'a [String],
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Corpus {
    /// Builds the vocabulary over every piece, then encodes each piece.
    /// Piece ids follow input order.
    pub fn from_tokenized(config: PreprocessConfig, pieces: &[TokenizedPiece]) -> Result<Corpus> {
        if config.segment_length < 2 {
            return Err(ScoreError::Invalid("segment length must be at least 2".into()));
        }
        let vocab = TokenVocab::build(pieces.iter().map(|p| &p.tokens[..]))?;
        let pieces = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| Piece {
                id: i as u32,
                composer: p.composer.clone(),
                title: p.title.clone(),
                tpq: p.tpq,
                tempo: p.tempo,
                token_ids: vocab.encode(&p.tokens),
            })
            .collect();
        Ok(Corpus { config, vocab, pieces })
    }

    /// Appends a piece encoded against the existing vocabulary; unseen tokens
    /// become the unknown id so the vocabulary fingerprint does not change.
    pub fn push_frozen(&mut self, piece: &TokenizedPiece) -> u32 {
        let id = self.pieces.len() as u32;
        self.pieces.push(Piece {
            id,
            composer: piece.composer.clone(),
            title: piece.title.clone(),
            tpq: piece.tpq,
            tempo: piece.tempo,
            token_ids: self.vocab.encode(&piece.tokens),
        });
        id
    }

    pub fn segment_length(&self) -> usize {
        self.config.segment_length
    }

    pub fn piece(&self, id: u32) -> Result<&Piece> {
        self.pieces.get(id as usize).ok_or(ScoreError::UnknownPiece(id))
    }

    pub fn segments(&self) -> Vec<Segment<'_>> {
        self.pieces.iter().flat_map(|p| segment_piece(p, self.config.segment_length)).collect()
    }

    pub fn segment(&self, r: SegmentRef) -> Option<Segment<'_>> {
        let piece = self.pieces.get(r.piece_id as usize)?;
        let t = self.config.segment_length;
        let start = r.index as usize * t;
        let window = piece.token_ids.get(start..start + t)?;
        Some(Segment { piece_id: r.piece_id, index: r.index, token_ids: window })
    }

    pub fn composers(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.pieces.iter().map(|p| p.composer.as_str()).collect();
        set.into_iter().collect()
    }

    /// Adjacent pairs drawn only from pieces by `composer`.
    pub fn training_pairs(&self, composer: &str) -> Vec<(Segment<'_>, Segment<'_>)> {
        self.pieces
            .iter()
            .filter(|p| p.composer == composer)
            .flat_map(|p| adjacent_pairs(&segment_piece(p, self.config.segment_length)))
            .collect()
    }

    /// Same vocabulary and config, restricted to the given composers.
    pub fn restrict_to(&self, composers: &[&str]) -> Corpus {
        Corpus {
            config: self.config,
            vocab: self.vocab.clone(),
            pieces: self.pieces.iter().filter(|p| composers.contains(&p.composer.as_str())).cloned().collect(),
        }
    }

    /// Identifies the token space: config plus id-ordered vocabulary.
    pub fn vocab_fingerprint(&self) -> String {
        let key = VocabKey { config: &self.config, vocab: self.vocab.tokens() };
        sha256_hex(&serde_json::to_vec(&key).expect("vocab key serializes"))
    }

    /// Identifies the whole corpus document.
    pub fn content_fingerprint(&self) -> String {
        sha256_hex(&self.to_json())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let doc = CorpusDoc {
            version: CORPUS_VERSION.to_string(),
            config: self.config,
            vocab: self.vocab.tokens().to_vec(),
            pieces: self.pieces.clone(),
        };
        serde_json::to_vec(&doc).expect("corpus serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Corpus> {
        let doc: CorpusDoc = serde_json::from_slice(bytes)?;
        if doc.version != CORPUS_VERSION {
            return Err(ScoreError::Version(doc.version));
        }
        if doc.config.segment_length < 2 {
            return Err(ScoreError::Invalid("segment length must be at least 2".into()));
        }
        let vocab = TokenVocab::from_tokens(doc.vocab)?;
        for (i, p) in doc.pieces.iter().enumerate() {
            if p.id as usize != i {
                return Err(ScoreError::Invalid(format!("piece ids must be dense; found {} at {i}", p.id)));
            }
            if let Some(&id) = p.token_ids.iter().find(|&&id| id as usize >= vocab.len()) {
                return Err(ScoreError::IdOutOfRange { id, size: vocab.len() });
            }
        }
        Ok(Corpus { config: doc.config, vocab, pieces: doc.pieces })
    }
}
