#![allow(dead_code)]

pub mod midi_gen;

use std::path::Path;

use nbase::midi::{notes_to_midi, sort_notes, write_smf, NoteEvent};
use nbase::score::{Corpus, PreprocessConfig, Token, TokenizedPiece};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random-walk melody on an eighth-note grid with occasional triads and
/// rests. `style` shifts the register and the typical step size.
pub fn synth_notes(seed: u64, events: usize, tpq: u16, style: u8) -> Vec<NoteEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = u64::from(tpq / 2).max(1);
    let mut pitch: i32 = 55 + 7 * i32::from(style % 3);
    let max_leap = 2 + i32::from(style % 4);
    let mut t = 0u64;
    let mut notes = Vec::new();
    let mut made = 0;
    while made < events {
        if rng.gen_bool(0.08) {
            // silence of two steps: onset gap of three steps exceeds a quarter
            t += 2 * step;
        }
        pitch = (pitch + rng.gen_range(-max_leap..=max_leap)).clamp(36, 90);
        let dur = step * rng.gen_range(1..=2);
        let vel = rng.gen_range(50..110);
        notes.push(NoteEvent::new(pitch as u8, vel, t, dur));
        if rng.gen_bool(0.2) {
            notes.push(NoteEvent::new((pitch + 4) as u8, vel, t, dur));
            notes.push(NoteEvent::new((pitch + 7) as u8, vel, t, dur));
        }
        t += step;
        made += 1;
    }
    sort_notes(&mut notes);
    notes
}

pub fn write_midi(path: &Path, notes: &[NoteEvent], tpq: u16) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let bytes = write_smf(&notes_to_midi(notes, tpq, 500_000).unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

/// `<dir>/<Composer>/piece_<k>.mid` for each composer.
pub fn write_corpus_dir(dir: &Path, composers: &[&str], files_each: usize, events: usize, seed: u64) {
    for (c, name) in composers.iter().enumerate() {
        for k in 0..files_each {
            let s = seed.wrapping_mul(1000).wrapping_add((c * 100 + k) as u64);
            let notes = synth_notes(s, events, 480, c as u8);
            write_midi(&dir.join(name).join(format!("piece_{k}.mid")), &notes, 480);
        }
    }
}

/// Pieces built directly from random pitch-set tokens over a small alphabet.
pub fn token_pieces(composer: &str, pieces: usize, len: usize, alphabet: u8, seed: u64) -> Vec<TokenizedPiece> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pieces)
        .map(|p| TokenizedPiece {
            composer: composer.to_string(),
            title: format!("{composer}-{p}"),
            tpq: 480,
            tempo: 500_000,
            tokens: (0..len)
                .map(|_| match rng.gen_range(0..=alphabet) {
                    0 => Token::Rest,
                    k => Token::chord([59 + k]),
                })
                .collect(),
        })
        .collect()
}

pub fn corpus(pieces: &[TokenizedPiece], t: usize) -> Corpus {
    Corpus::from_tokenized(PreprocessConfig { segment_length: t, ..Default::default() }, pieces).unwrap()
}
