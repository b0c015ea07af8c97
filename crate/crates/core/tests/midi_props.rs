mod common;

use common::midi_gen::midi_file;
use nbase::midi::{decode_vlq, encode_vlq, extract_notes, notes_to_midi, parse_smf, sort_notes, write_smf, NoteEvent};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_write(file in midi_file()) {
        let bytes = write_smf(&file).unwrap();
        let back = parse_smf(&bytes).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(write_smf(&back).unwrap(), bytes);
    }
}

/// Notes with no overlap between two notes of the same key.
fn note_list() -> impl Strategy<Value = Vec<NoteEvent>> {
    prop::collection::vec((0u8..128, 1u8..128, 0u64..2000, 1u64..500), 0..30).prop_map(|raw| {
        let mut notes: Vec<NoteEvent> = Vec::new();
        for (pitch, vel, onset, dur) in raw {
            let n = NoteEvent::new(pitch, vel, onset, dur);
            let clash = notes.iter().any(|m| m.pitch == pitch && m.onset_ticks < n.end_ticks() && n.onset_ticks < m.end_ticks());
            if !clash {
                notes.push(n);
            }
        }
        sort_notes(&mut notes);
        notes
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn notes_survive_smf_round_trip(notes in note_list(), tpq in 1u16..2000, tempo in 1u32..(1 << 24)) {
        let file = notes_to_midi(&notes, tpq, tempo).unwrap();
        let parsed = parse_smf(&write_smf(&file).unwrap()).unwrap();
        let (back, t) = extract_notes(&parsed);
        prop_assert_eq!(back, notes);
        prop_assert_eq!(t, tempo);
    }

    #[test]
    fn truncated_files_error_instead_of_panicking(file in midi_file(), cut in 0usize..64) {
        let bytes = write_smf(&file).unwrap();
        let n = bytes.len().saturating_sub(cut + 1);
        let _ = parse_smf(&bytes[..n]);
    }
}

#[test]
fn vlq_exhaustive_low_range() {
    let mut buf = Vec::new();
    for v in 0u32..(1 << 16) {
        buf.clear();
        encode_vlq(v, &mut buf).unwrap();
        let expected_len = match v {
            0..=0x7F => 1,
            0x80..=0x3FFF => 2,
            _ => 3,
        };
        assert_eq!(buf.len(), expected_len, "{v}");
        assert_eq!(decode_vlq(&buf, 0).unwrap(), (v, buf.len()));
    }
}

#[test]
fn vlq_random_28_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut buf = Vec::new();
    for _ in 0..1000 {
        let v = rng.gen_range(0u32..(1 << 28));
        buf.clear();
        encode_vlq(v, &mut buf).unwrap();
        assert!(buf.len() <= 4);
        assert_eq!(decode_vlq(&buf, 0).unwrap(), (v, buf.len()));
    }
    assert!(encode_vlq(1 << 28, &mut buf).is_err());
}
