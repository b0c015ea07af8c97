use nbase::midi::{EventKind, RawMidiFile, TrackEvent};
use proptest::prelude::*;

pub fn delta() -> impl Strategy<Value = u32> {
    prop_oneof![4 => 0u32..200, 1 => 0u32..(1 << 28)]
}

pub fn kind() -> impl Strategy<Value = EventKind> {
    let ch = 0u8..16;
    let data = 0u8..128;
    prop_oneof![
        (ch.clone(), data.clone(), data.clone()).prop_map(|(channel, key, velocity)| EventKind::NoteOff { channel, key, velocity }),
        (ch.clone(), data.clone(), 1u8..128).prop_map(|(channel, key, velocity)| EventKind::NoteOn { channel, key, velocity }),
        (ch.clone(), data.clone()).prop_map(|(channel, program)| EventKind::ProgramChange { channel, program }),
        (prop::sample::select(vec![0xA0u8, 0xB0, 0xE0]), ch.clone(), data.clone(), data.clone())
            .prop_map(|(hi, c, d1, d2)| EventKind::OtherChannel { status: hi | c, data1: d1, data2: Some(d2) }),
        (ch, data.clone()).prop_map(|(c, d1)| EventKind::OtherChannel { status: 0xD0 | c, data1: d1, data2: None }),
        (0u32..(1 << 24)).prop_map(EventKind::Tempo),
        (prop::sample::select(vec![0x01u8, 0x03, 0x58, 0x59, 0x7F, 0x51]), prop::collection::vec(any::<u8>(), 0..20))
            .prop_filter("tempo-shaped meta", |(k, d)| !(*k == 0x51 && d.len() == 3))
            .prop_map(|(kind, data)| EventKind::Meta { kind, data }),
        (any::<bool>(), prop::collection::vec(any::<u8>(), 0..20)).prop_map(|(escape, data)| EventKind::SysEx { escape, data }),
    ]
}

pub fn track() -> impl Strategy<Value = Vec<TrackEvent>> {
    (prop::collection::vec((delta(), kind()), 0..40), delta()).prop_map(|(evs, end)| {
        let mut t: Vec<TrackEvent> = evs.into_iter().map(|(d, k)| TrackEvent::new(d, k)).collect();
        t.push(TrackEvent::new(end, EventKind::EndOfTrack));
        t
    })
}

pub fn midi_file() -> impl Strategy<Value = RawMidiFile> {
    prop_oneof![
        (1u16..0x8000, track()).prop_map(|(tpq, t)| RawMidiFile { format: 0, ticks_per_quarter: tpq, tracks: vec![t] }),
        (1u16..0x8000, prop::collection::vec(track(), 0..4))
            .prop_map(|(tpq, tracks)| RawMidiFile { format: 1, ticks_per_quarter: tpq, tracks }),
    ]
}
