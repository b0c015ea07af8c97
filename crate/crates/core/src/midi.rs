//! Standard MIDI File reader/writer (formats 0 and 1) and note-list conversion.
//!
//! Reading is lenient: running status is honored, note-on with velocity 0 is
//! read as note-off, unknown meta and sysex events are kept as opaque payloads.
//! Writing is canonical: explicit status on every channel event, big-endian
//! chunk lengths, no running status.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

/// Tempo assumed when a file carries no set-tempo event (120 bpm).
pub const DEFAULT_TEMPO_US_PER_QN: u32 = 500_000;

const MAX_VLQ: u32 = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("variable-length quantity longer than 4 bytes at byte {0}")]
    VlqTooLong(usize),
    #[error("value {0} does not fit in a variable-length quantity")]
    VlqOverflow(u32),
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("header chunk too short ({0} bytes)")]
    ShortHeader(u32),
    #[error("data byte {byte:#04x} at {offset} without running status")]
    NoRunningStatus { byte: u8, offset: usize },
    #[error("invalid file: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MidiError>;

/// Decodes a variable-length quantity starting at `offset`.
///
/// Returns the value and the number of bytes consumed (1..=4).
pub fn decode_vlq(bytes: &[u8], offset: usize) -> Result<(u32, usize)> {
    let mut value: u32 = 0;
    for i in 0..4 {
        let b = *bytes.get(offset + i).ok_or(MidiError::Truncated(offset + i))?;
        value = (value << 7) | u32::from(b & 0x7F);
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    Err(MidiError::VlqTooLong(offset))
}

/// Appends the VLQ encoding of `value` to `out`.
pub fn encode_vlq(value: u32, out: &mut Vec<u8>) -> Result<()> {
    if value >= MAX_VLQ {
        return Err(MidiError::VlqOverflow(value));
    }
    let mut buf = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        buf[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let cont = if i > 0 { 0x80 } else { 0 };
        out.push(buf[i] | cont);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    NoteOff { channel: u8, key: u8, velocity: u8 },
    NoteOn { channel: u8, key: u8, velocity: u8 },
    ProgramChange { channel: u8, program: u8 },
    /// Any other channel voice message. `status` is the full status byte.
    OtherChannel { status: u8, data1: u8, data2: Option<u8> },
    Tempo(u32),
    EndOfTrack,
    Meta { kind: u8, data: Vec<u8> },
    /// `escape` distinguishes `F7` packets from `F0` sysex.
    SysEx { escape: bool, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackEvent {
    pub delta: u32,
    pub kind: EventKind,
}

impl TrackEvent {
    pub fn new(delta: u32, kind: EventKind) -> Self {
        Self { delta, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMidiFile {
    pub format: u16,
    pub ticks_per_quarter: u16,
    pub tracks: Vec<Vec<TrackEvent>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_ticks: u64,
    pub duration_ticks: u64,
    pub channel: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, velocity: u8, onset_ticks: u64, duration_ticks: u64) -> Self {
        Self { pitch, velocity, onset_ticks, duration_ticks, channel: 0 }
    }

    pub fn end_ticks(&self) -> u64 {
        self.onset_ticks + self.duration_ticks
    }
}

/// Canonical ordering for note lists: onset, then pitch, then the rest.
pub fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by_key(|n| (n.onset_ticks, n.pitch, n.channel, n.duration_ticks, n.velocity));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(MidiError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let (v, n) = decode_vlq(self.bytes, self.pos)?;
        self.pos += n;
        Ok(v)
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

/// Parses a Standard MIDI File.
pub fn parse_smf(bytes: &[u8]) -> Result<RawMidiFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| MidiError::BadMagic { expected: "MThd" })? != b"MThd" {
        return Err(MidiError::BadMagic { expected: "MThd" });
    }
    let header_len = r.u32()?;
    if header_len < 6 {
        return Err(MidiError::ShortHeader(header_len));
    }
    let header = r.take(header_len as usize)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::Invalid("ticks per quarter must be positive".into()));
    }

    let mut tracks = Vec::new();
    while !r.at_end() {
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        if id == b"MTrk" {
            let base = r.pos - len;
            tracks.push(parse_track(body, base)?);
        }
    }
    Ok(RawMidiFile { format, ticks_per_quarter: division, tracks })
}

fn parse_track(body: &[u8], base: usize) -> Result<Vec<TrackEvent>> {
    let mut r = Reader { bytes: body, pos: 0 };
    let mut events = Vec::new();
    let mut running: Option<u8> = None;
    let mut ended = false;
    while !r.at_end() {
        let delta = r.vlq().map_err(|e| offset_err(e, base))?;
        let first = r.u8().map_err(|e| offset_err(e, base))?;
        let kind = match first {
            0xFF => {
                let kind = r.u8().map_err(|e| offset_err(e, base))?;
                let len = r.vlq().map_err(|e| offset_err(e, base))? as usize;
                let data = r.take(len).map_err(|e| offset_err(e, base))?;
                match (kind, len) {
                    (0x2F, _) => EventKind::EndOfTrack,
                    (0x51, 3) => EventKind::Tempo(
                        u32::from(data[0]) << 16 | u32::from(data[1]) << 8 | u32::from(data[2]),
                    ),
                    _ => EventKind::Meta { kind, data: data.to_vec() },
                }
            }
            0xF0 | 0xF7 => {
                let len = r.vlq().map_err(|e| offset_err(e, base))? as usize;
                let data = r.take(len).map_err(|e| offset_err(e, base))?;
                running = None;
                EventKind::SysEx { escape: first == 0xF7, data: data.to_vec() }
            }
            _ => {
                let (status, d1) = if first & 0x80 != 0 {
                    let d1 = r.u8().map_err(|e| offset_err(e, base))?;
                    (first, d1)
                } else {
                    let status = running.ok_or(MidiError::NoRunningStatus {
                        byte: first,
                        offset: base + r.pos - 1,
                    })?;
                    (status, first)
                };
                if status >= 0xF0 {
                    return Err(MidiError::Invalid(format!(
                        "system message {status:#04x} inside track at {}",
                        base + r.pos
                    )));
                }
                running = Some(status);
                channel_event(status, d1, &mut r).map_err(|e| offset_err(e, base))?
            }
        };
        let is_end = kind == EventKind::EndOfTrack;
        events.push(TrackEvent::new(delta, kind));
        if is_end {
            ended = true;
            break;
        }
    }
    if !ended {
        events.push(TrackEvent::new(0, EventKind::EndOfTrack));
    }
    Ok(events)
}

fn channel_event(status: u8, d1: u8, r: &mut Reader<'_>) -> Result<EventKind> {
    let channel = status & 0x0F;
    Ok(match status & 0xF0 {
        0x80 => EventKind::NoteOff { channel, key: d1, velocity: r.u8()? },
        0x90 => {
            let velocity = r.u8()?;
            if velocity == 0 {
                EventKind::NoteOff { channel, key: d1, velocity: 0 }
            } else {
                EventKind::NoteOn { channel, key: d1, velocity }
            }
        }
        0xC0 => EventKind::ProgramChange { channel, program: d1 },
        0xD0 => EventKind::OtherChannel { status, data1: d1, data2: None },
        _ => EventKind::OtherChannel { status, data1: d1, data2: Some(r.u8()?) },
    })
}

fn offset_err(e: MidiError, base: usize) -> MidiError {
    match e {
        MidiError::Truncated(p) => MidiError::Truncated(base + p),
        MidiError::VlqTooLong(p) => MidiError::VlqTooLong(base + p),
        other => other,
    }
}

fn check_data(byte: u8, what: &str) -> Result<()> {
    if byte > 0x7F {
        return Err(MidiError::Invalid(format!("{what} {byte} exceeds 127")));
    }
    Ok(())
}

fn check_channel(channel: u8) -> Result<()> {
    if channel > 15 {
        return Err(MidiError::Invalid(format!("channel {channel} exceeds 15")));
    }
    Ok(())
}

impl RawMidiFile {
    /// Checks the structural invariants `write_smf` relies on.
    pub fn validate(&self) -> Result<()> {
        if self.format > 1 {
            return Err(MidiError::UnsupportedFormat(self.format));
        }
        if self.ticks_per_quarter == 0 || self.ticks_per_quarter & 0x8000 != 0 {
            return Err(MidiError::Invalid("ticks per quarter must be in 1..=32767".into()));
        }
        if self.format == 0 && self.tracks.len() != 1 {
            return Err(MidiError::Invalid("format 0 requires exactly one track".into()));
        }
        for (t, track) in self.tracks.iter().enumerate() {
            match track.last() {
                Some(TrackEvent { kind: EventKind::EndOfTrack, .. }) => {}
                _ => return Err(MidiError::Invalid(format!("track {t} does not end with end-of-track"))),
            }
            for (i, ev) in track.iter().enumerate() {
                if ev.delta >= MAX_VLQ {
                    return Err(MidiError::VlqOverflow(ev.delta));
                }
                match &ev.kind {
                    EventKind::EndOfTrack if i + 1 != track.len() => {
                        return Err(MidiError::Invalid(format!("end-of-track before end of track {t}")));
                    }
                    EventKind::NoteOn { channel, key, velocity } => {
                        check_channel(*channel)?;
                        check_data(*key, "key")?;
                        check_data(*velocity, "velocity")?;
                        if *velocity == 0 {
                            return Err(MidiError::Invalid("note-on with velocity 0".into()));
                        }
                    }
                    EventKind::NoteOff { channel, key, velocity } => {
                        check_channel(*channel)?;
                        check_data(*key, "key")?;
                        check_data(*velocity, "velocity")?;
                    }
                    EventKind::ProgramChange { channel, program } => {
                        check_channel(*channel)?;
                        check_data(*program, "program")?;
                    }
                    EventKind::OtherChannel { status, data1, data2 } => {
                        let hi = status & 0xF0;
                        if !matches!(hi, 0xA0 | 0xB0 | 0xD0 | 0xE0) {
                            return Err(MidiError::Invalid(format!("bad channel status {status:#04x}")));
                        }
                        check_data(*data1, "data byte")?;
                        match (hi == 0xD0, data2) {
                            (true, None) => {}
                            (false, Some(d)) => check_data(*d, "data byte")?,
                            _ => return Err(MidiError::Invalid(format!("wrong data length for {status:#04x}"))),
                        }
                    }
                    EventKind::Tempo(us) => {
                        if *us >= 1 << 24 {
                            return Err(MidiError::Invalid(format!("tempo {us} exceeds 24 bits")));
                        }
                    }
                    EventKind::Meta { kind, data } => {
                        if *kind == 0x2F || (*kind == 0x51 && data.len() == 3) {
                            return Err(MidiError::Invalid(format!(
                                "meta {kind:#04x} must use its dedicated event kind"
                            )));
                        }
                        if data.len() >= MAX_VLQ as usize {
                            return Err(MidiError::VlqOverflow(data.len() as u32));
                        }
                    }
                    EventKind::SysEx { data, .. } => {
                        if data.len() >= MAX_VLQ as usize {
                            return Err(MidiError::VlqOverflow(data.len() as u32));
                        }
                    }
                    EventKind::EndOfTrack => {}
                }
            }
        }
        Ok(())
    }
}

/// Serializes a file canonically. `parse_smf(&write_smf(f)?)? == f` for valid `f`.
pub fn write_smf(file: &RawMidiFile) -> Result<Vec<u8>> {
    file.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&file.format.to_be_bytes());
    out.extend_from_slice(&(file.tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&file.ticks_per_quarter.to_be_bytes());
    for track in &file.tracks {
        let mut body = Vec::new();
        for ev in track {
            encode_vlq(ev.delta, &mut body)?;
            write_event(&ev.kind, &mut body)?;
        }
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

fn write_event(kind: &EventKind, out: &mut Vec<u8>) -> Result<()> {
    match kind {
        EventKind::NoteOff { channel, key, velocity } => out.extend_from_slice(&[0x80 | channel, *key, *velocity]),
        EventKind::NoteOn { channel, key, velocity } => out.extend_from_slice(&[0x90 | channel, *key, *velocity]),
        EventKind::ProgramChange { channel, program } => out.extend_from_slice(&[0xC0 | channel, *program]),
        EventKind::OtherChannel { status, data1, data2 } => {
            out.push(*status);
            out.push(*data1);
            if let Some(d) = data2 {
                out.push(*d);
            }
        }
        EventKind::Tempo(us) => {
            out.extend_from_slice(&[0xFF, 0x51, 0x03]);
            out.extend_from_slice(&us.to_be_bytes()[1..]);
        }
        EventKind::EndOfTrack => out.extend_from_slice(&[0xFF, 0x2F, 0x00]),
        EventKind::Meta { kind, data } => {
            out.extend_from_slice(&[0xFF, *kind]);
            encode_vlq(data.len() as u32, out)?;
            out.extend_from_slice(data);
        }
        EventKind::SysEx { escape, data } => {
            out.push(if *escape { 0xF7 } else { 0xF0 });
            encode_vlq(data.len() as u32, out)?;
            out.extend_from_slice(data);
        }
    }
    Ok(())
}

/// Merges all tracks by absolute tick and pairs note-on/note-off per
/// (channel, key) in FIFO order.
///
/// Returns the sorted notes and the first set-tempo value found anywhere
/// (or [`DEFAULT_TEMPO_US_PER_QN`]). Note-ons left open are closed at the
/// file's final tick; dangling note-offs are ignored.
pub fn extract_notes(file: &RawMidiFile) -> (Vec<NoteEvent>, u32) {
    // (abs tick, track, position, kind)
    let mut timeline: Vec<(u64, usize, usize, &EventKind)> = Vec::new();
    let mut final_tick = 0u64;
    for (t, track) in file.tracks.iter().enumerate() {
        let mut abs = 0u64;
        for (i, ev) in track.iter().enumerate() {
            abs += u64::from(ev.delta);
            timeline.push((abs, t, i, &ev.kind));
        }
        final_tick = final_tick.max(abs);
    }
    timeline.sort_by_key(|&(abs, t, i, _)| (abs, t, i));

    let mut tempo = None;
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut notes = Vec::new();
    for &(abs, _, _, kind) in &timeline {
        match *kind {
            EventKind::NoteOn { channel, key, velocity } => {
                open.entry((channel, key)).or_default().push_back((abs, velocity));
            }
            EventKind::NoteOff { channel, key, .. } => {
                if let Some((onset, velocity)) = open.get_mut(&(channel, key)).and_then(VecDeque::pop_front) {
                    notes.push(NoteEvent {
                        pitch: key,
                        velocity,
                        onset_ticks: onset,
                        duration_ticks: (abs - onset).max(1),
                        channel,
                    });
                }
            }
            EventKind::Tempo(us) if tempo.is_none() => tempo = Some(us),
            _ => {}
        }
    }
    let mut leftovers: Vec<_> = open.into_iter().collect();
    leftovers.sort_by_key(|(k, _)| *k);
    for ((channel, key), queue) in leftovers {
        for (onset, velocity) in queue {
            notes.push(NoteEvent {
                pitch: key,
                velocity,
                onset_ticks: onset,
                duration_ticks: final_tick.saturating_sub(onset).max(1),
                channel,
            });
        }
    }
    sort_notes(&mut notes);
    (notes, tempo.unwrap_or(DEFAULT_TEMPO_US_PER_QN))
}

/// Renders notes as a format-0 file whose first event sets the tempo.
pub fn notes_to_midi(notes: &[NoteEvent], ticks_per_quarter: u16, tempo_us_per_qn: u32) -> Result<RawMidiFile> {
    notes_to_midi_until(notes, ticks_per_quarter, tempo_us_per_qn, 0)
}

/// Like [`notes_to_midi`], but places end-of-track no earlier than `end_tick`.
///
/// `extract_notes` inverts this exactly for sorted lists in which notes on the
/// same (channel, key) do not overlap; FIFO pairing cannot represent nesting.
pub fn notes_to_midi_until(
    notes: &[NoteEvent],
    ticks_per_quarter: u16,
    tempo_us_per_qn: u32,
    end_tick: u64,
) -> Result<RawMidiFile> {
    // (tick, order, kind): offs sort before ons at the same tick
    let mut timed: Vec<(u64, u8, usize, EventKind)> = Vec::with_capacity(notes.len() * 2);
    let mut last = end_tick;
    for (i, n) in notes.iter().enumerate() {
        check_channel(n.channel)?;
        check_data(n.pitch, "pitch")?;
        check_data(n.velocity, "velocity")?;
        if n.velocity == 0 {
            return Err(MidiError::Invalid("note velocity must be at least 1".into()));
        }
        if n.duration_ticks == 0 {
            return Err(MidiError::Invalid("note duration must be at least 1 tick".into()));
        }
        timed.push((n.onset_ticks, 1, i, EventKind::NoteOn { channel: n.channel, key: n.pitch, velocity: n.velocity }));
        timed.push((n.end_ticks(), 0, i, EventKind::NoteOff { channel: n.channel, key: n.pitch, velocity: 0 }));
        last = last.max(n.end_ticks());
    }
    timed.sort_by_key(|(tick, order, i, _)| (*tick, *order, *i));

    let mut track = vec![TrackEvent::new(0, EventKind::Tempo(tempo_us_per_qn))];
    let mut now = 0u64;
    for (tick, _, _, kind) in timed {
        track.push(TrackEvent::new(delta_between(now, tick)?, kind));
        now = tick;
    }
    track.push(TrackEvent::new(delta_between(now, last)?, EventKind::EndOfTrack));
    Ok(RawMidiFile { format: 0, ticks_per_quarter, tracks: vec![track] })
}

fn delta_between(from: u64, to: u64) -> Result<u32> {
    let d = to - from;
    u32::try_from(d)
        .ok()
        .filter(|&d| d < MAX_VLQ)
        .ok_or_else(|| MidiError::Invalid(format!("gap of {d} ticks exceeds VLQ range")))
}
