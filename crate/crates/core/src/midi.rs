//! Standard MIDI File reader and writer (formats 0 and 1).
//!
//! The reader decodes every `MTrk` chunk, resolving running status and
//! variable-length quantities, and preserves event order and delta times
//! exactly. Unknown chunk types are skipped with a [`ParseWarning`].
//!
//! The writer is canonical: it never uses running status and always emits
//! minimal-length VLQs, so `write_midi(&parse_midi(&write_midi(f)?)?)?`
//! reproduces `write_midi(f)?` byte for byte.

use thiserror::Error;

/// Largest value a four-byte VLQ can carry.
pub const MAX_VLQ: u32 = 0x0FFF_FFFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("truncated input at byte {offset}: needed {needed} bytes, {available} available")]
    TruncatedInput {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("variable-length quantity at byte {offset} is longer than 4 bytes")]
    MalformedVlq { offset: usize },
    #[error("SMPTE time division {0:#06x} is not supported")]
    UnsupportedDivision(u16),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("malformed event at byte {offset}: {reason}")]
    MalformedEvent { offset: usize, reason: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = std::result::Result<T, MidiError>;

/// Non-fatal conditions met while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// A chunk with an unrecognised tag was skipped.
    UnknownChunk { tag: [u8; 4], offset: usize, length: usize },
    /// A track chunk had no EndOfTrack event; one was appended.
    MissingEndOfTrack { track: usize },
    /// Bytes followed the EndOfTrack event inside a track chunk.
    TrailingTrackData { track: usize, bytes: usize },
    /// More `MTrk` chunks were present than the header declared.
    ExtraTrack { offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    /// 0 or 1.
    pub format: u16,
    /// Ticks per quarter note.
    pub division: u16,
    pub tracks: Vec<MidiTrack>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MidiTrack {
    pub events: Vec<TrackEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackEvent {
    pub delta: u32,
    pub event: MidiEvent,
}

impl TrackEvent {
    pub fn new(delta: u32, event: MidiEvent) -> Self {
        Self { delta, event }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MidiEvent {
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    NoteOff { channel: u8, pitch: u8, velocity: u8 },
    ProgramChange { channel: u8, program: u8 },
    /// Any other channel voice message; `status` includes the channel nibble.
    OtherChannel { status: u8, data: Vec<u8> },
    SetTempo { micros_per_quarter: u32 },
    TimeSignature {
        numerator: u8,
        denominator_pow2: u8,
        clocks_per_click: u8,
        notated_32nds_per_quarter: u8,
    },
    /// Meta event other than tempo, time signature, or end of track.
    OtherMeta { kind: u8, data: Vec<u8> },
    /// System exclusive message (`0xF0`) or escape (`0xF7`), payload kept opaque.
    SysEx { status: u8, data: Vec<u8> },
    EndOfTrack,
}

impl MidiEvent {
    pub fn time_signature(numerator: u8, denominator_pow2: u8) -> Self {
        MidiEvent::TimeSignature {
            numerator,
            denominator_pow2,
            clocks_per_click: 24,
            notated_32nds_per_quarter: 8,
        }
    }
}

impl MidiFile {
    /// The smallest valid file: one empty format-0 track.
    pub fn empty(division: u16) -> Self {
        MidiFile {
            format: 0,
            division,
            tracks: vec![MidiTrack {
                events: vec![TrackEvent::new(0, MidiEvent::EndOfTrack)],
            }],
        }
    }

    /// Checks the invariants the writer relies on.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MidiError::InvariantViolation(msg));
        if self.format > 1 {
            return bad(format!("format {} is not 0 or 1", self.format));
        }
        if self.division == 0 || self.division & 0x8000 != 0 {
            return bad(format!("division {} is not a positive tick count", self.division));
        }
        if self.format == 0 && self.tracks.len() != 1 {
            return bad(format!("format 0 with {} tracks", self.tracks.len()));
        }
        if self.tracks.len() > u16::MAX as usize {
            return bad("too many tracks".into());
        }
        for (ti, track) in self.tracks.iter().enumerate() {
            match track.events.last() {
                Some(TrackEvent { event: MidiEvent::EndOfTrack, .. }) => {}
                _ => return bad(format!("track {ti} does not end with EndOfTrack")),
            }
            for (ei, ev) in track.events.iter().enumerate() {
                if ev.delta > MAX_VLQ {
                    return bad(format!("track {ti} event {ei}: delta {} too large", ev.delta));
                }
                if let Err(msg) = validate_event(&ev.event) {
                    return bad(format!("track {ti} event {ei}: {msg}"));
                }
                if matches!(ev.event, MidiEvent::EndOfTrack) && ei + 1 != track.events.len() {
                    return bad(format!("track {ti}: EndOfTrack before the last event"));
                }
            }
        }
        Ok(())
    }
}

fn validate_event(event: &MidiEvent) -> std::result::Result<(), String> {
    let channel_ok = |c: u8| if c < 16 { Ok(()) } else { Err(format!("channel {c} > 15")) };
    let data_ok = |name: &str, v: u8| {
        if v < 128 {
            Ok(())
        } else {
            Err(format!("{name} {v} > 127"))
        }
    };
    match event {
        MidiEvent::NoteOn { channel, pitch, velocity } => {
            channel_ok(*channel)?;
            data_ok("pitch", *pitch)?;
            data_ok("velocity", *velocity)?;
            if *velocity == 0 {
                return Err("NoteOn with velocity 0 must be written as NoteOff".into());
            }
            Ok(())
        }
        MidiEvent::NoteOff { channel, pitch, velocity } => {
            channel_ok(*channel)?;
            data_ok("pitch", *pitch)?;
            data_ok("velocity", *velocity)
        }
        MidiEvent::ProgramChange { channel, program } => {
            channel_ok(*channel)?;
            data_ok("program", *program)
        }
        MidiEvent::OtherChannel { status, data } => {
            let kind = status & 0xF0;
            let expected = match kind {
                0xA0 | 0xB0 | 0xE0 => 2,
                0xD0 => 1,
                _ => return Err(format!("status {status:#04x} is not a generic channel message")),
            };
            if data.len() != expected {
                return Err(format!("status {status:#04x} needs {expected} data bytes"));
            }
            data.iter().try_for_each(|&b| data_ok("data byte", b))
        }
        MidiEvent::SetTempo { micros_per_quarter } => {
            if *micros_per_quarter == 0 || *micros_per_quarter > 0xFF_FFFF {
                Err(format!("tempo {micros_per_quarter} out of range"))
            } else {
                Ok(())
            }
        }
        MidiEvent::TimeSignature { numerator, .. } => {
            if *numerator == 0 {
                Err("time signature numerator 0".into())
            } else {
                Ok(())
            }
        }
        MidiEvent::OtherMeta { kind, data } => {
            let reserved = matches!((*kind, data.len()), (0x2F, _) | (0x51, 3) | (0x58, 4));
            if *kind >= 0x80 || reserved {
                return Err(format!("meta type {kind:#04x} not allowed as opaque meta"));
            }
            if data.len() > MAX_VLQ as usize {
                return Err("meta payload too long".into());
            }
            Ok(())
        }
        MidiEvent::SysEx { status, data } => {
            if *status != 0xF0 && *status != 0xF7 {
                return Err(format!("sysex status {status:#04x}"));
            }
            if data.len() > MAX_VLQ as usize {
                return Err("sysex payload too long".into());
            }
            Ok(())
        }
        MidiEvent::EndOfTrack => Ok(()),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Absolute offset of `bytes[0]` in the whole file, for error messages.
    base: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Self { bytes, pos: 0, base }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(MidiError::TruncatedInput {
                offset: self.offset(),
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.offset();
        let mut value = 0u32;
        for _ in 0..4 {
            let byte = self.u8()?;
            value = (value << 7) | u32::from(byte & 0x7F);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::MalformedVlq { offset: start })
    }
}

/// Decodes a variable-length quantity from the front of `bytes`, returning
/// the value and the number of bytes consumed.
pub fn read_vlq(bytes: &[u8]) -> Result<(u32, usize)> {
    let mut cur = Cursor::new(bytes, 0);
    let v = cur.vlq()?;
    Ok((v, cur.pos))
}

/// Appends the minimal-length VLQ encoding of `value`.
pub fn write_vlq(value: u32, out: &mut Vec<u8>) -> Result<()> {
    if value > MAX_VLQ {
        return Err(MidiError::InvariantViolation(format!("{value} does not fit a VLQ")));
    }
    let mut groups = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        groups[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let cont = if i == 0 { 0 } else { 0x80 };
        out.push(groups[i] | cont);
    }
    Ok(())
}

/// Parses an SMF, discarding warnings.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiFile> {
    parse_midi_with_warnings(bytes).map(|(f, _)| f)
}

pub fn parse_midi_with_warnings(bytes: &[u8]) -> Result<(MidiFile, Vec<ParseWarning>)> {
    let mut warnings = Vec::new();
    let mut cur = Cursor::new(bytes, 0);
    if cur.remaining() < 8 || &bytes[0..4] != b"MThd" {
        return Err(MidiError::BadHeader("missing MThd chunk".into()));
    }
    cur.take(4)?;
    let len = cur.u32()? as usize;
    if len != 6 {
        return Err(MidiError::BadHeader(format!("header length {len}, expected 6")));
    }
    let format = cur.u16()?;
    let ntracks = cur.u16()? as usize;
    let division = cur.u16()?;
    if format > 1 {
        return Err(MidiError::BadHeader(format!("unsupported format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedDivision(division));
    }
    if division == 0 {
        return Err(MidiError::BadHeader("division is zero".into()));
    }
    if format == 0 && ntracks != 1 {
        return Err(MidiError::BadHeader(format!("format 0 declares {ntracks} tracks")));
    }

    let mut tracks = Vec::with_capacity(ntracks);
    while cur.remaining() > 0 {
        let chunk_offset = cur.offset();
        let tag: [u8; 4] = cur.take(4)?.try_into().expect("4-byte slice");
        let length = cur.u32()? as usize;
        let body_offset = cur.offset();
        let body = cur.take(length)?;
        if &tag != b"MTrk" {
            log::warn!("skipping unknown chunk {:?} at byte {chunk_offset}", String::from_utf8_lossy(&tag));
            warnings.push(ParseWarning::UnknownChunk { tag, offset: chunk_offset, length });
            continue;
        }
        if tracks.len() == ntracks {
            warnings.push(ParseWarning::ExtraTrack { offset: chunk_offset });
            continue;
        }
        let index = tracks.len();
        tracks.push(parse_track(Cursor::new(body, body_offset), index, &mut warnings)?);
    }
    if tracks.len() < ntracks {
        return Err(MidiError::TruncatedInput {
            offset: bytes.len(),
            needed: ntracks - tracks.len(),
            available: 0,
        });
    }
    Ok((MidiFile { format, division, tracks }, warnings))
}

fn parse_track(mut cur: Cursor<'_>, index: usize, warnings: &mut Vec<ParseWarning>) -> Result<MidiTrack> {
    let mut events = Vec::new();
    let mut running: Option<u8> = None;
    while cur.remaining() > 0 {
        let delta = cur.vlq()?;
        let event = parse_event(&mut cur, &mut running)?;
        let end = matches!(event, MidiEvent::EndOfTrack);
        events.push(TrackEvent { delta, event });
        if end {
            if cur.remaining() > 0 {
                warnings.push(ParseWarning::TrailingTrackData { track: index, bytes: cur.remaining() });
            }
            return Ok(MidiTrack { events });
        }
    }
    warnings.push(ParseWarning::MissingEndOfTrack { track: index });
    events.push(TrackEvent::new(0, MidiEvent::EndOfTrack));
    Ok(MidiTrack { events })
}

fn parse_event(cur: &mut Cursor<'_>, running: &mut Option<u8>) -> Result<MidiEvent> {
    let offset = cur.offset();
    let first = cur.peek().ok_or(MidiError::TruncatedInput {
        offset,
        needed: 1,
        available: 0,
    })?;
    let status = if first & 0x80 != 0 {
        cur.u8()?;
        first
    } else {
        match *running {
            Some(s) => s,
            None => {
                return Err(MidiError::MalformedEvent {
                    offset,
                    reason: "data byte without running status".into(),
                })
            }
        }
    };

    match status {
        0xFF => {
            *running = None;
            let kind = cur.u8()?;
            let len = cur.vlq()? as usize;
            let data = cur.take(len)?;
            Ok(match (kind, len) {
                (0x2F, _) => MidiEvent::EndOfTrack,
                (0x51, 3) => MidiEvent::SetTempo {
                    micros_per_quarter: u32::from_be_bytes([0, data[0], data[1], data[2]]),
                },
                (0x58, 4) => MidiEvent::TimeSignature {
                    numerator: data[0],
                    denominator_pow2: data[1],
                    clocks_per_click: data[2],
                    notated_32nds_per_quarter: data[3],
                },
                _ => MidiEvent::OtherMeta { kind, data: data.to_vec() },
            })
        }
        0xF0 | 0xF7 => {
            *running = None;
            let len = cur.vlq()? as usize;
            Ok(MidiEvent::SysEx { status, data: cur.take(len)?.to_vec() })
        }
        0xF1..=0xFE => Err(MidiError::MalformedEvent {
            offset,
            reason: format!("system message {status:#04x} inside a track"),
        }),
        _ => {
            *running = Some(status);
            let channel = status & 0x0F;
            let data_len = match status & 0xF0 {
                0xC0 | 0xD0 => 1,
                _ => 2,
            };
            let data = cur.take(data_len)?;
            if data.iter().any(|b| b & 0x80 != 0) {
                return Err(MidiError::MalformedEvent {
                    offset,
                    reason: "status byte where a data byte was expected".into(),
                });
            }
            Ok(match status & 0xF0 {
                0x80 => MidiEvent::NoteOff { channel, pitch: data[0], velocity: data[1] },
                0x90 if data[1] == 0 => MidiEvent::NoteOff { channel, pitch: data[0], velocity: 0 },
                0x90 => MidiEvent::NoteOn { channel, pitch: data[0], velocity: data[1] },
                0xC0 => MidiEvent::ProgramChange { channel, program: data[0] },
                _ => MidiEvent::OtherChannel { status, data: data.to_vec() },
            })
        }
    }
}

/// Serializes `file` canonically.
pub fn write_midi(file: &MidiFile) -> Result<Vec<u8>> {
    file.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&file.format.to_be_bytes());
    out.extend_from_slice(&(file.tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&file.division.to_be_bytes());
    for track in &file.tracks {
        let mut body = Vec::new();
        for ev in &track.events {
            write_vlq(ev.delta, &mut body)?;
            write_event(&ev.event, &mut body)?;
        }
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

fn write_event(event: &MidiEvent, out: &mut Vec<u8>) -> Result<()> {
    match event {
        MidiEvent::NoteOn { channel, pitch, velocity } => out.extend_from_slice(&[0x90 | channel, *pitch, *velocity]),
        MidiEvent::NoteOff { channel, pitch, velocity } => out.extend_from_slice(&[0x80 | channel, *pitch, *velocity]),
        MidiEvent::ProgramChange { channel, program } => out.extend_from_slice(&[0xC0 | channel, *program]),
        MidiEvent::OtherChannel { status, data } => {
            out.push(*status);
            out.extend_from_slice(data);
        }
        MidiEvent::SetTempo { micros_per_quarter } => {
            let b = micros_per_quarter.to_be_bytes();
            out.extend_from_slice(&[0xFF, 0x51, 0x03, b[1], b[2], b[3]]);
        }
        MidiEvent::TimeSignature {
            numerator,
            denominator_pow2,
            clocks_per_click,
            notated_32nds_per_quarter,
        } => out.extend_from_slice(&[
            0xFF,
            0x58,
            0x04,
            *numerator,
            *denominator_pow2,
            *clocks_per_click,
            *notated_32nds_per_quarter,
        ]),
        MidiEvent::OtherMeta { kind, data } => {
            out.extend_from_slice(&[0xFF, *kind]);
            write_vlq(data.len() as u32, out)?;
            out.extend_from_slice(data);
        }
        MidiEvent::SysEx { status, data } => {
            out.push(*status);
            write_vlq(data.len() as u32, out)?;
            out.extend_from_slice(data);
        }
        MidiEvent::EndOfTrack => out.extend_from_slice(&[0xFF, 0x2F, 0x00]),
    }
    Ok(())
}
