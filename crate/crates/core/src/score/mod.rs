//! Note-level score model and conversion to/from MIDI.

mod tokens;

pub use tokens::{
    quantize, read_token_text, score_to_tokens, tokens_to_score, vocabulary_manifest, write_token_text,
    Detokenized, QuantizationConfig, Token, TokenError, TokenSequence, DURATION_BINS, POSITIONS_PER_BAR,
    TEMPO_BINS, VELOCITY_BINS, VOCAB_SIZE,
};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::midi::{MidiEvent, MidiFile, MidiTrack, TrackEvent};

pub const DEFAULT_BPM: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Note {
    pub onset: u64,
    /// At least one tick.
    pub duration: u64,
    pub pitch: u8,
    /// 1..=127.
    pub velocity: u8,
    pub track: u16,
}

impl Note {
    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }

    fn sort_key(&self) -> (u64, u8, u16, u64, u8) {
        (self.onset, self.pitch, self.track, self.duration, self.velocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoChange {
    pub tick: u64,
    pub bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSignature {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Sorted by (onset, pitch, track).
    pub notes: Vec<Note>,
    pub ticks_per_quarter: u32,
    /// Sorted by tick, first entry at tick 0.
    pub tempo_map: Vec<TempoChange>,
    /// Sorted by tick, first entry at tick 0.
    pub time_signatures: Vec<TimeSignature>,
}

impl Score {
    /// Builds a score and restores the ordering and default-entry invariants.
    pub fn new(
        notes: Vec<Note>,
        ticks_per_quarter: u32,
        tempo_map: Vec<TempoChange>,
        time_signatures: Vec<TimeSignature>,
    ) -> Self {
        let mut score = Score { notes, ticks_per_quarter, tempo_map, time_signatures };
        score.normalize();
        score
    }

    pub fn normalize(&mut self) {
        self.notes.sort_by_key(Note::sort_key);

        self.tempo_map.sort_by_key(|t| t.tick);
        // later entries at the same tick win
        let mut tempo: Vec<TempoChange> = Vec::with_capacity(self.tempo_map.len() + 1);
        for t in self.tempo_map.drain(..) {
            match tempo.last_mut() {
                Some(last) if last.tick == t.tick => *last = t,
                _ => tempo.push(t),
            }
        }
        if tempo.first().is_none_or(|t| t.tick != 0) {
            tempo.insert(0, TempoChange { tick: 0, bpm: DEFAULT_BPM });
        }
        self.tempo_map = tempo;

        self.time_signatures.sort_by_key(|t| t.tick);
        let mut sigs: Vec<TimeSignature> = Vec::with_capacity(self.time_signatures.len() + 1);
        for s in self.time_signatures.drain(..) {
            match sigs.last_mut() {
                Some(last) if last.tick == s.tick => *last = s,
                _ => sigs.push(s),
            }
        }
        if sigs.first().is_none_or(|s| s.tick != 0) {
            sigs.insert(0, TimeSignature { tick: 0, numerator: 4, denominator: 4 });
        }
        self.time_signatures = sigs;
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Tick at which the last note stops sounding.
    pub fn end_tick(&self) -> u64 {
        self.notes.iter().map(Note::end).max().unwrap_or(0)
    }

    pub fn tempo_at(&self, tick: u64) -> f64 {
        self.tempo_map
            .iter()
            .take_while(|t| t.tick <= tick)
            .last()
            .map_or(DEFAULT_BPM, |t| t.bpm)
    }

    pub fn time_signature_at(&self, tick: u64) -> (u8, u8) {
        self.time_signatures
            .iter()
            .take_while(|t| t.tick <= tick)
            .last()
            .map_or((4, 4), |t| (t.numerator, t.denominator))
    }
}

/// Pairs NoteOn/NoteOff events first-in first-out per (channel, pitch) within
/// each track; notes still sounding at EndOfTrack are closed there. A file
/// without notes yields an empty score (check [`Score::is_empty`]).
pub fn midi_to_score(file: &MidiFile) -> Score {
    let mut notes = Vec::new();
    let mut tempo = Vec::new();
    let mut sigs = Vec::new();
    for (ti, track) in file.tracks.iter().enumerate() {
        let mut tick = 0u64;
        let mut open: BTreeMap<(u8, u8), VecDeque<(u64, u8)>> = BTreeMap::new();
        for ev in &track.events {
            tick += u64::from(ev.delta);
            match ev.event {
                MidiEvent::NoteOn { channel, pitch, velocity } => {
                    open.entry((channel, pitch)).or_default().push_back((tick, velocity));
                }
                MidiEvent::NoteOff { channel, pitch, .. } => {
                    if let Some((onset, velocity)) = open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front) {
                        notes.push(make_note(onset, tick, pitch, velocity, ti));
                    }
                }
                MidiEvent::SetTempo { micros_per_quarter } => {
                    tempo.push(TempoChange { tick, bpm: 60_000_000.0 / f64::from(micros_per_quarter) });
                }
                MidiEvent::TimeSignature { numerator, denominator_pow2, .. } => {
                    sigs.push(TimeSignature {
                        tick,
                        numerator,
                        denominator: 1u8.checked_shl(u32::from(denominator_pow2)).unwrap_or(128),
                    });
                }
                _ => {}
            }
        }
        for ((_, pitch), queue) in open {
            for (onset, velocity) in queue {
                notes.push(make_note(onset, tick, pitch, velocity, ti));
            }
        }
    }
    let score = Score::new(notes, u32::from(file.division), tempo, sigs);
    if score.is_empty() {
        log::warn!("MIDI file contains no notes");
    }
    score
}

fn make_note(onset: u64, end: u64, pitch: u8, velocity: u8, track: usize) -> Note {
    Note {
        onset,
        duration: end.saturating_sub(onset).max(1),
        pitch,
        velocity: velocity.clamp(1, 127),
        track: track as u16,
    }
}

/// Renders a score as a MIDI file: format 0 when every note is on track 0,
/// otherwise format 1 with one MIDI track per score track index. Tempo and
/// time signature events go to the first track.
pub fn score_to_midi(score: &Score) -> MidiFile {
    let n_tracks = score.notes.iter().map(|n| usize::from(n.track) + 1).max().unwrap_or(1);
    // (tick, order, event): meta first, then note-offs, then note-ons
    let mut per_track: Vec<Vec<(u64, u8, MidiEvent)>> = vec![Vec::new(); n_tracks];
    for t in &score.tempo_map {
        let micros = (60_000_000.0 / t.bpm).round().clamp(1.0, f64::from(0xFF_FFFFu32)) as u32;
        per_track[0].push((t.tick, 0, MidiEvent::SetTempo { micros_per_quarter: micros }));
    }
    for s in &score.time_signatures {
        let pow = s.denominator.max(1).trailing_zeros() as u8;
        per_track[0].push((s.tick, 0, MidiEvent::time_signature(s.numerator.max(1), pow)));
    }
    for n in &score.notes {
        let channel = 0;
        let ev = &mut per_track[usize::from(n.track)];
        ev.push((n.onset, 2, MidiEvent::NoteOn { channel, pitch: n.pitch, velocity: n.velocity.max(1) }));
        ev.push((n.end(), 1, MidiEvent::NoteOff { channel, pitch: n.pitch, velocity: 0 }));
    }
    let division = score.ticks_per_quarter.clamp(1, 0x7FFF) as u16;
    let tracks = per_track
        .into_iter()
        .map(|mut events| {
            events.sort_by_key(|(tick, order, _)| (*tick, *order));
            let mut last = 0u64;
            let mut out: Vec<TrackEvent> = events
                .into_iter()
                .map(|(tick, _, event)| {
                    let delta = (tick - last) as u32;
                    last = tick;
                    TrackEvent::new(delta, event)
                })
                .collect();
            out.push(TrackEvent::new(0, MidiEvent::EndOfTrack));
            MidiTrack { events: out }
        })
        .collect();
    MidiFile { format: if n_tracks == 1 { 0 } else { 1 }, division, tracks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::parse_midi;

    #[test]
    fn minimal_fixture_yields_one_note() {
        let bytes = [
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 13, //
            0x00, 0x90, 0x3C, 0x40, 0x83, 0x60, 0x80, 0x3C, 0x40, 0x00, 0xFF, 0x2F, 0x00,
        ];
        let score = midi_to_score(&parse_midi(&bytes).unwrap());
        assert_eq!(
            score.notes,
            vec![Note { onset: 0, duration: 480, pitch: 60, velocity: 64, track: 0 }]
        );
        assert_eq!(score.tempo_map, vec![TempoChange { tick: 0, bpm: 120.0 }]);
        assert_eq!(score.time_signatures, vec![TimeSignature { tick: 0, numerator: 4, denominator: 4 }]);
    }

    fn track(events: Vec<(u32, MidiEvent)>) -> MidiTrack {
        MidiTrack {
            events: events.into_iter().map(|(d, e)| TrackEvent::new(d, e)).collect(),
        }
    }

    #[test]
    fn unterminated_note_closes_at_end_of_track() {
        let file = MidiFile {
            format: 0,
            division: 480,
            tracks: vec![track(vec![
                (0, MidiEvent::NoteOn { channel: 0, pitch: 60, velocity: 80 }),
                (960, MidiEvent::EndOfTrack),
            ])],
        };
        let score = midi_to_score(&file);
        assert_eq!(score.notes[0].duration, 960);
    }

    #[test]
    fn overlapping_same_pitch_pairs_fifo() {
        let on = MidiEvent::NoteOn { channel: 0, pitch: 62, velocity: 90 };
        let off = MidiEvent::NoteOff { channel: 0, pitch: 62, velocity: 0 };
        let file = MidiFile {
            format: 0,
            division: 480,
            tracks: vec![track(vec![
                (0, on.clone()),
                (100, on),
                (200, off.clone()),
                (50, off),
                (0, MidiEvent::EndOfTrack),
            ])],
        };
        let score = midi_to_score(&file);
        // first-on closed by first-off (tick 300), second-on by second-off (tick 350)
        assert_eq!(score.notes.len(), 2);
        assert_eq!((score.notes[0].onset, score.notes[0].duration), (0, 300));
        assert_eq!((score.notes[1].onset, score.notes[1].duration), (100, 250));
    }

    #[test]
    fn tempo_and_meter_are_collected_across_tracks() {
        let file = MidiFile {
            format: 1,
            division: 96,
            tracks: vec![
                track(vec![
                    (0, MidiEvent::SetTempo { micros_per_quarter: 400_000 }),
                    (384, MidiEvent::time_signature(3, 2)),
                    (0, MidiEvent::EndOfTrack),
                ]),
                track(vec![
                    (96, MidiEvent::NoteOn { channel: 1, pitch: 70, velocity: 50 }),
                    (96, MidiEvent::NoteOff { channel: 1, pitch: 70, velocity: 0 }),
                    (0, MidiEvent::EndOfTrack),
                ]),
            ],
        };
        let score = midi_to_score(&file);
        assert_eq!(score.tempo_map, vec![TempoChange { tick: 0, bpm: 150.0 }]);
        assert_eq!(
            score.time_signatures,
            vec![
                TimeSignature { tick: 0, numerator: 4, denominator: 4 },
                TimeSignature { tick: 384, numerator: 3, denominator: 4 }
            ]
        );
        assert_eq!(score.notes[0].track, 1);
    }

    #[test]
    fn empty_file_is_flagged_not_fatal() {
        assert!(midi_to_score(&MidiFile::empty(480)).is_empty());
    }

    #[test]
    fn score_to_midi_round_trips_notes() {
        let score = Score::new(
            vec![
                Note { onset: 0, duration: 240, pitch: 60, velocity: 70, track: 0 },
                Note { onset: 240, duration: 240, pitch: 60, velocity: 71, track: 0 },
                Note { onset: 0, duration: 960, pitch: 36, velocity: 50, track: 1 },
            ],
            480,
            vec![TempoChange { tick: 0, bpm: 100.0 }],
            vec![],
        );
        let file = score_to_midi(&score);
        assert_eq!(file.format, 1);
        let bytes = crate::midi::write_midi(&file).unwrap();
        let back = midi_to_score(&parse_midi(&bytes).unwrap());
        assert_eq!(back.notes, score.notes);
        assert!((back.tempo_map[0].bpm - 100.0).abs() < 1e-9);
    }
}
