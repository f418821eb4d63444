//! REMI-style event vocabulary and the tokenizer/detokenizer pair.
//!
//! Grammar of a canonical sequence:
//!
//! ```text
//! BOS ( Bar Tempo? ( Position Pitch Duration Velocity )* )* EOS
//! ```
//!
//! A Tempo token follows a Bar whenever the binned tempo active at that bar's
//! start differs from the previous one (always on the first bar). Notes inside a
//! bar are ordered by (position, pitch, duration, velocity).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Note, Score, TempoChange, TimeSignature, DEFAULT_BPM};

pub const POSITIONS_PER_BAR: usize = 16;
pub const DURATION_BINS: usize = 32;
pub const VELOCITY_BINS: usize = 32;
pub const TEMPO_BINS: usize = 32;
pub const TEMPO_MIN_BPM: f64 = 30.0;
pub const TEMPO_MAX_BPM: f64 = 240.0;

const POSITION_BASE: u16 = 4;
const PITCH_BASE: u16 = POSITION_BASE + POSITIONS_PER_BAR as u16;
const DURATION_BASE: u16 = PITCH_BASE + 128;
const VELOCITY_BASE: u16 = DURATION_BASE + DURATION_BINS as u16;
const TEMPO_BASE: u16 = VELOCITY_BASE + VELOCITY_BINS as u16;

/// 3 specials + Bar + 16 positions + 128 pitches + 32 durations + 32 velocities + 32 tempi.
pub const VOCAB_SIZE: usize = TEMPO_BASE as usize + TEMPO_BINS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Bos,
    Eos,
    Pad,
    Bar,
    /// Sixteenth-note slot within the bar, 0..16.
    Position(u8),
    Pitch(u8),
    /// Length in sixteenth notes, 1..=32.
    Duration(u8),
    /// Velocity bin of width 4, 0..32.
    Velocity(u8),
    /// Log-spaced tempo bin over 30..240 BPM, 0..32.
    Tempo(u8),
}

impl Token {
    pub fn id(self) -> u16 {
        match self {
            Token::Bos => 0,
            Token::Eos => 1,
            Token::Pad => 2,
            Token::Bar => 3,
            Token::Position(p) => POSITION_BASE + u16::from(p),
            Token::Pitch(p) => PITCH_BASE + u16::from(p),
            Token::Duration(d) => DURATION_BASE + u16::from(d) - 1,
            Token::Velocity(v) => VELOCITY_BASE + u16::from(v),
            Token::Tempo(t) => TEMPO_BASE + u16::from(t),
        }
    }

    pub fn from_id(id: u16) -> Option<Token> {
        Some(match id {
            0 => Token::Bos,
            1 => Token::Eos,
            2 => Token::Pad,
            3 => Token::Bar,
            i if i < PITCH_BASE => Token::Position((i - POSITION_BASE) as u8),
            i if i < DURATION_BASE => Token::Pitch((i - PITCH_BASE) as u8),
            i if i < VELOCITY_BASE => Token::Duration((i - DURATION_BASE + 1) as u8),
            i if i < TEMPO_BASE => Token::Velocity((i - VELOCITY_BASE) as u8),
            i if (i as usize) < VOCAB_SIZE => Token::Tempo((i - TEMPO_BASE) as u8),
            _ => return None,
        })
    }

    pub fn all() -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE as u16).map(|i| Token::from_id(i).expect("id in range"))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Bos => write!(f, "BOS"),
            Token::Eos => write!(f, "EOS"),
            Token::Pad => write!(f, "PAD"),
            Token::Bar => write!(f, "Bar"),
            Token::Position(p) => write!(f, "Position_{p}"),
            Token::Pitch(p) => write!(f, "Pitch_{p}"),
            Token::Duration(d) => write!(f, "Duration_{d}"),
            Token::Velocity(v) => write!(f, "Velocity_{v}"),
            Token::Tempo(t) => write!(f, "Tempo_{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl Serialize for Token {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u16(self.id())
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let id = u16::deserialize(d)?;
        Token::from_id(id).ok_or_else(|| serde::de::Error::custom(format!("token id {id} out of range")))
    }
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| usize::from(t.id())).collect()
    }

    pub fn from_ids(ids: &[usize]) -> Result<Self, TokenError> {
        ids.iter()
            .map(|&i| {
                u16::try_from(i)
                    .ok()
                    .and_then(Token::from_id)
                    .ok_or(TokenError::UnknownId(i as u32))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps at most `max_len` leading tokens.
    pub fn truncated(mut self, max_len: usize) -> Self {
        self.tokens.truncate(max_len);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizationConfig {
    /// Resolution of scores produced by detokenization; must be a multiple of 4.
    pub ticks_per_quarter: u32,
    /// Meter assumed when detokenizing (token streams carry no meter).
    pub meter: (u8, u8),
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self { ticks_per_quarter: 480, meter: (4, 4) }
    }
}

impl QuantizationConfig {
    fn ticks_per_slot(&self) -> u64 {
        u64::from((self.ticks_per_quarter / 4).max(1))
    }
}

/// Sixteenth slots in one bar of `numerator/denominator`, clamped to the
/// 16 available position tokens.
pub fn slots_per_bar(numerator: u8, denominator: u8) -> u64 {
    let slots = (16.0 * f64::from(numerator) / f64::from(denominator.max(1))).round();
    slots.clamp(1.0, POSITIONS_PER_BAR as f64) as u64
}

pub fn velocity_bin(velocity: u8) -> u8 {
    (velocity / 4).min(VELOCITY_BINS as u8 - 1)
}

pub fn velocity_from_bin(bin: u8) -> u8 {
    (bin.min(VELOCITY_BINS as u8 - 1) * 4).max(1)
}

pub fn tempo_bin(bpm: f64) -> u8 {
    let bpm = bpm.clamp(TEMPO_MIN_BPM, TEMPO_MAX_BPM);
    let pos = (bpm / TEMPO_MIN_BPM).ln() / (TEMPO_MAX_BPM / TEMPO_MIN_BPM).ln() * (TEMPO_BINS - 1) as f64;
    pos.round().clamp(0.0, (TEMPO_BINS - 1) as f64) as u8
}

pub fn tempo_from_bin(bin: u8) -> f64 {
    let frac = f64::from(bin.min(TEMPO_BINS as u8 - 1)) / (TEMPO_BINS - 1) as f64;
    TEMPO_MIN_BPM * (TEMPO_MAX_BPM / TEMPO_MIN_BPM).powf(frac)
}

/// Rounds a tick count to the nearest sixteenth slot.
fn to_slot(ticks: u64, tpq: u32) -> u64 {
    let tpq = u128::from(tpq.max(1));
    ((u128::from(ticks) * 8 + tpq) / (2 * tpq)) as u64
}

struct BarLayout {
    /// Start slot of each bar, plus a final sentinel past the last bar.
    starts: Vec<u64>,
}

impl BarLayout {
    fn covering(score: &Score, last_slot: u64) -> Self {
        let tpq = u64::from(score.ticks_per_quarter.max(1));
        let mut starts = vec![0u64];
        loop {
            let start = *starts.last().unwrap();
            let tick = start * tpq / 4;
            let (num, den) = score.time_signature_at(tick);
            let next = start + slots_per_bar(num, den);
            starts.push(next);
            if next > last_slot {
                break;
            }
        }
        Self { starts }
    }

    fn bars(&self) -> usize {
        self.starts.len() - 1
    }

    fn locate(&self, slot: u64) -> (usize, u64) {
        let bar = self.starts.partition_point(|&s| s <= slot) - 1;
        (bar, slot - self.starts[bar])
    }
}

/// Encodes a score as a canonical token sequence. Quantization clamps every
/// value to its nearest bin; tracks are merged into one stream.
pub fn score_to_tokens(score: &Score, _grid: &QuantizationConfig) -> TokenSequence {
    let mut tokens = vec![Token::Bos];
    if score.notes.is_empty() {
        tokens.push(Token::Eos);
        return TokenSequence::new(tokens);
    }
    let tpq = score.ticks_per_quarter;
    let last_slot = score.notes.iter().map(|n| to_slot(n.onset, tpq)).max().unwrap_or(0);
    let layout = BarLayout::covering(score, last_slot);

    let mut per_bar: Vec<Vec<(u8, u8, u8, u8)>> = vec![Vec::new(); layout.bars()];
    for n in &score.notes {
        let (bar, pos) = layout.locate(to_slot(n.onset, tpq));
        let dur = to_slot(n.duration, tpq).clamp(1, DURATION_BINS as u64) as u8;
        per_bar[bar].push((pos as u8, n.pitch, dur, velocity_bin(n.velocity)));
    }

    let mut prev_tempo: Option<u8> = None;
    for (bar, notes) in per_bar.iter_mut().enumerate() {
        tokens.push(Token::Bar);
        let tick = layout.starts[bar] * u64::from(tpq) / 4;
        let tb = tempo_bin(score.tempo_at(tick));
        if prev_tempo != Some(tb) {
            tokens.push(Token::Tempo(tb));
            prev_tempo = Some(tb);
        }
        notes.sort_unstable();
        for &(pos, pitch, dur, vel) in notes.iter() {
            tokens.extend([Token::Position(pos), Token::Pitch(pitch), Token::Duration(dur), Token::Velocity(vel)]);
        }
    }
    tokens.push(Token::Eos);
    TokenSequence::new(tokens)
}

/// Result of decoding a possibly ill-formed token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Detokenized {
    pub score: Score,
    /// Tokens skipped because they did not fit the grammar.
    pub dropped_tokens: usize,
}

/// Decodes tokens into a quantized score. Tokens that do not fit the grammar
/// are skipped and counted; decoding stops at the first EOS.
pub fn tokens_to_score(seq: &TokenSequence, grid: &QuantizationConfig) -> Result<Detokenized, TokenError> {
    if seq.is_empty() {
        return Err(TokenError::EmptySequence);
    }
    let tps = grid.ticks_per_slot();
    let bar_len = slots_per_bar(grid.meter.0, grid.meter.1);
    let mut notes = Vec::new();
    let mut tempo = Vec::new();
    let mut dropped = 0usize;
    let mut bar_start: Option<u64> = None;

    enum Pending {
        None,
        Position(u8),
        Pitch(u8, u8),
        Duration(u8, u8, u8),
    }
    let mut pending = Pending::None;
    let pending_len = |p: &Pending| match p {
        Pending::None => 0,
        Pending::Position(_) => 1,
        Pending::Pitch(..) => 2,
        Pending::Duration(..) => 3,
    };

    for (i, &tok) in seq.tokens.iter().enumerate() {
        // a token that does not continue the pending note aborts it
        let continues = matches!(
            (&pending, tok),
            (Pending::Position(_), Token::Pitch(_))
                | (Pending::Pitch(..), Token::Duration(_))
                | (Pending::Duration(..), Token::Velocity(_))
        );
        if !continues && !matches!(pending, Pending::None) {
            dropped += pending_len(&pending);
            pending = Pending::None;
        }
        match tok {
            Token::Eos => break,
            Token::Pad => {}
            Token::Bos => {
                if i != 0 {
                    dropped += 1;
                }
            }
            Token::Bar => {
                bar_start = Some(bar_start.map_or(0, |s| s + bar_len));
            }
            Token::Tempo(t) => match bar_start {
                Some(start) => tempo.push(TempoChange { tick: start * tps, bpm: tempo_from_bin(t) }),
                None => dropped += 1,
            },
            Token::Position(p) => {
                if bar_start.is_some() && u64::from(p) < bar_len {
                    pending = Pending::Position(p);
                } else {
                    dropped += 1;
                }
            }
            Token::Pitch(p) => match pending {
                Pending::Position(pos) => pending = Pending::Pitch(pos, p),
                _ => dropped += 1,
            },
            Token::Duration(d) => match pending {
                Pending::Pitch(pos, p) => pending = Pending::Duration(pos, p, d),
                _ => dropped += 1,
            },
            Token::Velocity(v) => match pending {
                Pending::Duration(pos, p, d) => {
                    let start = bar_start.expect("position only accepted inside a bar");
                    notes.push(Note {
                        onset: (start + u64::from(pos)) * tps,
                        duration: u64::from(d) * tps,
                        pitch: p,
                        velocity: velocity_from_bin(v),
                        track: 0,
                    });
                    pending = Pending::None;
                }
                _ => dropped += 1,
            },
        }
    }
    dropped += pending_len(&pending);

    // consecutive identical tempi collapse to the first
    let mut tempo_map: Vec<TempoChange> = Vec::new();
    tempo.sort_by_key(|t| t.tick);
    for t in tempo {
        match tempo_map.last_mut() {
            Some(last) if last.tick == t.tick => *last = t,
            Some(last) if last.bpm == t.bpm => {}
            _ => tempo_map.push(t),
        }
    }
    if tempo_map.first().is_none_or(|t| t.tick != 0) {
        tempo_map.insert(0, TempoChange { tick: 0, bpm: DEFAULT_BPM });
    }
    let sigs = vec![TimeSignature { tick: 0, numerator: grid.meter.0, denominator: grid.meter.1 }];
    Ok(Detokenized {
        score: Score::new(notes, grid.ticks_per_quarter, tempo_map, sigs),
        dropped_tokens: dropped,
    })
}

/// Snaps a score to the token grid (tokenize, then detokenize).
pub fn quantize(score: &Score, grid: &QuantizationConfig) -> Score {
    let seq = score_to_tokens(score, grid);
    tokens_to_score(&seq, grid).expect("tokenizer output is never empty").score
}

/// Newline-delimited integer ids.
pub fn write_token_text(seq: &TokenSequence) -> String {
    let mut out = String::with_capacity(seq.len() * 4);
    for t in &seq.tokens {
        out.push_str(&t.id().to_string());
        out.push('\n');
    }
    out
}

pub fn read_token_text(text: &str) -> Result<TokenSequence, TokenError> {
    let mut tokens = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: u32 = line.parse().map_err(|e| TokenError::Parse { line: line_no + 1, reason: format!("{e}") })?;
        let tok = u16::try_from(id).ok().and_then(Token::from_id).ok_or(TokenError::UnknownId(id))?;
        tokens.push(tok);
    }
    Ok(TokenSequence::new(tokens))
}

/// JSON object mapping token name to id.
pub fn vocabulary_manifest() -> serde_json::Value {
    let map: BTreeMap<String, u16> = Token::all().map(|t| (t.to_string(), t.id())).collect();
    serde_json::to_value(map).expect("string keys")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn note(onset: u64, duration: u64, pitch: u8, velocity: u8) -> Note {
        Note { onset, duration, pitch, velocity, track: 0 }
    }

    fn score(notes: Vec<Note>) -> Score {
        Score::new(notes, 480, vec![], vec![])
    }

    #[test]
    fn vocabulary_is_a_bijection_of_244_ids() {
        assert_eq!(VOCAB_SIZE, 244);
        let mut seen = std::collections::HashSet::new();
        for t in Token::all() {
            assert_eq!(Token::from_id(t.id()), Some(t));
            assert!(seen.insert(t.to_string()));
        }
        assert_eq!(seen.len(), 244);
        assert_eq!(Token::from_id(244), None);
        assert_eq!(vocabulary_manifest().as_object().unwrap().len(), 244);
        assert_eq!(vocabulary_manifest()["Tempo_31"], 243);
    }

    #[test]
    fn single_note_example() {
        let s = score(vec![note(0, 480, 60, 64)]);
        let seq = score_to_tokens(&s, &QuantizationConfig::default());
        assert_eq!(tempo_bin(120.0), 21);
        assert_eq!(
            seq.tokens,
            vec![
                Token::Bos,
                Token::Bar,
                Token::Tempo(21),
                Token::Position(0),
                Token::Pitch(60),
                Token::Duration(4),
                Token::Velocity(16),
                Token::Eos
            ]
        );
        let back = tokens_to_score(&seq, &QuantizationConfig::default()).unwrap();
        assert_eq!(back.dropped_tokens, 0);
        assert_eq!(back.score.notes, vec![note(0, 480, 60, 64)]);
        assert!((back.score.tempo_map[0].bpm - tempo_from_bin(21)).abs() < 1e-12);
    }

    #[test]
    fn note_in_second_bar_gets_two_bar_tokens() {
        let s = score(vec![note(4 * 480 + 240, 120, 64, 80)]);
        let seq = score_to_tokens(&s, &QuantizationConfig::default());
        let bars_before = seq.tokens.iter().take_while(|t| !matches!(t, Token::Position(_))).filter(|t| **t == Token::Bar);
        assert_eq!(bars_before.count(), 2);
        assert!(seq.tokens.contains(&Token::Position(2)));
    }

    #[test]
    fn long_duration_is_clamped() {
        let s = score(vec![note(0, 10 * 480, 60, 64)]);
        let seq = score_to_tokens(&s, &QuantizationConfig::default());
        assert!(seq.tokens.contains(&Token::Duration(32)));
    }

    #[test]
    fn tempo_token_only_on_change() {
        let s = Score::new(
            (0..3).map(|b| note(b * 1920, 480, 60, 64)).collect(),
            480,
            vec![TempoChange { tick: 0, bpm: 90.0 }, TempoChange { tick: 3840, bpm: 180.0 }],
            vec![],
        );
        let seq = score_to_tokens(&s, &QuantizationConfig::default());
        let tempi: Vec<_> = seq.tokens.iter().filter(|t| matches!(t, Token::Tempo(_))).collect();
        assert_eq!(tempi, vec![&Token::Tempo(tempo_bin(90.0)), &Token::Tempo(tempo_bin(180.0))]);
    }

    #[test]
    fn three_four_bars_use_twelve_slots() {
        let s = Score::new(
            vec![note(3 * 480, 480, 60, 64)],
            480,
            vec![],
            vec![TimeSignature { tick: 0, numerator: 3, denominator: 4 }],
        );
        let seq = score_to_tokens(&s, &QuantizationConfig::default());
        assert_eq!(seq.tokens.iter().filter(|t| **t == Token::Bar).count(), 2);
        assert!(seq.tokens.contains(&Token::Position(0)));
    }

    #[test]
    fn stray_pitch_is_dropped() {
        let with_stray = TokenSequence::new(vec![
            Token::Bos,
            Token::Bar,
            Token::Tempo(21),
            Token::Pitch(62),
            Token::Position(0),
            Token::Pitch(60),
            Token::Duration(4),
            Token::Velocity(16),
            Token::Eos,
        ]);
        let d = tokens_to_score(&with_stray, &QuantizationConfig::default()).unwrap();
        assert_eq!(d.dropped_tokens, 1);
        assert_eq!(d.score.notes, vec![note(0, 480, 60, 64)]);
    }

    #[test]
    fn incomplete_fragments_are_counted() {
        let seq = TokenSequence::new(vec![
            Token::Bos,
            Token::Position(0), // before any Bar
            Token::Bar,
            Token::Position(3),
            Token::Pitch(60),
            Token::Bar, // aborts the 2-token fragment
            Token::Duration(4), // stray
            Token::Eos,
        ]);
        let d = tokens_to_score(&seq, &QuantizationConfig::default()).unwrap();
        assert!(d.score.notes.is_empty());
        assert_eq!(d.dropped_tokens, 4);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert_eq!(
            tokens_to_score(&TokenSequence::default(), &QuantizationConfig::default()),
            Err(TokenError::EmptySequence)
        );
    }

    #[test]
    fn token_text_round_trip() {
        let seq = score_to_tokens(&score(vec![note(0, 480, 60, 64)]), &QuantizationConfig::default());
        let text = write_token_text(&seq);
        assert_eq!(text.lines().next(), Some("0"));
        assert_eq!(read_token_text(&text).unwrap(), seq);
        assert_eq!(read_token_text("5\n999\n"), Err(TokenError::UnknownId(999)));
        assert!(matches!(read_token_text("x"), Err(TokenError::Parse { line: 1, .. })));
    }

    #[test]
    fn tempo_bins_are_stable() {
        for b in 0..TEMPO_BINS as u8 {
            assert_eq!(tempo_bin(tempo_from_bin(b)), b);
        }
        assert_eq!(tempo_bin(10.0), 0);
        assert_eq!(tempo_bin(400.0), 31);
        for v in 1..=127u8 {
            let b = velocity_bin(v);
            assert_eq!(velocity_bin(velocity_from_bin(b)), b);
        }
    }

    fn arb_score() -> impl Strategy<Value = Score> {
        let note = (0u64..2000, 1u64..900, 0u8..128, 1u8..128, 0u16..3)
            .prop_map(|(onset, duration, pitch, velocity, track)| Note { onset, duration, pitch, velocity, track });
        let tempo = prop::collection::vec((0u64..8000, 25.0f64..260.0), 0..4)
            .prop_map(|v| v.into_iter().map(|(tick, bpm)| TempoChange { tick, bpm }).collect::<Vec<_>>());
        (prop::collection::vec(note, 1..40), tempo, prop::sample::select(vec![96u32, 120, 480, 384]))
            .prop_map(|(notes, tempo, tpq)| Score::new(notes, tpq, tempo, vec![]))
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent_and_round_trips(s in arb_score()) {
            let grid = QuantizationConfig::default();
            let q = quantize(&s, &grid);
            prop_assert_eq!(&quantize(&q, &grid), &q);
            let seq = score_to_tokens(&q, &grid);
            let back = tokens_to_score(&seq, &grid).unwrap();
            prop_assert_eq!(back.dropped_tokens, 0);
            prop_assert_eq!(&back.score, &q);
            prop_assert_eq!(score_to_tokens(&back.score, &grid), seq);
        }
    }
}
