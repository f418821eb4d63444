//! Symbolic music attributes.
//!
//! The [`FeatureCatalog`] is an ordered list of feature definitions whose
//! flattened values form an [`AttributeVector`]. Definitions follow jSymbolic
//! naming where a counterpart exists; exact formulas are documented on each
//! entry and in `docs/features.md`.
//!
//! Conventions shared by all features:
//! - notes are taken in (onset, pitch) order over all tracks;
//! - the piece spans tick 0 to the end of the last note;
//! - durations, lengths and intervals between onsets are in quarter notes;
//! - `std` is the population standard deviation;
//! - a histogram whose event set is empty is all zeros, otherwise it sums to 1.

mod corpus;

pub use corpus::{extract_corpus, CorpusError, CorpusMatrix};

use serde::{Deserialize, Serialize};

use crate::score::{Note, Score};

pub const CATALOG_VERSION: &str = "symfeat-1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Pitch,
    Melody,
    Vertical,
    Rhythm,
    Dynamics,
    Texture,
    Instrumentation,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 7] = [
        Self::Pitch,
        Self::Melody,
        Self::Vertical,
        Self::Rhythm,
        Self::Dynamics,
        Self::Texture,
        Self::Instrumentation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Pitch => "pitch statistics",
            Self::Melody => "melodic intervals",
            Self::Vertical => "chords and vertical intervals",
            Self::Rhythm => "rhythm",
            Self::Dynamics => "dynamics",
            Self::Texture => "texture",
            Self::Instrumentation => "instrumentation",
        }
    }
}

type Compute = fn(&Analysis<'_>) -> Vec<f64>;

#[derive(Clone)]
pub struct FeatureDef {
    pub id: &'static str,
    pub name: &'static str,
    pub group: FeatureGroup,
    pub dim: usize,
    pub definition: &'static str,
    compute: Compute,
}

impl std::fmt::Debug for FeatureDef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureDef")
            .field("id", &self.id)
            .field("group", &self.group)
            .field("dim", &self.dim)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct FeatureCatalog {
    pub version: String,
    entries: Vec<FeatureDef>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl Default for FeatureCatalog {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub values: Vec<f64>,
    pub catalog_version: String,
    /// Set when the score had no notes; `values` is then all zeros.
    #[serde(default)]
    pub empty_score: bool,
}

macro_rules! def {
    ($id:literal, $name:literal, $group:ident, $dim:expr, $def:literal, $f:expr) => {
        FeatureDef {
            id: $id,
            name: $name,
            group: FeatureGroup::$group,
            dim: $dim,
            definition: $def,
            compute: $f,
        }
    };
}

fn scalar(v: f64) -> Vec<f64> {
    vec![v]
}

impl FeatureCatalog {
    pub fn standard() -> Self {
        let entries = vec![
            // pitch
            def!("pitch_class_histogram", "Pitch Class Histogram", Pitch, 12,
                "Fraction of notes per pitch class, C = bin 0.", |a| a.pitch_class_hist()),
            def!("pitch_histogram", "Pitch Histogram", Pitch, 128,
                "Fraction of notes per MIDI pitch.", |a| a.pitch_hist()),
            def!("fifths_pitch_class_histogram", "Folded Fifths Pitch Class Histogram", Pitch, 12,
                "Pitch class histogram reordered by the circle of fifths: bin (7 * pc) mod 12.",
                |a| a.fifths_hist()),
            def!("mean_pitch", "Mean Pitch", Pitch, 1, "Mean MIDI pitch.", |a| scalar(mean(&a.pitches))),
            def!("pitch_std", "Pitch Variability", Pitch, 1, "Std of MIDI pitch.", |a| scalar(std(&a.pitches))),
            def!("pitch_range", "Range", Pitch, 1, "Highest minus lowest pitch.",
                |a| scalar(a.max_pitch() - a.min_pitch())),
            def!("lowest_pitch", "Lowest Pitch", Pitch, 1, "Lowest MIDI pitch.", |a| scalar(a.min_pitch())),
            def!("highest_pitch", "Highest Pitch", Pitch, 1, "Highest MIDI pitch.", |a| scalar(a.max_pitch())),
            def!("distinct_pitches", "Number of Pitches", Pitch, 1, "Number of distinct MIDI pitches.",
                |a| scalar(a.pitch_hist().iter().filter(|&&v| v > 0.0).count() as f64)),
            def!("distinct_pitch_classes", "Number of Pitch Classes", Pitch, 1,
                "Number of distinct pitch classes.",
                |a| scalar(a.pitch_class_hist().iter().filter(|&&v| v > 0.0).count() as f64)),
            def!("dominant_pitch_class_prevalence", "Prevalence of Most Common Pitch Class", Pitch, 1,
                "Largest pitch class histogram bin.",
                |a| scalar(a.pitch_class_hist().into_iter().fold(0.0, f64::max))),
            def!("major_key_correlation", "Major Key Correlation", Pitch, 1,
                "Maximum Pearson correlation of the pitch class histogram with the 12 rotations of the Krumhansl-Kessler major profile (0 if the histogram is constant).",
                |a| scalar(key_correlation(&a.pitch_class_hist(), &KK_MAJOR))),
            def!("minor_key_correlation", "Minor Key Correlation", Pitch, 1,
                "As major_key_correlation with the Krumhansl-Kessler minor profile.",
                |a| scalar(key_correlation(&a.pitch_class_hist(), &KK_MINOR))),
            // melody
            def!("melodic_interval_histogram", "Melodic Interval Histogram", Melody, 128,
                "Fraction of successive note pairs per absolute pitch difference in semitones.",
                |a| a.melodic_hist()),
            def!("mean_melodic_interval", "Mean Melodic Interval", Melody, 1,
                "Mean absolute pitch difference between successive notes.", |a| scalar(mean(&a.abs_intervals()))),
            def!("melodic_interval_std", "Melodic Interval Variability", Melody, 1,
                "Std of absolute successive pitch differences.", |a| scalar(std(&a.abs_intervals()))),
            def!("largest_melodic_interval", "Largest Melodic Interval", Melody, 1,
                "Largest absolute successive pitch difference.",
                |a| scalar(a.abs_intervals().into_iter().fold(0.0, f64::max))),
            def!("repeated_note_fraction", "Repeated Notes", Melody, 1,
                "Fraction of successive pairs with equal pitch.", |a| scalar(a.interval_fraction(|d| d == 0))),
            def!("stepwise_motion_fraction", "Stepwise Motion", Melody, 1,
                "Fraction of successive pairs 1 or 2 semitones apart.",
                |a| scalar(a.interval_fraction(|d| d == 1 || d == 2))),
            def!("melodic_leap_fraction", "Melodic Leaps", Melody, 1,
                "Fraction of successive pairs at least 5 semitones apart.", |a| scalar(a.interval_fraction(|d| d >= 5))),
            def!("rising_motion_fraction", "Direction of Melodic Motion", Melody, 1,
                "Fraction of non-zero successive intervals that rise.", |a| scalar(a.rising_fraction())),
            // chords and vertical intervals
            def!("vertical_interval_histogram", "Vertical Interval Histogram", Vertical, 128,
                "Semitone gaps between every pair of notes sounding at each onset instant, weighted by how long both keep sounding before the next onset instant.",
                |a| a.vertical_hist()),
            def!("polyphony_histogram", "Simultaneity Histogram", Vertical, 16,
                "Fraction of onset instants by number of sounding notes; bin i holds i+1 notes, the last bin 16 or more.",
                |a| a.polyphony_hist()),
            def!("mean_polyphony", "Average Number of Simultaneous Notes", Vertical, 1,
                "Mean number of notes sounding at onset instants.",
                |a| scalar(mean(&a.polyphony.iter().map(|&p| p as f64).collect::<Vec<_>>()))),
            def!("max_polyphony", "Maximum Number of Simultaneous Notes", Vertical, 1,
                "Largest number of notes sounding at an onset instant.",
                |a| scalar(a.polyphony.iter().copied().max().unwrap_or(0) as f64)),
            def!("simultaneity_fraction", "Prevalence of Simultaneities", Vertical, 1,
                "Fraction of onset instants with two or more sounding notes.",
                |a| scalar(fraction(a.polyphony.iter(), |&&p| p >= 2))),
            def!("mean_vertical_interval", "Average Vertical Interval", Vertical, 1,
                "Weighted mean of the vertical intervals.", |a| scalar(a.mean_vertical())),
            def!("consonant_vertical_fraction", "Consonant Vertical Intervals", Vertical, 1,
                "Weighted fraction of vertical intervals whose class mod 12 is 0, 3, 4, 5, 7, 8 or 9.",
                |a| scalar(a.consonant_vertical())),
            // rhythm
            def!("rhythmic_value_histogram", "Rhythmic Value Histogram", Rhythm, 12,
                "Fraction of notes per nearest (log scale) rhythmic value: 32nd, 16th, 8th triplet, dotted 16th, 8th, dotted 8th, quarter, dotted quarter, half, dotted half, whole, dotted whole or longer.",
                |a| a.rhythmic_value_hist()),
            def!("onset_position_histogram", "Onset Position Histogram", Rhythm, 16,
                "Fraction of notes per sixteenth slot within a 4/4 bar (onset rounded to the sixteenth grid, mod 16).",
                |a| a.onset_position_hist()),
            def!("note_density_per_quarter", "Note Density per Quarter Note", Rhythm, 1,
                "Note count divided by piece length in quarter notes.", |a| scalar(a.note_density())),
            def!("note_density_variability", "Note Density per Quarter Note Variability", Rhythm, 1,
                "Std of note counts in consecutive one-quarter-note windows (by onset) covering the piece.",
                |a| scalar(a.density_variability())),
            def!("onset_density_per_quarter", "Rhythmic Density", Rhythm, 1,
                "Distinct onset instants divided by piece length in quarter notes.", |a| scalar(a.onset_density())),
            def!("prevalence_of_long_rhythmic_values", "Prevalence of Long Rhythmic Values", Rhythm, 1,
                "Fraction of notes lasting at least 2 quarter notes.",
                |a| scalar(fraction(a.durations.iter(), |&&d| d >= 2.0))),
            def!("prevalence_of_very_long_rhythmic_values", "Prevalence of Very Long Rhythmic Values", Rhythm, 1,
                "Fraction of notes lasting at least 4 quarter notes.",
                |a| scalar(fraction(a.durations.iter(), |&&d| d >= 4.0))),
            def!("mean_duration", "Average Note Duration", Rhythm, 1, "Mean note duration.",
                |a| scalar(mean(&a.durations))),
            def!("duration_std", "Variability of Note Durations", Rhythm, 1, "Std of note durations.",
                |a| scalar(std(&a.durations))),
            def!("mean_inter_onset_interval", "Average Time Between Attacks", Rhythm, 1,
                "Mean gap between consecutive distinct onset instants.", |a| scalar(mean(&a.inter_onsets()))),
            def!("inter_onset_interval_std", "Variability of Time Between Attacks", Rhythm, 1,
                "Std of gaps between consecutive distinct onset instants.", |a| scalar(std(&a.inter_onsets()))),
            def!("rest_fraction", "Complete Rests Fraction", Rhythm, 1,
                "Fraction of the piece during which no note sounds.", |a| scalar(a.rest_fraction())),
            def!("piece_length_quarters", "Duration in Quarter Notes", Rhythm, 1,
                "Piece length in quarter notes.", |a| scalar(a.length_q)),
            def!("mean_tempo", "Mean Tempo", Rhythm, 1,
                "Tempo (BPM) averaged over the piece, weighted by tick span.", |a| scalar(a.mean_tempo())),
            def!("initial_tempo", "Initial Tempo", Rhythm, 1, "Tempo (BPM) at tick 0.",
                |a| scalar(a.score.tempo_at(0))),
            def!("tempo_change_count", "Number of Tempo Changes", Rhythm, 1,
                "Tempo map entries after tick 0 and before the piece end.", |a| scalar(a.tempo_changes())),
            def!("on_beat_onset_fraction", "Onsets on the Beat", Rhythm, 1,
                "Fraction of notes whose onset falls on a quarter-note beat (sixteenth grid).",
                |a| scalar(a.on_beat_fraction())),
            // dynamics
            def!("velocity_histogram", "Dynamics Histogram", Dynamics, 32,
                "Fraction of notes per velocity bin of width 4.", |a| a.velocity_hist()),
            def!("mean_velocity", "Average Velocity", Dynamics, 1, "Mean note velocity.",
                |a| scalar(mean(&a.velocities))),
            def!("velocity_std", "Variation of Dynamics", Dynamics, 1, "Std of note velocity.",
                |a| scalar(std(&a.velocities))),
            def!("velocity_range", "Range of Dynamics", Dynamics, 1, "Highest minus lowest velocity.",
                |a| scalar(max(&a.velocities) - min(&a.velocities))),
            def!("max_velocity", "Loudest Velocity", Dynamics, 1, "Highest velocity.", |a| scalar(max(&a.velocities))),
            def!("min_velocity", "Softest Velocity", Dynamics, 1, "Lowest velocity.", |a| scalar(min(&a.velocities))),
            def!("average_note_to_note_change_in_dynamics", "Average Note to Note Change in Dynamics", Dynamics, 1,
                "Mean absolute velocity difference between successive notes.", |a| scalar(a.dynamics_change())),
            // texture
            def!("total_number_of_notes", "Total Number of Notes", Texture, 1, "Note count.",
                |a| scalar(a.notes.len() as f64)),
            def!("relative_note_density_of_highest_line", "Relative Note Density of Highest Line", Texture, 1,
                "Notes in the track with the highest mean pitch divided by the mean note count of tracks with notes.",
                |a| scalar(a.highest_line_density())),
            def!("overlap_rate", "Polyphony Rate", Texture, 1,
                "Fraction of notes that overlap in time with at least one other note.", |a| scalar(a.overlap_rate())),
            def!("mean_notes_per_onset", "Average Notes per Onset", Texture, 1,
                "Note count divided by distinct onset instants.",
                |a| scalar(a.notes.len() as f64 / a.onsets.len().max(1) as f64)),
            // instrumentation
            def!("voiced_track_count", "Number of Voiced Tracks", Instrumentation, 1,
                "Number of tracks containing notes.", |a| scalar(a.tracks.len() as f64)),
            def!("largest_track_note_fraction", "Note Prevalence of Largest Track", Instrumentation, 1,
                "Fraction of notes in the track with most notes.", |a| scalar(a.largest_track_fraction())),
            def!("track_register_spread", "Register Spread Between Tracks", Instrumentation, 1,
                "Mean pitch of the highest track minus mean pitch of the lowest track.",
                |a| scalar(a.track_register_spread())),
        ];
        Self::from_entries(CATALOG_VERSION, entries)
    }

    fn from_entries(version: &str, entries: Vec<FeatureDef>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for e in &entries {
            offsets.push(total);
            total += e.dim;
        }
        Self { version: version.to_string(), entries, offsets, total_dim: total }
    }

    pub fn entries(&self) -> &[FeatureDef] {
        &self.entries
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Flattened column range of a feature.
    pub fn range_of(&self, id: &str) -> Option<std::ops::Range<usize>> {
        let i = self.entries.iter().position(|e| e.id == id)?;
        Some(self.offsets[i]..self.offsets[i] + self.entries[i].dim)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.range_of(id).map(|r| r.start)
    }

    /// Flattened column names: scalars use the feature id, histogram bins
    /// append `_<bin>`.
    pub fn column_ids(&self) -> Vec<String> {
        self.entries
            .iter()
            .flat_map(|e| {
                (0..e.dim).map(move |b| if e.dim == 1 { e.id.to_string() } else { format!("{}_{b}", e.id) })
            })
            .collect()
    }

    /// Group of every flattened column.
    pub fn column_groups(&self) -> Vec<FeatureGroup> {
        self.entries.iter().flat_map(|e| std::iter::repeat_n(e.group, e.dim)).collect()
    }

    /// Histogram blocks as column ranges.
    pub fn histogram_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.entries
            .iter()
            .zip(&self.offsets)
            .filter(|(e, _)| e.dim > 1)
            .map(|(e, &o)| o..o + e.dim)
            .collect()
    }

    /// Markdown reference of every feature.
    pub fn reference_markdown(&self) -> String {
        let mut out = format!(
            "# Feature catalog `{}`\n\n{} features, {} dimensions.\n\n| columns | id | name | group | definition |\n|---|---|---|---|---|\n",
            self.version,
            self.entries.len(),
            self.total_dim
        );
        for (e, &o) in self.entries.iter().zip(&self.offsets) {
            let cols = if e.dim == 1 { format!("{o}") } else { format!("{o}-{}", o + e.dim - 1) };
            out.push_str(&format!("| {cols} | `{}` | {} | {} | {} |\n", e.id, e.name, e.group.label(), e.definition));
        }
        out
    }
}

/// Computes the attribute vector of `score`. An empty score yields all zeros
/// with `empty_score` set.
pub fn extract_features(score: &Score, catalog: &FeatureCatalog) -> AttributeVector {
    if score.notes.is_empty() {
        return AttributeVector {
            values: vec![0.0; catalog.total_dim()],
            catalog_version: catalog.version.clone(),
            empty_score: true,
        };
    }
    let analysis = Analysis::new(score);
    let mut values = Vec::with_capacity(catalog.total_dim());
    for e in &catalog.entries {
        let v = (e.compute)(&analysis);
        debug_assert_eq!(v.len(), e.dim, "feature {} produced the wrong width", e.id);
        values.extend(v.into_iter().map(|x| if x.is_finite() { x } else { 0.0 }));
    }
    AttributeVector { values, catalog_version: catalog.version.clone(), empty_score: false }
}

const KK_MAJOR: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
const KK_MINOR: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];

/// Center values of the rhythmic value bins, in quarter notes.
const RHYTHMIC_VALUES: [f64; 12] = [0.125, 0.25, 1.0 / 3.0, 0.375, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0)
}

fn min(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn fraction<I: Iterator, F: Fn(&I::Item) -> bool>(items: I, pred: F) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for it in items {
        n += 1;
        if pred(&it) {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

fn normalized(mut h: Vec<f64>) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    h
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da <= 0.0 || db <= 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

fn key_correlation(hist: &[f64], profile: &[f64; 12]) -> f64 {
    (0..12)
        .map(|tonic| {
            let rotated: Vec<f64> = (0..12).map(|pc| profile[(pc + 12 - tonic) % 12]).collect();
            pearson(hist, &rotated)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Per-score intermediate quantities shared by the feature functions.
struct Analysis<'a> {
    score: &'a Score,
    notes: Vec<Note>,
    tpq: f64,
    length_q: f64,
    end_tick: u64,
    pitches: Vec<f64>,
    durations: Vec<f64>,
    velocities: Vec<f64>,
    /// Signed successive pitch differences.
    intervals: Vec<i32>,
    /// Distinct onset ticks, ascending.
    onsets: Vec<u64>,
    /// Sounding note count at each onset instant.
    polyphony: Vec<usize>,
    /// (interval, weight) for each sounding pair at each onset instant.
    vertical: Vec<(usize, f64)>,
    /// (track, note count, mean pitch) for tracks with notes, by track index.
    tracks: Vec<(u16, usize, f64)>,
}

impl<'a> Analysis<'a> {
    fn new(score: &'a Score) -> Self {
        let mut notes = score.notes.clone();
        notes.sort_by_key(|n| (n.onset, n.pitch, n.track, n.duration, n.velocity));
        let tpq = f64::from(score.ticks_per_quarter.max(1));
        let end_tick = score.end_tick();
        let pitches: Vec<f64> = notes.iter().map(|n| f64::from(n.pitch)).collect();
        let durations = notes.iter().map(|n| n.duration as f64 / tpq).collect();
        let velocities = notes.iter().map(|n| f64::from(n.velocity)).collect();
        let intervals = notes.windows(2).map(|w| i32::from(w[1].pitch) - i32::from(w[0].pitch)).collect();

        let mut onsets: Vec<u64> = notes.iter().map(|n| n.onset).collect();
        onsets.dedup();

        let mut polyphony = Vec::with_capacity(onsets.len());
        let mut vertical = Vec::new();
        let mut start = 0usize; // notes before this index all end at or before the current instant
        for (i, &t) in onsets.iter().enumerate() {
            let next = onsets.get(i + 1).copied().unwrap_or(end_tick);
            while start < notes.len() && notes[start].end() <= t && notes[start].onset <= t {
                start += 1;
            }
            let sounding: Vec<&Note> = notes[start..]
                .iter()
                .take_while(|n| n.onset <= t)
                .filter(|n| n.end() > t)
                .collect();
            polyphony.push(sounding.len());
            for (a, na) in sounding.iter().enumerate() {
                for nb in &sounding[a + 1..] {
                    let until = next.min(na.end()).min(nb.end());
                    let weight = until.saturating_sub(t) as f64 / tpq;
                    if weight > 0.0 {
                        vertical.push((usize::from(na.pitch.abs_diff(nb.pitch)), weight));
                    }
                }
            }
        }

        let mut per_track: std::collections::BTreeMap<u16, (usize, f64)> = Default::default();
        for n in &notes {
            let e = per_track.entry(n.track).or_default();
            e.0 += 1;
            e.1 += f64::from(n.pitch);
        }
        let tracks = per_track.into_iter().map(|(t, (c, s))| (t, c, s / c as f64)).collect();

        Analysis {
            score,
            notes,
            tpq,
            length_q: end_tick as f64 / tpq,
            end_tick,
            pitches,
            durations,
            velocities,
            intervals,
            onsets,
            polyphony,
            vertical,
            tracks,
        }
    }

    fn min_pitch(&self) -> f64 {
        min(&self.pitches)
    }

    fn max_pitch(&self) -> f64 {
        max(&self.pitches)
    }

    fn pitch_class_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 12];
        for n in &self.notes {
            h[usize::from(n.pitch % 12)] += 1.0;
        }
        normalized(h)
    }

    fn pitch_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 128];
        for n in &self.notes {
            h[usize::from(n.pitch)] += 1.0;
        }
        normalized(h)
    }

    fn fifths_hist(&self) -> Vec<f64> {
        let pc = self.pitch_class_hist();
        let mut h = vec![0.0; 12];
        for (c, v) in pc.into_iter().enumerate() {
            h[(7 * c) % 12] += v;
        }
        h
    }

    fn abs_intervals(&self) -> Vec<f64> {
        self.intervals.iter().map(|d| f64::from(d.abs())).collect()
    }

    fn melodic_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 128];
        for d in &self.intervals {
            h[d.unsigned_abs() as usize] += 1.0;
        }
        normalized(h)
    }

    fn interval_fraction(&self, pred: impl Fn(u32) -> bool) -> f64 {
        fraction(self.intervals.iter(), |d| pred(d.unsigned_abs()))
    }

    fn rising_fraction(&self) -> f64 {
        fraction(self.intervals.iter().filter(|&&d| d != 0), |&&d| d > 0)
    }

    fn vertical_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 128];
        for &(iv, w) in &self.vertical {
            h[iv] += w;
        }
        normalized(h)
    }

    fn mean_vertical(&self) -> f64 {
        let total: f64 = self.vertical.iter().map(|v| v.1).sum();
        if total > 0.0 {
            self.vertical.iter().map(|&(iv, w)| iv as f64 * w).sum::<f64>() / total
        } else {
            0.0
        }
    }

    fn consonant_vertical(&self) -> f64 {
        let total: f64 = self.vertical.iter().map(|v| v.1).sum();
        if total > 0.0 {
            let cons: f64 = self
                .vertical
                .iter()
                .filter(|(iv, _)| matches!(iv % 12, 0 | 3 | 4 | 5 | 7 | 8 | 9))
                .map(|v| v.1)
                .sum();
            cons / total
        } else {
            0.0
        }
    }

    fn polyphony_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 16];
        for &p in &self.polyphony {
            if p > 0 {
                h[(p - 1).min(15)] += 1.0;
            }
        }
        normalized(h)
    }

    fn rhythmic_value_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 12];
        for &d in &self.durations {
            let ld = d.max(1e-9).ln();
            let bin = RHYTHMIC_VALUES
                .iter()
                .enumerate()
                .min_by(|a, b| (ld - a.1.ln()).abs().total_cmp(&(ld - b.1.ln()).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            h[bin] += 1.0;
        }
        normalized(h)
    }

    fn slot(&self, tick: u64) -> u64 {
        (tick as f64 * 4.0 / self.tpq).round() as u64
    }

    fn onset_position_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 16];
        for n in &self.notes {
            h[(self.slot(n.onset) % 16) as usize] += 1.0;
        }
        normalized(h)
    }

    fn on_beat_fraction(&self) -> f64 {
        fraction(self.notes.iter(), |n| self.slot(n.onset).is_multiple_of(4))
    }

    fn note_density(&self) -> f64 {
        if self.length_q > 0.0 {
            self.notes.len() as f64 / self.length_q
        } else {
            0.0
        }
    }

    fn onset_density(&self) -> f64 {
        if self.length_q > 0.0 {
            self.onsets.len() as f64 / self.length_q
        } else {
            0.0
        }
    }

    fn density_variability(&self) -> f64 {
        let windows = (self.length_q.ceil() as usize).max(1);
        let mut counts = vec![0.0; windows];
        for n in &self.notes {
            let w = ((n.onset as f64 / self.tpq).floor() as usize).min(windows - 1);
            counts[w] += 1.0;
        }
        std(&counts)
    }

    fn inter_onsets(&self) -> Vec<f64> {
        self.onsets.windows(2).map(|w| (w[1] - w[0]) as f64 / self.tpq).collect()
    }

    fn rest_fraction(&self) -> f64 {
        if self.end_tick == 0 {
            return 0.0;
        }
        // notes are onset-sorted: sweep the covered span
        let mut covered = 0u64;
        let mut cur_start = 0u64;
        let mut cur_end = 0u64;
        let mut open = false;
        for n in &self.notes {
            if open && n.onset <= cur_end {
                cur_end = cur_end.max(n.end());
            } else {
                if open {
                    covered += cur_end - cur_start;
                }
                cur_start = n.onset;
                cur_end = n.end();
                open = true;
            }
        }
        if open {
            covered += cur_end - cur_start;
        }
        1.0 - covered as f64 / self.end_tick as f64
    }

    fn mean_tempo(&self) -> f64 {
        let map = &self.score.tempo_map;
        if self.end_tick == 0 || map.is_empty() {
            return self.score.tempo_at(0);
        }
        let mut acc = 0.0;
        for (i, t) in map.iter().enumerate() {
            if t.tick >= self.end_tick {
                break;
            }
            let until = map.get(i + 1).map_or(self.end_tick, |n| n.tick.min(self.end_tick));
            acc += t.bpm * (until - t.tick) as f64;
        }
        acc / self.end_tick as f64
    }

    fn tempo_changes(&self) -> f64 {
        self.score
            .tempo_map
            .iter()
            .filter(|t| t.tick > 0 && t.tick < self.end_tick)
            .count() as f64
    }

    fn velocity_hist(&self) -> Vec<f64> {
        let mut h = vec![0.0; 32];
        for n in &self.notes {
            h[usize::from(n.velocity / 4).min(31)] += 1.0;
        }
        normalized(h)
    }

    fn dynamics_change(&self) -> f64 {
        let diffs: Vec<f64> = self.velocities.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        mean(&diffs)
    }

    fn highest_line_density(&self) -> f64 {
        if self.tracks.len() <= 1 {
            return 1.0;
        }
        let highest = self
            .tracks
            .iter()
            .max_by(|a, b| a.2.total_cmp(&b.2).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        let mean_count = self.notes.len() as f64 / self.tracks.len() as f64;
        highest.1 as f64 / mean_count
    }

    fn overlap_rate(&self) -> f64 {
        let n = self.notes.len();
        let mut overlaps = vec![false; n];
        for i in 0..n {
            for j in i + 1..n {
                if self.notes[j].onset >= self.notes[i].end() {
                    break;
                }
                overlaps[i] = true;
                overlaps[j] = true;
            }
        }
        fraction(overlaps.iter(), |&&o| o)
    }

    fn largest_track_fraction(&self) -> f64 {
        let largest = self.tracks.iter().map(|t| t.1).max().unwrap_or(0);
        largest as f64 / self.notes.len().max(1) as f64
    }

    fn track_register_spread(&self) -> f64 {
        let hi = self.tracks.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
        let lo = self.tracks.iter().map(|t| t.2).fold(f64::INFINITY, f64::min);
        if self.tracks.len() > 1 {
            hi - lo
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::TempoChange;

    fn note(onset: u64, duration: u64, pitch: u8, velocity: u8) -> Note {
        Note { onset, duration, pitch, velocity, track: 0 }
    }

    fn arpeggio() -> Score {
        Score::new(
            vec![note(0, 480, 60, 60), note(480, 480, 64, 70), note(960, 480, 67, 80), note(1440, 480, 72, 90)],
            480,
            vec![],
            vec![],
        )
    }

    fn get(cat: &FeatureCatalog, v: &AttributeVector, id: &str) -> f64 {
        v.values[cat.index_of(id).unwrap()]
    }

    #[test]
    fn catalog_shape() {
        let cat = FeatureCatalog::standard();
        assert!(cat.total_dim() >= 512, "dim {}", cat.total_dim());
        let ids: std::collections::HashSet<_> = cat.entries().iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), cat.entries().len());
        let groups: std::collections::BTreeSet<_> = cat.entries().iter().map(|e| e.group).collect();
        assert_eq!(groups.len(), 7);
        assert_eq!(cat.column_ids().len(), cat.total_dim());
        assert_eq!(cat.column_ids()[0], "pitch_class_histogram_0");
        let scalars = cat.entries().iter().filter(|e| e.dim == 1).count();
        assert!(scalars >= 31);
    }

    #[test]
    fn arpeggio_oracle() {
        let cat = FeatureCatalog::standard();
        let v = extract_features(&arpeggio(), &cat);
        assert_eq!(get(&cat, &v, "total_number_of_notes"), 4.0);
        assert_eq!(get(&cat, &v, "note_density_per_quarter"), 1.0);
        assert_eq!(get(&cat, &v, "average_note_to_note_change_in_dynamics"), 10.0);
        assert_eq!(get(&cat, &v, "pitch_class_histogram"), 0.5);
        assert_eq!(get(&cat, &v, "note_density_variability"), 0.0);
        assert_eq!(get(&cat, &v, "relative_note_density_of_highest_line"), 1.0);
    }

    #[test]
    fn empty_score_is_flagged() {
        let cat = FeatureCatalog::standard();
        let v = extract_features(&Score::new(vec![], 480, vec![], vec![]), &cat);
        assert!(v.empty_score);
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn velocity_doubling_and_octave_transposition() {
        let cat = FeatureCatalog::standard();
        let base = arpeggio();
        let mut loud = base.clone();
        loud.notes.iter_mut().for_each(|n| n.velocity = (n.velocity / 2) * 2);
        let mut half = loud.clone();
        half.notes.iter_mut().for_each(|n| n.velocity /= 2);
        let a = extract_features(&half, &cat);
        let b = extract_features(&loud, &cat);
        let id = "average_note_to_note_change_in_dynamics";
        assert_eq!(get(&cat, &b, id), 2.0 * get(&cat, &a, id));

        let mut up = base.clone();
        up.notes.iter_mut().for_each(|n| n.pitch += 12);
        let r = cat.range_of("pitch_class_histogram").unwrap();
        let v0 = extract_features(&base, &cat);
        let v1 = extract_features(&up, &cat);
        assert_eq!(v0.values[r.clone()], v1.values[r]);
    }

    #[test]
    fn tempo_is_time_weighted() {
        let cat = FeatureCatalog::standard();
        let s = Score::new(
            vec![note(0, 1920, 60, 64)],
            480,
            vec![TempoChange { tick: 0, bpm: 120.0 }, TempoChange { tick: 960, bpm: 60.0 }],
            vec![],
        );
        let v = extract_features(&s, &cat);
        assert!((get(&cat, &v, "mean_tempo") - 90.0).abs() < 1e-12);
        assert_eq!(get(&cat, &v, "tempo_change_count"), 1.0);
        assert_eq!(get(&cat, &v, "initial_tempo"), 120.0);
    }

    #[test]
    fn reference_doc_lists_every_entry() {
        let cat = FeatureCatalog::standard();
        let md = cat.reference_markdown();
        for e in cat.entries() {
            assert!(md.contains(e.id));
        }
    }
}
