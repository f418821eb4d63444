//! Labeled file manifests, stratified splitting and a deterministic
//! synthetic corpus with one musical archetype per quadrant.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emotion::EmotionQuadrant;
use crate::midi::{parse_midi, write_midi, MidiError};
use crate::score::{midi_to_score, score_to_midi, Note, Score, TempoChange, TimeSignature};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("invalid synth spec: {0}")]
    BadSpec(String),
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: Option<EmotionQuadrant>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Every `.mid`/`.midi` file under `dir` (sorted, unlabeled).
    pub fn scan(dir: &Path) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d)? {
                let p = e?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("mid") || x.eq_ignore_ascii_case("midi")) {
                    let rel = p.strip_prefix(dir).unwrap_or(&p).to_path_buf();
                    let id = rel.with_extension("").to_string_lossy().replace('\\', "/");
                    entries.push(ManifestEntry { id, path: rel, label: None });
                }
            }
        }
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self { entries })
    }

    pub fn labels(&self) -> Option<Vec<EmotionQuadrant>> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Reads and parses every entry, resolving relative paths against `base`.
    pub fn load_scores(&self, base: &Path) -> Result<Vec<(String, Score)>, DatasetError> {
        self.entries
            .iter()
            .map(|e| {
                let path = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
                let bytes = fs::read(&path)?;
                let file = parse_midi(&bytes).map_err(|source| DatasetError::Midi { path, source })?;
                Ok((e.id.clone(), midi_to_score(&file)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Manifest,
    pub valid: Manifest,
    pub test: Manifest,
}

/// Per label group (entries without labels form one group): sort by id,
/// shuffle with `seed`, then cut contiguously at round(r0 n) and
/// round((r0 + r1) n).
pub fn split_dataset(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Split, DatasetError> {
    if manifest.entries.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    let mut groups: BTreeMap<Option<EmotionQuadrant>, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        groups.entry(e.label).or_default().push(e);
    }
    let mut split = Split { train: Manifest::default(), valid: Manifest::default(), test: Manifest::default() };
    for (label, mut items) in groups {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.map_or(4, |q| q.index() as u64));
        items.shuffle(&mut rng);
        let n = items.len() as f64;
        let a = (ratios[0] * n).round() as usize;
        let b = (((ratios[0] + ratios[1]) * n).round() as usize).max(a);
        for (i, e) in items.into_iter().enumerate() {
            let dst = if i < a {
                &mut split.train
            } else if i < b {
                &mut split.valid
            } else {
                &mut split.test
            };
            dst.entries.push(e.clone());
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Major,
    Minor,
}

impl Mode {
    fn degrees(self) -> [u8; 7] {
        match self {
            Mode::Major => [0, 2, 4, 5, 7, 9, 11],
            Mode::Minor => [0, 2, 3, 5, 7, 8, 10],
        }
    }

    fn flipped(self) -> Self {
        match self {
            Mode::Major => Mode::Minor,
            Mode::Minor => Mode::Major,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub tempo_bpm: (f64, f64),
    /// Notes per quarter, bass included.
    pub density: (f64, f64),
    /// Range of the melody's central MIDI pitch.
    pub register: (f64, f64),
    pub velocity: (f64, f64),
    pub mode: Mode,
    pub bars: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Indexed by quadrant.
    pub archetypes: [Archetype; 4],
    /// 0 keeps each archetype's own ranges, 1 draws from the union of all.
    pub noise: f64,
    /// Fraction of each quadrant's pieces rendered from a different
    /// archetype while keeping the quadrant's label.
    pub boundary_label_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let a = |tempo_bpm, density, register, velocity, mode| Archetype { tempo_bpm, density, register, velocity, mode, bars: 4 };
        Self {
            archetypes: [
                a((150.0, 180.0), (2.5, 3.0), (74.0, 80.0), (95.0, 115.0), Mode::Major),
                a((115.0, 140.0), (1.75, 2.25), (60.0, 66.0), (85.0, 105.0), Mode::Minor),
                a((55.0, 75.0), (0.5, 0.75), (58.0, 64.0), (35.0, 55.0), Mode::Minor),
                a((80.0, 100.0), (1.0, 1.25), (70.0, 76.0), (45.0, 65.0), Mode::Major),
            ],
            noise: 0.0,
            boundary_label_noise: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn with_noise(noise: f64) -> Self {
        Self { noise, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::BadSpec(m));
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.boundary_label_noise) {
            return bad("noise levels must lie in [0, 1]".into());
        }
        for (q, a) in self.archetypes.iter().enumerate() {
            let ranges = [a.tempo_bpm, a.density, a.register, a.velocity];
            if ranges.iter().any(|r| !(r.0 <= r.1) || r.0 <= 0.0) || a.bars == 0 {
                return bad(format!("archetype {q} has an empty or non-positive range"));
            }
            if a.register.1 > 110.0 || a.register.0 < 24.0 || a.velocity.1 > 127.0 {
                return bad(format!("archetype {q} exceeds the MIDI range"));
            }
        }
        Ok(())
    }

    /// The range with noise applied: each bound moves toward the union's.
    fn range(&self, q: usize, pick: fn(&Archetype) -> (f64, f64)) -> (f64, f64) {
        let own = pick(&self.archetypes[q]);
        let lo = self.archetypes.iter().map(|a| pick(a).0).fold(f64::INFINITY, f64::min);
        let hi = self.archetypes.iter().map(|a| pick(a).1).fold(f64::NEG_INFINITY, f64::max);
        (own.0 + self.noise * (lo - own.0), own.1 + self.noise * (hi - own.1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPiece {
    pub id: String,
    pub label: EmotionQuadrant,
    /// Archetype the piece was rendered from; differs from `label` for
    /// label-noise pieces.
    pub archetype: EmotionQuadrant,
    pub score: Score,
}

const TPQ: u32 = 480;

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn render(spec: &SynthSpec, q: usize, rng: &mut ChaCha8Rng) -> Score {
    let arch = &spec.archetypes[q];
    let bpm = uniform(rng, spec.range(q, |a| a.tempo_bpm));
    let density = uniform(rng, spec.range(q, |a| a.density));
    let center = uniform(rng, spec.range(q, |a| a.register));
    let vel_range = spec.range(q, |a| a.velocity);
    let mode = if rng.random_bool(spec.noise / 2.0) { arch.mode.flipped() } else { arch.mode };
    let tonic: u8 = rng.random_range(0..12);
    let degrees = mode.degrees();
    let scale: Vec<u8> = (0..128u8).filter(|p| degrees.contains(&((p + 12 - tonic) % 12))).collect();
    let slot = u64::from(TPQ / 4);
    let bar_ticks = 16 * slot;

    // melody onsets: density counts the bar's bass note too
    let melody_per_bar = ((density * 4.0).round() as usize).saturating_sub(1).clamp(1, 16);
    let mut idx = scale.iter().position(|&p| f64::from(p) >= center).unwrap_or(scale.len() / 2);
    let lo = scale.iter().position(|&p| f64::from(p) >= center - 7.0).unwrap_or(0);
    let hi = scale.iter().rposition(|&p| f64::from(p) <= center + 7.0).unwrap_or(scale.len() - 1);
    let mut notes = Vec::new();
    for bar in 0..u64::from(arch.bars) {
        let start = bar * bar_ticks;
        let mut slots = rand::seq::index::sample(rng, 16, melody_per_bar).into_vec();
        slots.sort_unstable();
        for (k, &s) in slots.iter().enumerate() {
            let next = slots.get(k + 1).copied().unwrap_or(16);
            let len = (next - s).min(4) as u64;
            let step: i64 = rng.random_range(-2..=2);
            idx = (idx as i64 + step).clamp(lo as i64, hi as i64) as usize;
            let velocity = uniform(rng, vel_range).round().clamp(1.0, 127.0) as u8;
            notes.push(Note { onset: start + s as u64 * slot, duration: len * slot, pitch: scale[idx], velocity, track: 0 });
        }
        let root = [0u8, 5, 7, 0][bar as usize % 4];
        let bass_center = (center - 24.0).max(24.0);
        let bass = (0..128u8)
            .filter(|p| (p + 12 - tonic) % 12 == root)
            .min_by(|a, b| (f64::from(*a) - bass_center).abs().total_cmp(&(f64::from(*b) - bass_center).abs()))
            .unwrap_or(36);
        let velocity = (uniform(rng, vel_range) - 10.0).round().clamp(1.0, 127.0) as u8;
        notes.push(Note { onset: start, duration: bar_ticks, pitch: bass, velocity, track: 0 });
    }
    Score::new(
        notes,
        TPQ,
        vec![TempoChange { tick: 0, bpm }],
        vec![TimeSignature { tick: 0, numerator: 4, denominator: 4 }],
    )
}

/// Renders `n_per_quadrant` pieces per quadrant. Piece `i` of quadrant `q`
/// uses its own random stream, so the corpus is a pure function of
/// (spec, n, seed).
pub fn synth_scores(spec: &SynthSpec, n_per_quadrant: usize, seed: u64) -> Result<Vec<SynthPiece>, DatasetError> {
    spec.validate()?;
    if n_per_quadrant == 0 {
        return Err(DatasetError::BadSpec("n_per_quadrant must be at least 1".into()));
    }
    let n_noisy = (spec.boundary_label_noise * n_per_quadrant as f64).round() as usize;
    let mut out = Vec::with_capacity(4 * n_per_quadrant);
    for q in EmotionQuadrant::ALL {
        for i in 0..n_per_quadrant {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((q.index() * n_per_quadrant + i) as u64);
            // the last n_noisy pieces of each quadrant borrow another archetype
            let archetype = if i >= n_per_quadrant - n_noisy {
                let shift = rng.random_range(1..4);
                EmotionQuadrant::from_index((q.index() + shift) % 4).expect("quadrant index")
            } else {
                q
            };
            let score = render(spec, archetype.index(), &mut rng);
            out.push(SynthPiece { id: format!("{q}_{i:04}"), label: q, archetype, score });
        }
    }
    Ok(out)
}

/// Writes the pieces as `<id>.mid` under `dir` with `manifest.json`.
pub fn synth_corpus(dir: &Path, spec: &SynthSpec, n_per_quadrant: usize, seed: u64) -> Result<Manifest, DatasetError> {
    let pieces = synth_scores(spec, n_per_quadrant, seed)?;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for p in &pieces {
        let path = PathBuf::from(format!("{}.mid", p.id));
        let bytes = write_midi(&score_to_midi(&p.score))
            .map_err(|source| DatasetError::Midi { path: dir.join(&path), source })?;
        fs::write(dir.join(&path), bytes)?;
        manifest.entries.push(ManifestEntry { id: p.id.clone(), path, label: Some(p.label) });
    }
    manifest.save(&dir.join("manifest.json"))?;
    fs::write(dir.join("synth_spec.json"), serde_json::to_vec_pretty(&(spec, n_per_quadrant, seed))?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionQuadrant::*;

    fn labeled(n: usize) -> Manifest {
        let entries = EmotionQuadrant::ALL
            .iter()
            .flat_map(|&q| (0..n).map(move |i| ManifestEntry { id: format!("{q}-{i}"), path: format!("{q}-{i}.mid").into(), label: Some(q) }))
            .collect();
        Manifest { entries }
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let m = labeled(10);
        let s = split_dataset(&m, [0.8, 0.1, 0.1], 3).unwrap();
        for q in EmotionQuadrant::ALL {
            let count = |m: &Manifest| m.entries.iter().filter(|e| e.label == Some(q)).count();
            assert_eq!((count(&s.train), count(&s.valid), count(&s.test)), (8, 1, 1));
        }
        assert_eq!(s, split_dataset(&m, [0.8, 0.1, 0.1], 3).unwrap());
        let all = split_dataset(&m, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all.train.entries.len(), 40);
        assert!(all.valid.entries.is_empty() && all.test.entries.is_empty());
        assert!(matches!(split_dataset(&Manifest::default(), [1.0, 0.0, 0.0], 0), Err(DatasetError::EmptyManifest)));
        assert!(split_dataset(&m, [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_labeled() {
        let a = synth_scores(&SynthSpec::default(), 3, 11).unwrap();
        let b = synth_scores(&SynthSpec::default(), 3, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|p| p.label == p.archetype && !p.score.is_empty()));
        let noisy = synth_scores(&SynthSpec { boundary_label_noise: 0.5, ..SynthSpec::default() }, 4, 1).unwrap();
        for q in EmotionQuadrant::ALL {
            let flipped = noisy.iter().filter(|p| p.label == q && p.archetype != q).count();
            assert_eq!(flipped, 2);
        }
    }

    #[test]
    fn full_noise_uses_union_ranges() {
        let spec = SynthSpec::with_noise(1.0);
        let t1 = spec.range(Q1.index(), |a| a.tempo_bpm);
        let t3 = spec.range(Q3.index(), |a| a.tempo_bpm);
        assert_eq!(t1, t3);
        assert_eq!(t1, (55.0, 180.0));
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_corpus(dir.path(), &SynthSpec::default(), 1, 5).unwrap();
        assert_eq!(m.entries.len(), 4);
        let again = tempfile::tempdir().unwrap();
        synth_corpus(again.path(), &SynthSpec::default(), 1, 5).unwrap();
        for e in &m.entries {
            assert_eq!(fs::read(dir.path().join(&e.path)).unwrap(), fs::read(again.path().join(&e.path)).unwrap());
        }
        let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
        let scores = loaded.load_scores(dir.path()).unwrap();
        let synth = synth_scores(&SynthSpec::default(), 1, 5).unwrap();
        for ((id, s), p) in scores.iter().zip(&synth) {
            assert_eq!(id, &p.id);
            assert_eq!(s.notes, p.score.notes);
        }
        assert_eq!(Manifest::scan(dir.path()).unwrap().entries.len(), 4);
    }
}
