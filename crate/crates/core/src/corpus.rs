//! Speaker manifests, PHQ-8 labels, stratified folds and fragment sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_wav, resample, AudioError};
use crate::features::{
    fragment, fragment_at, fragment_count, read_fragment_cache, write_fragment_cache, FeatureError, FrameSpec, MelAnalyzer, MelFragment,
    MelSpectrogram, FRAGMENT_FRAMES, FRAGMENT_OVERLAP,
};
use neuralkit::seeded_rng;

/// PHQ-8 cut-off: scores at or above this are labelled depressed.
pub const PHQ8_CUTOFF: u8 = 10;
pub const PHQ8_MAX: u8 = 24;
/// Recordings shorter than this contribute no fragments.
pub const MIN_RECORDING_SECONDS: f64 = 3.0;
/// Fragment counts explored by the grid search.
pub const SAMPLE_SIZES: [usize; 5] = [5, 10, 15, 30, 60];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest {path} is missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("speaker {speaker}: PHQ-8 score {value} outside 0..=24")]
    Phq8OutOfRange { speaker: String, value: String },
    #[error("audio path listed twice: {0}")]
    DuplicatePath(String),
    #[error("speaker {speaker} listed with conflicting PHQ-8 scores {first} and {second}")]
    ConflictingScores { speaker: String, first: u8, second: u8 },
    #[error("need at least {needed} speakers per class for {k} folds, have {depressed} depressed / {healthy} healthy")]
    TooFewSpeakers { k: usize, needed: usize, depressed: usize, healthy: usize },
    #[error("speaker {0} has no fragments (all recordings shorter than 3 s)")]
    NoFragments(String),
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSynthSpec(String),
    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),
    #[error("manifest {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub fn phq8_label(phq8: u8) -> u8 {
    u8::from(phq8 >= PHQ8_CUTOFF)
}

/// One participant and their audio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub audio_paths: Vec<PathBuf>,
    pub phq8: u8,
    /// 1 = depressed.
    pub label: u8,
}

impl SpeakerRecord {
    pub fn new(speaker_id: impl Into<String>, audio_paths: Vec<PathBuf>, phq8: u8) -> Self {
        assert!(phq8 <= PHQ8_MAX, "PHQ-8 score out of range");
        Self { speaker_id: speaker_id.into(), audio_paths, phq8, label: phq8_label(phq8) }
    }
}

/// Reads `speaker_id,audio_path,phq8`; rows are grouped by speaker in first
/// appearance order. Relative audio paths resolve against the manifest's
/// directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SpeakerRecord>, CorpusError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| CorpusError::Io { path: name.clone(), source: e })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &name, &base)
}

pub fn parse_manifest(text: &str, name: &str, base: &Path) -> Result<Vec<SpeakerRecord>, CorpusError> {
    let csv_err = |e| CorpusError::Csv { path: name.to_string(), source: e };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |c: &str| {
        headers.iter().position(|h| h == c).ok_or_else(|| CorpusError::MissingColumn {
            path: name.to_string(),
            column: c.to_string(),
        })
    };
    let (i_spk, i_path, i_phq) = (col("speaker_id")?, col("audio_path")?, col("phq8")?);

    let mut order: Vec<SpeakerRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen_paths = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let speaker = row.get(i_spk).unwrap_or("").to_string();
        let raw_score = row.get(i_phq).unwrap_or("");
        let phq8 = raw_score
            .parse::<u8>()
            .ok()
            .filter(|&v| v <= PHQ8_MAX)
            .ok_or_else(|| CorpusError::Phq8OutOfRange { speaker: speaker.clone(), value: raw_score.to_string() })?;
        let rel = PathBuf::from(row.get(i_path).unwrap_or(""));
        let audio = if rel.is_absolute() { rel } else { base.join(rel) };
        if !seen_paths.insert(audio.clone()) {
            return Err(CorpusError::DuplicatePath(audio.display().to_string()));
        }
        match index.get(&speaker) {
            Some(&i) => {
                let rec = &mut order[i];
                if rec.phq8 != phq8 {
                    return Err(CorpusError::ConflictingScores { speaker, first: rec.phq8, second: phq8 });
                }
                rec.audio_paths.push(audio);
            }
            None => {
                index.insert(speaker.clone(), order.len());
                order.push(SpeakerRecord::new(speaker, vec![audio], phq8));
            }
        }
    }
    Ok(order)
}

/// Speaker-level assignment to `k` class-stratified folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, speaker: &str) -> Option<usize> {
        self.assignment.get(speaker).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(s, _)| s.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Shuffles each class with `seed` and deals speakers round-robin, carrying
/// the dealing position from the depressed class into the healthy class so
/// fold totals stay within one of each other.
pub fn make_folds(records: &[SpeakerRecord], k: usize, seed: u64) -> Result<FoldPlan, CorpusError> {
    assert!(k >= 2, "need at least two folds");
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for r in records {
        by_class[r.label as usize].push(&r.speaker_id);
    }
    let (healthy, depressed) = (by_class[0].len(), by_class[1].len());
    if healthy < k || depressed < k {
        return Err(CorpusError::TooFewSpeakers { k, needed: k, depressed, healthy });
    }
    let mut rng = seeded_rng(seed);
    let mut assignment = BTreeMap::new();
    let mut cursor = 0;
    for class in [1usize, 0] {
        let ids = &mut by_class[class];
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            assignment.insert(id.to_string(), cursor % k);
            cursor += 1;
        }
    }
    Ok(FoldPlan { k, seed, assignment })
}

/// Location of one fragment inside a speaker's recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FragmentRef {
    pub recording: usize,
    pub start_frame: usize,
}

/// dB spectrogram of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedRecording {
    pub source_id: String,
    pub path: PathBuf,
    pub spectrogram: MelSpectrogram,
}

#[derive(Debug, Clone)]
pub struct IndexedSpeaker {
    pub record: SpeakerRecord,
    pub recordings: Vec<IndexedRecording>,
    pub fragments: Vec<FragmentRef>,
}

impl IndexedSpeaker {
    fn build(record: SpeakerRecord, recordings: Vec<IndexedRecording>) -> Self {
        let fragments = recordings
            .iter()
            .enumerate()
            .flat_map(|(r, rec)| {
                let n = fragment_count(rec.spectrogram.frames, FRAGMENT_FRAMES, FRAGMENT_OVERLAP);
                (0..n).map(move |s| FragmentRef { recording: r, start_frame: s * (FRAGMENT_FRAMES - FRAGMENT_OVERLAP) })
            })
            .collect();
        Self { record, recordings, fragments }
    }

    pub fn speaker_id(&self) -> &str {
        &self.record.speaker_id
    }

    pub fn label(&self) -> u8 {
        self.record.label
    }

    pub fn fragment(&self, r: FragmentRef) -> MelFragment {
        fragment_at(&self.recordings[r.recording].spectrogram, r.start_frame, FRAGMENT_FRAMES)
    }

    /// Writes the fragment's band-major values into `out` (length bands * 16).
    pub fn fill_fragment(&self, r: FragmentRef, out: &mut [f32]) {
        let spec = &self.recordings[r.recording].spectrogram;
        let n = spec.n_mels;
        debug_assert_eq!(out.len(), n * FRAGMENT_FRAMES);
        for t in 0..FRAGMENT_FRAMES {
            let frame = spec.frame(r.start_frame + t);
            for b in 0..n {
                out[b * FRAGMENT_FRAMES + t] = crate::features::normalize_db(frame[b]);
            }
        }
    }
}

/// N fragments drawn from one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBatch {
    pub speaker_id: String,
    pub label: u8,
    pub picks: Vec<FragmentRef>,
}

/// Uniform draws over the speaker's fragment index: without replacement when
/// the index holds at least `n` fragments, with replacement otherwise.
pub fn sample_refs<R: Rng + ?Sized>(
    speaker: &IndexedSpeaker,
    n: usize,
    rng: &mut R,
) -> Result<Vec<FragmentRef>, CorpusError> {
    let pool = speaker.fragments.len();
    if pool == 0 {
        return Err(CorpusError::NoFragments(speaker.speaker_id().to_string()));
    }
    Ok(if pool >= n {
        sample(rng, pool, n).into_iter().map(|i| speaker.fragments[i]).collect()
    } else {
        (0..n).map(|_| speaker.fragments[rng.gen_range(0..pool)]).collect()
    })
}

pub fn sample_fragments<R: Rng + ?Sized>(
    speaker: &IndexedSpeaker,
    n: usize,
    rng: &mut R,
) -> Result<FragmentBatch, CorpusError> {
    Ok(FragmentBatch {
        speaker_id: speaker.speaker_id().to_string(),
        label: speaker.label(),
        picks: sample_refs(speaker, n, rng)?,
    })
}

/// Speakers with their spectrograms computed and fragments indexed.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub speakers: Vec<IndexedSpeaker>,
}

impl Corpus {
    /// Decodes, resamples and analyses every recording; recordings shorter
    /// than three seconds are dropped.
    pub fn index(records: &[SpeakerRecord], spec: &FrameSpec) -> Result<Self, CorpusError> {
        let analyzer = MelAnalyzer::new(spec)?;
        let mut speakers = Vec::with_capacity(records.len());
        for rec in records {
            let mut recordings = Vec::new();
            for path in &rec.audio_paths {
                let audio = load_wav(path)?;
                if audio.duration_seconds() < MIN_RECORDING_SECONDS {
                    continue;
                }
                let audio = resample(&audio, spec.sample_rate);
                let spectrogram = analyzer.melspectrogram_db(&audio)?;
                recordings.push(IndexedRecording { source_id: audio.source_id().to_string(), path: path.clone(), spectrogram });
            }
            speakers.push(IndexedSpeaker::build(rec.clone(), recordings));
        }
        Ok(Self { speakers })
    }

    /// Rebuilds spectrograms from per-recording fragment caches written by
    /// [`cache_path`]; recordings without a cache file are skipped.
    pub fn from_cache(records: &[SpeakerRecord], cache_dir: &Path, frame_rate: f64) -> Result<Self, CorpusError> {
        let mut speakers = Vec::with_capacity(records.len());
        for rec in records {
            let mut recordings = Vec::new();
            for path in &rec.audio_paths {
                let file = cache_path(cache_dir, &rec.speaker_id, path);
                if !file.exists() {
                    continue;
                }
                let source_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let frags = read_fragment_cache(&file, &source_id)?;
                if let Some(spectrogram) = spectrogram_from_fragments(&frags, &source_id, frame_rate) {
                    recordings.push(IndexedRecording { source_id, path: path.clone(), spectrogram });
                }
            }
            speakers.push(IndexedSpeaker::build(rec.clone(), recordings));
        }
        Ok(Self { speakers })
    }

    /// Writes every step-1 fragment of every recording to [`cache_path`];
    /// returns the number of files written.
    pub fn write_cache(&self, cache_dir: &Path) -> Result<usize, CorpusError> {
        let mut written = 0;
        for s in &self.speakers {
            for r in &s.recordings {
                let file = cache_path(cache_dir, s.speaker_id(), &r.path);
                if let Some(dir) = file.parent() {
                    fs::create_dir_all(dir).map_err(|e| CorpusError::Io { path: dir.display().to_string(), source: e })?;
                }
                write_fragment_cache(&file, &fragment(&r.spectrogram, FRAGMENT_FRAMES, FRAGMENT_OVERLAP))?;
                written += 1;
            }
        }
        Ok(written)
    }

    pub fn speaker(&self, id: &str) -> Result<&IndexedSpeaker, CorpusError> {
        self.speakers
            .iter()
            .find(|s| s.speaker_id() == id)
            .ok_or_else(|| CorpusError::UnknownSpeaker(id.to_string()))
    }

    pub fn records(&self) -> Vec<SpeakerRecord> {
        self.speakers.iter().map(|s| s.record.clone()).collect()
    }

    /// Speakers that can supply fragments.
    pub fn usable(&self) -> impl Iterator<Item = &IndexedSpeaker> {
        self.speakers.iter().filter(|s| !s.fragments.is_empty())
    }

    /// Stable digest of every spectrogram value and label, for provenance.
    pub fn fingerprint(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for s in &self.speakers {
            h.update(s.speaker_id().as_bytes());
            h.update(&[s.record.phq8]);
            for r in &s.recordings {
                for v in &r.spectrogram.values {
                    h.update(&v.to_le_bytes());
                }
            }
        }
        format!("{:08x}", h.finalize())
    }
}

/// `<cache_dir>/<speaker>/<recording stem>.frag`
pub fn cache_path(cache_dir: &Path, speaker: &str, audio: &Path) -> PathBuf {
    let stem = audio.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    cache_dir.join(speaker).join(format!("{stem}.frag"))
}

/// Recovers dB frames from overlapping step-1 fragments.
fn spectrogram_from_fragments(frags: &[MelFragment], source_id: &str, frame_rate: f64) -> Option<MelSpectrogram> {
    let first = frags.first()?;
    let (bands, width) = (first.bands, first.width);
    let frames = frags.len() + width - 1;
    let mut values = vec![0.0f32; frames * bands];
    let mut put = |t: usize, f: &MelFragment, col: usize| {
        for b in 0..bands {
            values[t * bands + b] = f.at(b, col) * 80.0 - 80.0;
        }
    };
    for (i, f) in frags.iter().enumerate() {
        put(i, f, 0);
    }
    let last = frags.last().unwrap();
    for col in 1..width {
        put(frags.len() - 1 + col, last, col);
    }
    Some(MelSpectrogram { values, frames, n_mels: bands, frame_rate, source_id: source_id.to_string() })
}
