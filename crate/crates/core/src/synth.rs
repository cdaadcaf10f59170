//! Seeded synthetic speech-like corpus with an injectable spectral marker.
//!
//! Every speaker is band-limited pink noise plus a harmonic tone whose F0
//! drifts. Depressed speakers additionally carry, on a fraction of analysis
//! frames, extra in-band noise that lifts the marker band by `marker_gain_db`.
//!
//! With `healthy_slice` set the marker becomes a global pattern in frequency:
//! healthy speakers also get bumps, but each covers only a random slice of
//! the marker band, so locally the two classes look alike and only the
//! bump's extent across frequency separates them.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioBuffer};
use crate::corpus::{CorpusError, SpeakerRecord};
use crate::features::{build_mel_filterbank, FrameSpec};
use neuralkit::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Noise RMS relative to the voiced component, dB.
    pub level_db: f64,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self { level_db: -20.0, low_hz: 60.0, high_hz: 3900.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub depressed_fraction: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Mel band indices `[start, end)` of the 8 kHz analysis filterbank.
    pub marker_band: [usize; 2],
    /// Fraction of analysis frames carrying the marker; 0 gives a null corpus.
    pub marker_prevalence: f64,
    pub marker_gain_db: f64,
    /// Scale prevalence with PHQ-8: `prevalence * (phq8 - 4) / 20`.
    pub severity_scaled: bool,
    /// Width in bands of the healthy speakers' partial bumps (see module docs).
    pub healthy_slice: Option<usize>,
    pub noise: NoiseProfile,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 60,
            depressed_fraction: 0.3,
            min_duration_s: 4.0,
            max_duration_s: 7.0,
            marker_band: [16, 32],
            marker_prevalence: 0.5,
            marker_gain_db: 12.0,
            severity_scaled: false,
            healthy_slice: None,
            noise: NoiseProfile::default(),
            sample_rate: 16_000,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSynthSpec(m.to_string()));
        if !(self.depressed_fraction > 0.0 && self.depressed_fraction < 1.0) {
            return bad("depressed_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.marker_prevalence) {
            return bad("marker_prevalence must lie in [0, 1]");
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return bad("duration range must be positive and ordered");
        }
        let [a, b] = self.marker_band;
        if a >= b || b > 128 {
            return bad("marker_band must be a non-empty range within 0..128");
        }
        if let Some(w) = self.healthy_slice {
            if w == 0 || w >= b - a {
                return bad("healthy_slice must be narrower than marker_band");
            }
        }
        if self.sample_rate < 8_000 {
            return bad("sample_rate must be at least 8000 Hz");
        }
        if self.n_speakers < 2 {
            return bad("need at least two speakers");
        }
        Ok(())
    }

    pub fn depressed_count(&self) -> usize {
        ((self.n_speakers as f64 * self.depressed_fraction).round() as usize).clamp(1, self.n_speakers - 1)
    }

    fn prevalence_for(&self, phq8: u8) -> f64 {
        if self.severity_scaled {
            (self.marker_prevalence * (phq8 as f64 - 4.0) / 20.0).clamp(0.0, 1.0)
        } else {
            self.marker_prevalence
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: PathBuf,
    pub records: Vec<SpeakerRecord>,
}

/// Writes `audio/<speaker>.wav` and `manifest.csv` under `out_dir`.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCorpus, CorpusError> {
    spec.validate()?;
    let io = |p: &Path| {
        let name = p.display().to_string();
        move |e| CorpusError::Io { path: name, source: e }
    };
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(io(&audio_dir))?;

    let mut rng = seeded_rng(spec.seed);
    let mut is_depressed = vec![false; spec.n_speakers];
    for d in is_depressed.iter_mut().take(spec.depressed_count()) {
        *d = true;
    }
    is_depressed.shuffle(&mut rng);

    let bands = marker_bands_hz();
    let mut gen = Generator::new(spec, bands);
    let mut records = Vec::with_capacity(spec.n_speakers);
    let mut manifest = String::from("speaker_id,audio_path,phq8\n");
    for (i, &dep) in is_depressed.iter().enumerate() {
        let phq8: u8 = if dep { rng.gen_range(10..=24) } else { rng.gen_range(0..=9) };
        let speaker_seed: u64 = rng.gen();
        let id = format!("S{i:03}");
        let samples = gen.speaker(speaker_seed, dep, phq8);
        let rel = format!("audio/{id}.wav");
        let path = out_dir.join(&rel);
        write_wav(&path, &AudioBuffer::new(samples, spec.sample_rate, id.clone()))?;
        manifest.push_str(&format!("{id},{rel},{phq8}\n"));
        records.push(SpeakerRecord::new(id, vec![path], phq8));
    }
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest).map_err(io(&manifest_path))?;
    Ok(SynthCorpus { manifest: manifest_path, records })
}

/// Lower and upper edge in Hz of every mel band of the default analysis.
fn marker_bands_hz() -> Vec<(f64, f64)> {
    let bank = build_mel_filterbank(&FrameSpec::default()).expect("default spec is valid");
    (0..bank.n_mels).map(|m| (bank.band_edges[m], bank.band_edges[m + 2])).collect()
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    bands: Vec<(f64, f64)>,
    planner: FftPlanner<f64>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SynthSpec, bands: Vec<(f64, f64)>) -> Self {
        Self { spec, bands, planner: FftPlanner::new() }
    }

    fn speaker(&mut self, seed: u64, depressed: bool, phq8: u8) -> Vec<f32> {
        let spec = self.spec;
        let rate = spec.sample_rate as f64;
        let mut rng = seeded_rng(seed);
        let duration = rng.gen_range(spec.min_duration_s..=spec.max_duration_s);
        let n = (duration * rate).round() as usize;
        let ifft = self.planner.plan_fft_inverse(n);

        let mut signal = voiced(&mut rng, n, rate);
        let voiced_rms = rms(&signal);
        let noise_scale = voiced_rms * 10f64.powf(spec.noise.level_db / 20.0);
        let (lo, hi) = (spec.noise.low_hz, spec.noise.high_hz.min(rate / 2.0));
        let noise = shaped_noise(&mut rng, &ifft, n, rate, lo, hi);
        let norm = noise_scale / rms(&noise).max(1e-12);
        for (s, v) in signal.iter_mut().zip(&noise) {
            *s += v * norm;
        }

        // marker noise shares the background's spectral density, so a power
        // ratio of 10^(g/10) - 1 lifts the band by g dB over the noise floor
        let bump = (10f64.powf(spec.marker_gain_db / 10.0) - 1.0).sqrt() * norm;
        let block = (rate / 16.0).round() as usize;
        let blocks = n.div_ceil(block);
        let prevalence = if depressed { spec.prevalence_for(phq8) } else { spec.marker_prevalence };
        if prevalence > 0.0 {
            let [a, b] = spec.marker_band;
            let gate = gate_blocks(&mut rng, blocks, prevalence);
            match spec.healthy_slice {
                _ if depressed => self.add_band(&mut signal, &mut rng, &ifft, spec.marker_band, &gate, block, bump),
                Some(w) => {
                    let chosen: Vec<Option<usize>> =
                        gate.iter().map(|&g| g.then(|| rng.gen_range(a..=b - w))).collect();
                    let mut starts: Vec<usize> = chosen.iter().flatten().copied().collect();
                    starts.sort_unstable();
                    starts.dedup();
                    for start in starts {
                        let sub: Vec<bool> = chosen.iter().map(|&c| c == Some(start)).collect();
                        self.add_band(&mut signal, &mut rng, &ifft, [start, start + w], &sub, block, bump);
                    }
                }
                None => {}
            }
        }

        let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = 0.9 / peak.max(1e-12);
        signal.iter().map(|v| (v * gain) as f32).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn add_band(
        &self,
        signal: &mut [f64],
        rng: &mut ChaCha8Rng,
        ifft: &Arc<dyn Fft<f64>>,
        [a, b]: [usize; 2],
        gate: &[bool],
        block: usize,
        scale: f64,
    ) {
        let rate = self.spec.sample_rate as f64;
        let band = shaped_noise(rng, ifft, signal.len(), rate, self.bands[a].0, self.bands[b - 1].1);
        add_gated(signal, &band, gate, block, scale);
    }
}

fn gate_blocks(rng: &mut ChaCha8Rng, blocks: usize, prevalence: f64) -> Vec<bool> {
    (0..blocks).map(|_| rng.gen_bool(prevalence)).collect()
}

/// Adds `scale * src` on gated blocks, with a 32-sample moving average on
/// the gate to soften its edges.
fn add_gated(dst: &mut [f64], src: &[f64], gate: &[bool], block: usize, scale: f64) {
    const RAMP: usize = 32;
    let n = dst.len();
    let mut env = vec![0.0f64; n];
    for (k, _) in gate.iter().enumerate().filter(|(_, &g)| g) {
        env[k * block..((k + 1) * block).min(n)].fill(1.0);
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += env[i];
        if i >= RAMP {
            acc -= env[i - RAMP];
        }
        dst[i] += scale * src[i] * acc / RAMP as f64;
    }
}

/// Harmonic tone with a drifting F0 and a syllable-rate amplitude envelope.
fn voiced(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let f0 = rng.gen_range(90.0..220.0);
    let vibrato = rng.gen_range(0.03..0.08);
    let drift_hz = rng.gen_range(0.2..0.6);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let syllable_hz = rng.gen_range(3.0..5.0);
    let syllable_phase = rng.gen_range(0.0..2.0 * PI);
    let tilt = rng.gen_range(1.6..2.2);
    let nyq = 3800.0f64.min(rate / 2.0 - 100.0);
    let max_h = (nyq / (f0 * (1.0 + vibrato))).floor() as usize;
    let amps: Vec<f64> = (1..=max_h).map(|h| (h as f64).powf(-tilt)).collect();
    let mut phase = 0.0f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let f = f0 * (1.0 + vibrato * (2.0 * PI * drift_hz * t + drift_phase).sin());
            phase += 2.0 * PI * f / rate;
            let env = 0.55 + 0.45 * (2.0 * PI * syllable_hz * t + syllable_phase).sin();
            env * amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum::<f64>()
        })
        .collect()
}

/// Noise with a 1/f power spectrum confined to `[lo, hi]` Hz, built from
/// unit-magnitude random-phase bins.
fn shaped_noise(rng: &mut ChaCha8Rng, ifft: &Arc<dyn Fft<f64>>, n: usize, rate: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut bins = vec![Complex::new(0.0, 0.0); n];
    for k in 1..=(n - 1) / 2 {
        let f = k as f64 * rate / n as f64;
        let phi = rng.gen_range(0.0..2.0 * PI);
        if f >= lo && f <= hi {
            let mag = 1.0 / f.sqrt();
            bins[k] = Complex::from_polar(mag, phi);
            bins[n - k] = bins[k].conj();
        }
    }
    ifft.process(&mut bins);
    // absolute scale is fixed so equal-density bands stay comparable
    bins.iter().map(|c| c.re / (n as f64).sqrt()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{load_wav, resample};
    use crate::features::melspectrogram_db;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec { n_speakers: 6, depressed_fraction: 0.5, min_duration_s: 3.2, max_duration_s: 3.5, seed, ..Default::default() }
    }

    #[test]
    fn default_class_balance() {
        assert_eq!(SynthSpec::default().depressed_count(), 18);
    }

    #[test]
    fn rejects_bad_specs() {
        for s in [
            SynthSpec { depressed_fraction: 0.0, ..Default::default() },
            SynthSpec { marker_prevalence: 1.5, ..Default::default() },
            SynthSpec { marker_band: [90, 80], ..Default::default() },
            SynthSpec { healthy_slice: Some(16), ..Default::default() },
        ] {
            assert!(matches!(s.validate(), Err(CorpusError::InvalidSynthSpec(_))));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = synth_corpus(&small(3), a.path()).unwrap();
        synth_corpus(&small(3), b.path()).unwrap();
        for r in &ca.records {
            let name = r.audio_paths[0].file_name().unwrap();
            let x = fs::read(a.path().join("audio").join(name)).unwrap();
            let y = fs::read(b.path().join("audio").join(name)).unwrap();
            assert_eq!(x, y);
        }
        assert_eq!(fs::read(a.path().join("manifest.csv")).unwrap(), fs::read(b.path().join("manifest.csv")).unwrap());
        assert_eq!(ca.records.iter().filter(|r| r.label == 1).count(), 3);
        for r in &ca.records {
            assert_eq!(r.label == 1, r.phq8 >= 10);
        }
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(&small(4), dir.path()).unwrap();
        let loaded = crate::corpus::load_manifest(&c.manifest).unwrap();
        assert_eq!(loaded, c.records);
    }

    fn band_mean(db: &crate::features::MelSpectrogram, lo: usize, hi: usize) -> f64 {
        let mut s = 0.0;
        for t in 0..db.frames {
            s += db.frame(t)[lo..hi].iter().map(|&v| v as f64).sum::<f64>();
        }
        s / (db.frames * (hi - lo)) as f64
    }

    /// With the marker on every frame the band sits clearly above the same
    /// speaker rendered without it.
    #[test]
    fn marker_lifts_its_band() {
        let spec = SynthSpec { marker_prevalence: 1.0, ..small(5) };
        let mut with = Generator::new(&spec, marker_bands_hz());
        let marked = with.speaker(99, true, 15);
        let plain = with.speaker(99, false, 5);
        let db = |s: Vec<f32>| {
            let buf = resample(&AudioBuffer::new(s, 16_000, "x"), 8_000);
            melspectrogram_db(&buf, &FrameSpec::default()).unwrap()
        };
        let (m, p) = (db(marked), db(plain));
        let lift = band_mean(&m, 18, 30) - band_mean(&p, 18, 30);
        let outside = band_mean(&m, 60, 100) - band_mean(&p, 60, 100);
        // peak renormalization shifts everything a little; the band moves more
        assert!(lift - outside > 6.0, "lift {lift} outside {outside}");
    }

    /// Number of bands in `lo..hi` lifted by over 4 dB, per frame, against
    /// the same speaker without any marker.
    fn lifted_widths(m: &crate::features::MelSpectrogram, p: &crate::features::MelSpectrogram, lo: usize, hi: usize) -> Vec<usize> {
        (0..m.frames).map(|t| (lo..hi).filter(|&b| m.frame(t)[b] - p.frame(t)[b] > 4.0).count()).collect()
    }

    #[test]
    fn healthy_slices_stay_narrow() {
        let spec = SynthSpec { marker_band: [16, 112], healthy_slice: Some(16), marker_prevalence: 1.0, ..small(8) };
        let plain_spec = SynthSpec { marker_prevalence: 0.0, ..small(8) };
        let db = |s: Vec<f32>| {
            let buf = resample(&AudioBuffer::new(s, 16_000, "x"), 8_000);
            melspectrogram_db(&buf, &FrameSpec::default()).unwrap()
        };
        let plain = db(Generator::new(&plain_spec, marker_bands_hz()).speaker(11, false, 3));
        let median_width = |depressed: bool| {
            let m = db(Generator::new(&spec, marker_bands_hz()).speaker(11, depressed, if depressed { 15 } else { 3 }));
            let mut w = lifted_widths(&m, &plain, 16, 112);
            w.sort_unstable();
            w[w.len() / 2]
        };
        let (dep, healthy) = (median_width(true), median_width(false));
        // filter overlap spreads a 16-band slice over a few neighbours
        assert!(dep > 60, "depressed lift spans {dep} bands");
        assert!((6..=32).contains(&healthy), "healthy lift spans {healthy} bands");
    }

    #[test]
    fn writes_readable_audio() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(&small(6), dir.path()).unwrap();
        let buf = load_wav(&c.records[0].audio_paths[0]).unwrap();
        assert_eq!(buf.sample_rate(), 16_000);
        assert!(buf.duration_seconds() >= 3.2 - 1e-3);
    }
}
