//! Decibel-scaled mel spectrograms and their overlapping 1-second fragments.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

pub const N_MELS: usize = 128;
pub const FRAGMENT_FRAMES: usize = 16;
pub const FRAGMENT_OVERLAP: usize = 15;
pub const DB_FLOOR: f32 = -80.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot analyse an empty signal")]
    EmptySignal,
    #[error("invalid frame spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} Hz audio, got {got} Hz")]
    WrongSampleRate { expected: u32, got: u32 },
    #[error("fragment cache {path}: {detail}")]
    Cache { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
}

/// STFT and mel analysis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameSpec {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
}

impl Default for FrameSpec {
    /// 16 frames per second at 8 kHz.
    fn default() -> Self {
        Self { n_fft: 1024, hop: 500, window: Window::Hann, n_mels: N_MELS, fmin: 0.0, fmax: 4000.0, sample_rate: 8000 }
    }
}

impl FrameSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidSpec(m));
        if self.n_fft == 0 || self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("need 0 < hop <= n_fft, got hop {} n_fft {}", self.hop, self.n_fft));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {}, got fmin {} fmax {}",
                self.sample_rate as f64 / 2.0,
                self.fmin,
                self.fmax
            ));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `ceil(len / hop)`
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// Row-major `frames x bins` power matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub values: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

fn hann(n: usize) -> Vec<f64> {
    // periodic form, matching spectral analysis conventions
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Reusable FFT plan and window for one `FrameSpec`.
pub struct Stft {
    spec: FrameSpec,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Stft {
    pub fn new(spec: &FrameSpec) -> Result<Self, FeatureError> {
        spec.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(spec.n_fft);
        let window = match spec.window {
            Window::Hann => hann(spec.n_fft),
        };
        Ok(Self { spec: spec.clone(), fft, window })
    }

    /// Reflect-padded, centred short-time power spectrum.
    pub fn power(&self, samples: &[f32]) -> Result<PowerSpectrogram, FeatureError> {
        if samples.is_empty() {
            return Err(FeatureError::EmptySignal);
        }
        let (n_fft, hop) = (self.spec.n_fft, self.spec.hop);
        let frames = self.spec.frame_count(samples.len());
        let bins = self.spec.n_bins();
        let half = (n_fft / 2) as isize;
        let mut values = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            let start = (t * hop) as isize - half;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = samples[reflect_index(start + i as isize, samples.len())] as f64;
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            values.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
        }
        Ok(PowerSpectrogram { values, frames, bins })
    }
}

pub fn stft_power(buf: &AudioBuffer, spec: &FrameSpec) -> Result<PowerSpectrogram, FeatureError> {
    check_rate(buf, spec)?;
    Stft::new(spec)?.power(buf.samples())
}

fn check_rate(buf: &AudioBuffer, spec: &FrameSpec) -> Result<(), FeatureError> {
    if buf.sample_rate() != spec.sample_rate {
        return Err(FeatureError::WrongSampleRate { expected: spec.sample_rate, got: buf.sample_rate() });
    }
    Ok(())
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, each scaled so its largest weight is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    /// Row-major `n_mels x bins`.
    pub weights: Vec<f64>,
    /// `n_mels + 2` band edges in Hz.
    pub band_edges: Vec<f64>,
    pub n_mels: usize,
    pub bins: usize,
}

impl FilterBank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Centre frequency of band `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.band_edges[m + 1]
    }
}

pub fn build_mel_filterbank(spec: &FrameSpec) -> Result<FilterBank, FeatureError> {
    spec.validate()?;
    let (n_mels, bins) = (spec.n_mels, spec.n_bins());
    let (lo, hi) = (hz_to_mel(spec.fmin), hz_to_mel(spec.fmax));
    let band_edges: Vec<f64> =
        (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let bin_hz = spec.sample_rate as f64 / spec.n_fft as f64;
    let mut weights = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (left, center, right) = (band_edges[m], band_edges[m + 1], band_edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = rise.min(fall).max(0.0);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            for w in row.iter_mut() {
                *w /= peak;
            }
        }
    }
    Ok(FilterBank { weights, band_edges, n_mels, bins })
}

/// Frame-major `frames x n_mels` matrix in dB relative to the recording's
/// loudest cell, floored at -80 dB.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f32>,
    pub frames: usize,
    pub n_mels: usize,
    pub frame_rate: f64,
    pub source_id: String,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }
}

/// Mel power projection of an STFT power matrix.
pub fn mel_power(power: &PowerSpectrogram, bank: &FilterBank) -> Vec<f64> {
    assert_eq!(power.bins, bank.bins);
    let mut out = vec![0.0; power.frames * bank.n_mels];
    for t in 0..power.frames {
        let p = &power.values[t * power.bins..(t + 1) * power.bins];
        for m in 0..bank.n_mels {
            out[t * bank.n_mels + m] = p.iter().zip(bank.row(m)).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `10 log10(p / max)` floored at -80 dB; an all-zero input is all floor.
pub fn power_to_db(power: &[f64]) -> Vec<f32> {
    let max = power.iter().cloned().fold(0.0, f64::max);
    power
        .iter()
        .map(|&p| {
            if max <= 0.0 || p <= 0.0 {
                DB_FLOOR
            } else {
                ((10.0 * (p / max).log10()) as f32).max(DB_FLOOR)
            }
        })
        .collect()
}

/// Reusable analysis chain: STFT plan plus filterbank.
pub struct MelAnalyzer {
    spec: FrameSpec,
    stft: Stft,
    bank: FilterBank,
}

impl MelAnalyzer {
    pub fn new(spec: &FrameSpec) -> Result<Self, FeatureError> {
        Ok(Self { spec: spec.clone(), stft: Stft::new(spec)?, bank: build_mel_filterbank(spec)? })
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    pub fn filterbank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn melspectrogram_db(&self, buf: &AudioBuffer) -> Result<MelSpectrogram, FeatureError> {
        check_rate(buf, &self.spec)?;
        let power = self.stft.power(buf.samples())?;
        let values = power_to_db(&mel_power(&power, &self.bank));
        Ok(MelSpectrogram {
            values,
            frames: power.frames,
            n_mels: self.bank.n_mels,
            frame_rate: self.spec.frame_rate(),
            source_id: buf.source_id().to_string(),
        })
    }
}

pub fn melspectrogram_db(buf: &AudioBuffer, spec: &FrameSpec) -> Result<MelSpectrogram, FeatureError> {
    MelAnalyzer::new(spec)?.melspectrogram_db(buf)
}

/// One model input: `n_mels x width` (band-major) values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFragment {
    pub values: Vec<f32>,
    pub bands: usize,
    pub width: usize,
    pub source_id: String,
    pub start_frame: usize,
}

impl MelFragment {
    /// Value at mel band `b`, frame offset `t`.
    pub fn at(&self, b: usize, t: usize) -> f32 {
        self.values[b * self.width + t]
    }
}

/// Maps -80..0 dB onto 0..1.
pub fn normalize_db(db: f32) -> f32 {
    (db - DB_FLOOR) / -DB_FLOOR
}

/// Number of fragments of `width` frames stepping by `width - overlap`.
pub fn fragment_count(frames: usize, width: usize, overlap: usize) -> usize {
    assert!(width > overlap, "fragment width must exceed overlap");
    if frames < width {
        0
    } else {
        (frames - width) / (width - overlap) + 1
    }
}

/// Cuts one transposed, normalized fragment starting at frame `start`.
pub fn fragment_at(spec: &MelSpectrogram, start: usize, width: usize) -> MelFragment {
    let n = spec.n_mels;
    let mut values = vec![0.0f32; n * width];
    for t in 0..width {
        let frame = spec.frame(start + t);
        for b in 0..n {
            values[b * width + t] = normalize_db(frame[b]);
        }
    }
    MelFragment { values, bands: n, width, source_id: spec.source_id.clone(), start_frame: start }
}

pub fn fragment(spec: &MelSpectrogram, width: usize, overlap: usize) -> Vec<MelFragment> {
    let count = fragment_count(spec.frames, width, overlap);
    (0..count).map(|i| fragment_at(spec, i * (width - overlap), width)).collect()
}

const CACHE_MAGIC: &[u8; 4] = b"MFRG";
const CACHE_VERSION: u16 = 1;

/// Binary fragment cache: 16-byte header then row-major little-endian f32.
///
/// Header layout: magic `MFRG`, version u16, bands u16, width u16,
/// reserved u16, count u32.
pub fn encode_fragment_cache(fragments: &[MelFragment]) -> Vec<u8> {
    let (bands, width) = fragments.first().map(|f| (f.bands, f.width)).unwrap_or((N_MELS, FRAGMENT_FRAMES));
    let mut out = Vec::with_capacity(16 + fragments.len() * bands * width * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(bands as u16).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(fragments.len() as u32).to_le_bytes());
    for f in fragments {
        assert_eq!((f.bands, f.width), (bands, width), "cache fragments must share dims");
        for v in &f.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_fragment_cache`]; fragments get consecutive start frames.
pub fn decode_fragment_cache(bytes: &[u8], source_id: &str, path: &str) -> Result<Vec<MelFragment>, FeatureError> {
    let err = |d: &str| FeatureError::Cache { path: path.to_string(), detail: d.to_string() };
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let bands = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let width = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let count = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
    let per = bands * width;
    if bytes.len() != 16 + count * per * 4 {
        return Err(err("payload length disagrees with header"));
    }
    Ok(bytes[16..]
        .chunks_exact(per * 4)
        .enumerate()
        .map(|(i, chunk)| MelFragment {
            values: chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
            bands,
            width,
            source_id: source_id.to_string(),
            start_frame: i,
        })
        .collect())
}

pub fn write_fragment_cache(path: impl AsRef<Path>, fragments: &[MelFragment]) -> Result<(), FeatureError> {
    let path = path.as_ref();
    fs::write(path, encode_fragment_cache(fragments))
        .map_err(|e| FeatureError::Io { path: path.display().to_string(), source: e })
}

pub fn read_fragment_cache(path: impl AsRef<Path>, source_id: &str) -> Result<Vec<MelFragment>, FeatureError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| FeatureError::Io { path: name.clone(), source: e })?;
    decode_fragment_cache(&bytes, source_id, &name)
}
