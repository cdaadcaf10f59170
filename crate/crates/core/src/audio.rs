//! WAV decoding and band-limited resampling to the pipeline rate.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Sample rate every recording is converted to before feature extraction.
pub const PIPELINE_RATE: u32 = 8_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    FileNotFound(String),
    #[error("unsupported encoding in {path}: {detail}")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("corrupt WAV header in {path}: {detail}")]
    CorruptHeader { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Mono samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
    source_id: String,
}

impl AudioBuffer {
    /// Samples outside `[-1, 1]` are clamped.
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Self { samples, sample_rate, source_id: source_id.into() }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
///
/// Stereo input is averaged to mono; the original sample rate is kept.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => AudioError::FileNotFound(name.clone()),
        _ => AudioError::Io { path: name.clone(), source: e },
    })?;
    let source_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_wav(&bytes, &name, source_id)
}

fn decode_wav(bytes: &[u8], name: &str, source_id: String) -> Result<AudioBuffer, AudioError> {
    let corrupt = |detail: &str| AudioError::CorruptHeader { path: name.to_string(), detail: detail.to_string() };
    let unsupported = |detail: String| AudioError::UnsupportedEncoding { path: name.to_string(), detail };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(corrupt("missing RIFF/WAVE signature"));
    }
    let riff_len = read_u32(bytes, 4) as usize;
    if riff_len + 8 > bytes.len() {
        return Err(corrupt("RIFF size exceeds file length"));
    }
    let end = riff_len + 8;

    let mut fmt: Option<(u16, u16, u32, u16, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= end {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > end {
            return Err(corrupt("chunk size exceeds RIFF payload"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(corrupt("fmt chunk shorter than 16 bytes"));
                }
                let mut tag = read_u16(bytes, body);
                let channels = read_u16(bytes, body + 2);
                let rate = read_u32(bytes, body + 4);
                let block_align = read_u16(bytes, body + 12);
                let bits = read_u16(bytes, body + 14);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(corrupt("extensible fmt chunk shorter than 40 bytes"));
                    }
                    // first two bytes of the sub-format GUID carry the format code
                    tag = read_u16(bytes, body + 24);
                }
                fmt = Some((tag, channels, rate, block_align, bits));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }

    let (tag, channels, rate, block_align, bits) = fmt.ok_or_else(|| corrupt("missing fmt chunk"))?;
    let data = data.ok_or_else(|| corrupt("missing data chunk"))?;
    match (tag, bits) {
        (FORMAT_PCM, 16) | (FORMAT_FLOAT, 32) => {}
        _ => return Err(unsupported(format!("format tag {tag} with {bits} bits per sample"))),
    }
    if !(1..=2).contains(&channels) {
        return Err(unsupported(format!("{channels} channels")));
    }
    if rate == 0 {
        return Err(corrupt("zero sample rate"));
    }
    let width = (bits / 8) as usize;
    if block_align as usize != width * channels as usize {
        return Err(corrupt("block alignment disagrees with channels and sample width"));
    }
    if data.len() % block_align as usize != 0 {
        return Err(corrupt("data length is not a whole number of frames"));
    }

    let decode = |chunk: &[u8]| -> f32 {
        if tag == FORMAT_PCM {
            i16::from_le_bytes([chunk[0], chunk[1]]) as f32 / 32768.0
        } else {
            f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]])
        }
    };
    let samples: Vec<f32> = data
        .chunks_exact(block_align as usize)
        .map(|frame| {
            if channels == 1 {
                decode(frame)
            } else {
                (decode(&frame[..width]) + decode(&frame[width..])) * 0.5
            }
        })
        .collect();
    Ok(AudioBuffer::new(samples, rate, source_id))
}

/// Encodes a buffer as 16-bit PCM mono.
pub fn encode_wav_pcm16(buf: &AudioBuffer) -> Vec<u8> {
    let data_len = buf.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buf.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<(), AudioError> {
    let path = path.as_ref();
    fs::write(path, encode_wav_pcm16(buf))
        .map_err(|e| AudioError::Io { path: path.display().to_string(), source: e })
}

/// Zero crossings on each side of the interpolation kernel, counted at the
/// lower of the two rates (32 taps per phase).
const HALF_ZEROS: usize = 16;
const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-16 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase windowed-sinc filter bank for a rational rate change.
struct Polyphase {
    up: u64,
    down: u64,
    /// first source offset relative to floor(position), per phase
    offset: isize,
    /// `[phase][tap]`
    taps: Vec<Vec<f64>>,
}

impl Polyphase {
    fn new(source_rate: u32, target_rate: u32) -> Self {
        let g = gcd(source_rate as u64, target_rate as u64);
        let (up, down) = (target_rate as u64 / g, source_rate as u64 / g);
        // cutoff relative to the source Nyquist frequency
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half_width = HALF_ZEROS as f64 / cutoff;
        let reach = half_width.ceil() as isize;
        let i0_beta = bessel_i0(KAISER_BETA);
        let taps = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                (-reach + 1..=reach)
                    .map(|j| {
                        // distance from the output instant to source sample j
                        let d = j as f64 - frac;
                        let ratio = d / half_width;
                        if ratio.abs() >= 1.0 {
                            return 0.0;
                        }
                        let window = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).sqrt()) / i0_beta;
                        let arg = std::f64::consts::PI * cutoff * d;
                        let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                        cutoff * sinc * window
                    })
                    .collect()
            })
            .collect();
        Self { up, down, offset: -reach + 1, taps }
    }

    fn apply(&self, input: &[f32], out_len: usize) -> Vec<f32> {
        let n_in = input.len() as isize;
        (0..out_len as u64)
            .map(|n| {
                let num = n * self.down;
                let base = (num / self.up) as isize;
                let taps = &self.taps[(num % self.up) as usize];
                let mut acc = 0.0f64;
                for (t, &w) in taps.iter().enumerate() {
                    let idx = base + self.offset + t as isize;
                    if idx >= 0 && idx < n_in {
                        acc += w * input[idx as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect()
    }
}

/// Converts to `target_rate` with a Kaiser-windowed sinc interpolator.
///
/// Output length is `round(len * target / source)`; equal rates return the
/// buffer unchanged.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    assert!(target_rate > 0, "target rate must be positive");
    if target_rate == buf.sample_rate {
        return buf.clone();
    }
    let out_len =
        ((buf.len() as u128 * target_rate as u128 * 2 + buf.sample_rate as u128) / (2 * buf.sample_rate as u128)) as usize;
    let filter = Polyphase::new(buf.sample_rate, target_rate);
    AudioBuffer::new(filter.apply(&buf.samples, out_len), target_rate, buf.source_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_round_trips() {
        let buf = AudioBuffer::new(vec![0.0; 8000], 8000, "s");
        let decoded = decode_wav(&encode_wav_pcm16(&buf), "mem", "s".into()).unwrap();
        assert_eq!(decoded.len(), 8000);
        assert_eq!(decoded.sample_rate(), 8000);
        assert!(decoded.samples().iter().all(|&s| s == 0.0));
    }

    fn stereo_pcm16(left: i16, right: i16, frames: usize) -> Vec<u8> {
        let mut b = Vec::new();
        let data_len = frames * 4;
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&64000u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(data_len as u32).to_le_bytes());
        for _ in 0..frames {
            b.extend_from_slice(&left.to_le_bytes());
            b.extend_from_slice(&right.to_le_bytes());
        }
        b
    }

    #[test]
    fn stereo_is_averaged() {
        let buf = decode_wav(&stereo_pcm16(16384, -16384, 100), "mem", "st".into()).unwrap();
        assert_eq!(buf.len(), 100);
        assert!(buf.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn most_negative_pcm_maps_to_minus_one() {
        let buf = decode_wav(&stereo_pcm16(-32768, -32768, 1), "mem", "n".into()).unwrap();
        assert_eq!(buf.samples(), &[-1.0]);
    }

    #[test]
    fn inconsistent_chunk_size_is_corrupt() {
        let mut b = stereo_pcm16(1, 1, 10);
        let n = b.len();
        b[40..44].copy_from_slice(&((n as u32) * 2).to_le_bytes());
        assert!(matches!(decode_wav(&b, "mem", "c".into()), Err(AudioError::CorruptHeader { .. })));
    }

    #[test]
    fn compressed_formats_are_rejected() {
        let mut b = stereo_pcm16(1, 1, 10);
        // ADPCM format tag
        b[20..22].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(decode_wav(&b, "mem", "c".into()), Err(AudioError::UnsupportedEncoding { .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_wav("/nonexistent/dir/x.wav"), Err(AudioError::FileNotFound(_))));
    }

    #[test]
    fn halving_the_rate_halves_the_length() {
        let buf = AudioBuffer::new(vec![0.1; 16000], 16000, "h");
        let out = resample(&buf, 8000);
        assert_eq!(out.len(), 8000);
        assert_eq!(out.sample_rate(), 8000);
    }

    #[test]
    fn equal_rates_are_identity() {
        let buf = AudioBuffer::new((0..999).map(|i| (i as f32 * 0.01).sin()).collect(), 8000, "i");
        assert_eq!(resample(&buf, 8000), buf);
    }

    #[test]
    fn odd_ratio_length_rounds() {
        let buf = AudioBuffer::new(vec![0.0; 44100], 44100, "o");
        assert_eq!(resample(&buf, 8000).len(), 8000);
        let buf = AudioBuffer::new(vec![0.0; 1001], 16000, "o");
        // 500.5 rounds half up
        assert_eq!(resample(&buf, 8000).len(), 501);
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-13);
        assert!((bessel_i0(8.6) - 750.461_159_563_165_9).abs() / 750.46 < 1e-12);
    }
}
