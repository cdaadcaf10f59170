use std::f64::consts::PI;

use proptest::prelude::*;

use voxscreen::audio::AudioBuffer;
use voxscreen::features::{
    build_mel_filterbank, fragment, fragment_count, hz_to_mel, mel_power, melspectrogram_db, normalize_db, power_to_db,
    stft_power, FrameSpec, MelSpectrogram, DB_FLOOR, FRAGMENT_FRAMES, FRAGMENT_OVERLAP, N_MELS,
};

/// A chirp with a little noise, so every band and frame differs.
fn speechlike(seconds: f64) -> AudioBuffer {
    let rate = 8000;
    let len = (seconds * rate as f64) as usize;
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let s = (0..len)
        .map(|i| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let t = i as f64 / rate as f64;
            let noise = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            (0.4 * (2.0 * PI * (150.0 + 400.0 * t) * t).sin() + 0.05 * noise) as f32
        })
        .collect();
    AudioBuffer::new(s, rate, "speechlike")
}

/// A spectrogram of `frames` frames whose cells are all distinct.
fn synthetic_spectrogram(frames: usize) -> MelSpectrogram {
    let values = (0..frames * N_MELS).map(|i| -((i * 7919 % 8000) as f32) / 100.0).collect();
    MelSpectrogram { values, frames, n_mels: N_MELS, frame_rate: 16.0, source_id: "s".into() }
}

#[test]
fn fragment_count_formula_holds_up_to_ten_thousand_frames() {
    for t in 0..=10_000usize {
        assert_eq!(fragment_count(t, FRAGMENT_FRAMES, FRAGMENT_OVERLAP), (t + 1).saturating_sub(16), "T = {t}");
    }
    // Materialize fragments over a spread of lengths, including the edges.
    for t in (0..=40).chain([159, 160, 161, 1000, 10_000]) {
        let frags = fragment(&synthetic_spectrogram(t), FRAGMENT_FRAMES, FRAGMENT_OVERLAP);
        assert_eq!(frags.len(), (t + 1).saturating_sub(16), "T = {t}");
    }
}

#[test]
fn ten_second_recording_gives_145_fragments() {
    let spec = FrameSpec::default();
    let mel = melspectrogram_db(&speechlike(10.0), &spec).unwrap();
    assert_eq!(mel.frames, 160);
    assert_eq!(fragment(&mel, FRAGMENT_FRAMES, FRAGMENT_OVERLAP).len(), 145);
}

#[test]
fn one_second_clip_gives_sixteen_frames_and_one_fragment() {
    let mel = melspectrogram_db(&speechlike(1.0), &FrameSpec::default()).unwrap();
    assert_eq!((mel.frames, mel.n_mels, mel.frame_rate), (16, 128, 16.0));
    let frags = fragment(&mel, FRAGMENT_FRAMES, FRAGMENT_OVERLAP);
    assert_eq!(frags.len(), 1);
    assert_eq!((frags[0].bands, frags[0].width, frags[0].values.len()), (128, 16, 2048));
}

#[test]
fn fragments_are_transposed_normalized_windows() {
    let mel = melspectrogram_db(&speechlike(3.3), &FrameSpec::default()).unwrap();
    let frags = fragment(&mel, FRAGMENT_FRAMES, FRAGMENT_OVERLAP);
    assert_eq!(frags.len(), mel.frames - 15);
    for (i, f) in frags.iter().enumerate() {
        assert_eq!((f.bands, f.width, f.start_frame), (128, 16, i));
        assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for b in 0..128 {
            for t in 0..16 {
                assert_eq!(f.at(b, t).to_bits(), normalize_db(mel.frame(i + t)[b]).to_bits());
            }
        }
    }
}

#[test]
fn adjacent_fragments_share_fifteen_identical_columns() {
    let mel = melspectrogram_db(&speechlike(4.0), &FrameSpec::default()).unwrap();
    let frags = fragment(&mel, FRAGMENT_FRAMES, FRAGMENT_OVERLAP);
    for pair in frags.windows(2) {
        for b in 0..128 {
            for t in 0..15 {
                assert_eq!(pair[0].at(b, t + 1).to_bits(), pair[1].at(b, t).to_bits());
            }
        }
        // the columns they don't share really are different data
        assert!((0..128).any(|b| pair[0].at(b, 0) != pair[1].at(b, 15)));
    }
}

#[test]
fn db_map_spans_floor_to_zero() {
    let mel = melspectrogram_db(&speechlike(3.0), &FrameSpec::default()).unwrap();
    let max = mel.values.iter().cloned().fold(f32::MIN, f32::max);
    assert_eq!(max, 0.0);
    assert!(mel.values.iter().all(|&v| (DB_FLOOR..=0.0).contains(&v)));
}

#[test]
fn flat_spectrum_mel_energy_is_the_row_sums() {
    let spec = FrameSpec::default();
    let bank = build_mel_filterbank(&spec).unwrap();
    let c = 0.37;
    let power = voxscreen::features::PowerSpectrogram { values: vec![c; 3 * bank.bins], frames: 3, bins: bank.bins };
    let mel = mel_power(&power, &bank);
    for t in 0..3 {
        for m in 0..bank.n_mels {
            let row_sum: f64 = bank.row(m).iter().sum();
            assert!((mel[t * bank.n_mels + m] - c * row_sum).abs() <= 1e-12 * row_sum.max(1.0));
        }
    }
}

#[test]
fn filterbank_rows_are_unit_peak_contiguous_triangles() {
    let bank = build_mel_filterbank(&FrameSpec::default()).unwrap();
    assert_eq!((bank.n_mels, bank.bins, bank.band_edges.len()), (128, 513, 130));
    assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
    for m in 0..128 {
        let row = bank.row(m);
        assert!(row.iter().all(|&w| w >= 0.0));
        let support: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
        if let (Some(&a), Some(&b)) = (support.first(), support.last()) {
            assert_eq!(b - a + 1, support.len(), "band {m} has gaps");
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12, "band {m} peak {peak}");
        }
    }
}

#[test]
fn stft_frame_counts() {
    let spec = FrameSpec::default();
    for (len, frames) in [(8000, 16), (12345, 25), (1, 1), (500, 1), (501, 2)] {
        let p = stft_power(&AudioBuffer::new(vec![0.1; len], 8000, "c"), &spec).unwrap();
        assert_eq!(p.frames, frames, "len {len}");
        assert_eq!(p.bins, 513);
    }
}

proptest! {
    #[test]
    fn db_scaling_is_monotone(mut p in prop::collection::vec(0.0f64..1e3, 2..200)) {
        p.sort_by(f64::total_cmp);
        let db = power_to_db(&p);
        prop_assert!(db.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(db.iter().all(|&d| (DB_FLOOR..=0.0).contains(&d)));
    }

    #[test]
    fn hundredth_of_max_is_minus_twenty_db(max in 1e-6f64..1e6) {
        let db = power_to_db(&[max, max / 100.0]);
        prop_assert_eq!(db[0], 0.0);
        prop_assert!((db[1] + 20.0).abs() < 1e-4);
    }
}
