use std::f64::consts::PI;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tonet_core::dsp::{compute_cfp, compute_stft_power, load_wav, write_wav, CfpConfig, CfpTensor, DspError, LogMapping, Waveform};

fn tone(freqs: &[f64], secs: f64, rate: f64, amp: f64) -> Waveform<f64> {
    let n = (secs * rate).round() as usize;
    let samples = (0..n)
        .map(|i| freqs.iter().map(|f| amp * (2.0 * PI * f * i as f64 / rate).sin()).sum())
        .collect();
    Waveform::new(samples, rate)
}

fn expected_bin(f: f64) -> i64 {
    (60.0 * (f / 32.5).log2() + 0.5).floor() as i64
}

/// Frames whose analysis window lies entirely inside the signal.
fn interior(cfp: &CfpTensor<f64>) -> std::ops::Range<usize> {
    5..cfp.num_frames() - 5
}

#[test]
fn random_pure_tones_localize_in_spectrum_and_gcos() {
    let cfg = CfpConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let f = rng.random_range(65.0..1000.0);
        let cfp = compute_cfp(&tone(&[f], 0.4, 8000.0, 0.5), &cfg).unwrap();
        let want = expected_bin(f);
        for c in [0, 2] {
            for t in interior(&cfp) {
                let got = cfp.argmax(c, t) as i64;
                assert!((got - want).abs() <= 1, "{f:.2} Hz channel {c} frame {t}: bin {got}, want {want}");
            }
        }
    }
}

#[test]
fn cepstrum_channel_localizes_above_its_low_lobe() {
    let cfg = CfpConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let f = rng.random_range(300.0..1000.0);
        let cfp = compute_cfp(&tone(&[f], 0.4, 8000.0, 0.5), &cfg).unwrap();
        let want = expected_bin(f);
        for t in interior(&cfp) {
            let got = cfp.argmax(1, t) as i64;
            assert!((got - want).abs() <= 1, "{f:.2} Hz frame {t}: bin {got}, want {want}");
        }
    }
}

#[test]
fn cepstrum_of_low_tone_peaks_just_above_quefrency_cutoff() {
    // the cosine lobe around zero quefrency survives the high-pass for
    // tones whose quarter period exceeds the cutoff
    let cfp = compute_cfp(&tone(&[100.0], 0.4, 8000.0, 0.5), &CfpConfig::default()).unwrap();
    for t in interior(&cfp) {
        assert!(cfp.argmax(1, t) >= 300);
        assert!(cfp.argmax(0, t).abs_diff(97) <= 1);
    }
}

fn is_local_max_near(cfp: &CfpTensor<f64>, c: usize, t: usize, center: i64) -> bool {
    (center - 1..=center + 1).any(|b| {
        let b = b as usize;
        b > 0 && b + 1 < cfp.num_bins() && cfp.get(c, b, t) >= cfp.get(c, b - 1, t) && cfp.get(c, b, t) >= cfp.get(c, b + 1, t) && cfp.get(c, b, t) > 0.0
    })
}

#[test]
fn two_sines_show_both_peaks_in_gcos() {
    let cfg = CfpConfig::default();
    let cfp = compute_cfp(&tone(&[220.0, 330.0], 0.5, 8000.0, 0.4), &cfg).unwrap();
    for t in interior(&cfp) {
        assert!(is_local_max_near(&cfp, 2, t, expected_bin(220.0)), "220 Hz frame {t}");
        assert!(is_local_max_near(&cfp, 2, t, expected_bin(330.0)), "330 Hz frame {t}");
    }
}

#[test]
fn nearest_mapping_also_localizes() {
    let cfg = CfpConfig {
        mapping: LogMapping::Nearest,
        ..CfpConfig::default()
    };
    let cfp = compute_cfp(&tone(&[440.0], 0.3, 8000.0, 0.5), &cfg).unwrap();
    for c in 0..3 {
        assert!((cfp.argmax(c, 15) as i64 - 226).abs() <= 1);
    }
}

#[test]
fn clip_length_fixes_frame_count() {
    let cfg = CfpConfig::default();
    let cfp = compute_cfp(&tone(&[300.0], 1.28, 8000.0, 0.5), &cfg).unwrap();
    assert_eq!(cfp.as_tensor().shape(), &[3, 360, 128]);
    let odd = Waveform::new(vec![0.01; 10241], 8000.0);
    assert_eq!(compute_stft_power(&odd, &cfg).unwrap().shape()[1], 129);
}

#[test]
fn feature_file_round_trip() {
    let cfg = CfpConfig::default();
    let cfp = compute_cfp(&tone(&[300.0], 0.2, 8000.0, 0.5), &cfg).unwrap();
    let mut bytes = Vec::new();
    cfp.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..9], b"TONETCFP1");
    assert_eq!(u64::from_le_bytes(bytes[9..17].try_into().unwrap()), 3);
    assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 360);
    let back = CfpTensor::<f64>::read_from(&bytes[..]).unwrap();
    assert_eq!(back, cfp);
    assert!(CfpTensor::<f64>::read_from(&bytes[..bytes.len() - 1]).is_err());
}

fn write_pcm(path: &Path, rate: u32, channels: u16, bits: u16, frames: &[Vec<i32>]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: bits,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for fr in frames {
        for &s in fr {
            if bits == 8 {
                w.write_sample(s as i8).unwrap();
            } else {
                w.write_sample(s as i16).unwrap();
            }
        }
    }
    w.finalize().unwrap();
}

#[test]
fn wav_passthrough_and_stereo_mix() {
    let dir = tempfile::tempdir().unwrap();
    let mono = dir.path().join("mono.wav");
    let vals: Vec<i32> = (0..10240).map(|i| ((i * 37) % 2000) - 1000).collect();
    write_pcm(&mono, 8000, 1, 16, &vals.iter().map(|&v| vec![v]).collect::<Vec<_>>());
    let w: Waveform<f64> = load_wav(&mono, 8000.0).unwrap();
    assert_eq!(w.len(), 10240);
    assert_eq!(w.samples[5], vals[5] as f64 / 32768.0);

    let stereo = dir.path().join("stereo.wav");
    write_pcm(&stereo, 8000, 2, 16, &vals.iter().map(|&v| vec![v, v]).collect::<Vec<_>>());
    let s: Waveform<f64> = load_wav(&stereo, 8000.0).unwrap();
    assert_eq!(s.samples, w.samples);

    let eight = dir.path().join("eight.wav");
    write_pcm(&eight, 8000, 1, 8, &[vec![64], vec![-128], vec![0]]);
    let e: Waveform<f64> = load_wav(&eight, 8000.0).unwrap();
    assert_eq!(e.samples, vec![0.5, -1.0, 0.0]);
}

#[test]
fn unsupported_encodings_name_the_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("float.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    w.write_sample(0.25f32).unwrap();
    w.finalize().unwrap();
    let err = load_wav::<f64>(&path, 8000.0).unwrap_err();
    assert!(matches!(&err, DspError::UnsupportedFormat(tag) if tag.contains("float")), "{err}");

    let empty = dir.path().join("empty.wav");
    write_pcm(&empty, 8000, 1, 16, &[]);
    assert!(matches!(load_wav::<f64>(&empty, 8000.0), Err(DspError::Empty)));
}

#[test]
fn resampled_sine_keeps_its_stft_peak() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hi.wav");
    let src = tone(&[440.0], 1.0, 44100.0, 0.5);
    write_pcm(
        &path,
        44100,
        1,
        16,
        &src.samples.iter().map(|&v| vec![(v * 32767.0).round() as i32]).collect::<Vec<_>>(),
    );
    let w: Waveform<f64> = load_wav(&path, 8000.0).unwrap();
    assert_eq!(w.sample_rate, 8000.0);
    assert_eq!(w.len(), 8000);
    let p = compute_stft_power(&w, &CfpConfig::default()).unwrap();
    let t = p.shape()[1] / 2;
    let best = (0..p.shape()[0]).max_by(|&a, &b| p.get(&[a, t]).total_cmp(&p.get(&[b, t]))).unwrap();
    assert!(best.abs_diff(42) <= 1, "peak at bin {best}");
}

#[test]
fn written_wav_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.wav");
    let w = tone(&[200.0], 0.1, 8000.0, 0.5);
    write_wav(&path, &w).unwrap();
    let back: Waveform<f64> = load_wav(&path, 8000.0).unwrap();
    for (a, b) in back.samples.iter().zip(&w.samples) {
        assert!((a - b).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cfp_nonnegative_peak_one_and_amplitude_invariant(f in 70.0f64..900.0, amp in 0.05f64..0.4, len in 800usize..2400) {
        let cfg = CfpConfig::default();
        let secs = len as f64 / 8000.0;
        let a = compute_cfp(&tone(&[f], secs, 8000.0, amp), &cfg).unwrap();
        let b = compute_cfp(&tone(&[f], secs, 8000.0, 2.0 * amp), &cfg).unwrap();
        prop_assert_eq!(a.num_frames(), len.div_ceil(80));
        for c in 0..3 {
            let mut peak: f64 = 0.0;
            for t in 0..a.num_frames() {
                for bin in 0..360 {
                    let v = a.get(c, bin, t);
                    prop_assert!(v >= 0.0);
                    peak = peak.max(v);
                }
                prop_assert_eq!(a.argmax(c, t), b.argmax(c, t));
            }
            prop_assert!((peak - 1.0).abs() < 1e-12);
        }
    }
}
