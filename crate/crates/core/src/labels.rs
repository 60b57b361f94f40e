//! Pitch contours, bin and tone/octave labels, and one-hot target maps.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const F_MIN: f64 = 32.5;
pub const BINS_PER_OCTAVE: usize = 60;
pub const NUM_BINS: usize = 360;
/// 12 pitch classes plus non-melody.
pub const NUM_TONES: usize = 13;
/// 6 octaves plus non-melody.
pub const NUM_OCTAVES: usize = 7;
pub const FRAME_SECONDS: f64 = 0.01;

const GRID_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("negative frequency {0} Hz")]
    Negative(f64),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("{freq} Hz is outside octaves 1-6 (octave number {octave})")]
    OctaveOutOfRange { freq: f64, octave: i64 },
    #[error("frame {index}: time step {delta} s is off the 10 ms grid")]
    Misaligned { index: usize, delta: f64 },
    #[error("contour has {frames} frames, {needed} needed")]
    TooShort { frames: usize, needed: usize },
    #[error("times must be strictly increasing (frame {0})")]
    NotIncreasing(usize),
    #[error("times and freqs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Time-stamped F0 sequence; 0 Hz marks unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    times: Vec<f64>,
    freqs: Vec<f64>,
}

impl PitchContour {
    pub fn new(times: Vec<f64>, freqs: Vec<f64>) -> Result<Self, LabelError> {
        if times.len() != freqs.len() {
            return Err(LabelError::LengthMismatch(times.len(), freqs.len()));
        }
        for (i, (&t, &f)) in times.iter().zip(&freqs).enumerate() {
            if !t.is_finite() {
                return Err(LabelError::NonFinite(t));
            }
            if !f.is_finite() {
                return Err(LabelError::NonFinite(f));
            }
            if f < 0.0 {
                return Err(LabelError::Negative(f));
            }
            if i > 0 && t <= times[i - 1] {
                return Err(LabelError::NotIncreasing(i));
            }
        }
        Ok(PitchContour { times, freqs })
    }

    /// Contour on the 10 ms grid starting at 0 s.
    pub fn on_grid(freqs: Vec<f64>) -> Result<Self, LabelError> {
        let times = (0..freqs.len()).map(|i| i as f64 / 100.0).collect();
        Self::new(times, freqs)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.freqs.is_empty() {
            return 0.0;
        }
        self.freqs.iter().filter(|&&f| f > 0.0).count() as f64 / self.freqs.len() as f64
    }

    pub fn parse_csv(text: &str) -> Result<Self, LabelError> {
        let mut times = Vec::new();
        let mut freqs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| LabelError::Parse { line: i + 1, message };
            let mut parts = line.split(',');
            let (Some(t), Some(f), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(format!("expected `time,frequency`, got `{line}`")));
            };
            let t: f64 = t.trim().parse().map_err(|e| parse_err(format!("time: {e}")))?;
            let f: f64 = f.trim().parse().map_err(|e| parse_err(format!("frequency: {e}")))?;
            times.push(t);
            freqs.push(f);
        }
        Self::new(times, freqs)
    }

    /// `time,frequency` lines; values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.len() * 16);
        for (t, f) in self.times.iter().zip(&self.freqs) {
            let _ = writeln!(s, "{t},{f}");
        }
        s
    }

    pub fn read_csv(path: &Path) -> Result<Self, LabelError> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), LabelError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Pitch bin of `f`, or `None` for unvoiced input. Y_final row is `bin + 1`.
pub fn hz_to_bin(f: f64) -> Result<Option<usize>, LabelError> {
    if !f.is_finite() {
        return Err(LabelError::NonFinite(f));
    }
    if f < 0.0 {
        return Err(LabelError::Negative(f));
    }
    if f == 0.0 {
        return Ok(None);
    }
    let b = round_half_up(BINS_PER_OCTAVE as f64 * (f / F_MIN).log2());
    Ok(Some(b.clamp(0, NUM_BINS as i64 - 1) as usize))
}

/// Center frequency of pitch bin `b`.
pub fn bin_to_hz(b: usize) -> f64 {
    F_MIN * 2f64.powf(b as f64 / BINS_PER_OCTAVE as f64)
}

/// MIDI note number, rounded half up.
pub fn hz_to_midi(f: f64) -> i64 {
    round_half_up(69.0 + 12.0 * (f / 440.0).log2())
}

/// Octave number in scientific pitch notation (C4 = middle C); may be outside 1-6.
pub fn octave_number(f: f64) -> i64 {
    hz_to_midi(f).div_euclid(12) - 1
}

/// `(pitch class, octave index)`; unvoiced is `(12, 6)`.
pub fn hz_to_tone_octave(f: f64) -> Result<(usize, usize), LabelError> {
    if !f.is_finite() {
        return Err(LabelError::NonFinite(f));
    }
    if f < 0.0 {
        return Err(LabelError::Negative(f));
    }
    if f == 0.0 {
        return Ok((NUM_TONES - 1, NUM_OCTAVES - 1));
    }
    let m = hz_to_midi(f);
    let octave = m.div_euclid(12) - 1;
    if !(1..=6).contains(&octave) {
        return Err(LabelError::OctaveOutOfRange { freq: f, octave });
    }
    Ok((m.rem_euclid(12) as usize, (octave - 1) as usize))
}

/// One-hot targets, each `(rows, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMaps {
    /// Row 0 is non-melody; row `b + 1` is pitch bin `b`.
    pub final_map: Tensor<f64>,
    pub tone: Tensor<f64>,
    pub octave: Tensor<f64>,
}

impl LabelMaps {
    pub fn num_frames(&self) -> usize {
        self.final_map.shape()[1]
    }

    pub fn cast<S: Scalar>(&self) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        (self.final_map.cast(), self.tone.cast(), self.octave.cast())
    }
}

pub fn check_grid(contour: &PitchContour) -> Result<(), LabelError> {
    for (i, w) in contour.times().windows(2).enumerate() {
        let delta = w[1] - w[0];
        if (delta - FRAME_SECONDS).abs() > GRID_TOLERANCE {
            return Err(LabelError::Misaligned { index: i + 1, delta });
        }
    }
    Ok(())
}

/// Builds one-hot maps for the first `frames` frames of `contour`.
pub fn contour_to_label_maps(contour: &PitchContour, frames: usize) -> Result<LabelMaps, LabelError> {
    check_grid(contour)?;
    if contour.len() < frames {
        return Err(LabelError::TooShort {
            frames: contour.len(),
            needed: frames,
        });
    }
    let mut final_map = Tensor::zeros(vec![NUM_BINS + 1, frames]);
    let mut tone = Tensor::zeros(vec![NUM_TONES, frames]);
    let mut octave = Tensor::zeros(vec![NUM_OCTAVES, frames]);
    for (t, &f) in contour.freqs().iter().take(frames).enumerate() {
        let row = match hz_to_bin(f)? {
            Some(b) => b + 1,
            None => 0,
        };
        let (pc, oc) = hz_to_tone_octave(f)?;
        final_map.set(&[row, t], 1.0);
        tone.set(&[pc, t], 1.0);
        octave.set(&[oc, t], 1.0);
    }
    Ok(LabelMaps {
        final_map,
        tone,
        octave,
    })
}

/// Per-frame argmax decoding of an `(F+1, T)` map; ties go to the lowest row.
pub fn salience_to_contour<S: Scalar>(final_map: &Tensor<S>) -> PitchContour {
    assert_eq!(final_map.rank(), 2, "salience map must be (F+1, T)");
    let (rows, frames) = (final_map.shape()[0], final_map.shape()[1]);
    let d = final_map.data();
    let freqs = (0..frames)
        .map(|t| {
            let mut best = 0;
            for r in 1..rows {
                if d[r * frames + t] > d[best * frames + t] {
                    best = r;
                }
            }
            if best == 0 {
                0.0
            } else {
                bin_to_hz(best - 1)
            }
        })
        .collect();
    PitchContour::on_grid(freqs).expect("decoded contour is valid")
}
