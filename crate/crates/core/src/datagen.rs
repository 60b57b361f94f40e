//! Synthetic singing-like clips with exact F0 ground truth.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::{write_wav, DspError, Waveform};
use crate::labels::{LabelError, PitchContour, FRAME_SECONDS};

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("cannot write corpus at {path}: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
}

/// A note event; `midi == None` is a rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Note {
    pub start: f64,
    pub duration: f64,
    pub midi: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub duration: f64,
    pub sample_rate: f64,
    /// Inclusive MIDI range of note pitches (C2..B5 by default).
    pub midi_range: (u8, u8),
    pub note_duration: (f64, f64),
    pub rest_probability: f64,
    /// Unvoiced tail at the end of each sung note.
    pub note_gap: f64,
    pub vibrato_rate: (f64, f64),
    pub vibrato_depth_cents: (f64, f64),
    pub harmonics: usize,
    pub accompaniment: bool,
    pub pad_db: f64,
    pub noise_db: f64,
    pub peak: f64,
    /// Overrides the random note sequence when set.
    pub notes: Option<Vec<Note>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            duration: 4.0,
            sample_rate: 8000.0,
            midi_range: (36, 83),
            note_duration: (0.2, 1.0),
            rest_probability: 0.1,
            note_gap: 0.05,
            vibrato_rate: (4.0, 7.0),
            vibrato_depth_cents: (0.0, 30.0),
            harmonics: 8,
            accompaniment: true,
            pad_db: -10.0,
            noise_db: -25.0,
            peak: 0.9,
            notes: None,
        }
    }
}

impl SynthSpec {
    /// Clean voice: no accompaniment.
    pub fn clean(seed: u64, duration: f64) -> Self {
        SynthSpec {
            seed,
            duration,
            accompaniment: false,
            ..Default::default()
        }
    }

    /// One steady note over the whole clip, no vibrato, no accompaniment.
    pub fn single_note(midi: u8, duration: f64) -> Self {
        SynthSpec {
            duration,
            accompaniment: false,
            vibrato_depth_cents: (0.0, 0.0),
            note_gap: 0.0,
            notes: Some(vec![Note {
                start: 0.0,
                duration,
                midi: Some(midi),
            }]),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidSpec(m.to_string()));
        if !(self.duration.is_finite() && self.duration >= FRAME_SECONDS) {
            return bad("duration must be at least one frame");
        }
        if !(self.sample_rate > 0.0) {
            return bad("sample rate must be positive");
        }
        let (lo, hi) = self.midi_range;
        if lo > hi || lo < 36 || hi > 83 {
            return bad("midi range must lie within 36..=83");
        }
        let (dmin, dmax) = self.note_duration;
        if !(dmin > 0.0 && dmin <= dmax) {
            return bad("note durations must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.rest_probability) {
            return bad("rest probability must be in [0, 1]");
        }
        if !(self.note_gap >= 0.0 && self.note_gap < dmin) {
            return bad("note gap must be shorter than the shortest note");
        }
        if self.vibrato_rate.0 > self.vibrato_rate.1 || self.vibrato_depth_cents.0 > self.vibrato_depth_cents.1 {
            return bad("vibrato ranges must be ordered");
        }
        if self.vibrato_depth_cents.0 < 0.0 || self.vibrato_rate.0 < 0.0 {
            return bad("vibrato ranges must be nonnegative");
        }
        if self.harmonics == 0 {
            return bad("at least one harmonic");
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) {
            return bad("peak must be in (0, 1]");
        }
        if let Some(notes) = &self.notes {
            for n in notes {
                if n.midi.is_some_and(|m| !(lo..=hi).contains(&m)) {
                    return bad("fixed note outside the midi range");
                }
                if !(n.duration > 0.0 && n.start >= 0.0) {
                    return bad("fixed notes need positive durations");
                }
            }
        }
        Ok(())
    }
}

fn midi_to_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_notes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Note> {
    let mut notes = Vec::new();
    let mut t = 0.0;
    while t < spec.duration {
        let d = uniform(rng, spec.note_duration).min(spec.duration - t);
        let midi = if rng.random_bool(spec.rest_probability) {
            None
        } else {
            Some(rng.random_range(spec.midi_range.0..=spec.midi_range.1))
        };
        notes.push(Note { start: t, duration: d, midi });
        t += d;
    }
    notes
}

struct Sung {
    start: f64,
    end: f64,
    f0: f64,
    rate: f64,
    depth: f64,
}

impl Sung {
    fn pitch_at(&self, t: f64) -> f64 {
        let dev = self.depth * (2.0 * PI * self.rate * (t - self.start)).sin();
        self.f0 * 2f64.powf(dev / 1200.0)
    }
}

fn sung_notes(spec: &SynthSpec, notes: &[Note], rng: &mut ChaCha8Rng) -> Vec<Sung> {
    notes
        .iter()
        .filter_map(|n| {
            let rate = uniform(rng, spec.vibrato_rate);
            let depth = uniform(rng, spec.vibrato_depth_cents);
            let m = n.midi?;
            let end = n.start + n.duration - spec.note_gap;
            (end > n.start).then(|| Sung {
                start: n.start,
                end,
                f0: midi_to_hz(m as f64),
                rate,
                depth,
            })
        })
        .collect()
}

fn active(sung: &[Sung], t: f64) -> Option<&Sung> {
    sung.iter().find(|s| t >= s.start && t < s.end)
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn voice(spec: &SynthSpec, sung: &[Sung], n: usize) -> Vec<f64> {
    let sr = spec.sample_rate;
    let ramp = 0.01;
    let mut phase = 0.0;
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let Some(s) = active(sung, t) else { continue };
        let f = s.pitch_at(t);
        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        let env = ((t - s.start) / ramp).min((s.end - t) / ramp).clamp(0.0, 1.0);
        let mut acc = 0.0;
        for k in 1..=spec.harmonics {
            if k as f64 * f >= 0.5 * sr {
                break;
            }
            acc += (k as f64 * phase).sin() / k as f64;
        }
        *o = env * acc;
    }
    out
}

/// Sustained triads, one chord every two seconds.
fn pad(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = spec.sample_rate;
    let chord_len = (2.0 * sr) as usize;
    let mut out = vec![0.0; n];
    for (c, chunk) in out.chunks_mut(chord_len.max(1)).enumerate() {
        let root = rng.random_range(48u8..60) as f64;
        let third = if rng.random_bool(0.5) { 4.0 } else { 3.0 };
        let freqs = [root, root + third, root + 7.0].map(midi_to_hz);
        let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let len = chunk.len();
        for (i, o) in chunk.iter_mut().enumerate() {
            let t = (c * chord_len + i) as f64 / sr;
            let edge = ((i as f64 / sr) / 0.05).min(((len - i) as f64 / sr) / 0.05).min(1.0);
            let mut acc = 0.0;
            for (f, p) in freqs.iter().zip(phases) {
                for k in 1..=3 {
                    if k as f64 * f < 0.5 * sr {
                        acc += (2.0 * PI * k as f64 * f * t + p).sin() / (k * k) as f64;
                    }
                }
            }
            *o = edge * acc;
        }
    }
    out
}

/// Pink noise from white noise with a three-pole filter.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w: f64 = rng.random_range(-1.0..1.0);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn add_scaled(dst: &mut [f64], src: &[f64], target_rms: f64) {
    let r = rms(src);
    if r == 0.0 {
        return;
    }
    let g = target_rms / r;
    for (d, s) in dst.iter_mut().zip(src) {
        *d += g * s;
    }
}

/// Renders a clip and its 10 ms ground-truth contour.
pub fn synth_clip(spec: &SynthSpec) -> Result<(Waveform<f64>, PitchContour), DatagenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let notes = match &spec.notes {
        Some(n) => n.clone(),
        None => draw_notes(spec, &mut rng),
    };
    let sung = sung_notes(spec, &notes, &mut rng);
    let n = (spec.duration * spec.sample_rate).round() as usize;
    let mut mix = voice(spec, &sung, n);

    if spec.accompaniment {
        let voiced: Vec<f64> = mix.iter().copied().filter(|v| *v != 0.0).collect();
        // nominal level for silent-voice clips: a unit 1/k harmonic stack
        let reference = if voiced.is_empty() {
            ((1..=spec.harmonics).map(|k| 1.0 / (k * k) as f64).sum::<f64>() / 2.0).sqrt()
        } else {
            rms(&voiced)
        };
        let pad = pad(spec, n, &mut rng);
        let noise = pink_noise(n, &mut rng);
        let db = |d: f64| 10f64.powf(d / 20.0);
        add_scaled(&mut mix, &pad, reference * db(spec.pad_db));
        add_scaled(&mut mix, &noise, reference * db(spec.noise_db));
    }

    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = spec.peak / peak;
        mix.iter_mut().for_each(|v| *v *= g);
    }

    let frames = n.div_ceil((spec.sample_rate * FRAME_SECONDS).round() as usize);
    let freqs = (0..frames)
        .map(|i| {
            let t = i as f64 * FRAME_SECONDS;
            active(&sung, t).map_or(0.0, |s| s.pitch_at(t))
        })
        .collect();
    let contour = PitchContour::on_grid(freqs)?;
    Ok((Waveform::new(mix, spec.sample_rate), contour))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    /// `(wav, csv)` paths relative to the corpus directory.
    pub clips: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed={}\n", self.seed);
        for (w, c) in &self.clips {
            let _ = writeln!(s, "{},{}", w.display(), c.display());
        }
        s
    }

    pub fn read(dir: &Path) -> Result<Manifest, DatagenError> {
        let path = dir.join(MANIFEST_NAME);
        let bad = |message: String| DatagenError::BadManifest {
            path: path.clone(),
            message,
        };
        let text = std::fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
        let mut seed = None;
        let mut clips = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed=") {
                    seed = Some(v.parse().map_err(|e| bad(format!("seed: {e}")))?);
                }
                continue;
            }
            let (w, c) = line.split_once(',').ok_or_else(|| bad(format!("expected `wav,csv`, got `{line}`")))?;
            clips.push((PathBuf::from(w.trim()), PathBuf::from(c.trim())));
        }
        Ok(Manifest {
            seed: seed.unwrap_or(0),
            clips,
        })
    }

    /// Absolute `(wav, csv)` pairs under `dir`.
    pub fn resolve(&self, dir: &Path) -> Vec<(PathBuf, PathBuf)> {
        self.clips.iter().map(|(w, c)| (dir.join(w), dir.join(c))).collect()
    }
}

/// Seed of clip `index` in a corpus generated from `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// Writes `n_clips` wav/csv pairs plus a manifest into `dir`.
pub fn make_corpus(dir: &Path, seed: u64, n_clips: usize, template: &SynthSpec) -> Result<Manifest, DatagenError> {
    if n_clips == 0 {
        return Err(DatagenError::InvalidSpec("corpus needs at least one clip".into()));
    }
    template.validate()?;
    let unwritable = |source| DatagenError::Unwritable {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(unwritable)?;
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let spec = SynthSpec {
            seed: clip_seed(seed, i),
            ..template.clone()
        };
        let (wave, contour) = synth_clip(&spec)?;
        let wav = PathBuf::from(format!("clip_{i:04}.wav"));
        let csv = PathBuf::from(format!("clip_{i:04}.csv"));
        write_wav(&dir.join(&wav), &wave)?;
        contour.write_csv(&dir.join(&csv))?;
        clips.push((wav, csv));
    }
    let manifest = Manifest { seed, clips };
    std::fs::write(dir.join(MANIFEST_NAME), manifest.to_text()).map_err(unwritable)?;
    Ok(manifest)
}
