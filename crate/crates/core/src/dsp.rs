//! Audio input and the three-channel CFP front end.
//!
//! Per frame the cascade is
//!
//! ```text
//! Z0 = max(|X|^2, 0)^g0                    power spectrum
//! Z1 = max(IDFT(Z0), 0)^g1, q < qc zeroed   generalized cepstrum
//! Z2 = max(DFT(Z1), 0)^g2, f < gc zeroed    generalized cepstrum of spectrum
//! ```
//!
//! after which Z0 and Z2 are read at log-spaced frequencies and Z1 at the
//! matching periods `1/f`. Frames are zero-padded to [`CfpConfig::fft_len`]
//! and the cepstrum is band-limited-interpolated by
//! [`CfpConfig::cepstrum_oversample`] before the linear-to-log reading.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CFP_MAGIC: &[u8; 9] = b"TONETCFP1";

#[derive(Debug, Error)]
pub enum DspError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("wav: {0}")]
    Wav(String),
    #[error("unsupported wav encoding: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    Empty,
    #[error("{samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("sample rate {expected} Hz expected, got {actual} Hz")]
    WrongRate { expected: f64, actual: f64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("invalid feature file: {0}")]
    BadFeatureFile(String),
}

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<S = f64> {
    pub samples: Vec<S>,
    pub sample_rate: f64,
}

impl<S: Scalar> Waveform<S> {
    pub fn new(samples: Vec<S>, sample_rate: f64) -> Self {
        assert!(sample_rate > 0.0, "sample rate must be positive");
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Windowed-sinc resampling (Blackman window, 32 zero crossings per side).
    pub fn resample(&self, target_rate: f64) -> Waveform<S> {
        if (self.sample_rate - target_rate).abs() < 1e-9 {
            return self.clone();
        }
        let ratio = target_rate / self.sample_rate;
        // cutoff as a fraction of the input Nyquist
        let cutoff = ratio.min(1.0) * 0.95;
        let half_width = 32.0 / cutoff;
        let out_len = ((self.samples.len() as f64) * ratio).round().max(1.0) as usize;
        let x: Vec<f64> = self.samples.iter().map(|s| s.to_f64_lossy()).collect();
        let n_in = x.len() as isize;
        let mut out = Vec::with_capacity(out_len);
        for n in 0..out_len {
            let center = n as f64 / ratio;
            let lo = (center - half_width).ceil().max(0.0) as isize;
            let hi = ((center + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                let d = j as f64 - center;
                let u = d / half_width;
                let window = 0.42 + 0.5 * (std::f64::consts::PI * u).cos() + 0.08 * (2.0 * std::f64::consts::PI * u).cos();
                acc += x[j as usize] * cutoff * sinc(cutoff * d) * window;
            }
            out.push(S::lit(acc));
        }
        Waveform::new(out, target_rate)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// How linear-grid values are read at log-spaced bin centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogMapping {
    /// Linear interpolation between the two neighbouring grid points.
    Triangular,
    /// Value of the nearest grid point.
    Nearest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfpConfig {
    pub sample_rate: f64,
    pub window: usize,
    pub hop: usize,
    pub bins_per_octave: usize,
    pub num_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub gammas: [f64; 3],
    /// Frequencies below this (Hz) are zeroed in Z2.
    pub freq_cutoff: f64,
    /// Quefrencies below this (seconds) are zeroed in Z1.
    pub quef_cutoff: f64,
    pub fft_len: usize,
    pub cepstrum_oversample: usize,
    pub mapping: LogMapping,
}

impl Default for CfpConfig {
    fn default() -> Self {
        CfpConfig {
            sample_rate: 8000.0,
            window: 768,
            hop: 80,
            bins_per_octave: 60,
            num_bins: 360,
            f_min: 32.5,
            f_max: 2050.0,
            gammas: [0.24, 0.6, 1.0],
            freq_cutoff: 32.5,
            quef_cutoff: 1.0 / 2050.0,
            fft_len: 8192,
            cepstrum_oversample: 8,
            mapping: LogMapping::Triangular,
        }
    }
}

impl CfpConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::BadConfig(m));
        if !(self.sample_rate > 0.0) {
            return bad(format!("sample_rate {} must be positive", self.sample_rate));
        }
        if self.hop == 0 || self.window <= self.hop {
            return bad(format!("window {} must exceed hop {}", self.window, self.hop));
        }
        if self.bins_per_octave == 0 || self.num_bins == 0 || !self.num_bins.is_multiple_of(self.bins_per_octave) {
            return bad(format!(
                "num_bins {} must be a positive multiple of bins_per_octave {}",
                self.num_bins, self.bins_per_octave
            ));
        }
        let top = self.f_min * 2f64.powf(self.num_bins as f64 / self.bins_per_octave as f64);
        if !(self.f_min > 0.0) || top < self.f_max {
            return bad(format!("f_min {} spans up to {top:.1} Hz, below f_max {}", self.f_min, self.f_max));
        }
        if self.fft_len < self.window || !self.fft_len.is_multiple_of(2) {
            return bad(format!("fft_len {} must be even and at least the window", self.fft_len));
        }
        if self.cepstrum_oversample == 0 {
            return bad("cepstrum_oversample must be at least 1".into());
        }
        if self.gammas.iter().any(|g| !(*g > 0.0)) {
            return bad(format!("gammas {:?} must be positive", self.gammas));
        }
        if 1.0 / self.f_min >= self.fft_len as f64 / self.sample_rate / 2.0 {
            return bad("fft_len too short for the lowest period".into());
        }
        Ok(())
    }

    /// Center frequency of log bin `b`.
    pub fn bin_center(&self, b: usize) -> f64 {
        self.f_min * 2f64.powf(b as f64 / self.bins_per_octave as f64)
    }

    /// Number of frames for `samples` input samples.
    pub fn num_frames(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }
}

/// Three-channel CFP block of shape `(3, F, T)`: power spectrum, generalized
/// cepstrum, generalized cepstrum of spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct CfpTensor<S: Scalar = f64> {
    tensor: Tensor<S>,
}

impl<S: Scalar> CfpTensor<S> {
    pub fn from_tensor(tensor: Tensor<S>) -> Result<Self, DspError> {
        if tensor.rank() != 3 || tensor.shape()[0] != 3 {
            return Err(DspError::BadFeatureFile(format!("expected shape (3, F, T), got {:?}", tensor.shape())));
        }
        Ok(CfpTensor { tensor })
    }

    pub fn num_bins(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn num_frames(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn get(&self, channel: usize, bin: usize, frame: usize) -> S {
        let (f, t) = (self.num_bins(), self.num_frames());
        self.tensor.data()[(channel * f + bin) * t + frame]
    }

    /// Bin with the largest value in one channel and frame; lowest bin on ties.
    pub fn argmax(&self, channel: usize, frame: usize) -> usize {
        let mut best = 0;
        for b in 1..self.num_bins() {
            if self.get(channel, b, frame) > self.get(channel, best, frame) {
                best = b;
            }
        }
        best
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.tensor
    }

    /// Frames `[start, start + len)`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> CfpTensor<S> {
        let (f, t) = (self.num_bins(), self.num_frames());
        let mut out = Tensor::zeros(vec![3, f, len]);
        let od = out.data_mut();
        for c in 0..3 {
            for b in 0..f {
                for i in 0..len {
                    if start + i < t {
                        od[(c * f + b) * len + i] = self.get(c, b, start + i);
                    }
                }
            }
        }
        CfpTensor { tensor: out }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DspError> {
        w.write_all(CFP_MAGIC)?;
        for &d in self.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.tensor.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DspError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DspError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let head = CFP_MAGIC.len();
        if bytes.len() < head + 24 || &bytes[..head] != CFP_MAGIC {
            return Err(DspError::BadFeatureFile("bad magic or header".into()));
        }
        let dim = |i: usize| u64::from_le_bytes(bytes[head + 8 * i..head + 8 * i + 8].try_into().unwrap()) as usize;
        let shape = vec![dim(0), dim(1), dim(2)];
        let n: usize = shape.iter().product();
        let body = &bytes[head + 24..];
        if body.len() != n * 8 {
            return Err(DspError::BadFeatureFile(format!(
                "shape {shape:?} needs {} bytes of values, found {}",
                n * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DspError::BadFeatureFile(e.to_string()))?;
        Self::from_tensor(t)
    }

    pub fn load(path: &Path) -> Result<Self, DspError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

// ── wav i/o ─────────────────────────────────────────────────────────

/// Reads the WAVE `fmt ` format code, for error messages.
fn wave_format_tag(path: &Path) -> Option<u16> {
    let bytes = std::fs::read(path).ok()?;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().ok()?) as usize;
        if id == b"fmt " && pos + 10 <= bytes.len() {
            return Some(u16::from_le_bytes(bytes[pos + 8..pos + 10].try_into().ok()?));
        }
        pos += 8 + size + (size & 1);
    }
    None
}

/// Loads PCM WAV (8 or 16 bit, any channel count), mixes to mono and
/// resamples to `target_rate`.
pub fn load_wav<S: Scalar>(path: &Path, target_rate: f64) -> Result<Waveform<S>, DspError> {
    let reader = match hound::WavReader::open(path) {
        Ok(r) => r,
        Err(hound::Error::IoError(e)) => return Err(DspError::Io(e)),
        Err(e) => {
            let tag = wave_format_tag(path).map(|t| format!("format tag 0x{t:04x}"));
            return Err(DspError::UnsupportedFormat(tag.unwrap_or_else(|| e.to_string())));
        }
    };
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let scale = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => 32768.0,
        (hound::SampleFormat::Int, 8) => 128.0,
        (fmt, bits) => {
            let kind = match fmt {
                hound::SampleFormat::Int => "pcm",
                hound::SampleFormat::Float => "float",
            };
            return Err(DspError::UnsupportedFormat(format!("{kind} {bits}-bit")));
        }
    };
    let raw: Vec<i32> = reader
        .into_samples::<i32>()
        .collect::<Result<_, _>>()
        .map_err(|e| DspError::Wav(e.to_string()))?;
    if raw.len() < channels {
        return Err(DspError::Empty);
    }
    let mono: Vec<S> = raw
        .chunks_exact(channels)
        .map(|fr| S::lit(fr.iter().map(|&v| v as f64).sum::<f64>() / channels as f64 / scale))
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate as f64);
    Ok(wave.resample(target_rate))
}

/// Writes 16-bit mono PCM, clipping to [-1, 1].
pub fn write_wav<S: Scalar>(path: &Path, wave: &Waveform<S>) -> Result<(), DspError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate.round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| DspError::Wav(e.to_string()))?;
    for s in &wave.samples {
        let v = (s.to_f64_lossy().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| DspError::Wav(e.to_string()))?;
    }
    w.finalize().map_err(|e| DspError::Wav(e.to_string()))
}

// ── framing ─────────────────────────────────────────────────────────

fn check_wave<S: Scalar>(wave: &Waveform<S>, cfg: &CfpConfig) -> Result<(), DspError> {
    cfg.validate()?;
    if (wave.sample_rate - cfg.sample_rate).abs() > 1e-6 {
        return Err(DspError::WrongRate {
            expected: cfg.sample_rate,
            actual: wave.sample_rate,
        });
    }
    if wave.is_empty() {
        return Err(DspError::Empty);
    }
    if wave.len() < cfg.window {
        return Err(DspError::TooShort {
            samples: wave.len(),
            window: cfg.window,
        });
    }
    Ok(())
}

/// Periodic Hann window.
pub fn hann<S: Scalar>(n: usize) -> Vec<S> {
    (0..n)
        .map(|i| S::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Calls `f(t, frame)` with each windowed, centered frame.
fn for_each_frame<S: Scalar>(wave: &Waveform<S>, cfg: &CfpConfig, mut f: impl FnMut(usize, &[S])) {
    let pad = cfg.window / 2;
    let x = &wave.samples;
    let len = x.len() as isize;
    let at = |i: isize| -> S {
        let mut j = i - pad as isize;
        if j < 0 {
            j = -j;
        }
        if j >= len {
            j = 2 * (len - 1) - j;
        }
        x[j as usize]
    };
    let win = hann::<S>(cfg.window);
    let mut frame = vec![S::zero(); cfg.window];
    for t in 0..cfg.num_frames(x.len()) {
        let start = (t * cfg.hop) as isize;
        for (i, (slot, &w)) in frame.iter_mut().zip(&win).enumerate() {
            *slot = at(start + i as isize) * w;
        }
        f(t, &frame);
    }
}

/// `|STFT|^2` on the native `window`-point grid, shape `(window/2 + 1, T)`.
pub fn compute_stft_power<S: Scalar>(wave: &Waveform<S>, cfg: &CfpConfig) -> Result<Tensor<S>, DspError> {
    check_wave(wave, cfg)?;
    let n = cfg.window;
    let bins = n / 2 + 1;
    let frames = cfg.num_frames(wave.len());
    let fft = FftPlanner::<S>::new().plan_fft_forward(n);
    let mut out = Tensor::zeros(vec![bins, frames]);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
    for_each_frame(wave, cfg, |t, frame| {
        for (b, &v) in buf.iter_mut().zip(frame) {
            *b = Complex::new(v, S::zero());
        }
        fft.process(&mut buf);
        let od = out.data_mut();
        for (k, c) in buf.iter().take(bins).enumerate() {
            od[k * frames + t] = c.norm_sqr();
        }
    });
    Ok(out)
}


fn read_grid<S: Scalar>(grid: &[S], pos: f64, mapping: LogMapping) -> S {
    let last = grid.len() - 1;
    match mapping {
        LogMapping::Nearest => grid[(pos.round() as usize).min(last)],
        LogMapping::Triangular => {
            let i = (pos.floor() as usize).min(last);
            if i == last {
                return grid[last];
            }
            let frac = S::lit(pos - i as f64);
            grid[i] * (S::one() - frac) + grid[i + 1] * frac
        }
    }
}

struct CfpPlan<S: Scalar> {
    forward: Arc<dyn Fft<S>>,
    inverse_os: Arc<dyn Fft<S>>,
    /// Fractional index of each log bin on the zero-padded spectrum grid.
    spec_pos: Vec<f64>,
    /// Fractional index of each log bin's period on the oversampled cepstrum grid.
    ceps_pos: Vec<f64>,
    quef_cut: usize,
    freq_cut: usize,
}

impl<S: Scalar> CfpPlan<S> {
    fn new(cfg: &CfpConfig) -> Self {
        let n = cfg.fft_len;
        let m = cfg.cepstrum_oversample;
        let mut planner = FftPlanner::<S>::new();
        let centers: Vec<f64> = (0..cfg.num_bins).map(|b| cfg.bin_center(b)).collect();
        CfpPlan {
            forward: planner.plan_fft_forward(n),
            inverse_os: planner.plan_fft_inverse(n * m),
            spec_pos: centers.iter().map(|f| f * n as f64 / cfg.sample_rate).collect(),
            ceps_pos: centers.iter().map(|f| cfg.sample_rate * m as f64 / f).collect(),
            quef_cut: (cfg.quef_cutoff * cfg.sample_rate * m as f64).ceil() as usize,
            freq_cut: (cfg.freq_cutoff * n as f64 / cfg.sample_rate).ceil() as usize,
        }
    }
}

/// Rectify and raise to `gamma`.
#[inline]
fn rect_pow<S: Scalar>(v: S, gamma: S) -> S {
    if v > S::zero() {
        v.powf(gamma)
    } else {
        S::zero()
    }
}

/// Computes the `(3, F, T)` CFP block, each channel scaled to peak 1.
pub fn compute_cfp<S: Scalar>(wave: &Waveform<S>, cfg: &CfpConfig) -> Result<CfpTensor<S>, DspError> {
    check_wave(wave, cfg)?;
    let plan = CfpPlan::<S>::new(cfg);
    let n = cfg.fft_len;
    let m = cfg.cepstrum_oversample;
    let nm = n * m;
    let f = cfg.num_bins;
    let frames = cfg.num_frames(wave.len());
    let [g0, g1, g2] = cfg.gammas.map(S::lit);
    let inv_n = S::one() / S::from_usize_lossy(n);
    let zero = Complex::new(S::zero(), S::zero());

    let mut out = Tensor::zeros(vec![3, f, frames]);
    let mut spec = vec![zero; n];
    let mut ceps = vec![zero; nm];
    let mut z0 = vec![S::zero(); n];
    let mut z1 = vec![S::zero(); nm];
    let mut z2 = vec![S::zero(); n / 2 + 1];

    for_each_frame(wave, cfg, |t, frame| {
        spec.fill(zero);
        for (s, &v) in spec.iter_mut().zip(frame) {
            s.re = v;
        }
        plan.forward.process(&mut spec);
        for (z, c) in z0.iter_mut().zip(&spec) {
            *z = rect_pow(c.norm_sqr(), g0);
        }

        // band-limited interpolation of the cepstrum: zero-insert around Nyquist
        ceps.fill(zero);
        let half = n / 2;
        for k in 0..half {
            ceps[k].re = z0[k];
        }
        for k in half + 1..n {
            ceps[nm - n + k].re = z0[k];
        }
        if m == 1 {
            ceps[half].re = z0[half];
        } else {
            let h = z0[half] * S::lit(0.5);
            ceps[half].re = h;
            ceps[nm - half].re = h;
        }
        plan.inverse_os.process(&mut ceps);
        for (j, (z, c)) in z1.iter_mut().zip(&ceps).enumerate() {
            let high_passed = j < plan.quef_cut || j > nm - plan.quef_cut;
            *z = if high_passed { S::zero() } else { rect_pow(c.re * inv_n, g1) };
        }

        for (q, s) in spec.iter_mut().enumerate() {
            *s = Complex::new(z1[q * m], S::zero());
        }
        plan.forward.process(&mut spec);
        for (k, z) in z2.iter_mut().enumerate() {
            *z = if k < plan.freq_cut { S::zero() } else { rect_pow(spec[k].re, g2) };
        }

        let od = out.data_mut();
        for b in 0..f {
            od[b * frames + t] = read_grid(&z0[..=half], plan.spec_pos[b], cfg.mapping);
            od[(f + b) * frames + t] = read_grid(&z1, plan.ceps_pos[b], cfg.mapping);
            od[(2 * f + b) * frames + t] = read_grid(&z2, plan.spec_pos[b], cfg.mapping);
        }
    });

    let plane = f * frames;
    for ch in out.data_mut().chunks_exact_mut(plane) {
        let peak = ch.iter().copied().fold(S::zero(), S::max);
        if peak > S::zero() {
            for v in ch.iter_mut() {
                *v = *v / peak;
            }
        }
    }
    Ok(CfpTensor { tensor: out })
}
