//! Melody metrics: voicing recall / false alarm, raw pitch and chroma
//! accuracy, raw octave accuracy and overall accuracy.

use thiserror::Error;

use crate::labels::PitchContour;

pub const DEFAULT_TOLERANCE_CENTS: f64 = 50.0;

const GRID_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("estimate contour is empty")]
    EmptyEstimate,
    #[error("reference contour is empty")]
    EmptyReference,
    #[error("estimate and reference grids differ (frame {index})")]
    GridMismatch { index: usize },
    #[error("estimate has {est} frames, reference has {reference}")]
    LengthMismatch { est: usize, reference: usize },
}

/// Estimate on the reference grid. `pitch` is defined on every frame
/// (unvoiced frames hold the frozen last voiced pitch) while `voiced` keeps
/// the estimator's voicing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedEstimate {
    pub times: Vec<f64>,
    pub pitch: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl AlignedEstimate {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Pitch of every estimate frame, with unvoiced frames filled from the last
/// voiced frame (or the first voiced frame before any voicing).
fn frozen_pitch(freqs: &[f64]) -> Vec<f64> {
    let first = freqs.iter().copied().find(|&f| f > 0.0).unwrap_or(0.0);
    let mut last = first;
    freqs
        .iter()
        .map(|&f| {
            if f > 0.0 {
                last = f;
            }
            last
        })
        .collect()
}

/// Nearest-neighbour alignment of `est` onto `ref_times`; ties pick the
/// earlier estimate frame.
pub fn resample_contour(est: &PitchContour, ref_times: &[f64]) -> Result<AlignedEstimate, EvalError> {
    if est.is_empty() {
        return Err(EvalError::EmptyEstimate);
    }
    let filled = frozen_pitch(est.freqs());
    let et = est.times();
    let mut pitch = Vec::with_capacity(ref_times.len());
    let mut voiced = Vec::with_capacity(ref_times.len());
    let mut j = 0;
    for &t in ref_times {
        while j + 1 < et.len() && (et[j + 1] - t).abs() < (et[j] - t).abs() {
            j += 1;
        }
        // ref times may go backwards relative to j only if unsorted; guard anyway
        while j > 0 && (et[j - 1] - t).abs() <= (et[j] - t).abs() {
            j -= 1;
        }
        pitch.push(filled[j]);
        voiced.push(est.freqs()[j] > 0.0);
    }
    Ok(AlignedEstimate {
        times: ref_times.to_vec(),
        pitch,
        voiced,
    })
}

/// Which denominators were empty; the matching metrics are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmptyDenominators {
    /// No reference-voiced frames: VR, RPA, RCA, ROA.
    pub ref_voiced: bool,
    /// No reference-unvoiced frames: VFA.
    pub ref_unvoiced: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub vr: f64,
    pub vfa: f64,
    pub rpa: f64,
    pub rca: f64,
    pub roa: f64,
    pub oa: f64,
    pub ref_voiced: usize,
    pub ref_unvoiced: usize,
    pub total: usize,
    pub empty: EmptyDenominators,
}

impl EvalResult {
    pub const HEADER: [&'static str; 6] = ["VR", "VFA", "RPA", "RCA", "ROA", "OA"];

    pub fn values(&self) -> [f64; 6] {
        [self.vr, self.vfa, self.rpa, self.rca, self.roa, self.oa]
    }

    /// Two-line whitespace table, fixed column order.
    pub fn table(&self) -> String {
        let head: Vec<String> = Self::HEADER.iter().map(|h| format!("{h:>7}")).collect();
        let vals: Vec<String> = self.values().iter().map(|v| format!("{v:>7.4}")).collect();
        format!("{}\n{}\n", head.join(" "), vals.join(" "))
    }
}

pub fn cents(est: f64, reference: f64) -> f64 {
    1200.0 * (est / reference).log2()
}

/// Folds cents into (-600, 600].
pub fn fold_cents(c: f64) -> f64 {
    let r = c.rem_euclid(1200.0);
    if r > 600.0 {
        r - 1200.0
    } else {
        r
    }
}

/// `floor(round(midi) / 12) - 1`, the scientific-pitch octave of `f`.
pub fn octave_index(f: f64) -> i64 {
    crate::labels::octave_number(f)
}

fn check_grid(est: &AlignedEstimate, reference: &PitchContour) -> Result<(), EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if est.len() != reference.len() {
        return Err(EvalError::LengthMismatch {
            est: est.len(),
            reference: reference.len(),
        });
    }
    if let Some(index) = est
        .times
        .iter()
        .zip(reference.times())
        .position(|(a, b)| (a - b).abs() > GRID_EPS)
    {
        return Err(EvalError::GridMismatch { index });
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores an aligned estimate against a reference on the same grid.
pub fn evaluate_pair(est: &AlignedEstimate, reference: &PitchContour, tolerance_cents: f64) -> Result<EvalResult, EvalError> {
    check_grid(est, reference)?;
    let (mut rv, mut ru) = (0, 0);
    let (mut hit_v, mut false_alarm) = (0, 0);
    let (mut pitch_ok, mut chroma_ok, mut octave_ok) = (0, 0, 0);
    let mut overall = 0;
    for ((&p, &v), &r) in est.pitch.iter().zip(&est.voiced).zip(reference.freqs()) {
        if r > 0.0 {
            rv += 1;
            if v {
                hit_v += 1;
            }
            if p > 0.0 {
                let c = cents(p, r);
                let pitch_hit = c.abs() <= tolerance_cents;
                if pitch_hit {
                    pitch_ok += 1;
                    if v {
                        overall += 1;
                    }
                }
                if fold_cents(c).abs() <= tolerance_cents {
                    chroma_ok += 1;
                }
                if octave_index(p) == octave_index(r) {
                    octave_ok += 1;
                }
            }
        } else {
            ru += 1;
            if v {
                false_alarm += 1;
            } else {
                overall += 1;
            }
        }
    }
    Ok(EvalResult {
        vr: ratio(hit_v, rv),
        vfa: ratio(false_alarm, ru),
        rpa: ratio(pitch_ok, rv),
        rca: ratio(chroma_ok, rv),
        roa: ratio(octave_ok, rv),
        oa: ratio(overall, rv + ru),
        ref_voiced: rv,
        ref_unvoiced: ru,
        total: rv + ru,
        empty: EmptyDenominators {
            ref_voiced: rv == 0,
            ref_unvoiced: ru == 0,
        },
    })
}

/// Raw octave accuracy alone.
pub fn roa(est: &AlignedEstimate, reference: &PitchContour) -> Result<f64, EvalError> {
    Ok(evaluate_pair(est, reference, DEFAULT_TOLERANCE_CENTS)?.roa)
}

/// Resamples `est` onto the reference grid, then scores it.
pub fn evaluate_contours(est: &PitchContour, reference: &PitchContour, tolerance_cents: f64) -> Result<EvalResult, EvalError> {
    let aligned = resample_contour(est, reference.times())?;
    evaluate_pair(&aligned, reference, tolerance_cents)
}

/// Per-clip mean. Each metric averages only over clips where it is
/// defined; counts are summed.
pub fn mean_results(results: &[EvalResult]) -> EvalResult {
    let mean = |get: fn(&EvalResult) -> f64, defined: fn(&EvalResult) -> bool| {
        let vals: Vec<f64> = results.iter().filter(|r| defined(r)).map(get).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let voiced = |r: &EvalResult| !r.empty.ref_voiced;
    let unvoiced = |r: &EvalResult| !r.empty.ref_unvoiced;
    let any = |_: &EvalResult| true;
    EvalResult {
        vr: mean(|r| r.vr, voiced),
        vfa: mean(|r| r.vfa, unvoiced),
        rpa: mean(|r| r.rpa, voiced),
        rca: mean(|r| r.rca, voiced),
        roa: mean(|r| r.roa, voiced),
        oa: mean(|r| r.oa, any),
        ref_voiced: results.iter().map(|r| r.ref_voiced).sum(),
        ref_unvoiced: results.iter().map(|r| r.ref_unvoiced).sum(),
        total: results.iter().map(|r| r.total).sum(),
        empty: EmptyDenominators {
            ref_voiced: results.iter().all(|r| r.empty.ref_voiced),
            ref_unvoiced: results.iter().all(|r| r.empty.ref_unvoiced),
        },
    }
}
