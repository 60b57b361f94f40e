//! Segmenting, batching, Adam and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{GradTable, Graph};
use crate::dsp::{compute_cfp, CfpConfig, DspError, Waveform};
use crate::evaluation::{evaluate_contours, mean_results, EvalError, EvalResult, DEFAULT_TOLERANCE_CENTS};
use crate::labels::{check_grid, contour_to_label_maps, salience_to_contour, LabelError, LabelMaps, PitchContour};
use crate::model::layers::{apply_running_updates, collect_running_updates};
use crate::model::{total_loss, Mode, ModelError, Preset, TargetVars, Trace, TONet};
use crate::params::{CheckpointError, ParamStore};
use crate::scalar::Scalar;
use crate::tcfp::PermutationPlan;
use crate::tensor::{Tensor, TensorError};

pub const METRICS_HEADER: &str = "epoch,loss,vr,vfa,rpa,rca,roa,oa";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
/// Fraction of clips, taken from the end of the id order, held out.
pub const HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient table has {grads} entries, store has {params}")]
    GradMismatch { grads: usize, params: usize },
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("clip `{id}`: {source}")]
    Clip { id: String, source: LabelError },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub preset: Preset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 200,
            seed: 0,
            preset: Preset::Paper,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            preset: Preset::Desk,
            ..TrainConfig::paper()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => TrainConfig::paper(),
            Preset::Desk => TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "learning_rate = {}\nbatch_size = {}\nbeta1 = {}\nbeta2 = {}\nepsilon = {}\nepochs = {}\nseed = {}\npreset = {}\n",
            self.learning_rate, self.batch_size, self.beta1, self.beta2, self.epsilon, self.epochs, self.seed, self.preset
        )
    }
}

/// A clip with its aligned reference contour.
#[derive(Clone, Debug)]
pub struct Clip<S: Scalar = f64> {
    pub id: String,
    pub wave: Waveform<S>,
    pub contour: PitchContour,
}

/// One fixed-length training window.
#[derive(Clone, Debug)]
pub struct Segment<S: Scalar = f64> {
    /// `(3, F, T)`.
    pub cfp: Tensor<S>,
    pub tcfp: Tensor<S>,
    pub labels: LabelMaps,
    pub clip_id: String,
    pub offset: usize,
    /// Frames backed by audio; the rest is padding.
    pub valid: usize,
    /// Reference Hz for the valid frames.
    pub reference: Vec<f64>,
}

impl<S: Scalar> Segment<S> {
    pub fn frames(&self) -> usize {
        self.cfp.shape()[2]
    }

    pub fn padded(&self) -> usize {
        self.frames() - self.valid
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedClip {
    pub id: String,
    pub reason: String,
}

/// The contour resized to `frames`: extra frames dropped, missing ones unvoiced.
fn fit_contour(contour: &PitchContour, frames: usize) -> PitchContour {
    let mut freqs: Vec<f64> = contour.freqs().iter().copied().take(frames).collect();
    freqs.resize(frames, 0.0);
    PitchContour::on_grid(freqs).expect("grid contour")
}

fn pad_labels(maps: &LabelMaps, start: usize, len: usize) -> LabelMaps {
    let total = maps.num_frames();
    let slice = |m: &Tensor<f64>, silent_row: usize| {
        let rows = m.shape()[0];
        Tensor::from_fn(vec![rows, len], |i| {
            let (r, t) = (i / len, start + i % len);
            if t < total {
                m.get(&[r, t])
            } else if r == silent_row {
                1.0
            } else {
                0.0
            }
        })
    };
    LabelMaps {
        final_map: slice(&maps.final_map, 0),
        tone: slice(&maps.tone, crate::labels::NUM_TONES - 1),
        octave: slice(&maps.octave, crate::labels::NUM_OCTAVES - 1),
    }
}

/// Cuts every clip into non-overlapping `frames`-long windows. Clips too short
/// for one analysis window are skipped and reported.
pub fn segment_corpus<S: Scalar>(
    clips: &[Clip<S>],
    cfg: &CfpConfig,
    plan: &PermutationPlan,
    frames: usize,
) -> Result<(Vec<Segment<S>>, Vec<SkippedClip>), TrainError> {
    if frames == 0 {
        return Err(TrainError::Config("segment length must be at least 1 frame".into()));
    }
    let mut segments = Vec::new();
    let mut skipped = Vec::new();
    for clip in clips {
        check_grid(&clip.contour).map_err(|source| TrainError::Clip {
            id: clip.id.clone(),
            source,
        })?;
        let cfp = match compute_cfp(&clip.wave, cfg) {
            Ok(c) => c,
            Err(e @ (DspError::Empty | DspError::TooShort { .. })) => {
                skipped.push(SkippedClip {
                    id: clip.id.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let tcfp = crate::tcfp::apply_rearrange(&cfp, plan).map_err(|e| TrainError::Config(e.to_string()))?;
        let total = cfp.num_frames();
        let contour = fit_contour(&clip.contour, total);
        let maps = contour_to_label_maps(&contour, total).map_err(|source| TrainError::Clip {
            id: clip.id.clone(),
            source,
        })?;
        for offset in (0..total).step_by(frames) {
            let valid = frames.min(total - offset);
            segments.push(Segment {
                cfp: cfp.segment(offset, frames).into_tensor(),
                tcfp: tcfp.segment(offset, frames).into_tensor(),
                labels: pad_labels(&maps, offset, frames),
                clip_id: clip.id.clone(),
                offset,
                valid,
                reference: contour.freqs()[offset..offset + valid].to_vec(),
            });
        }
    }
    Ok((segments, skipped))
}

/// Clip ids sorted, split into `(train, holdout)`; the holdout is the last
/// `floor(n * HOLDOUT_FRACTION)` ids.
pub fn split_holdout(ids: &[String]) -> (Vec<String>, Vec<String>) {
    let mut sorted = ids.to_vec();
    sorted.sort();
    let hold = (sorted.len() as f64 * HOLDOUT_FRACTION).floor() as usize;
    let at = sorted.len() - hold;
    let holdout = sorted.split_off(at);
    (sorted, holdout)
}

/// Stacks segments into `(cfp, tcfp, tone, octave, final)` batch tensors.
pub fn stack_batch<S: Scalar>(batch: &[&Segment<S>]) -> [Tensor<S>; 5] {
    let stack = |parts: Vec<&Tensor<S>>| {
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(parts[0].shape());
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(shape, data).expect("segments share a shape")
    };
    let tone: Vec<Tensor<S>> = batch.iter().map(|s| s.labels.tone.cast()).collect();
    let octave: Vec<Tensor<S>> = batch.iter().map(|s| s.labels.octave.cast()).collect();
    let final_map: Vec<Tensor<S>> = batch.iter().map(|s| s.labels.final_map.cast()).collect();
    [
        stack(batch.iter().map(|s| &s.cfp).collect()),
        stack(batch.iter().map(|s| &s.tcfp).collect()),
        stack(tone.iter().collect()),
        stack(octave.iter().collect()),
        stack(final_map.iter().collect()),
    ]
}

/// First and second moments per store entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable entry. Nothing changes
/// if any gradient is non-finite.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &GradTable<S>,
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TrainError::GradMismatch {
            grads: grads.len(),
            params: store.len(),
        });
    }
    for (id, g) in grads.iter() {
        if store.is_trainable(id) && !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let (c1, c2) = (S::lit(1.0 - cfg.beta1.powi(t)), S::lit(1.0 - cfg.beta2.powi(t)));
    let (lr, eps) = (S::lit(cfg.learning_rate), S::lit(cfg.epsilon));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (S::one() - b1) * g[j];
            v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One optimization step on a batch; returns the loss before the update.
pub fn train_step<S: Scalar>(
    model: &mut TONet<S>,
    state: &mut AdamState<S>,
    batch: &[&Segment<S>],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let [cfp, tcfp, tone, octave, final_map] = stack_batch(batch);
    let (loss, grads, updates) = {
        let mut g: Graph<'_, S> = Graph::new();
        let (c, t) = (g.constant(cfp), g.constant(tcfp));
        let mut trace = Trace::default();
        let out = model.forward(&mut g, c, t, Mode::Train, &mut trace)?;
        let targets = TargetVars {
            tone: g.constant(tone),
            octave: g.constant(octave),
            final_map: g.constant(final_map),
        };
        let loss = total_loss(&mut g, &out, &targets)?;
        let value = g.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = g.backward(loss)?.for_params(model.params());
        (value, grads, collect_running_updates(&g, &trace))
    };
    adam_step(model.params_mut(), &grads, state, cfg)?;
    apply_running_updates(model.params_mut(), &updates);
    Ok(loss)
}

/// Decoded contour of each clip, rebuilt from its segments in offset order.
pub fn decode_segments<S: Scalar>(
    model: &TONet<S>,
    segments: &[Segment<S>],
    batch_size: usize,
) -> Result<Vec<(String, PitchContour, PitchContour)>, TrainError> {
    let mut freqs: Vec<Vec<f64>> = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(batch_size.max(1)) {
        let refs: Vec<&Segment<S>> = chunk.iter().collect();
        let [cfp, tcfp, ..] = stack_batch(&refs);
        let pred = model.predict(&cfp, &tcfp)?;
        let (rows, frames) = (pred.final_map.shape()[1], pred.final_map.shape()[2]);
        for (b, seg) in chunk.iter().enumerate() {
            let start = b * rows * frames;
            let map = Tensor::new(vec![rows, frames], pred.final_map.data()[start..start + rows * frames].to_vec())?;
            let mut f = salience_to_contour(&map).freqs().to_vec();
            f.truncate(seg.valid);
            freqs.push(f);
        }
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| (&segments[a].clip_id, segments[a].offset).cmp(&(&segments[b].clip_id, segments[b].offset)));
    let mut out: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for i in order {
        let seg = &segments[i];
        match out.last_mut() {
            Some((id, est, reference)) if *id == seg.clip_id => {
                est.extend_from_slice(&freqs[i]);
                reference.extend_from_slice(&seg.reference);
            }
            _ => out.push((seg.clip_id.clone(), freqs[i].clone(), seg.reference.clone())),
        }
    }
    out.into_iter()
        .map(|(id, est, reference)| {
            let est = PitchContour::on_grid(est).map_err(|source| TrainError::Clip { id: id.clone(), source })?;
            let reference = PitchContour::on_grid(reference).map_err(|source| TrainError::Clip { id: id.clone(), source })?;
            Ok((id, est, reference))
        })
        .collect()
}

/// Corpus-mean metrics of the model on `segments`, one clip at a time.
pub fn evaluate_segments<S: Scalar>(model: &TONet<S>, segments: &[Segment<S>], batch_size: usize) -> Result<EvalResult, TrainError> {
    let mut results = Vec::new();
    for (_, est, reference) in decode_segments(model, segments, batch_size)? {
        results.push(evaluate_contours(&est, &reference, DEFAULT_TOLERANCE_CENTS)?);
    }
    Ok(mean_results(&results))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub metrics: EvalResult,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.loss, m.vr, m.vfa, m.rpa, m.rca, m.roa, m.oa
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimization step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_oa: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs the epoch loop. Held-out metrics are computed on `holdout`, or on the
/// training segments when `holdout` is empty. With `out_dir`, the metrics log
/// and the best-OA and last-epoch checkpoints are written there.
///
/// On a non-finite loss or gradient the model is restored to the end of the
/// last finished epoch and no checkpoint is overwritten.
pub fn train<S: Scalar>(
    model: &mut TONet<S>,
    train_set: &[Segment<S>],
    holdout: &[Segment<S>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let eval_set = if holdout.is_empty() { train_set } else { holdout };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.params());
    let mut log = format!("{METRICS_HEADER}\n");
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_oa: f64::NEG_INFINITY,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let good = model.params().clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Segment<S>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = match train_step(model, &mut state, &batch, cfg) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => {
                    *model.params_mut() = good;
                    return Err(TrainError::Diverged { epoch, step, loss: l });
                }
                Err(TrainError::NonFiniteGradient(_)) => {
                    *model.params_mut() = good;
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    });
                }
                Err(e) => return Err(e),
            };
            report.step_losses.push(loss);
            total += loss;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: total / batches as f64,
            metrics: evaluate_segments(model, eval_set, cfg.batch_size)?,
        };
        let improved = record.metrics.oa > report.best_oa;
        if improved {
            report.best_oa = record.metrics.oa;
            report.best_epoch = epoch;
        }
        writeln!(log, "{}", record.csv_line()).expect("string write");
        if let Some(dir) = out_dir {
            let path = dir.join(METRICS_FILE);
            fs::write(&path, &log).map_err(io_err(&path))?;
            model.params().save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                model.params().save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok(report)
}

/// Loads every manifest pair of a corpus directory, sorted by clip id (the
/// wav file stem).
pub fn load_corpus<S: Scalar>(dir: &Path, sample_rate: f64) -> Result<Vec<Clip<S>>, TrainError> {
    let manifest = crate::datagen::Manifest::read(dir).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut clips = Vec::new();
    for (wav, csv) in manifest.resolve(dir) {
        let id = wav
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| wav.display().to_string());
        let wave = crate::dsp::load_wav(&wav, sample_rate)?;
        let contour = PitchContour::read_csv(&csv).map_err(|source| TrainError::Clip { id: id.clone(), source })?;
        clips.push(Clip { id, wave, contour });
    }
    clips.sort_by(|a, b| a.id.cmp(&b.id));
    if clips.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(clips)
}
