//! Whole-clip inference: features, windowed prediction, argmax decoding.

use thiserror::Error;

use crate::dsp::{compute_cfp, CfpConfig, CfpTensor, DspError, Waveform};
use crate::labels::{salience_to_contour, PitchContour};
use crate::model::{ModelError, TONet};
use crate::scalar::Scalar;
use crate::tcfp::{apply_rearrange, PermutationPlan, TcfpError};
use crate::tensor::Tensor;

/// Windows predicted per forward pass.
pub const INFER_BATCH: usize = 8;

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Tcfp(#[from] TcfpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// CFP of a clip and its rearranged counterpart.
pub fn clip_features<S: Scalar>(
    wave: &Waveform<S>,
    cfg: &CfpConfig,
    plan: &PermutationPlan,
) -> Result<(CfpTensor<S>, CfpTensor<S>), InferError> {
    let cfp = compute_cfp(wave, cfg)?;
    let tcfp = apply_rearrange(&cfp, plan)?;
    Ok((cfp, tcfp))
}

fn stack<S: Scalar>(parts: &[CfpTensor<S>]) -> Tensor<S> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].as_tensor().shape());
    let data = parts.iter().flat_map(|p| p.as_tensor().data().iter().copied()).collect();
    Tensor::new(shape, data).expect("windows share a shape")
}

/// Salience map `(F+1, T)` of a full clip, predicted in model-sized windows.
pub fn predict_salience<S: Scalar>(model: &TONet<S>, cfp: &CfpTensor<S>, tcfp: &CfpTensor<S>) -> Result<Tensor<S>, InferError> {
    let win = model.config().frames;
    let total = cfp.num_frames();
    let rows = model.config().bins + 1;
    let starts: Vec<usize> = (0..total).step_by(win).collect();
    let mut out = Tensor::zeros(vec![rows, total]);
    for group in starts.chunks(INFER_BATCH) {
        let a: Vec<CfpTensor<S>> = group.iter().map(|&s| cfp.segment(s, win)).collect();
        let b: Vec<CfpTensor<S>> = group.iter().map(|&s| tcfp.segment(s, win)).collect();
        let pred = model.predict(&stack(&a), &stack(&b))?;
        let d = pred.final_map.data();
        for (k, &start) in group.iter().enumerate() {
            for r in 0..rows {
                for t in 0..win.min(total - start) {
                    out.set(&[r, start + t], d[(k * rows + r) * win + t]);
                }
            }
        }
    }
    Ok(out)
}

/// Estimated contour on the 10 ms grid, one frame per feature frame.
pub fn infer_features<S: Scalar>(model: &TONet<S>, cfp: &CfpTensor<S>, tcfp: &CfpTensor<S>) -> Result<PitchContour, InferError> {
    Ok(salience_to_contour(&predict_salience(model, cfp, tcfp)?))
}

pub fn infer_wave<S: Scalar>(
    model: &TONet<S>,
    wave: &Waveform<S>,
    cfg: &CfpConfig,
    plan: &PermutationPlan,
) -> Result<PitchContour, InferError> {
    let (cfp, tcfp) = clip_features(wave, cfg, plan)?;
    infer_features(model, &cfp, &tcfp)
}
