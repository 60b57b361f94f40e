//! Tone-grouping rearrangement of frequency bins.
//!
//! With `L` bins per octave, old bin `i = m * L + k` (octave `m`, in-octave
//! offset `k`) moves to new index `k * (F / L) + m`, so all bins sharing an
//! in-octave offset become contiguous, ordered by octave.

use thiserror::Error;

use crate::dsp::CfpTensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TcfpError {
    #[error("{bins} bins cannot be split into octaves of {per_octave}")]
    NotDivisible { bins: usize, per_octave: usize },
    #[error("plan expects {expected} frequency bins, input has {actual}")]
    DimMismatch { expected: usize, actual: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationPlan {
    bins: usize,
    per_octave: usize,
    /// new index -> old index
    forward: Vec<usize>,
    /// old index -> new index
    inverse: Vec<usize>,
}

pub fn build_permutation(bins: usize, per_octave: usize) -> Result<PermutationPlan, TcfpError> {
    if per_octave == 0 || bins == 0 || !bins.is_multiple_of(per_octave) {
        return Err(TcfpError::NotDivisible { bins, per_octave });
    }
    let octaves = bins / per_octave;
    let mut inverse = vec![0; bins];
    for (old, slot) in inverse.iter_mut().enumerate() {
        let (m, k) = (old / per_octave, old % per_octave);
        *slot = k * octaves + m;
    }
    let mut forward = vec![0; bins];
    for (old, &new) in inverse.iter().enumerate() {
        forward[new] = old;
    }
    Ok(PermutationPlan {
        bins,
        per_octave,
        forward,
        inverse,
    })
}

impl PermutationPlan {
    pub fn num_bins(&self) -> usize {
        self.bins
    }

    pub fn bins_per_octave(&self) -> usize {
        self.per_octave
    }

    /// Old bin read by new index `j`.
    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    /// New index of old bin `i`.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn new_index(&self, old: usize) -> usize {
        self.inverse[old]
    }

    /// The plan that undoes this one.
    pub fn inverted(&self) -> PermutationPlan {
        PermutationPlan {
            bins: self.bins,
            per_octave: self.per_octave,
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    /// Permutes axis 1 of a `(C, F, T)` tensor: `out[c][j][t] = x[c][forward[j]][t]`.
    pub fn apply_tensor<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>, TcfpError> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.bins {
            return Err(TcfpError::DimMismatch {
                expected: self.bins,
                actual: shape.get(1).copied().unwrap_or(0),
            });
        }
        let (c, f, t) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::with_capacity(x.len());
        for ch in 0..c {
            for &old in &self.forward {
                let start = (ch * f + old) * t;
                out.extend_from_slice(&x.data()[start..start + t]);
            }
        }
        Ok(Tensor::new(shape.to_vec(), out).expect("same shape"))
    }
}

pub fn apply_rearrange<S: Scalar>(cfp: &CfpTensor<S>, plan: &PermutationPlan) -> Result<CfpTensor<S>, TcfpError> {
    let t = plan.apply_tensor(cfp.as_tensor())?;
    Ok(CfpTensor::from_tensor(t).expect("three channels preserved"))
}
