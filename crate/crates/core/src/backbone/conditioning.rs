use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-frame mask over a window; `true` marks a hidden (masked) frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask(Vec<bool>);

impl FrameMask {
    pub fn new(masked: Vec<bool>) -> Self {
        Self(masked)
    }

    pub fn all_observed(window: usize) -> Self {
        Self(vec![false; window])
    }

    /// Keep the first `observed` frames, hide the rest.
    pub fn future(window: usize, observed: usize) -> Self {
        Self((0..window).map(|i| i >= observed).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, frame: usize) -> bool {
        self.0[frame]
    }

    pub fn observed_count(&self) -> usize {
        self.0.iter().filter(|m| !**m).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Channel layout `[noisy window (W·C) | masked clean window (W·C) | observed
/// indicator (W)]` for window tensors of shape `[W, C, H, W_s]`. Masked clean
/// frames are zero-filled; the indicator plane of frame `i` is 1 when the
/// frame is observed and 0 otherwise.
pub fn assemble_input(noisy: &Tensor, clean: &Tensor, mask: &FrameMask) -> Result<Tensor> {
    let shape = noisy.shape();
    if shape.len() != 4 || clean.shape() != shape {
        return Err(Error::Data(format!(
            "noisy {:?} and clean {:?} windows must share a [W, C, H, W] shape",
            shape,
            clean.shape()
        )));
    }
    let (w, c, h, ws) = (shape[0], shape[1], shape[2], shape[3]);
    if mask.len() != w {
        return Err(Error::Data(format!("mask length {} does not match window {}", mask.len(), w)));
    }
    let frame = c * h * ws;
    let plane = h * ws;
    let mut data = Vec::with_capacity((2 * w * c + w) * plane);
    data.extend_from_slice(noisy.data());
    for (i, chunk) in clean.data().chunks(frame).enumerate() {
        if mask.is_masked(i) {
            data.extend(std::iter::repeat_n(0.0, frame));
        } else {
            data.extend_from_slice(chunk);
        }
    }
    for i in 0..w {
        let v = if mask.is_masked(i) { 0.0 } else { 1.0 };
        data.extend(std::iter::repeat_n(v, plane));
    }
    Ok(Tensor::new(vec![2 * w * c + w, h, ws], data)?)
}
