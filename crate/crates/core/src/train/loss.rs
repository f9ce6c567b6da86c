use candle_core::{DType, Tensor};

use super::{Result, TrainError};
use crate::nn::ops::resize_bilinear;
use crate::tmap::{TraversabilityMap, NUM_CLASSES};

/// One-hot targets `(B, 5, H, W)`; ids above the class range are rejected.
pub fn one_hot(targets: &[&TraversabilityMap], dtype: DType) -> Result<Tensor> {
    let (h, w) = targets.first().map(|t| t.shape()).ok_or(TrainError::EmptyBatch)?;
    let mut data = vec![0f32; targets.len() * NUM_CLASSES * h * w];
    for (b, t) in targets.iter().enumerate() {
        if t.shape() != (h, w) {
            return Err(TrainError::Target(format!("map {b} is {:?}, expected {:?}", t.shape(), (h, w))));
        }
        for (i, &id) in t.cells.iter().enumerate() {
            if id as usize >= NUM_CLASSES {
                return Err(TrainError::Target(format!("class id {id} at cell {i} of map {b}")));
            }
            data[(b * NUM_CLASSES + id as usize) * h * w + i] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (targets.len(), NUM_CLASSES, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Log-probabilities over dim 1 with the max subtracted for stability.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean per-cell cross-entropy over all five classes, logits upsampled
/// to the target resolution first.
pub fn cross_entropy(logits: &Tensor, targets: &[&TraversabilityMap]) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != NUM_CLASSES || b != targets.len() {
        return Err(TrainError::Target(format!(
            "logits {:?} against {} targets",
            logits.dims(),
            targets.len()
        )));
    }
    let target = one_hot(targets, logits.dtype())?;
    let (_, _, th, tw) = target.dims4()?;
    let logits = if (h, w) == (th, tw) {
        logits.clone()
    } else {
        resize_bilinear(logits, th, tw)?
    };
    let cells = (b * th * tw) as f64;
    Ok((log_softmax(&logits)?.mul(&target)?.sum_all()? / -cells)?)
}
