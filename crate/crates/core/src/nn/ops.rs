use candle_core::{DType, Device, Tensor};

use super::{NnError, Result};

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

/// Logistic function via tanh, finite gradient everywhere.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Row weights of a bilinear resize from `input` to `output` samples with
/// half-pixel centres (`align_corners = false`). Shape `(output, input)`.
pub fn interpolation_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let w = src - i0 as f64;
        m[o * input + i0] += 1.0 - w;
        m[o * input + i1] += w;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dt = x.dtype();
    let ah = Tensor::from_vec(interpolation_matrix(h, out_h), (out_h, h), &Device::Cpu)?.to_dtype(dt)?;
    let awt = Tensor::from_vec(interpolation_matrix(w, out_w), (out_w, w), &Device::Cpu)?
        .to_dtype(dt)?
        .t()?
        .contiguous()?;
    let rows = ah.broadcast_matmul(&x.contiguous()?)?;
    Ok(rows.broadcast_matmul(&awt)?)
}

pub fn upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, h * factor, w * factor)
}

/// 2×2 average pool, stride 2. Odd sizes round up and the edge windows
/// average only their in-bounds cells.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(super::fused::avg_pool2(x)?)
}

/// Mean over the spatial dims, keeping them as size 1.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(3)?.mean_keepdim(2)?)
}

pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_keepdim(3)?.max_keepdim(2)?)
}

/// Per-pixel class with the highest score; ties go to the lower id.
/// Input `(B, K, H, W)`, output `B` row-major `H*W` vectors.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (b, k, h, w) = logits.dims4()?;
    if k > u8::MAX as usize {
        return Err(NnError::Shape(format!("{k} classes do not fit in u8")));
    }
    let v: Vec<f64> = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let hw = h * w;
    Ok((0..b)
        .map(|bi| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    let mut best_v = v[bi * k * hw + p];
                    for c in 1..k {
                        let s = v[(bi * k + c) * hw + p];
                        if s > best_v {
                            best = c;
                            best_v = s;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Mean and max over channels, concatenated to `(B, 2, H, W)`.
pub fn channel_pool(x: &Tensor) -> Result<Tensor> {
    let avg = x.mean_keepdim(1)?;
    let max = x.max_keepdim(1)?;
    Ok(Tensor::cat(&[&avg, &max], 1)?)
}

/// Sum of all elements as a scalar `f64`.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}
