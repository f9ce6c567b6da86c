//! Multi-frame fusion: planar alignment of past feature maps onto the
//! current grid and frame-wise channel and spatial attention.

use candle_core::{DType, Tensor};
use thiserror::Error;

use crate::cloud::{Pose, ROTATION_TOLERANCE};
use crate::grid::GridSpec;
use crate::nn::{ops, Conv2d, ConvSpec, NnError, ParamStore};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("pose is not rigid (deviation {0:.2e})")]
    NotRigid(f64),
    #[error("fusion expects {expected} frames, got {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("frame shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<candle_core::Error> for FusionError {
    fn from(e: candle_core::Error) -> Self {
        FusionError::Nn(NnError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Affine map from target pixel `(u, v, 1)` (column, row) to the source
/// pixel sampled for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarTransform(pub [[f64; 3]; 2]);

impl PlanarTransform {
    pub const IDENTITY: PlanarTransform = PlanarTransform([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translation(du: f64, dv: f64) -> Self {
        PlanarTransform([[1.0, 0.0, du], [0.0, 1.0, dv]])
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * u + m[0][1] * v + m[0][2], m[1][0] * u + m[1][1] * v + m[1][2])
    }

    /// Inverse of the affine map.
    pub fn inverse(&self) -> Self {
        let [[a, b, tx], [c, d, ty]] = self.0;
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        PlanarTransform([[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]])
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Transform that resamples a feature map computed at `source` pose onto
/// the grid of the `target` pose. Only yaw and planar translation of the
/// relative motion are kept.
pub fn relative_transform(source: &Pose, target: &Pose, g: &GridSpec) -> Result<PlanarTransform> {
    for p in [source, target] {
        let dev = p.rigidity_error();
        if dev > ROTATION_TOLERANCE || !dev.is_finite() {
            return Err(FusionError::NotRigid(dev));
        }
    }
    if source == target {
        return Ok(PlanarTransform::IDENTITY);
    }
    // Target metric point → world → source metric point.
    let rel = source.inverse().compose(target);
    let yaw = rel.yaw();
    let (s, c) = yaw.sin_cos();
    let t = rel.translation();
    let cs = g.cell_size;
    let ox = g.x_min + 0.5 * cs;
    let oy = g.y_min + 0.5 * cs;
    Ok(PlanarTransform([
        [c, -s, (c * ox - s * oy + t.x - ox) / cs],
        [s, c, (s * ox + c * oy + t.y - oy) / cs],
    ]))
}

/// Bilinear resampling of `(C, H, W)` or `(B, C, H, W)` under `h`; source
/// positions outside the map read zero. The identity returns the input.
pub fn warp(map: &Tensor, h: &PlanarTransform) -> Result<Tensor> {
    if h.is_identity() {
        return Ok(map.clone());
    }
    if map.rank() == 4 {
        let b = map.dims()[0];
        let frames = (0..b).map(|i| warp(&map.get(i)?, h)).collect::<Result<Vec<_>>>()?;
        return Ok(Tensor::stack(&frames, 0)?);
    }
    let (c, height, width) = map.dims3()?;
    let hw = height * width;
    let mut idx = vec![vec![hw as u32; hw]; 4];
    let mut wts = vec![vec![0.0f64; hw]; 4];
    for v in 0..height {
        for u in 0..width {
            let (su, sv) = h.apply(u as f64, v as f64);
            let (u0, v0) = (su.floor(), sv.floor());
            let (fu, fv) = (su - u0, sv - v0);
            let corners = [
                (u0, v0, (1.0 - fu) * (1.0 - fv)),
                (u0 + 1.0, v0, fu * (1.0 - fv)),
                (u0, v0 + 1.0, (1.0 - fu) * fv),
                (u0 + 1.0, v0 + 1.0, fu * fv),
            ];
            let o = v * width + u;
            for (k, (cu, cv, w)) in corners.into_iter().enumerate() {
                if cu >= 0.0 && cv >= 0.0 && cu < width as f64 && cv < height as f64 {
                    idx[k][o] = (cv as usize * width + cu as usize) as u32;
                    wts[k][o] = w;
                }
            }
        }
    }
    let flat = map.reshape((c, hw))?;
    let flat = Tensor::cat(&[&flat, &Tensor::zeros((c, 1), map.dtype(), map.device())?], 1)?;
    let mut out: Option<Tensor> = None;
    for (i, w) in idx.into_iter().zip(wts) {
        let i = Tensor::from_vec(i, hw, map.device())?;
        let w = Tensor::from_vec(w, (1, hw), map.device())?.to_dtype(map.dtype())?;
        let term = flat.index_select(&i, 1)?.broadcast_mul(&w)?;
        out = Some(match out {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(out.expect("four corners").reshape((c, height, width))?)
}

fn check_stack(stack: &[Tensor]) -> Result<()> {
    let Some(first) = stack.first() else {
        return Err(FusionError::FrameCount { expected: 1, got: 0 });
    };
    for f in stack {
        if f.dims() != first.dims() || f.rank() != 4 {
            return Err(FusionError::Shape(first.dims().to_vec(), f.dims().to_vec()));
        }
    }
    Ok(())
}

/// Per-frame channel weights `(B, C, 1, 1)`: the mean of the softmax over
/// frames of spatial averages and the softmax of spatial maxima.
pub fn channel_attention(stack: &[Tensor]) -> Result<Vec<Tensor>> {
    check_stack(stack)?;
    let avg = stack.iter().map(ops::global_avg_pool).collect::<std::result::Result<Vec<_>, _>>()?;
    let max = stack.iter().map(ops::global_max_pool).collect::<std::result::Result<Vec<_>, _>>()?;
    let sa = ops::softmax(&Tensor::stack(&avg, 0)?, 0)?;
    let sm = ops::softmax(&Tensor::stack(&max, 0)?, 0)?;
    let w = ((sa + sm)? * 0.5)?;
    Ok((0..stack.len()).map(|k| w.get(k)).collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Per-frame pixel weights `(B, 1, H, W)`: a shared 7×7 convolution over
/// channel mean and max, then softmax over frames at each pixel.
pub fn spatial_attention(stack: &[Tensor], conv: &Conv2d) -> Result<Vec<Tensor>> {
    check_stack(stack)?;
    let (b, _, h, w) = stack[0].dims4()?;
    let pooled = stack.iter().map(ops::channel_pool).collect::<std::result::Result<Vec<_>, _>>()?;
    let scores = conv
        .forward(&Tensor::cat(&pooled, 0)?)?
        .reshape((stack.len(), b, 1, h, w))?;
    let wts = ops::softmax(&scores, 0)?;
    Ok((0..stack.len()).map(|k| wts.get(k)).collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Attention fusion of `frames` aligned `channels`-deep maps.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub spatial: Conv2d,
    pub mix: Conv2d,
    pub frames: usize,
    pub channels: usize,
}

impl Fusion {
    /// The mixing 1×1 convolution starts as `frames` stacked copies of
    /// `frames · I`, so identical aligned frames fuse to themselves while
    /// the spatial convolution starts at zero (uniform attention).
    pub fn new(store: &mut ParamStore, name: &str, frames: usize, channels: usize) -> Result<Self> {
        let spatial = Conv2d::new(store, &format!("{name}.spatial"), ConvSpec::new(2, 1, 7))?;
        store.assign(&format!("{name}.spatial.weight"), &spatial.weight.zeros_like()?)?;
        let mix = Conv2d::new(store, &format!("{name}.mix"), ConvSpec::new(frames * channels, channels, 1).with_bias())?;
        let eye = Tensor::eye(channels, DType::F64, &candle_core::Device::Cpu)?;
        let blocks = vec![(eye * frames as f64)?; frames];
        let w = Tensor::cat(&blocks, 1)?.reshape((channels, frames * channels, 1, 1))?;
        store.assign(&format!("{name}.mix.weight"), &w)?;
        Ok(Self {
            spatial,
            mix,
            frames,
            channels,
        })
    }

    /// Fuses `frames` maps of shape `(B, C, H, W)` into one.
    pub fn forward(&self, stack: &[Tensor]) -> Result<Tensor> {
        if stack.len() != self.frames {
            return Err(FusionError::FrameCount {
                expected: self.frames,
                got: stack.len(),
            });
        }
        let cw = channel_attention(stack)?;
        let refined = stack
            .iter()
            .zip(&cw)
            .map(|(f, w)| f.broadcast_mul(w))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let sw = spatial_attention(&refined, &self.spatial)?;
        let weighted = refined
            .iter()
            .zip(&sw)
            .map(|(f, w)| f.broadcast_mul(w))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.mix.forward(&Tensor::cat(&weighted, 1)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn impulse(h: usize, w: usize, r: usize, c: usize) -> Tensor {
        let mut v = vec![0.0f64; h * w];
        v[r * w + c] = 1.0;
        Tensor::from_vec(v, (1, h, w), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn same_pose_is_identity() {
        let g = GridSpec::desk_scale();
        let p = Pose::from_xyz_yaw(3.0, -2.0, 1.0, 0.7);
        assert!(relative_transform(&p, &p, &g).unwrap().is_identity());
    }

    #[test]
    fn metre_translation_is_five_pixels() {
        let g = GridSpec::desk_scale();
        let src = Pose::identity();
        let dst = Pose::from_xyz_yaw(1.0, 0.0, 0.0, 0.0);
        let h = relative_transform(&src, &dst, &g).unwrap();
        assert!((h.0[0][2] - 5.0).abs() < 1e-9 && h.0[1][2].abs() < 1e-9);
        // A landmark seen at source pixel (col 70) is at col 65 for the
        // vehicle that moved 1 m forward.
        let out = warp(&impulse(128, 128, 64, 70), &h).unwrap();
        let v = values(&out);
        assert_eq!(v[64 * 128 + 65], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn quarter_turn_block() {
        let g = GridSpec::desk_scale();
        let h = relative_transform(&Pose::identity(), &Pose::from_xyz_yaw(0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2), &g)
            .unwrap();
        assert!((h.0[0][0]).abs() < 1e-6 && (h.0[0][1] + 1.0).abs() < 1e-6);
        assert!((h.0[1][0] - 1.0).abs() < 1e-6 && (h.0[1][1]).abs() < 1e-6);
    }

    #[test]
    fn half_pixel_splits_impulse() {
        let out = warp(&impulse(8, 8, 4, 4), &PlanarTransform::translation(0.5, 0.0)).unwrap();
        let v = values(&out);
        assert_eq!(v[4 * 8 + 3], 0.5);
        assert_eq!(v[4 * 8 + 4], 0.5);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn out_of_range_reads_zero() {
        let m = Tensor::ones((2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let v = values(&warp(&m, &PlanarTransform::translation(2.0, 0.0)).unwrap());
        assert_eq!(v.iter().sum::<f64>(), 2.0 * 8.0);
    }

    #[test]
    fn channel_weights_hand_example() {
        // Frame 0: average ln 3, max 2 ln 3. Frame 1: constant 2 ln 3.
        let l3 = 3f64.ln();
        let b = Tensor::from_vec(vec![0.0, 2.0 * l3, 2.0 * l3, 0.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let a = Tensor::full(2.0 * l3, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let w = channel_attention(&[b.clone(), a.clone()]).unwrap();
        let w0 = values(&w[0])[0];
        let w1 = values(&w[1])[0];
        // softmax(ln3, 2ln3) = (0.25, 0.75); equal maxima give 0.5 each.
        assert!((w0 - 0.375).abs() < 1e-12 && (w1 - 0.625).abs() < 1e-12);
    }

    #[test]
    fn single_frame_fuse_is_identity_mix() {
        let mut store = ParamStore::new(1, DType::F64);
        let fusion = Fusion::new(&mut store, "f", 1, 3).unwrap();
        let x = Tensor::randn(0.0, 1.0, (2, 3, 5, 5), &Device::Cpu).unwrap();
        let y = fusion.forward(std::slice::from_ref(&x)).unwrap();
        let d = (y - x).unwrap().abs().unwrap().max_keepdim(0).unwrap();
        assert!(ops::scalar(&d.flatten_all().unwrap().max(0).unwrap()).unwrap() < 1e-12);
    }
}
