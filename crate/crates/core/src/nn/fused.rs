//! Hand-written kernels for the hottest graph nodes: batch normalization,
//! index gathers, 2×2 average pooling and patch extraction for
//! convolutions. Each is a typed pass over contiguous memory with an
//! analytic backward pass.

use std::sync::{Arc, Mutex};

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Storage, Tensor, WithDType};

type CResult<T> = candle_core::Result<T>;

fn fail<T>(msg: impl Into<String>) -> CResult<T> {
    Err(candle_core::Error::Msg(msg.into()))
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let Some((start, end)) = l.contiguous_offsets() else {
        return fail("fused op expects contiguous input");
    };
    Ok(&T::cpu_storage_as_slice(s)?[start..end])
}

/// Runs `f` on the contiguous values of `t`.
fn read<T: WithDType, R>(t: &Tensor, f: impl FnOnce(&[T]) -> CResult<R>) -> CResult<R> {
    let t = t.contiguous()?;
    let (st, l) = t.storage_and_layout();
    match &*st {
        Storage::Cpu(s) => f(slice::<T>(s, l)?),
        _ => fail("fused ops run on the CPU only"),
    }
}

fn zeros<T: WithDType>(n: usize) -> Vec<T> {
    vec![T::from_f64(0.0); n]
}

/// Calls `$body` with `$t` bound to the element type of `$dtype`.
macro_rules! typed {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
            other => fail(format!("fused op supports f32 and f64, got {other:?}")),
        }
    };
}

/// Per-channel statistics used by a normalization pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Biased batch variance (or the running variance when fixed).
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

/// `gamma · (x − mean) / sqrt(var + eps) + beta` over a tensor viewed as
/// `(outer, C, inner)`. With `fixed` statistics the mean and variance are
/// constants; otherwise they are the batch statistics of `x` and the
/// backward pass differentiates through them.
struct BatchNormOp {
    outer: usize,
    channels: usize,
    inner: usize,
    eps: f64,
    fixed: Option<NormStats>,
    computed: Arc<Mutex<Option<NormStats>>>,
}

impl BatchNormOp {
    fn stats(&self) -> NormStats {
        self.fixed
            .clone()
            .or_else(|| self.computed.lock().expect("stats lock").clone())
            .expect("statistics exist after the forward pass")
    }

    /// Contiguous runs of channel `ch`.
    fn runs<'a, T>(&self, v: &'a [T], ch: usize) -> impl Iterator<Item = &'a [T]> + 'a {
        let (c, inner) = (self.channels, self.inner);
        (0..self.outer).map(move |o| &v[(o * c + ch) * inner..][..inner])
    }

    fn batch_stats<T: WithDType>(&self, x: &[T]) -> NormStats {
        let count = self.outer * self.inner;
        let n = count as f64;
        let mut mean = Vec::with_capacity(self.channels);
        let mut var = Vec::with_capacity(self.channels);
        for ch in 0..self.channels {
            let m = self.runs(x, ch).flatten().map(|v| v.to_f64()).sum::<f64>() / n;
            let sq = self
                .runs(x, ch)
                .flatten()
                .map(|v| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum::<f64>();
            mean.push(m);
            var.push(sq / n);
        }
        NormStats { mean, var, count }
    }

    fn fwd_t<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let stats = match &self.fixed {
            Some(s) => s.clone(),
            None => {
                let s = self.batch_stats(x);
                *self.computed.lock().expect("stats lock") = Some(s.clone());
                s
            }
        };
        let mut out = zeros::<T>(x.len());
        for ch in 0..self.channels {
            let scale = gamma[ch].to_f64() / (stats.var[ch] + self.eps).sqrt();
            let (mean, shift) = (stats.mean[ch], beta[ch].to_f64());
            for o in 0..self.outer {
                let at = (o * self.channels + ch) * self.inner;
                for (y, v) in out[at..at + self.inner].iter_mut().zip(&x[at..at + self.inner]) {
                    *y = T::from_f64((v.to_f64() - mean) * scale + shift);
                }
            }
        }
        out
    }

    fn bwd_t<T: WithDType>(&self, x: &Tensor, gamma: &Tensor, grad: &Tensor) -> CResult<(Tensor, Tensor, Tensor)> {
        let stats = self.stats();
        let c = self.channels;
        let n = stats.count as f64;
        let (dx, dgamma, dbeta) = read::<T, _>(x, |xv| {
            read::<T, _>(grad, |g| {
                read::<T, _>(gamma, |gam| {
                    let mut dx = zeros::<T>(xv.len());
                    let mut dgamma = Vec::with_capacity(c);
                    let mut dbeta = Vec::with_capacity(c);
                    for ch in 0..c {
                        let inv = 1.0 / (stats.var[ch] + self.eps).sqrt();
                        let mean = stats.mean[ch];
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for (gr, xr) in self.runs(g, ch).zip(self.runs(xv, ch)) {
                            for (gi, xi) in gr.iter().zip(xr) {
                                let gi = gi.to_f64();
                                sg += gi;
                                sgx += gi * (xi.to_f64() - mean);
                            }
                        }
                        let dg = sgx * inv;
                        let scale = gam[ch].to_f64() * inv;
                        for o in 0..self.outer {
                            let at = (o * c + ch) * self.inner;
                            let rows = dx[at..at + self.inner].iter_mut().zip(&g[at..at + self.inner]).zip(&xv[at..at + self.inner]);
                            if self.fixed.is_some() {
                                for ((d, gi), _) in rows {
                                    *d = T::from_f64(scale * gi.to_f64());
                                }
                            } else {
                                for ((d, gi), xi) in rows {
                                    let xhat = (xi.to_f64() - mean) * inv;
                                    *d = T::from_f64(scale * (gi.to_f64() - sg / n - xhat * dg / n));
                                }
                            }
                        }
                        dgamma.push(T::from_f64(dg));
                        dbeta.push(T::from_f64(sg));
                    }
                    Ok((dx, dgamma, dbeta))
                })
            })
        })?;
        let dev = x.device();
        Ok((
            Tensor::from_vec(dx, x.shape(), dev)?,
            Tensor::from_vec(dgamma, c, dev)?,
            Tensor::from_vec(dbeta, c, dev)?,
        ))
    }
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        if s1.dtype() != s2.dtype() || s1.dtype() != s3.dtype() {
            return fail("batch norm operands differ in dtype");
        }
        typed!(s1.dtype(), T => {
            let out = self.fwd_t::<T>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?);
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dg, db) = typed!(x.dtype(), T => self.bwd_t::<T>(x, gamma, grad))?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Batch normalization over dim 1 of `x`. Returns the output and the
/// statistics that were applied.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    fixed: Option<NormStats>,
) -> CResult<(Tensor, NormStats)> {
    let dims = x.dims();
    let computed = Arc::new(Mutex::new(None));
    let op = BatchNormOp {
        outer: dims[0],
        channels: dims[1],
        inner: dims[2..].iter().product(),
        eps,
        fixed: fixed.clone(),
        computed: computed.clone(),
    };
    let y = x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?;
    let stats = match fixed {
        Some(s) => s,
        None => computed.lock().expect("stats lock").clone().expect("forward ran"),
    };
    Ok((y, stats))
}

/// `out[i] = x[index[i]]` over the flattened input, with `index[i] == len`
/// reading zero.
struct GatherOp {
    index: Arc<Vec<u32>>,
    shape: Vec<usize>,
}

impl GatherOp {
    fn fwd_t<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let zero = T::from_f64(0.0);
        self.index.iter().map(|&i| x.get(i as usize).copied().unwrap_or(zero)).collect()
    }

    fn bwd_t<T: WithDType>(&self, x: &Tensor, grad: &Tensor) -> CResult<Tensor> {
        let n = x.elem_count();
        let dx = read::<T, _>(grad, |g| {
            let mut dx = zeros::<T>(n);
            for (&i, &gi) in self.index.iter().zip(g) {
                if let Some(d) = dx.get_mut(i as usize) {
                    *d += gi;
                }
            }
            Ok(dx)
        })?;
        Tensor::from_vec(dx, x.shape(), x.device())
    }
}

impl CustomOp1 for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        typed!(s.dtype(), T => Ok((T::to_cpu_storage_owned(self.fwd_t::<T>(slice(s, l)?)), Shape::from(self.shape.clone()))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        typed!(x.dtype(), T => self.bwd_t::<T>(x, grad)).map(Some)
    }
}

/// Gathers flattened entries of `x` into a tensor of `shape`; indices equal
/// to the element count of `x` produce zeros.
pub fn gather(x: &Tensor, index: Vec<u32>, shape: &[usize]) -> CResult<Tensor> {
    if index.len() != shape.iter().product::<usize>() {
        return fail(format!("{} indices for output shape {shape:?}", index.len()));
    }
    let n = x.elem_count() as u32;
    if index.iter().any(|&i| i > n) {
        return fail("gather index out of range");
    }
    x.contiguous()?.apply_op1(GatherOp {
        index: Arc::new(index),
        shape: shape.to_vec(),
    })
}

/// 2×2 stride-2 average pooling of `(B, C, H, W)` in ceil mode; windows
/// that overhang the border average only their in-image entries.
struct AvgPool2Op {
    planes: usize,
    h: usize,
    w: usize,
}

impl AvgPool2Op {
    fn out_dims(&self) -> (usize, usize) {
        (self.h.div_ceil(2), self.w.div_ceil(2))
    }

    /// Rows and columns covered by output window `(i, j)`.
    fn window(&self, i: usize, j: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (2 * i..(2 * i + 2).min(self.h), 2 * j..(2 * j + 2).min(self.w))
    }

    fn fwd_t<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_dims();
        let mut out = Vec::with_capacity(self.planes * ho * wo);
        for plane in x.chunks_exact(self.h * self.w) {
            for i in 0..ho {
                for j in 0..wo {
                    let (rows, cols) = self.window(i, j);
                    let n = (rows.len() * cols.len()) as f64;
                    let sum: f64 = rows.flat_map(|r| plane[r * self.w..][cols.clone()].iter()).map(|v| v.to_f64()).sum();
                    out.push(T::from_f64(sum / n));
                }
            }
        }
        out
    }

    fn bwd_t<T: WithDType>(&self, x: &Tensor, grad: &Tensor) -> CResult<Tensor> {
        let (ho, wo) = self.out_dims();
        let dx = read::<T, _>(grad, |g| {
            let mut dx = zeros::<T>(self.planes * self.h * self.w);
            for (plane, gp) in dx.chunks_exact_mut(self.h * self.w).zip(g.chunks_exact(ho * wo)) {
                for i in 0..ho {
                    for j in 0..wo {
                        let (rows, cols) = self.window(i, j);
                        let share = T::from_f64(gp[i * wo + j].to_f64() / (rows.len() * cols.len()) as f64);
                        for r in rows {
                            for d in &mut plane[r * self.w..][cols.clone()] {
                                *d += share;
                            }
                        }
                    }
                }
            }
            Ok(dx)
        })?;
        Tensor::from_vec(dx, x.shape(), x.device())
    }
}

impl CustomOp1 for AvgPool2Op {
    fn name(&self) -> &'static str {
        "avg-pool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = l.shape().dims();
        let (ho, wo) = self.out_dims();
        let shape = Shape::from((dims[0], dims[1], ho, wo));
        typed!(s.dtype(), T => Ok((T::to_cpu_storage_owned(self.fwd_t::<T>(slice(s, l)?)), shape)))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        typed!(x.dtype(), T => self.bwd_t::<T>(x, grad)).map(Some)
    }
}

/// Average pooling with a 2×2 window and stride 2; the output is
/// `ceil(H / 2) × ceil(W / 2)`.
pub fn avg_pool2(x: &Tensor) -> CResult<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.contiguous()?.apply_op1(AvgPool2Op { planes: b * c, h, w })
}

/// Zero-padded patch matrix of a `(B, C, H, W)` input: entry
/// `(b, (ky·k + kx)·C + ch, oy·Wo + ox)` is
/// `x[b, ch, oy·stride + ky·dilation − pad, ox·stride + kx·dilation − pad]`
/// with `pad = dilation·(k − 1) / 2` and `Ho = ceil(H / stride)`.
struct Im2ColOp {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
}

impl Im2ColOp {
    fn out_dims(&self) -> (usize, usize) {
        (self.h.div_ceil(self.stride), self.w.div_ceil(self.stride))
    }

    /// Output positions `lo..hi` along an axis whose input index
    /// `o·stride + offset` lies in `0..len`.
    fn valid(&self, offset: isize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let hi = if (len as isize) <= offset { 0 } else { (len as isize - offset + s - 1) / s };
        let hi = (hi as usize).min(out);
        ((lo as usize).min(hi), hi)
    }

    /// Calls `f(dst, src, n)` for each run of in-image taps: patch entries
    /// `dst + i` read input entry `src + i·stride` for `i < n`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_dims();
        let (c, k) = (self.channels, self.kernel);
        let pad = (self.dilation * (k - 1) / 2) as isize;
        let plane = self.h * self.w;
        for b in 0..self.batch {
            for ky in 0..k {
                let off_y = (ky * self.dilation) as isize - pad;
                let (y_lo, y_hi) = self.valid(off_y, self.h, ho);
                for kx in 0..k {
                    let off_x = (kx * self.dilation) as isize - pad;
                    let (x_lo, x_hi) = self.valid(off_x, self.w, wo);
                    if x_lo == x_hi {
                        continue;
                    }
                    for ch in 0..c {
                        let row = (b * k * k + ky * k + kx) * c + ch;
                        let src = (b * c + ch) * plane;
                        for oy in y_lo..y_hi {
                            let iy = (oy as isize * self.stride as isize + off_y) as usize;
                            let ix0 = (x_lo as isize * self.stride as isize + off_x) as usize;
                            f(row * ho * wo + oy * wo + x_lo, src + iy * self.w + ix0, x_hi - x_lo);
                        }
                    }
                }
            }
        }
    }

    fn fwd_t<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_dims();
        let k = self.kernel;
        let mut out = zeros::<T>(self.batch * k * k * self.channels * ho * wo);
        let s = self.stride;
        self.for_each_tap(|dst, src, n| {
            if s == 1 {
                out[dst..dst + n].copy_from_slice(&x[src..src + n]);
            } else {
                for (i, o) in out[dst..dst + n].iter_mut().enumerate() {
                    *o = x[src + i * s];
                }
            }
        });
        out
    }

    fn bwd_t<T: WithDType>(&self, x: &Tensor, grad: &Tensor) -> CResult<Tensor> {
        let s = self.stride;
        let dx = read::<T, _>(grad, |g| {
            let mut dx = zeros::<T>(x.elem_count());
            self.for_each_tap(|dst, src, n| {
                for (i, &gi) in g[dst..dst + n].iter().enumerate() {
                    dx[src + i * s] += gi;
                }
            });
            Ok(dx)
        })?;
        Tensor::from_vec(dx, x.shape(), x.device())
    }
}

impl CustomOp1 for Im2ColOp {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (ho, wo) = self.out_dims();
        let k = self.kernel;
        let shape = Shape::from((self.batch, k * k * self.channels, ho * wo));
        typed!(s.dtype(), T => Ok((T::to_cpu_storage_owned(self.fwd_t::<T>(slice(s, l)?)), shape)))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        typed!(x.dtype(), T => self.bwd_t::<T>(x, grad)).map(Some)
    }
}

/// Patch matrix `(B, k·k·C, Ho·Wo)` of a `(B, C, H, W)` input for a
/// `k × k` convolution with "same" zero padding; rows are ordered by tap
/// then channel and `Ho = ceil(H / stride)`.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, dilation: usize) -> CResult<Tensor> {
    let (batch, channels, h, w) = x.dims4()?;
    if kernel.is_multiple_of(2) || stride == 0 || dilation == 0 {
        return fail(format!("im2col needs an odd kernel and positive stride and dilation, got {kernel}/{stride}/{dilation}"));
    }
    x.contiguous()?.apply_op1(Im2ColOp {
        batch,
        channels,
        h,
        w,
        kernel,
        stride,
        dilation,
    })
}
