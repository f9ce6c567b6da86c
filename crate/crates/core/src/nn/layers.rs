use candle_core::{DType, Tensor, Var};

use super::fused::{self, batch_norm, NormStats};
use super::{Init, Mode, NnError, ParamStore, Result};

/// Geometry of a square 2-D convolution with "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation: 1,
            bias: false,
        }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    pub fn with_bias(self) -> Self {
        Self { bias: true, ..self }
    }
}

/// Convolution lowered to one matrix product over gathered patches.
/// Weights are `(out, in, k, k)`; padding is `dilation * (k - 1) / 2` so
/// stride 1 keeps the spatial size and stride 2 gives `ceil(H / 2)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        if spec.kernel.is_multiple_of(2) || spec.stride == 0 || spec.stride > 2 || spec.dilation == 0 {
            return Err(NnError::Shape(format!("{name}: unsupported conv {spec:?}")));
        }
        let k = spec.kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[spec.out_ch, spec.in_ch, k, k],
            Init::KaimingNormal {
                fan_in: spec.in_ch * k * k,
            },
        )?;
        let bias = if spec.bias {
            Some(store.param(&format!("{name}.bias"), &[spec.out_ch], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.spec;
        if c != s.in_ch {
            return Err(NnError::Shape(format!("conv expects {} channels, got {c}", s.in_ch)));
        }
        let k = s.kernel;
        let (ho, wo) = (h.div_ceil(s.stride), w.div_ceil(s.stride));
        let wmat = self
            .weight
            .as_tensor()
            .permute((0, 2, 3, 1))?
            .reshape((s.out_ch, k * k * c))?;
        let cols = if k == 1 {
            let x = if s.stride == 2 { subsample2(x)? } else { x.clone() };
            x.reshape((b, c, ho * wo))?
        } else {
            fused::im2col(x, k, s.stride, s.dilation)?
        };
        let y = wmat.broadcast_matmul(&cols)?.reshape((b, s.out_ch, ho, wo))?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.as_tensor().reshape((1, s.out_ch, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Keeps even rows and columns of an even-sized `(B, C, H, W)` map.
fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 == 1 || w % 2 == 1 {
        let x = x.pad_with_zeros(2, 0, h % 2)?.pad_with_zeros(3, 0, w % 2)?;
        return subsample2(&x);
    }
    Ok(x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .narrow(5, 0, 1)?
        .narrow(3, 0, 1)?
        .reshape((b, c, h / 2, w / 2))?)
}

/// Batch normalization over channel dim 1 with learned scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?,
            beta: store.param(&format!("{name}.beta"), &[channels], Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn channels(&self) -> usize {
        self.gamma.dims()[0]
    }

    /// `x` is `(B, C, ...)`; `(M, C)` rows normalize per column.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels();
        let dims = x.dims();
        if dims.len() < 2 || dims[1] != c {
            return Err(NnError::Shape(format!("batch norm over {c} channels got {dims:?}")));
        }
        let fixed = match mode {
            Mode::Train => None,
            Mode::Eval => Some(NormStats {
                mean: self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1()?,
                var: self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1()?,
                count: x.elem_count() / c,
            }),
        };
        let (y, stats) = batch_norm(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps, fixed)?;
        if mode == Mode::Train {
            self.update_running(&stats)?;
        }
        Ok(y)
    }

    /// Exponential moving average with the unbiased batch variance.
    fn update_running(&self, stats: &NormStats) -> Result<()> {
        let m = self.momentum;
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let blend = |old: &Var, new: Vec<f64>| -> Result<()> {
            let old_v: Vec<f64> = old.as_tensor().to_dtype(DType::F64)?.to_vec1()?;
            let v: Vec<f64> = old_v.iter().zip(new).map(|(o, x)| (1.0 - m) * o + m * x).collect();
            old.set(&Tensor::from_vec(v, old_v.len(), old.device())?.to_dtype(old.dtype())?)?;
            Ok(())
        };
        blend(&self.running_mean, stats.mean.clone())?;
        blend(&self.running_var, stats.var.iter().map(|v| v * correction).collect())
    }
}

/// Dense layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[output, input],
            Init::KaimingNormal { fan_in: input },
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[output], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// `x` is `(M, in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}
