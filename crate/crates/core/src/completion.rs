//! Encoder-decoder that completes a BEV feature map into class logits.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::grid::GridSpec;
use crate::nn::{ops, BatchNorm, Conv2d, ConvSpec, Mode, NnError, ParamStore, Result};
use crate::tmap::{TraversabilityMap, NUM_CLASSES};

/// One residual block with two dilated 3×3 groups and channel gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DBlockSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub dilations: (usize, usize),
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct DBlock {
    pub spec: DBlockSpec,
    expand: Conv2d,
    expand_bn: BatchNorm,
    group_a: Conv2d,
    group_b: Conv2d,
    group_bn: BatchNorm,
    squeeze: Conv2d,
    excite: Conv2d,
    project: Conv2d,
    project_bn: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl DBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: DBlockSpec) -> Result<Self> {
        let DBlockSpec {
            in_ch,
            out_ch,
            dilations: (d1, d2),
            stride,
        } = spec;
        if out_ch % 2 != 0 || out_ch < 4 || !(1..=2).contains(&stride) {
            return Err(NnError::Shape(format!("{name}: invalid block {spec:?}")));
        }
        let half = out_ch / 2;
        let reduced = out_ch / 4;
        let shortcut = if stride == 1 && in_ch == out_ch {
            None
        } else {
            Some((
                Conv2d::new(store, &format!("{name}.short"), ConvSpec::new(in_ch, out_ch, 1))?,
                BatchNorm::new(store, &format!("{name}.short_bn"), out_ch)?,
            ))
        };
        Ok(Self {
            spec,
            expand: Conv2d::new(store, &format!("{name}.expand"), ConvSpec::new(in_ch, out_ch, 1))?,
            expand_bn: BatchNorm::new(store, &format!("{name}.expand_bn"), out_ch)?,
            group_a: Conv2d::new(
                store,
                &format!("{name}.group_a"),
                ConvSpec::new(half, half, 3).dilation(d1).stride(stride),
            )?,
            group_b: Conv2d::new(
                store,
                &format!("{name}.group_b"),
                ConvSpec::new(half, half, 3).dilation(d2).stride(stride),
            )?,
            group_bn: BatchNorm::new(store, &format!("{name}.group_bn"), out_ch)?,
            squeeze: Conv2d::new(store, &format!("{name}.se_squeeze"), ConvSpec::new(out_ch, reduced, 1).with_bias())?,
            excite: Conv2d::new(store, &format!("{name}.se_excite"), ConvSpec::new(reduced, out_ch, 1).with_bias())?,
            project: Conv2d::new(store, &format!("{name}.project"), ConvSpec::new(out_ch, out_ch, 1))?,
            project_bn: BatchNorm::new(store, &format!("{name}.project_bn"), out_ch)?,
            shortcut,
        })
    }

    /// Channel gate in (0, 1) of shape `(B, C, 1, 1)`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.squeeze.forward(&ops::global_avg_pool(x)?)?.relu()?;
        ops::sigmoid(&self.excite.forward(&s)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dims4()?.1;
        if c != self.spec.in_ch {
            return Err(NnError::Shape(format!("block expects {} channels, got {c}", self.spec.in_ch)));
        }
        let main = self.main_path(x, mode)?;
        let skip = match &self.shortcut {
            None => x.clone(),
            Some((conv, bn)) => {
                let pooled = if self.spec.stride == 2 { ops::avg_pool2(x)? } else { x.clone() };
                bn.forward(&conv.forward(&pooled)?, mode)?
            }
        };
        Ok((main + skip)?.relu()?)
    }

    /// Residual branch before the sum with the shortcut.
    pub fn main_path(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let half = self.spec.out_ch / 2;
        let h = self.expand_bn.forward(&self.expand.forward(x)?, mode)?.relu()?;
        let a = self.group_a.forward(&h.narrow(1, 0, half)?)?;
        let b = self.group_b.forward(&h.narrow(1, half, half)?)?;
        let h = self.group_bn.forward(&Tensor::cat(&[a, b], 1)?, mode)?.relu()?;
        let h = h.broadcast_mul(&self.gate(&h)?)?;
        self.project_bn.forward(&self.project.forward(&h)?, mode)
    }
}

/// Channel widths of the encoder and decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub blocks: Vec<DBlockSpec>,
    /// Indices of the blocks whose outputs are the 1/4, 1/8 and 1/16 taps.
    pub taps: [usize; 3],
    pub decoder_mid: usize,
    pub decoder_low: usize,
    pub decoder_head: usize,
}

impl BackboneSpec {
    /// Full widths. Strides sit on the 64, 96, first 128 and first 256
    /// blocks so the taps land at 1/4, 1/8 and 1/16.
    pub fn standard(in_ch: usize) -> Self {
        Self::scaled(in_ch, 1)
    }

    /// Every width divided by `divisor` (rounded up to an even number ≥ 4).
    pub fn scaled(in_ch: usize, divisor: usize) -> Self {
        let w = |c: usize| (c.div_ceil(divisor).div_ceil(2) * 2).max(4);
        let mut plan: Vec<(usize, (usize, usize), usize)> = vec![
            (64, (1, 1), 2),
            (96, (1, 1), 2),
            (128, (1, 1), 2),
            (128, (1, 1), 1),
            (128, (1, 1), 1),
            (256, (1, 1), 2),
            (256, (1, 1), 1),
            (256, (1, 2), 1),
        ];
        plan.extend(std::iter::repeat_n((256, (1, 4), 1), 4));
        plan.extend(std::iter::repeat_n((256, (1, 14), 1), 6));
        plan.push((320, (1, 14), 1));
        let mut blocks = Vec::with_capacity(plan.len());
        let mut prev = in_ch;
        for (out, dilations, stride) in plan {
            let out_ch = w(out);
            blocks.push(DBlockSpec {
                in_ch: prev,
                out_ch,
                dilations,
                stride,
            });
            prev = out_ch;
        }
        let taps = [1, 4, blocks.len() - 1];
        Self {
            blocks,
            taps,
            decoder_mid: w(128),
            decoder_low: w(8),
            decoder_head: w(64),
        }
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        self.taps.map(|i| self.blocks[i].out_ch)
    }
}

/// Feature maps at 1/4, 1/8 and 1/16 of the input resolution.
#[derive(Debug, Clone)]
pub struct EncoderTaps {
    pub quarter: Tensor,
    pub eighth: Tensor,
    pub sixteenth: Tensor,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<DBlock>,
    pub taps: [usize; 3],
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: &BackboneSpec) -> Result<Self> {
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| DBlock::new(store, &format!("{name}.b{i:02}"), *b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, taps: spec.taps })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<EncoderTaps> {
        let (_, _, h, w) = x.dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(NnError::Shape(format!("encoder input {h}x{w} is not divisible by 16")));
        }
        let mut out = [None, None, None];
        let mut cur = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            cur = block.forward(&cur, mode)?;
            if let Some(t) = self.taps.iter().position(|&k| k == i) {
                out[t] = Some(cur.clone());
            }
        }
        let [Some(quarter), Some(eighth), Some(sixteenth)] = out else {
            return Err(NnError::Shape("tap index beyond the block list".into()));
        };
        Ok(EncoderTaps {
            quarter,
            eighth,
            sixteenth,
        })
    }
}

/// Convolution followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), spec)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), spec.out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    head16: ConvBnRelu,
    head8: ConvBnRelu,
    head4: ConvBnRelu,
    mid: ConvBnRelu,
    fuse: ConvBnRelu,
    classifier: Conv2d,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: &BackboneSpec) -> Result<Self> {
        let [c4, c8, c16] = spec.tap_channels();
        let (mid, low, head) = (spec.decoder_mid, spec.decoder_low, spec.decoder_head);
        Ok(Self {
            head16: ConvBnRelu::new(store, &format!("{name}.head16"), ConvSpec::new(c16, mid, 1))?,
            head8: ConvBnRelu::new(store, &format!("{name}.head8"), ConvSpec::new(c8, mid, 1))?,
            head4: ConvBnRelu::new(store, &format!("{name}.head4"), ConvSpec::new(c4, low, 1))?,
            mid: ConvBnRelu::new(store, &format!("{name}.mid"), ConvSpec::new(mid, head, 3))?,
            fuse: ConvBnRelu::new(store, &format!("{name}.fuse"), ConvSpec::new(head + low, head, 3))?,
            classifier: Conv2d::new(
                store,
                &format!("{name}.classifier"),
                ConvSpec::new(head, NUM_CLASSES, 1).with_bias(),
            )?,
        })
    }

    /// Penultimate features at 1/4 resolution (`head` channels).
    pub fn features(&self, taps: &EncoderTaps, mode: Mode) -> Result<Tensor> {
        let x16 = self.head16.forward(&taps.sixteenth, mode)?;
        let x8 = self.head8.forward(&taps.eighth, mode)?;
        let (_, _, h8, w8) = x8.dims4()?;
        let x = (ops::resize_bilinear(&x16, h8, w8)? + x8)?;
        let x = self.mid.forward(&x, mode)?;
        let x4 = self.head4.forward(&taps.quarter, mode)?;
        let (_, _, h4, w4) = x4.dims4()?;
        let x = Tensor::cat(&[ops::resize_bilinear(&x, h4, w4)?, x4], 1)?;
        self.fuse.forward(&x, mode)
    }

    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        self.classifier.forward(features)
    }

    /// Logits `(B, 5, H/4, W/4)`.
    pub fn forward(&self, taps: &EncoderTaps, mode: Mode) -> Result<Tensor> {
        self.classify(&self.features(taps, mode)?)
    }
}

/// Encoder and decoder together.
#[derive(Debug, Clone)]
pub struct CompletionNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl CompletionNet {
    pub fn new(store: &mut ParamStore, name: &str, spec: &BackboneSpec) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(store, &format!("{name}.encoder"), spec)?,
            decoder: Decoder::new(store, &format!("{name}.decoder"), spec)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let taps = self.encoder.forward(x, mode)?;
        self.decoder.forward(&taps, mode)
    }
}

/// Class maps at grid resolution: logits are resized bilinearly to the grid
/// and each cell takes the highest-scoring class, lowest id on ties.
pub fn predict(logits: &Tensor, g: &GridSpec) -> Result<Vec<TraversabilityMap>> {
    let (_, k, _, _) = logits.dims4()?;
    if k != NUM_CLASSES {
        return Err(NnError::Shape(format!("expected {NUM_CLASSES} logit channels, got {k}")));
    }
    let full = ops::resize_bilinear(logits, g.height, g.width)?;
    ops::argmax_classes(&full)?
        .into_iter()
        .map(|cells| TraversabilityMap::from_cells(g, cells).map_err(|e| NnError::Shape(e.to_string())))
        .collect()
}
