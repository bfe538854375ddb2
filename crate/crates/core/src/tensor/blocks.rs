//! Reference forwards for the detector building blocks.
//!
//! Every convolution carries its batch-norm already folded into the bias.
//! Unless a layer is marked linear below, it is followed by the block's
//! activation (SiLU by default).
//!
//! | kind                | layers                                                        |
//! |---------------------|---------------------------------------------------------------|
//! | `conv`              | one convolution                                               |
//! | `std_downsample`    | 3x3 s2, C -> 2C                                               |
//! | `scd_downsample`    | 1x1 C -> 2C, then 3x3 depthwise s2 (linear)                   |
//! | `cls_head_standard` | 3x3 C -> h, 3x3 h -> h, 1x1 h -> classes (linear)             |
//! | `cls_head_light`    | dw3x3, 1x1 C -> h, dw3x3, 1x1 h -> h, 1x1 h -> classes (linear)|
//! | `irb`               | x + [1x1 C -> 2C, dw3x3, 1x1 2C -> C]                         |
//! | `irb_dw`            | x + [irb layers, dw3x3]                                       |
//! | `cib`               | x + [dw3x3, 1x1 C -> 2C, dw3x3, 1x1 2C -> C, dw3x3]           |
//! | `lk_cib`            | `cib` with the middle depthwise conv replaced by a 7x7 kernel plus a parallel 3x3 branch |
//! | `psa`               | 1x1, split halves, N x (MHSA, FFN) on one half, concat, 1x1   |
//!
//! Classification heads use `h = max(C, min(classes, 100))` hidden channels.
//! PSA uses `max(1, (C/2) / 64)` heads with query/key width half the value
//! width, no positional encoding, and an FFN with expansion 2.

use alloc::vec;
use alloc::vec::Vec;

use super::conv::{reparam_fuse_lk, Activation, ConvLayer, ConvSpec};
use super::{shape_err, MacCounter, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum BlockSpec {
    Conv(ConvSpec),
    StdDownsample { channels: usize },
    ScdDownsample { channels: usize },
    ClsHeadStandard { channels: usize, num_classes: usize },
    ClsHeadLight { channels: usize, num_classes: usize },
    Irb { channels: usize },
    IrbDw { channels: usize },
    Cib { channels: usize },
    LkCib { channels: usize },
    Psa { channels: usize, n_psa: usize },
}

impl BlockSpec {
    pub const KINDS: [&'static str; 10] = [
        "conv",
        "std_downsample",
        "scd_downsample",
        "cls_head_standard",
        "cls_head_light",
        "irb",
        "irb_dw",
        "cib",
        "lk_cib",
        "psa",
    ];

    pub fn kind_name(&self) -> &'static str {
        match self {
            BlockSpec::Conv(_) => "conv",
            BlockSpec::StdDownsample { .. } => "std_downsample",
            BlockSpec::ScdDownsample { .. } => "scd_downsample",
            BlockSpec::ClsHeadStandard { .. } => "cls_head_standard",
            BlockSpec::ClsHeadLight { .. } => "cls_head_light",
            BlockSpec::Irb { .. } => "irb",
            BlockSpec::IrbDw { .. } => "irb_dw",
            BlockSpec::Cib { .. } => "cib",
            BlockSpec::LkCib { .. } => "lk_cib",
            BlockSpec::Psa { .. } => "psa",
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            BlockSpec::Conv(c) => c.c_in,
            BlockSpec::StdDownsample { channels }
            | BlockSpec::ScdDownsample { channels }
            | BlockSpec::ClsHeadStandard { channels, .. }
            | BlockSpec::ClsHeadLight { channels, .. }
            | BlockSpec::Irb { channels }
            | BlockSpec::IrbDw { channels }
            | BlockSpec::Cib { channels }
            | BlockSpec::LkCib { channels }
            | BlockSpec::Psa { channels, .. } => channels,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if let BlockSpec::Conv(c) = self {
            return c.validate();
        }
        if self.in_channels() == 0 {
            return Err(TensorError::InvalidSpec("channels must be positive".into()));
        }
        match *self {
            BlockSpec::ClsHeadStandard { num_classes, .. } | BlockSpec::ClsHeadLight { num_classes, .. }
                if num_classes == 0 =>
            {
                Err(TensorError::InvalidSpec("num_classes must be positive".into()))
            }
            BlockSpec::Psa { channels, n_psa } => {
                if channels % 2 != 0 {
                    return Err(TensorError::OddChannels(channels));
                }
                if n_psa == 0 {
                    return Err(TensorError::InvalidSpec("n_psa must be positive".into()));
                }
                attention_geometry(channels / 2).map(|_| ())
            }
            _ => Ok(()),
        }
    }

    /// Output `(C, H, W)` for an input of spatial size `h x w`.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize), TensorError> {
        self.validate()?;
        match *self {
            BlockSpec::Conv(c) => {
                let (ho, wo) = c.out_dims(h, w)?;
                Ok((c.c_out, ho, wo))
            }
            BlockSpec::StdDownsample { channels } | BlockSpec::ScdDownsample { channels } => {
                let (ho, wo) = ConvSpec::dense(channels, 2 * channels, 3, 2).out_dims(h, w)?;
                Ok((2 * channels, ho, wo))
            }
            BlockSpec::ClsHeadStandard { num_classes, .. } | BlockSpec::ClsHeadLight { num_classes, .. } => {
                Ok((num_classes, h, w))
            }
            _ => Ok((self.in_channels(), h, w)),
        }
    }
}

/// Hidden width of the classification heads.
pub(crate) fn cls_hidden(channels: usize, num_classes: usize) -> usize {
    channels.max(num_classes.min(100))
}

/// `(heads, head_dim, key_dim)` for attention over `dim` channels.
pub(crate) fn attention_geometry(dim: usize) -> Result<(usize, usize, usize), TensorError> {
    let heads = (dim / 64).max(1);
    if !dim.is_multiple_of(heads) {
        return Err(TensorError::InvalidSpec(alloc::format!(
            "{dim} attention channels do not split into {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let key_dim = head_dim / 2;
    if key_dim == 0 {
        return Err(TensorError::InvalidSpec(alloc::format!(
            "attention over {dim} channels leaves no room for query/key"
        )));
    }
    Ok((heads, head_dim, key_dim))
}

/// The large-kernel depthwise stage of `lk_cib`.
#[derive(Debug, Clone, PartialEq)]
pub enum LargeKernel {
    /// Training-time form: 7x7 and 3x3 depthwise branches summed, then `act`.
    Dual {
        dw7: ConvLayer,
        dw3: ConvLayer,
        act: Activation,
    },
    /// Inference-time form: a single 7x7 depthwise conv.
    Fused(ConvLayer),
}

impl LargeKernel {
    fn forward(&self, x: &Tensor, counter: &mut MacCounter) -> Result<Tensor, TensorError> {
        match self {
            LargeKernel::Dual { dw7, dw3, act } => {
                let mut y = dw7.forward(x, counter)?.add(&dw3.forward(x, counter)?)?;
                act.apply_in_place(&mut y);
                Ok(y)
            }
            LargeKernel::Fused(layer) => layer.forward(x, counter),
        }
    }

    /// Fold the 3x3 branch into the 7x7 kernel.
    pub fn fuse(&self) -> Result<LargeKernel, TensorError> {
        match self {
            LargeKernel::Dual { dw7, dw3, act } => {
                let weight = reparam_fuse_lk(&dw7.weight, &dw3.weight)?;
                let bias = dw7.bias.iter().zip(&dw3.bias).map(|(a, b)| a + b).collect();
                Ok(LargeKernel::Fused(ConvLayer::new(dw7.spec, weight, bias, *act)?))
            }
            LargeKernel::Fused(_) => Ok(self.clone()),
        }
    }
}

/// Multi-head self-attention over the pixels of an NCHW map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// 1x1 conv producing, per head, `key_dim` query, `key_dim` key and
    /// `head_dim` value channels (in that order).
    pub qkv: ConvLayer,
    pub proj: ConvLayer,
    pub heads: usize,
    pub head_dim: usize,
    pub key_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaLayer {
    pub attn: AttentionWeights,
    pub ffn_expand: ConvLayer,
    pub ffn_project: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaWeights {
    pub cv1: ConvLayer,
    pub layers: Vec<PsaLayer>,
    pub cv2: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockBody {
    Chain { layers: Vec<ConvLayer>, residual: bool },
    LkCib {
        head: Vec<ConvLayer>,
        large: LargeKernel,
        tail: Vec<ConvLayer>,
    },
    Psa(PsaWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub spec: BlockSpec,
    pub body: BlockBody,
}

impl BlockWeights {
    /// Fresh weights for `spec`, drawn from `sample` (see [`ConvLayer::init`]).
    pub fn init(spec: BlockSpec, act: Activation, sample: &mut dyn FnMut() -> f64) -> Result<Self, TensorError> {
        spec.validate()?;
        let lin = Activation::Identity;
        let mut layer = |s: ConvSpec, a: Activation| ConvLayer::init(s, a, &mut *sample);
        let body = match spec {
            BlockSpec::Conv(c) => BlockBody::Chain {
                layers: vec![layer(c, act)?],
                residual: false,
            },
            BlockSpec::StdDownsample { channels: c } => BlockBody::Chain {
                layers: vec![layer(ConvSpec::dense(c, 2 * c, 3, 2), act)?],
                residual: false,
            },
            BlockSpec::ScdDownsample { channels: c } => BlockBody::Chain {
                layers: vec![
                    layer(ConvSpec::pointwise(c, 2 * c), act)?,
                    layer(ConvSpec::depthwise(2 * c, 3, 2), lin)?,
                ],
                residual: false,
            },
            BlockSpec::ClsHeadStandard { channels: c, num_classes } => {
                let h = cls_hidden(c, num_classes);
                BlockBody::Chain {
                    layers: vec![
                        layer(ConvSpec::dense(c, h, 3, 1), act)?,
                        layer(ConvSpec::dense(h, h, 3, 1), act)?,
                        layer(ConvSpec::pointwise(h, num_classes), lin)?,
                    ],
                    residual: false,
                }
            }
            BlockSpec::ClsHeadLight { channels: c, num_classes } => {
                let h = cls_hidden(c, num_classes);
                BlockBody::Chain {
                    layers: vec![
                        layer(ConvSpec::depthwise(c, 3, 1), act)?,
                        layer(ConvSpec::pointwise(c, h), act)?,
                        layer(ConvSpec::depthwise(h, 3, 1), act)?,
                        layer(ConvSpec::pointwise(h, h), act)?,
                        layer(ConvSpec::pointwise(h, num_classes), lin)?,
                    ],
                    residual: false,
                }
            }
            BlockSpec::Irb { channels: c } | BlockSpec::IrbDw { channels: c } => {
                let mut layers = vec![
                    layer(ConvSpec::pointwise(c, 2 * c), act)?,
                    layer(ConvSpec::depthwise(2 * c, 3, 1), act)?,
                    layer(ConvSpec::pointwise(2 * c, c), act)?,
                ];
                if matches!(spec, BlockSpec::IrbDw { .. }) {
                    layers.push(layer(ConvSpec::depthwise(c, 3, 1), act)?);
                }
                BlockBody::Chain {
                    layers,
                    residual: true,
                }
            }
            BlockSpec::Cib { channels: c } => BlockBody::Chain {
                layers: vec![
                    layer(ConvSpec::depthwise(c, 3, 1), act)?,
                    layer(ConvSpec::pointwise(c, 2 * c), act)?,
                    layer(ConvSpec::depthwise(2 * c, 3, 1), act)?,
                    layer(ConvSpec::pointwise(2 * c, c), act)?,
                    layer(ConvSpec::depthwise(c, 3, 1), act)?,
                ],
                residual: true,
            },
            BlockSpec::LkCib { channels: c } => BlockBody::LkCib {
                head: vec![
                    layer(ConvSpec::depthwise(c, 3, 1), act)?,
                    layer(ConvSpec::pointwise(c, 2 * c), act)?,
                ],
                large: LargeKernel::Dual {
                    dw7: layer(ConvSpec::depthwise(2 * c, 7, 1), lin)?,
                    dw3: layer(ConvSpec::depthwise(2 * c, 3, 1), lin)?,
                    act,
                },
                tail: vec![
                    layer(ConvSpec::pointwise(2 * c, c), act)?,
                    layer(ConvSpec::depthwise(c, 3, 1), act)?,
                ],
            },
            BlockSpec::Psa { channels: c, n_psa } => {
                let half = c / 2;
                let (heads, head_dim, key_dim) = attention_geometry(half)?;
                let qkv_out = heads * (2 * key_dim + head_dim);
                let cv1 = layer(ConvSpec::pointwise(c, c), act)?;
                let mut layers = Vec::with_capacity(n_psa);
                for _ in 0..n_psa {
                    layers.push(PsaLayer {
                        attn: AttentionWeights {
                            qkv: layer(ConvSpec::pointwise(half, qkv_out), lin)?,
                            proj: layer(ConvSpec::pointwise(half, half), lin)?,
                            heads,
                            head_dim,
                            key_dim,
                        },
                        ffn_expand: layer(ConvSpec::pointwise(half, 2 * half), act)?,
                        ffn_project: layer(ConvSpec::pointwise(2 * half, half), lin)?,
                    });
                }
                let cv2 = layer(ConvSpec::pointwise(c, c), act)?;
                BlockBody::Psa(PsaWeights { cv1, layers, cv2 })
            }
        };
        Ok(BlockWeights { spec, body })
    }

    /// Inference-time weights: large-kernel branches folded, everything else
    /// unchanged.
    pub fn reparameterize(&self) -> Result<BlockWeights, TensorError> {
        let body = match &self.body {
            BlockBody::LkCib { head, large, tail } => BlockBody::LkCib {
                head: head.clone(),
                large: large.fuse()?,
                tail: tail.clone(),
            },
            other => other.clone(),
        };
        Ok(BlockWeights {
            spec: self.spec,
            body,
        })
    }

    pub fn forward(&self, x: &Tensor, counter: &mut MacCounter) -> Result<Tensor, TensorError> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels() {
            return Err(shape_err!(
                "{} expects {} input channels, got {c}",
                self.spec.kind_name(),
                self.spec.in_channels()
            ));
        }
        match &self.body {
            BlockBody::Chain { layers, residual } => {
                let y = run_chain(layers, x, counter)?;
                if *residual {
                    y.add(x)
                } else {
                    Ok(y)
                }
            }
            BlockBody::LkCib { head, large, tail } => {
                let y = run_chain(head, x, counter)?;
                let y = large.forward(&y, counter)?;
                run_chain(tail, &y, counter)?.add(x)
            }
            BlockBody::Psa(w) => psa_forward(w, x, counter),
        }
    }
}

fn run_chain(layers: &[ConvLayer], x: &Tensor, counter: &mut MacCounter) -> Result<Tensor, TensorError> {
    let mut y = x.clone();
    for l in layers {
        y = l.forward(&y, counter)?;
    }
    Ok(y)
}

fn psa_forward(w: &PsaWeights, x: &Tensor, counter: &mut MacCounter) -> Result<Tensor, TensorError> {
    let (_, c, _, _) = x.dims4()?;
    if c % 2 != 0 {
        return Err(TensorError::OddChannels(c));
    }
    let y = w.cv1.forward(x, counter)?;
    let passthrough = y.slice_channels(0, c / 2)?;
    let mut attended = y.slice_channels(c / 2, c)?;
    for layer in &w.layers {
        attended = attended.add(&attention_impl(&attended, &layer.attn, counter, None)?)?;
        let ffn = layer
            .ffn_project
            .forward(&layer.ffn_expand.forward(&attended, counter)?, counter)?;
        attended = attended.add(&ffn)?;
    }
    w.cv2
        .forward(&Tensor::concat_channels(&[&passthrough, &attended])?, counter)
}

fn attention_impl(
    x: &Tensor,
    w: &AttentionWeights,
    counter: &mut MacCounter,
    mut maps: Option<&mut Vec<Tensor>>,
) -> Result<Tensor, TensorError> {
    let (n, c, h, wd) = x.dims4()?;
    if c != w.heads * w.head_dim {
        return Err(shape_err!(
            "attention over {c} channels with {} heads of width {}",
            w.heads,
            w.head_dim
        ));
    }
    let qkv = w.qkv.forward(x, counter)?;
    let per_head = 2 * w.key_dim + w.head_dim;
    if qkv.shape()[1] != w.heads * per_head {
        return Err(shape_err!("qkv projection has {} channels", qkv.shape()[1]));
    }
    let tokens = h * wd;
    let scale = 1.0 / libm::sqrt(w.key_dim as f64);
    let src = qkv.data();
    let mut out = vec![0.0; n * c * tokens];
    let mut scores = vec![0.0; tokens * tokens];
    let mut macs = 0u64;

    for b in 0..n {
        for head in 0..w.heads {
            let chan = |offset: usize, d: usize| {
                let ch = head * per_head + offset + d;
                &src[(b * w.heads * per_head + ch) * tokens..][..tokens]
            };
            for i in 0..tokens {
                for j in 0..tokens {
                    let mut dot = 0.0;
                    for d in 0..w.key_dim {
                        dot += chan(0, d)[i] * chan(w.key_dim, d)[j];
                        macs += 1;
                    }
                    scores[i * tokens + j] = dot * scale;
                }
            }
            for row in scores.chunks_mut(tokens) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = libm::exp(*v - max);
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            for d in 0..w.head_dim {
                let v = chan(2 * w.key_dim, d);
                let dst = &mut out[(b * c + head * w.head_dim + d) * tokens..][..tokens];
                for i in 0..tokens {
                    let mut acc = 0.0;
                    for j in 0..tokens {
                        acc += scores[i * tokens + j] * v[j];
                        macs += 1;
                    }
                    dst[i] = acc;
                }
            }
            if let Some(m) = maps.as_deref_mut() {
                m.push(Tensor::new(vec![tokens, tokens], scores.clone())?);
            }
        }
    }
    counter.macs += macs;
    let attended = Tensor::new(vec![n, c, h, wd], out)?;
    w.proj.forward(&attended, counter)
}

/// Multi-head self-attention (including the output projection).
pub fn attention_forward(x: &Tensor, w: &AttentionWeights) -> Result<Tensor, TensorError> {
    attention_impl(x, w, &mut MacCounter::new(), None)
}

/// Softmax attention matrices, one `(tokens, tokens)` tensor per image and
/// head, in `(image, head)` order.
pub fn attention_maps(x: &Tensor, w: &AttentionWeights) -> Result<Vec<Tensor>, TensorError> {
    let mut maps = Vec::new();
    attention_impl(x, w, &mut MacCounter::new(), Some(&mut maps))?;
    Ok(maps)
}

/// Forward pass of a block. `spec` must match the spec the weights were
/// built for.
pub fn forward_block(x: &Tensor, spec: &BlockSpec, weights: &BlockWeights) -> Result<Tensor, TensorError> {
    forward_block_counted(x, spec, weights, &mut MacCounter::new())
}

pub fn forward_block_counted(
    x: &Tensor,
    spec: &BlockSpec,
    weights: &BlockWeights,
    counter: &mut MacCounter,
) -> Result<Tensor, TensorError> {
    if *spec != weights.spec {
        return Err(shape_err!(
            "weights were built for {:?}, not {:?}",
            weights.spec,
            spec
        ));
    }
    weights.forward(x, counter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut k = seed;
        move || {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (k >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    fn input(shape: &[usize], seed: u64) -> Tensor {
        Tensor::from_fn(shape, lcg(seed)).unwrap()
    }

    fn build(spec: BlockSpec) -> BlockWeights {
        BlockWeights::init(spec, Activation::Silu, &mut lcg(7)).unwrap()
    }

    #[test]
    fn output_shapes() {
        let cases = [
            (BlockSpec::Psa { channels: 64, n_psa: 1 }, [1, 64, 8, 8], [1, 64, 8, 8]),
            (BlockSpec::ScdDownsample { channels: 32 }, [1, 32, 64, 64], [1, 64, 32, 32]),
            (BlockSpec::StdDownsample { channels: 4 }, [2, 4, 8, 6], [2, 8, 4, 3]),
            (BlockSpec::Cib { channels: 4 }, [1, 4, 5, 5], [1, 4, 5, 5]),
            (BlockSpec::LkCib { channels: 4 }, [1, 4, 5, 5], [1, 4, 5, 5]),
            (BlockSpec::Irb { channels: 4 }, [1, 4, 5, 5], [1, 4, 5, 5]),
            (BlockSpec::IrbDw { channels: 4 }, [1, 4, 5, 5], [1, 4, 5, 5]),
            (
                BlockSpec::ClsHeadLight { channels: 8, num_classes: 3 },
                [1, 8, 4, 4],
                [1, 3, 4, 4],
            ),
            (
                BlockSpec::ClsHeadStandard { channels: 8, num_classes: 3 },
                [1, 8, 4, 4],
                [1, 3, 4, 4],
            ),
        ];
        for (spec, inp, out) in cases {
            let w = build(spec);
            let y = forward_block(&input(&inp, 1), &spec, &w).unwrap();
            assert_eq!(y.shape(), &out, "{}", spec.kind_name());
            assert!(y.is_finite());
            let (c, h, wd) = spec.output_dims(inp[2], inp[3]).unwrap();
            assert_eq!([inp[0], c, h, wd], out);
        }
    }

    #[test]
    fn psa_rejects_odd_channels() {
        assert_eq!(
            BlockSpec::Psa { channels: 7, n_psa: 1 }.validate(),
            Err(TensorError::OddChannels(7))
        );
        assert!(BlockWeights::init(
            BlockSpec::Psa { channels: 7, n_psa: 1 },
            Activation::Silu,
            &mut lcg(1)
        )
        .is_err());
    }

    #[test]
    fn wrong_input_channels() {
        let spec = BlockSpec::Cib { channels: 4 };
        let w = build(spec);
        assert!(matches!(
            forward_block(&input(&[1, 3, 4, 4], 1), &spec, &w),
            Err(TensorError::ShapeMismatch(_))
        ));
        let other = BlockSpec::Cib { channels: 8 };
        assert!(forward_block(&input(&[1, 4, 4, 4], 1), &other, &w).is_err());
    }

    #[test]
    fn uniform_attention_is_token_mean() {
        // 4 channels -> 1 head, head_dim 4, key_dim 2
        let (heads, head_dim, key_dim) = attention_geometry(4).unwrap();
        assert_eq!((heads, head_dim, key_dim), (1, 4, 2));
        let per_head = 2 * key_dim + head_dim;
        // q, k rows zero; v = identity on the input; proj = identity
        let mut qkv_w = Tensor::zeros(&[per_head, 4, 1, 1]).unwrap();
        for d in 0..head_dim {
            qkv_w.data_mut()[(2 * key_dim + d) * 4 + d] = 1.0;
        }
        let mut proj_w = Tensor::zeros(&[4, 4, 1, 1]).unwrap();
        for d in 0..4 {
            proj_w.data_mut()[d * 4 + d] = 1.0;
        }
        let w = AttentionWeights {
            qkv: ConvLayer::new(ConvSpec::pointwise(4, per_head), qkv_w, vec![0.0; per_head], Activation::Identity)
                .unwrap(),
            proj: ConvLayer::new(ConvSpec::pointwise(4, 4), proj_w, vec![0.0; 4], Activation::Identity).unwrap(),
            heads,
            head_dim,
            key_dim,
        };
        let x = input(&[2, 4, 3, 3], 5);
        let y = attention_forward(&x, &w).unwrap();
        for b in 0..2 {
            for ch in 0..4 {
                let plane = &x.data()[(b * 4 + ch) * 9..][..9];
                let mean = plane.iter().sum::<f64>() / 9.0;
                for v in &y.data()[(b * 4 + ch) * 9..][..9] {
                    assert!((v - mean).abs() < 1e-12);
                }
            }
        }
        for m in attention_maps(&x, &w).unwrap() {
            assert!(m.data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let spec = BlockSpec::Psa { channels: 16, n_psa: 2 };
        let w = build(spec);
        let x = input(&[1, 8, 4, 4], 3);
        let BlockBody::Psa(psa) = &w.body else { unreachable!() };
        let maps = attention_maps(&x, &psa.layers[0].attn).unwrap();
        assert_eq!(maps.len(), 1);
        for row in maps[0].data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lk_cib_reparameterization_preserves_output() {
        let spec = BlockSpec::LkCib { channels: 3 };
        let w = build(spec);
        let fused = w.reparameterize().unwrap();
        assert!(matches!(
            fused.body,
            BlockBody::LkCib {
                large: LargeKernel::Fused(_),
                ..
            }
        ));
        let x = input(&[1, 3, 9, 9], 11);
        let a = forward_block(&x, &spec, &w).unwrap();
        let b = forward_block(&x, &spec, &fused).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn forwards_are_deterministic() {
        let spec = BlockSpec::Psa { channels: 8, n_psa: 1 };
        let w = build(spec);
        let x = input(&[1, 8, 3, 3], 9);
        assert_eq!(forward_block(&x, &spec, &w).unwrap(), forward_block(&x, &spec, &w).unwrap());
    }

    #[test]
    fn head_geometry() {
        assert_eq!(attention_geometry(128).unwrap(), (2, 64, 32));
        assert_eq!(attention_geometry(32).unwrap(), (1, 32, 16));
        assert!(attention_geometry(1).is_err());
        assert!(attention_geometry(200).is_err());
    }
}
