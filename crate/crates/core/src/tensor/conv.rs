use alloc::vec;
use alloc::vec::Vec;

use super::{shape_err, MacCounter, Tensor, TensorError};

/// Geometry of one 2-D convolution. Zero padding, square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Dense `k x k` convolution with "same" padding.
    pub fn dense(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self::dense(c_in, c_out, 1, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            c_in: channels,
            c_out: channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: channels,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.c_in == 0 || self.c_out == 0 || self.kernel == 0 || self.stride == 0 || self.groups == 0
        {
            return Err(TensorError::InvalidSpec(alloc::format!(
                "conv dimensions must be positive: {self:?}"
            )));
        }
        if !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(TensorError::InvalidSpec(alloc::format!(
                "channels not divisible by groups: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.kernel, self.kernel]
    }

    /// Output spatial size, `floor((x + 2p - k) / s) + 1` per axis.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let span = |x: usize| -> Result<usize, TensorError> {
            let padded = x + 2 * self.padding;
            if padded < self.kernel {
                return Err(shape_err!(
                    "input extent {x} (+2*{}) smaller than kernel {}",
                    self.padding,
                    self.kernel
                ));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }
}

/// Direct cross-correlation. `bias` is optional, one value per output channel.
pub fn conv2d_ref(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Tensor, TensorError> {
    conv2d_counted(x, w, bias, spec, &mut MacCounter::new())
}

/// [`conv2d_ref`] that also tallies every multiply-accumulate it executes.
///
/// Padded taps are executed against an implicit zero, so the count is the
/// dense `Ho * Wo * C_out * K^2 * C_in / groups` per image.
pub fn conv2d_counted(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
    counter: &mut MacCounter,
) -> Result<Tensor, TensorError> {
    spec.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if c != spec.c_in {
        return Err(shape_err!("input has {c} channels, conv expects {}", spec.c_in));
    }
    if w.shape() != spec.weight_shape() {
        return Err(shape_err!(
            "weight {:?} does not match {:?}",
            w.shape(),
            spec.weight_shape()
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.c_out {
            return Err(shape_err!("bias has {} entries for {} channels", b.len(), spec.c_out));
        }
    }
    let (ho, wo) = spec.out_dims(h, wd)?;
    let k = spec.kernel;
    let cin_g = spec.c_in / spec.groups;
    let cout_g = spec.c_out / spec.groups;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0.0; n * spec.c_out * ho * wo];
    let mut taps = 0u64;

    for b in 0..n {
        for oc in 0..spec.c_out {
            let g = oc / cout_g;
            let b0 = bias.map_or(0.0, |bv| bv[oc]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b0;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        let x_plane = (b * c + ic) * h * wd;
                        let w_base = (oc * cin_g + icg) * k * k;
                        for ky in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            for kx in 0..k {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                {
                                    xs[x_plane + iy as usize * wd + ix as usize]
                                } else {
                                    0.0
                                };
                                acc += v * ws[w_base + ky * k + kx];
                                taps += 1;
                            }
                        }
                    }
                    out[((b * spec.c_out + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    counter.macs += taps;
    Tensor::new(vec![n, spec.c_out, ho, wo], out)
}

/// Per-channel inference-mode batch normalization statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<(), TensorError> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(shape_err!("batch-norm statistics have different lengths"));
        }
        if self.var.iter().any(|v| *v < 0.0) || self.eps < 0.0 {
            return Err(TensorError::InvalidSpec("negative variance or eps".into()));
        }
        Ok(())
    }

    fn scale(&self, c: usize) -> f64 {
        self.gamma[c] / libm::sqrt(self.var[c] + self.eps)
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel of an NCHW tensor.
pub fn batch_norm(x: &Tensor, bn: &BatchNorm) -> Result<Tensor, TensorError> {
    bn.validate()?;
    let (n, c, h, w) = x.dims4()?;
    if c != bn.channels() {
        return Err(shape_err!("{c} channels, batch-norm has {}", bn.channels()));
    }
    let mut out = x.clone();
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let s = bn.scale(ch);
            let base = (b * c + ch) * plane;
            for v in &mut out.data_mut()[base..base + plane] {
                *v = (*v - bn.mean[ch]) * s + bn.beta[ch];
            }
        }
    }
    Ok(out)
}

/// Fold inference batch-norm into the preceding convolution so that
/// `conv(x; w', b') == bn(conv(x; w, b))`.
pub fn bn_fold(w: &Tensor, b: &[f64], bn: &BatchNorm) -> Result<(Tensor, Vec<f64>), TensorError> {
    bn.validate()?;
    let c_out = w.shape()[0];
    if bn.channels() != c_out || b.len() != c_out {
        return Err(shape_err!(
            "weight has {c_out} output channels, bias {} and batch-norm {}",
            b.len(),
            bn.channels()
        ));
    }
    let per_out = w.len() / c_out;
    let mut wf = w.clone();
    for (oc, chunk) in wf.data_mut().chunks_mut(per_out).enumerate() {
        let s = bn.scale(oc);
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    let bf = (0..c_out)
        .map(|oc| (b[oc] - bn.mean[oc]) * bn.scale(oc) + bn.beta[oc])
        .collect();
    Ok((wf, bf))
}

/// Add a smaller odd kernel into the centre of a larger one. Both weights
/// must share `(C_out, C_in / groups)`.
pub fn fuse_centered(big: &Tensor, small: &Tensor) -> Result<Tensor, TensorError> {
    let (bs, ss) = (big.shape(), small.shape());
    if bs.len() != 4 || ss.len() != 4 || bs[..2] != ss[..2] {
        return Err(shape_err!("cannot fuse {bs:?} with {ss:?}"));
    }
    let (kb, ks) = (bs[2], ss[2]);
    if bs[3] != kb || ss[3] != ks || kb % 2 == 0 || ks % 2 == 0 || ks > kb {
        return Err(shape_err!("kernels must be square, odd and nested: {bs:?} / {ss:?}"));
    }
    let off = (kb - ks) / 2;
    let mut fused = big.clone();
    let planes = bs[0] * bs[1];
    for p in 0..planes {
        for y in 0..ks {
            for x in 0..ks {
                fused.data_mut()[p * kb * kb + (y + off) * kb + x + off] +=
                    small.data()[p * ks * ks + y * ks + x];
            }
        }
    }
    Ok(fused)
}

/// Merge a 3x3 depthwise branch into a parallel 7x7 depthwise kernel.
///
/// With the 7x7 branch padded by 3 and the 3x3 branch padded by 1 (same
/// stride), convolving with the result equals the sum of both branches.
pub fn reparam_fuse_lk(dw7: &Tensor, dw3: &Tensor) -> Result<Tensor, TensorError> {
    match (dw7.shape(), dw3.shape()) {
        ([c7, 1, 7, 7], [c3, 1, 3, 3]) if c7 == c3 => fuse_centered(dw7, dw3),
        (a, b) => Err(shape_err!("expected (C,1,7,7) and (C,1,3,3), got {a:?} and {b:?}")),
    }
}

/// Pointwise nonlinearity applied after a (BN-folded) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Silu => v / (1.0 + libm::exp(-v)),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    pub(crate) fn apply_in_place(self, t: &mut Tensor) {
        if self != Activation::Identity {
            t.data_mut().iter_mut().for_each(|v| *v = self.apply(*v));
        }
    }
}

/// Convolution with folded batch-norm bias and an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub act: Activation,
}

impl ConvLayer {
    pub fn new(spec: ConvSpec, weight: Tensor, bias: Vec<f64>, act: Activation) -> Result<Self, TensorError> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() || bias.len() != spec.c_out {
            return Err(shape_err!(
                "weight {:?} / bias {} do not match {:?}",
                weight.shape(),
                bias.len(),
                spec
            ));
        }
        Ok(ConvLayer {
            spec,
            weight,
            bias,
            act,
        })
    }

    /// Weights drawn from `sample`, scaled by `1 / sqrt(fan_in)`; biases
    /// scaled by 0.1.
    pub fn init(spec: ConvSpec, act: Activation, sample: &mut dyn FnMut() -> f64) -> Result<Self, TensorError> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let gain = 1.0 / libm::sqrt(fan_in);
        let weight = Tensor::from_fn(&shape, || sample() * gain)?;
        let bias = (0..spec.c_out).map(|_| sample() * 0.1).collect();
        Self::new(spec, weight, bias, act)
    }

    pub fn forward(&self, x: &Tensor, counter: &mut MacCounter) -> Result<Tensor, TensorError> {
        let mut y = conv2d_counted(x, &self.weight, Some(&self.bias), &self.spec, counter)?;
        self.act.apply_in_place(&mut y);
        Ok(y)
    }
}
