use super::blocks::{attention_geometry, cls_hidden, BlockSpec};
use super::conv::ConvSpec;
use super::TensorError;

/// Exact multiply-accumulate and weight counts of one block.
///
/// `formula_*` hold the closed forms for the two downsampling layers,
/// `9/2 HWC^2` / `18 C^2` for the standard stride-2 conv and
/// `2 HWC^2 + 9/2 HWC` / `2 C^2 + 18 C` for the decoupled pointwise +
/// depthwise pair. They are `None` for other kinds and for odd `H` or `W`,
/// where the halved resolution is not exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostReport {
    pub macs: u64,
    pub params: u64,
    pub formula_macs: Option<u64>,
    pub formula_params: Option<u64>,
}

impl CostReport {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Default)]
struct Tally {
    macs: u64,
    params: u64,
}

impl Tally {
    /// Adds one conv and returns its output spatial size.
    fn conv(&mut self, spec: ConvSpec, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        let (ho, wo) = spec.out_dims(h, w)?;
        let per_out = (spec.kernel * spec.kernel * (spec.c_in / spec.groups)) as u64;
        self.macs += (ho * wo * spec.c_out) as u64 * per_out;
        self.params += spec.c_out as u64 * per_out;
        Ok((ho, wo))
    }

    fn chain(&mut self, specs: &[ConvSpec], mut h: usize, mut w: usize) -> Result<(usize, usize), TensorError> {
        for s in specs {
            (h, w) = self.conv(*s, h, w)?;
        }
        Ok((h, w))
    }
}

/// Count MACs and parameters of `spec` on an `h x w` input from its layer
/// structure. Biases are excluded; PSA attention matmuls are included.
pub fn count_cost(spec: &BlockSpec, h: usize, w: usize) -> Result<CostReport, TensorError> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return Err(TensorError::InvalidSpec("spatial dims must be positive".into()));
    }
    let mut t = Tally::default();
    let (mut formula_macs, mut formula_params) = (None, None);
    let even = h.is_multiple_of(2) && w.is_multiple_of(2);
    let hw = (h * w) as u64;

    match *spec {
        BlockSpec::Conv(c) => {
            t.conv(c, h, w)?;
        }
        BlockSpec::StdDownsample { channels: c } => {
            t.conv(ConvSpec::dense(c, 2 * c, 3, 2), h, w)?;
            let c = c as u64;
            if even {
                formula_macs = Some(9 * hw * c * c / 2);
            }
            formula_params = Some(18 * c * c);
        }
        BlockSpec::ScdDownsample { channels: c } => {
            t.chain(&[ConvSpec::pointwise(c, 2 * c), ConvSpec::depthwise(2 * c, 3, 2)], h, w)?;
            let c = c as u64;
            if even {
                formula_macs = Some(2 * hw * c * c + 9 * hw * c / 2);
            }
            formula_params = Some(2 * c * c + 18 * c);
        }
        BlockSpec::ClsHeadStandard { channels: c, num_classes } => {
            let hid = cls_hidden(c, num_classes);
            t.chain(
                &[
                    ConvSpec::dense(c, hid, 3, 1),
                    ConvSpec::dense(hid, hid, 3, 1),
                    ConvSpec::pointwise(hid, num_classes),
                ],
                h,
                w,
            )?;
        }
        BlockSpec::ClsHeadLight { channels: c, num_classes } => {
            let hid = cls_hidden(c, num_classes);
            t.chain(
                &[
                    ConvSpec::depthwise(c, 3, 1),
                    ConvSpec::pointwise(c, hid),
                    ConvSpec::depthwise(hid, 3, 1),
                    ConvSpec::pointwise(hid, hid),
                    ConvSpec::pointwise(hid, num_classes),
                ],
                h,
                w,
            )?;
        }
        BlockSpec::Irb { channels: c } => {
            t.chain(
                &[
                    ConvSpec::pointwise(c, 2 * c),
                    ConvSpec::depthwise(2 * c, 3, 1),
                    ConvSpec::pointwise(2 * c, c),
                ],
                h,
                w,
            )?;
        }
        BlockSpec::IrbDw { channels: c } => {
            t.chain(
                &[
                    ConvSpec::pointwise(c, 2 * c),
                    ConvSpec::depthwise(2 * c, 3, 1),
                    ConvSpec::pointwise(2 * c, c),
                    ConvSpec::depthwise(c, 3, 1),
                ],
                h,
                w,
            )?;
        }
        BlockSpec::Cib { channels: c } => {
            t.chain(
                &[
                    ConvSpec::depthwise(c, 3, 1),
                    ConvSpec::pointwise(c, 2 * c),
                    ConvSpec::depthwise(2 * c, 3, 1),
                    ConvSpec::pointwise(2 * c, c),
                    ConvSpec::depthwise(c, 3, 1),
                ],
                h,
                w,
            )?;
        }
        BlockSpec::LkCib { channels: c } => {
            // Training-time form: both large-kernel branches are executed.
            t.chain(
                &[
                    ConvSpec::depthwise(c, 3, 1),
                    ConvSpec::pointwise(c, 2 * c),
                    ConvSpec::depthwise(2 * c, 7, 1),
                    ConvSpec::depthwise(2 * c, 3, 1),
                    ConvSpec::pointwise(2 * c, c),
                    ConvSpec::depthwise(c, 3, 1),
                ],
                h,
                w,
            )?;
        }
        BlockSpec::Psa { channels: c, n_psa } => {
            let half = c / 2;
            let (heads, head_dim, key_dim) = attention_geometry(half)?;
            let tokens = hw;
            t.conv(ConvSpec::pointwise(c, c), h, w)?;
            for _ in 0..n_psa {
                t.conv(ConvSpec::pointwise(half, heads * (2 * key_dim + head_dim)), h, w)?;
                t.macs += heads as u64 * tokens * tokens * (key_dim + head_dim) as u64;
                t.chain(
                    &[
                        ConvSpec::pointwise(half, half),
                        ConvSpec::pointwise(half, 2 * half),
                        ConvSpec::pointwise(2 * half, half),
                    ],
                    h,
                    w,
                )?;
            }
            t.conv(ConvSpec::pointwise(c, c), h, w)?;
        }
    }

    Ok(CostReport {
        macs: t.macs,
        params: t.params,
        formula_macs,
        formula_params,
    })
}
