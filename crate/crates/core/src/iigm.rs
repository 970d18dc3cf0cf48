//! Indirect interactive guidance between three adjacent bank outputs.
//!
//! The middle level mediates: the high and middle levels are upsampled to gate
//! the low level, and the low and middle levels are downsampled to gate the
//! high level. Both gates act residually, `I = FB + FB * W`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::BoundConv;
use crate::tensor::{Graph, Var};

/// The four 3x3 convolutions of one group.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceConvs {
    /// Upsampled middle level -> low-level channels.
    pub high_from_mid: BoundConv,
    /// Upsampled high level -> low-level channels.
    pub high_from_hi: BoundConv,
    /// Downsampled low level -> high-level channels.
    pub low_from_lo: BoundConv,
    /// Downsampled middle level -> high-level channels.
    pub low_from_mid: BoundConv,
}

#[derive(Clone, Copy, Debug)]
pub struct GuidanceWeights {
    /// Gate for the low level, shaped like `fb_lo`.
    pub w_high: Var,
    /// Gate for the high level, shaped like `fb_hi`.
    pub w_low: Var,
}

/// Outputs of one group: guided low and high levels.
#[derive(Clone, Copy, Debug)]
pub struct GroupOutput {
    pub weights: GuidanceWeights,
    pub i_lo: Var,
    pub i_hi: Var,
}

fn check_conv(p: &BoundConv, from: usize, to: usize, what: &str) -> Result<()> {
    if p.in_channels != from || p.out_channels != to {
        return Err(Error::Config(format!(
            "guidance conv `{}` maps {} -> {}, needs {} -> {}",
            what, p.in_channels, p.out_channels, from, to
        )));
    }
    Ok(())
}

fn dims(g: &Graph, v: Var) -> Result<(usize, usize, usize)> {
    match g.shape(v)[..] {
        [_, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim("rank", format!("expected [B,C,H,W], got {:?}", s))),
    }
}

/// One guidance group over `(FB_{i-1}, FB_i, FB_{i+1})`.
pub fn iigm_group(g: &Graph, fb_lo: Var, fb_mid: Var, fb_hi: Var, convs: &GuidanceConvs) -> Result<GroupOutput> {
    let (c_lo, h_lo, w_lo) = dims(g, fb_lo)?;
    let (c_mid, _, _) = dims(g, fb_mid)?;
    let (c_hi, h_hi, w_hi) = dims(g, fb_hi)?;
    check_conv(&convs.high_from_mid, c_mid, c_lo, "high_from_mid")?;
    check_conv(&convs.high_from_hi, c_hi, c_lo, "high_from_hi")?;
    check_conv(&convs.low_from_lo, c_lo, c_hi, "low_from_lo")?;
    check_conv(&convs.low_from_mid, c_mid, c_hi, "low_from_mid")?;

    let up_mid = g.bilinear_resize(fb_mid, h_lo, w_lo)?;
    let up_hi = g.bilinear_resize(fb_hi, h_lo, w_lo)?;
    let w_high = g.sigmoid(g.add(
        convs.high_from_mid.apply(g, up_mid)?,
        convs.high_from_hi.apply(g, up_hi)?,
    )?);

    let down_lo = g.bilinear_resize(fb_lo, h_hi, w_hi)?;
    let down_mid = g.bilinear_resize(fb_mid, h_hi, w_hi)?;
    let w_low = g.sigmoid(g.add(
        convs.low_from_lo.apply(g, down_lo)?,
        convs.low_from_mid.apply(g, down_mid)?,
    )?);

    let i_hi = g.add(fb_hi, g.mul(fb_hi, w_low)?)?;
    let i_lo = g.add(fb_lo, g.mul(fb_lo, w_high)?)?;
    Ok(GroupOutput {
        weights: GuidanceWeights { w_high, w_low },
        i_lo,
        i_hi,
    })
}

/// Guided features `I_i` for levels 2..=5.
#[derive(Clone, Debug, Default)]
pub struct GuidedPyramid {
    pub levels: BTreeMap<usize, Var>,
}

impl GuidedPyramid {
    /// Bank outputs passed through untouched (guidance disabled).
    pub fn identity(fb: &BTreeMap<usize, Var>) -> Result<Self> {
        require_levels(fb)?;
        Ok(Self { levels: fb.clone() })
    }

    pub fn get(&self, level: usize) -> Result<Var> {
        self.levels
            .get(&level)
            .copied()
            .ok_or_else(|| Error::Contract(format!("guided level {} missing", level)))
    }
}

fn require_levels(fb: &BTreeMap<usize, Var>) -> Result<()> {
    for level in 2..=5 {
        if !fb.contains_key(&level) {
            return Err(Error::Contract(format!("bank output for level {} missing", level)));
        }
    }
    Ok(())
}

/// Two groups centred on levels 3 and 4. The first yields `I_2` and `I_4`,
/// the second `I_3` and `I_5`, so every level is written exactly once.
pub fn iigm_all(g: &Graph, fb: &BTreeMap<usize, Var>, group3: &GuidanceConvs, group4: &GuidanceConvs) -> Result<GuidedPyramid> {
    require_levels(fb)?;
    let a = iigm_group(g, fb[&2], fb[&3], fb[&4], group3)?;
    let b = iigm_group(g, fb[&3], fb[&4], fb[&5], group4)?;
    let mut levels = BTreeMap::new();
    levels.insert(2, a.i_lo);
    levels.insert(4, a.i_hi);
    levels.insert(3, b.i_lo);
    levels.insert(5, b.i_hi);
    Ok(GuidedPyramid { levels })
}
