//! The adaptive fusion bank.
//!
//! Five small fusion schemes each combine RGB and auxiliary (thermal or depth)
//! features in a way suited to one scene challenge. Their outputs are
//! concatenated in the fixed order `cb, sv, ic, li, td` and re-weighted per
//! channel by the adaptive ensemble module (AEM):
//!
//! ```text
//! f_C = [f_cb, f_sv, f_ic, f_li, f_td]
//! V   = sigmoid(Conv1x1(GAP(f_C)) + Conv1x1(GMP(f_C)))
//! FB  = V * f_C
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::BoundConv;
use crate::tensor::{Graph, Var};

/// A fusion scheme, named after the challenge it targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    /// Center bias: plain 3x3 conv block.
    Cb,
    /// Scale variation: dilated 3x3 conv block.
    Sv,
    /// Image clutter: two conv blocks with a residual.
    Ic,
    /// Low illumination: auxiliary features gate the RGB stream.
    Li,
    /// Thermal crossover / depth ambiguity: RGB features gate the auxiliary stream.
    Td,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Cb, Scheme::Sv, Scheme::Ic, Scheme::Li, Scheme::Td];

    pub fn code(self) -> &'static str {
        match self {
            Scheme::Cb => "cb",
            Scheme::Sv => "sv",
            Scheme::Ic => "ic",
            Scheme::Li => "li",
            Scheme::Td => "td",
        }
    }

    pub fn position(self) -> usize {
        Scheme::ALL.iter().position(|s| *s == self).unwrap()
    }

    /// Parses a comma-separated list such as `cb,li`.
    pub fn parse_list(s: &str) -> Result<Vec<Scheme>> {
        let mut out: Vec<Scheme> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let scheme: Scheme = part.parse()?;
            if out.contains(&scheme) {
                return Err(Error::Config(format!("scheme `{}` listed twice", part)));
            }
            out.push(scheme);
        }
        out.sort();
        Ok(out)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown fusion scheme `{}`", s)))
    }
}

/// Paired per-level features of the two streams plus their concatenation.
#[derive(Clone, Copy, Debug)]
pub struct ModalFeatures {
    pub level: usize,
    pub f_r: Var,
    pub f_aux: Var,
    /// `[f_r, f_aux]` along channels.
    pub f_cat: Var,
    pub channels: usize,
}

impl ModalFeatures {
    pub fn new(g: &Graph, level: usize, f_r: Var, f_aux: Var) -> Result<Self> {
        let (sr, sa) = (g.shape(f_r), g.shape(f_aux));
        if sr != sa {
            return Err(Error::dim(
                "shape",
                format!("rgb features {:?} vs auxiliary features {:?}", sr, sa),
            ));
        }
        if sr.len() != 4 {
            return Err(Error::dim("rank", format!("features must be [B,C,H,W], got {:?}", sr)));
        }
        let f_cat = g.concat_channels(&[f_r, f_aux])?;
        Ok(Self {
            level,
            f_r,
            f_aux,
            f_cat,
            channels: sr[1],
        })
    }

    /// The same features with the two streams exchanged.
    pub fn swapped(&self, g: &Graph) -> Result<Self> {
        Self::new(g, self.level, self.f_aux, self.f_r)
    }
}

fn expect_in(p: &BoundConv, want: usize, what: &str) -> Result<()> {
    if p.in_channels != want {
        return Err(Error::dim(
            "in_channels",
            format!("{} conv takes {} channels, features have {}", what, p.in_channels, want),
        ));
    }
    Ok(())
}

/// Center-bias scheme: `Conv(f_A)`.
pub fn fuse_cb(g: &Graph, m: &ModalFeatures, p: &BoundConv) -> Result<Var> {
    expect_in(p, 2 * m.channels, "cb")?;
    p.block(g, m.f_cat)
}

/// Scale-variation scheme: dilation-2 conv block on `f_A`.
pub fn fuse_sv(g: &Graph, m: &ModalFeatures, p: &BoundConv) -> Result<Var> {
    expect_in(p, 2 * m.channels, "sv")?;
    p.block(g, m.f_cat)
}

/// Image-clutter scheme: `Conv(Conv(f_A) + f_A)`.
pub fn fuse_ic(g: &Graph, m: &ModalFeatures, inner: &BoundConv, outer: &BoundConv) -> Result<Var> {
    let width = 2 * m.channels;
    expect_in(inner, width, "ic inner")?;
    if inner.out_channels != width {
        return Err(Error::Config(format!(
            "ic inner conv must map {} -> {} channels for the residual, maps to {}",
            width, width, inner.out_channels
        )));
    }
    expect_in(outer, width, "ic outer")?;
    let local = inner.block(g, m.f_cat)?;
    let residual = g.add(local, m.f_cat)?;
    outer.block(g, residual)
}

/// Which stream produces a modality weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuideRole {
    /// `W_td`: auxiliary features gate RGB features.
    AuxGuidesRgb,
    /// `W_r`: RGB features gate auxiliary features.
    RgbGuidesAux,
}

/// A spatial gate in `(0, 1)` computed from one stream.
#[derive(Clone, Copy, Debug)]
pub struct ModalityWeight {
    pub w: Var,
    pub role: GuideRole,
}

fn guided(g: &Graph, guide: Var, base: Var, p: &BoundConv, channels: usize, role: GuideRole) -> Result<(ModalityWeight, Var)> {
    expect_in(p, channels, "guidance")?;
    let w = g.sigmoid(p.apply(g, guide)?);
    let gated = g.mul(w, base)?;
    let out = g.add(gated, base)?;
    Ok((ModalityWeight { w, role }, out))
}

/// Low-illumination scheme: `W_td = sigmoid(Conv(f_aux))`, `f_li = W_td * f_r + f_r`.
pub fn fuse_li(g: &Graph, m: &ModalFeatures, p: &BoundConv) -> Result<(ModalityWeight, Var)> {
    guided(g, m.f_aux, m.f_r, p, m.channels, GuideRole::AuxGuidesRgb)
}

/// Thermal-crossover / depth-ambiguity scheme: `W_r = sigmoid(Conv(f_r))`, `f_td = W_r * f_aux + f_aux`.
pub fn fuse_td(g: &Graph, m: &ModalFeatures, p: &BoundConv) -> Result<(ModalityWeight, Var)> {
    guided(g, m.f_r, m.f_aux, p, m.channels, GuideRole::RgbGuidesAux)
}

/// Outputs of the active schemes, in canonical order, and their concatenation.
#[derive(Clone, Debug)]
pub struct SchemeOutputs {
    pub outputs: Vec<(Scheme, Var)>,
    pub f_cat: Var,
    /// Channels contributed by each scheme.
    pub block: usize,
}

impl SchemeOutputs {
    pub fn new(g: &Graph, mut outputs: Vec<(Scheme, Var)>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::Config("no fusion scheme outputs".into()));
        }
        outputs.sort_by_key(|(s, _)| *s);
        let block = g.shape(outputs[0].1)[1];
        for (s, v) in &outputs {
            if g.shape(*v)[1] != block {
                return Err(Error::dim(
                    "channels",
                    format!("scheme {} emits {} channels, expected {}", s, g.shape(*v)[1], block),
                ));
            }
        }
        let vars: Vec<Var> = outputs.iter().map(|(_, v)| *v).collect();
        let f_cat = g.concat_channels(&vars)?;
        Ok(Self { outputs, f_cat, block })
    }

    pub fn get(&self, scheme: Scheme) -> Option<Var> {
        self.outputs.iter().find(|(s, _)| *s == scheme).map(|(_, v)| *v)
    }

    pub fn schemes(&self) -> Vec<Scheme> {
        self.outputs.iter().map(|(s, _)| *s).collect()
    }
}

/// The channel weight vector `V` and its mean over each scheme's block.
#[derive(Clone, Debug)]
pub struct EnsembleWeights {
    /// `[B, k*C, 1, 1]`.
    pub v: Var,
    /// Mean of `v` over batch and the channels of each scheme block.
    pub per_scheme_mean: Vec<(Scheme, f64)>,
}

impl EnsembleWeights {
    pub fn mean_of(&self, scheme: Scheme) -> Option<f64> {
        self.per_scheme_mean.iter().find(|(s, _)| *s == scheme).map(|(_, m)| *m)
    }
}

/// The bank's output `FB_i`.
#[derive(Clone, Debug)]
pub struct BankOutput {
    pub fb: Var,
    pub weights: Option<EnsembleWeights>,
    pub schemes: Option<SchemeOutputs>,
}

/// Adaptive ensemble module.
pub fn aem(g: &Graph, s: &SchemeOutputs, p_avg: &BoundConv, p_max: &BoundConv) -> Result<(EnsembleWeights, BankOutput)> {
    let width = s.block * s.outputs.len();
    for (p, what) in [(p_avg, "avg"), (p_max, "max")] {
        expect_in(p, width, what)?;
        if p.out_channels != width {
            return Err(Error::dim(
                "out_channels",
                format!("AEM {} conv emits {} channels, needs {}", what, p.out_channels, width),
            ));
        }
    }
    let avg = p_avg.apply(g, g.global_avg_pool(s.f_cat)?)?;
    let max = p_max.apply(g, g.global_max_pool(s.f_cat)?)?;
    let v = g.sigmoid(g.add(avg, max)?);
    let fb = g.scale_channels(s.f_cat, v)?;

    let per_scheme_mean = {
        let vt = g.value(v);
        let batch = vt.shape()[0];
        s.outputs
            .iter()
            .enumerate()
            .map(|(k, (scheme, _))| {
                let mut acc = 0.0;
                for b in 0..batch {
                    let row = &vt.data()[b * width..(b + 1) * width];
                    acc += row[k * s.block..(k + 1) * s.block].iter().sum::<f64>();
                }
                (*scheme, acc / (batch * s.block) as f64)
            })
            .collect()
    };
    let weights = EnsembleWeights { v, per_scheme_mean };
    let out = BankOutput {
        fb,
        weights: Some(weights.clone()),
        schemes: Some(s.clone()),
    };
    Ok((weights, out))
}

/// Bound parameters for one bank; a scheme left `None` is disabled.
#[derive(Clone, Copy, Debug, Default)]
pub struct BankParams {
    pub cb: Option<BoundConv>,
    pub sv: Option<BoundConv>,
    pub ic: Option<(BoundConv, BoundConv)>,
    pub li: Option<BoundConv>,
    pub td: Option<BoundConv>,
    /// `(avg branch, max branch)` 1x1 convs.
    pub aem: Option<(BoundConv, BoundConv)>,
}

/// Which schemes run and whether the ensemble re-weights them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BankMode {
    pub schemes: Vec<Scheme>,
    pub use_aem: bool,
}

impl BankMode {
    pub fn full() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            use_aem: true,
        }
    }

    /// All schemes, plain concatenation.
    pub fn no_aem() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            use_aem: false,
        }
    }

    pub fn subset(schemes: &[Scheme]) -> Result<Self> {
        Self::new(schemes, true)
    }

    pub fn new(schemes: &[Scheme], use_aem: bool) -> Result<Self> {
        if schemes.is_empty() {
            return Err(Error::Config("fusion bank needs at least one scheme".into()));
        }
        let mut s = schemes.to_vec();
        s.sort();
        s.dedup();
        if s.len() != schemes.len() {
            return Err(Error::Config("duplicate scheme in subset".into()));
        }
        Ok(Self { schemes: s, use_aem })
    }
}

fn missing(scheme: &str) -> Error {
    Error::Config(format!("parameters for scheme `{}` are missing", scheme))
}

/// Runs the enabled schemes on `m` and combines them per `mode`.
pub fn adaptive_fusion_bank(g: &Graph, m: &ModalFeatures, params: &BankParams, mode: &BankMode) -> Result<BankOutput> {
    if mode.schemes.is_empty() {
        return Err(Error::Config("fusion bank needs at least one scheme".into()));
    }
    let mut outputs = Vec::with_capacity(mode.schemes.len());
    for &scheme in &mode.schemes {
        let out = match scheme {
            Scheme::Cb => fuse_cb(g, m, params.cb.as_ref().ok_or_else(|| missing("cb"))?)?,
            Scheme::Sv => fuse_sv(g, m, params.sv.as_ref().ok_or_else(|| missing("sv"))?)?,
            Scheme::Ic => {
                let (a, b) = params.ic.as_ref().ok_or_else(|| missing("ic"))?;
                fuse_ic(g, m, a, b)?
            }
            Scheme::Li => fuse_li(g, m, params.li.as_ref().ok_or_else(|| missing("li"))?)?.1,
            Scheme::Td => fuse_td(g, m, params.td.as_ref().ok_or_else(|| missing("td"))?)?.1,
        };
        outputs.push((scheme, out));
    }
    let s = SchemeOutputs::new(g, outputs)?;
    if mode.use_aem {
        let (p_avg, p_max) = params.aem.as_ref().ok_or_else(|| missing("aem"))?;
        Ok(aem(g, &s, p_avg, p_max)?.1)
    } else {
        Ok(BankOutput {
            fb: s.f_cat,
            weights: None,
            schemes: Some(s),
        })
    }
}
