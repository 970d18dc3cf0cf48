//! The end-to-end saliency network.
//!
//! Two independent strided conv encoders (RGB and auxiliary) produce five
//! feature levels; level 1 is dropped. Levels 2..=5 each pass through a fusion
//! bank, the guidance module, a receptive-field block, and a top-down decoder
//! that emits saliency maps `S_2..S_5` at input resolution.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::{adaptive_fusion_bank, BankMode, BankParams, ModalFeatures, Scheme};
use crate::iigm::{iigm_all, GuidanceConvs, GuidedPyramid};
use crate::params::{Bound, ConvLayer, InitScheme, Initializer, ParamStore};
use crate::tensor::{ConvGeometry, Graph, Var};

pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Square input extent; must be a multiple of 32.
    pub input_size: usize,
    /// Width of the discarded level-1 stage.
    pub stem_channels: usize,
    /// `C_2..C_5`.
    pub channels: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stem_channels: 8,
            channels: [16, 32, 64, 128],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.stem_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.channels[level - 2]
    }

    /// Spatial extent of level `i` (stride `2^i`).
    pub fn extent_at(&self, level: usize) -> usize {
        self.input_size >> level
    }
}

/// Component switches used by the ablation studies.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Replace each bank by plain concatenation of the two streams.
    pub no_afb: bool,
    /// Keep all schemes but skip the ensemble re-weighting.
    pub no_aem: bool,
    /// Feed bank outputs straight to the decoder.
    pub no_iigm: bool,
    /// Restrict the bank to these schemes (`None` = all five).
    pub schemes: Option<Vec<Scheme>>,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.schemes {
            let mode = BankMode::new(s, true)?;
            if self.no_afb && mode.schemes != Scheme::ALL {
                return Err(Error::Config(
                    "a scheme subset contradicts removing the fusion bank".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn bank_mode(&self) -> Result<Option<BankMode>> {
        if self.no_afb {
            return Ok(None);
        }
        let schemes = self.schemes.clone().unwrap_or_else(|| Scheme::ALL.to_vec());
        BankMode::new(&schemes, !self.no_aem).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Decoder width `D`.
    pub decoder_width: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_width: 32,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ablation.validate()?;
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        Ok(())
    }
}

/// Saliency maps at input resolution, values in `(0, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct SaliencyOutputs {
    /// `S_2..S_5`; `S_2` is the prediction.
    pub maps: [Var; 4],
}

impl SaliencyOutputs {
    pub fn at(&self, level: usize) -> Var {
        self.maps[level - 2]
    }

    pub fn final_map(&self) -> Var {
        self.maps[0]
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub saliency: SaliencyOutputs,
    /// `FB_i` per level.
    pub bank: BTreeMap<usize, Var>,
    /// `I_i` per level, the decoder input.
    pub guided: BTreeMap<usize, Var>,
    /// Ensemble weight block means per level, when the ensemble runs.
    pub scheme_weights: BTreeMap<usize, Vec<(Scheme, f64)>>,
}

struct Stage {
    down: ConvLayer,
    conv: ConvLayer,
}

struct Stream {
    stages: Vec<Stage>,
}

impl Stream {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let mut widths = vec![cfg.stem_channels];
        widths.extend(cfg.channels);
        let mut stages = Vec::new();
        let mut in_c = 3;
        for (i, &w) in widths.iter().enumerate() {
            let prefix = format!("encoder.{}.s{}", name, i + 1);
            let down = ConvLayer::new(store, init, &format!("{}.down", prefix), in_c, w, 3, ConvGeometry::new(2, 1, 1))?;
            let conv = ConvLayer::new(store, init, &format!("{}.conv", prefix), w, w, 3, ConvGeometry::same3(1))?;
            stages.push(Stage { down, conv });
            in_c = w;
        }
        Ok(Self { stages })
    }

    /// Features of levels 1..=5.
    fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for s in &self.stages {
            h = s.down.bind(g, p).block(g, h)?;
            h = s.conv.bind(g, p).block(g, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

struct BankLayer {
    cb: Option<ConvLayer>,
    sv: Option<ConvLayer>,
    ic: Option<(ConvLayer, ConvLayer)>,
    li: Option<ConvLayer>,
    td: Option<ConvLayer>,
    aem: Option<(ConvLayer, ConvLayer)>,
}

impl BankLayer {
    fn new(store: &mut ParamStore, init: &mut Initializer, level: usize, c: usize, mode: &BankMode) -> Result<Self> {
        let name = |s: &str| format!("bank.l{}.{}", level, s);
        let same = ConvGeometry::same3(1);
        let has = |s: Scheme| mode.schemes.contains(&s);
        let mut layer = BankLayer {
            cb: None,
            sv: None,
            ic: None,
            li: None,
            td: None,
            aem: None,
        };
        if has(Scheme::Cb) {
            layer.cb = Some(ConvLayer::new(store, init, &name("cb"), 2 * c, c, 3, same)?);
        }
        if has(Scheme::Sv) {
            layer.sv = Some(ConvLayer::new(store, init, &name("sv"), 2 * c, c, 3, ConvGeometry::same3(2))?);
        }
        if has(Scheme::Ic) {
            let inner = ConvLayer::new(store, init, &name("ic_inner"), 2 * c, 2 * c, 3, same)?;
            let outer = ConvLayer::new(store, init, &name("ic_outer"), 2 * c, c, 3, same)?;
            layer.ic = Some((inner, outer));
        }
        if has(Scheme::Li) {
            layer.li = Some(ConvLayer::new(store, init, &name("li"), c, c, 3, same)?);
        }
        if has(Scheme::Td) {
            layer.td = Some(ConvLayer::new(store, init, &name("td"), c, c, 3, same)?);
        }
        if mode.use_aem {
            let width = mode.schemes.len() * c;
            let one = ConvGeometry::default();
            let avg = ConvLayer::new(store, init, &name("aem_avg"), width, width, 1, one)?;
            let max = ConvLayer::new(store, init, &name("aem_max"), width, width, 1, one)?;
            layer.aem = Some((avg, max));
        }
        Ok(layer)
    }

    fn bind(&self, g: &Graph, p: &Bound) -> BankParams {
        BankParams {
            cb: self.cb.map(|l| l.bind(g, p)),
            sv: self.sv.map(|l| l.bind(g, p)),
            ic: self.ic.map(|(a, b)| (a.bind(g, p), b.bind(g, p))),
            li: self.li.map(|l| l.bind(g, p)),
            td: self.td.map(|l| l.bind(g, p)),
            aem: self.aem.map(|(a, b)| (a.bind(g, p), b.bind(g, p))),
        }
    }
}

struct GuidanceLayer {
    high_from_mid: ConvLayer,
    high_from_hi: ConvLayer,
    low_from_lo: ConvLayer,
    low_from_mid: ConvLayer,
}

impl GuidanceLayer {
    fn new(store: &mut ParamStore, init: &mut Initializer, center: usize, widths: &BTreeMap<usize, usize>) -> Result<Self> {
        let (lo, mid, hi) = (widths[&(center - 1)], widths[&center], widths[&(center + 1)]);
        let g = ConvGeometry::same3(1);
        let name = |s: &str| format!("iigm.g{}.{}", center, s);
        Ok(Self {
            high_from_mid: ConvLayer::new(store, init, &name("high_from_mid"), mid, lo, 3, g)?,
            high_from_hi: ConvLayer::new(store, init, &name("high_from_hi"), hi, lo, 3, g)?,
            low_from_lo: ConvLayer::new(store, init, &name("low_from_lo"), lo, hi, 3, g)?,
            low_from_mid: ConvLayer::new(store, init, &name("low_from_mid"), mid, hi, 3, g)?,
        })
    }

    fn bind(&self, g: &Graph, p: &Bound) -> GuidanceConvs {
        GuidanceConvs {
            high_from_mid: self.high_from_mid.bind(g, p),
            high_from_hi: self.high_from_hi.bind(g, p),
            low_from_lo: self.low_from_lo.bind(g, p),
            low_from_mid: self.low_from_mid.bind(g, p),
        }
    }
}

/// Simplified receptive-field block: a 1x1 branch and three 3x3 branches with
/// dilations 1, 3 and 5, concatenated and projected to `D`, plus a 1x1
/// shortcut. All convs are bias-free, so zero input maps to zero output.
pub struct Rfb {
    branches: [ConvLayer; 4],
    project: ConvLayer,
    shortcut: ConvLayer,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub const RFB_DILATIONS: [usize; 3] = [1, 3, 5];

impl Rfb {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, in_c: usize, d: usize) -> Result<Self> {
        let one = ConvGeometry::default();
        let n = |s: &str| format!("{}.{}", name, s);
        let branches = [
            ConvLayer::without_bias(store, init, &n("b0"), in_c, d, 1, one)?,
            ConvLayer::without_bias(store, init, &n("b1"), in_c, d, 3, ConvGeometry::same3(RFB_DILATIONS[0]))?,
            ConvLayer::without_bias(store, init, &n("b2"), in_c, d, 3, ConvGeometry::same3(RFB_DILATIONS[1]))?,
            ConvLayer::without_bias(store, init, &n("b3"), in_c, d, 3, ConvGeometry::same3(RFB_DILATIONS[2]))?,
        ];
        Ok(Self {
            branches,
            project: ConvLayer::without_bias(store, init, &n("project"), 4 * d, d, 1, one)?,
            shortcut: ConvLayer::without_bias(store, init, &n("shortcut"), in_c, d, 1, one)?,
            in_channels: in_c,
            out_channels: d,
        })
    }

    /// `relu(project([relu(b_k(x))]) + shortcut(x))`.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(4);
        for b in &self.branches {
            outs.push(b.bind(g, p).block(g, x)?);
        }
        let cat = g.concat_channels(&outs)?;
        let proj = self.project.bind(g, p).apply(g, cat)?;
        let short = self.shortcut.bind(g, p).apply(g, x)?;
        Ok(g.relu(g.add(proj, short)?))
    }
}

pub struct Model {
    config: ModelConfig,
    rgb: Stream,
    aux: Stream,
    banks: BTreeMap<usize, BankLayer>,
    bank_mode: Option<BankMode>,
    guidance: Option<(GuidanceLayer, GuidanceLayer)>,
    rfb: BTreeMap<usize, Rfb>,
    fuse: BTreeMap<usize, ConvLayer>,
    heads: BTreeMap<usize, ConvLayer>,
}

impl Model {
    /// Registers every parameter in a fresh store, initialised per `init`.
    pub fn build(config: ModelConfig, init: InitScheme, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut ini = Initializer::new(init, seed);
        let enc = &config.encoder;
        let rgb = Stream::new(&mut store, &mut ini, "rgb", enc)?;
        let aux = Stream::new(&mut store, &mut ini, "aux", enc)?;

        let bank_mode = config.ablation.bank_mode()?;
        let mut banks = BTreeMap::new();
        let mut widths = BTreeMap::new();
        for level in LEVELS {
            let c = enc.channels_at(level);
            match &bank_mode {
                Some(mode) => {
                    banks.insert(level, BankLayer::new(&mut store, &mut ini, level, c, mode)?);
                    widths.insert(level, mode.schemes.len() * c);
                }
                None => {
                    widths.insert(level, 2 * c);
                }
            }
        }

        let guidance = if config.ablation.no_iigm {
            None
        } else {
            Some((
                GuidanceLayer::new(&mut store, &mut ini, 3, &widths)?,
                GuidanceLayer::new(&mut store, &mut ini, 4, &widths)?,
            ))
        };

        let d = config.decoder_width;
        let mut rfb = BTreeMap::new();
        for level in LEVELS {
            rfb.insert(level, Rfb::new(&mut store, &mut ini, &format!("rfb.l{}", level), widths[&level], d)?);
        }
        let mut fuse = BTreeMap::new();
        for level in [4, 3, 2] {
            let l = ConvLayer::new(&mut store, &mut ini, &format!("decoder.l{}.fuse", level), 2 * d, d, 3, ConvGeometry::same3(1))?;
            fuse.insert(level, l);
        }
        let mut heads = BTreeMap::new();
        for level in LEVELS {
            let l = ConvLayer::new(&mut store, &mut ini, &format!("head.l{}", level), d, 1, 1, ConvGeometry::default())?;
            heads.insert(level, l);
        }

        let model = Model {
            config,
            rgb,
            aux,
            banks,
            bank_mode,
            guidance,
            rfb,
            fuse,
            heads,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Channel width of `FB_i`.
    pub fn bank_width(&self, level: usize) -> usize {
        self.rfb[&level].in_channels
    }

    pub fn rfb(&self, level: usize) -> &Rfb {
        &self.rfb[&level]
    }

    fn check_input(&self, g: &Graph, x: Var, what: &str) -> Result<()> {
        let s = g.shape(x);
        let n = self.config.encoder.input_size;
        match s[..] {
            [_, 3, h, w] if h == n && w == n => Ok(()),
            [_, c, _, _] if c != 3 => Err(Error::dim("channels", format!("{} image has {} channels, expected 3", what, c))),
            [_, _, h, w] => Err(Error::dim(
                "spatial",
                format!("{} image is {}x{}, model expects {}x{}", what, h, w, n, n),
            )),
            _ => Err(Error::dim("rank", format!("{} image must be [B,3,H,W], got {:?}", what, s))),
        }
    }

    /// Per-level paired features for levels 2..=5.
    pub fn encode(&self, g: &Graph, p: &Bound, rgb: Var, aux: Var) -> Result<Vec<ModalFeatures>> {
        self.check_input(g, rgb, "rgb")?;
        self.check_input(g, aux, "auxiliary")?;
        let fr = self.rgb.forward(g, p, rgb)?;
        let fa = self.aux.forward(g, p, aux)?;
        LEVELS
            .iter()
            .map(|&level| ModalFeatures::new(g, level, fr[level - 1], fa[level - 1]))
            .collect()
    }

    /// Top-down decoding of the guided pyramid into `S_2..S_5`.
    pub fn decode(&self, g: &Graph, p: &Bound, guided: &GuidedPyramid) -> Result<SaliencyOutputs> {
        let n = self.config.encoder.input_size;
        let mut states = BTreeMap::new();
        let mut d = self.rfb[&5].forward(g, p, guided.get(5)?)?;
        states.insert(5, d);
        for level in [4, 3, 2] {
            let r = self.rfb[&level].forward(g, p, guided.get(level)?)?;
            let s = g.shape(r);
            let up = g.bilinear_resize(d, s[2], s[3])?;
            let cat = g.concat_channels(&[r, up])?;
            d = self.fuse[&level].bind(g, p).block(g, cat)?;
            states.insert(level, d);
        }
        let mut maps = Vec::with_capacity(4);
        for level in LEVELS {
            let logits = self.heads[&level].bind(g, p).apply(g, states[&level])?;
            let sal = g.sigmoid(logits);
            maps.push(g.bilinear_resize(sal, n, n)?);
        }
        Ok(SaliencyOutputs {
            maps: [maps[0], maps[1], maps[2], maps[3]],
        })
    }

    pub fn forward(&self, g: &Graph, p: &Bound, rgb: Var, aux: Var) -> Result<ForwardOutput> {
        let feats = self.encode(g, p, rgb, aux)?;
        let mut bank = BTreeMap::new();
        let mut scheme_weights = BTreeMap::new();
        for m in &feats {
            let fb = match &self.bank_mode {
                Some(mode) => {
                    let params = self.banks[&m.level].bind(g, p);
                    let out = adaptive_fusion_bank(g, m, &params, mode)?;
                    if let Some(w) = &out.weights {
                        scheme_weights.insert(m.level, w.per_scheme_mean.clone());
                    }
                    out.fb
                }
                None => m.f_cat,
            };
            bank.insert(m.level, fb);
        }
        let guided = match &self.guidance {
            Some((g3, g4)) => iigm_all(g, &bank, &g3.bind(g, p), &g4.bind(g, p))?,
            None => GuidedPyramid::identity(&bank)?,
        };
        let saliency = self.decode(g, p, &guided)?;
        Ok(ForwardOutput {
            saliency,
            bank,
            guided: guided.levels,
            scheme_weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_size_must_be_multiple_of_32() {
        let cfg = EncoderConfig {
            input_size: 48,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(EncoderConfig::default().extent_at(2), 16);
        assert_eq!(EncoderConfig::default().extent_at(5), 2);
    }

    #[test]
    fn contradictory_flags_rejected() {
        let a = Ablation {
            no_afb: true,
            schemes: Some(vec![Scheme::Cb]),
            ..Ablation::default()
        };
        assert!(matches!(a.validate(), Err(Error::Config(_))));
        let b = Ablation {
            no_afb: true,
            no_aem: true,
            ..Ablation::default()
        };
        assert!(b.validate().is_ok());
        let c = Ablation {
            schemes: Some(vec![]),
            ..Ablation::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn no_afb_registers_no_bank_parameters() {
        let cfg = ModelConfig {
            ablation: Ablation {
                no_afb: true,
                ..Ablation::default()
            },
            ..ModelConfig::default()
        };
        let (_, store) = Model::build(cfg, InitScheme::Zeros, 0).unwrap();
        assert!(!store.counts_by_module().contains_key("bank"));
        let (_, full) = Model::build(ModelConfig::default(), InitScheme::Zeros, 0).unwrap();
        assert!(full.counts_by_module()["bank"] > 0);
    }
}
