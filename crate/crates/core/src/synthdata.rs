//! Deterministic synthetic RGB + auxiliary scenes with binary masks and
//! challenge labels, and their on-disk layout.
//!
//! Each sample draws one challenge from the mix. Generation is a pure
//! function of `(seed, split, index)`; a sample that fails its label
//! postcondition is redrawn from the next attempt substream.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::Scheme;
use crate::losses::LUMA;
use crate::tensor::Tensor;

pub const MAX_ATTEMPTS: u32 = 32;

/// Dark-scene ceiling on mean RGB luma.
pub const LI_MAX_LUMA: f64 = 0.25;
/// Gap a degraded modality must stay under.
pub const LOW_GAP: f64 = 0.1;
/// Gap an informative modality must exceed.
pub const HIGH_GAP: f64 = 0.3;
/// Border band for off-center objects, as a fraction of the extent.
pub const CB_MARGIN: f64 = 0.15;
pub const SV_SMALL: f64 = 0.01;
pub const SV_LARGE: f64 = 0.25;
/// Minimum background luma spread for cluttered scenes.
pub const IC_MIN_TEXTURE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChallengeLabel {
    Cb,
    Sv,
    Ic,
    Li,
    Td,
}

impl ChallengeLabel {
    pub const ALL: [ChallengeLabel; 5] = [Self::Cb, Self::Sv, Self::Ic, Self::Li, Self::Td];

    pub fn code(self) -> &'static str {
        match self {
            Self::Cb => "CB",
            Self::Sv => "SV",
            Self::Ic => "IC",
            Self::Li => "LI",
            Self::Td => "TD",
        }
    }

    /// The fusion scheme designed for this challenge.
    pub fn scheme(self) -> Scheme {
        match self {
            Self::Cb => Scheme::Cb,
            Self::Sv => Scheme::Sv,
            Self::Ic => Scheme::Ic,
            Self::Li => Scheme::Li,
            Self::Td => Scheme::Td,
        }
    }

    /// Parses `"LI,TD"`; the result is sorted and de-duplicated.
    pub fn parse_set(s: &str) -> Result<Vec<ChallengeLabel>> {
        let mut out = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn format_set(labels: &[ChallengeLabel]) -> String {
        labels.iter().map(|l| l.code()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for ChallengeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ChallengeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown challenge label `{}`", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{}`", other))),
        }
    }
}

/// Relative challenge frequencies in label order (CB, SV, IC, LI, TD).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mix(pub [f64; 5]);

impl Mix {
    pub fn uniform() -> Self {
        Mix([1.0; 5])
    }

    pub fn single(label: ChallengeLabel) -> Self {
        let mut w = [0.0; 5];
        w[label as usize] = 1.0;
        Mix(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("mix weights must be finite and non-negative".into()));
        }
        if self.0.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("mix weights are all zero".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = ChallengeLabel::ALL
            .iter()
            .zip(self.0)
            .map(|(l, w)| format!("{}={}", l.code().to_lowercase(), w))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Mix {
    type Err = Error;

    /// `uniform`, a single code (`li`), or `cb=1,li=2` (missing codes are 0).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("uniform") {
            return Ok(Mix::uniform());
        }
        if !s.contains('=') {
            return Ok(Mix::single(s.parse()?));
        }
        let mut w = [0.0; 5];
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mix entry `{}` is not code=weight", part)))?;
            let label: ChallengeLabel = k.parse()?;
            w[label as usize] = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("mix weight `{}` is not a number", v)))?;
        }
        let mix = Mix(w);
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]` in `[0,1]`.
    pub rgb: Tensor,
    /// `[3,H,W]` in `[0,1]`, grayscale replicated.
    pub aux: Tensor,
    /// `[1,H,W]` in `{0,1}`.
    pub gt: Tensor,
    pub labels: Vec<ChallengeLabel>,
}

impl Sample {
    pub fn extent(&self) -> (usize, usize) {
        (self.gt.shape()[1], self.gt.shape()[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    pub mix: Mix,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("images must be at least 16x16".into()));
        }
        self.mix.validate()
    }
}

/// Per-image modality statistics used by the label postconditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneStats {
    pub rgb_mean_luma: f64,
    pub rgb_gap: f64,
    pub aux_gap: f64,
    /// Standard deviation of background RGB luma.
    pub bg_texture: f64,
    pub area: f64,
    /// Foreground centroid `(y, x)` as fractions of the extent.
    pub centroid: (f64, f64),
    pub components: usize,
}

fn luma_plane(rgb: &Tensor) -> Vec<f64> {
    let plane = rgb.shape()[1] * rgb.shape()[2];
    let d = rgb.data();
    (0..plane)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i])
        .collect()
}

fn gap(values: &[f64], mask: &[f64]) -> Option<(f64, f64, f64)> {
    let (mut fs, mut fc, mut bs, mut bc) = (0.0, 0usize, 0.0, 0usize);
    for (v, m) in values.iter().zip(mask) {
        if *m == 1.0 {
            fs += v;
            fc += 1;
        } else {
            bs += v;
            bc += 1;
        }
    }
    if fc == 0 || bc == 0 {
        return None;
    }
    let (fm, bm) = (fs / fc as f64, bs / bc as f64);
    Some(((fm - bm).abs(), fm, bm))
}

/// 4-connected foreground components.
pub fn components(mask: &[f64], h: usize, w: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] != 1.0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if mask[j] == 1.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
    }
    count
}

pub fn scene_stats(s: &Sample) -> Result<SceneStats> {
    let (h, w) = s.extent();
    let mask = s.gt.data();
    let luma = luma_plane(&s.rgb);
    let aux = &s.aux.data()[..h * w];
    let bad = |d: &str| Error::Sample {
        id: s.id.clone(),
        detail: d.to_string(),
    };
    let (rgb_gap, _, bg_mean) = gap(&luma, mask).ok_or_else(|| bad("mask is empty or covers the whole image"))?;
    let (aux_gap, _, _) = gap(aux, mask).ok_or_else(|| bad("mask is empty or covers the whole image"))?;
    let (mut var, mut bc) = (0.0, 0usize);
    let (mut cy, mut cx, mut fc) = (0.0, 0.0, 0usize);
    for i in 0..h * w {
        if mask[i] == 1.0 {
            cy += (i / w) as f64;
            cx += (i % w) as f64;
            fc += 1;
        } else {
            var += (luma[i] - bg_mean).powi(2);
            bc += 1;
        }
    }
    Ok(SceneStats {
        rgb_mean_luma: luma.iter().sum::<f64>() / luma.len() as f64,
        rgb_gap,
        aux_gap,
        bg_texture: (var / bc as f64).sqrt(),
        area: fc as f64 / (h * w) as f64,
        centroid: (
            (cy / fc as f64 + 0.5) / h as f64,
            (cx / fc as f64 + 0.5) / w as f64,
        ),
        components: components(mask, h, w),
    })
}

/// Shapes agree, images lie in `[0, 1]` and the mask is binary.
pub fn validate_structure(s: &Sample) -> Result<()> {
    let bad = |d: String| Error::Sample {
        id: s.id.clone(),
        detail: d,
    };
    if s.gt.shape().len() != 3 || s.gt.shape()[0] != 1 {
        return Err(bad(format!("gt must be [1,H,W], got {:?}", s.gt.shape())));
    }
    let (h, w) = s.extent();
    if s.rgb.shape() != [3, h, w] || s.aux.shape() != [3, h, w] {
        return Err(bad(format!(
            "rgb {:?} / aux {:?} do not match gt {:?}",
            s.rgb.shape(),
            s.aux.shape(),
            s.gt.shape()
        )));
    }
    if s.gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(bad("gt is not binary".into()));
    }
    if s.rgb.data().iter().chain(s.aux.data()).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(bad("image values outside [0, 1]".into()));
    }
    Ok(())
}

/// Structural checks plus every label's postcondition.
pub fn validate(s: &Sample) -> Result<()> {
    validate_structure(s)?;
    let bad = |d: String| Error::Sample {
        id: s.id.clone(),
        detail: d,
    };
    if s.labels.is_empty() {
        return Err(bad("no challenge label".into()));
    }
    let st = scene_stats(s)?;
    for label in &s.labels {
        let ok = match label {
            ChallengeLabel::Cb => {
                let (y, x) = st.centroid;
                [y, 1.0 - y, x, 1.0 - x].iter().any(|d| *d <= CB_MARGIN)
            }
            ChallengeLabel::Sv => st.area < SV_SMALL || st.area > SV_LARGE || st.components > 1,
            ChallengeLabel::Ic => st.rgb_gap < LOW_GAP && st.bg_texture >= IC_MIN_TEXTURE,
            ChallengeLabel::Li => st.rgb_mean_luma < LI_MAX_LUMA && st.aux_gap > HIGH_GAP,
            ChallengeLabel::Td => st.aux_gap < LOW_GAP && st.rgb_gap > HIGH_GAP,
        };
        if !ok {
            return Err(bad(format!("{} postcondition fails: {:?}", label, st)));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
        }
    }

    fn radius(&self) -> f64 {
        match *self {
            Shape::Ellipse { ry, rx, .. } => ry.max(rx),
            Shape::Rect { hy, hx, .. } => hy.hypot(hx),
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Ellipse { cy, cx, .. } | Shape::Rect { cy, cx, .. } => (cy, cx),
        }
    }

    /// A random ellipse or rectangle of about `area` pixels at `(cy, cx)`.
    fn random(rng: &mut ChaCha8Rng, cy: f64, cx: f64, area: f64) -> Shape {
        let aspect: f64 = rng.gen_range(0.6..1.6);
        if rng.gen_bool(0.6) {
            let r = (area / std::f64::consts::PI).sqrt();
            Shape::Ellipse {
                cy,
                cx,
                ry: r * aspect.sqrt(),
                rx: r / aspect.sqrt(),
            }
        } else {
            let half = area.sqrt() / 2.0;
            Shape::Rect {
                cy,
                cx,
                hy: half * aspect.sqrt(),
                hx: half / aspect.sqrt(),
            }
        }
    }
}

/// A colour with the given luma plus a luma-neutral chroma offset.
fn colour(rng: &mut ChaCha8Rng, luma: f64, chroma: f64) -> [f64; 3] {
    let mut c: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let l: f64 = c.iter().zip(LUMA).map(|(a, b)| a * b).sum();
    c.iter_mut().for_each(|v| *v -= l);
    let norm = c.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-9);
    // largest scale keeping every channel inside [0, 1]
    let room = c
        .iter()
        .map(|v| if *v > 0.0 { (1.0 - luma) / v } else { luma / -v })
        .fold(f64::INFINITY, f64::min);
    let scale = (chroma / norm).min(room);
    [luma + c[0] * scale, luma + c[1] * scale, luma + c[2] * scale]
}

struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    amp: f64,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, amp: f64, max_freq: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-max_freq..max_freq),
                    rng.gen_range(-max_freq..max_freq),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.5..1.0),
                )
            })
            .collect();
        Self { waves, amp }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let weight: f64 = self.waves.iter().map(|w| w.3).sum();
        let weighted: f64 = self.waves.iter().map(|(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin()).sum();
        2.0 * self.amp * weighted / weight
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn substream(seed: u64, split: Split, index: usize, attempt: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.tag() << 60) | ((index as u64) << 8) | attempt as u64);
    rng
}

fn place_center(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7))
}

/// Shapes in fractional coordinates with areas as image fractions.
fn layout(rng: &mut ChaCha8Rng, label: ChallengeLabel) -> Vec<(Shape, f64)> {
    match label {
        ChallengeLabel::Cb => {
            let area = rng.gen_range(0.015..0.05);
            let d = rng.gen_range(0.05..0.11);
            let along = rng.gen_range(0.2..0.8);
            let (cy, cx) = match rng.gen_range(0..4) {
                0 => (d, along),
                1 => (1.0 - d, along),
                2 => (along, d),
                _ => (along, 1.0 - d),
            };
            vec![(Shape::random(rng, cy, cx, area), area)]
        }
        ChallengeLabel::Sv => match rng.gen_range(0..3) {
            0 => {
                let area = rng.gen_range(0.003..0.008);
                let (cy, cx) = place_center(rng);
                vec![(Shape::random(rng, cy, cx, area), area)]
            }
            1 => {
                let area = rng.gen_range(0.3..0.45);
                let c = (rng.gen_range(0.45..0.55), rng.gen_range(0.45..0.55));
                vec![(Shape::random(rng, c.0, c.1, area), area)]
            }
            _ => {
                let n = rng.gen_range(2..=3);
                let mut out: Vec<(Shape, f64)> = Vec::new();
                while out.len() < n {
                    let area = rng.gen_range(0.015..0.04);
                    let (cy, cx) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
                    let s = Shape::random(rng, cy, cx, area);
                    let clear = out.iter().all(|(o, _)| {
                        let (a, b) = (o.center(), s.center());
                        (a.0 - b.0).hypot(a.1 - b.1) > o.radius() + s.radius() + 0.05
                    });
                    if clear {
                        out.push((s, area));
                    }
                }
                out
            }
        },
        _ => {
            let area = rng.gen_range(0.05..0.16);
            let (cy, cx) = place_center(rng);
            vec![(Shape::random(rng, cy, cx, area), area)]
        }
    }
}

fn render(rng: &mut ChaCha8Rng, id: String, label: ChallengeLabel, h: usize, w: usize) -> Sample {
    let plane = h * w;
    let shapes = layout(rng, label);
    let mut mask = vec![0.0; plane];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = ((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            if shapes.iter().any(|(s, _)| s.contains(fy, fx)) {
                mask[y * w + x] = 1.0;
            }
        }
    }

    let clutter = label == ChallengeLabel::Ic;
    let bg_luma: f64 = rng.gen_range(0.3..0.7);
    let fg_luma = if clutter {
        bg_luma + rng.gen_range(-0.04..0.04)
    } else {
        let g: f64 = rng.gen_range(0.38..0.5);
        if bg_luma + g <= 0.97 && (bg_luma - g < 0.03 || rng.gen_bool(0.5)) {
            bg_luma + g
        } else {
            bg_luma - g
        }
    };
    let bg = colour(rng, bg_luma, if clutter { 0.05 } else { 0.15 });
    let fg = colour(rng, fg_luma.clamp(0.02, 0.98), if clutter { 0.45 } else { 0.2 });
    let texture = if clutter {
        Texture::new(rng, 0.2, 1.2)
    } else {
        Texture::new(rng, 0.04, 0.4)
    };

    let aux_bg: f64 = rng.gen_range(0.1..0.4);
    let aux_fg = if label == ChallengeLabel::Td {
        aux_bg + rng.gen_range(-0.04..0.04)
    } else {
        aux_bg + rng.gen_range(0.38..0.55)
    };
    let aux_tex = Texture::new(rng, 0.03, 0.3);

    let mut rgb = vec![0.0; 3 * plane];
    let mut aux = vec![0.0; 3 * plane];
    for i in 0..plane {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let fgp = mask[i] == 1.0;
        let base = if fgp { fg } else { bg };
        let t = if fgp { texture.at(y, x) * 0.3 } else { texture.at(y, x) };
        for c in 0..3 {
            rgb[c * plane + i] = base[c] + t + rng.gen_range(-0.02..0.02);
        }
        let a = if fgp { aux_fg } else { aux_bg } + aux_tex.at(y, x) + rng.gen_range(-0.02..0.02);
        for c in 0..3 {
            aux[c * plane + i] = a;
        }
    }

    if label == ChallengeLabel::Li {
        let mean_luma: f64 = (0..plane)
            .map(|i| LUMA[0] * rgb[i] + LUMA[1] * rgb[plane + i] + LUMA[2] * rgb[2 * plane + i])
            .sum::<f64>()
            / plane as f64;
        let k = rng.gen_range(0.1..0.18) / mean_luma.max(1e-3);
        for v in rgb.iter_mut() {
            *v = *v * k + rng.gen_range(-0.03..0.03);
        }
    }

    rgb.iter_mut().for_each(|v| *v = quantize(*v));
    aux.iter_mut().for_each(|v| *v = quantize(*v));
    Sample {
        id,
        rgb: Tensor::new([3, h, w], rgb).expect("sized above"),
        aux: Tensor::new([3, h, w], aux).expect("sized above"),
        gt: Tensor::new([1, h, w], mask).expect("sized above"),
        labels: vec![label],
    }
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}_{:05}", split.name(), index)
}

/// Sample `index` of the configured split.
pub fn generate_one(cfg: &GenConfig, index: usize) -> Result<Sample> {
    let id = sample_id(cfg.split, index);
    let dist = WeightedIndex::new(cfg.mix.0).map_err(|e| Error::Config(format!("mix: {}", e)))?;
    let label = ChallengeLabel::ALL[dist.sample(&mut substream(cfg.seed, cfg.split, index, 0))];
    let mut last = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let mut rng = substream(cfg.seed, cfg.split, index, attempt);
        let s = render(&mut rng, id.clone(), label, cfg.height, cfg.width);
        match validate(&s) {
            Ok(()) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Sample {
        id,
        detail: format!(
            "no valid {} scene after {} attempts: {}",
            label,
            MAX_ATTEMPTS,
            last.map(|e| e.to_string()).unwrap_or_default()
        ),
    })
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_one(cfg, i)).collect()
}

/// On-disk dataset: `<root>/{rgb,aux,gt,labels}/<id>.{png,txt}`,
/// `index.txt` and `meta.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub split: Split,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_u8(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Interleaves a `[3,H,W]` tensor into RGB bytes.
fn interleave(t: &Tensor) -> Vec<u8> {
    let plane = t.shape()[1] * t.shape()[2];
    let b = to_u8(t);
    (0..plane).flat_map(|i| [b[i], b[plane + i], b[2 * plane + i]]).collect()
}

pub fn save_rgb_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = (t.shape()[1] as u32, t.shape()[2] as u32);
    image::save_buffer(path, &interleave(t), w, h, image::ExtendedColorType::Rgb8).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Saves a single-channel plane (`[1,H,W]` or `[H,W]`-like) as 8-bit gray.
pub fn save_gray_png(path: &Path, t: &Tensor, h: usize, w: usize) -> Result<()> {
    image::save_buffer(path, &to_u8(t), w as u32, h as u32, image::ExtendedColorType::L8).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `[3,H,W]` in `[0,1]`.
pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            out[c * plane + i] = raw[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], out)
}

/// `[1,H,W]`, thresholded at 128.
pub fn load_mask_png(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| (v >= 128) as u8 as f64).collect();
    Tensor::new([1, h, w], data)
}

const DIRS: [&str; 4] = ["rgb", "aux", "gt", "labels"];

pub fn save_sample(root: &Path, s: &Sample) -> Result<()> {
    let (h, w) = s.extent();
    save_rgb_png(&root.join("rgb").join(format!("{}.png", s.id)), &s.rgb)?;
    save_rgb_png(&root.join("aux").join(format!("{}.png", s.id)), &s.aux)?;
    save_gray_png(&root.join("gt").join(format!("{}.png", s.id)), &s.gt, h, w)?;
    write_file(
        &root.join("labels").join(format!("{}.txt", s.id)),
        format!("{}\n", ChallengeLabel::format_set(&s.labels)).as_bytes(),
    )
}

/// Writes samples and the index; `meta` lines go to `meta.txt` verbatim.
pub fn save_dataset(root: &Path, split: Split, samples: &[Sample], meta: &[(String, String)]) -> Result<DatasetIndex> {
    for d in DIRS {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        save_sample(root, s)?;
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut index = ids.join("\n");
    index.push('\n');
    write_file(&root.join("index.txt"), index.as_bytes())?;
    let mut m = format!("split = {}\n", split.name());
    for (k, v) in meta {
        m.push_str(&format!("{} = {}\n", k, v));
    }
    write_file(&root.join("meta.txt"), m.as_bytes())?;
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        ids,
        split,
    })
}

/// Generates and saves one split.
pub fn generate_to(root: &Path, cfg: &GenConfig) -> Result<DatasetIndex> {
    let samples = generate(cfg)?;
    let meta = vec![
        ("seed".to_string(), cfg.seed.to_string()),
        ("count".to_string(), cfg.count.to_string()),
        ("mix".to_string(), cfg.mix.to_string()),
        ("height".to_string(), cfg.height.to_string()),
        ("width".to_string(), cfg.width.to_string()),
    ];
    save_dataset(root, cfg.split, &samples, &meta)
}

impl DatasetIndex {
    pub fn open(root: &Path) -> Result<Self> {
        let index_path = root.join("index.txt");
        let ids: Vec<String> = read_text(&index_path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let meta_path = root.join("meta.txt");
        let split = read_text(&meta_path)?
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "split")
            .map(|(_, v)| v.parse())
            .transpose()?
            .ok_or_else(|| Error::format(&meta_path, "missing `split` entry"))?;
        Ok(Self {
            root: root.to_path_buf(),
            ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True when a label file exists for every sample.
    pub fn has_labels(&self) -> bool {
        self.ids
            .iter()
            .all(|id| self.root.join("labels").join(format!("{}.txt", id)).exists())
    }

    pub fn load(&self, i: usize) -> Result<Sample> {
        let id = &self.ids[i];
        let rgb = load_rgb_png(&self.root.join("rgb").join(format!("{}.png", id)))?;
        let aux = load_rgb_png(&self.root.join("aux").join(format!("{}.png", id)))?;
        let gt = load_mask_png(&self.root.join("gt").join(format!("{}.png", id)))?;
        let label_path = self.root.join("labels").join(format!("{}.txt", id));
        let labels = if label_path.exists() {
            ChallengeLabel::parse_set(&read_text(&label_path)?)
                .map_err(|e| Error::format(&label_path, e.to_string()))?
        } else {
            Vec::new()
        };
        let (h, w) = (gt.shape()[1], gt.shape()[2]);
        if rgb.shape() != [3, h, w] || aux.shape() != [3, h, w] {
            return Err(Error::Sample {
                id: id.clone(),
                detail: format!("image sizes differ: rgb {:?}, aux {:?}, gt {:?}", rgb.shape(), aux.shape(), gt.shape()),
            });
        }
        Ok(Sample {
            id: id.clone(),
            rgb,
            aux,
            gt,
            labels,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
