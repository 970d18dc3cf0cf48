//! Composite training objective: per-level BCE plus edge-aware smoothness and
//! dice on the final map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::SaliencyOutputs;
use crate::tensor::{Graph, Tensor, Var};

pub const DICE_EPS: f64 = 1.0;

/// Luma weights for RGB in `[0, 1]`.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// `lambda_2..lambda_5`.
    pub lambdas: [f64; 4],
    pub use_smooth: bool,
    pub use_dice: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambdas: [1.0, 0.8, 0.6, 0.5],
            use_smooth: true,
            use_dice: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, l) in self.lambdas.iter().enumerate() {
            if !l.is_finite() || *l < 0.0 {
                return Err(Error::Config(format!("lambda_{} = {} must be finite and non-negative", k + 2, l)));
            }
        }
        Ok(())
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// BCE of `S_2..S_5`.
    pub levels: [f64; 4],
    pub smooth: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: [&'static str; 7] = ["l2", "l3", "l4", "l5", "smooth", "dice", "total"];

    pub fn fields(&self) -> [f64; 7] {
        let [a, b, c, d] = self.levels;
        [a, b, c, d, self.smooth, self.dice, self.total]
    }
}

/// The differentiable total and its parts.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub total: Var,
    pub report: LossReport,
}

fn check_map(g: &Graph, s: Var, target: &Tensor, what: &str) -> Result<()> {
    let shape = g.shape(s);
    if shape != target.shape() {
        return Err(Error::dim(
            "shape",
            format!("{}: map {:?} vs ground truth {:?}", what, shape, target.shape()),
        ));
    }
    Ok(())
}

/// Mean pixel BCE, logs floored at `1e-12`.
pub fn bce(g: &Graph, s: Var, gt: &Tensor) -> Result<Var> {
    check_map(g, s, gt, "bce")?;
    g.bce(s, gt)
}

/// `1 - (2 sum(s g) + 1) / (sum(s) + sum(g) + 1)` per batch item, averaged over the batch.
pub fn dice(g: &Graph, s: Var, gt: &Tensor) -> Result<Var> {
    check_map(g, s, gt, "dice")?;
    g.dice(s, gt, DICE_EPS)
}

/// `[B,1,H,W]` luma of a `[B,3,H,W]` image.
pub fn luma(rgb: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = rgb.dims4()?;
    if c != 3 {
        return Err(Error::dim("channels", format!("luma needs 3 channels, got {}", c)));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        let base = bi * 3 * plane;
        let d = rgb.data();
        out.extend((0..plane).map(|i| LUMA[0] * d[base + i] + LUMA[1] * d[base + plane + i] + LUMA[2] * d[base + 2 * plane + i]));
    }
    Tensor::new([b, 1, h, w], out)
}

/// `exp(-|d luma|)` along x (`[B,H,W-1]`) and y (`[B,H-1,W]`), flattened.
pub fn edge_weights(rgb: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = luma(rgb)?;
    let (b, _, h, w) = l.dims4()?;
    let d = l.data();
    let mut wx = Vec::with_capacity(b * h * w.saturating_sub(1));
    let mut wy = Vec::with_capacity(b * h.saturating_sub(1) * w);
    for bi in 0..b {
        let p = &d[bi * h * w..(bi + 1) * h * w];
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                wx.push((-(p[y * w + x + 1] - p[y * w + x]).abs()).exp());
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                wy.push((-(p[(y + 1) * w + x] - p[y * w + x]).abs()).exp());
            }
        }
    }
    Ok((wx, wy))
}

/// Edge-aware first-order smoothness: `0.5 * (mean_x + mean_y)` of
/// `|ds| * exp(-|d luma|)` over forward differences.
pub fn smoothness(g: &Graph, s: Var, rgb: &Tensor) -> Result<Var> {
    let shape = g.shape(s);
    let (b, _, h, w) = rgb.dims4()?;
    if shape != [b, 1, h, w] {
        return Err(Error::dim(
            "shape",
            format!("smoothness: map {:?} vs image {:?}", shape, rgb.shape()),
        ));
    }
    let (wx, wy) = edge_weights(rgb)?;
    g.smoothness_weighted(s, wx, wy)
}

/// `sum(lambda_i * bce(S_i, G)) + l_s + l_d`, terms disabled per `w`.
pub fn total_loss(g: &Graph, out: &SaliencyOutputs, gt: &Tensor, rgb: &Tensor, w: &LossWeights) -> Result<Loss> {
    w.validate()?;
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let mut push = |g: &Graph, v: Var| -> Result<()> {
        total = Some(match total {
            Some(t) => g.add(t, v)?,
            None => v,
        });
        Ok(())
    };
    for (k, level) in (2..=5).enumerate() {
        let l = bce(g, out.at(level), gt)?;
        report.levels[k] = g.value(l).data()[0];
        push(g, g.scalar_mul(l, w.lambdas[k]))?;
    }
    let s2 = out.final_map();
    if w.use_smooth {
        let l = smoothness(g, s2, rgb)?;
        report.smooth = g.value(l).data()[0];
        push(g, l)?;
    }
    if w.use_dice {
        let l = dice(g, s2, gt)?;
        report.dice = g.value(l).data()[0];
        push(g, l)?;
    }
    let total = total.expect("four level terms are always present");
    report.total = g.value(total).data()[0];
    Ok(Loss { total, report })
}
