//! Saliency evaluation: MAE, F-measure over 256 thresholds, weighted
//! F-measure and E-measure, with per-challenge aggregation.
//!
//! Maps are single planes: any shape whose leading extents are all 1
//! (`[H,W]`, `[1,H,W]`, `[1,1,H,W]`). Ground truth must be exactly binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::ChallengeLabel;
use crate::tensor::Tensor;

pub const BETA2: f64 = 0.3;
pub const THRESHOLDS: usize = 256;
/// Window and spread of the weighted-F error diffusion kernel.
pub const WF_KERNEL: usize = 7;
pub const WF_SIGMA: f64 = 5.0;

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::dim("rank", format!("expected a single map, got shape {:?}", s)));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn check_pair(s: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = plane(s)?;
    let (gh, gw) = plane(g)?;
    if (h, w) != (gh, gw) {
        return Err(Error::dim("spatial", format!("prediction {}x{} vs ground truth {}x{}", h, w, gh, gw)));
    }
    if h * w == 0 {
        return Err(Error::dim("spatial", "empty map"));
    }
    if g.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("ground truth must be binary".into()));
    }
    Ok((h, w))
}

pub fn mae(s: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(s, g)?;
    let total: f64 = s.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / s.len() as f64)
}

/// Number of thresholds `t/255`, `t = 0..=255`, that `v` reaches (`v >= t/255`).
fn passes(v: f64) -> usize {
    if v.is_nan() || v < 0.0 {
        return 0;
    }
    let mut k = ((v * 255.0).floor().max(0.0) as usize).min(255);
    while k < 255 && (k + 1) as f64 / 255.0 <= v {
        k += 1;
    }
    while k > 0 && k as f64 / 255.0 > v {
        k -= 1;
    }
    k + 1
}

/// F-measure at every threshold `t/255` for `t = 0..=255`, binarizing `s >= t/255`.
pub fn f_curve(s: &Tensor, g: &Tensor) -> Result<Vec<f64>> {
    check_pair(s, g)?;
    // hist[k]: pixels passing exactly k thresholds
    let mut pos = vec![0usize; THRESHOLDS + 1];
    let mut neg = vec![0usize; THRESHOLDS + 1];
    for (&v, &t) in s.data().iter().zip(g.data()) {
        let k = passes(v);
        if t == 1.0 {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    let mut curve = vec![0.0; THRESHOLDS];
    let total_pos: usize = pos.iter().sum();
    // pixels predicted positive at threshold t pass more than t thresholds
    let (mut tp, mut fp) = (0usize, 0usize);
    for t in (0..THRESHOLDS).rev() {
        tp += pos[t + 1];
        fp += neg[t + 1];
        curve[t] = f_beta(tp, fp, total_pos);
    }
    Ok(curve)
}

fn f_beta(tp: usize, fp: usize, total_pos: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / total_pos as f64;
    (1.0 + BETA2) * p * r / (BETA2 * p + r)
}

/// `(f_mean, f_max)` over the threshold sweep.
pub fn f_measure(s: &Tensor, g: &Tensor) -> Result<(f64, f64)> {
    Ok(curve_summary(&f_curve(s, g)?))
}

fn curve_summary(c: &[f64]) -> (f64, f64) {
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    let max = c.iter().copied().fold(0.0, f64::max);
    (mean, max)
}

/// Normalized `WF_KERNEL`-square Gaussian with spread `WF_SIGMA`.
pub fn gaussian_kernel() -> Vec<f64> {
    let r = (WF_KERNEL / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (-((x * x + y * y) as f64) / (2.0 * WF_SIGMA * WF_SIGMA)).exp()))
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Euclidean distance to, and index of, the nearest foreground pixel.
///
/// Ties go to the lowest row-major index. Foreground pixels map to
/// themselves at distance 0. `fg` must be non-empty.
pub fn nearest_foreground(fg: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let fg_list: Vec<usize> = (0..h * w).filter(|&i| fg[i]).collect();
    let mut dist = vec![0.0; h * w];
    let mut idx: Vec<usize> = (0..h * w).collect();
    let d2 = |a: usize, b: usize| {
        let (dy, dx) = ((a / w) as isize - (b / w) as isize, (a % w) as isize - (b % w) as isize);
        (dy * dy + dx * dx) as usize
    };
    let brute = fg_list.len() <= 64;
    for i in 0..h * w {
        if fg[i] {
            continue;
        }
        let best = if brute {
            fg_list.iter().map(|&j| (d2(i, j), j)).min().expect("non-empty foreground")
        } else {
            ring_search(fg, h, w, i)
        };
        dist[i] = (best.0 as f64).sqrt();
        idx[i] = best.1;
    }
    (dist, idx)
}

/// Scans square rings of growing Chebyshev radius until no unvisited pixel
/// can beat the best squared distance.
fn ring_search(fg: &[bool], h: usize, w: usize, i: usize) -> (usize, usize) {
    let (cy, cx) = ((i / w) as isize, (i % w) as isize);
    let mut best = (usize::MAX, usize::MAX);
    let max_r = h.max(w) as isize;
    for r in 1..=max_r {
        let mut visit = |y: isize, x: isize| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                let j = y as usize * w + x as usize;
                if fg[j] {
                    let d = ((y - cy) * (y - cy) + (x - cx) * (x - cx)) as usize;
                    best = best.min((d, j));
                }
            }
        };
        for x in cx - r..=cx + r {
            visit(cy - r, x);
            visit(cy + r, x);
        }
        for y in cy - r + 1..cy + r {
            visit(y, cx - r);
            visit(y, cx + r);
        }
        let next = ((r + 1) * (r + 1)) as usize;
        if best.0 < next {
            break;
        }
    }
    best
}

/// Zero-padded `same` correlation of an `h x w` plane with a square kernel.
fn filter_same(src: &[f64], h: usize, w: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let yy = y + ky;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in -r..=r {
                    let xx = x + kx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += k[((ky + r) * ks as isize + kx + r) as usize] * src[yy as usize * w + xx as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure with `beta^2 = 1`. Zero when the ground truth is empty.
pub fn weighted_f(s: &Tensor, g: &Tensor) -> Result<f64> {
    let (h, w) = check_pair(s, g)?;
    let fg: Vec<bool> = g.data().iter().map(|&v| v == 1.0).collect();
    if !fg.iter().any(|&b| b) {
        return Ok(0.0);
    }
    let e: Vec<f64> = s.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).collect();
    let (dst, idx) = nearest_foreground(&fg, h, w);
    let et: Vec<f64> = (0..h * w).map(|i| e[idx[i]]).collect();
    let ea = filter_same(&et, h, w, &gaussian_kernel(), WF_KERNEL);
    let mut sum_g = 0.0;
    let mut ew_fg = 0.0;
    let mut ew_bg = 0.0;
    for i in 0..h * w {
        if fg[i] {
            let m = if ea[i] < e[i] { ea[i] } else { e[i] };
            ew_fg += m;
            sum_g += 1.0;
        } else {
            let b = 2.0 - ((0.5f64).ln() / 5.0 * dst[i]).exp();
            ew_bg += e[i] * b;
        }
    }
    let tp = sum_g - ew_fg;
    let r = 1.0 - ew_fg / sum_g;
    let p = tp / (f64::EPSILON + tp + ew_bg);
    Ok(2.0 * r * p / (f64::EPSILON + r + p))
}

/// Adaptive binarization: `s >= min(2 mean(s), 1)` and `s > 0`.
pub fn adaptive_binarize(s: &Tensor) -> Vec<f64> {
    let thr = (2.0 * s.mean()).min(1.0);
    s.data().iter().map(|&v| (v > 0.0 && v >= thr) as u8 as f64).collect()
}

/// Enhanced-alignment measure of the adaptively binarized prediction.
pub fn e_measure(s: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(s, g)?;
    let fm = adaptive_binarize(s);
    let n = fm.len() as f64;
    let gsum: f64 = g.data().iter().sum();
    if gsum == 0.0 {
        return Ok(fm.iter().map(|v| 1.0 - v).sum::<f64>() / n);
    }
    if gsum == n {
        return Ok(fm.iter().sum::<f64>() / n);
    }
    let ms = fm.iter().sum::<f64>() / n;
    let mg = gsum / n;
    let total: f64 = fm
        .iter()
        .zip(g.data())
        .map(|(a, b)| {
            let (ps, pg) = (a - ms, b - mg);
            let xi = 2.0 * ps * pg / (ps * ps + pg * pg);
            (xi + 1.0) * (xi + 1.0) / 4.0
        })
        .sum();
    Ok(total / n)
}

/// The four measures of one subset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub e_measure: f64,
    pub weighted_f: f64,
    pub f_mean: f64,
    pub f_max: f64,
    pub mae: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub overall: Scores,
    /// Present when labels were supplied.
    pub per_challenge: Option<BTreeMap<ChallengeLabel, Scores>>,
}

struct PerImage {
    e: f64,
    wf: f64,
    mae: f64,
    curve: Vec<f64>,
}

fn per_image(s: &Tensor, g: &Tensor) -> Result<PerImage> {
    Ok(PerImage {
        e: e_measure(s, g)?,
        wf: weighted_f(s, g)?,
        mae: mae(s, g)?,
        curve: f_curve(s, g)?,
    })
}

fn aggregate<'a>(items: impl Iterator<Item = &'a PerImage>) -> Scores {
    let mut sc = Scores::default();
    let mut curve = vec![0.0; THRESHOLDS];
    for it in items {
        sc.e_measure += it.e;
        sc.weighted_f += it.wf;
        sc.mae += it.mae;
        curve.iter_mut().zip(&it.curve).for_each(|(a, b)| *a += b);
        sc.count += 1;
    }
    if sc.count == 0 {
        return sc;
    }
    let n = sc.count as f64;
    sc.e_measure /= n;
    sc.weighted_f /= n;
    sc.mae /= n;
    curve.iter_mut().for_each(|v| *v /= n);
    (sc.f_mean, sc.f_max) = curve_summary(&curve);
    sc
}

/// Dataset-level measures. F-measure curves are averaged over images before
/// taking mean and max; the other measures are per-image means. A sample
/// with several labels counts towards each.
pub fn report(preds: &[Tensor], gts: &[Tensor], labels: Option<&[Vec<ChallengeLabel>]>) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::Contract("cannot report on an empty dataset".into()));
    }
    if preds.len() != gts.len() || labels.is_some_and(|l| l.len() != preds.len()) {
        return Err(Error::Contract(format!(
            "{} predictions, {} ground truths, {} label sets",
            preds.len(),
            gts.len(),
            labels.map_or("no".to_string(), |l| l.len().to_string())
        )));
    }
    let items = preds.iter().zip(gts).map(|(s, g)| per_image(s, g)).collect::<Result<Vec<_>>>()?;
    let overall = aggregate(items.iter());
    let per_challenge = labels.map(|labels| {
        ChallengeLabel::ALL
            .iter()
            .filter_map(|c| {
                let sub = aggregate(items.iter().zip(labels).filter(|(_, l)| l.contains(c)).map(|(i, _)| i));
                (sub.count > 0).then_some((*c, sub))
            })
            .collect()
    });
    Ok(MetricReport { overall, per_challenge })
}

impl MetricReport {
    fn columns(&self) -> (Vec<String>, Vec<f64>) {
        let o = &self.overall;
        let mut head: Vec<String> = ["E", "wF", "F_mean", "F_max", "MAE"].map(String::from).to_vec();
        let mut vals = vec![o.e_measure, o.weighted_f, o.f_mean, o.f_max, o.mae];
        if let Some(pc) = &self.per_challenge {
            for (c, s) in pc {
                for (k, v) in [("E", s.e_measure), ("wF", s.weighted_f), ("F_max", s.f_max), ("MAE", s.mae)] {
                    head.push(format!("{}_{}", c.code(), k));
                    vals.push(v);
                }
            }
        }
        (head, vals)
    }

    pub fn write_csv(&self, w: impl Write, method: &str, dataset: &str) -> Result<()> {
        let (head, vals) = self.columns();
        let mut out = csv::Writer::from_writer(w);
        let mut row = vec!["method".to_string(), "dataset".to_string()];
        row.extend(head);
        out.write_record(&row).map_err(csv_err)?;
        let mut row = vec![method.to_string(), dataset.to_string()];
        row.extend(vals.iter().map(|v| format!("{:.6}", v)));
        out.write_record(&row).map_err(csv_err)?;
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Aligned plain-text table with the same columns as the CSV.
    pub fn table(&self, method: &str, dataset: &str) -> String {
        let (head, vals) = self.columns();
        let mut cells_h = vec!["method".to_string(), "dataset".to_string()];
        cells_h.extend(head);
        let mut cells_v = vec![method.to_string(), dataset.to_string()];
        cells_v.extend(vals.iter().map(|v| format!("{:.4}", v)));
        let widths: Vec<usize> = cells_h.iter().zip(&cells_v).map(|(a, b)| a.len().max(b.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{:>w$}", c, w = *w))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", line(&cells_h), line(&cells_v))
    }

    pub fn save(&self, dir: &Path, method: &str, dataset: &str) -> Result<()> {
        let csv_path = dir.join("metrics.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(f, method, dataset)?;
        let txt = dir.join("metrics.txt");
        std::fs::write(&txt, self.table(method, dataset)).map_err(|e| Error::io(&txt, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        path: "<csv>".into(),
        detail: e.to_string(),
    }
}
