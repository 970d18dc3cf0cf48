//! Brute-force reference implementations shared by the integration tests.
//!
//! The oracles work on plain tensors with explicit loops and never call into
//! the graph engine.

#![allow(dead_code)]

use lafb::iigm::GuidanceConvs;
use lafb::params::ConvParams;
use lafb::tensor::{ConvGeometry, Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn rand_unit(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.0..1.0))
}

pub fn rand_binary(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
}

/// Direct cross-correlation, six nested loops per output value.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Tensor {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let ow = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let mut out = vec![0.0; bs * co * oh * ow];
    for n in 0..bs {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at4(o, c, ky, kx) * x.at4(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[((n * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new([bs, co, oh, ow], out).unwrap()
}

pub fn conv_block_oracle(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Tensor {
    conv_oracle(x, w, b, g).map(|v| v.max(0.0))
}

/// Per-pixel closed-form bilinear interpolation with corner alignment.
pub fn resize_oracle(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Vec::with_capacity(bs * c * oh * ow);
    for n in 0..bs {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = if oh == 1 { 0.0 } else { oy as f64 * (h as f64 - 1.0) / (oh as f64 - 1.0) };
                    let sx = if ow == 1 { 0.0 } else { ox as f64 * (w as f64 - 1.0) / (ow as f64 - 1.0) };
                    let y0 = sy.floor() as usize;
                    let x0 = sx.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let a = sy - y0 as f64;
                    let bb = sx - x0 as f64;
                    let v = (1.0 - a) * (1.0 - bb) * x.at4(n, ch, y0, x0)
                        + (1.0 - a) * bb * x.at4(n, ch, y0, x1)
                        + a * (1.0 - bb) * x.at4(n, ch, y1, x0)
                        + a * bb * x.at4(n, ch, y1, x1);
                    out.push(v);
                }
            }
        }
    }
    Tensor::new([bs, c, oh, ow], out).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .unwrap()
}

pub fn concat(parts: &[&Tensor]) -> Tensor {
    let (bs, h, w) = (parts[0].shape()[0], parts[0].shape()[2], parts[0].shape()[3]);
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = vec![0.0; bs * total * h * w];
    for n in 0..bs {
        let mut off = 0;
        for p in parts {
            let c = p.shape()[1];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((n * total + off + ch) * h + y) * w + x] = p.at4(n, ch, y, x);
                    }
                }
            }
            off += c;
        }
    }
    Tensor::new([bs, total, h, w], out).unwrap()
}

/// Loop-based adaptive ensemble: pooled descriptors, two 1x1 matrix-vector
/// products, sigmoid, broadcast multiply. Returns `(v, fb)`.
pub fn aem_oracle(fc: &Tensor, w_avg: &Tensor, b_avg: &Tensor, w_max: &Tensor, b_max: &Tensor) -> (Vec<Vec<f64>>, Tensor) {
    let (bs, c, h, w) = (fc.shape()[0], fc.shape()[1], fc.shape()[2], fc.shape()[3]);
    let mut v_all = Vec::new();
    let mut fb = fc.clone();
    for n in 0..bs {
        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let val = fc.at4(n, ch, y, x);
                    avg[ch] += val / (h * w) as f64;
                    max[ch] = max[ch].max(val);
                }
            }
        }
        let mut v = vec![0.0; c];
        for o in 0..c {
            let mut a = b_avg.data()[o];
            let mut m = b_max.data()[o];
            for i in 0..c {
                a += w_avg.at4(o, i, 0, 0) * avg[i];
                m += w_max.at4(o, i, 0, 0) * max[i];
            }
            v[o] = sigmoid(a + m);
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    fb.data_mut()[((n * c + ch) * h + y) * w + x] *= v[ch];
                }
            }
        }
        v_all.push(v);
    }
    (v_all, fb)
}

pub fn mae_oracle(s: &[f64], g: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        total += (s[i] - g[i]).abs();
    }
    total / s.len() as f64
}

pub struct GroupRaw {
    pub hm: ConvParams,
    pub hh: ConvParams,
    pub ll: ConvParams,
    pub lm: ConvParams,
}

pub fn group_raw(lo: usize, mid: usize, hi: usize, rng: &mut ChaCha8Rng) -> GroupRaw {
    let g = ConvGeometry::same3(1);
    GroupRaw {
        hm: ConvParams::uniform(lo, mid, 3, g, rng),
        hh: ConvParams::uniform(lo, hi, 3, g, rng),
        ll: ConvParams::uniform(hi, lo, 3, g, rng),
        lm: ConvParams::uniform(hi, mid, 3, g, rng),
    }
}

pub fn bind_group(g: &Graph, r: &GroupRaw) -> GuidanceConvs {
    GuidanceConvs {
        high_from_mid: r.hm.bind(g, false),
        high_from_hi: r.hh.bind(g, false),
        low_from_lo: r.ll.bind(g, false),
        low_from_mid: r.lm.bind(g, false),
    }
}

pub fn conv_raw(x: &Tensor, p: &ConvParams) -> Tensor {
    conv_oracle(x, &p.weight, &p.bias, p.geometry)
}

/// `(I_lo, I_hi)` from loop oracles.
pub fn group_oracle(lo: &Tensor, mid: &Tensor, hi: &Tensor, r: &GroupRaw) -> (Tensor, Tensor) {
    let (hl, wl) = (lo.shape()[2], lo.shape()[3]);
    let (hh, wh) = (hi.shape()[2], hi.shape()[3]);
    let w_high = zip_map(
        &conv_raw(&resize_oracle(mid, hl, wl), &r.hm),
        &conv_raw(&resize_oracle(hi, hl, wl), &r.hh),
        |a, b| sigmoid(a + b),
    );
    let w_low = zip_map(
        &conv_raw(&resize_oracle(lo, hh, wh), &r.ll),
        &conv_raw(&resize_oracle(mid, hh, wh), &r.lm),
        |a, b| sigmoid(a + b),
    );
    let i_lo = zip_map(lo, &w_high, |f, w| f + f * w);
    let i_hi = zip_map(hi, &w_low, |f, w| f + f * w);
    (i_lo, i_hi)
}

/// F-measure per threshold from explicit confusion counts.
pub fn f_curve_oracle(s: &Tensor, g: &Tensor) -> Vec<f64> {
    (0..256)
        .map(|t| {
            let thr = t as f64 / 255.0;
            let (mut tp, mut fp, mut pos) = (0.0, 0.0, 0.0);
            for (&v, &gt) in s.data().iter().zip(g.data()) {
                let p = v >= thr;
                if gt == 1.0 {
                    pos += 1.0;
                    if p {
                        tp += 1.0;
                    }
                } else if p {
                    fp += 1.0;
                }
            }
            if tp == 0.0 {
                return 0.0;
            }
            let (prec, rec) = (tp / (tp + fp), tp / pos);
            1.3 * prec * rec / (0.3 * prec + rec)
        })
        .collect()
}

/// Weighted F from a dense distance scan and a dense `N x N` filter matrix.
pub fn weighted_f_oracle(s: &Tensor, g: &Tensor, h: usize, w: usize) -> f64 {
    let n = h * w;
    let gd = g.data();
    if gd.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let e: Vec<f64> = s.data().iter().zip(gd).map(|(a, b)| (a - b).abs()).collect();
    let mut dst = vec![0.0; n];
    let mut et = e.clone();
    for i in 0..n {
        if gd[i] == 1.0 {
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for j in 0..n {
            if gd[j] == 1.0 {
                let dy = (i / w) as f64 - (j / w) as f64;
                let dx = (i % w) as f64 - (j % w) as f64;
                let d = (dy * dy + dx * dx).sqrt();
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        dst[i] = best.0;
        et[i] = e[best.1];
    }
    let mut k = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(dy * dy + dx * dx) / 50.0).exp();
            ksum += *v;
        }
    }
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = (j / w) as isize - (i / w) as isize;
            let dx = (j % w) as isize - (i % w) as isize;
            if dy.abs() <= 3 && dx.abs() <= 3 {
                *v = k[(dy + 3) as usize][(dx + 3) as usize] / ksum;
            }
        }
    }
    let ea: Vec<f64> = m.iter().map(|row| row.iter().zip(&et).map(|(a, b)| a * b).sum()).collect();
    let (mut fg_err, mut bg_err, mut count) = (0.0, 0.0, 0.0);
    for i in 0..n {
        if gd[i] == 1.0 {
            fg_err += e[i].min(ea[i]);
            count += 1.0;
        } else {
            bg_err += e[i] * (2.0 - (0.5f64.ln() / 5.0 * dst[i]).exp());
        }
    }
    let eps = f64::EPSILON;
    let tp = count - fg_err;
    let r = 1.0 - fg_err / count;
    let p = tp / (eps + tp + bg_err);
    2.0 * r * p / (eps + r + p)
}

pub fn e_measure_oracle(s: &Tensor, g: &Tensor) -> f64 {
    let n = s.len() as f64;
    let thr = (2.0 * s.data().iter().sum::<f64>() / n).min(1.0);
    let b: Vec<f64> = s.data().iter().map(|&v| if v > 0.0 && v >= thr { 1.0 } else { 0.0 }).collect();
    let gsum: f64 = g.data().iter().sum();
    if gsum == 0.0 {
        return b.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if gsum == n {
        return b.iter().sum::<f64>() / n;
    }
    let (mb, mg) = (b.iter().sum::<f64>() / n, gsum / n);
    let mut total = 0.0;
    for (x, y) in b.iter().zip(g.data()) {
        let (a, c) = (x - mb, y - mg);
        let xi = 2.0 * a * c / (a * a + c * c);
        total += (1.0 + xi).powi(2) / 4.0;
    }
    total / n
}

/// Prediction correlated with the mask, with some exact threshold values.
pub fn prediction(g: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = g
        .data()
        .iter()
        .map(|v| {
            if rng.gen_bool(0.2) {
                rng.gen_range(0..256) as f64 / 255.0
            } else {
                (0.6 * v + 0.4 * rng.gen_range(0.0..1.0f64)).clamp(0.0, 1.0)
            }
        })
        .collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

pub fn case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, usize, usize) {
    let (h, w) = (rng.gen_range(3..=16), rng.gen_range(3..=16));
    let density = [0.0, 0.05, 0.3, 0.7, 1.0][rng.gen_range(0..5)];
    let g = rand_binary(&[1, 1, h, w], density, rng);
    let s = if rng.gen_bool(0.2) { rand_unit(&[1, 1, h, w], rng) } else { prediction(&g, rng) };
    (s, g, h, w)
}
