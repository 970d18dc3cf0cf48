//! Corner-aligned bilinear interpolation: output index 0 samples input index 0
//! and the last output index samples the last input index.

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn taps(input: usize, output: usize) -> Vec<Tap> {
    (0..output)
        .map(|o| {
            let pos = if output > 1 {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Resizes every `[h, w]` plane of `x` (`planes` of them) to `[oh, ow]`.
pub(crate) fn forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let r0 = &src[y.lo * w..(y.lo + 1) * w];
            let r1 = &src[y.hi * w..(y.hi + 1) * w];
            for t in &tx {
                // lerp form keeps constant fields exact
                let top = r0[t.lo] + t.frac * (r0[t.hi] - r0[t.lo]);
                let bot = r1[t.lo] + t.frac * (r1[t.hi] - r1[t.lo]);
                out.push(top + y.frac * (bot - top));
            }
        }
    }
    out
}

pub(crate) fn backward(dout: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, t) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gt = g * (1.0 - y.frac);
                let gb = g * y.frac;
                dst[y.lo * w + t.lo] += gt * (1.0 - t.frac);
                dst[y.lo * w + t.hi] += gt * t.frac;
                dst[y.hi * w + t.lo] += gb * (1.0 - t.frac);
                dst[y.hi * w + t.hi] += gb * t.frac;
            }
        }
    }
    dx
}
