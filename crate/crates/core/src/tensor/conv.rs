//! im2col convolution kernels backed by a blocked GEMM.

use crate::error::{Error, Result};

/// Stride, zero padding and dilation of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Size-preserving 3x3 geometry at the given dilation.
    pub fn same3(dilation: usize) -> Self {
        Self::new(1, dilation, dilation)
    }

    pub fn output_extent(&self, axis: &'static str, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::dim(axis, "stride must be positive"));
        }
        if self.dilation == 0 {
            return Err(Error::dim(axis, "dilation must be at least 1"));
        }
        if kernel == 0 {
            return Err(Error::dim(axis, "empty kernel"));
        }
        let effective = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if effective > padded {
            return Err(Error::dim(
                axis,
                format!(
                    "effective kernel extent {} exceeds padded input extent {}",
                    effective, padded
                ),
            ));
        }
        Ok((padded - effective) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

impl ConvShape {
    pub fn infer(input: &[usize], weight: &[usize], bias: &[usize], geom: ConvGeometry) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = input[..] else {
            return Err(Error::dim("rank", format!("conv input must be [B,C,H,W], got {:?}", input)));
        };
        let [out_c, w_in, k_h, k_w] = weight[..] else {
            return Err(Error::dim("rank", format!("conv weight must be [Cout,Cin,kH,kW], got {:?}", weight)));
        };
        if w_in != in_c {
            return Err(Error::dim(
                "in_channels",
                format!("input has {} channels, weight expects {}", in_c, w_in),
            ));
        }
        if bias != [out_c] {
            return Err(Error::dim(
                "out_channels",
                format!("bias shape {:?} does not match {} output channels", bias, out_c),
            ));
        }
        let out_h = geom.output_extent("height", in_h, k_h)?;
        let out_w = geom.output_extent("width", in_w, k_w)?;
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            out_h,
            out_w,
            geom,
        })
    }

    fn rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }
}

/// Unfolds the input into a `[Cin*kH*kW, B*H'*W']` matrix.
fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let n = s.cols();
    let plane_out = s.out_h * s.out_w;
    let mut cols = vec![0.0; s.rows() * n];
    let g = s.geom;
    for c in 0..s.in_c {
        for ky in 0..s.k_h {
            for kx in 0..s.k_w {
                let row = (c * s.k_h + ky) * s.k_w + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for b in 0..s.batch {
                    let src = &x[(b * s.in_c + c) * s.in_h * s.in_w..][..s.in_h * s.in_w];
                    let dst = &mut dst_row[b * plane_out..(b + 1) * plane_out];
                    for oy in 0..s.out_h {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= s.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * s.in_w..][..s.in_w];
                        for ox in 0..s.out_w {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < s.in_w {
                                dst[oy * s.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im(cols: &[f64], s: &ConvShape, dx: &mut [f64]) {
    let n = s.cols();
    let plane_out = s.out_h * s.out_w;
    let g = s.geom;
    for c in 0..s.in_c {
        for ky in 0..s.k_h {
            for kx in 0..s.k_w {
                let row = (c * s.k_h + ky) * s.k_w + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for b in 0..s.batch {
                    let dst = &mut dx[(b * s.in_c + c) * s.in_h * s.in_w..][..s.in_h * s.in_w];
                    let src = &src_row[b * plane_out..(b + 1) * plane_out];
                    for oy in 0..s.out_h {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= s.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * s.in_w..][..s.in_w];
                        for ox in 0..s.out_w {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < s.in_w {
                                dst_row[ix as usize] += src[oy * s.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Channel-major view `[C, B*P]` of a `[B, C, P]` buffer.
fn to_channel_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    if batch == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(c * batch + b) * plane..][..plane]
                .copy_from_slice(&x[(b * channels + c) * plane..][..plane]);
        }
    }
    out
}

fn from_channel_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    if batch == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * plane..][..plane]
                .copy_from_slice(&x[(c * batch + b) * plane..][..plane]);
        }
    }
    out
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(x: &[f64], w: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let k = s.rows();
    let n = s.cols();
    let plane = s.out_h * s.out_w;
    let mut out_cm = vec![0.0; s.out_c * n];
    for (co, row) in out_cm.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    if s.is_pointwise() {
        let xc = to_channel_major(x, s.batch, s.in_c, plane);
        gemm(s.out_c, k, n, w, k as isize, 1, &xc, n as isize, 1, 1.0, &mut out_cm);
    } else {
        let cols = im2col(x, s);
        gemm(s.out_c, k, n, w, k as isize, 1, &cols, n as isize, 1, 1.0, &mut out_cm);
    }
    from_channel_major(&out_cm, s.batch, s.out_c, plane)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    s: &ConvShape,
    need: (bool, bool, bool),
) -> ConvGrads {
    let k = s.rows();
    let n = s.cols();
    let plane = s.out_h * s.out_w;
    let dout_cm = to_channel_major(dout, s.batch, s.out_c, plane);

    let bias = need
        .2
        .then(|| dout_cm.chunks(n).map(|r| r.iter().sum()).collect());

    let weight = need.1.then(|| {
        let cols = if s.is_pointwise() {
            to_channel_major(x, s.batch, s.in_c, plane)
        } else {
            im2col(x, s)
        };
        let mut dw = vec![0.0; s.out_c * k];
        // dW[co, k] = sum_n dout[co, n] * cols[k, n]
        gemm(s.out_c, n, k, &dout_cm, n as isize, 1, &cols, 1, n as isize, 0.0, &mut dw);
        dw
    });

    let input = need.0.then(|| {
        let mut dcols = vec![0.0; k * n];
        // dcols[k, n] = sum_co W[co, k] * dout[co, n]
        gemm(k, s.out_c, n, w, 1, k as isize, &dout_cm, n as isize, 1, 0.0, &mut dcols);
        if s.is_pointwise() {
            from_channel_major(&dcols, s.batch, s.in_c, plane)
        } else {
            let mut dx = vec![0.0; s.batch * s.in_c * s.in_h * s.in_w];
            col2im(&dcols, s, &mut dx);
            dx
        }
    });

    ConvGrads {
        input,
        weight,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(2, 1, 1);
        assert_eq!(g.output_extent("height", 64, 3).unwrap(), 32);
        let g = ConvGeometry::same3(2);
        assert_eq!(g.output_extent("height", 8, 3).unwrap(), 8);
        let g = ConvGeometry::new(1, 0, 3);
        assert!(g.output_extent("width", 6, 3).is_err());
    }

    #[test]
    fn zero_dilation_is_rejected() {
        let g = ConvGeometry::new(1, 1, 0);
        assert!(g.output_extent("height", 4, 3).is_err());
    }
}
