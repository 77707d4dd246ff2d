//! Forward and backward kernels. Every function here is pure: inputs are
//! borrowed, results are freshly allocated.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let (cin, h, w) = input.dims3(OP)?;
        let [cout, kcin, kh, kw] = *kernel.shape() else {
            return Err(Error::RankMismatch {
                op: OP,
                expected: 4,
                found: kernel.rank(),
            });
        };
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "kernel input channels",
                expected: cin,
                found: kcin,
            });
        }
        if kw != kh {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "kernel width",
                expected: kh,
                found: kw,
            });
        }
        if kh % 2 == 0 {
            return Err(invalid("conv2d: kernel size must be odd"));
        }
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "bias length",
                expected: cout,
                found: bias.len(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d: stride must be positive"));
        }
        let out_dim = |n: usize, dim: &'static str| {
            let padded = n + 2 * padding;
            if padded < kh {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    dim,
                    expected: kh,
                    found: padded,
                });
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(Self {
            in_channels: cin,
            out_channels: cout,
            in_h: h,
            in_w: w,
            k: kh,
            stride,
            padding,
            out_h: out_dim(h, "padded height")?,
            out_w: out_dim(w, "padded width")?,
        })
    }

    /// Output positions `o` along one axis whose source index
    /// `o * stride + tap - padding` lands inside `0..n`.
    fn valid_range(&self, tap: usize, n: usize, out_n: usize) -> core::ops::Range<usize> {
        let s = self.stride;
        let lo = if tap >= self.padding {
            0
        } else {
            (self.padding - tap).div_ceil(s)
        };
        // largest o with o*s + tap - p <= n - 1
        let hi = if n + self.padding < tap + 1 {
            0
        } else {
            ((n - 1 + self.padding - tap) / s + 1).min(out_n)
        };
        lo..hi.max(lo)
    }
}

/// Cross-correlation of a `Cin×H×W` input with a `Cout×Cin×k×k` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    let (x, kw, b) = (input.as_slice(), kernel.as_slice(), bias.as_slice());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0f32; g.out_channels * plane];
    for co in 0..g.out_channels {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        out_c.fill(b[co]);
        for ci in 0..g.in_channels {
            let x_c = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ky in 0..g.k {
                let rows = g.valid_range(ky, g.in_h, g.out_h);
                for kx in 0..g.k {
                    let w = kw[((co * g.in_channels + ci) * g.k + ky) * g.k + kx];
                    let cols = g.valid_range(kx, g.in_w, g.out_w);
                    if cols.is_empty() {
                        continue;
                    }
                    let src = cols.start * g.stride + kx - g.padding;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.padding;
                        let x_row = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                        let o_row = &mut out_c[oy * g.out_w + cols.start..oy * g.out_w + cols.end];
                        if g.stride == 1 {
                            for (o, &xv) in o_row.iter_mut().zip(&x_row[src..]) {
                                *o += w * xv;
                            }
                        } else {
                            for (o, &xv) in o_row.iter_mut().zip(x_row[src..].iter().step_by(g.stride)) {
                                *o += w * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of a convolution with respect to whichever operands are asked
/// for. Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    want: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    let expected = [g.out_channels, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            dim: "upstream gradient length",
            expected: expected.iter().product(),
            found: grad_out.len(),
        });
    }
    let (x, kw, go) = (input.as_slice(), kernel.as_slice(), grad_out.as_slice());
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;

    let mut d_x = want[0].then(|| vec![0.0f32; input.len()]);
    let mut d_k = want[1].then(|| vec![0.0f32; kernel.len()]);
    let d_b = want[2].then(|| {
        (0..g.out_channels)
            .map(|co| {
                go[co * plane..(co + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>() as f32
            })
            .collect::<Vec<f32>>()
    });

    if d_x.is_some() || d_k.is_some() {
        for co in 0..g.out_channels {
            let go_c = &go[co * plane..(co + 1) * plane];
            for ci in 0..g.in_channels {
                let x_c = &x[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..g.k {
                    let rows = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..g.k {
                        let widx = ((co * g.in_channels + ci) * g.k + ky) * g.k + kx;
                        let w = kw[widx];
                        let cols = g.valid_range(kx, g.in_w, g.out_w);
                        let mut acc = 0.0f32;
                        if cols.is_empty() {
                            continue;
                        }
                        let src = cols.start * g.stride + kx - g.padding;
                        for oy in rows.clone() {
                            let iy = oy * g.stride + ky - g.padding;
                            let go_row = &go_c[oy * g.out_w + cols.start..oy * g.out_w + cols.end];
                            if let Some(dx) = d_x.as_mut() {
                                let base = ci * in_plane + iy * g.in_w;
                                let dx_row = &mut dx[base + src..base + g.in_w];
                                if g.stride == 1 {
                                    for (d, &gv) in dx_row.iter_mut().zip(go_row) {
                                        *d += w * gv;
                                    }
                                } else {
                                    for (d, &gv) in dx_row.iter_mut().step_by(g.stride).zip(go_row) {
                                        *d += w * gv;
                                    }
                                }
                            }
                            if d_k.is_some() {
                                let x_row = &x_c[iy * g.in_w + src..(iy + 1) * g.in_w];
                                if g.stride == 1 {
                                    acc += go_row.iter().zip(x_row).map(|(&a, &b)| a * b).sum::<f32>();
                                } else {
                                    acc += go_row
                                        .iter()
                                        .zip(x_row.iter().step_by(g.stride))
                                        .map(|(&a, &b)| a * b)
                                        .sum::<f32>();
                                }
                            }
                        }
                        if let Some(dk) = d_k.as_mut() {
                            dk[widx] += acc;
                        }
                    }
                }
            }
        }
    }

    Ok((
        d_x.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        d_k.map(|d| Tensor::new(kernel.shape(), d)).transpose()?,
        d_b.map(|d| Tensor::new(bias.shape(), d)).transpose()?,
    ))
}

/// Elementwise `max(x, slope * x)`.
pub fn leaky_relu(input: &Tensor, slope: f32) -> Result<Tensor> {
    check_slope(slope)?;
    Ok(input.map(|v| if v > 0.0 { v } else { slope * v }))
}

/// The subgradient at exactly zero is the negative-side slope.
pub fn leaky_relu_backward(input: &Tensor, slope: f32, grad_out: &Tensor) -> Result<Tensor> {
    check_slope(slope)?;
    input.zip_map(grad_out, "leaky_relu_backward", |x, g| if x > 0.0 { g } else { slope * g })
}

fn check_slope(slope: f32) -> Result<()> {
    if !(0.0..1.0).contains(&slope) {
        return Err(invalid("leaky_relu: slope must lie in [0, 1)"));
    }
    Ok(())
}

/// Replicates every pixel into a 2×2 block.
pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3("upsample_nearest2x")?;
    let x = input.as_slice();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &x[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Sums each 2×2 block of the upstream gradient.
pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.dims3("upsample_nearest2x_backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(invalid("upsample_nearest2x_backward: odd gradient extent"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.as_slice();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let src = &g[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            let dst = &mut out[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            for (xo, &v) in src.iter().enumerate() {
                dst[xo / 2] += v;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Per-pixel softmax over the channel axis, with max subtraction.
pub fn channel_softmax(input: &Tensor) -> Result<Tensor> {
    let (m, h, w) = input.dims3("channel_softmax")?;
    if m < 2 {
        return Err(invalid("channel_softmax: need at least two channels"));
    }
    let plane = h * w;
    let z = input.as_slice();
    let mut out = vec![0.0f32; z.len()];
    for p in 0..plane {
        let max = (0..m).map(|c| z[c * plane + p]).fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for c in 0..m {
            let e = libm::expf(z[c * plane + p] - max);
            out[c * plane + p] = e;
            total += e;
        }
        for c in 0..m {
            out[c * plane + p] /= total;
        }
    }
    Tensor::new(input.shape(), out)
}

/// Backward through softmax given its output `probs`:
/// `dz_c = p_c (g_c - Σ_k p_k g_k)`.
pub fn channel_softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (m, h, w) = probs.dims3("channel_softmax_backward")?;
    probs.same_shape(grad_out, "channel_softmax_backward")?;
    let plane = h * w;
    let (p, g) = (probs.as_slice(), grad_out.as_slice());
    let mut out = vec![0.0f32; p.len()];
    for px in 0..plane {
        let dot: f32 = (0..m).map(|c| p[c * plane + px] * g[c * plane + px]).sum();
        for c in 0..m {
            let i = c * plane + px;
            out[i] = p[i] * (g[i] - dot);
        }
    }
    Tensor::new(probs.shape(), out)
}

/// Stacks `C_i×H×W` tensors along the channel axis.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| invalid("concat_channels: no inputs"))?;
    let (_, h, w) = first.dims3("concat_channels")?;
    let mut channels = 0;
    let mut data = Vec::new();
    for t in inputs {
        let (c, th, tw) = t.dims3("concat_channels")?;
        if th != h {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                dim: "height",
                expected: h,
                found: th,
            });
        }
        if tw != w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                dim: "width",
                expected: w,
                found: tw,
            });
        }
        channels += c;
        data.extend_from_slice(t.as_slice());
    }
    Tensor::new(&[channels, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = grad.dims3("split_channels")?;
    let total: usize = channels.iter().sum();
    if total != c {
        return Err(Error::ShapeMismatch {
            op: "split_channels",
            dim: "channels",
            expected: total,
            found: c,
        });
    }
    let mut offset = 0;
    channels
        .iter()
        .map(|&n| {
            let piece = grad.as_slice()[offset * h * w..(offset + n) * h * w].to_vec();
            offset += n;
            Tensor::new(&[n, h, w], piece)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random(shape: &[usize], rng: &mut CounterRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
    }

    /// Direct six-loop cross-correlation with explicit bounds checks.
    fn reference_conv(x: &Tensor, k: &Tensor, b: &Tensor, s: usize, p: usize) -> Vec<f32> {
        let (cin, h, w) = x.dims3("ref").unwrap();
        let (cout, ks) = (k.shape()[0], k.shape()[2]);
        let oh = (h + 2 * p - ks) / s + 1;
        let ow = (w + 2 * p - ks) / s + 1;
        let mut out = vec![0.0f32; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.as_slice()[co];
                    for ci in 0..cin {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += k.as_slice()[((co * cin + ci) * ks + ky) * ks + kx]
                                    * x.as_slice()[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut rng = CounterRng::new(1);
        let x = Tensor::zeros(&[1, 3, 3]);
        let k = random(&[2, 1, 3, 3], &mut rng);
        let b = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.as_slice()[..9].iter().all(|&v| v == 0.25));
        assert!(y.as_slice()[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = CounterRng::new(2);
        let x = random(&[1, 4, 5], &mut rng);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &k, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_reference_loops() {
        let mut rng = CounterRng::new(3);
        for &(s, p, h, w) in &[(1, 0, 5, 5), (1, 1, 5, 5), (2, 1, 5, 5), (2, 1, 8, 6), (2, 0, 7, 9), (1, 2, 4, 3)] {
            let x = random(&[2, h, w], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let got = conv2d(&x, &k, &b, s, p).unwrap();
            let want = reference_conv(&x, &k, &b, s, p);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.as_slice().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "stride {s} pad {p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let b = Tensor::zeros(&[3]);
        match conv2d(&x, &Tensor::zeros(&[3, 1, 3, 3]), &b, 1, 1) {
            Err(Error::ShapeMismatch { dim, .. }) => assert_eq!(dim, "kernel input channels"),
            other => panic!("{other:?}"),
        }
        assert!(conv2d(&x, &Tensor::zeros(&[3, 2, 2, 2]), &b, 1, 1).is_err());
        match conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[2]), 1, 1) {
            Err(Error::ShapeMismatch { dim, .. }) => assert_eq!(dim, "bias length"),
            other => panic!("{other:?}"),
        }
        let tiny = Tensor::zeros(&[2, 1, 1]);
        assert!(conv2d(&tiny, &Tensor::zeros(&[3, 2, 5, 5]), &b, 1, 0).is_err());
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = leaky_relu(&x, 0.1).unwrap();
        assert_eq!(y.as_slice(), &[-0.1, 0.0, 2.0]);
        let pos = Tensor::new(&[3], vec![0.5, 1.0, 7.0]).unwrap();
        assert_eq!(leaky_relu(&pos, 0.1).unwrap(), pos);
        let g = leaky_relu_backward(&x, 0.1, &Tensor::ones(&[3])).unwrap();
        assert_eq!(g.as_slice(), &[0.1, 0.1, 1.0]);
        assert!(leaky_relu(&x, 1.0).is_err());
    }

    #[test]
    fn leaky_relu_gradient_matches_central_difference() {
        let f = |v: f32| leaky_relu(&Tensor::scalar(v), 0.1).unwrap().as_slice()[0];
        let h = 1e-3f32;
        let fd = (f(-3.0 + h) - f(-3.0 - h)) / (2.0 * h);
        let an = leaky_relu_backward(&Tensor::scalar(-3.0), 0.1, &Tensor::scalar(1.0)).unwrap();
        assert!((fd - an.as_slice()[0]).abs() / 0.1 < 1e-2);
        assert!((an.as_slice()[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn upsample_laws() {
        let y = upsample_nearest2x(&Tensor::new(&[1, 1, 1], vec![0.7]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.as_slice().iter().all(|&v| v == 0.7));
        let g = upsample_nearest2x_backward(&Tensor::ones(&[2, 6, 6])).unwrap();
        assert_eq!(g.shape(), &[2, 3, 3]);
        assert!(g.as_slice().iter().all(|&v| v == 4.0));
        let mut rng = CounterRng::new(4);
        let x = random(&[2, 3, 3], &mut rng);
        assert_eq!(upsample_nearest2x(&x).unwrap().shape(), &[2, 6, 6]);
    }

    #[test]
    fn softmax_laws() {
        let eq = Tensor::new(&[4, 1, 1], vec![3.0; 4]).unwrap();
        let p = channel_softmax(&eq).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-7));

        let sat = Tensor::new(&[2, 1, 1], vec![0.0, 1000.0]).unwrap();
        assert_eq!(channel_softmax(&sat).unwrap().as_slice(), &[0.0, 1.0]);

        let mut rng = CounterRng::new(5);
        let z = random(&[2, 4, 4], &mut rng);
        let p = channel_softmax(&z).unwrap();
        for px in 0..16 {
            let (a, b) = (z.as_slice()[px] as f64, z.as_slice()[16 + px] as f64);
            let denom = a.exp() + b.exp();
            assert!((p.as_slice()[px] as f64 - a.exp() / denom).abs() < 1e-6);
            assert!((p.as_slice()[16 + px] as f64 - b.exp() / denom).abs() < 1e-6);
        }
        assert!(channel_softmax(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn concat_and_split_invert() {
        let mut rng = CounterRng::new(6);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[1, 3, 4], &mut rng);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3, 4]);
        let parts = split_channels(&c, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        match concat_channels(&[&a, &Tensor::zeros(&[1, 3, 5])]) {
            Err(Error::ShapeMismatch { dim, .. }) => assert_eq!(dim, "width"),
            other => panic!("{other:?}"),
        }
    }
}
