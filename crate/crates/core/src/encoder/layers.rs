//! Forward and backward kernels for the encoder's building blocks.
//!
//! Activations are stored channel-major as `[C, B * H * W]` so that a
//! convolution is one matrix product `W[C_out, C_in * k * k] · cols` and its
//! output is already in activation layout.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// A batch of feature maps laid out as `[C, B * H * W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub data: Array2<f32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Act {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn zeros_like(&self) -> Act {
        Act {
            data: Array2::zeros(self.data.raw_dim()),
            ..*self
        }
    }
}

/// Static description of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn output_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds `x` into a `[C * k * k, B * Ho * Wo]` patch matrix.
pub fn im2col(x: &Act, conv: &ConvShape) -> (Array2<f32>, usize, usize) {
    let (k, stride, pad) = (conv.kernel, conv.stride, conv.pad);
    let ho = conv.output_extent(x.height);
    let wo = conv.output_extent(x.width);
    let c = x.channels();
    let (h, w, b) = (x.height, x.width, x.batch);
    let n = b * ho * wo;
    let mut cols = Array2::<f32>::zeros((c * k * k, n));
    let src = x.data.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out_row = &mut dst[row * n..(row + 1) * n];
                for bi in 0..b {
                    let plane = &src[ch * b * h * w + bi * h * w..ch * b * h * w + (bi + 1) * h * w];
                    let out_plane = &mut out_row[bi * ho * wo..(bi + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_line = &mut out_plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out_line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(
    dcols: ArrayView2<f32>,
    conv: &ConvShape,
    batch: usize,
    height: usize,
    width: usize,
) -> Act {
    let (k, stride, pad) = (conv.kernel, conv.stride, conv.pad);
    let ho = conv.output_extent(height);
    let wo = conv.output_extent(width);
    let c = conv.in_channels;
    let (h, w, b) = (height, width, batch);
    let n = b * ho * wo;
    let mut out = Array2::<f32>::zeros((c, b * h * w));
    let src = dcols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let in_row = &src[row * n..(row + 1) * n];
                for bi in 0..b {
                    let plane = &mut dst[ch * b * h * w + bi * h * w..ch * b * h * w + (bi + 1) * h * w];
                    let in_plane = &in_row[bi * ho * wo..(bi + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let in_line = &in_plane[oy * wo..(oy + 1) * wo];
                        for (ox, &g) in in_line.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Act {
        data: out,
        batch,
        height,
        width,
    }
}

pub struct ConvCache {
    cols: Array2<f32>,
    batch: usize,
    height: usize,
    width: usize,
}

pub fn conv_forward(
    x: &Act,
    conv: &ConvShape,
    weight: ArrayView2<f32>,
    bias: ArrayView1<f32>,
) -> (Act, ConvCache) {
    let (cols, ho, wo) = im2col(x, conv);
    let mut out = weight.dot(&cols);
    out += &bias.insert_axis(Axis(1));
    (
        Act {
            data: out,
            batch: x.batch,
            height: ho,
            width: wo,
        },
        ConvCache {
            cols,
            batch: x.batch,
            height: x.height,
            width: x.width,
        },
    )
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped unless `need_dx`.
pub fn conv_backward(
    dout: &Act,
    cache: &ConvCache,
    conv: &ConvShape,
    weight: ArrayView2<f32>,
    need_dx: bool,
) -> (Option<Act>, Array2<f32>, Array1<f32>) {
    let dweight = dout.data.dot(&cache.cols.t());
    let dbias = dout.data.sum_axis(Axis(1));
    let dx = need_dx.then(|| {
        let dcols = weight.t().dot(&dout.data);
        col2im(dcols.view(), conv, cache.batch, cache.height, cache.width)
    });
    (dx, dweight, dbias)
}

pub struct NormCache {
    xhat: Array2<f32>,
    /// `[B, groups]`
    inv_std: Array2<f32>,
    groups: usize,
}

pub const NORM_EPS: f32 = 1e-5;

/// Group normalisation over (channels in group) x (spatial) per sample.
pub fn group_norm_forward(
    x: &Act,
    groups: usize,
    gamma: ArrayView1<f32>,
    beta: ArrayView1<f32>,
) -> (Act, NormCache) {
    let c = x.channels();
    let per_group = c / groups;
    let plane = x.plane();
    let count = (per_group * plane) as f64;
    let mut xhat = Array2::<f32>::zeros(x.data.raw_dim());
    let mut inv_std = Array2::<f32>::zeros((x.batch, groups));
    let mut out = Array2::<f32>::zeros(x.data.raw_dim());
    for b in 0..x.batch {
        let cols = b * plane..(b + 1) * plane;
        for g in 0..groups {
            let chans = g * per_group..(g + 1) * per_group;
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for ch in chans.clone() {
                for &v in &x.data.row(ch).to_slice().expect("contiguous")[cols.clone()] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let istd = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_std[[b, g]] = istd as f32;
            for ch in chans {
                let src = &x.data.row(ch).to_slice().expect("contiguous")[cols.clone()];
                let mut xh_row = xhat.row_mut(ch);
                let xh = &mut xh_row.as_slice_mut().expect("contiguous")[cols.clone()];
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = ((v as f64 - mean) * istd) as f32;
                }
                let (gm, bt) = (gamma[ch], beta[ch]);
                let mut o_row = out.row_mut(ch);
                let o = &mut o_row.as_slice_mut().expect("contiguous")[cols.clone()];
                for (d, &v) in o.iter_mut().zip(xh.iter()) {
                    *d = gm * v + bt;
                }
            }
        }
    }
    (
        Act {
            data: out,
            ..*x
        },
        NormCache {
            xhat,
            inv_std,
            groups,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    dout: &Act,
    cache: &NormCache,
    gamma: ArrayView1<f32>,
) -> (Act, Array1<f32>, Array1<f32>) {
    let c = dout.channels();
    let groups = cache.groups;
    let per_group = c / groups;
    let plane = dout.plane();
    let count = (per_group * plane) as f32;
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    let mut dx = Array2::<f32>::zeros(dout.data.raw_dim());
    for b in 0..dout.batch {
        let cols = b * plane..(b + 1) * plane;
        for g in 0..groups {
            let chans = g * per_group..(g + 1) * per_group;
            let mut sum_dxhat = 0.0f32;
            let mut sum_dxhat_xhat = 0.0f32;
            for ch in chans.clone() {
                let dy = &dout.data.row(ch).to_slice().expect("contiguous")[cols.clone()];
                let xh = &cache.xhat.row(ch).to_slice().expect("contiguous")[cols.clone()];
                let mut dg = 0.0f32;
                let mut db = 0.0f32;
                for (&d, &v) in dy.iter().zip(xh) {
                    dg += d * v;
                    db += d;
                }
                dgamma[ch] += dg;
                dbeta[ch] += db;
                sum_dxhat += db * gamma[ch];
                sum_dxhat_xhat += dg * gamma[ch];
            }
            let istd = cache.inv_std[[b, g]];
            for ch in chans {
                let dy = &dout.data.row(ch).to_slice().expect("contiguous")[cols.clone()];
                let xh = &cache.xhat.row(ch).to_slice().expect("contiguous")[cols.clone()];
                let gm = gamma[ch];
                let mut dx_row = dx.row_mut(ch);
                let out = &mut dx_row.as_slice_mut().expect("contiguous")[cols.clone()];
                for ((o, &d), &v) in out.iter_mut().zip(dy).zip(xh) {
                    *o = istd / count * (count * d * gm - sum_dxhat - v * sum_dxhat_xhat);
                }
            }
        }
    }
    (
        Act {
            data: dx,
            ..*dout
        },
        dgamma,
        dbeta,
    )
}

pub fn relu(x: Act) -> Act {
    let mut x = x;
    x.data.mapv_inplace(|v| v.max(0.0));
    x
}

/// Gradient through a ReLU whose output was `y`.
pub fn relu_backward(mut dout: Act, y: &Act) -> Act {
    ndarray::Zip::from(&mut dout.data)
        .and(&y.data)
        .for_each(|d, &v| {
            if v <= 0.0 {
                *d = 0.0;
            }
        });
    dout
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_act(rng: &mut ChaCha8Rng, c: usize, b: usize, h: usize, w: usize) -> Act {
        Act {
            data: Array2::from_shape_fn((c, b * h * w), |_| rng.random_range(-1.0..1.0)),
            batch: b,
            height: h,
            width: w,
        }
    }

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Act, conv: &ConvShape, weight: &Array2<f32>, bias: &Array1<f32>) -> Act {
        let ho = conv.output_extent(x.height);
        let wo = conv.output_extent(x.width);
        let mut out = Array2::<f32>::zeros((conv.out_channels, x.batch * ho * wo));
        for co in 0..conv.out_channels {
            for b in 0..x.batch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..conv.in_channels {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                        continue;
                                    }
                                    let xv = x.data[[ci, b * x.plane() + iy as usize * x.width + ix as usize]];
                                    acc += xv * weight[[co, (ci * conv.kernel + ky) * conv.kernel + kx]];
                                }
                            }
                        }
                        out[[co, b * ho * wo + oy * wo + ox]] = acc;
                    }
                }
            }
        }
        Act {
            data: out,
            batch: x.batch,
            height: ho,
            width: wo,
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(stride, kernel, pad, h) in &[(1, 3, 1, 5), (2, 3, 1, 7), (2, 1, 0, 6), (2, 3, 1, 6)] {
            let conv = ConvShape {
                in_channels: 3,
                out_channels: 4,
                kernel,
                stride,
                pad,
            };
            let x = random_act(&mut rng, 3, 2, h, h + 1);
            let weight = Array2::from_shape_fn((4, conv.fan_in()), |_| rng.random_range(-1.0..1.0));
            let bias = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let (fast, _) = conv_forward(&x, &conv, weight.view(), bias.view());
            let slow = naive_conv(&x, &conv, &weight, &bias);
            assert_eq!((fast.height, fast.width), (slow.height, slow.width));
            for (a, b) in fast.data.iter().zip(slow.data.iter()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ConvShape {
            in_channels: 2,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = random_act(&mut rng, 2, 3, 7, 5);
        let (cols, _, _) = im2col(&x, &conv);
        let y = Array2::from_shape_fn(cols.raw_dim(), |_| rng.random_range(-1.0f32..1.0));
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im(y.view(), &conv, 3, 7, 5);
        let rhs: f64 = x.data.iter().zip(back.data.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn group_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_act(&mut rng, 4, 3, 3, 3);
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (y, _) = group_norm_forward(&x, 2, gamma.view(), beta.view());
        for b in 0..3 {
            for g in 0..2 {
                let vals: Vec<f32> = (g * 2..g * 2 + 2)
                    .flat_map(|c| y.data.row(c).to_vec()[b * 9..(b + 1) * 9].to_vec())
                    .collect();
                let mean = vals.iter().sum::<f32>() / vals.len() as f32;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn group_norm_of_constant_is_finite() {
        let x = Act {
            data: Array2::zeros((4, 2 * 4)),
            batch: 2,
            height: 2,
            width: 2,
        };
        let (y, cache) = group_norm_forward(&x, 2, Array1::ones(4).view(), Array1::zeros(4).view());
        assert!(y.data.iter().all(|v| v.is_finite()));
        let (dx, _, _) = group_norm_backward(&y, &cache, Array1::ones(4).view());
        assert!(dx.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn group_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_act(&mut rng, 4, 2, 2, 3);
        let gamma = Array1::from_shape_fn(4, |_| rng.random_range(0.5..1.5));
        let beta = Array1::from_shape_fn(4, |_| rng.random_range(-0.5..0.5));
        let probe = Array2::from_shape_fn(x.data.raw_dim(), |_| rng.random_range(-1.0f32..1.0));
        let objective = |x: &Act, gamma: &Array1<f32>| -> f64 {
            let (y, _) = group_norm_forward(x, 2, gamma.view(), beta.view());
            y.data.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = group_norm_forward(&x, 2, gamma.view(), beta.view());
        let dout = Act {
            data: probe.clone(),
            ..x
        };
        let (dx, dgamma, _) = group_norm_backward(&dout, &cache, gamma.view());
        let eps = 1e-2f32;
        for idx in [0usize, 5, 13, 30, 47] {
            let (r, c) = (idx / x.data.ncols(), idx % x.data.ncols());
            let mut xp = x.clone();
            xp.data[[r, c]] += eps;
            let mut xm = x.clone();
            xm.data[[r, c]] -= eps;
            let numeric = (objective(&xp, &gamma) - objective(&xm, &gamma)) / (2.0 * eps as f64);
            assert!((numeric - dx.data[[r, c]] as f64).abs() < 2e-2 * numeric.abs().max(1.0), "dx {idx}");
        }
        for ch in 0..4 {
            let mut gp = gamma.clone();
            gp[ch] += eps;
            let mut gm = gamma.clone();
            gm[ch] -= eps;
            let numeric = (objective(&x, &gp) - objective(&x, &gm)) / (2.0 * eps as f64);
            assert!((numeric - dgamma[ch] as f64).abs() < 1e-2 * numeric.abs().max(1.0));
        }
    }
}
