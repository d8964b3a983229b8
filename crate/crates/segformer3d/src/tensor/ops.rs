//! Forward tensor operations. Each builds the result buffer, records its
//! analytic FLOP cost, and attaches a tape node when gradients are wanted.

use super::autodiff::Op;
use super::conv::{conv3d_forward, ConvGeom};
use super::flops;
use super::matmul::gemm_nt;
use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::sync::Arc;

fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

/// Elementwise a + b.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("add {:?} vs {:?}", a.shape(), b.shape())));
    }
    flops::record(flops::ELEMWISE_FLOPS_PER_ELEM * a.numel() as u64);
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&p, &q)| p + q).collect()));
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Add, vec![a.clone(), b.clone()]))
}

/// Elementwise a * b.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("mul {:?} vs {:?}", a.shape(), b.shape())));
    }
    flops::record(flops::ELEMWISE_FLOPS_PER_ELEM * a.numel() as u64);
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&p, &q)| p * q).collect()));
    Ok(Tensor::from_op(data, a.shape().to_vec(), Op::Mul, vec![a.clone(), b.clone()]))
}

/// x * s.
pub fn scale(x: &Tensor, s: f32) -> Tensor {
    flops::record(flops::ELEMWISE_FLOPS_PER_ELEM * x.numel() as u64);
    let data = x.with_data(|d| d.iter().map(|&v| v * s).collect());
    Tensor::from_op(data, x.shape().to_vec(), Op::Scale(s), vec![x.clone()])
}

/// Scalar sum of all elements.
pub fn sum(x: &Tensor) -> Tensor {
    flops::record(flops::ELEMWISE_FLOPS_PER_ELEM * x.numel() as u64);
    let total: f64 = x.with_data(|d| d.iter().map(|&v| v as f64).sum());
    Tensor::from_op(vec![total as f32], vec![1], Op::Sum, vec![x.clone()])
}

/// Scalar mean of all elements.
pub fn mean(x: &Tensor) -> Tensor {
    flops::record(flops::ELEMWISE_FLOPS_PER_ELEM * x.numel() as u64);
    let total: f64 = x.with_data(|d| d.iter().map(|&v| v as f64).sum());
    let m = total / x.numel() as f64;
    Tensor::from_op(vec![m as f32], vec![1], Op::Mean, vec![x.clone()])
}

/// y = x·wᵀ + b over the last axis of x. w is [outf, inf], b is [outf].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let (outf, inf) = match w.shape() {
        [o, i] => (*o, *i),
        s => return Err(shape_err(format!("linear weight must be rank 2, got {s:?}"))),
    };
    if xs.is_empty() || *xs.last().unwrap() != inf {
        return Err(shape_err(format!("linear input {xs:?} vs weight [{outf}, {inf}]")));
    }
    if b.shape() != [outf] {
        return Err(shape_err(format!("linear bias {:?} vs outf {outf}", b.shape())));
    }
    let rows = x.numel() / inf;
    flops::record(flops::linear_flops(rows as u64, inf as u64, outf as u64));
    let data = x.with_data(|xd| {
        w.with_data(|wd| {
            b.with_data(|bd| {
                let mut y = vec![0.0f32; rows * outf];
                gemm_nt(rows, inf, outf, 1.0, xd, wd, 0.0, &mut y);
                y.par_chunks_mut(outf).for_each(|row| {
                    for (v, &bias) in row.iter_mut().zip(bd) {
                        *v += bias;
                    }
                });
                y
            })
        })
    });
    let mut out_shape = xs.to_vec();
    *out_shape.last_mut().unwrap() = outf;
    Ok(Tensor::from_op(
        data,
        out_shape,
        Op::Linear { rows, inf, outf },
        vec![x.clone(), w.clone(), b.clone()],
    ))
}

/// Batched matmul: a is [L, m, k]; b is [L, k, n], or [L, n, k] when
/// `transpose_b`. Returns [L, m, n].
pub fn matmul_batched(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (batch, m, k) = match a.shape() {
        [l, m, k] => (*l, *m, *k),
        s => return Err(shape_err(format!("matmul lhs must be rank 3, got {s:?}"))),
    };
    let n = match (b.shape(), transpose_b) {
        ([l, k2, n], false) if *l == batch && *k2 == k => *n,
        ([l, n, k2], true) if *l == batch && *k2 == k => *n,
        (s, _) => {
            return Err(shape_err(format!(
                "matmul rhs {s:?} incompatible with lhs [{batch}, {m}, {k}] (transpose_b={transpose_b})"
            )))
        }
    };
    flops::record(flops::matmul_flops(batch as u64, m as u64, k as u64, n as u64));
    let data = a.with_data(|ad| {
        b.with_data(|bd| {
            let mut out = vec![0.0f32; batch * m * n];
            out.par_chunks_mut(m * n).enumerate().for_each(|(l, out_l)| {
                let a_l = &ad[l * m * k..][..m * k];
                let b_l = &bd[l * k * n..][..k * n];
                if transpose_b {
                    gemm_nt(m, k, n, 1.0, a_l, b_l, 0.0, out_l);
                } else {
                    super::matmul::gemm_nn(m, k, n, 1.0, a_l, b_l, 0.0, out_l);
                }
            });
            out
        })
    });
    Ok(Tensor::from_op(
        data,
        vec![batch, m, n],
        Op::MatmulBatched { batch, m, k, n, transpose_b },
        vec![a.clone(), b.clone()],
    ))
}

/// Grouped 3D convolution over [B, Cin, D, H, W].
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, groups: usize) -> Result<Tensor> {
    let (bsz, cin, dims) = match x.shape() {
        [b, c, d, h, w] => (*b, *c, (*d, *h, *w)),
        s => return Err(shape_err(format!("conv3d input must be rank 5, got {s:?}"))),
    };
    let (cout, cig, k) = match w.shape() {
        [co, ci, kd, kh, kw] if kd == kh && kh == kw => (*co, *ci, *kd),
        s => return Err(shape_err(format!("conv3d weight must be [Co, Ci/g, k, k, k], got {s:?}"))),
    };
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cig {
        return Err(shape_err(format!(
            "conv3d groups {groups} incompatible with cin {cin}, cout {cout}, weight cig {cig}"
        )));
    }
    if b.shape() != [cout] {
        return Err(shape_err(format!("conv3d bias {:?} vs cout {cout}", b.shape())));
    }
    let geom = ConvGeom { bsz, cin, cout, groups, in_dims: dims, kernel: k, stride, pad };
    let min_ext = dims.0.min(dims.1).min(dims.2);
    if min_ext + 2 * pad < k {
        return Err(shape_err(format!("conv3d kernel {k} larger than padded input {dims:?}")));
    }
    let (od, oh, ow) = geom.out_dims();
    flops::record(flops::conv3d_flops(
        bsz as u64,
        cig as u64,
        cout as u64,
        (k * k * k) as u64,
        (od * oh * ow) as u64,
    ));
    let data = x.with_data(|xd| w.with_data(|wd| b.with_data(|bd| conv3d_forward(xd, wd, bd, &geom))));
    Ok(Tensor::from_op(
        data,
        vec![bsz, cout, od, oh, ow],
        Op::Conv3d(geom),
        vec![x.clone(), w.clone(), b.clone()],
    ))
}

/// LayerNorm over the last axis with affine parameters.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = *x.shape().last().ok_or_else(|| shape_err("layernorm on rank-0 tensor"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(format!(
            "layernorm affine {:?}/{:?} vs C={c}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.numel() / c;
    flops::record(flops::LAYERNORM_FLOPS_PER_ELEM * (rows * c) as u64);
    let mut mean = vec![0.0f32; rows];
    let mut inv_std = vec![0.0f32; rows];
    let data = x.with_data(|xd| {
        gamma.with_data(|gd| {
            beta.with_data(|bd| {
                let mut y = vec![0.0f32; rows * c];
                for r in 0..rows {
                    let xr = &xd[r * c..(r + 1) * c];
                    let mu = xr.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                    let var = xr.iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).sum::<f64>() / c as f64;
                    let istd = 1.0 / (var + eps as f64).sqrt();
                    mean[r] = mu as f32;
                    inv_std[r] = istd as f32;
                    let yr = &mut y[r * c..(r + 1) * c];
                    for i in 0..c {
                        yr[i] = (xr[i] - mean[r]) * inv_std[r] * gd[i] + bd[i];
                    }
                }
                y
            })
        })
    });
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        Op::LayerNorm { rows, c, mean, inv_std },
        vec![x.clone(), gamma.clone(), beta.clone()],
    ))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("softmax on rank-0 tensor");
    let rows = x.numel() / c;
    flops::record(flops::SOFTMAX_FLOPS_PER_ELEM * (rows * c) as u64);
    let data = x.with_data(|xd| {
        let mut y = vec![0.0f32; rows * c];
        y.par_chunks_mut(c).enumerate().for_each(|(r, yr)| {
            let xr = &xd[r * c..(r + 1) * c];
            let max = xr.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0f64;
            for i in 0..c {
                let e = (xr[i] - max).exp();
                yr[i] = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            for v in yr.iter_mut() {
                *v *= inv;
            }
        });
        y
    });
    Tensor::from_op(data, x.shape().to_vec(), Op::Softmax { rows, c }, vec![x.clone()])
}

pub(crate) const GELU_COEF: f32 = 0.044715;

fn sqrt_2_over_pi() -> f32 {
    (2.0 / std::f32::consts::PI).sqrt()
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    flops::record(flops::GELU_FLOPS_PER_ELEM * x.numel() as u64);
    let c = sqrt_2_over_pi();
    let data = x.with_data(|xd| {
        xd.iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + GELU_COEF * v * v * v)).tanh()))
            .collect()
    });
    Tensor::from_op(data, x.shape().to_vec(), Op::Gelu, vec![x.clone()])
}

pub(crate) fn gelu_derivative(x: f32) -> f32 {
    let c = sqrt_2_over_pi();
    let t = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Per-axis interpolation source for output index `o` at integer upscale `s`
/// over `n` input samples (align_corners = false): low index, high index,
/// weight of the high side.
pub(crate) fn tri_axis(o: usize, s: usize, n: usize) -> (usize, usize, f32) {
    let src = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, (src - lo as f64) as f32)
}

/// Trilinear upsampling of [B, C, D, H, W] by an integer factor.
pub fn trilinear_up(x: &Tensor, scale: usize) -> Result<Tensor> {
    let (bsz, c, dims) = match x.shape() {
        [b, c, d, h, w] => (*b, *c, (*d, *h, *w)),
        s => return Err(shape_err(format!("trilinear_up input must be rank 5, got {s:?}"))),
    };
    assert!(scale >= 1);
    let (d, h, w) = dims;
    let (od, oh, ow) = (d * scale, h * scale, w * scale);
    flops::record(flops::TRILINEAR_FLOPS_PER_OUT_ELEM * (bsz * c * od * oh * ow) as u64);
    let data = x.with_data(|xd| {
        let mut y = vec![0.0f32; bsz * c * od * oh * ow];
        y.par_chunks_mut(od * oh * ow).enumerate().for_each(|(bc, out)| {
            let src = &xd[bc * d * h * w..][..d * h * w];
            let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
            for zo in 0..od {
                let (z0, z1, wz) = tri_axis(zo, scale, d);
                for yo in 0..oh {
                    let (y0, y1, wy) = tri_axis(yo, scale, h);
                    for xo in 0..ow {
                        let (x0, x1, wx) = tri_axis(xo, scale, w);
                        let at = |z: usize, y: usize, xx: usize| src[(z * h + y) * w + xx];
                        let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), wx);
                        let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), wx);
                        let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), wx);
                        let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), wx);
                        let c0 = lerp(c00, c01, wy);
                        let c1 = lerp(c10, c11, wy);
                        out[(zo * oh + yo) * ow + xo] = lerp(c0, c1, wz);
                    }
                }
            }
        });
        y
    });
    Ok(Tensor::from_op(
        data,
        vec![bsz, c, od, oh, ow],
        Op::TrilinearUp { bsz, c, in_dims: dims, scale },
        vec![x.clone()],
    ))
}

pub(crate) fn permute_vol_to_tokens(src: &[f32], dst: &mut [f32], bsz: usize, c: usize, n: usize) {
    for b in 0..bsz {
        for ci in 0..c {
            let row = &src[(b * c + ci) * n..][..n];
            for (s, &v) in row.iter().enumerate() {
                dst[(b * n + s) * c + ci] = v;
            }
        }
    }
}

pub(crate) fn permute_tokens_to_vol(src: &[f32], dst: &mut [f32], bsz: usize, n: usize, c: usize) {
    for b in 0..bsz {
        for s in 0..n {
            let row = &src[(b * n + s) * c..][..c];
            for (ci, &v) in row.iter().enumerate() {
                dst[(b * c + ci) * n + s] = v;
            }
        }
    }
}

pub(crate) fn permute_split_heads(src: &[f32], dst: &mut [f32], bsz: usize, n: usize, heads: usize, dh: usize) {
    let c = heads * dh;
    for b in 0..bsz {
        for t in 0..n {
            let row = &src[(b * n + t) * c..][..c];
            for hi in 0..heads {
                let out = &mut dst[((b * heads + hi) * n + t) * dh..][..dh];
                out.copy_from_slice(&row[hi * dh..(hi + 1) * dh]);
            }
        }
    }
}

pub(crate) fn permute_merge_heads(src: &[f32], dst: &mut [f32], bsz: usize, heads: usize, n: usize, dh: usize) {
    let c = heads * dh;
    for b in 0..bsz {
        for hi in 0..heads {
            for t in 0..n {
                let row = &src[((b * heads + hi) * n + t) * dh..][..dh];
                dst[(b * n + t) * c + hi * dh..][..dh].copy_from_slice(row);
            }
        }
    }
}

/// [B, C, D, H, W] (or [B, C, N]) -> token sequence [B, N, C].
pub fn vol_to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(shape_err(format!("vol_to_tokens needs rank >= 3, got {s:?}")));
    }
    let (bsz, c) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    let data = x.with_data(|xd| {
        let mut y = vec![0.0f32; xd.len()];
        permute_vol_to_tokens(xd, &mut y, bsz, c, n);
        y
    });
    Ok(Tensor::from_op(data, vec![bsz, n, c], Op::VolToTokens { bsz, c, n }, vec![x.clone()]))
}

/// Token sequence [B, N, C] -> [B, C, D, H, W] on the given grid.
pub fn tokens_to_vol(x: &Tensor, grid: (usize, usize, usize)) -> Result<Tensor> {
    let (bsz, n, c) = match x.shape() {
        [b, n, c] => (*b, *n, *c),
        s => return Err(shape_err(format!("tokens_to_vol needs [B, N, C], got {s:?}"))),
    };
    if n != grid.0 * grid.1 * grid.2 {
        return Err(shape_err(format!("token count {n} does not match grid {grid:?}")));
    }
    let data = x.with_data(|xd| {
        let mut y = vec![0.0f32; xd.len()];
        permute_tokens_to_vol(xd, &mut y, bsz, n, c);
        y
    });
    Ok(Tensor::from_op(
        data,
        vec![bsz, c, grid.0, grid.1, grid.2],
        Op::TokensToVol { bsz, n, c },
        vec![x.clone()],
    ))
}

/// [B, N, C] -> [B·h, N, C/h] per-head layout.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (bsz, n, c) = match x.shape() {
        [b, n, c] => (*b, *n, *c),
        s => return Err(shape_err(format!("split_heads needs [B, N, C], got {s:?}"))),
    };
    if c % heads != 0 {
        return Err(shape_err(format!("channels {c} not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let data = x.with_data(|xd| {
        let mut y = vec![0.0f32; xd.len()];
        permute_split_heads(xd, &mut y, bsz, n, heads, dh);
        y
    });
    Ok(Tensor::from_op(
        data,
        vec![bsz * heads, n, dh],
        Op::SplitHeads { bsz, n, heads, dh },
        vec![x.clone()],
    ))
}

/// [B·h, N, dh] -> [B, N, h·dh].
pub fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (bh, n, dh) = match x.shape() {
        [bh, n, dh] => (*bh, *n, *dh),
        s => return Err(shape_err(format!("merge_heads needs [B·h, N, dh], got {s:?}"))),
    };
    if bh % heads != 0 {
        return Err(shape_err(format!("batch·heads {bh} not divisible by {heads} heads")));
    }
    let bsz = bh / heads;
    let data = x.with_data(|xd| {
        let mut y = vec![0.0f32; xd.len()];
        permute_merge_heads(xd, &mut y, bsz, heads, n, dh);
        y
    });
    Ok(Tensor::from_op(
        data,
        vec![bsz, n, heads * dh],
        Op::MergeHeads { bsz, heads, n, dh },
        vec![x.clone()],
    ))
}

/// Reinterpret the buffer under a new shape with the same element count.
pub fn reshape(x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    if new_shape.iter().product::<usize>() != x.numel() {
        return Err(shape_err(format!("reshape {:?} -> {new_shape:?}", x.shape())));
    }
    Ok(Tensor::from_op(x.data(), new_shape.to_vec(), Op::Reshape, vec![x.clone()]))
}

/// Concatenate [B, C_i, ...] volumes along the channel axis.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(shape_err("concat_channels of zero tensors"));
    }
    let first = xs[0].shape();
    if first.len() < 3 {
        return Err(shape_err(format!("concat_channels needs rank >= 3, got {first:?}")));
    }
    let bsz = first[0];
    let spatial_shape = &first[2..];
    let spatial: usize = spatial_shape.iter().product();
    let mut splits = Vec::with_capacity(xs.len());
    for x in xs {
        let s = x.shape();
        if s[0] != bsz || &s[2..] != spatial_shape {
            return Err(shape_err(format!("concat_channels mismatch {first:?} vs {s:?}")));
        }
        splits.push(s[1]);
    }
    let ctot: usize = splits.iter().sum();
    let mut data = vec![0.0f32; bsz * ctot * spatial];
    let mut offset = 0;
    for (x, &ci) in xs.iter().zip(&splits) {
        x.with_data(|xd| {
            for b in 0..bsz {
                let dst = (b * ctot + offset) * spatial;
                let src = b * ci * spatial;
                data[dst..dst + ci * spatial].copy_from_slice(&xd[src..src + ci * spatial]);
            }
        });
        offset += ci;
    }
    let mut out_shape = vec![bsz, ctot];
    out_shape.extend_from_slice(spatial_shape);
    Ok(Tensor::from_op(
        data,
        out_shape,
        Op::ConcatChannels { bsz, splits, spatial },
        xs.iter().map(|&x| x.clone()).collect(),
    ))
}

/// Stable softmax across the class axis at one voxel of a [B, K, N] buffer.
pub(crate) fn class_softmax(z: &[f32], b: usize, v: usize, k: usize, n: usize) -> Vec<f32> {
    let mut probs = vec![0.0f32; k];
    let mut max = f32::NEG_INFINITY;
    for c in 0..k {
        max = max.max(z[(b * k + c) * n + v]);
    }
    let mut denom = 0.0f64;
    for c in 0..k {
        let e = (z[(b * k + c) * n + v] - max).exp();
        probs[c] = e;
        denom += e as f64;
    }
    let inv = (1.0 / denom) as f32;
    for p in probs.iter_mut() {
        *p *= inv;
    }
    probs
}

fn check_loss_shapes(logits: &Tensor, target: &[u8]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() < 3 {
        return Err(shape_err(format!("loss logits need rank >= 3 [B, K, ...], got {s:?}")));
    }
    let (bsz, k) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    if target.len() != bsz * n {
        return Err(shape_err(format!(
            "target length {} does not match B·N = {}",
            target.len(),
            bsz * n
        )));
    }
    for &t in target {
        if t as usize >= k {
            return Err(Error::LabelOutOfRange { label: t as usize, classes: k });
        }
    }
    Ok((bsz, k, n))
}

/// Mean cross-entropy over voxels: −log softmax(logits)[target].
pub fn cross_entropy(logits: &Tensor, target: &[u8]) -> Result<Tensor> {
    let (bsz, k, n) = check_loss_shapes(logits, target)?;
    let loss = logits.with_data(|z| {
        let mut total = 0.0f64;
        for b in 0..bsz {
            for v in 0..n {
                let mut max = f32::NEG_INFINITY;
                for c in 0..k {
                    max = max.max(z[(b * k + c) * n + v]);
                }
                let mut denom = 0.0f64;
                for c in 0..k {
                    denom += ((z[(b * k + c) * n + v] - max) as f64).exp();
                }
                let t = target[b * n + v] as usize;
                let zt = z[(b * k + t) * n + v];
                total += denom.ln() + max as f64 - zt as f64;
            }
        }
        (total / (bsz * n) as f64) as f32
    });
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        Op::CrossEntropy {
            target: Arc::new(target.to_vec()),
            bsz,
            classes: k,
            spatial: n,
        },
        vec![logits.clone()],
    ))
}

/// Soft dice loss: softmax over classes, per-class smoothed dice,
/// 1 − mean over the included classes.
pub fn dice_loss(logits: &Tensor, target: &[u8], eps: f32, include_background: bool) -> Result<Tensor> {
    let (bsz, k, n) = check_loss_shapes(logits, target)?;
    let start = if include_background { 0 } else { 1 };
    if start >= k {
        return Err(shape_err(format!("dice loss needs >= 2 classes, got {k}")));
    }
    let loss = logits.with_data(|z| {
        let mut inter = vec![0.0f64; k];
        let mut psum = vec![0.0f64; k];
        let mut tsum = vec![0.0f64; k];
        for b in 0..bsz {
            for v in 0..n {
                let probs = class_softmax(z, b, v, k, n);
                let t = target[b * n + v] as usize;
                tsum[t] += 1.0;
                for c in 0..k {
                    psum[c] += probs[c] as f64;
                    if c == t {
                        inter[c] += probs[c] as f64;
                    }
                }
            }
        }
        let mut total = 0.0f64;
        for c in start..k {
            total += (2.0 * inter[c] + eps as f64) / (psum[c] + tsum[c] + eps as f64);
        }
        (1.0 - total / (k - start) as f64) as f32
    });
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        Op::DiceLoss {
            target: Arc::new(target.to_vec()),
            bsz,
            classes: k,
            spatial: n,
            eps,
            include_background,
        },
        vec![logits.clone()],
    ))
}
