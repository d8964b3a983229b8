//! Plain-loop f64 reference kernels.
//!
//! Everything here is written as the textbook definition: triple-loop matmul,
//! seven-loop convolution, product-weight trilinear interpolation. No blocking,
//! no fused passes, no shared code with the f32 engine.

/// Row-major matmul: a is [m,k], b is [k,n], result [m,n].
pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// y = x W^T + bias, x is [rows, in], w is [out, in], bias is [out].
pub fn linear64(x: &[f64], w: &[f64], bias: &[f64], rows: usize, inf: usize, outf: usize) -> Vec<f64> {
    assert_eq!(x.len(), rows * inf);
    assert_eq!(w.len(), outf * inf);
    assert_eq!(bias.len(), outf);
    let mut y = vec![0.0; rows * outf];
    for r in 0..rows {
        for o in 0..outf {
            let mut acc = bias[o];
            for i in 0..inf {
                acc += x[r * inf + i] * w[o * inf + i];
            }
            y[r * outf + o] = acc;
        }
    }
    y
}

/// Direct grouped 3D convolution.
///
/// x: [b, cin, d, h, w]; w: [cout, cin/groups, kd, kh, kw]; bias: [cout].
/// Output spatial size per axis: (in + 2*pad - k) / stride + 1.
#[allow(clippy::too_many_arguments)]
pub fn conv3d64(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    (d, h, wd): (usize, usize, usize),
    cout: usize,
    (kd, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    assert_eq!(cin % groups, 0);
    assert_eq!(cout % groups, 0);
    let cig = cin / groups;
    let cog = cout / groups;
    assert_eq!(x.len(), b * cin * d * h * wd);
    assert_eq!(w.len(), cout * cig * kd * kh * kw);
    assert_eq!(bias.len(), cout);
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * od * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let g = co / cog;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cig {
                            let cx = g * cig + ci;
                            for kz in 0..kd {
                                let z = (zo * stride + kz) as isize - pad as isize;
                                if z < 0 || z >= d as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let y = (yo * stride + ky) as isize - pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xq = (xo * stride + kx) as isize - pad as isize;
                                        if xq < 0 || xq >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((bi * cin + cx) * d + z as usize) * h * wd
                                            + y as usize * wd
                                            + xq as usize;
                                        let wi = ((co * cig + ci) * kd + kz) * kh * kw + ky * kw + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * od + zo) * oh * ow + yo * ow + xo] = acc;
                    }
                }
            }
        }
    }
    out
}

/// LayerNorm over the last dimension: x is [rows, c].
pub fn layernorm64(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, c: usize, eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), rows * c);
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            out[r * c + i] = (row[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
    out
}

/// Softmax over the last dimension, straight exp/sum form.
pub fn softmax64(x: &[f64], rows: usize, c: usize) -> Vec<f64> {
    assert_eq!(x.len(), rows * c);
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let denom: f64 = exps.iter().sum();
        for i in 0..c {
            out[r * c + i] = exps[i] / denom;
        }
    }
    out
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Trilinear upsampling by integer factor `s`, align_corners = false.
///
/// Source coordinate for output index o: (o + 0.5)/s - 0.5, clamped to the
/// valid range. Weights are the product of per-axis linear weights.
pub fn trilinear64(
    x: &[f64],
    b: usize,
    c: usize,
    (d, h, w): (usize, usize, usize),
    s: usize,
) -> Vec<f64> {
    assert_eq!(x.len(), b * c * d * h * w);
    let (od, oh, ow) = (d * s, h * s, w * s);
    // Per-axis: (low index, high index, weight of high side).
    let axis = |o: usize, n: usize| -> (usize, usize, f64) {
        let src = (o as f64 + 0.5) / s as f64 - 0.5;
        let src = src.clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = vec![0.0; b * c * od * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * d * h * w;
            for zo in 0..od {
                let (z0, z1, wz) = axis(zo, d);
                for yo in 0..oh {
                    let (y0, y1, wy) = axis(yo, h);
                    for xo in 0..ow {
                        let (x0, x1, wx) = axis(xo, w);
                        let at = |z: usize, y: usize, xx: usize| x[base + (z * h + y) * w + xx];
                        let v = at(z0, y0, x0) * (1.0 - wz) * (1.0 - wy) * (1.0 - wx)
                            + at(z0, y0, x1) * (1.0 - wz) * (1.0 - wy) * wx
                            + at(z0, y1, x0) * (1.0 - wz) * wy * (1.0 - wx)
                            + at(z0, y1, x1) * (1.0 - wz) * wy * wx
                            + at(z1, y0, x0) * wz * (1.0 - wy) * (1.0 - wx)
                            + at(z1, y0, x1) * wz * (1.0 - wy) * wx
                            + at(z1, y1, x0) * wz * wy * (1.0 - wx)
                            + at(z1, y1, x1) * wz * wy * wx;
                        out[((bi * c + ci) * od + zo) * oh * ow + yo * ow + xo] = v;
                    }
                }
            }
        }
    }
    out
}

/// [b, c, d*h*w] channels-first volume -> [b, d*h*w, c] token matrix.
pub fn vol_to_tokens64(x: &[f64], b: usize, c: usize, spatial: usize) -> Vec<f64> {
    assert_eq!(x.len(), b * c * spatial);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for s in 0..spatial {
                out[(bi * spatial + s) * c + ci] = x[(bi * c + ci) * spatial + s];
            }
        }
    }
    out
}

/// [b, d*h*w, c] token matrix -> [b, c, d*h*w] channels-first volume.
pub fn tokens_to_vol64(x: &[f64], b: usize, spatial: usize, c: usize) -> Vec<f64> {
    assert_eq!(x.len(), b * spatial * c);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for s in 0..spatial {
            for ci in 0..c {
                out[(bi * c + ci) * spatial + s] = x[(bi * spatial + s) * c + ci];
            }
        }
    }
    out
}
