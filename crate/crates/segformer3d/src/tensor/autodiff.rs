//! The op tape and its backward rules.
//!
//! Each variant stores exactly the geometry (and occasionally forward-pass
//! statistics) needed to push a gradient from an op's output back to its
//! inputs. `backward_op` returns one optional gradient per input; `None`
//! means the input did not request a gradient and the work was skipped.

use super::conv::{conv3d_backward_input, conv3d_backward_weights, ConvGeom};
use super::matmul::{gemm_nn, gemm_nt, gemm_tn};
use super::ops;
use super::Tensor;
use rayon::prelude::*;
use std::sync::Arc;

pub(crate) enum Op {
    Add,
    Mul,
    Scale(f32),
    Sum,
    Mean,
    Linear {
        rows: usize,
        inf: usize,
        outf: usize,
    },
    /// out[l] = a[l] · b[l] (or b[l]ᵀ when `transpose_b`), l = 0..batch.
    MatmulBatched {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Conv3d(ConvGeom),
    LayerNorm {
        rows: usize,
        c: usize,
        /// Per-row statistics saved by the forward pass.
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Softmax {
        rows: usize,
        c: usize,
    },
    Gelu,
    TrilinearUp {
        bsz: usize,
        c: usize,
        in_dims: (usize, usize, usize),
        scale: usize,
    },
    VolToTokens {
        bsz: usize,
        c: usize,
        n: usize,
    },
    TokensToVol {
        bsz: usize,
        n: usize,
        c: usize,
    },
    SplitHeads {
        bsz: usize,
        n: usize,
        heads: usize,
        dh: usize,
    },
    MergeHeads {
        bsz: usize,
        heads: usize,
        n: usize,
        dh: usize,
    },
    Reshape,
    ConcatChannels {
        bsz: usize,
        splits: Vec<usize>,
        spatial: usize,
    },
    CrossEntropy {
        target: Arc<Vec<u8>>,
        bsz: usize,
        classes: usize,
        spatial: usize,
    },
    DiceLoss {
        target: Arc<Vec<u8>>,
        bsz: usize,
        classes: usize,
        spatial: usize,
        eps: f32,
        include_background: bool,
    },
}

pub(crate) fn backward_op(
    op: &Op,
    inputs: &[Tensor],
    out: &Tensor,
    g: &[f32],
    needs: &[bool],
) -> Vec<Option<Vec<f32>>> {
    match op {
        Op::Add => vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.to_vec()),
        ],
        Op::Mul => {
            let da = needs[0]
                .then(|| inputs[1].with_data(|b| g.iter().zip(b).map(|(&gi, &bi)| gi * bi).collect()));
            let db = needs[1]
                .then(|| inputs[0].with_data(|a| g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect()));
            vec![da, db]
        }
        Op::Scale(s) => vec![needs[0].then(|| g.iter().map(|&gi| gi * s).collect())],
        Op::Sum => vec![needs[0].then(|| vec![g[0]; inputs[0].numel()])],
        Op::Mean => {
            let n = inputs[0].numel();
            vec![needs[0].then(|| vec![g[0] / n as f32; n])]
        }
        Op::Linear { rows, inf, outf } => {
            let (rows, inf, outf) = (*rows, *inf, *outf);
            let dx = needs[0].then(|| {
                inputs[1].with_data(|w| {
                    let mut dx = vec![0.0; rows * inf];
                    gemm_nn(rows, outf, inf, 1.0, g, w, 0.0, &mut dx);
                    dx
                })
            });
            let dw = needs[1].then(|| {
                inputs[0].with_data(|x| {
                    let mut dw = vec![0.0; outf * inf];
                    gemm_tn(outf, rows, inf, 1.0, g, x, 0.0, &mut dw);
                    dw
                })
            });
            let db = needs[2].then(|| {
                let mut db = vec![0.0f64; outf];
                for r in 0..rows {
                    for o in 0..outf {
                        db[o] += g[r * outf + o] as f64;
                    }
                }
                db.into_iter().map(|v| v as f32).collect()
            });
            vec![dx, dw, db]
        }
        Op::MatmulBatched { batch, m, k, n, transpose_b } => {
            let (batch, m, k, n, tb) = (*batch, *m, *k, *n, *transpose_b);
            let da = needs[0].then(|| {
                inputs[1].with_data(|b| {
                    let mut da = vec![0.0; batch * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(l, da_l)| {
                        let g_l = &g[l * m * n..][..m * n];
                        let b_l = &b[l * k * n..][..k * n];
                        if tb {
                            // C = A·Bᵀ with B stored [n,k]  ⇒  dA = dC·B
                            gemm_nn(m, n, k, 1.0, g_l, b_l, 0.0, da_l);
                        } else {
                            // C = A·B  ⇒  dA = dC·Bᵀ
                            gemm_nt(m, n, k, 1.0, g_l, b_l, 0.0, da_l);
                        }
                    });
                    da
                })
            });
            let db = needs[1].then(|| {
                inputs[0].with_data(|a| {
                    let mut db = vec![0.0; batch * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(l, db_l)| {
                        let g_l = &g[l * m * n..][..m * n];
                        let a_l = &a[l * m * k..][..m * k];
                        if tb {
                            // dB = dCᵀ·A : [n,k]
                            gemm_tn(n, m, k, 1.0, g_l, a_l, 0.0, db_l);
                        } else {
                            // dB = Aᵀ·dC : [k,n]
                            gemm_tn(k, m, n, 1.0, a_l, g_l, 0.0, db_l);
                        }
                    });
                    db
                })
            });
            vec![da, db]
        }
        Op::Conv3d(geom) => {
            let dx = needs[0].then(|| inputs[1].with_data(|w| conv3d_backward_input(w, g, geom)));
            let (dw, db) = if needs[1] || needs[2] {
                let (dw, db) = inputs[0].with_data(|x| conv3d_backward_weights(x, g, geom));
                (Some(dw), Some(db))
            } else {
                (None, None)
            };
            vec![dx, needs[1].then(|| dw.unwrap()), needs[2].then(|| db.unwrap())]
        }
        Op::LayerNorm { rows, c, mean, inv_std } => {
            let (rows, c) = (*rows, *c);
            inputs[0].with_data(|x| {
                inputs[1].with_data(|gamma| {
                    let mut dx = needs[0].then(|| vec![0.0f32; rows * c]);
                    let mut dgamma = needs[1].then(|| vec![0.0f64; c]);
                    let mut dbeta = needs[2].then(|| vec![0.0f64; c]);
                    for r in 0..rows {
                        let xr = &x[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let (mu, istd) = (mean[r], inv_std[r]);
                        if let Some(dg) = dgamma.as_mut() {
                            for i in 0..c {
                                dg[i] += (gr[i] * (xr[i] - mu) * istd) as f64;
                            }
                        }
                        if let Some(db) = dbeta.as_mut() {
                            for i in 0..c {
                                db[i] += gr[i] as f64;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let mut m1 = 0.0f64;
                            let mut m2 = 0.0f64;
                            for i in 0..c {
                                let gg = (gamma[i] * gr[i]) as f64;
                                m1 += gg;
                                m2 += gg * ((xr[i] - mu) * istd) as f64;
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for i in 0..c {
                                let xhat = (xr[i] - mu) * istd;
                                dx[r * c + i] = istd
                                    * ((gamma[i] * gr[i]) as f64 - m1 - xhat as f64 * m2) as f32;
                            }
                        }
                    }
                    vec![
                        dx,
                        dgamma.map(|v| v.into_iter().map(|x| x as f32).collect()),
                        dbeta.map(|v| v.into_iter().map(|x| x as f32).collect()),
                    ]
                })
            })
        }
        Op::Softmax { rows, c } => {
            let (rows, c) = (*rows, *c);
            let dx = needs[0].then(|| {
                out.with_data(|y| {
                    let mut dx = vec![0.0f32; rows * c];
                    dx.par_chunks_mut(c).enumerate().for_each(|(r, dxr)| {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| (a * b) as f64).sum();
                        for i in 0..c {
                            dxr[i] = yr[i] * (gr[i] - dot as f32);
                        }
                    });
                    dx
                })
            });
            vec![dx]
        }
        Op::Gelu => {
            let dx = needs[0].then(|| {
                inputs[0].with_data(|x| {
                    x.iter()
                        .zip(g)
                        .map(|(&xi, &gi)| gi * ops::gelu_derivative(xi))
                        .collect()
                })
            });
            vec![dx]
        }
        Op::TrilinearUp { bsz, c, in_dims, scale } => {
            let (bsz, c, s) = (*bsz, *c, *scale);
            let (d, h, w) = *in_dims;
            let iv = d * h * w;
            let (od, oh, ow) = (d * s, h * s, w * s);
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; bsz * c * iv];
                dx.par_chunks_mut(iv).enumerate().for_each(|(bc, dx_c)| {
                    let gofs = bc * od * oh * ow;
                    for zo in 0..od {
                        let (z0, z1, wz) = ops::tri_axis(zo, s, d);
                        for yo in 0..oh {
                            let (y0, y1, wy) = ops::tri_axis(yo, s, h);
                            for xo in 0..ow {
                                let (x0, x1, wx) = ops::tri_axis(xo, s, w);
                                let gv = g[gofs + (zo * oh + yo) * ow + xo];
                                let mut add = |z: usize, y: usize, xx: usize, wt: f32| {
                                    dx_c[(z * h + y) * w + xx] += gv * wt;
                                };
                                add(z0, y0, x0, (1.0 - wz) * (1.0 - wy) * (1.0 - wx));
                                add(z0, y0, x1, (1.0 - wz) * (1.0 - wy) * wx);
                                add(z0, y1, x0, (1.0 - wz) * wy * (1.0 - wx));
                                add(z0, y1, x1, (1.0 - wz) * wy * wx);
                                add(z1, y0, x0, wz * (1.0 - wy) * (1.0 - wx));
                                add(z1, y0, x1, wz * (1.0 - wy) * wx);
                                add(z1, y1, x0, wz * wy * (1.0 - wx));
                                add(z1, y1, x1, wz * wy * wx);
                            }
                        }
                    }
                });
                dx
            });
            vec![dx]
        }
        Op::VolToTokens { bsz, c, n } => {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                ops::permute_tokens_to_vol(g, &mut dx, *bsz, *n, *c);
                dx
            });
            vec![dx]
        }
        Op::TokensToVol { bsz, n, c } => {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                ops::permute_vol_to_tokens(g, &mut dx, *bsz, *c, *n);
                dx
            });
            vec![dx]
        }
        Op::SplitHeads { bsz, n, heads, dh } => {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                ops::permute_merge_heads(g, &mut dx, *bsz, *heads, *n, *dh);
                dx
            });
            vec![dx]
        }
        Op::MergeHeads { bsz, heads, n, dh } => {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; g.len()];
                ops::permute_split_heads(g, &mut dx, *bsz, *n, *heads, *dh);
                dx
            });
            vec![dx]
        }
        Op::Reshape => vec![needs[0].then(|| g.to_vec())],
        Op::ConcatChannels { bsz, splits, spatial } => {
            let ctot: usize = splits.iter().sum();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(splits.len());
            for (i, &ci) in splits.iter().enumerate() {
                grads.push(needs[i].then(|| {
                    let mut dx = vec![0.0; bsz * ci * spatial];
                    for b in 0..*bsz {
                        let src = ((b * ctot) + offset) * spatial;
                        let dst = b * ci * spatial;
                        dx[dst..dst + ci * spatial]
                            .copy_from_slice(&g[src..src + ci * spatial]);
                    }
                    dx
                }));
                offset += ci;
            }
            grads
        }
        Op::CrossEntropy { target, bsz, classes, spatial } => {
            let (b, k, n) = (*bsz, *classes, *spatial);
            let dz = needs[0].then(|| {
                inputs[0].with_data(|z| {
                    let scale = g[0] / (b * n) as f32;
                    let mut dz = vec![0.0f32; z.len()];
                    for bi in 0..b {
                        for v in 0..n {
                            let probs = ops::class_softmax(z, bi, v, k, n);
                            let t = target[bi * n + v] as usize;
                            for c in 0..k {
                                let p = probs[c];
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                dz[(bi * k + c) * n + v] = (p - onehot) * scale;
                            }
                        }
                    }
                    dz
                })
            });
            vec![dz]
        }
        Op::DiceLoss { target, bsz, classes, spatial, eps, include_background } => {
            let (b, k, n, eps) = (*bsz, *classes, *spatial, *eps as f64);
            let start = if *include_background { 0 } else { 1 };
            let dz = needs[0].then(|| {
                inputs[0].with_data(|z| {
                    // Recompute probabilities and the per-class global sums.
                    let mut probs = vec![0.0f32; z.len()];
                    let mut inter = vec![0.0f64; k];
                    let mut sums = vec![0.0f64; k];
                    for bi in 0..b {
                        for v in 0..n {
                            let p = ops::class_softmax(z, bi, v, k, n);
                            let t = target[bi * n + v] as usize;
                            for c in 0..k {
                                probs[(bi * k + c) * n + v] = p[c];
                                sums[c] += p[c] as f64;
                                if c == t {
                                    inter[c] += p[c] as f64;
                                }
                            }
                        }
                    }
                    for c in 0..k {
                        let mut tc = 0usize;
                        for bi in 0..b {
                            for v in 0..n {
                                if target[bi * n + v] as usize == c {
                                    tc += 1;
                                }
                            }
                        }
                        sums[c] += tc as f64;
                    }
                    let included = (k - start) as f64;
                    // d(loss)/d(p_cv) = -(1/|C|)·(2·t_cv·(S_c+ε) − (2·I_c+ε)) / (S_c+ε)²
                    let mut dz = vec![0.0f32; z.len()];
                    for bi in 0..b {
                        for v in 0..n {
                            let t = target[bi * n + v] as usize;
                            let mut gp = vec![0.0f64; k];
                            for c in start..k {
                                let s = sums[c] + eps;
                                let num = 2.0 * inter[c] + eps;
                                let tcv = if c == t { 1.0 } else { 0.0 };
                                gp[c] = -(2.0 * tcv * s - num) / (s * s) / included;
                            }
                            // Softmax Jacobian: dz_j = p_j (gp_j − Σ_c gp_c p_c)
                            let mut dot = 0.0f64;
                            for c in 0..k {
                                dot += gp[c] * probs[(bi * k + c) * n + v] as f64;
                            }
                            for c in 0..k {
                                let p = probs[(bi * k + c) * n + v] as f64;
                                dz[(bi * k + c) * n + v] = (p * (gp[c] - dot)) as f32 * g[0];
                            }
                        }
                    }
                    dz
                })
            });
            vec![dz]
        }
    }
}
