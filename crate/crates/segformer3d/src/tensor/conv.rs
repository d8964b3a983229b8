//! Grouped 3D convolution kernels: im2col + GEMM on the general path, direct
//! loops on the depthwise path. Forward and backward both live here, working
//! on plain slices so they are testable without the tensor wrapper.
//!
//! Determinism: parallel loops only split over disjoint output slices
//! (per-batch or per-channel); every accumulation runs in a fixed order.

use super::matmul::{gemm_nn, gemm_nt, gemm_tn};
use rayon::prelude::*;

/// Static geometry of one conv3d application (uniform cubic kernel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub bsz: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub in_dims: (usize, usize, usize),
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn out_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

impl ConvGeom {
    pub fn out_dims(&self) -> (usize, usize, usize) {
        let o = |n| out_extent(n, self.kernel, self.stride, self.pad);
        (o(self.in_dims.0), o(self.in_dims.1), o(self.in_dims.2))
    }

    pub fn out_voxels(&self) -> usize {
        let (d, h, w) = self.out_dims();
        d * h * w
    }

    pub fn in_voxels(&self) -> usize {
        let (d, h, w) = self.in_dims;
        d * h * w
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout
    }
}

/// Unfold one (batch, group) input slab into a [cig·k³, OV] column matrix.
/// `x_bg` is the [cig, D·H·W] slice for that batch and group.
fn im2col(x_bg: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (d, h, w) = g.in_dims;
    let (od, oh, ow) = g.out_dims();
    let ov = od * oh * ow;
    let cig = g.cin / g.groups;
    let k = g.kernel;
    debug_assert_eq!(col.len(), cig * k * k * k * ov);
    col.fill(0.0);
    for ci in 0..cig {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let tap = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &mut col[tap * ov..(tap + 1) * ov];
                    for zo in 0..od {
                        let z = (zo * g.stride + kz) as isize - g.pad as isize;
                        if z < 0 || z >= d as isize {
                            continue;
                        }
                        for yo in 0..oh {
                            let y = (yo * g.stride + ky) as isize - g.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let src_base = (ci * d + z as usize) * h * w + y as usize * w;
                            let dst_base = (zo * oh + yo) * ow;
                            for xo in 0..ow {
                                let x = (xo * g.stride + kx) as isize - g.pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                row[dst_base + xo] = x_bg[src_base + x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of im2col: fold a [cig·k³, OV] column gradient
/// back into the [cig, D·H·W] input-gradient slab.
fn col2im_add(col: &[f32], g: &ConvGeom, dx_bg: &mut [f32]) {
    let (d, h, w) = g.in_dims;
    let (od, oh, ow) = g.out_dims();
    let ov = od * oh * ow;
    let cig = g.cin / g.groups;
    let k = g.kernel;
    for ci in 0..cig {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let tap = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &col[tap * ov..(tap + 1) * ov];
                    for zo in 0..od {
                        let z = (zo * g.stride + kz) as isize - g.pad as isize;
                        if z < 0 || z >= d as isize {
                            continue;
                        }
                        for yo in 0..oh {
                            let y = (yo * g.stride + ky) as isize - g.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let dst_base = (ci * d + z as usize) * h * w + y as usize * w;
                            let src_base = (zo * oh + yo) * ow;
                            for xo in 0..ow {
                                let x = (xo * g.stride + kx) as isize - g.pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                dx_bg[dst_base + x as usize] += row[src_base + xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// y[b, co, out] = bias[co] + Σ w[co, ci, taps] · x taps.
pub fn conv3d_forward(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let iv = g.in_voxels();
    let ov = g.out_voxels();
    let cig = g.cin / g.groups;
    let cog = g.cout / g.groups;
    let k3 = g.kernel * g.kernel * g.kernel;
    debug_assert_eq!(x.len(), g.bsz * g.cin * iv);
    debug_assert_eq!(w.len(), g.cout * cig * k3);
    debug_assert_eq!(bias.len(), g.cout);
    let mut y = vec![0.0; g.bsz * g.cout * ov];

    if g.is_depthwise() {
        y.par_chunks_mut(ov).enumerate().for_each(|(bc, out)| {
            let (b, c) = (bc / g.cin, bc % g.cin);
            depthwise_forward_one(&x[(b * g.cin + c) * iv..][..iv], &w[c * k3..][..k3], bias[c], g, out);
        });
        return y;
    }

    y.par_chunks_mut(g.cout * ov).enumerate().for_each(|(b, yb)| {
        let mut col = vec![0.0; cig * k3 * ov];
        for gi in 0..g.groups {
            let x_bg = &x[(b * g.cin + gi * cig) * iv..][..cig * iv];
            im2col(x_bg, g, &mut col);
            let w_g = &w[gi * cog * cig * k3..][..cog * cig * k3];
            let y_g = &mut yb[gi * cog * ov..][..cog * ov];
            gemm_nn(cog, cig * k3, ov, 1.0, w_g, &col, 0.0, y_g);
            for co in 0..cog {
                let bv = bias[gi * cog + co];
                for v in &mut y_g[co * ov..(co + 1) * ov] {
                    *v += bv;
                }
            }
        }
    });
    y
}

fn depthwise_forward_one(x_c: &[f32], w_c: &[f32], bias: f32, g: &ConvGeom, out: &mut [f32]) {
    let (d, h, w) = g.in_dims;
    let (od, oh, ow) = g.out_dims();
    let k = g.kernel;
    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                let mut acc = bias;
                for kz in 0..k {
                    let z = (zo * g.stride + kz) as isize - g.pad as isize;
                    if z < 0 || z >= d as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let y = (yo * g.stride + ky) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xq = (xo * g.stride + kx) as isize - g.pad as isize;
                            if xq < 0 || xq >= w as isize {
                                continue;
                            }
                            acc += x_c[(z as usize * h + y as usize) * w + xq as usize]
                                * w_c[(kz * k + ky) * k + kx];
                        }
                    }
                }
                out[(zo * oh + yo) * ow + xo] = acc;
            }
        }
    }
}

/// Input gradient: dx = w ⋆ᵀ dy. Parallel over batches (disjoint slabs).
pub fn conv3d_backward_input(w: &[f32], dy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let iv = g.in_voxels();
    let ov = g.out_voxels();
    let cig = g.cin / g.groups;
    let cog = g.cout / g.groups;
    let k3 = g.kernel * g.kernel * g.kernel;
    let mut dx = vec![0.0; g.bsz * g.cin * iv];

    if g.is_depthwise() {
        dx.par_chunks_mut(iv).enumerate().for_each(|(bc, dx_c)| {
            let (b, c) = (bc / g.cin, bc % g.cin);
            depthwise_backward_input_one(&w[c * k3..][..k3], &dy[(b * g.cin + c) * ov..][..ov], g, dx_c);
        });
        return dx;
    }

    dx.par_chunks_mut(g.cin * iv).enumerate().for_each(|(b, dx_b)| {
        let mut dcol = vec![0.0; cig * k3 * ov];
        for gi in 0..g.groups {
            let w_g = &w[gi * cog * cig * k3..][..cog * cig * k3];
            let dy_g = &dy[(b * g.cout + gi * cog) * ov..][..cog * ov];
            // dcol = w_gᵀ (cig·k³ × cog) · dy_g (cog × ov)
            gemm_tn(cig * k3, cog, ov, 1.0, w_g, dy_g, 0.0, &mut dcol);
            col2im_add(&dcol, g, &mut dx_b[gi * cig * iv..][..cig * iv]);
        }
    });
    dx
}

fn depthwise_backward_input_one(w_c: &[f32], dy_c: &[f32], g: &ConvGeom, dx_c: &mut [f32]) {
    let (d, h, w) = g.in_dims;
    let (od, oh, ow) = g.out_dims();
    let k = g.kernel;
    for zo in 0..od {
        for yo in 0..oh {
            for xo in 0..ow {
                let gout = dy_c[(zo * oh + yo) * ow + xo];
                for kz in 0..k {
                    let z = (zo * g.stride + kz) as isize - g.pad as isize;
                    if z < 0 || z >= d as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let y = (yo * g.stride + ky) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xq = (xo * g.stride + kx) as isize - g.pad as isize;
                            if xq < 0 || xq >= w as isize {
                                continue;
                            }
                            dx_c[(z as usize * h + y as usize) * w + xq as usize] +=
                                gout * w_c[(kz * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Weight and bias gradients, accumulated over batches in index order.
pub fn conv3d_backward_weights(x: &[f32], dy: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let iv = g.in_voxels();
    let ov = g.out_voxels();
    let cig = g.cin / g.groups;
    let cog = g.cout / g.groups;
    let k3 = g.kernel * g.kernel * g.kernel;
    let mut dw = vec![0.0; g.cout * cig * k3];
    let mut db = vec![0.0; g.cout];

    for b in 0..g.bsz {
        for co in 0..g.cout {
            let dy_c = &dy[(b * g.cout + co) * ov..][..ov];
            db[co] += dy_c.iter().sum::<f32>();
        }
    }

    if g.is_depthwise() {
        dw.par_chunks_mut(k3).enumerate().for_each(|(c, dw_c)| {
            for b in 0..g.bsz {
                depthwise_backward_weight_one(
                    &x[(b * g.cin + c) * iv..][..iv],
                    &dy[(b * g.cin + c) * ov..][..ov],
                    g,
                    dw_c,
                );
            }
        });
        return (dw, db);
    }

    let mut col = vec![0.0; cig * k3 * ov];
    for b in 0..g.bsz {
        for gi in 0..g.groups {
            let x_bg = &x[(b * g.cin + gi * cig) * iv..][..cig * iv];
            im2col(x_bg, g, &mut col);
            let dy_g = &dy[(b * g.cout + gi * cog) * ov..][..cog * ov];
            let dw_g = &mut dw[gi * cog * cig * k3..][..cog * cig * k3];
            // dw_g += dy_g (cog × ov) · colᵀ (ov × cig·k³)
            gemm_nt(cog, ov, cig * k3, 1.0, dy_g, &col, 1.0, dw_g);
        }
    }
    (dw, db)
}

fn depthwise_backward_weight_one(x_c: &[f32], dy_c: &[f32], g: &ConvGeom, dw_c: &mut [f32]) {
    let (d, h, w) = g.in_dims;
    let (od, oh, ow) = g.out_dims();
    let k = g.kernel;
    for kz in 0..k {
        for ky in 0..k {
            for kx in 0..k {
                let mut acc = 0.0f32;
                for zo in 0..od {
                    let z = (zo * g.stride + kz) as isize - g.pad as isize;
                    if z < 0 || z >= d as isize {
                        continue;
                    }
                    for yo in 0..oh {
                        let y = (yo * g.stride + ky) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for xo in 0..ow {
                            let xq = (xo * g.stride + kx) as isize - g.pad as isize;
                            if xq < 0 || xq >= w as isize {
                                continue;
                            }
                            acc += dy_c[(zo * oh + yo) * ow + xo]
                                * x_c[(z as usize * h + y as usize) * w + xq as usize];
                        }
                    }
                }
                dw_c[(kz * k + ky) * k + kx] += acc;
            }
        }
    }
}
