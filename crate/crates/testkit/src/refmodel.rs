//! Step-by-step f64 reference forward for the SegFormer3D architecture,
//! composed from the plain-loop kernels in [`crate::refops`].
//!
//! Tests copy the engine's f32 weights into these structs and compare the
//! engine output against this independent composition. Softmax here is the
//! naive exp/sum form (no max shift) so the two implementations share no
//! numerical tricks.

use crate::refops::*;

#[derive(Clone)]
pub struct RefLinear {
    pub w: Vec<f64>, // [outf, inf]
    pub b: Vec<f64>, // [outf]
    pub inf: usize,
    pub outf: usize,
}

impl RefLinear {
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        linear64(x, &self.w, &self.b, rows, self.inf, self.outf)
    }
}

#[derive(Clone)]
pub struct RefLayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl RefLayerNorm {
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        layernorm64(x, &self.gamma, &self.beta, rows, self.gamma.len(), self.eps)
    }
}

#[derive(Clone)]
pub struct RefConv3d {
    pub w: Vec<f64>, // [cout, cin/groups, kd, kh, kw]
    pub b: Vec<f64>, // [cout]
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl RefConv3d {
    pub fn apply(&self, x: &[f64], bsz: usize, dims: (usize, usize, usize)) -> (Vec<f64>, (usize, usize, usize)) {
        let out = conv3d64(
            x,
            &self.w,
            &self.b,
            bsz,
            self.cin,
            dims,
            self.cout,
            (self.kernel, self.kernel, self.kernel),
            self.stride,
            self.pad,
            self.groups,
        );
        let o = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (out, (o(dims.0), o(dims.1), o(dims.2)))
    }
}

#[derive(Clone)]
pub struct RefAttention {
    pub q: RefLinear,
    pub k: RefLinear,
    pub v: RefLinear,
    pub proj: RefLinear,
    /// Reduction projections Linear(C·R -> C); present iff reduction > 1.
    pub k_reduce: Option<RefLinear>,
    pub v_reduce: Option<RefLinear>,
    pub heads: usize,
    pub reduction: usize,
}

impl RefAttention {
    /// x: [bsz, n, c] tokens, returns same shape.
    pub fn apply(&self, x: &[f64], bsz: usize, n: usize, c: usize) -> Vec<f64> {
        let q = self.q.apply(x, bsz * n);
        // Reshape [B, N, C] -> [B, N/R, C·R] is a pure row-major reinterpret,
        // so the reduction linears consume x directly with wider rows.
        let (ksrc, vsrc, m) = if self.reduction > 1 {
            let r = self.reduction;
            assert_eq!(n % r, 0, "sequence length not divisible by reduction");
            let kr = self.k_reduce.as_ref().expect("reduction > 1 requires k_reduce");
            let vr = self.v_reduce.as_ref().expect("reduction > 1 requires v_reduce");
            (kr.apply(x, bsz * (n / r)), vr.apply(x, bsz * (n / r)), n / r)
        } else {
            (x.to_vec(), x.to_vec(), n)
        };
        let k = self.k.apply(&ksrc, bsz * m);
        let v = self.v.apply(&vsrc, bsz * m);

        let h = self.heads;
        let dh = c / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = vec![0.0; bsz * n * c];
        for bi in 0..bsz {
            for hi in 0..h {
                // Gather per-head slices: q_h [n, dh], k_h/v_h [m, dh].
                let mut qh = vec![0.0; n * dh];
                for t in 0..n {
                    for d in 0..dh {
                        qh[t * dh + d] = q[(bi * n + t) * c + hi * dh + d];
                    }
                }
                let mut kh = vec![0.0; m * dh];
                let mut vh = vec![0.0; m * dh];
                for t in 0..m {
                    for d in 0..dh {
                        kh[t * dh + d] = k[(bi * m + t) * c + hi * dh + d];
                        vh[t * dh + d] = v[(bi * m + t) * c + hi * dh + d];
                    }
                }
                // scores = q_h k_h^T / sqrt(dh): [n, m]
                let mut scores = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for d in 0..dh {
                            acc += qh[i * dh + d] * kh[j * dh + d];
                        }
                        scores[i * m + j] = acc * scale;
                    }
                }
                let probs = softmax64(&scores, n, m);
                // out_h = probs v_h: [n, dh]
                let oh = matmul64(&probs, &vh, n, m, dh);
                for t in 0..n {
                    for d in 0..dh {
                        merged[(bi * n + t) * c + hi * dh + d] = oh[t * dh + d];
                    }
                }
            }
        }
        self.proj.apply(&merged, bsz * n)
    }
}

#[derive(Clone)]
pub struct RefFfn {
    pub fc1: RefLinear,
    pub dw: RefConv3d, // depthwise 3x3x3, stride 1, pad 1, groups = hidden
    pub fc2: RefLinear,
}

impl RefFfn {
    pub fn apply(&self, x: &[f64], bsz: usize, grid: (usize, usize, usize)) -> Vec<f64> {
        let n = grid.0 * grid.1 * grid.2;
        let hidden = self.fc1.outf;
        let h1 = self.fc1.apply(x, bsz * n);
        let vol = tokens_to_vol64(&h1, bsz, n, hidden);
        let (cv, _) = self.dw.apply(&vol, bsz, grid);
        let tok = vol_to_tokens64(&cv, bsz, hidden, n);
        let act: Vec<f64> = tok.iter().map(|&v| gelu64(v)).collect();
        self.fc2.apply(&act, bsz * n)
    }
}

#[derive(Clone)]
pub struct RefBlock {
    pub norm1: RefLayerNorm,
    pub attn: RefAttention,
    pub norm2: RefLayerNorm,
    pub ffn: RefFfn,
}

impl RefBlock {
    pub fn apply(&self, x: &[f64], bsz: usize, grid: (usize, usize, usize), c: usize) -> Vec<f64> {
        let n = grid.0 * grid.1 * grid.2;
        let a = self.norm1.apply(x, bsz * n);
        let a = self.attn.apply(&a, bsz, n, c);
        let y: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let f = self.norm2.apply(&y, bsz * n);
        let f = self.ffn.apply(&f, bsz, grid);
        y.iter().zip(&f).map(|(p, q)| p + q).collect()
    }
}

#[derive(Clone)]
pub struct RefPatchEmbed {
    pub conv: RefConv3d,
    pub norm: RefLayerNorm,
}

impl RefPatchEmbed {
    /// Volume in, tokens out (with the post-conv grid).
    pub fn apply(
        &self,
        x: &[f64],
        bsz: usize,
        dims: (usize, usize, usize),
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let (vol, od) = self.conv.apply(x, bsz, dims);
        let n = od.0 * od.1 * od.2;
        let tok = vol_to_tokens64(&vol, bsz, self.conv.cout, n);
        (self.norm.apply(&tok, bsz * n), od)
    }
}

#[derive(Clone)]
pub struct RefStage {
    pub patch: RefPatchEmbed,
    pub blocks: Vec<RefBlock>,
    pub norm: RefLayerNorm,
    pub width: usize,
}

impl RefStage {
    /// Volume in, (tokens, grid) out; tokens are post-final-norm.
    pub fn apply(
        &self,
        x: &[f64],
        bsz: usize,
        dims: (usize, usize, usize),
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let (mut tok, grid) = self.patch.apply(x, bsz, dims);
        for blk in &self.blocks {
            tok = blk.apply(&tok, bsz, grid, self.width);
        }
        let n = grid.0 * grid.1 * grid.2;
        (self.norm.apply(&tok, bsz * n), grid)
    }
}

#[derive(Clone)]
pub struct RefDecoder {
    pub proj: Vec<RefLinear>, // per stage: C_i -> C
    pub fuse: RefLinear,      // 4C -> C
    pub head: RefLinear,      // C -> N_cls
}

impl RefDecoder {
    /// feats: per stage (tokens [bsz, n_i, c_i], grid). Returns logits volume
    /// [bsz, n_cls, 4·grid1] plus its dims.
    pub fn apply(
        &self,
        feats: &[(Vec<f64>, (usize, usize, usize), usize)],
        bsz: usize,
    ) -> (Vec<f64>, (usize, usize, usize)) {
        assert_eq!(feats.len(), 4);
        let g1 = feats[0].1;
        let dc = self.fuse.outf;
        let mut upsampled = Vec::new();
        for (i, (tok, grid, c)) in feats.iter().enumerate() {
            let n = grid.0 * grid.1 * grid.2;
            let p = self.proj[i].apply(tok, bsz * n);
            let vol = tokens_to_vol64(&p, bsz, n, dc);
            let s = g1.0 / grid.0;
            assert_eq!((grid.0 * s, grid.1 * s, grid.2 * s), g1);
            let _ = c;
            let up = if s == 1 { vol } else { trilinear64(&vol, bsz, dc, *grid, s) };
            upsampled.push(up);
        }
        // Channel concat, deepest stage first.
        let n1 = g1.0 * g1.1 * g1.2;
        let mut cat = vec![0.0; bsz * 4 * dc * n1];
        for bi in 0..bsz {
            for (slot, up) in upsampled.iter().rev().enumerate() {
                for ci in 0..dc {
                    let dst = ((bi * 4 * dc) + slot * dc + ci) * n1;
                    let src = (bi * dc + ci) * n1;
                    cat[dst..dst + n1].copy_from_slice(&up[src..src + n1]);
                }
            }
        }
        let tok = vol_to_tokens64(&cat, bsz, 4 * dc, n1);
        let fused = self.fuse.apply(&tok, bsz * n1);
        let logits_tok = self.head.apply(&fused, bsz * n1);
        let ncls = self.head.outf;
        let logits = tokens_to_vol64(&logits_tok, bsz, n1, ncls);
        let out = trilinear64(&logits, bsz, ncls, g1, 4);
        (out, (g1.0 * 4, g1.1 * 4, g1.2 * 4))
    }
}

#[derive(Clone)]
pub struct RefModel {
    pub stages: Vec<RefStage>,
    pub decoder: RefDecoder,
}

impl RefModel {
    pub fn forward(
        &self,
        x: &[f64],
        bsz: usize,
        dims: (usize, usize, usize),
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let mut feats = Vec::new();
        let mut vol = x.to_vec();
        let mut cur = dims;
        for stage in &self.stages {
            let (tok, grid) = stage.apply(&vol, bsz, cur);
            let n = grid.0 * grid.1 * grid.2;
            vol = tokens_to_vol64(&tok, bsz, n, stage.width);
            cur = grid;
            feats.push((tok, grid, stage.width));
        }
        self.decoder.apply(&feats, bsz)
    }
}

// ---------------------------------------------------------------------------
// Losses and the evaluation metric, in f64.
// ---------------------------------------------------------------------------

/// Soft dice loss: softmax over classes, per-class smoothed dice, 1 - mean.
/// logits: [b, k, n] channels-first; target: [b, n] labels.
pub fn dice_loss64(
    logits: &[f64],
    target: &[u8],
    b: usize,
    k: usize,
    n: usize,
    eps: f64,
    include_background: bool,
) -> f64 {
    assert_eq!(logits.len(), b * k * n);
    assert_eq!(target.len(), b * n);
    // Per-voxel softmax across the class axis, naive form.
    let mut probs = vec![0.0; logits.len()];
    for bi in 0..b {
        for vi in 0..n {
            let mut denom = 0.0;
            for ci in 0..k {
                denom += logits[(bi * k + ci) * n + vi].exp();
            }
            for ci in 0..k {
                probs[(bi * k + ci) * n + vi] = logits[(bi * k + ci) * n + vi].exp() / denom;
            }
        }
    }
    let start = if include_background { 0 } else { 1 };
    let mut total = 0.0;
    let mut count = 0usize;
    for ci in start..k {
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for bi in 0..b {
            for vi in 0..n {
                let p = probs[(bi * k + ci) * n + vi];
                let t = if target[bi * n + vi] as usize == ci { 1.0 } else { 0.0 };
                inter += p * t;
                psum += p;
                tsum += t;
            }
        }
        total += (2.0 * inter + eps) / (psum + tsum + eps);
        count += 1;
    }
    1.0 - total / count as f64
}

/// Mean cross-entropy over voxels: -log softmax(logits)[target].
pub fn cross_entropy64(logits: &[f64], target: &[u8], b: usize, k: usize, n: usize) -> f64 {
    assert_eq!(logits.len(), b * k * n);
    assert_eq!(target.len(), b * n);
    let mut total = 0.0;
    for bi in 0..b {
        for vi in 0..n {
            let mut denom = 0.0;
            for ci in 0..k {
                denom += logits[(bi * k + ci) * n + vi].exp();
            }
            let t = target[bi * n + vi] as usize;
            let p = logits[(bi * k + t) * n + vi].exp() / denom;
            total += -p.ln();
        }
    }
    total / (b * n) as f64
}

/// Hard dice per foreground class plus the foreground mean.
/// Absent-in-both classes score 1.0.
pub fn dice_score64(pred: &[u8], target: &[u8], num_classes: usize) -> (Vec<f64>, f64) {
    assert_eq!(pred.len(), target.len());
    let mut per_class = Vec::new();
    for c in 1..num_classes {
        let c = c as u8;
        let mut inter = 0usize;
        let mut a = 0usize;
        let mut bb = 0usize;
        for (&p, &t) in pred.iter().zip(target) {
            if p == c && t == c {
                inter += 1;
            }
            if p == c {
                a += 1;
            }
            if t == c {
                bb += 1;
            }
        }
        per_class.push(if a + bb == 0 { 1.0 } else { 2.0 * inter as f64 / (a + bb) as f64 });
    }
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    (per_class, mean)
}
