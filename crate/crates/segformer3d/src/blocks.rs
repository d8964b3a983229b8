//! Building blocks of the encoder: overlapped patch embedding, efficient
//! self-attention with sequence reduction, mix-FFN, and the pre-norm
//! transformer block that composes them.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A token sequence plus the voxel grid it was flattened from. The grid is
/// carried along for the mix-FFN depthwise convolution and decoder reshapes.
#[derive(Clone)]
pub struct TokenSeq {
    /// [B, N, C] with N = grid.0 · grid.1 · grid.2.
    pub tokens: Tensor,
    pub grid: (usize, usize, usize),
}

/// Deterministic parameter initializer: one seeded stream, consumed in
/// construction order.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal(0, std) via Box-Muller.
    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = self.rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let t = 2.0 * std::f64::consts::PI * u2;
            out.push((r * t.cos()) as f32 * std);
            if out.len() < n {
                out.push((r * t.sin()) as f32 * std);
            }
        }
        out
    }
}

pub struct Linear {
    pub weight: Tensor, // [outf, inf]
    pub bias: Tensor,   // [outf]
}

impl Linear {
    pub fn new(init: &mut ParamInit, inf: usize, outf: usize) -> Self {
        Linear {
            weight: Tensor::param(init.normal(outf * inf, 0.02), &[outf, inf]),
            bias: Tensor::param(vec![0.0; outf], &[outf]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, &self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(c: usize, eps: f32) -> Self {
        LayerNorm {
            gamma: Tensor::param(vec![1.0; c], &[c]),
            beta: Tensor::param(vec![0.0; c], &[c]),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layernorm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct Conv3d {
    pub weight: Tensor, // [cout, cin/groups, k, k, k]
    pub bias: Tensor,   // [cout]
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv3d {
    pub fn new(
        init: &mut ParamInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        let cig = cin / groups;
        let fan_in = (cig * kernel * kernel * kernel) as f32;
        Conv3d {
            weight: Tensor::param(
                init.normal(cout * cig * kernel * kernel * kernel, (2.0 / fan_in).sqrt()),
                &[cout, cig, kernel, kernel, kernel],
            ),
            bias: Tensor::param(vec![0.0; cout], &[cout]),
            stride,
            pad,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv3d(x, &self.weight, &self.bias, self.stride, self.pad, self.groups)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Overlapped patch merging: strided conv (kernel > stride) followed by
/// token flattening and layer norm.
pub struct PatchEmbed {
    pub conv: Conv3d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(
        init: &mut ParamInit,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        ln_eps: f32,
    ) -> Self {
        PatchEmbed {
            conv: Conv3d::new(init, cin, cout, kernel, stride, pad, 1),
            norm: LayerNorm::new(cout, ln_eps),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<TokenSeq> {
        let vol = self.conv.forward(x)?;
        let grid = match vol.shape() {
            [_, _, d, h, w] => (*d, *h, *w),
            _ => unreachable!("conv3d output is rank 5"),
        };
        let tokens = ops::vol_to_tokens(&vol)?;
        Ok(TokenSeq { tokens: self.norm.forward(&tokens)?, grid })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
        self.norm.collect_params(&format!("{prefix}.norm"), out);
    }
}

/// Self-attention with sequence reduction: keys and values are compressed by
/// folding R consecutive tokens into channels ([B, N, C] → [B, N/R, C·R])
/// and projecting back to C before the usual K/V projections. The reduction
/// projections exist only when R > 1, so R = 1 is structurally a standard
/// multi-head self-attention.
pub struct EfficientAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub k_reduce: Option<Linear>,
    pub v_reduce: Option<Linear>,
    pub heads: usize,
    pub reduction: usize,
}

impl EfficientAttention {
    pub fn new(init: &mut ParamInit, c: usize, heads: usize, reduction: usize) -> Self {
        let reduce = |init: &mut ParamInit| Linear::new(init, c * reduction, c);
        EfficientAttention {
            q: Linear::new(init, c, c),
            k: Linear::new(init, c, c),
            v: Linear::new(init, c, c),
            proj: Linear::new(init, c, c),
            k_reduce: (reduction > 1).then(|| reduce(init)),
            v_reduce: (reduction > 1).then(|| reduce(init)),
            heads,
            reduction,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_probs(x)?.0)
    }

    /// Forward pass that also returns the softmaxed score matrix
    /// [B·h, N, N/R] (each row a probability simplex point).
    pub fn forward_with_probs(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = match x.shape() {
            [b, n, c] => (*b, *n, *c),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "attention expects [B, N, C], got {s:?}"
                )))
            }
        };
        let r = self.reduction;
        if n % r != 0 {
            return Err(Error::ReductionIndivisible { len: n, reduction: r });
        }
        let q = self.q.forward(x)?;
        let (ksrc, vsrc) = if r > 1 {
            let folded = ops::reshape(x, &[b, n / r, c * r])?;
            (
                self.k_reduce.as_ref().unwrap().forward(&folded)?,
                self.v_reduce.as_ref().unwrap().forward(&folded)?,
            )
        } else {
            (x.clone(), x.clone())
        };
        let k = self.k.forward(&ksrc)?;
        let v = self.v.forward(&vsrc)?;

        let qh = ops::split_heads(&q, self.heads)?;
        let kh = ops::split_heads(&k, self.heads)?;
        let vh = ops::split_heads(&v, self.heads)?;
        let dh = c / self.heads;
        let scores = ops::scale(&ops::matmul_batched(&qh, &kh, true)?, 1.0 / (dh as f32).sqrt());
        let probs = ops::softmax_last(&scores);
        let ctx = ops::matmul_batched(&probs, &vh, false)?;
        let merged = ops::merge_heads(&ctx, self.heads)?;
        Ok((self.proj.forward(&merged)?, probs))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.collect_params(&format!("{prefix}.q"), out);
        self.k.collect_params(&format!("{prefix}.k"), out);
        self.v.collect_params(&format!("{prefix}.v"), out);
        self.proj.collect_params(&format!("{prefix}.proj"), out);
        if let Some(kr) = &self.k_reduce {
            kr.collect_params(&format!("{prefix}.k_reduce"), out);
        }
        if let Some(vr) = &self.v_reduce {
            vr.collect_params(&format!("{prefix}.v_reduce"), out);
        }
    }
}

/// Mix-FFN: expand, run a depthwise 3×3×3 conv on the voxel grid to leak
/// positional information into the tokens, GELU, contract.
pub struct MixFfn {
    pub fc1: Linear,
    pub dw: Conv3d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new(init: &mut ParamInit, c: usize, expansion: usize) -> Self {
        let hidden = c * expansion;
        MixFfn {
            fc1: Linear::new(init, c, hidden),
            dw: Conv3d::new(init, hidden, hidden, 3, 1, 1, hidden),
            fc2: Linear::new(init, hidden, c),
        }
    }

    pub fn forward(&self, x: &Tensor, grid: (usize, usize, usize)) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let vol = ops::tokens_to_vol(&h, grid)?;
        let conv = self.dw.forward(&vol)?;
        let tokens = ops::vol_to_tokens(&conv)?;
        let act = ops::gelu(&tokens);
        self.fc2.forward(&act)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.dw.collect_params(&format!("{prefix}.dw"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}

/// Pre-norm residual block: x + Attn(LN(x)), then y + FFN(LN(y)).
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: EfficientAttention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl Block {
    pub fn new(
        init: &mut ParamInit,
        c: usize,
        heads: usize,
        reduction: usize,
        expansion: usize,
        ln_eps: f32,
    ) -> Self {
        Block {
            norm1: LayerNorm::new(c, ln_eps),
            attn: EfficientAttention::new(init, c, heads, reduction),
            norm2: LayerNorm::new(c, ln_eps),
            ffn: MixFfn::new(init, c, expansion),
        }
    }

    pub fn forward(&self, x: &Tensor, grid: (usize, usize, usize)) -> Result<Tensor> {
        let a = self.attn.forward(&self.norm1.forward(x)?)?;
        let y = ops::add(x, &a)?;
        let f = self.ffn.forward(&self.norm2.forward(&y)?, grid)?;
        ops::add(&y, &f)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.ffn.collect_params(&format!("{prefix}.ffn"), out);
    }
}
