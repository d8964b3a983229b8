//! Analytic parameter and FLOP accounting.
//!
//! The closed forms here mirror the costs that the tensor ops record during
//! a real instrumented forward pass (see [`crate::tensor::flops`]); a test
//! pins the two routes to exact equality. Multiply-add counts as 2 FLOPs,
//! and the convention is stated in every report.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MIN_DIVISOR, NUM_STAGES};
use crate::tensor::flops::{
    conv3d_flops, linear_flops, matmul_flops, ELEMWISE_FLOPS_PER_ELEM, GELU_FLOPS_PER_ELEM,
    LAYERNORM_FLOPS_PER_ELEM, SOFTMAX_FLOPS_PER_ELEM, TRILINEAR_FLOPS_PER_OUT_ELEM,
};
use serde::Serialize;

pub const COUNTING_CONVENTION: &str = "multiply-add = 2 FLOPs";

#[derive(Debug, Clone, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileReport {
    pub total_params: u64,
    pub total_flops: u64,
    /// Input shape the FLOP column was evaluated at; absent for params-only
    /// reports, whose FLOP column is all zeros.
    pub input_shape: Option<Vec<usize>>,
    pub per_module: Vec<ModuleCost>,
    pub counting_convention: String,
}

impl ProfileReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile report serializes")
    }

    /// Aligned human-readable table.
    pub fn render_table(&self) -> String {
        let name_w = self
            .per_module
            .iter()
            .map(|m| m.name.len())
            .chain(["module".len(), "total".len()])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>16}\n",
            "module", "params", "flops"
        ));
        for m in &self.per_module {
            out.push_str(&format!(
                "{:<name_w$}  {:>12}  {:>16}\n",
                m.name, m.params, m.flops
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>16}\n",
            "total", self.total_params, self.total_flops
        ));
        if let Some(shape) = &self.input_shape {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!(
                "flops at input {} ({:.3} GFLOPs)\n",
                dims.join("x"),
                self.total_flops as f64 / 1e9
            ));
        }
        out.push_str(&format!("convention: {}\n", COUNTING_CONVENTION));
        out
    }
}

/// FLOPs of the attention score product Q·Kᵀ alone: 2·h·N·(N/R)·d_head.
/// This is the term sequence reduction shrinks by exactly R.
pub fn attention_score_flops(n: usize, heads: usize, d_head: usize, reduction: usize) -> Result<u64> {
    if reduction == 0 || n % reduction != 0 {
        return Err(Error::ReductionIndivisible { len: n, reduction });
    }
    Ok(matmul_flops(heads as u64, n as u64, d_head as u64, (n / reduction) as u64))
}

fn linear_params(inf: u64, outf: u64) -> u64 {
    inf * outf + outf
}

fn conv_params(cin_per_group: u64, cout: u64, k3: u64) -> u64 {
    cout * cin_per_group * k3 + cout
}

fn norm_params(c: u64) -> u64 {
    2 * c
}

fn conv_out(ext: usize, k: usize, s: usize, p: usize) -> usize {
    (ext + 2 * p - k) / s + 1
}

/// One transformer block's parameters at width `c`.
fn block_params(c: u64, reduction: u64, expansion: u64) -> u64 {
    let attn = 4 * linear_params(c, c)
        + if reduction > 1 { 2 * linear_params(c * reduction, c) } else { 0 };
    let hidden = expansion * c;
    let ffn = linear_params(c, hidden) + conv_params(1, hidden, 27) + linear_params(hidden, c);
    2 * norm_params(c) + attn + ffn
}

/// One transformer block's FLOPs on `n` tokens of width `c`, mirroring the
/// op-by-op forward pass exactly.
fn block_flops(bsz: u64, n: u64, c: u64, heads: u64, reduction: u64, expansion: u64) -> u64 {
    let bn = bsz * n;
    let m = n / reduction;
    let dh = c / heads;
    let hidden = expansion * c;
    let mut f = 0u64;
    f += LAYERNORM_FLOPS_PER_ELEM * bn * c; // norm1
    f += linear_flops(bn, c, c); // q projection
    if reduction > 1 {
        f += 2 * linear_flops(bsz * m, c * reduction, c); // k/v reductions
    }
    f += 2 * linear_flops(bsz * m, c, c); // k and v projections
    f += matmul_flops(bsz * heads, n, dh, m); // q·kᵀ
    f += ELEMWISE_FLOPS_PER_ELEM * bsz * heads * n * m; // scale by 1/sqrt(dh)
    f += SOFTMAX_FLOPS_PER_ELEM * bsz * heads * n * m; // softmax
    f += matmul_flops(bsz * heads, n, m, dh); // scores·v
    f += linear_flops(bn, c, c); // output projection
    f += ELEMWISE_FLOPS_PER_ELEM * bn * c; // attention residual
    f += LAYERNORM_FLOPS_PER_ELEM * bn * c; // norm2
    f += linear_flops(bn, c, hidden); // fc1
    f += conv3d_flops(bsz, 1, hidden, 27, n); // depthwise 3x3x3
    f += GELU_FLOPS_PER_ELEM * bn * hidden; // gelu
    f += linear_flops(bn, hidden, c); // fc2
    f += ELEMWISE_FLOPS_PER_ELEM * bn * c; // ffn residual
    f
}

/// Per-module costs; the FLOP column is zero when no input shape is given.
fn build(cfg: &ModelConfig, input: Option<&[usize]>) -> Result<Vec<ModuleCost>> {
    cfg.validate()?;
    let geom = match input {
        Some(shape) => {
            let (bsz, cin, dims) = match shape {
                [b, c, d, h, w] => (*b, *c, [*d, *h, *w]),
                s => {
                    return Err(Error::ShapeMismatch(format!(
                        "profile input must be [B, C, D, H, W], got {s:?}"
                    )))
                }
            };
            if cin != cfg.in_channels {
                return Err(Error::ShapeMismatch(format!(
                    "profile input has {cin} channels, model takes {}",
                    cfg.in_channels
                )));
            }
            if bsz == 0 {
                return Err(Error::ShapeMismatch("profile batch size is zero".into()));
            }
            for &ext in &dims {
                if ext == 0 || ext % MIN_DIVISOR != 0 {
                    return Err(Error::IndivisibleExtent { extent: ext, required: MIN_DIVISOR });
                }
            }
            Some((bsz as u64, dims))
        }
        None => None,
    };

    let e = cfg.expansion as u64;
    let dc = cfg.decoder_width as u64;
    let mut rows = Vec::new();
    let mut grids = Vec::new(); // per-stage (voxels, width) when profiling flops
    let mut cin = cfg.in_channels as u64;
    let mut dims = geom.map(|(_, d)| d);
    let bsz = geom.map(|(b, _)| b).unwrap_or(0);

    for i in 0..NUM_STAGES {
        let c = cfg.widths[i] as u64;
        let (k, s, p) = (cfg.patch_kernels[i], cfg.patch_strides[i], cfg.patch_pads[i]);
        let k3 = (k * k * k) as u64;
        let n = match dims {
            Some(d) => {
                let od =
                    [conv_out(d[0], k, s, p), conv_out(d[1], k, s, p), conv_out(d[2], k, s, p)];
                dims = Some(od);
                Some((od[0] * od[1] * od[2]) as u64)
            }
            None => None,
        };

        let patch_flops = n.map_or(0, |n| {
            conv3d_flops(bsz, cin, c, k3, n) + LAYERNORM_FLOPS_PER_ELEM * bsz * n * c
        });
        rows.push(ModuleCost {
            name: format!("stage{}.patch", i + 1),
            params: conv_params(cin, c, k3) + norm_params(c),
            flops: patch_flops,
        });

        let depth = cfg.depths[i] as u64;
        let (h, r) = (cfg.heads[i] as u64, cfg.reductions[i] as u64);
        rows.push(ModuleCost {
            name: format!("stage{}.blocks", i + 1),
            params: depth * block_params(c, r, e),
            flops: n.map_or(0, |n| depth * block_flops(bsz, n, c, h, r, e)),
        });

        rows.push(ModuleCost {
            name: format!("stage{}.norm", i + 1),
            params: norm_params(c),
            flops: n.map_or(0, |n| LAYERNORM_FLOPS_PER_ELEM * bsz * n * c),
        });

        if let Some(n) = n {
            grids.push(n);
        }
        cin = c;
    }

    // Decoder: per-stage projection, upsample to the stage-1 grid, fuse,
    // class head, and the final x4 upsample.
    let n1 = grids.first().copied().unwrap_or(0);
    let mut upsample_flops = 0u64;
    for i in 0..NUM_STAGES {
        let ci = cfg.widths[i] as u64;
        let n = grids.get(i).copied().unwrap_or(0);
        rows.push(ModuleCost {
            name: format!("decoder.proj{}", i + 1),
            params: linear_params(ci, dc),
            flops: if grids.is_empty() { 0 } else { linear_flops(bsz * n, ci, dc) },
        });
        // The forward pass skips the interpolation op on the stage already at
        // the target grid.
        if !grids.is_empty() && n != n1 {
            upsample_flops += TRILINEAR_FLOPS_PER_OUT_ELEM * bsz * dc * n1;
        }
    }
    let ncls = cfg.num_classes as u64;
    if !grids.is_empty() {
        upsample_flops += TRILINEAR_FLOPS_PER_OUT_ELEM * bsz * ncls * 64 * n1;
    }
    rows.push(ModuleCost { name: "decoder.upsample".into(), params: 0, flops: upsample_flops });
    rows.push(ModuleCost {
        name: "decoder.fuse".into(),
        params: linear_params(NUM_STAGES as u64 * dc, dc),
        flops: if grids.is_empty() { 0 } else { linear_flops(bsz * n1, NUM_STAGES as u64 * dc, dc) },
    });
    rows.push(ModuleCost {
        name: "decoder.head".into(),
        params: linear_params(dc, ncls),
        flops: if grids.is_empty() { 0 } else { linear_flops(bsz * n1, dc, ncls) },
    });
    Ok(rows)
}

fn report(rows: Vec<ModuleCost>, input_shape: Option<Vec<usize>>) -> ProfileReport {
    ProfileReport {
        total_params: rows.iter().map(|m| m.params).sum(),
        total_flops: rows.iter().map(|m| m.flops).sum(),
        input_shape,
        per_module: rows,
        counting_convention: COUNTING_CONVENTION.into(),
    }
}

/// Closed-form parameter counts over the instantiated module tree.
/// Independent of input shape; the report's FLOP column is zero.
pub fn count_params(cfg: &ModelConfig) -> Result<ProfileReport> {
    Ok(report(build(cfg, None)?, None))
}

/// Closed-form parameter and FLOP counts for one forward pass at
/// `input_shape = [B, C, D, H, W]`.
pub fn count_flops(cfg: &ModelConfig, input_shape: &[usize]) -> Result<ProfileReport> {
    Ok(report(build(cfg, Some(input_shape))?, Some(input_shape.to_vec())))
}
