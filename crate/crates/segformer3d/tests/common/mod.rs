//! Shared test support: copying engine weights into the f64 reference
//! structures from testkit, so every oracle sees the same parameters.

#![allow(dead_code)]

use segformer3d::blocks;
use segformer3d::model::Model;
use segformer3d::tensor::Tensor;
use testkit::refmodel::*;
use testkit::rng::randn;

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.with_data(|d| d.iter().map(|&v| v as f64).collect())
}

pub fn ref_linear(l: &blocks::Linear) -> RefLinear {
    let (outf, inf) = (l.weight.shape()[0], l.weight.shape()[1]);
    RefLinear { w: to64(&l.weight), b: to64(&l.bias), inf, outf }
}

pub fn ref_norm(n: &blocks::LayerNorm) -> RefLayerNorm {
    RefLayerNorm { gamma: to64(&n.gamma), beta: to64(&n.beta), eps: n.eps as f64 }
}

pub fn ref_conv(c: &blocks::Conv3d) -> RefConv3d {
    let s = c.weight.shape();
    RefConv3d {
        w: to64(&c.weight),
        b: to64(&c.bias),
        cin: s[1] * c.groups,
        cout: s[0],
        kernel: s[2],
        stride: c.stride,
        pad: c.pad,
        groups: c.groups,
    }
}

pub fn ref_attention(a: &blocks::EfficientAttention) -> RefAttention {
    RefAttention {
        q: ref_linear(&a.q),
        k: ref_linear(&a.k),
        v: ref_linear(&a.v),
        proj: ref_linear(&a.proj),
        k_reduce: a.k_reduce.as_ref().map(ref_linear),
        v_reduce: a.v_reduce.as_ref().map(ref_linear),
        heads: a.heads,
        reduction: a.reduction,
    }
}

pub fn ref_ffn(f: &blocks::MixFfn) -> RefFfn {
    RefFfn { fc1: ref_linear(&f.fc1), dw: ref_conv(&f.dw), fc2: ref_linear(&f.fc2) }
}

pub fn ref_block(b: &blocks::Block) -> RefBlock {
    RefBlock {
        norm1: ref_norm(&b.norm1),
        attn: ref_attention(&b.attn),
        norm2: ref_norm(&b.norm2),
        ffn: ref_ffn(&b.ffn),
    }
}

pub fn ref_model(m: &Model) -> RefModel {
    RefModel {
        stages: m
            .stages
            .iter()
            .map(|s| RefStage {
                patch: RefPatchEmbed { conv: ref_conv(&s.patch.conv), norm: ref_norm(&s.patch.norm) },
                blocks: s.blocks.iter().map(ref_block).collect(),
                norm: ref_norm(&s.norm),
                width: s.width,
            })
            .collect(),
        decoder: RefDecoder {
            proj: m.decoder.proj.iter().map(ref_linear).collect(),
            fuse: ref_linear(&m.decoder.fuse),
            head: ref_linear(&m.decoder.head),
        },
    }
}

/// Random input rounded through f32 so engine and oracle agree bit-for-bit.
pub fn shared_input(seed: u64, shape: &[usize]) -> (Tensor, Vec<f64>) {
    let n: usize = shape.iter().product();
    let f32s: Vec<f32> = randn(seed, n).iter().map(|&v| v as f32).collect();
    let f64s: Vec<f64> = f32s.iter().map(|&v| v as f64).collect();
    (Tensor::from_vec(f32s, shape), f64s)
}

pub fn max_abs_diff(got: &Tensor, want: &[f64]) -> f64 {
    got.with_data(|g| {
        assert_eq!(g.len(), want.len(), "length mismatch");
        g.iter()
            .zip(want)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0f64, f64::max)
    })
}
