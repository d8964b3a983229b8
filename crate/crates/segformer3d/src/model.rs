//! The full SegFormer3D model: a four-stage hierarchical encoder over the
//! 1/4, 1/8, 1/16, 1/32 resolution ladder, fused by an all-MLP decoder into
//! per-voxel class logits at the input resolution.

use crate::blocks::{Block, Linear, ParamInit, PatchEmbed, TokenSeq};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};
use serde::{Deserialize, Serialize};

pub const NUM_STAGES: usize = 4;
/// Product of the four patch-embed strides: every input extent must divide it.
pub const MIN_DIVISOR: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub reductions: Vec<usize>,
    pub expansion: usize,
    pub decoder_width: usize,
    pub patch_kernels: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub patch_pads: Vec<usize>,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// The reference configuration: widths and heads sized to land on the
    /// published ~4.5M-parameter budget.
    pub fn reference() -> Self {
        ModelConfig {
            in_channels: 4,
            num_classes: 4,
            widths: vec![32, 64, 160, 256],
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 5, 8],
            reductions: vec![4, 2, 1, 1],
            expansion: 4,
            decoder_width: 256,
            patch_kernels: vec![7, 3, 3, 3],
            patch_strides: vec![4, 2, 2, 2],
            patch_pads: vec![3, 1, 1, 1],
            ln_eps: 1e-6,
        }
    }

    /// A deliberately small configuration for oracle tests.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 2,
            num_classes: 3,
            widths: vec![4, 6, 8, 10],
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 2, 2, 2],
            reductions: vec![4, 2, 1, 1],
            expansion: 2,
            decoder_width: 8,
            patch_kernels: vec![7, 3, 3, 3],
            patch_strides: vec![4, 2, 2, 2],
            patch_pads: vec![3, 1, 1, 1],
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_len = |name: &str, len: usize| {
            if len != NUM_STAGES {
                Err(Error::Config(format!("{name} must have {NUM_STAGES} entries, got {len}")))
            } else {
                Ok(())
            }
        };
        check_len("widths", self.widths.len())?;
        check_len("depths", self.depths.len())?;
        check_len("heads", self.heads.len())?;
        check_len("reductions", self.reductions.len())?;
        check_len("patch_kernels", self.patch_kernels.len())?;
        check_len("patch_strides", self.patch_strides.len())?;
        check_len("patch_pads", self.patch_pads.len())?;
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.expansion == 0 || self.decoder_width == 0 {
            return Err(Error::Config("expansion and decoder_width must be positive".into()));
        }
        for i in 0..NUM_STAGES {
            if self.widths[i] == 0 || self.depths[i] == 0 {
                return Err(Error::Config(format!("stage {} has zero width or depth", i + 1)));
            }
            if self.heads[i] == 0 || self.widths[i] % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {} not divisible by heads {}",
                    i + 1,
                    self.widths[i],
                    self.heads[i]
                )));
            }
            if self.reductions[i] == 0 {
                return Err(Error::Config(format!("stage {} reduction must be >= 1", i + 1)));
            }
            if self.patch_strides[i] == 0 {
                return Err(Error::Config(format!("stage {} stride must be >= 1", i + 1)));
            }
            // The overlap property that makes the patching "overlapped".
            if self.patch_kernels[i] <= self.patch_strides[i] {
                return Err(Error::Config(format!(
                    "stage {} kernel {} must exceed stride {} (overlapped patching)",
                    i + 1,
                    self.patch_kernels[i],
                    self.patch_strides[i]
                )));
            }
        }
        Ok(())
    }

    /// Feature-grid extent per stage for a cubic input extent.
    pub fn stage_extents(&self, input: usize) -> Vec<usize> {
        let mut ext = input;
        (0..NUM_STAGES)
            .map(|i| {
                ext = (ext + 2 * self.patch_pads[i] - self.patch_kernels[i]) / self.patch_strides[i] + 1;
                ext
            })
            .collect()
    }
}

pub struct Stage {
    pub patch: PatchEmbed,
    pub blocks: Vec<Block>,
    pub norm: crate::blocks::LayerNorm,
    pub width: usize,
}

impl Stage {
    pub fn forward(&self, x: &Tensor) -> Result<TokenSeq> {
        let seq = self.patch.forward(x)?;
        let mut tokens = seq.tokens;
        for block in &self.blocks {
            tokens = block.forward(&tokens, seq.grid)?;
        }
        Ok(TokenSeq { tokens: self.norm.forward(&tokens)?, grid: seq.grid })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.patch.collect_params(&format!("{prefix}.patch"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{i}"), out);
        }
        self.norm.collect_params(&format!("{prefix}.norm"), out);
    }
}

/// All-MLP decoder: project every stage to a common width, upsample to the
/// stage-1 grid, concatenate (deepest stage first), fuse, project to class
/// logits, and upsample ×4 back to the input resolution. Raw logits out.
pub struct Decoder {
    pub proj: Vec<Linear>,
    pub fuse: Linear,
    pub head: Linear,
}

impl Decoder {
    pub fn forward(&self, feats: &[TokenSeq]) -> Result<Tensor> {
        if feats.len() != NUM_STAGES {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {NUM_STAGES} stage features, got {}",
                feats.len()
            )));
        }
        let g1 = feats[0].grid;
        let bsz = feats[0].tokens.shape()[0];
        let mut upsampled = Vec::with_capacity(NUM_STAGES);
        for (i, feat) in feats.iter().enumerate() {
            if feat.tokens.shape()[0] != bsz {
                return Err(Error::ShapeMismatch(format!(
                    "stage {} batch {} != stage 1 batch {bsz}",
                    i + 1,
                    feat.tokens.shape()[0]
                )));
            }
            let p = self.proj[i].forward(&feat.tokens)?;
            let vol = ops::tokens_to_vol(&p, feat.grid)?;
            let s = g1.0 / feat.grid.0.max(1);
            let scaled = (feat.grid.0 * s, feat.grid.1 * s, feat.grid.2 * s);
            if s == 0 || scaled != g1 {
                return Err(Error::ShapeMismatch(format!(
                    "stage {} grid {:?} does not scale onto stage-1 grid {g1:?}",
                    i + 1,
                    feat.grid
                )));
            }
            upsampled.push(if s == 1 { vol } else { ops::trilinear_up(&vol, s)? });
        }
        let refs: Vec<&Tensor> = upsampled.iter().rev().collect();
        let cat = ops::concat_channels(&refs)?;
        let tokens = ops::vol_to_tokens(&cat)?;
        let fused = self.fuse.forward(&tokens)?;
        let logits = self.head.forward(&fused)?;
        let vol = ops::tokens_to_vol(&logits, g1)?;
        ops::trilinear_up(&vol, 4)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, p) in self.proj.iter().enumerate() {
            p.collect_params(&format!("{prefix}.proj{}", i + 1), out);
        }
        self.fuse.collect_params(&format!("{prefix}.fuse"), out);
        self.head.collect_params(&format!("{prefix}.head"), out);
    }
}

pub struct Model {
    pub stages: Vec<Stage>,
    pub decoder: Decoder,
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut init = ParamInit::new(seed);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = config.in_channels;
        for i in 0..NUM_STAGES {
            let c = config.widths[i];
            let patch = PatchEmbed::new(
                &mut init,
                cin,
                c,
                config.patch_kernels[i],
                config.patch_strides[i],
                config.patch_pads[i],
                config.ln_eps,
            );
            let blocks = (0..config.depths[i])
                .map(|_| {
                    Block::new(
                        &mut init,
                        c,
                        config.heads[i],
                        config.reductions[i],
                        config.expansion,
                        config.ln_eps,
                    )
                })
                .collect();
            stages.push(Stage {
                patch,
                blocks,
                norm: crate::blocks::LayerNorm::new(c, config.ln_eps),
                width: c,
            });
            cin = c;
        }
        let decoder = Decoder {
            proj: (0..NUM_STAGES)
                .map(|i| Linear::new(&mut init, config.widths[i], config.decoder_width))
                .collect(),
            fuse: Linear::new(&mut init, NUM_STAGES * config.decoder_width, config.decoder_width),
            head: Linear::new(&mut init, config.decoder_width, config.num_classes),
        };
        Ok(Model { stages, decoder, config })
    }

    /// Run the four encoder stages, returning each stage's normalized tokens
    /// with its grid.
    pub fn encoder_forward(&self, x: &Tensor) -> Result<Vec<TokenSeq>> {
        let dims = match x.shape() {
            [_, c, d, h, w] if *c == self.config.in_channels => (*d, *h, *w),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "encoder expects [B, {}, D, H, W], got {s:?}",
                    self.config.in_channels
                )))
            }
        };
        for ext in [dims.0, dims.1, dims.2] {
            if ext == 0 || ext % MIN_DIVISOR != 0 {
                return Err(Error::IndivisibleExtent { extent: ext, required: MIN_DIVISOR });
            }
        }
        let mut feats = Vec::with_capacity(NUM_STAGES);
        let mut vol = x.clone();
        for stage in &self.stages {
            let seq = stage.forward(&vol)?;
            vol = ops::tokens_to_vol(&seq.tokens, seq.grid)?;
            feats.push(seq);
        }
        Ok(feats)
    }

    pub fn decoder_forward(&self, feats: &[TokenSeq]) -> Result<Tensor> {
        self.decoder.forward(feats)
    }

    /// Full forward pass: [B, Cin, D, H, W] → logits [B, num_classes, D, H, W].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.encoder_forward(x)?;
        self.decoder_forward(&feats)
    }

    /// Every trainable parameter with a stable hierarchical name, in a fixed
    /// registration order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect_params(&format!("stage{}", i + 1), &mut out);
        }
        self.decoder.collect_params("decoder", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}
