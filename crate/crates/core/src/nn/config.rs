//! Model layout and the construction-time shape plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the person/clothing pair reaches the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Attention units inject `[S, O, S+O]` into the bottlenecks.
    Soft,
    /// Masks are concatenated with the image at the stem: `[S, O, R, G, B]`.
    Hard,
    /// Soft attention on the filled bounding boxes of both masks.
    Box,
    /// Image only.
    None,
}

impl AttentionMode {
    pub fn uses_units(self) -> bool {
        matches!(self, AttentionMode::Soft | AttentionMode::Box)
    }

    pub fn stem_channels_in(self) -> usize {
        if self == AttentionMode::Hard {
            5
        } else {
            3
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "box" => Ok(Self::Box),
            "none" => Ok(Self::None),
            _ => Err(Error::InvalidConfig(format!("unknown attention mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// One unit per bottleneck.
    All,
    /// A single unit on the first bottleneck.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Non-overlapping average pooling factor after the stem conv; 1 disables it.
    pub stem_pool: usize,
    /// Bottlenecks per stage.
    pub layout: Vec<usize>,
    /// Reduced (inner) width of the bottlenecks in each stage.
    pub widths: Vec<usize>,
    pub expansion: usize,
    pub attention: AttentionMode,
    pub placement: Placement,
    pub head: Vec<usize>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small backbone used for training on 64×64 synthetic scenes.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: 2,
            layout: vec![1, 1, 1],
            widths: vec![4, 8, 16],
            expansion: 4,
            attention: AttentionMode::Soft,
            placement: Placement::All,
            head: vec![256, 256],
            dropout: 0.5,
        }
    }

    fn full(layout: Vec<usize>) -> Self {
        Self {
            input_size: 224,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: 2,
            layout,
            widths: vec![64, 128, 256, 512],
            expansion: 4,
            attention: AttentionMode::Soft,
            placement: Placement::All,
            head: vec![256, 256],
            dropout: 0.5,
        }
    }

    pub fn resnet50() -> Self {
        Self::full(vec![3, 4, 6, 3])
    }

    pub fn resnet101() -> Self {
        Self::full(vec![3, 4, 23, 3])
    }

    pub fn with_attention(mut self, mode: AttentionMode, placement: Placement) -> Self {
        self.attention = mode;
        self.placement = placement;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_size == 0 {
            return bad("input size must be positive".into());
        }
        if self.layout.is_empty() || self.layout.contains(&0) {
            return bad(format!("layout {:?} needs at least one bottleneck per stage", self.layout));
        }
        if self.widths.len() != self.layout.len() {
            return bad(format!(
                "{} stage widths given for {} stages",
                self.widths.len(),
                self.layout.len()
            ));
        }
        if self.widths.contains(&0) || self.expansion == 0 || self.stem_channels == 0 {
            return bad("widths, expansion and stem channels must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 {
            return bad(format!("stem kernel {} must be odd", self.stem_kernel));
        }
        if self.stem_stride == 0 || self.stem_pool == 0 {
            return bad("stem stride and pool must be at least 1".into());
        }
        if self.head.contains(&0) {
            return bad("head widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Per-bottleneck shapes; fails when the input is too small for the layout.
    pub fn plan(&self) -> Result<BackbonePlan> {
        self.validate()?;
        let pad = self.stem_kernel / 2;
        let after_stem = conv_out(self.input_size, self.stem_kernel, self.stem_stride, pad)
            .ok_or_else(|| self.too_small("stem"))?;
        if after_stem < self.stem_pool {
            return Err(self.too_small("stem pool"));
        }
        let mut side = after_stem / self.stem_pool;
        let mut channels = self.stem_channels;
        let mut blocks = Vec::new();
        for (stage, (&count, &width)) in self.layout.iter().zip(&self.widths).enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let out_side = conv_out(side, 3, stride, 1)
                    .ok_or_else(|| self.too_small("a strided bottleneck"))?;
                let out_channels = width * self.expansion;
                let index = blocks.len();
                let attention = self.attention.uses_units()
                    && (self.placement == Placement::All || index == 0);
                blocks.push(BlockPlan {
                    stage,
                    in_channels: channels,
                    width,
                    out_channels,
                    stride,
                    in_side: side,
                    mid_side: out_side,
                    attention,
                });
                side = out_side;
                channels = out_channels;
            }
        }
        Ok(BackbonePlan {
            stem_side: after_stem,
            pooled_side: after_stem / self.stem_pool,
            blocks,
            features: channels,
        })
    }

    fn too_small(&self, at: &str) -> Error {
        Error::InvalidConfig(format!(
            "input {}×{} is too small for {at}",
            self.input_size, self.input_size
        ))
    }

    pub fn attention_unit_count(&self) -> Result<usize> {
        Ok(self.plan()?.attention_unit_count())
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub stage: usize,
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    /// Stride of the 3×3 conv.
    pub stride: usize,
    pub in_side: usize,
    /// Side of the 3×3 conv output, which the attention unit must match.
    pub mid_side: usize,
    pub attention: bool,
}

impl BlockPlan {
    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    /// `(K, H, W)` of the 3×3 conv output.
    pub fn second_conv_dims(&self) -> (usize, usize, usize) {
        (self.width, self.mid_side, self.mid_side)
    }

    /// `(K, H, W)` of the attached attention unit; resize to the target then a
    /// padded 3×3 conv.
    pub fn attention_dims(&self) -> Option<(usize, usize, usize)> {
        self.attention.then(|| {
            let (k, h, w) = self.second_conv_dims();
            (k, conv_out(h, 3, 1, 1).unwrap_or(0), conv_out(w, 3, 1, 1).unwrap_or(0))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackbonePlan {
    pub stem_side: usize,
    pub pooled_side: usize,
    pub blocks: Vec<BlockPlan>,
    /// Channels reaching global pooling.
    pub features: usize,
}

impl BackbonePlan {
    pub fn attention_unit_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.attention).count()
    }

    /// Every attention unit's output dims against its host's second conv.
    pub fn audit(&self) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(att) = b.attention_dims() {
                if att != b.second_conv_dims() {
                    return Err(Error::InvalidConfig(format!(
                        "bottleneck {i}: attention output {att:?} differs from second conv {:?}",
                        b.second_conv_dims()
                    )));
                }
            }
        }
        Ok(())
    }
}
