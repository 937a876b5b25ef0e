use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub const STAGES: usize = 5;
pub const RESBLOCKS_PER_STAGE: usize = 3;

/// Convolutional unit used inside every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Three residual blocks per stage.
    Residual,
    /// One plain conv-norm-relu-conv-norm-relu block per stage (the vanilla UNet).
    DualConv,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Residual => "res_block",
            BlockKind::DualConv => "dual_conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "res_block" => Ok(BlockKind::Residual),
            "dual_conv" => Ok(BlockKind::DualConv),
            _ => Err(Error::Config(format!(
                "block_type must be res_block or dual_conv, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of stage 1; stage `s` has `base_channels * 2^(s-1)` channels.
    pub base_channels: usize,
    /// Encoder stages (1-based) followed by a context attention block.
    pub attention_stages: BTreeSet<usize>,
    /// Channel reduction inside attention blocks, clamped so widths stay >= 1.
    pub attention_reduction: usize,
    pub use_batch_norm: bool,
    pub aux_heads: bool,
    pub input_channels: usize,
    pub seed: u64,
    pub block_type: BlockKind,
    /// Also attach attention to decoder stages listed in `attention_stages`.
    pub decoder_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            attention_stages: [3, 4, 5].into_iter().collect(),
            attention_reduction: 16,
            use_batch_norm: true,
            aux_heads: true,
            input_channels: 1,
            seed: 0,
            block_type: BlockKind::Residual,
            decoder_attention: false,
        }
    }
}

impl ModelConfig {
    pub fn desk_scale() -> Self {
        Self {
            base_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.attention_reduction == 0 {
            return Err(Error::Config("attention_reduction must be positive".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if let Some(&s) = self.attention_stages.iter().find(|&&s| !(1..=STAGES).contains(&s)) {
            return Err(Error::Config(format!(
                "attention_stages must be a subset of 1..={STAGES}, got stage {s}"
            )));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    pub fn reduced(&self, channels: usize) -> usize {
        (channels / self.attention_reduction).max(1)
    }
}
