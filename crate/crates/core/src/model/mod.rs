//! The context-attention encoder-decoder.
//!
//! Five encoder stages of width `C * 2^(s-1)` with 2x2 max pooling between them
//! (stage 5 is the bottleneck), four decoder stages that upsample with a stride-2
//! transposed convolution and concatenate the matching encoder output, a 1x1
//! head producing full-resolution logits, and 1x1 auxiliary heads on decoder
//! stages 4, 3 and 2.

mod blocks;
mod config;
mod params;

pub use blocks::{Block, ContextAttention, DualConvBlock, ResBlock};
pub use config::{BlockKind, ModelConfig, RESBLOCKS_PER_STAGE, STAGES};
pub use params::{
    Conv, ConvTranspose, Forward, Mode, Norm, NormState, Param, ParamSet, BN_EPS, BN_MOMENTUM,
};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Scalar, Var};

/// Spatial extents must be divisible by this (four pooling halvings).
pub const INPUT_DIVISOR: usize = 1 << (STAGES - 1);

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    blocks: Vec<Block>,
    attention: Option<ContextAttention>,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    stage: usize,
    up: ConvTranspose,
    blocks: Vec<Block>,
    attention: Option<ContextAttention>,
    aux: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: Conv,
}

/// Everything a forward pass leaves behind on its graph.
#[derive(Debug)]
pub struct ForwardPass<T> {
    /// Full-resolution logits `[B, 1, H, W]`.
    pub main: Var,
    /// Logits at 1/8, 1/4 and 1/2 resolution, or empty when aux heads are off.
    pub aux: Vec<Var>,
    /// The bound parameter leaves, in `ParamSet` order.
    pub param_vars: Vec<Var>,
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
    pub attention_maps: Vec<Var>,
}

fn stage_blocks<T: Scalar>(
    p: &mut ParamSet<T>,
    cfg: &ModelConfig,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> Vec<Block> {
    match cfg.block_type {
        BlockKind::Residual => (0..RESBLOCKS_PER_STAGE)
            .map(|i| {
                let c = if i == 0 { cin } else { cout };
                Block::Residual(ResBlock::new(p, &format!("{prefix}.res{i}"), c, cout, cfg.use_batch_norm))
            })
            .collect(),
        BlockKind::DualConv => vec![Block::DualConv(DualConvBlock::new(
            p,
            &format!("{prefix}.dual"),
            cin,
            cout,
            cfg.use_batch_norm,
        ))],
    }
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut p = ParamSet::new(cfg.seed);
        let mut encoder = Vec::with_capacity(STAGES);
        let mut cin = cfg.input_channels;
        for s in 1..=STAGES {
            let c = cfg.stage_channels(s);
            let prefix = format!("enc{s}");
            let blocks = stage_blocks(&mut p, &cfg, &prefix, cin, c);
            let attention = cfg
                .attention_stages
                .contains(&s)
                .then(|| ContextAttention::new(&mut p, &format!("{prefix}.attn"), c, cfg.reduced(c)));
            encoder.push(EncoderStage { blocks, attention });
            cin = c;
        }
        let mut decoder = Vec::with_capacity(STAGES - 1);
        for s in (1..STAGES).rev() {
            let c = cfg.stage_channels(s);
            let prefix = format!("dec{s}");
            let up = p.conv_transpose(&format!("{prefix}.up"), cfg.stage_channels(s + 1), c, 2);
            let blocks = stage_blocks(&mut p, &cfg, &prefix, 2 * c, c);
            let attention = (cfg.decoder_attention && cfg.attention_stages.contains(&s))
                .then(|| ContextAttention::new(&mut p, &format!("{prefix}.attn"), c, cfg.reduced(c)));
            let aux = (cfg.aux_heads && s >= 2).then(|| p.conv(&format!("{prefix}.aux"), c, 1, 1, 0, true));
            decoder.push(DecoderStage {
                stage: s,
                up,
                blocks,
                attention,
                aux,
            });
        }
        let head = p.conv("head", cfg.base_channels, 1, 1, 0, true);
        Ok(Self {
            config: cfg,
            params: p,
            encoder,
            decoder,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[b, c, h, w] => [b, c, h, w],
            _ => return Err(Error::shape("model_forward", "rank", format!("expected [B, C, H, W], got {shape:?}"))),
        };
        if c != self.config.input_channels {
            return Err(Error::shape(
                "model_forward",
                "axis 1 (channels)",
                format!("model expects {} input channels, got {c}", self.config.input_channels),
            ));
        }
        for (axis, v) in [("axis 2 (height)", h), ("axis 3 (width)", w)] {
            if v < INPUT_DIVISOR || v % INPUT_DIVISOR != 0 {
                return Err(Error::shape(
                    "model_forward",
                    axis,
                    format!("extent {v} must be a positive multiple of {INPUT_DIVISOR}"),
                ));
            }
        }
        Ok(())
    }

    /// Records the network on `g`. Parameters are bound as fresh leaves, so
    /// concurrent passes over distinct graphs only read `self`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<ForwardPass<T>> {
        self.check_input(g.shape(input))?;
        let vars = self.params.bind(g);
        let mut f = Forward::new(g, &self.params, &vars, mode);

        let mut skips = Vec::with_capacity(STAGES - 1);
        let mut x = input;
        for (i, stage) in self.encoder.iter().enumerate() {
            for b in &stage.blocks {
                x = b.forward(&mut f, x)?;
            }
            if let Some(a) = &stage.attention {
                x = a.forward(&mut f, x)?;
            }
            if i + 1 < STAGES {
                skips.push(x);
                x = f.graph.maxpool2d(x, 2, 2)?;
            }
        }
        let mut aux = Vec::new();
        for stage in &self.decoder {
            let up = stage.up.forward(&mut f, x)?;
            let skip = skips[stage.stage - 1];
            x = f.graph.concat_channels(skip, up)?;
            for b in &stage.blocks {
                x = b.forward(&mut f, x)?;
            }
            if let Some(a) = &stage.attention {
                x = a.forward(&mut f, x)?;
            }
            if let Some(h) = &stage.aux {
                aux.push(h.forward(&mut f, x)?);
            }
        }
        let main = self.head.forward(&mut f, x)?;
        let Forward {
            batch_stats,
            attention_maps,
            ..
        } = f;
        Ok(ForwardPass {
            main,
            aux,
            param_vars: vars,
            batch_stats,
            attention_maps,
        })
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }

    pub fn accumulate_grads(&mut self, g: &Graph<T>, pass: &ForwardPass<T>) {
        self.params.accumulate_grads(g, &pass.param_vars);
    }

    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>) {
        self.params.update_running_stats(&pass.batch_stats);
    }
}
