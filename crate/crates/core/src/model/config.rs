use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

/// Shape parameters of the hybrid encoder/decoder network.
///
/// `encoder_channels` are the widths at 1/2 (stem), 1/4, 1/8 and 1/16 of the
/// input size; the last stage feeds the Transformer. `decoder_channels` are
/// the output widths of the four ×2 upsampling stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 4],
    pub transformer: TransformerConfig,
    #[serde(default = "default_n_skip")]
    pub n_skip: usize,
    /// Residual blocks per encoder stage (1/4, 1/8, 1/16).
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: [usize; 3],
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
}

fn default_in_channels() -> usize {
    3
}
fn default_num_classes() -> usize {
    2
}
fn default_n_skip() -> usize {
    3
}
fn default_blocks() -> [usize; 3] {
    [1, 1, 1]
}
fn default_stem_kernel() -> usize {
    7
}

impl ModelConfig {
    /// Desk-scale configuration: 64 px input, L=2, D=64, h=4.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            num_classes: 2,
            encoder_channels: [16, 32, 64, 128],
            decoder_channels: [64, 32, 16, 8],
            transformer: TransformerConfig {
                layers: 2,
                hidden: 64,
                heads: 4,
                mlp_dim: 128,
            },
            n_skip: 3,
            blocks_per_stage: [1, 1, 1],
            stem_kernel: 7,
        }
    }

    /// Full-width configuration at 512 px.
    pub fn full() -> Self {
        Self {
            input_size: 512,
            in_channels: 3,
            num_classes: 2,
            encoder_channels: [64, 256, 512, 1024],
            decoder_channels: [256, 128, 64, 16],
            transformer: TransformerConfig {
                layers: 12,
                hidden: 768,
                heads: 12,
                mlp_dim: 3072,
            },
            n_skip: 3,
            blocks_per_stage: [3, 4, 9],
            stem_kernel: 7,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / 16
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_size == 0 || self.input_size % 16 != 0 {
            problems.push(format!(
                "input_size {} must be a positive multiple of 16",
                self.input_size
            ));
        }
        let t = &self.transformer;
        if t.heads == 0 || t.hidden % t.heads != 0 {
            problems.push(format!(
                "transformer hidden {} must be divisible by heads {}",
                t.hidden, t.heads
            ));
        }
        if t.hidden == 0 || t.mlp_dim == 0 {
            problems.push("transformer hidden and mlp_dim must be positive".into());
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            problems.push("need ≥1 input channel and ≥2 classes".into());
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            problems.push("channel widths must be positive".into());
        }
        if self.n_skip > 3 {
            problems.push(format!("n_skip {} exceeds 3", self.n_skip));
        }
        if self.blocks_per_stage.contains(&0) {
            problems.push("each encoder stage needs at least one block".into());
        }
        if self.stem_kernel % 2 == 0 {
            problems.push(format!("stem_kernel {} must be odd", self.stem_kernel));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}
