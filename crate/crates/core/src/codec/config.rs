use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};

/// Residual block arrangement inside the embedder and the extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockPattern {
    /// Alternating dilated residual and dilated gated blocks.
    DrDg,
    DrOnly,
    DgOnly,
    /// Undilated two-layer convolution blocks without gating.
    PlainConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Dr,
    Dg,
    Plain,
}

impl BlockPattern {
    pub fn kind(self, index: usize) -> BlockKind {
        match self {
            BlockPattern::DrDg if index.is_multiple_of(2) => BlockKind::Dr,
            BlockPattern::DrDg => BlockKind::Dg,
            BlockPattern::DrOnly => BlockKind::Dr,
            BlockPattern::DgOnly => BlockKind::Dg,
            BlockPattern::PlainConv => BlockKind::Plain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_bits: usize,
    pub pattern_len: usize,
    /// Channels of the expanded message feature.
    pub c_w: usize,
    /// Channels of the carrier feature.
    pub c_v: usize,
    /// Width of the residual trunk.
    pub hidden: usize,
    pub n_blocks: usize,
    /// Dilation per block, cycled when shorter than `n_blocks`.
    pub dilation_schedule: Vec<usize>,
    pub block_pattern: BlockPattern,
    /// Square kernel size of every spectrogram convolution.
    pub kernel_size: usize,
    /// Channels of the first discriminator layer.
    pub disc_width: usize,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_bits: 32,
            pattern_len: 8,
            c_w: 32,
            c_v: 32,
            hidden: 32,
            n_blocks: 8,
            dilation_schedule: vec![1, 2, 4, 8],
            block_pattern: BlockPattern::DrDg,
            kernel_size: 3,
            disc_width: 16,
            stft: StftConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale training runs.
    pub fn toy(n_bits: usize, pattern_len: usize) -> Self {
        Self {
            n_bits,
            pattern_len,
            c_w: 4,
            c_v: 4,
            hidden: 8,
            n_blocks: 4,
            disc_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let positive = [
            ("n_bits", self.n_bits),
            ("c_w", self.c_w),
            ("c_v", self.c_v),
            ("hidden", self.hidden),
            ("disc_width", self.disc_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.pattern_len > self.n_bits {
            return Err(Error::Config(format!(
                "pattern_len {} exceeds n_bits {}",
                self.pattern_len, self.n_bits
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.n_blocks > 0 && self.dilation_schedule.is_empty() {
            return Err(Error::Config("dilation_schedule is empty".into()));
        }
        if self.dilation_schedule.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        Ok(())
    }

    /// Dilation used by block `index` after the plain-conv override.
    pub fn dilation(&self, index: usize) -> usize {
        match self.block_pattern {
            BlockPattern::PlainConv => 1,
            _ => self.dilation_schedule[index % self.dilation_schedule.len()],
        }
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_and_patterns() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let d: Vec<usize> = (0..8).map(|i| c.dilation(i)).collect();
        assert_eq!(d, vec![1, 2, 4, 8, 1, 2, 4, 8]);
        let plain = ModelConfig {
            block_pattern: BlockPattern::PlainConv,
            ..c.clone()
        };
        assert!((0..8).all(|i| plain.dilation(i) == 1));
        assert_eq!(BlockPattern::DrDg.kind(0), BlockKind::Dr);
        assert_eq!(BlockPattern::DrDg.kind(1), BlockKind::Dg);
        let bad = ModelConfig {
            dilation_schedule: vec![1, 0],
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn serde_round_trip() {
        let c = ModelConfig::toy(16, 4);
        let s = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
