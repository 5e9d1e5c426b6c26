use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One decoder whose classifier emits `c_out * classes` channels.
    SingleBranch,
    /// One decoder branch per output slice.
    MultiBranch,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_branch" => Ok(Variant::SingleBranch),
            "multi_branch" => Ok(Variant::MultiBranch),
            other => Err(Error::Config(format!("unknown decoder variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SingleBranch => "single_branch",
            Variant::MultiBranch => "multi_branch",
        })
    }
}

/// Architecture hyper-parameters.
///
/// Encoder widths are `base_channels` for the stem and 2x, 4x, 8x that for
/// the three downsampling blocks. The low-level tap has `2 * base_channels`
/// channels at 1/4 resolution; the high-level tap has `aspp_channels` at 1/16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input slices per stack (odd).
    pub c_in: usize,
    /// Predicted central slices, always `c_in - 2`.
    pub c_out: usize,
    pub base_channels: usize,
    /// Residual blocks at 1/16 resolution between the last downsampling block
    /// and ASPP.
    pub middle_blocks: usize,
    /// Dilation rates of the ASPP branches; rate 1 is a 1x1 convolution.
    pub aspp_rates: Vec<usize>,
    pub aspp_image_pooling: bool,
    pub aspp_channels: usize,
    pub low_level_channels_reduced: usize,
    pub decoder_channels: usize,
    pub variant: Variant,
    pub use_sab: bool,
    pub classes: usize,
    /// Channel multiplier of the single-branch decoder.
    pub width_multiplier: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_in: 5,
            c_out: 3,
            base_channels: 16,
            middle_blocks: 8,
            aspp_rates: vec![1, 2, 4],
            aspp_image_pooling: true,
            aspp_channels: 64,
            low_level_channels_reduced: 24,
            decoder_channels: 32,
            variant: Variant::MultiBranch,
            use_sab: true,
            classes: 3,
            width_multiplier: 1,
        }
    }
}

impl ModelConfig {
    /// Multi-branch decoder for `c_in` input slices.
    pub fn multi_branch(c_in: usize, use_sab: bool) -> Self {
        ModelConfig {
            c_in,
            c_out: c_in.saturating_sub(2),
            use_sab,
            ..Default::default()
        }
    }

    /// Single-branch decoder with `width_multiplier` times the branch widths.
    pub fn single_branch(c_in: usize, width_multiplier: usize) -> Self {
        ModelConfig {
            c_in,
            c_out: c_in.saturating_sub(2),
            variant: Variant::SingleBranch,
            use_sab: false,
            width_multiplier,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.c_in < 3 || self.c_in % 2 == 0 {
            return bad(format!("c_in must be odd and at least 3, got {}", self.c_in));
        }
        if self.c_out + 2 != self.c_in {
            return bad(format!("c_out must equal c_in - 2 = {}, got {}", self.c_in - 2, self.c_out));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad(format!("ASPP rates must be non-empty and positive, got {:?}", self.aspp_rates));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("aspp_channels", self.aspp_channels),
            ("low_level_channels_reduced", self.low_level_channels_reduced),
            ("decoder_channels", self.decoder_channels),
            ("width_multiplier", self.width_multiplier),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.classes < 2 {
            return bad(format!("at least two classes are needed, got {}", self.classes));
        }
        match self.variant {
            Variant::SingleBranch if self.use_sab => {
                return bad("the attention block requires the multi-branch decoder".into())
            }
            Variant::MultiBranch if self.width_multiplier != 1 => {
                return bad("width_multiplier applies to the single-branch decoder only".into())
            }
            _ => {}
        }
        if self.use_sab {
            for (name, c) in [
                ("low_level_channels_reduced", self.low_level_channels_reduced),
                ("aspp_channels", self.aspp_channels),
            ] {
                if c % 8 != 0 {
                    return bad(format!("{name} = {c} must be divisible by 8 for the attention block"));
                }
            }
        }
        Ok(())
    }

    pub fn low_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub fn deep_channels(&self) -> usize {
        8 * self.base_channels
    }
}
