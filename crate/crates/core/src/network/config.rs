use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Input modalities.
    pub in_channels: usize,
    /// Output regions (WT, TC, ET).
    pub out_channels: usize,
    /// Feature width at the finest scale.
    pub base_width: usize,
    /// Encoder resolution levels including the endpoint block.
    pub num_scales: usize,
    pub se_reduction: usize,
    pub sa_reduction: usize,
    pub patch_size: usize,
    pub deep_supervision: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            out_channels: 3,
            base_width: 24,
            num_scales: 5,
            se_reduction: 4,
            sa_reduction: 4,
            patch_size: 128,
            deep_supervision: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("in_channels and out_channels must be positive"));
        }
        if self.num_scales < 2 {
            return Err(Error::config("num_scales must be at least 2"));
        }
        if self.se_reduction == 0 || self.sa_reduction == 0 {
            return Err(Error::config("reduction ratios must be positive"));
        }
        if self.base_width == 0
            || self.base_width % self.se_reduction != 0
            || self.base_width % self.sa_reduction != 0
        {
            return Err(Error::config(format!(
                "base_width {} must be divisible by se_reduction {} and sa_reduction {}",
                self.base_width, self.se_reduction, self.sa_reduction
            )));
        }
        let factor = self.downsample_factor();
        if self.patch_size == 0 || self.patch_size % factor != 0 {
            return Err(Error::config(format!(
                "patch_size {} must be a positive multiple of {factor}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Number of attention scales N (all encoder levels but the endpoint).
    pub fn attention_scales(&self) -> usize {
        self.num_scales - 1
    }

    /// Channel width at 1-based scale `s`; scale `N + 1` is the endpoint.
    pub fn width(&self, scale: usize) -> usize {
        self.base_width << (scale - 1)
    }

    /// Total spatial reduction between the input and the endpoint.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.num_scales - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths_follow_doubling_rule() {
        let c = NetworkConfig::default();
        c.validate().unwrap();
        let widths: Vec<_> = (1..=5).map(|s| c.width(s)).collect();
        assert_eq!(widths, vec![24, 48, 96, 192, 384]);
        assert_eq!(c.attention_scales(), 4);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_width = NetworkConfig { base_width: 6, ..Default::default() };
        assert!(bad_width.validate().is_err());
        let bad_patch = NetworkConfig { patch_size: 100, ..Default::default() };
        assert!(bad_patch.validate().is_err());
    }
}
