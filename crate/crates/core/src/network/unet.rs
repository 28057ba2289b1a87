use super::blocks::{Conv3d, ResSeBlock, UpConv};
use super::config::NetworkConfig;
use super::sanet::{supervision_heads, Encoder, SupervisionHead};
use super::{check_input, HeadVars, SegmentationNet};
use crate::engine::{Graph, ParamBuilder, ParamSpec, Var};
use crate::error::Result;
use crate::tensor::Real;

/// Reference U-Net sharing the ResSE encoder: each decoder scale
/// concatenates the same-scale encoder feature with the upsampled path and
/// applies two ResSE blocks.
#[derive(Clone, Debug)]
pub struct UNet {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    pub encoder: Encoder,
    pub up: Vec<UpConv>,
    pub decoder: Vec<[ResSeBlock; 2]>,
    pub heads: Vec<SupervisionHead>,
    pub output: Conv3d,
}

impl UNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let n = config.attention_scales();
        let r = config.se_reduction;
        let mut pb = ParamBuilder::new();
        let encoder = Encoder::new(&mut pb, &config)?;
        let up = (1..=n)
            .map(|d| UpConv::new(&mut pb, &format!("decoder.up{d}"), config.width(d + 1), config.width(d)))
            .collect();
        let decoder = (1..=n)
            .map(|d| {
                let c = config.width(d);
                Ok([
                    ResSeBlock::new(&mut pb, &format!("decoder.block{d}a"), 2 * c, c, 1, r)?,
                    ResSeBlock::new(&mut pb, &format!("decoder.block{d}b"), c, c, 1, r)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = supervision_heads(&mut pb, &config);
        let output = Conv3d::new(&mut pb, "output", config.width(1), config.out_channels, 1, 1);
        Ok(UNet {
            config,
            specs: pb.finish(),
            encoder,
            up,
            decoder,
            heads,
            output,
        })
    }
}

impl SegmentationNet for UNet {
    fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, input: Var) -> Result<HeadVars> {
        check_input(&self.config, g.shape(input))?;
        let pyramid = self.encoder.forward(g, input)?;
        let n = self.config.attention_scales();
        let mut x = pyramid.endpoint;
        let mut deep = Vec::new();
        for d in (1..=n).rev() {
            let up = self.up[d - 1].forward(g, x)?;
            let cat = g.concat(&[up, pyramid.scales[d - 1]])?;
            let h = self.decoder[d - 1][0].forward(g, cat)?;
            x = self.decoder[d - 1][1].forward(g, h)?;
            if d >= 2 {
                if let Some(head) = self.heads.get(d - 2) {
                    deep.push(head.forward(g, x)?);
                }
            }
        }
        deep.reverse();
        let logits = self.output.forward(g, x)?;
        Ok(HeadVars {
            probabilities: g.sigmoid(logits),
            deep,
        })
    }
}
