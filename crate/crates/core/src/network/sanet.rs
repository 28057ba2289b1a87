use super::attention::{ScaleAttention, ScaleAttentionState};
use super::blocks::{Conv3d, ResSeBlock, UpConv};
use super::config::NetworkConfig;
use super::{check_input, FeaturePyramid, HeadVars, SegmentationNet};
use crate::engine::{Graph, ParamBuilder, ParamSpec, Var};
use crate::error::Result;
use crate::tensor::Real;

/// Shared ResSE encoder: one block at scale 1, two blocks (the first
/// strided) at scales 2..N, and a single strided block at the endpoint.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub scales: Vec<Vec<ResSeBlock>>,
    pub endpoint: ResSeBlock,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, config: &NetworkConfig) -> Result<Self> {
        let n = config.attention_scales();
        let r = config.se_reduction;
        pb.push_scope("encoder");
        let built = (|| {
            let mut scales = Vec::with_capacity(n);
            for s in 1..=n {
                let blocks = if s == 1 {
                    vec![ResSeBlock::new(pb, "s1.block1", config.in_channels, config.width(1), 1, r)?]
                } else {
                    vec![
                        ResSeBlock::new(pb, &format!("s{s}.block1"), config.width(s - 1), config.width(s), 2, r)?,
                        ResSeBlock::new(pb, &format!("s{s}.block2"), config.width(s), config.width(s), 1, r)?,
                    ]
                };
                scales.push(blocks);
            }
            let endpoint = ResSeBlock::new(pb, "endpoint", config.width(n), config.width(n + 1), 2, r)?;
            Ok(Encoder { scales, endpoint })
        })();
        pb.pop_scope();
        built
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, input: Var) -> Result<FeaturePyramid> {
        let mut x = input;
        let mut scales = Vec::with_capacity(self.scales.len());
        for blocks in &self.scales {
            for b in blocks {
                x = b.forward(g, x)?;
            }
            scales.push(x);
        }
        let endpoint = self.endpoint.forward(g, x)?;
        Ok(FeaturePyramid { scales, endpoint })
    }
}

/// Deep-supervision head: 1x1x1 conv, trilinear upsampling to full
/// resolution, sigmoid.
#[derive(Clone, Debug)]
pub struct SupervisionHead {
    pub conv: Conv3d,
    pub factor: usize,
}

impl SupervisionHead {
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = g.upsample(h, self.factor)?;
        Ok(g.sigmoid(h))
    }
}

pub(super) fn supervision_heads(pb: &mut ParamBuilder, config: &NetworkConfig) -> Vec<SupervisionHead> {
    if !config.deep_supervision {
        return Vec::new();
    }
    (2..=config.attention_scales())
        .map(|d| SupervisionHead {
            conv: Conv3d::new(pb, &format!("ds{d}"), config.width(d), config.out_channels, 1, 1),
            factor: 1 << (d - 1),
        })
        .collect()
}

/// Scale-attention encoder-decoder.
#[derive(Clone, Debug)]
pub struct SaNet {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    pub encoder: Encoder,
    /// Indexed by decoder scale `d - 1`.
    pub attention: Vec<ScaleAttention>,
    pub up: Vec<UpConv>,
    pub decoder: Vec<ResSeBlock>,
    /// Heads for decoder scales `2..=N`, in ascending order.
    pub heads: Vec<SupervisionHead>,
    pub output: Conv3d,
}

/// Decoder outputs plus the scale-attention intermediates, ordered by
/// decoder scale `d = 1..N`.
#[derive(Clone, Debug)]
pub struct SaNetTrace {
    pub heads: HeadVars,
    pub pyramid: FeaturePyramid,
    pub attention: Vec<ScaleAttentionState>,
}

impl SaNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let n = config.attention_scales();
        let mut pb = ParamBuilder::new();
        let encoder = Encoder::new(&mut pb, &config)?;
        let attention = (1..=n)
            .map(|d| ScaleAttention::new(&mut pb, &config, d))
            .collect::<Result<Vec<_>>>()?;
        let up = (1..=n)
            .map(|d| UpConv::new(&mut pb, &format!("decoder.up{d}"), config.width(d + 1), config.width(d)))
            .collect();
        let decoder = (1..=n)
            .map(|d| {
                ResSeBlock::new(
                    &mut pb,
                    &format!("decoder.block{d}"),
                    config.width(d),
                    config.width(d),
                    1,
                    config.se_reduction,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = supervision_heads(&mut pb, &config);
        let output = Conv3d::new(&mut pb, "output", config.width(1), config.out_channels, 1, 1);
        Ok(SaNet {
            config,
            specs: pb.finish(),
            encoder,
            attention,
            up,
            decoder,
            heads,
            output,
        })
    }

    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, input: Var) -> Result<FeaturePyramid> {
        check_input(&self.config, g.shape(input))?;
        self.encoder.forward(g, input)
    }

    pub fn decode<F: Real>(&self, g: &mut Graph<'_, F>, pyramid: &FeaturePyramid) -> Result<(HeadVars, Vec<ScaleAttentionState>)> {
        let n = self.config.attention_scales();
        let mut states = Vec::with_capacity(n);
        let mut deep = Vec::with_capacity(self.heads.len());
        let mut x = pyramid.endpoint;
        for d in (1..=n).rev() {
            let up = self.up[d - 1].forward(g, x)?;
            let (fused, state) = self.attention[d - 1].forward(g, &pyramid.scales)?;
            let merged = g.add(up, fused)?;
            x = self.decoder[d - 1].forward(g, merged)?;
            if d >= 2 {
                if let Some(head) = self.heads.get(d - 2) {
                    deep.push(head.forward(g, x)?);
                }
            }
            states.push(state);
        }
        states.reverse();
        deep.reverse();
        let logits = self.output.forward(g, x)?;
        let probabilities = g.sigmoid(logits);
        Ok((HeadVars { probabilities, deep }, states))
    }

    pub fn forward_traced<F: Real>(&self, g: &mut Graph<'_, F>, input: Var) -> Result<SaNetTrace> {
        let pyramid = self.encode(g, input)?;
        let (heads, attention) = self.decode(g, &pyramid)?;
        Ok(SaNetTrace {
            heads,
            pyramid,
            attention,
        })
    }
}

impl SegmentationNet for SaNet {
    fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, input: Var) -> Result<HeadVars> {
        Ok(self.forward_traced(g, input)?.heads)
    }
}
