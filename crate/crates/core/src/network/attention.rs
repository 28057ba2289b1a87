//! Scale attention: every encoder scale is resampled to the decoder scale,
//! summed, and re-weighted per channel by a softmax across scales.

use super::blocks::{ConvNormRelu, Linear};
use crate::engine::{Graph, ParamBuilder, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::config::NetworkConfig;

/// Resampling of encoder scale `e` onto decoder scale `d`.
#[derive(Clone, Debug)]
pub enum ScaleTransform {
    Identity,
    /// Max-pool by `factor` (kernel = stride), then Conv-Norm-ReLU.
    Down { factor: usize, block: ConvNormRelu },
    /// Conv-Norm-ReLU, then trilinear upsampling by `factor`.
    Up { factor: usize, block: ConvNormRelu },
}

impl ScaleTransform {
    pub fn new(pb: &mut ParamBuilder, config: &NetworkConfig, e: usize, d: usize) -> Self {
        let name = format!("from{e}");
        let (ce, cd) = (config.width(e), config.width(d));
        match e.cmp(&d) {
            std::cmp::Ordering::Equal => ScaleTransform::Identity,
            std::cmp::Ordering::Less => ScaleTransform::Down {
                factor: 1 << (d - e),
                block: ConvNormRelu::new(pb, &name, ce, cd),
            },
            std::cmp::Ordering::Greater => ScaleTransform::Up {
                factor: 1 << (e - d),
                block: ConvNormRelu::new(pb, &name, ce, cd),
            },
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        match self {
            ScaleTransform::Identity => Ok(x),
            ScaleTransform::Down { factor, block } => {
                let p = g.max_pool(x, *factor)?;
                block.forward(g, p)
            }
            ScaleTransform::Up { factor, block } => {
                let h = block.forward(g, x)?;
                g.upsample(h, *factor)
            }
        }
    }
}

/// Every intermediate of one scale-attention evaluation.
#[derive(Clone, Debug)]
pub struct ScaleAttentionState {
    /// Resampled encoder features, one per encoder scale.
    pub transformed: Vec<Var>,
    pub pooled_sum: Var,
    /// Global average of `pooled_sum`, length `C_d`.
    pub embedding: Var,
    /// Bottleneck vector, length `C_d / r`.
    pub squeezed: Var,
    /// Per-scale sigmoid excitations before normalization.
    pub excitations: Vec<Var>,
    /// `(N, C_d)` softmax-normalized weights.
    pub weights: Var,
    pub output: Var,
}

impl ScaleAttentionState {
    /// Weights as `[scale][channel]`.
    pub fn weight_rows<F: Real>(&self, g: &Graph<'_, F>) -> Vec<Vec<F>> {
        let n = g.shape(self.weights)[0];
        let len = g.shape(self.weights)[1];
        let w = g.value(self.weights);
        (0..n).map(|e| w[e * len..(e + 1) * len].to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ScaleAttention {
    pub scale: usize,
    pub transforms: Vec<ScaleTransform>,
    pub squeeze: Linear,
    pub excite: Vec<Linear>,
}

impl ScaleAttention {
    /// Attention block for 1-based decoder scale `d`.
    pub fn new(pb: &mut ParamBuilder, config: &NetworkConfig, d: usize) -> Result<Self> {
        let n = config.attention_scales();
        if d == 0 || d > n {
            return Err(Error::config(format!("decoder scale {d} outside 1..={n}")));
        }
        let cd = config.width(d);
        if cd % config.sa_reduction != 0 {
            return Err(Error::config(format!(
                "{cd} channels not divisible by sa_reduction {}",
                config.sa_reduction
            )));
        }
        let squeezed = cd / config.sa_reduction;
        Ok(pb.scoped(format!("sa{d}"), |pb| ScaleAttention {
            scale: d,
            transforms: (1..=n).map(|e| ScaleTransform::new(pb, config, e, d)).collect(),
            squeeze: Linear::new(pb, "squeeze", cd, squeezed),
            excite: (1..=n)
                .map(|e| Linear::new(pb, &format!("excite{e}"), squeezed, cd))
                .collect(),
        }))
    }

    /// `scales` holds the encoder features `S_1..S_N`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, scales: &[Var]) -> Result<(Var, ScaleAttentionState)> {
        if scales.len() != self.transforms.len() {
            return Err(Error::shape(format!(
                "expected {} encoder scales, got {}",
                self.transforms.len(),
                scales.len()
            )));
        }
        let transformed = self
            .transforms
            .iter()
            .zip(scales)
            .map(|(t, &s)| t.forward(g, s))
            .collect::<Result<Vec<_>>>()?;
        let target = g.shape(transformed[self.scale - 1]).to_vec();
        if let Some(bad) = transformed.iter().find(|&&t| g.shape(t) != target.as_slice()) {
            return Err(Error::shape(format!(
                "transformed scale {:?} differs from {:?}",
                g.shape(*bad),
                target
            )));
        }
        let pooled_sum = g.sum(&transformed)?;
        let embedding = g.global_avg_pool(pooled_sum)?;
        let z = self.squeeze.forward(g, embedding)?;
        let squeezed = g.relu(z);
        let excitations = self
            .excite
            .iter()
            .map(|fc| {
                let a = fc.forward(g, squeezed)?;
                Ok(g.sigmoid(a))
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.stack(&excitations)?;
        let weights = g.softmax_rows(stacked)?;
        let mut weighted = Vec::with_capacity(transformed.len());
        for (e, &t) in transformed.iter().enumerate() {
            let w = g.row(weights, e)?;
            weighted.push(g.scale_channels(t, w)?);
        }
        let output = if weighted.len() == 1 { weighted[0] } else { g.sum(&weighted)? };
        Ok((
            output,
            ScaleAttentionState {
                transformed,
                pooled_sum,
                embedding,
                squeezed,
                excitations,
                weights,
                output,
            },
        ))
    }
}
