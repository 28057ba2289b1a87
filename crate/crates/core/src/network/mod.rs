//! Scale-attention network, its building blocks, and the U-Net baseline.

mod attention;
mod blocks;
pub mod checkpoint;
mod config;
mod sanet;
mod unet;

pub use attention::{ScaleAttention, ScaleAttentionState, ScaleTransform};
pub use blocks::{Conv3d, ConvNormRelu, InstanceNorm, Linear, ResSeBlock, SeModule, UpConv};
pub use config::NetworkConfig;
pub use sanet::{Encoder, SaNet, SaNetTrace, SupervisionHead};
pub use unet::UNet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Graph, ParamSpec, ParamStore, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{Real, Tensor};

/// Encoder outputs `S_1..S_N` and the endpoint feature.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub scales: Vec<Var>,
    pub endpoint: Var,
}

/// Graph nodes of the network heads.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub probabilities: Var,
    /// Deep-supervision probabilities for decoder scales `2..=N`.
    pub deep: Vec<Var>,
}

impl HeadVars {
    /// Main head first, then deep-supervision heads.
    pub fn all(&self) -> Vec<Var> {
        std::iter::once(self.probabilities).chain(self.deep.iter().copied()).collect()
    }
}

pub trait SegmentationNet: Send + Sync {
    fn config(&self) -> &NetworkConfig;
    fn param_specs(&self) -> &[ParamSpec];
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, input: Var) -> Result<HeadVars>;

    fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }
}

pub(crate) fn check_input(config: &NetworkConfig, shape: &[usize]) -> Result<()> {
    let factor = config.downsample_factor();
    match *shape {
        [c, d, h, w] if c == config.in_channels => {
            if [d, h, w].iter().any(|&n| n == 0 || n % factor != 0) {
                return Err(Error::shape(format!(
                    "spatial dims {:?} must be positive multiples of {factor}",
                    [d, h, w]
                )));
            }
            Ok(())
        }
        _ => Err(Error::shape(format!(
            "expected input ({}, D, H, W), got {shape:?}",
            config.in_channels
        ))),
    }
}

/// Exact number of trainable scalars of the scale-attention network.
pub fn parameter_count(config: &NetworkConfig) -> Result<usize> {
    Ok(SaNet::new(config.clone())?.parameter_count())
}

/// Exact number of trainable scalars of the concatenation U-Net baseline.
pub fn unet_parameter_count(config: &NetworkConfig) -> Result<usize> {
    Ok(UNet::new(config.clone())?.parameter_count())
}

/// Probability volumes produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<F> {
    /// `(out_channels, D, H, W)`, channels ordered WT, TC, ET.
    pub probabilities: Tensor<F>,
    pub ds_probabilities: Vec<Tensor<F>>,
}

impl<F: Real> ModelOutput<F> {
    pub fn heads(&self) -> Vec<&Tensor<F>> {
        std::iter::once(&self.probabilities).chain(&self.ds_probabilities).collect()
    }
}

/// A network together with its weights.
#[derive(Clone, Debug)]
pub struct Model<N = SaNet, F: Real = f32> {
    pub net: N,
    pub params: ParamStore<F>,
    pub exec: Exec,
}

impl<N: SegmentationNet, F: Real> Model<N, F> {
    pub fn new(net: N, params: ParamStore<F>) -> Result<Self> {
        if params.specs() != net.param_specs() {
            return Err(Error::Checkpoint("weights do not match the network layout".into()));
        }
        Ok(Model {
            net,
            params,
            exec: Exec::default(),
        })
    }

    /// Freshly initialized weights drawn from `seed`.
    pub fn init(net: N, seed: u64) -> Self {
        let params = ParamStore::init(net.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed));
        Model {
            net,
            params,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &NetworkConfig {
        self.net.config()
    }

    pub fn forward(&self, input: &Tensor<F>) -> Result<ModelOutput<F>> {
        let mut g = Graph::new(&self.params, self.exec)?;
        let x = g.input(input);
        let heads = self.net.forward(&mut g, x)?;
        Ok(ModelOutput {
            probabilities: g.tensor(heads.probabilities),
            ds_probabilities: heads.deep.iter().map(|&v| g.tensor(v)).collect(),
        })
    }
}
