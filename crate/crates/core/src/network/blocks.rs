//! Convolutional building blocks: conv, instance norm, squeeze-and-excitation
//! and the residual SE block.

use crate::engine::{Graph, Init, ParamBuilder, ParamId, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv3d {
    /// Same-padded convolution (`pad = kernel / 2`).
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        pb.scoped(name, |pb| Conv3d {
            weight: pb.add(
                "weight",
                &[cout, cin, kernel, kernel, kernel],
                Init::HeNormal { fan_in: cin * kernel.pow(3) },
            ),
            bias: pb.add("bias", &[cout], Init::Zeros),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv3d(x, w, b, self.stride, self.kernel / 2)
    }
}

/// Transposed convolution, kernel 2 and stride 2.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        pb.scoped(name, |pb| UpConv {
            weight: pb.add("weight", &[cin, cout, 2, 2, 2], Init::HeNormal { fan_in: cin }),
            bias: pb.add("bias", &[cout], Init::Zeros),
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        pb.scoped(name, |pb| InstanceNorm {
            gamma: pb.add("gamma", &[channels], Init::Ones),
            beta: pb.add("beta", &[channels], Init::Zeros),
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.instance_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, n_in: usize, n_out: usize) -> Self {
        pb.scoped(name, |pb| Linear {
            weight: pb.add("weight", &[n_out, n_in], Init::HeNormal { fan_in: n_in }),
            bias: pb.add("bias", &[n_out], Init::Zeros),
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

/// 3x3x3 convolution followed by instance norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

impl ConvNormRelu {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        pb.scoped(name, |pb| ConvNormRelu {
            conv: Conv3d::new(pb, "conv", cin, cout, 3, 1),
            norm: InstanceNorm::new(pb, "norm", cout),
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        Ok(g.relu(h))
    }
}

/// Channel gating: global average pool, bottleneck FC + ReLU, expansion
/// FC + sigmoid, per-channel rescale.
#[derive(Clone, Debug)]
pub struct SeModule {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
    pub bottleneck: usize,
}

impl SeModule {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "{channels} channels not divisible by reduction ratio {reduction}"
            )));
        }
        let bottleneck = channels / reduction;
        Ok(pb.scoped(name, |pb| SeModule {
            squeeze: Linear::new(pb, "squeeze", channels, bottleneck),
            excite: Linear::new(pb, "excite", bottleneck, channels),
            channels,
            bottleneck,
        }))
    }

    /// Returns the gated features and the gate vector.
    pub fn forward_with_gate<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<(Var, Var)> {
        let pooled = g.global_avg_pool(x)?;
        let z = self.squeeze.forward(g, pooled)?;
        let z = g.relu(z);
        let e = self.excite.forward(g, z)?;
        let gate = g.sigmoid(e);
        Ok((g.scale_channels(x, gate)?, gate))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        Ok(self.forward_with_gate(g, x)?.0)
    }
}

/// Residual block of two Conv-Norm-ReLU layers with an SE gate on the
/// branch; a strided 1x1x1 projection aligns the skip path when the width
/// or resolution changes.
#[derive(Clone, Debug)]
pub struct ResSeBlock {
    pub conv1: Conv3d,
    pub norm1: InstanceNorm,
    pub conv2: Conv3d,
    pub norm2: InstanceNorm,
    pub se: SeModule,
    pub projection: Option<Conv3d>,
    pub stride: usize,
}

impl ResSeBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        reduction: usize,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("stride must be 1 or 2, got {stride}")));
        }
        pb.push_scope(name);
        let block = (|| {
            Ok(ResSeBlock {
                conv1: Conv3d::new(pb, "conv1", cin, cout, 3, stride),
                norm1: InstanceNorm::new(pb, "norm1", cout),
                conv2: Conv3d::new(pb, "conv2", cout, cout, 3, 1),
                norm2: InstanceNorm::new(pb, "norm2", cout),
                se: SeModule::new(pb, "se", cout, reduction)?,
                projection: (cin != cout || stride != 1).then(|| Conv3d::new(pb, "proj", cin, cout, 1, stride)),
                stride,
            })
        })();
        pb.pop_scope();
        block
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.norm1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.relu(h);
        let h = self.se.forward(g, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamStore;
    use crate::exec::Exec;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn se_preserves_shape_and_shrinks_magnitudes() {
        let mut pb = ParamBuilder::new();
        let se = SeModule::new(&mut pb, "se", 24, 4).unwrap();
        assert_eq!(se.bottleneck, 6);
        let params = ParamStore::<f64>::init(&pb.finish(), &mut ChaCha8Rng::seed_from_u64(1));
        let x = random_input(&[24, 4, 4, 4], 2);
        let mut g = Graph::new(&params, Exec::Sequential).unwrap();
        let xv = g.input(&x);
        let (y, gate) = se.forward_with_gate(&mut g, xv).unwrap();
        assert_eq!(g.shape(y), &[24, 4, 4, 4]);
        assert!(g.value(gate).iter().all(|&s| s > 0.0 && s < 1.0));
        for (a, b) in g.value(y).iter().zip(x.data()) {
            assert!(a.abs() <= b.abs());
        }
        let zeros = Tensor::<f64>::zeros(&[24, 2, 2, 2]);
        let zv = g.input(&zeros);
        let z = se.forward(&mut g, zv).unwrap();
        assert!(g.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        let mut pb = ParamBuilder::new();
        assert!(matches!(SeModule::new(&mut pb, "se", 10, 4), Err(Error::Config(_))));
    }

    #[test]
    fn res_se_block_shapes() {
        let mut pb = ParamBuilder::new();
        let down = ResSeBlock::new(&mut pb, "down", 24, 48, 2, 4).unwrap();
        let same = ResSeBlock::new(&mut pb, "same", 48, 48, 1, 4).unwrap();
        assert!(same.projection.is_none());
        let params = ParamStore::<f32>::placeholder(&pb.finish());
        let mut g = Graph::shape_only(&params);
        let x = g.input_shape(&[24, 128, 128, 128]).unwrap();
        let y = down.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[48, 64, 64, 64]);
        let z = same.forward(&mut g, y).unwrap();
        assert_eq!(g.shape(z), &[48, 64, 64, 64]);
        let odd = g.input_shape(&[24, 7, 8, 8]).unwrap();
        assert!(matches!(down.forward(&mut g, odd), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_branch_reduces_to_projected_skip() {
        let mut pb = ParamBuilder::new();
        let block = ResSeBlock::new(&mut pb, "b", 4, 8, 2, 4).unwrap();
        let mut params = ParamStore::<f64>::init(&pb.finish(), &mut ChaCha8Rng::seed_from_u64(3));
        for id in [block.conv1.weight, block.conv1.bias, block.conv2.weight, block.conv2.bias] {
            params.get_mut(id).fill(0.0);
        }
        let x = random_input(&[4, 4, 4, 4], 4);
        let mut g = Graph::new(&params, Exec::Sequential).unwrap();
        let xv = g.input(&x);
        let y = block.forward(&mut g, xv).unwrap();
        let proj = block.projection.as_ref().unwrap().forward(&mut g, xv).unwrap();
        let skip = g.relu(proj);
        assert_eq!(g.value(y), g.value(skip));
    }
}
