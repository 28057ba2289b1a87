//! Reverse-mode autodiff tape over `(C, D, H, W)` tensors.
//!
//! A [`Graph`] records each operation as it is evaluated. In shape-only
//! mode the same forward code runs without touching any data, which is
//! how architecture shapes at full patch size are checked cheaply.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(ParamId),
    Conv { x: usize, w: usize, b: usize, geom: ConvGeom },
    ConvT2 { x: usize, w: usize, b: usize },
    InstanceNorm { x: usize, gamma: usize, beta: usize, stats: Vec<(F, F)> },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    ScaleChannels { x: usize, gate: usize },
    GlobalAvgPool(usize),
    Linear { x: usize, w: usize, b: usize },
    Stack(Vec<usize>),
    SoftmaxRows(usize),
    Row { x: usize, index: usize },
    MaxPool { x: usize, argmax: Vec<u32> },
    Resample { x: usize, outer: usize, n: usize, inner: usize, factor: usize },
    Concat(Vec<usize>),
    Jaccard { pred: usize, target: Vec<F>, eps: F },
    Focal { pred: usize, target: Vec<F>, gamma: F },
    Sum(Vec<usize>),
    Scale { x: usize, factor: F },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, Var>,
    shape_only: bool,
    exec: Exec,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(Error::shape(format!("expected (C, D, H, W), got {shape:?}"))),
    }
}

impl<'p, F: Real> Graph<'p, F> {
    /// A computing graph. Placeholder parameter stores are rejected.
    pub fn new(params: &'p ParamStore<F>, exec: Exec) -> Result<Self> {
        if params.is_placeholder() {
            return Err(Error::config("parameter store holds shapes only"));
        }
        Ok(Self::build(params, false, exec))
    }

    /// A graph that propagates shapes only.
    pub fn shape_only(params: &'p ParamStore<F>) -> Self {
        Self::build(params, true, Exec::Sequential)
    }

    fn build(params: &'p ParamStore<F>, shape_only: bool, exec: Exec) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            shape_only,
            exec,
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(self.shape_only || value.len() == numel(&shape));
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        let value = if self.shape_only { Vec::new() } else { t.data().to_vec() };
        self.push(t.shape().to_vec(), value, Op::Input, false)
    }

    /// An input known by shape only (shape-only graphs).
    pub fn input_shape(&mut self, shape: &[usize]) -> Result<Var> {
        if !self.shape_only {
            return Err(Error::config("input_shape requires a shape-only graph"));
        }
        Ok(self.push(shape.to_vec(), Vec::new(), Op::Input, false))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let shape = self.params.spec(id).shape.clone();
        let value = if self.shape_only { Vec::new() } else { self.params.get(id).to_vec() };
        let v = self.push(shape, value, Op::Param(id), true);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value buffer of `v` (empty in shape-only graphs).
    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node value matches shape")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [cin, d, h, wd] = dims4(self.shape(x))?;
        let (cout, k) = match *self.shape(w) {
            [co, ci, k0, k1, k2] if ci == cin && k0 == k1 && k1 == k2 => (co, k0),
            ref s => {
                return Err(Error::shape(format!(
                    "conv weight {s:?} incompatible with {cin} input channels"
                )))
            }
        };
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv bias length mismatch"));
        }
        if stride > 1 && [d, h, wd].iter().any(|&n| n % stride != 0) {
            return Err(Error::shape(format!(
                "spatial dims {:?} not divisible by stride {stride}",
                [d, h, wd]
            )));
        }
        let geom = ConvGeom::new(cin, cout, k, stride, pad, [d, h, wd])?;
        let shape = vec![cout, geom.out_dims[0], geom.out_dims[1], geom.out_dims[2]];
        let value = if self.shape_only {
            Vec::new()
        } else {
            kernels::conv3d_forward(self.exec, self.value(x), self.value(w), self.value(b), &geom)
        };
        let ng = self.grad_any(&[x.0, w.0, b.0]);
        Ok(self.push(shape, value, Op::Conv { x: x.0, w: w.0, b: b.0, geom }, ng))
    }

    /// Transposed convolution, kernel 2, stride 2.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [cin, d, h, wd] = dims4(self.shape(x))?;
        let cout = match *self.shape(w) {
            [ci, co, 2, 2, 2] if ci == cin => co,
            ref s => return Err(Error::shape(format!("transpose-conv weight {s:?} incompatible"))),
        };
        if self.shape(b) != [cout] {
            return Err(Error::shape("transpose-conv bias length mismatch"));
        }
        let shape = vec![cout, 2 * d, 2 * h, 2 * wd];
        let value = if self.shape_only {
            Vec::new()
        } else {
            kernels::convt2_forward(self.exec, self.value(x), self.value(w), self.value(b), cin, cout, [d, h, wd])
        };
        let ng = self.grad_any(&[x.0, w.0, b.0]);
        Ok(self.push(shape, value, Op::ConvT2 { x: x.0, w: w.0, b: b.0 }, ng))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [c, ..] = dims4(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("instance-norm affine length mismatch"));
        }
        let shape = self.shape(x).to_vec();
        let (value, stats) = if self.shape_only {
            (Vec::new(), Vec::new())
        } else {
            kernels::instance_norm_forward(self.exec, self.value(x), self.value(gamma), self.value(beta), c)
        };
        let ng = self.grad_any(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            shape,
            value,
            Op::InstanceNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats },
            ng,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.nodes[x.0].needs_grad;
        self.push(shape, value, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(F::zero()), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| F::one() / (F::one() + (-v).exp()), Op::Sigmoid(x.0))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x: x.0, factor })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let value = self.value(a).iter().zip(self.value(b)).map(|(&u, &v)| u + v).collect();
        let ng = self.grad_any(&[a.0, b.0]);
        Ok(self.push(shape, value, Op::Add(a.0, b.0), ng))
    }

    /// Multiplies each channel of `x` by the matching entry of `gate`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [c, ..] = dims4(self.shape(x))?;
        if self.shape(gate) != [c] {
            return Err(Error::shape("channel gate length mismatch"));
        }
        let shape = self.shape(x).to_vec();
        let per = numel(&shape) / c;
        let mut value = Vec::new();
        if !self.shape_only {
            value = self.value(x).to_vec();
            let g = self.value(gate);
            self.exec.for_each_chunk_mut(&mut value, per, |ci, ch| {
                let s = g[ci];
                ch.iter_mut().for_each(|v| *v *= s);
            });
        }
        let ng = self.grad_any(&[x.0, gate.0]);
        Ok(self.push(shape, value, Op::ScaleChannels { x: x.0, gate: gate.0 }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [c, ..] = dims4(self.shape(x))?;
        let per = numel(self.shape(x)) / c;
        let value = if self.shape_only {
            Vec::new()
        } else {
            let n = F::from_usize(per).unwrap();
            self.value(x).chunks(per).map(|ch| ch.iter().copied().sum::<F>() / n).collect()
        };
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(vec![c], value, Op::GlobalAvgPool(x.0), ng))
    }

    /// `w @ x + b` for a vector `x`; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n_in = match *self.shape(x) {
            [n] => n,
            ref s => return Err(Error::shape(format!("linear expects a vector, got {s:?}"))),
        };
        let n_out = match *self.shape(w) {
            [o, i] if i == n_in => o,
            ref s => return Err(Error::shape(format!("linear weight {s:?} incompatible with {n_in}"))),
        };
        if self.shape(b) != [n_out] {
            return Err(Error::shape("linear bias length mismatch"));
        }
        let value = if self.shape_only {
            Vec::new()
        } else {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            (0..n_out)
                .map(|o| bv[o] + wv[o * n_in..(o + 1) * n_in].iter().zip(xv).map(|(&a, &b)| a * b).sum::<F>())
                .collect()
        };
        let ng = self.grad_any(&[x.0, w.0, b.0]);
        Ok(self.push(vec![n_out], value, Op::Linear { x: x.0, w: w.0, b: b.0 }, ng))
    }

    /// Stacks equal-length vectors into an `(n, len)` matrix.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let len = match *self.shape(*first) {
            [n] => n,
            ref s => return Err(Error::shape(format!("stack expects vectors, got {s:?}"))),
        };
        if xs.iter().any(|&v| self.shape(v) != [len]) {
            return Err(Error::shape("stack of unequal vectors"));
        }
        let value = xs.iter().flat_map(|&v| self.value(v).to_vec()).collect();
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.grad_any(&ids);
        Ok(self.push(vec![xs.len(), len], value, Op::Stack(ids), ng))
    }

    /// Softmax down each column of an `(n, len)` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, len) = match *self.shape(x) {
            [n, l] => (n, l),
            ref s => return Err(Error::shape(format!("softmax expects a matrix, got {s:?}"))),
        };
        let value = if self.shape_only {
            Vec::new()
        } else {
            let xv = self.value(x);
            let mut out = vec![F::zero(); n * len];
            for c in 0..len {
                let m = (0..n).map(|r| xv[r * len + c]).fold(F::neg_infinity(), F::max);
                let z: F = (0..n).map(|r| (xv[r * len + c] - m).exp()).sum();
                for r in 0..n {
                    out[r * len + c] = (xv[r * len + c] - m).exp() / z;
                }
            }
            out
        };
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(vec![n, len], value, Op::SoftmaxRows(x.0), ng))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, len) = match *self.shape(x) {
            [n, l] => (n, l),
            ref s => return Err(Error::shape(format!("row expects a matrix, got {s:?}"))),
        };
        if index >= n {
            return Err(Error::shape(format!("row {index} out of {n}")));
        }
        let value = if self.shape_only {
            Vec::new()
        } else {
            self.value(x)[index * len..(index + 1) * len].to_vec()
        };
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(vec![len], value, Op::Row { x: x.0, index }, ng))
    }

    /// Max pooling with kernel = stride = `factor`.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [c, d, h, w] = dims4(self.shape(x))?;
        if factor == 0 || [d, h, w].iter().any(|&n| n % factor != 0) {
            return Err(Error::shape(format!("dims {:?} not divisible by pool factor {factor}", [d, h, w])));
        }
        let shape = vec![c, d / factor, h / factor, w / factor];
        let (value, argmax) = if self.shape_only {
            (Vec::new(), Vec::new())
        } else {
            kernels::maxpool_forward(self.exec, self.value(x), c, [d, h, w], factor)
        };
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(shape, value, Op::MaxPool { x: x.0, argmax }, ng))
    }

    fn resample_axis(&mut self, x: Var, axis: usize, factor: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape;
        out_shape[axis] *= factor;
        let value = if self.shape_only {
            Vec::new()
        } else {
            kernels::resample_forward(self.exec, self.value(x), outer, n, inner, factor)
        };
        let ng = self.nodes[x.0].needs_grad;
        self.push(out_shape, value, Op::Resample { x: x.0, outer, n, inner, factor }, ng)
    }

    /// Trilinear upsampling by an integer factor (half-pixel centers).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        dims4(self.shape(x))?;
        if factor == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let a = self.resample_axis(x, 1, factor);
        let b = self.resample_axis(a, 2, factor);
        Ok(self.resample_axis(b, 3, factor))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let [_, d, h, w] = dims4(self.shape(*first))?;
        let mut c = 0;
        for &v in xs {
            let [ci, di, hi, wi] = dims4(self.shape(v))?;
            if [di, hi, wi] != [d, h, w] {
                return Err(Error::shape("concat of mismatched spatial dims"));
            }
            c += ci;
        }
        let value = if self.shape_only {
            Vec::new()
        } else {
            xs.iter().flat_map(|&v| self.value(v).iter().copied()).collect()
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.grad_any(&ids);
        Ok(self.push(vec![c, d, h, w], value, Op::Concat(ids), ng))
    }

    fn check_target(&self, pred: Var, target: &Tensor<F>) -> Result<()> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        Ok(())
    }

    /// Summed per-channel soft Jaccard distance.
    pub fn jaccard(&mut self, pred: Var, target: &Tensor<F>, eps: F) -> Result<Var> {
        self.check_target(pred, target)?;
        let value = if self.shape_only {
            Vec::new()
        } else {
            let c = self.shape(pred)[0];
            vec![losses::jaccard_value(self.value(pred), target.data(), c, eps)]
        };
        let ng = self.nodes[pred.0].needs_grad;
        Ok(self.push(
            vec![],
            value,
            Op::Jaccard { pred: pred.0, target: target.data().to_vec(), eps },
            ng,
        ))
    }

    /// Voxel-mean focal loss.
    pub fn focal(&mut self, pred: Var, target: &Tensor<F>, gamma: F) -> Result<Var> {
        self.check_target(pred, target)?;
        let value = if self.shape_only {
            Vec::new()
        } else {
            vec![losses::focal_value(self.value(pred), target.data(), gamma)]
        };
        let ng = self.nodes[pred.0].needs_grad;
        Ok(self.push(
            vec![],
            value,
            Op::Focal { pred: pred.0, target: target.data().to_vec(), gamma },
            ng,
        ))
    }

    /// Sum of same-shaped tensors (typically scalars).
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("sum of nothing"))?;
        let shape = self.shape(*first).to_vec();
        if xs.iter().any(|&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::shape("sum of mismatched shapes"));
        }
        let value = if self.shape_only {
            Vec::new()
        } else {
            let mut acc = vec![F::zero(); numel(&shape)];
            for &v in xs {
                acc.iter_mut().zip(self.value(v)).for_each(|(a, &b)| *a += b);
            }
            acc
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.grad_any(&ids);
        Ok(self.push(shape, value, Op::Sum(ids), ng))
    }

    /// Back-propagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.shape_only {
            return Err(Error::config("cannot differentiate a shape-only graph"));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::shape("backward requires a scalar"));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::new(self.params.len());
        let exec = self.exec;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let wants = |j: usize| self.nodes[j].needs_grad;
            let val = |j: usize| self.nodes[j].value.as_slice();
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Conv { x, w, b, geom } => {
                    let cg = kernels::conv3d_backward(exec, val(*x), val(*w), geom, &g, wants(*x));
                    accumulate(&mut grads, *w, cg.weight);
                    accumulate(&mut grads, *b, cg.bias);
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConvT2 { x, w, b } => {
                    let [cin, d, h, wd] = dims4(&self.nodes[*x].shape)?;
                    let cout = self.nodes[*b].shape[0];
                    let cg = kernels::convt2_backward(exec, val(*x), val(*w), cin, cout, [d, h, wd], &g, wants(*x));
                    accumulate(&mut grads, *w, cg.weight);
                    accumulate(&mut grads, *b, cg.bias);
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::InstanceNorm { x, gamma, beta, stats } => {
                    let ng = kernels::instance_norm_backward(exec, val(*x), val(*gamma), stats, &g);
                    accumulate(&mut grads, *x, ng.input);
                    accumulate(&mut grads, *gamma, ng.gamma);
                    accumulate(&mut grads, *beta, ng.beta);
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gv, &y)| gv * y * (F::one() - y))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale { x, factor } => {
                    let dx = g.iter().map(|&v| v * *factor).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    accumulate(&mut grads, *b, g);
                }
                Op::ScaleChannels { x, gate } => {
                    let c = self.nodes[*gate].shape[0];
                    let per = g.len() / c;
                    let gv = val(*gate);
                    let xv = val(*x);
                    let dgate: Vec<F> = exec.map_range(c, |ci| {
                        g[ci * per..(ci + 1) * per]
                            .iter()
                            .zip(&xv[ci * per..(ci + 1) * per])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    });
                    if wants(*x) {
                        let mut dx = g;
                        exec.for_each_chunk_mut(&mut dx, per, |ci, ch| {
                            let s = gv[ci];
                            ch.iter_mut().for_each(|v| *v *= s);
                        });
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *gate, dgate);
                }
                Op::GlobalAvgPool(x) => {
                    let c = g.len();
                    let per = numel(&self.nodes[*x].shape) / c;
                    let n = F::from_usize(per).unwrap();
                    let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / n, per)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let n_out = g.len();
                    let xv = val(*x);
                    let n_in = xv.len();
                    let wv = val(*w);
                    let dw = g.iter().flat_map(|&gv| xv.iter().map(move |&xi| gv * xi)).collect();
                    if wants(*x) {
                        let dx = (0..n_in)
                            .map(|i| (0..n_out).map(|o| wv[o * n_in + i] * g[o]).sum())
                            .collect();
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, g);
                }
                Op::Stack(ids) => {
                    let len = g.len() / ids.len();
                    for (r, &j) in ids.iter().enumerate() {
                        accumulate(&mut grads, j, g[r * len..(r + 1) * len].to_vec());
                    }
                }
                Op::SoftmaxRows(x) => {
                    let [n, len] = [node.shape[0], node.shape[1]];
                    let y = &node.value;
                    let mut dx = vec![F::zero(); n * len];
                    for c in 0..len {
                        let dot: F = (0..n).map(|r| g[r * len + c] * y[r * len + c]).sum();
                        for r in 0..n {
                            dx[r * len + c] = y[r * len + c] * (g[r * len + c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Row { x, index } => {
                    let mut dx = vec![F::zero(); numel(&self.nodes[*x].shape)];
                    let len = g.len();
                    dx[index * len..(index + 1) * len].copy_from_slice(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let [c, d, h, w] = dims4(&self.nodes[*x].shape)?;
                    let dx = kernels::maxpool_backward(exec, &g, argmax, c, [d, h, w]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Resample { x, outer, n, inner, factor } => {
                    let dx = kernels::resample_backward(exec, &g, *outer, *n, *inner, *factor);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(ids) => {
                    let mut start = 0;
                    for &j in ids {
                        let len = numel(&self.nodes[j].shape);
                        if wants(j) {
                            accumulate(&mut grads, j, g[start..start + len].to_vec());
                        }
                        start += len;
                    }
                }
                Op::Jaccard { pred, target, eps } => {
                    let c = self.nodes[*pred].shape[0];
                    let mut dp = losses::jaccard_grad(val(*pred), target, c, *eps);
                    dp.iter_mut().for_each(|v| *v *= g[0]);
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Focal { pred, target, gamma } => {
                    let mut dp = losses::focal_grad(val(*pred), target, *gamma);
                    dp.iter_mut().for_each(|v| *v *= g[0]);
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Sum(ids) => {
                    for &j in ids {
                        if wants(j) {
                            accumulate(&mut grads, j, g.clone());
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], idx: usize, g: Vec<F>) {
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot => *slot = Some(g),
    }
}
