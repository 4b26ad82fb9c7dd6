use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::Backend;
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geometry: ConvGeometry,
    },
    AvgPool {
        x: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Softmax {
        x: usize,
    },
    TopKMixture {
        scores: usize,
        logits: usize,
        branches: Vec<Tensor<T>>,
        weights: Vec<T>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        s: T,
    },
    Concat {
        xs: Vec<usize>,
    },
    Slice {
        x: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    GlobalAvg {
        x: usize,
    },
    WeightedSum {
        xs: Vec<usize>,
        w: usize,
    },
    PixelShuffle {
        x: usize,
        factor: usize,
    },
    PixelUnshuffle {
        x: usize,
        factor: usize,
    },
    L1 {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear recording of one forward pass.
///
/// Nodes are appended in evaluation order; [`Tape::backward`] walks them in
/// reverse, visiting each once.
pub struct Tape<'a, T: Real> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<'a, T>>,
    param_nodes: Vec<Option<usize>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    leaves: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<Option<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`] or [`Backend::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|n| self.leaves[n].as_ref())
    }

    /// Per-parameter gradients indexed by [`ParamId`]; unused parameters are `None`.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        self.param_nodes
            .iter()
            .map(|n| n.and_then(|n| self.leaves[n].take()))
            .collect()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    /// A tape whose [`Backend::param`] reads from `store`.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    /// A tape without a parameter store; use [`Tape::leaf`] for inputs.
    pub fn standalone() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    /// Records an owned tensor that gradients are requested for.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Recorded value of `v`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.v(v.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn v(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.v(root.0);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(rv.shape().to_vec()));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaves[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            leaves,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let send = |grads: &mut [Option<Tensor<T>>], to: usize, t: Tensor<T>| {
            if !self.nodes[to].requires_grad {
                return;
            }
            match &mut grads[to] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, geometry } => {
                let (gx, gw, gb) = ops::conv2d_backward(
                    self.v(x),
                    self.v(w),
                    b.is_some_and(|b| self.needs(b)),
                    geometry,
                    g,
                    self.needs(x),
                    self.needs(w),
                );
                if let Some(gx) = gx {
                    send(grads, x, gx);
                }
                if let Some(gw) = gw {
                    send(grads, w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    send(grads, b, gb);
                }
            }
            &Op::AvgPool {
                x,
                kernel,
                stride,
                padding,
            } => {
                let gx = ops::avg_pool2d_backward(self.v(x).shape(), kernel, stride, padding, g);
                send(grads, x, gx);
            }
            &Op::MatMul { a, b, transpose_b } => {
                let (ga, gb) =
                    ops::matmul_backward(self.v(a), self.v(b), transpose_b, g, self.needs(a), self.needs(b));
                if let Some(ga) = ga {
                    send(grads, a, ga);
                }
                if let Some(gb) = gb {
                    send(grads, b, gb);
                }
            }
            &Op::Softmax { x } => {
                let y = self.v(i);
                let mut acc = vec![T::ZERO; y.len()];
                ops::softmax_rows_backward(y, g, &mut acc);
                send(grads, x, Tensor::new(y.shape().to_vec(), acc).expect("shape"));
            }
            Op::TopKMixture {
                scores,
                logits,
                branches,
                weights,
            } => {
                let (gs, gl) = ops::top_k_mixture_backward(branches, weights, g);
                send(grads, *scores, gs);
                let shape = self.v(*logits).shape().to_vec();
                send(grads, *logits, gl.reshape(shape).expect("logit shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (gx, gg, gb) = ops::layer_norm_backward(self.v(*x), self.v(*gamma), mean, rstd, g);
                send(grads, *x, gx);
                send(grads, *gamma, gg);
                send(grads, *beta, gb);
            }
            &Op::Relu { x } => {
                let xv = self.v(x);
                let mut gx = g.clone();
                for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::ZERO {
                        *d = T::ZERO;
                    }
                }
                send(grads, x, gx);
            }
            &Op::Add { a, b } => {
                send(grads, a, g.clone());
                send(grads, b, g.clone());
            }
            &Op::Scale { x, s } => send(grads, x, ops::scale(g, s)),
            Op::Concat { xs } => {
                let mut start = 0;
                for &x in xs {
                    let c = self.v(x).shape()[0];
                    if self.needs(x) {
                        send(grads, x, ops::slice_channels(g, start, c).expect("slice"));
                    }
                    start += c;
                }
            }
            &Op::Slice { x, start } => {
                let xv = self.v(x);
                let plane: usize = xv.shape()[1..].iter().product();
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                gx.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                send(grads, x, gx);
            }
            &Op::Reshape { x } => {
                let shape = self.v(x).shape().to_vec();
                send(grads, x, g.clone().reshape(shape).expect("reshape"));
            }
            &Op::GlobalAvg { x } => {
                let xv = self.v(x);
                let plane: usize = xv.shape()[1..].iter().product();
                let inv = T::ONE / T::from_usize(plane);
                let gx = Tensor::from_fn(xv.shape().to_vec(), |k| g.data()[k / plane] * inv);
                send(grads, x, gx);
            }
            Op::WeightedSum { xs, w } => {
                let wv = self.v(*w).data();
                let mut gw = vec![T::ZERO; xs.len()];
                for (k, &x) in xs.iter().enumerate() {
                    if self.needs(x) {
                        send(grads, x, ops::scale(g, wv[k]));
                    }
                    gw[k] = self
                        .v(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .fold(T::ZERO, |s, (&a, &b)| s + a * b);
                }
                let shape = self.v(*w).shape().to_vec();
                send(grads, *w, Tensor::new(shape, gw).expect("weights"));
            }
            &Op::PixelShuffle { x, factor } => {
                send(grads, x, ops::pixel_unshuffle(g, factor).expect("shape"));
            }
            &Op::PixelUnshuffle { x, factor } => {
                send(grads, x, ops::pixel_shuffle(g, factor).expect("shape"));
            }
            &Op::L1 { a, b } => {
                let (av, bv) = (self.v(a), self.v(b));
                let scale = g.data()[0] / T::from_usize(av.len().max(1));
                let ga = Tensor::from_fn(av.shape().to_vec(), |k| {
                    let d = av.data()[k] - bv.data()[k];
                    if d > T::ZERO {
                        scale
                    } else if d < T::ZERO {
                        -scale
                    } else {
                        T::ZERO
                    }
                });
                if self.needs(b) {
                    send(grads, b, ga.map(|v| -v));
                }
                send(grads, a, ga);
            }
            &Op::Sum { x } => {
                let shape = self.v(x).shape().to_vec();
                send(grads, x, Tensor::full(shape, g.data()[0]));
            }
        }
    }
}

impl<'a, T: Real> Backend<T> for Tape<'a, T> {
    type Var = Var;

    fn shape<'s>(&'s self, v: &'s Var) -> &'s [usize] {
        self.v(v.0).shape()
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var(n);
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, true);
        self.param_nodes[id.0] = Some(v.0);
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    fn conv2d(&mut self, x: &Var, weight: &Var, bias: Option<&Var>, geometry: ConvGeometry) -> Result<Var> {
        let out = ops::conv2d(self.v(x.0), self.v(weight.0), bias.map(|b| self.v(b.0)), geometry)?;
        let mut inputs = vec![x.0, weight.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.op(
            out,
            Op::Conv2d {
                x: x.0,
                w: weight.0,
                b: bias.map(|b| b.0),
                geometry,
            },
            &inputs,
        ))
    }

    fn avg_pool2d(&mut self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.v(x.0), kernel, stride, padding)?;
        Ok(self.op(
            out,
            Op::AvgPool {
                x: x.0,
                kernel,
                stride,
                padding,
            },
            &[x.0],
        ))
    }

    fn matmul(&mut self, a: &Var, b: &Var, transpose_b: bool) -> Result<Var> {
        let out = ops::matmul_ex(self.v(a.0), self.v(b.0), false, transpose_b)?;
        Ok(self.op(
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                transpose_b,
            },
            &[a.0, b.0],
        ))
    }

    fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let out = ops::softmax_rows(self.v(x.0))?;
        Ok(self.op(out, Op::Softmax { x: x.0 }, &[x.0]))
    }

    fn top_k_mixture(&mut self, scores: &Var, logits: &Var, ks: &[usize]) -> Result<Var> {
        let f = ops::top_k_mixture(self.v(scores.0), self.v(logits.0), ks)?;
        Ok(self.op(
            f.mixed,
            Op::TopKMixture {
                scores: scores.0,
                logits: logits.0,
                branches: f.branches,
                weights: f.weights,
            },
            &[scores.0, logits.0],
        ))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: T) -> Result<Var> {
        let f = ops::layer_norm_forward(self.v(x.0), self.v(gamma.0), self.v(beta.0), eps)?;
        Ok(self.op(
            f.out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: f.mean,
                rstd: f.rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = ops::relu(self.v(x.0));
        self.op(out, Op::Relu { x: x.0 }, &[x.0])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::add(self.v(a.0), self.v(b.0))?;
        Ok(self.op(out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn scale(&mut self, x: &Var, s: T) -> Var {
        let out = ops::scale(self.v(x.0), s);
        self.op(out, Op::Scale { x: x.0, s }, &[x.0])
    }

    fn concat_channels(&mut self, xs: &[&Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| self.v(v.0)).collect();
        let out = ops::concat_channels(&refs)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let op = Op::Concat { xs: ids.clone() };
        Ok(self.op(out, op, &ids))
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.v(x.0), start, len)?;
        Ok(self.op(out, Op::Slice { x: x.0, start }, &[x.0]))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.v(x.0).clone().reshape(shape)?;
        Ok(self.op(out, Op::Reshape { x: x.0 }, &[x.0]))
    }

    fn global_avg_channels(&mut self, x: &Var) -> Result<Var> {
        let out = ops::global_avg_channels(self.v(x.0))?;
        Ok(self.op(out, Op::GlobalAvg { x: x.0 }, &[x.0]))
    }

    fn weighted_sum(&mut self, xs: &[&Var], weights: &Var) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| self.v(v.0)).collect();
        let out = ops::weighted_sum(&refs, self.v(weights.0))?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let mut inputs = ids.clone();
        inputs.push(weights.0);
        Ok(self.op(
            out,
            Op::WeightedSum {
                xs: ids,
                w: weights.0,
            },
            &inputs,
        ))
    }

    fn pixel_shuffle(&mut self, x: &Var, factor: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.v(x.0), factor)?;
        Ok(self.op(out, Op::PixelShuffle { x: x.0, factor }, &[x.0]))
    }

    fn pixel_unshuffle(&mut self, x: &Var, factor: usize) -> Result<Var> {
        let out = ops::pixel_unshuffle(self.v(x.0), factor)?;
        Ok(self.op(out, Op::PixelUnshuffle { x: x.0, factor }, &[x.0]))
    }

    fn l1_loss(&mut self, pred: &Var, target: &Var) -> Result<Var> {
        let v = ops::l1_loss(self.v(pred.0), self.v(target.0))?;
        Ok(self.op(
            Tensor::scalar(v),
            Op::L1 {
                a: pred.0,
                b: target.0,
            },
            &[pred.0, target.0],
        ))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let v = ops::sum(self.v(x.0));
        self.op(Tensor::scalar(v), Op::Sum { x: x.0 }, &[x.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::standalone();
        let x = t.leaf(Tensor::from_fn([2, 3], |i| i as f64));
        let s = t.sum(&x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn relu_subgradient_at_negative_input() {
        let mut t = Tape::<f64>::standalone();
        let x = t.leaf(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        let r = t.relu(&x);
        let s = t.sum(&r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::<f32>::standalone();
        let x = t.leaf(Tensor::zeros([2]));
        let y = t.relu(&x);
        assert_eq!(t.backward(y).unwrap_err(), Error::NonScalarRoot(vec![2]));
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut t = Tape::<f64>::standalone();
        let x = t.leaf(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap());
        let y = t.add(&x, &x).unwrap();
        let s = t.sum(&y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::standalone();
        let x = t.leaf(Tensor::ones([2]));
        let c = t.constant(Tensor::ones([2]));
        let y = t.add(&x, &c).unwrap();
        let s = t.sum(&y);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(c).is_none());
        assert!(g.wrt(x).is_some());
    }
}
