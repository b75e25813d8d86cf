use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Guards the norm product in [`Graph::cosine_sim_map`].
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    ChannelMean {
        input: Var,
    },
    CosineSim {
        t: Var,
        a: Var,
        norm_t: f64,
        norm_a: f64,
        denom: f64,
        clamped: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Select {
        input: Var,
        index: usize,
    },
    Sum {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Affine {
        input: Var,
        mul: f64,
    },
    Reshape {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    keep_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so a node's inputs always precede
/// it and a single reverse sweep visits every node at most once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn expect_ndim(op: &'static str, t: &Tensor, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::dim(op, "rank", ndim, format!("{:?}", t.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it takes part in differentiation when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.clear_grad();
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient accumulated for `var` by previous [`Graph::backward`] calls.
    /// Available for leaves that require grad and for nodes passed to
    /// [`Graph::retain_grad`].
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].grad.as_deref()
    }

    /// Keeps the adjoint of an interior node after backward.
    pub fn retain_grad(&mut self, var: Var) {
        self.nodes[var.0].keep_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// The recorded value with its accumulated gradient attached.
    pub fn tensor_with_grad(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        let mut t = node.value.clone().with_requires_grad(node.requires_grad);
        if let Some(g) = &node.grad {
            t.accumulate_grad(g).expect("gradient shape matches value");
        }
        t
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, keep_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            keep_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let w = self.value(kernels);
        let b = self.value(bias);
        expect_ndim(OP, x, 3)?;
        expect_ndim(OP, w, 4)?;
        expect_ndim(OP, b, 1)?;
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc_in, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc_in != c_in {
            return Err(Error::dim(OP, "kernel input channels", c_in, wc_in));
        }
        if k != k2 {
            return Err(Error::dim(OP, "kernel width", k, k2));
        }
        if k % 2 == 0 {
            return Err(Error::dim(OP, "kernel size", "odd", k));
        }
        if b.shape()[0] != c_out {
            return Err(Error::dim(OP, "bias length", c_out, b.shape()[0]));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let out_extent = |axis: &str, n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < k || (padded - k) % stride != 0 {
                return Err(Error::dim(
                    OP,
                    axis,
                    format!("(n + 2*{pad} - {k}) divisible by {stride}"),
                    n,
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let h_out = out_extent("height", h)?;
        let w_out = out_extent("width", wd)?;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let cols = kernels::im2col(x.data(), &geom);
        let out = kernels::conv2d_forward(w.data(), b.data(), &cols, &geom);
        let requires_grad = self.any_grad(&[input, kernels, bias]);
        let value = Tensor::new(vec![c_out, h_out, w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            },
            requires_grad,
            false,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu { input }, rg, false)
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let x = self.value(input);
        expect_ndim(OP, x, 3)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if k == 0 || stride == 0 {
            return Err(Error::Parameter("maxpool2d window and stride must be >= 1".into()));
        }
        if k > h {
            return Err(Error::dim(OP, "height", format!(">= window {k}"), h));
        }
        if k > w {
            return Err(Error::dim(OP, "width", format!(">= window {k}"), w));
        }
        let (out, argmax, h_out, w_out) = kernels::maxpool_forward(x.data(), (c, h, w), k, stride);
        let value = Tensor::new(vec![c, h_out, w_out], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg, false))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        expect_ndim(OP, x, 1)?;
        expect_ndim(OP, w, 2)?;
        expect_ndim(OP, b, 1)?;
        let (c, d) = (w.shape()[0], w.shape()[1]);
        if x.numel() != d {
            return Err(Error::dim(OP, "input features", d, x.numel()));
        }
        if b.numel() != c {
            return Err(Error::dim(OP, "bias length", c, b.numel()));
        }
        let out = w
            .data()
            .chunks_exact(d)
            .zip(b.data())
            .map(|(row, bv)| kernels::dot(row, x.data()) + bv)
            .collect();
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
            false,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_ndim("global_avg_pool", x, 3)?;
        let plane = x.shape()[1] * x.shape()[2];
        if plane == 0 {
            return Err(Error::dim("global_avg_pool", "spatial size", ">= 1", 0));
        }
        let out = x
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::from_vec(out), Op::GlobalAvgPool { input }, rg, false))
    }

    /// Mean over the leading (channel) axis: `[n, h, w] -> [h, w]`.
    pub fn channel_mean(&mut self, features: Var) -> Result<Var> {
        const OP: &str = "channel_mean";
        let x = self.value(features);
        expect_ndim(OP, x, 3)?;
        let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if n == 0 {
            return Err(Error::dim(OP, "channel", ">= 1", 0));
        }
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ch in x.data().chunks_exact(plane) {
            out.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.any_grad(&[features]);
        Ok(self.push(
            Tensor::new(vec![h, w], out)?,
            Op::ChannelMean { input: features },
            rg,
            false,
        ))
    }

    /// `sum(t * a) / max(|t| |a|, eps)` as a scalar.
    pub fn cosine_sim_map(&mut self, t: Var, a: Var, eps: f64) -> Result<Var> {
        const OP: &str = "cosine_sim_map";
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!("{OP}: eps must be > 0, got {eps}")));
        }
        let tv = self.value(t);
        let av = self.value(a);
        if tv.shape() != av.shape() {
            return Err(Error::dim(
                OP,
                "map shape",
                format!("{:?}", tv.shape()),
                format!("{:?}", av.shape()),
            ));
        }
        let dot = kernels::dot(tv.data(), av.data());
        let norm_t = kernels::sum_sq(tv.data()).sqrt();
        let norm_a = kernels::sum_sq(av.data()).sqrt();
        let product = norm_t * norm_a;
        let clamped = product < eps;
        let denom = if clamped { eps } else { product };
        let rg = self.any_grad(&[t, a]);
        Ok(self.push(
            Tensor::scalar(dot / denom),
            Op::CosineSim {
                t,
                a,
                norm_t,
                norm_a,
                denom,
                clamped,
            },
            rg,
            false,
        ))
    }

    /// `-log softmax(logits)[target]`, stabilised by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        expect_ndim("softmax_cross_entropy", z, 1)?;
        if target >= z.numel() {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: target,
                len: z.numel(),
            });
        }
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = max + total.ln() - z.data()[target];
        let probs = exps.iter().map(|e| e / total).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
            false,
        ))
    }

    /// One element of a tensor as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        if index >= x.numel() {
            return Err(Error::Index {
                op: "select",
                index,
                len: x.numel(),
            });
        }
        let v = x.data()[index];
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(v), Op::Select { input, index }, rg, false))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg, false)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.shape() != b.shape() {
            return Err(Error::dim(
                "add",
                "shape",
                format!("{:?}", a.shape()),
                format!("{:?}", b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(value, Op::Add { lhs, rhs }, rg, false))
    }

    /// Elementwise `mul * x + offset`.
    pub fn affine(&mut self, input: Var, mul: f64, offset: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| mul * v + offset).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Affine { input, mul }, rg, false)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg, false))
    }

    /// Reverse sweep from a scalar root. Gradients add onto whatever earlier
    /// calls left behind; use [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.keep_grad {
                accumulate_owned(&mut node.grad, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => {
                let need = [wants(*input), wants(*kernels), wants(*bias)];
                let grads = kernels::conv2d_backward(
                    g,
                    self.value(*kernels).data(),
                    cols,
                    geom,
                    need,
                );
                if let Some(dx) = grads.input {
                    accumulate_owned(&mut adj[input.0], dx);
                }
                if let Some(dw) = grads.kernels {
                    accumulate_owned(&mut adj[kernels.0], dw);
                }
                if let Some(db) = grads.bias {
                    accumulate_owned(&mut adj[bias.0], db);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                    .collect();
                accumulate_owned(&mut adj[input.0], dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (&src, &u) in argmax.iter().zip(g) {
                    dx[src] += u;
                }
                accumulate_owned(&mut adj[input.0], dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let d = x.len();
                if wants(*input) {
                    let mut dx = vec![0.0; d];
                    for (row, &u) in w.chunks_exact(d).zip(g) {
                        dx.iter_mut().zip(row).for_each(|(o, wv)| *o += wv * u);
                    }
                    accumulate_owned(&mut adj[input.0], dx);
                }
                if wants(*weight) {
                    let mut dw = Vec::with_capacity(w.len());
                    for &u in g {
                        dw.extend(x.iter().map(|xv| u * xv));
                    }
                    accumulate_owned(&mut adj[weight.0], dw);
                }
                if wants(*bias) {
                    accumulate(&mut adj[bias.0], g);
                }
            }
            Op::GlobalAvgPool { input } => {
                let shape = self.value(*input).shape();
                let plane = shape[1] * shape[2];
                let mut dx = Vec::with_capacity(shape[0] * plane);
                for &u in g {
                    dx.extend(std::iter::repeat_n(u / plane as f64, plane));
                }
                accumulate_owned(&mut adj[input.0], dx);
            }
            Op::ChannelMean { input } => {
                let n = self.value(*input).shape()[0];
                let share: Vec<f64> = g.iter().map(|u| u / n as f64).collect();
                let mut dx = Vec::with_capacity(n * share.len());
                for _ in 0..n {
                    dx.extend_from_slice(&share);
                }
                accumulate_owned(&mut adj[input.0], dx);
            }
            Op::CosineSim {
                t,
                a,
                norm_t,
                norm_a,
                denom,
                clamped,
            } => {
                let u = g[0];
                let tv = self.value(*t).data();
                let av = self.value(*a).data();
                let r = self.nodes[i].value.data()[0];
                // dR/dt = a/D - R t/|t|^2 while the denominator is the norm product.
                let grad_for = |own: &[f64], other: &[f64], own_norm: f64| -> Vec<f64> {
                    own.iter()
                        .zip(other)
                        .map(|(&x, &y)| {
                            let mut d = y / denom;
                            if !clamped {
                                d -= r * x / (own_norm * own_norm);
                            }
                            u * d
                        })
                        .collect()
                };
                if wants(*t) {
                    accumulate_owned(&mut adj[t.0], grad_for(tv, av, *norm_t));
                }
                if wants(*a) {
                    accumulate_owned(&mut adj[a.0], grad_for(av, tv, *norm_a));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let u = g[0];
                let dz: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| u * (p - if j == *target { 1.0 } else { 0.0 }))
                    .collect();
                accumulate_owned(&mut adj[logits.0], dz);
            }
            Op::Select { input, index } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                dx[*index] = g[0];
                accumulate_owned(&mut adj[input.0], dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                accumulate_owned(&mut adj[input.0], vec![g[0]; n]);
            }
            Op::Add { lhs, rhs } => {
                if wants(*lhs) {
                    accumulate(&mut adj[lhs.0], g);
                }
                if wants(*rhs) {
                    accumulate(&mut adj[rhs.0], g);
                }
            }
            Op::Affine { input, mul } => {
                let dx = g.iter().map(|u| mul * u).collect();
                accumulate_owned(&mut adj[input.0], dx);
            }
            Op::Reshape { input } => accumulate(&mut adj[input.0], g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 3]));
        let w = g.leaf(t(&[1, 1, 3, 3], &[0.3, -1., 2., 4., 5., 6., 7., 8., 9.]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = g.leaf(t(&[1, 3, 4], &data));
        let w = g.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 4]);
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_all_ones_kernel_sums_patch() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[45.0]);
    }

    #[test]
    fn conv_names_offending_axis() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[1]));
        match g.conv2d(x, w, b, 1, 1) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "kernel input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let w = g.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        match g.conv2d(x, w, b, 2, 0) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "height"),
            other => panic!("unexpected {other:?}"),
        }
        let w = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]).with_requires_grad(true));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.0]).with_requires_grad(true));
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);

        let mut g = Graph::new();
        let pos = Tensor::from_vec(vec![0.1, 3.0, 7.5]);
        let x = g.leaf(pos.clone());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), pos.data());
    }

    #[test]
    fn maxpool_basics() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 2], &[1., 2., 3., 4.]).with_requires_grad(true));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0., 0., 0., 1.]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 4, 4], 0.7).with_requires_grad(true));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
        let s = g.sum(y);
        g.backward(s).unwrap();
        // Ties route to the first element of each window.
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx[1], 0.0);
        assert_eq!(gx[4], 0.0);
        assert_eq!(gx[2], 1.0);
        assert_eq!(gx.iter().sum::<f64>(), 8.0);

        let x = g.leaf(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(g.maxpool2d(x, 3, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let w = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(Tensor::from_vec(vec![1.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[12.0]);

        let eye = g.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let zb = g.leaf(Tensor::zeros(&[2]));
        let y = g.linear(x, eye, zb).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let zw = g.leaf(Tensor::zeros(&[2, 2]));
        let bias = g.leaf(Tensor::from_vec(vec![-1.5, 2.5]));
        let y = g.linear(x, zw, bias).unwrap();
        assert_eq!(g.value(y).data(), &[-1.5, 2.5]);

        let bad = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.linear(x, bad, zb), Err(Error::Dimension { .. })));
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2, 2], &[0., 2., 4., 6., 5., 5., 5., 5.]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        let z = g.leaf(Tensor::zeros(&[3, 2, 2]));
        let y = g.global_avg_pool(z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn channel_mean_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2, 2], &[1., 3., 2., 4., 3., 1., 4., 2.]));
        let y = g.channel_mean(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[2., 2., 3., 3.]);

        let one = t(&[1, 2, 2], &[0.5, -1., 7., 2.]);
        let x = g.leaf(one.clone());
        let y = g.channel_mean(x).unwrap();
        assert_eq!(g.value(y).data(), one.data());

        let z = g.leaf(Tensor::zeros(&[4, 3, 3]));
        let y = g.channel_mean(z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let empty = g.leaf(Tensor::zeros(&[0, 2, 2]));
        assert!(matches!(g.channel_mean(empty), Err(Error::Dimension { .. })));
    }

    fn cosine(tv: &[f64], av: &[f64]) -> f64 {
        let mut g = Graph::new();
        let tt = g.leaf(t(&[2, 2], tv));
        let aa = g.leaf(t(&[2, 2], av));
        let r = g.cosine_sim_map(tt, aa, COSINE_EPS).unwrap();
        g.value(r).item().unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.2, 0.9, 0.0, 3.0], &[0.2, 0.9, 0.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1., 0., 0., 0.], &[0., 0., 0., 1.]), 0.0);
        assert!((cosine(&[1., 1., 1., 1.], &[1., 0., 0., 0.]) - 0.5).abs() < 1e-12);
        // Zero target stays finite.
        assert_eq!(cosine(&[1., 1., 1., 1.], &[0.; 4]), 0.0);
    }

    #[test]
    fn cosine_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.cosine_sim_map(a, b, COSINE_EPS),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cosine_self_similarity_is_stationary() {
        let mut g = Graph::new();
        let x = t(&[2, 2], &[0.3, 0.8, 0.1, 0.5]);
        let tt = g.leaf(x.clone().with_requires_grad(true));
        let aa = g.constant(x);
        let r = g.cosine_sim_map(tt, aa, COSINE_EPS).unwrap();
        g.backward(r).unwrap();
        assert!(g.grad(tt).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |z: &[f64], y: usize| {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::from_vec(z.to_vec()));
            let v = g.softmax_cross_entropy(l, y).unwrap();
            g.value(v).item().unwrap()
        };
        assert!((ce(&[0.3; 5], 2) - 5f64.ln()).abs() < 1e-12);
        let big = ce(&[1000.0, 0.0], 0);
        assert!(big.is_finite() && big.abs() < 1e-12);
        let e = std::f64::consts::E;
        let oracle = -(e.powi(4) / (e + e + e.powi(4))).ln();
        assert!((ce(&[1., 1., 4.], 2) - oracle).abs() < 1e-12);
        assert!((oracle - 0.09492).abs() < 1e-5);

        let mut g = Graph::new();
        let l = g.leaf(Tensor::from_vec(vec![0.0, 1.0]));
        assert!(matches!(
            g.softmax_cross_entropy(l, 2),
            Err(Error::Index { index: 2, .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 3, 2], 0.25).with_requires_grad(true));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 2.0));
        g.zero_grad();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn retained_interior_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0]).with_requires_grad(true));
        let y = g.affine(x, 3.0, 0.0);
        g.retain_grad(y);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
    }
}
