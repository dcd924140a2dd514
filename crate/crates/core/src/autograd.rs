//! Tensor-level reverse-mode differentiation.
//!
//! Operations append nodes to a [`Tape`] in execution order, so operands
//! always precede the nodes that consume them. [`Tape::backward`] walks the
//! nodes once in reverse, which makes the gradient of a recorded computation
//! exact and, because every accumulation happens in a fixed order,
//! bit-reproducible across replays.

use crate::error::{Error, Result};
use crate::tensor::{kernels, ConvGeometry, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    /// Mean cross-entropy over rows; `probs` caches the row softmax.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` if `var` does not influence the root or was recorded as a constant.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x Wᵀ + b` where `x` is `[in]` or `[n, in]` and `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out, inp) = match self.value(w).shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Dimension(format!("weight must be 2-D, got {s:?}"))),
        };
        let xs = self.value(x).shape().to_vec();
        let (n, out_shape) = match xs.as_slice() {
            [i] if *i == inp => (1, vec![out]),
            [n, i] if *i == inp => (*n, vec![*n, out]),
            _ => {
                return Err(Error::Dimension(format!(
                    "input {xs:?} does not match weight [{out}, {inp}]"
                )))
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [out] {
                return Err(Error::Dimension(format!(
                    "bias {:?} does not match {out} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let mut y = vec![0.0; n * out];
        kernels::linear_forward(
            self.value(x).data(),
            n,
            inp,
            self.value(w).data(),
            out,
            b.map(|b| self.value(b).data()),
            &mut y,
        );
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(out_shape, y)?, Op::Linear { x, w, b }, rg))
    }

    /// Valid stride-1 convolution; `x` is `[c, H, W]` or `[n, c, H, W]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, single) = match xs.len() {
            3 => (1, &xs[..]),
            4 => (xs[0], &xs[1..]),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv input must be 3-D or 4-D, got {xs:?}"
                )))
            }
        };
        let geom = ConvGeometry::from_shapes(self.value(kernels).shape(), single)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::Dimension(
                    "conv bias must have one entry per filter".into(),
                ));
            }
        }
        let (il, ol) = (geom.input_len(), geom.output_len());
        let mut y = vec![0.0; n * ol];
        for s in 0..n {
            kernels::conv_forward(
                &geom,
                &self.value(x).data()[s * il..(s + 1) * il],
                self.value(kernels).data(),
                bias.map(|b| self.value(b).data()),
                &mut y[s * ol..(s + 1) * ol],
            );
        }
        let mut shape = vec![geom.c_out, geom.out_h(), geom.out_w()];
        if xs.len() == 4 {
            shape.insert(0, n);
        }
        let rg = self.needs(x) || self.needs(kernels) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Conv2d {
                x,
                kernels,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = crate::tensor::relu(self.value(x));
        let rg = self.needs(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of `[n, k]` (or `[k]`) logits against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let (n, k) = match shape.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => {
                return Err(Error::Dimension(format!(
                    "logits must be 1-D or 2-D, got {shape:?}"
                )))
            }
        };
        if labels.len() != n || n == 0 {
            return Err(Error::Dimension(format!(
                "{n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let lse = kernels::log_sum_exp(row);
            total += kernels::cross_entropy_row(row, labels[r]);
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Reverse-mode accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 || rv.rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                let xv = self.value(*x);
                let n = xv.len() / inp;
                let mut dw = self.needs(*w).then(|| vec![0.0; out * inp]);
                let mut db = b.filter(|b| self.needs(*b)).map(|_| vec![0.0; out]);
                let mut dx = self.needs(*x).then(|| vec![0.0; n * inp]);
                kernels::linear_backward(
                    g.data(),
                    xv.data(),
                    n,
                    inp,
                    wv.data(),
                    out,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                if let Some(d) = dw {
                    accumulate(grads, *w, wv.shape(), d)?;
                }
                if let (Some(b), Some(d)) = (b, db) {
                    accumulate(grads, *b, &[out], d)?;
                }
                if let Some(d) = dx {
                    accumulate(grads, *x, xv.shape(), d)?;
                }
            }
            Op::Conv2d {
                x,
                kernels: k,
                bias,
                geom,
            } => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let (il, ol) = (geom.input_len(), geom.output_len());
                let n = xv.len() / il;
                let mut dk = self.needs(*k).then(|| vec![0.0; kv.len()]);
                let mut db = bias
                    .filter(|b| self.needs(*b))
                    .map(|_| vec![0.0; geom.c_out]);
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                for s in 0..n {
                    kernels::conv_backward(
                        geom,
                        &g.data()[s * ol..(s + 1) * ol],
                        &xv.data()[s * il..(s + 1) * il],
                        kv.data(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                        dx.as_mut().map(|d| &mut d[s * il..(s + 1) * il]),
                    );
                }
                if let Some(d) = dk {
                    accumulate(grads, *k, kv.shape(), d)?;
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    accumulate(grads, *b, &[geom.c_out], d)?;
                }
                if let Some(d) = dx {
                    accumulate(grads, *x, xv.shape(), d)?;
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gi, &yi)| if yi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, self.value(*x).shape(), d)?;
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, self.value(*x).shape(), g.data().to_vec())?;
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.shape(), g.data().to_vec())?;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = zip_map(g, self.value(*b), |x, y| x * y);
                    accumulate(grads, *a, g.shape(), d)?;
                }
                if self.needs(*b) {
                    let d = zip_map(g, self.value(*a), |x, y| x * y);
                    accumulate(grads, *b, g.shape(), d)?;
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let xs = self.value(*x).shape();
                    let gv = g.data()[0];
                    accumulate(grads, *x, xs, vec![gv; self.value(*x).len()])?;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g.data()[0] / n as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * k + l] -= scale;
                    }
                    accumulate(grads, *logits, self.value(*logits).shape(), d)?;
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d)?),
    }
    Ok(())
}

/// Central-difference gradient estimate `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h`.
pub fn finite_difference<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe)?;
        probe[i] = theta[i] - h;
        let down = f(&probe)?;
        probe[i] = theta[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Relative disagreement used by gradient checks: `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
