//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and backward is a single reverse sweep. Each node
//! distributes its gradient to its inputs in declaration order; shared
//! subexpressions accumulate.

use crate::error::{Error, Result};
use crate::ops::{self, linalg::SpdSolve, softmax::softmax_cross_entropy_backward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    AvgPool2 { x: Var },
    Relu { x: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: T },
    MulScalar { a: Var, s: Var },
    Exp { a: Var },
    Sum { a: Var },
    ConcatRows { parts: Vec<Var> },
    AddRidge { a: Var, lambda0: f64 },
    SolveSpd { a: Var, b: Var, solve: Box<SpdSolve> },
    SoftmaxCe { logits: Var, targets: Var, probs: Tensor<T> },
    Mse { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf. `None` for constants and stop-gradient leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A learnable leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A stop-gradient leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a value onto the tape as a stop-gradient leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b }, rg))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::avgpool2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool2 { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Adds a bias vector to every row of a 2-D tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("add_bias")?;
        let bv = self.value(bias);
        if bv.shape() != [cols] {
            return Err(Error::dim("add_bias", "bias", cols, format!("{:?}", bv.shape())));
        }
        let mut out = self.value(a).clone();
        for r in 0..rows {
            for (v, &b) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias { a, bias }, rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    /// Multiplication by a one-element tensor on the tape.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", "scalar", 1, self.value(s).len()));
        }
        let out = self.value(a).scale(self.value(s).item());
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar { a, s }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// `A + λ I` with the adaptive regularizer `λ = λ0 · mean(diag A)`.
    ///
    /// Returns the regularized matrix and the effective `λ`.
    pub fn add_ridge(&mut self, a: Var, lambda0: f64) -> Result<(Var, f64)> {
        let av = self.value(a);
        let (n, n2) = av.dims2("add_ridge")?;
        if n != n2 {
            return Err(Error::dim("add_ridge", "columns", n, n2));
        }
        let lambda = crate::krr::adaptive_lambda(av, lambda0);
        let mut out = av.clone();
        let l = T::from_f64_lossy(lambda);
        for i in 0..n {
            out.set2(i, i, out.get2(i, i) + l);
        }
        let rg = self.rg(&[a]);
        Ok((self.push(out, Op::AddRidge { a, lambda0 }, rg), lambda))
    }

    /// `A⁻¹ B` for SPD `A`, factorized in `f64`.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, n2) = av.dims2("solve_spd")?;
        if n != n2 {
            return Err(Error::dim("solve_spd", "A columns", n, n2));
        }
        let (bn, m) = bv.dims2("solve_spd")?;
        if bn != n {
            return Err(Error::dim("solve_spd", "B rows", n, bn));
        }
        let solve = SpdSolve::new(&av.to_f64_vec(), &bv.to_f64_vec(), n, m)?;
        let out = Tensor::<f64>::new(&[n, m], solve.x.clone())?.cast();
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::SolveSpd {
                a,
                b,
                solve: Box::new(solve),
            },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), self.value(targets))?;
        let rg = self.rg(&[logits, targets]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(
                "mse",
                "shape",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Usage(
                "backward on a value that does not depend on any tracked leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let cg = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.requires_grad(*x),
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, cg.weight);
                self.accumulate(grads, *b, cg.bias);
            }
            Op::AvgPool2 { x } => {
                let dx = ops::avgpool2_backward(self.value(*x).shape(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = ops::relu_backward(self.value(*x), g);
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = g.matmul(&bv.transpose()?)?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = av.transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose { a } => self.accumulate(grads, *a, g.transpose()?),
            Op::Reshape { a } => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let cols = g.shape()[1];
                    let mut db = Tensor::zeros(&[cols]);
                    for row in g.data().chunks(cols) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale { a, c } => self.accumulate(grads, *a, g.scale(*c)),
            Op::MulScalar { a, s } => {
                let sv = self.value(*s).item();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.scale(sv));
                }
                if self.requires_grad(*s) {
                    let ds: T = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::full(&shape, ds));
                }
            }
            Op::Exp { a } => {
                let da = g.zip_map(&node.value, |x, y| x * y)?;
                self.accumulate(grads, *a, da);
            }
            Op::Sum { a } => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        let piece = Tensor::new(
                            self.value(p).shape(),
                            g.data()[offset..offset + len].to_vec(),
                        )?;
                        self.accumulate(grads, p, piece);
                    }
                    offset += len;
                }
            }
            Op::AddRidge { a, lambda0 } => {
                let n = g.shape()[0];
                let trace: T = (0..n).map(|i| g.get2(i, i)).sum();
                let extra = trace * T::from_f64_lossy(*lambda0) / T::from_usize(n).unwrap();
                let mut da = g.clone();
                for i in 0..n {
                    da.set2(i, i, da.get2(i, i) + extra);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SolveSpd { a, b, solve } => {
                let (da, db) = solve.backward(&g.to_f64_vec());
                if self.requires_grad(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::<f64>::new(&shape, da)?.cast());
                }
                if self.requires_grad(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::<f64>::new(&shape, db)?.cast());
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let up = g.item();
                let tv = self.value(*targets);
                if self.requires_grad(*logits) {
                    self.accumulate(grads, *logits, softmax_cross_entropy_backward(probs, tv, up));
                }
                if self.requires_grad(*targets) {
                    let b = T::from_usize(probs.shape()[0].max(1)).unwrap();
                    let dt = probs.map(|p| -p.ln() * up / b);
                    self.accumulate(grads, *targets, dt);
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = T::from_usize(av.len().max(1)).unwrap();
                let two = T::from_f64_lossy(2.0) * g.item() / n;
                let diff = av.zip_map(bv, |x, y| (x - y) * two)?;
                self.accumulate(grads, *b, diff.scale(-T::one()));
                self.accumulate(grads, *a, diff);
            }
        }
        Ok(())
    }
}
