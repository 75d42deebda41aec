//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the node list is always a
//! topological order and the backward sweep is a single reverse pass.
//! Constant leaves and everything computed only from constants carry no
//! gradient.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
}

/// How [`Tape::softmax_cross_entropy`] reduces over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · yᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Marks an existing node as gradient-carrying. Only affects nodes
    /// created afterwards, so call it before the node is consumed.
    pub fn watch(&mut self, v: Var) {
        self.nodes[v.0].requires_grad = true;
    }

    pub fn matmul(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = self.value(x).matmul(self.value(y))?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(value, Op::MatMul(x, y), rg))
    }

    /// `x · yᵀ`
    pub fn matmul_t(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.cols() != yv.cols() {
            return Err(Error::Shape(format!(
                "matmul of {}x{} by ({}x{})ᵀ",
                xv.rows(),
                xv.cols(),
                yv.rows(),
                yv.cols()
            )));
        }
        let value = xv.matmul(&yv.transpose())?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(value, Op::MatMulT(x, y), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, x: Var, y: Option<Var>) -> Result<Var> {
        let binary = |y: Option<Var>| {
            y.ok_or_else(|| Error::Contract(format!("{op:?} needs a second operand")))
        };
        match op {
            ElementwiseOp::Add => self.add(x, binary(y)?),
            ElementwiseOp::Sub => self.sub(x, binary(y)?),
            ElementwiseOp::Mul => self.mul(x, binary(y)?),
            ElementwiseOp::Relu => Ok(self.relu(x)),
            ElementwiseOp::Tanh => Ok(self.tanh(x)),
        }
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = self.value(x).add(self.value(y))?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(value, Op::Add(x, y), rg))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = self.value(x).sub(self.value(y))?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(value, Op::Sub(x, y), rg))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let value = self.value(x).hadamard(self.value(y))?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(value, Op::Mul(x, y), rg))
    }

    /// ReLU; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Frobenius inner product `Σ x∘y` as a 1x1 node.
    pub fn inner(&mut self, x: Var, y: Var) -> Result<Var> {
        let prod = self.mul(x, y)?;
        Ok(self.sum(prod))
    }

    /// Negative log-likelihood of `labels` under `softmax(logits)` per row,
    /// stabilized by subtracting the row maximum, reduced over the batch.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let z = self.value(logits);
        let (batch, classes) = z.shape();
        if labels.len() != batch {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        let mut probs = Matrix::zeros(batch, classes);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Index(format!("label {label} out of range for {classes} classes")));
            }
            let row = z.row(i);
            let (argmax, max) = row
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best });
            // Σ exp(z - max) over the non-maximal entries; ln_1p keeps tiny
            // losses accurate.
            let mut rest = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs.set(i, c, e);
                if c != argmax {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for c in 0..classes {
                probs.set(i, c, probs.get(i, c) / denom);
            }
            total += (max - row[label]) + rest.ln_1p();
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / batch as f64,
            Reduction::Sum => 1.0,
        };
        let value = Matrix::filled(1, 1, total * scale);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else { continue };
            let grads = lower;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(x, y) => {
                    if self.requires_grad(*x) {
                        let gx = g.matmul_t(self.value(*y))?;
                        accumulate(grads, *x, gx)?;
                    }
                    if self.requires_grad(*y) {
                        let gy = self.value(*x).t_matmul(g)?;
                        accumulate(grads, *y, gy)?;
                    }
                }
                Op::MatMulT(x, y) => {
                    if self.requires_grad(*x) {
                        let gx = g.matmul(self.value(*y))?;
                        accumulate(grads, *x, gx)?;
                    }
                    if self.requires_grad(*y) {
                        let gy = self.value(*x).t_matmul(g)?.transpose();
                        accumulate(grads, *y, gy)?;
                    }
                }
                Op::Transpose(x) => accumulate(grads, *x, g.transpose())?,
                Op::Add(x, y) => {
                    if self.requires_grad(*y) {
                        accumulate(grads, *y, g.clone())?;
                    }
                    if self.requires_grad(*x) {
                        accumulate(grads, *x, g.clone())?;
                    }
                }
                Op::Sub(x, y) => {
                    if self.requires_grad(*y) {
                        accumulate(grads, *y, g.scale(-1.0))?;
                    }
                    if self.requires_grad(*x) {
                        accumulate(grads, *x, g.clone())?;
                    }
                }
                Op::Mul(x, y) => {
                    if self.requires_grad(*x) {
                        accumulate(grads, *x, g.hadamard(self.value(*y))?)?;
                    }
                    if self.requires_grad(*y) {
                        accumulate(grads, *y, g.hadamard(self.value(*x))?)?;
                    }
                }
                Op::Relu(x) => {
                    let gx = g.zip_with(&node.value, "relu grad", |g, out| if out > 0.0 { g } else { 0.0 })?;
                    accumulate(grads, *x, gx)?;
                }
                Op::Tanh(x) => {
                    let gx = g.zip_with(&node.value, "tanh grad", |g, t| g * (1.0 - t * t))?;
                    accumulate(grads, *x, gx)?;
                }
                Op::Scale(x, s) => accumulate(grads, *x, g.scale(*s))?,
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                    scale,
                } => {
                    let upstream = g.get(0, 0) * scale;
                    let mut gl = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        gl.set(i, label, gl.get(i, label) - 1.0);
                    }
                    accumulate(grads, *logits, gl.scale(upstream))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central differences of a tape-built scalar function of one leaf.
    fn numeric_grad(build: &dyn Fn(&mut Tape, Var) -> Var, at: &Matrix, eps: f64) -> Matrix {
        let mut out = Matrix::zeros(at.rows(), at.cols());
        for i in 0..at.len() {
            let eval = |delta: f64| {
                let mut p = at.clone();
                p.data_mut()[i] += delta;
                let mut t = Tape::new();
                let x = t.param(p);
                let y = build(&mut t, x);
                t.value(y).get(0, 0)
            };
            out.data_mut()[i] = (eval(eps) - eval(-eps)) / (2.0 * eps);
        }
        out
    }

    fn analytic_grad(build: &dyn Fn(&mut Tape, Var) -> Var, at: &Matrix) -> Matrix {
        let mut t = Tape::new();
        let x = t.param(at.clone());
        let y = build(&mut t, x);
        t.backward(y).unwrap().get(x).unwrap().clone()
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm()).max(1e-12)
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, at: &Matrix) {
        let a = analytic_grad(build, at);
        let n = numeric_grad(build, at, 1e-4);
        let e = rel_err(&a, &n);
        assert!(e < 1e-5, "relative error {e}: analytic {a:?} numeric {n:?}");
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[-1.0, 2.0]]));
        let r = t.elementwise(ElementwiseOp::Relu, x, None).unwrap();
        assert_eq!(t.value(r), &Matrix::from_rows(&[[0.0, 2.0]]));
        let z = t.constant(Matrix::zeros(1, 2));
        let s = t.elementwise(ElementwiseOp::Add, x, Some(z)).unwrap();
        assert_eq!(t.value(s), t.value(x));
        let th = t.tanh(z);
        assert_eq!(t.value(th), &Matrix::zeros(1, 2));
        assert!(t.elementwise(ElementwiseOp::Mul, x, None).is_err());
        let wrong = t.constant(Matrix::zeros(2, 2));
        assert!(matches!(t.add(x, wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[0.0, 1.0, -1.0]]));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Matrix::from_rows(&[[0.0, 1.0, 0.0]]));
    }

    #[test]
    fn cross_entropy_values() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::filled(3, 5, 0.3));
        let l = t.softmax_cross_entropy(z, &[0, 4, 2], Reduction::Mean).unwrap();
        assert!((t.value(l).get(0, 0) - 5f64.ln()).abs() < 1e-15);

        let z = t.constant(Matrix::from_rows(&[[10.0, -10.0]]));
        let l = t.softmax_cross_entropy(z, &[0], Reduction::Mean).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((t.value(l).get(0, 0) - expected).abs() < 1e-20);
        assert!((expected - 2.061_153_620_314_381e-9).abs() < 1e-22);

        let z = t.constant(Matrix::from_rows(&[[400.0, -400.0, 0.0]]));
        let l = t.softmax_cross_entropy(z, &[0], Reduction::Mean).unwrap();
        assert!(t.value(l).get(0, 0) < 1e-150);

        assert!(matches!(
            t.softmax_cross_entropy(z, &[3], Reduction::Mean),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_batch() {
        let logits = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]);
        let mut t = Tape::new();
        let z = t.param(logits.clone());
        let l = t.softmax_cross_entropy(z, &[1, 0], Reduction::Mean).unwrap();
        let g = t.backward(l).unwrap();
        for (i, label) in [1usize, 0].into_iter().enumerate() {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let p = row[c].exp() / denom;
                let want = (p - if c == label { 1.0 } else { 0.0 }) / 2.0;
                assert!((g.get(z).unwrap().get(i, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W x) with x = ones: dL/dW is all ones.
        let mut t = Tape::new();
        let w = t.param(Matrix::seeded_gaussian(3, 4, 0.0, 1.0, 5));
        let x = t.constant(Matrix::filled(4, 1, 1.0));
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &Matrix::filled(3, 4, 1.0));
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let w = t.param(Matrix::seeded_gaussian(4, 6, 0.0, 1.0, 77));
            let x = t.constant(Matrix::seeded_gaussian(5, 6, 0.0, 1.0, 78));
            let s = t.matmul_t(x, w).unwrap();
            let h = t.tanh(s);
            let l = t.softmax_cross_entropy(h, &[0, 1, 2, 3, 0], Reduction::Mean).unwrap();
            t.backward(l).unwrap().get(w).unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn arb(r: usize, c: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matmul_grads_match_fd(x in arb(3, 4), y in arb(4, 2), w in arb(3, 2)) {
            let (yc, wc) = (y.clone(), w.clone());
            check(&move |t, v| {
                let yv = t.constant(yc.clone());
                let z = t.matmul(v, yv).unwrap();
                let wv = t.constant(wc.clone());
                t.inner(z, wv).unwrap()
            }, &x);
            let (xc, wc) = (x.clone(), w.clone());
            check(&move |t, v| {
                let xv = t.constant(xc.clone());
                let z = t.matmul(xv, v).unwrap();
                let wv = t.constant(wc.clone());
                t.inner(z, wv).unwrap()
            }, &y);
        }

        #[test]
        fn matmul_t_and_transpose_grads_match_fd(x in arb(3, 4), y in arb(2, 4), w in arb(3, 2)) {
            let (yc, wc) = (y.clone(), w.clone());
            check(&move |t, v| {
                let yv = t.constant(yc.clone());
                let z = t.matmul_t(v, yv).unwrap();
                let wv = t.constant(wc.clone());
                t.inner(z, wv).unwrap()
            }, &x);
            let (xc, wc) = (x.clone(), w.clone());
            check(&move |t, v| {
                let xv = t.constant(xc.clone());
                let z = t.matmul_t(xv, v).unwrap();
                let wv = t.constant(wc.clone());
                t.inner(z, wv).unwrap()
            }, &y);
            let wc = w.clone();
            check(&move |t, v| {
                let vt = t.transpose(v);
                let wv = t.constant(wc.transpose());
                let z = t.mul(vt, wv).unwrap();
                let z = t.tanh(z);
                t.sum(z)
            }, &w);
        }

        #[test]
        fn elementwise_grads_match_fd(x in arb(2, 3), y in arb(2, 3)) {
            for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul] {
                let yc = y.clone();
                check(&move |t, v| {
                    let yv = t.constant(yc.clone());
                    let z = t.elementwise(op, v, Some(yv)).unwrap();
                    let z2 = t.mul(z, z).unwrap();
                    t.sum(z2)
                }, &x);
            }
            check(&|t, v| { let z = t.tanh(v); let z = t.scale(z, 3.0); t.inner(z, v).unwrap() }, &x);
            // keep away from the kink at 0 for the finite-difference check
            let shifted = x.map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v });
            check(&|t, v| { let z = t.relu(v); t.inner(z, z).unwrap() }, &shifted);
        }

        #[test]
        fn cross_entropy_grad_matches_fd(z in arb(4, 3), labels in proptest::collection::vec(0usize..3, 4)) {
            let l2 = labels.clone();
            check(&move |t, v| t.softmax_cross_entropy(v, &l2, Reduction::Mean).unwrap(), &z);
            check(&move |t, v| t.softmax_cross_entropy(v, &labels, Reduction::Sum).unwrap(), &z);
        }
    }
}
