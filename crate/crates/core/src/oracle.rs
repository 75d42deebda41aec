//! Brute-force references for checking the main path.
//!
//! Everything here is written with plain index loops over `f64` slices: no
//! `Matrix` products and no tape. Agreement with the fast path is therefore
//! evidence rather than a restatement. The functions are slow by design and
//! refuse inputs beyond small size guards instead of approximating.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Activation, Network, ParamId};
use crate::tensor::Matrix;

/// Largest `d_out · d_in` for which an exact Fisher block is formed.
pub const MAX_BLOCK_PARAMS: usize = 256;
/// Largest row or column count of a dense Kronecker product.
pub const MAX_KRON_DIM: usize = 1024;

/// Row-major copy of one layer's effective weight.
#[derive(Debug, Clone)]
struct DenseLayer {
    name: String,
    d_out: usize,
    d_in: usize,
    w: Vec<f64>,
}

/// A network flattened to plain weight buffers along one head's path.
#[derive(Debug, Clone)]
pub struct OracleNet {
    layers: Vec<DenseLayer>,
    activation: Activation,
}

/// Per-layer quantities for a single sample.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    /// Input to each layer.
    pub inputs: Vec<Vec<f64>>,
    /// Gradient of the loss with respect to each layer's pre-activation.
    pub preact_grads: Vec<Vec<f64>>,
    pub loss: f64,
}

impl OracleNet {
    /// Copies the effective weights along `head`'s path, forming `W⁰ + γABᵀ`
    /// with explicit loops where an adapter is attached.
    pub fn from_network(net: &Network, head: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for name in net.path(head)? {
            let l = net.layer(&name)?;
            let (d_out, d_in) = (l.weight.rows(), l.weight.cols());
            let mut w = l.weight.data().to_vec();
            if let Some(ad) = &l.adapter {
                let (a, b, r) = (ad.a.data(), ad.b.data(), ad.a.cols());
                for i in 0..d_out {
                    for j in 0..d_in {
                        let mut s = 0.0;
                        for k in 0..r {
                            s += a[i * r + k] * b[j * r + k];
                        }
                        w[i * d_in + j] += ad.gamma * s;
                    }
                }
            }
            layers.push(DenseLayer { name, d_out, d_in, w });
        }
        Ok(Self {
            layers,
            activation: net.spec.activation,
        })
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Contract(format!("layer {name} is not on the evaluated path")))
    }

    /// Forward and backward pass for one sample under softmax cross-entropy.
    pub fn trace(&self, x: &[f64], label: usize) -> Result<SampleTrace> {
        let first = &self.layers[0];
        if x.len() != first.d_in {
            return Err(Error::Shape(format!("sample width {} vs {}", x.len(), first.d_in)));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let mut s = vec![0.0; l.d_out];
            for (i, si) in s.iter_mut().enumerate() {
                let row = &l.w[i * l.d_in..(i + 1) * l.d_in];
                *si = row.iter().zip(&h).map(|(w, v)| w * v).sum();
            }
            inputs.push(h);
            h = if li < last {
                s.iter().map(|&v| self.act(v)).collect()
            } else {
                s.clone()
            };
            pre.push(s);
        }
        let logits = &h;
        if label >= logits.len() {
            return Err(Error::Index(format!("label {label} with {} outputs", logits.len())));
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        let loss = m + z.ln() - logits[label];
        let mut g: Vec<f64> = logits.iter().map(|v| (v - m).exp() / z).collect();
        g[label] -= 1.0;

        let mut grads = vec![Vec::new(); self.layers.len()];
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            if li < last {
                for (gi, &si) in g.iter_mut().zip(&pre[li]) {
                    *gi *= self.act_deriv(si);
                }
            }
            let mut below = vec![0.0; l.d_in];
            for (i, gi) in g.iter().enumerate() {
                for (j, bj) in below.iter_mut().enumerate() {
                    *bj += l.w[i * l.d_in + j] * gi;
                }
            }
            grads[li] = std::mem::replace(&mut g, below);
        }
        Ok(SampleTrace {
            inputs,
            preact_grads: grads,
            loss,
        })
    }

    fn act(&self, v: f64) -> f64 {
        match self.activation {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    fn act_deriv(&self, s: f64) -> f64 {
        match self.activation {
            Activation::Relu => {
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - s.tanh() * s.tanh(),
            Activation::Identity => 1.0,
        }
    }

    /// Mean cross-entropy over the rows of `inputs`.
    pub fn loss(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        check_batch(inputs, labels)?;
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total += self.trace(inputs.row(r), y)?.loss;
        }
        Ok(total / labels.len() as f64)
    }

    /// Per-sample gradient of the loss with respect to a layer's full
    /// weight, as a row-major `d_out × d_in` buffer (`g aᵀ`).
    pub fn weight_grad(&self, layer: &str, x: &[f64], label: usize) -> Result<Vec<f64>> {
        let li = self.layer_index(layer)?;
        let t = self.trace(x, label)?;
        let (g, a) = (&t.preact_grads[li], &t.inputs[li]);
        let mut out = vec![0.0; g.len() * a.len()];
        for (i, gi) in g.iter().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                out[i * a.len() + j] = gi * aj;
            }
        }
        Ok(out)
    }
}

fn check_batch(inputs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Contract("oracle needs at least one sample".into()));
    }
    if inputs.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", inputs.rows(), labels.len())));
    }
    Ok(())
}

/// Column-major vectorization of a row-major `rows × cols` buffer.
fn col_major(buf: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(buf.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(buf[r * cols + c]);
        }
    }
    out
}

/// Exact empirical Fisher block of one layer: the mean over samples of
/// `vec(g aᵀ) vec(g aᵀ)ᵀ` with column-major `vec`.
pub fn exact_fisher_block(
    net: &Network,
    head: &str,
    layer: &str,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<Matrix> {
    let l = net.layer(layer)?;
    let p = l.weight.rows() * l.weight.cols();
    if p > MAX_BLOCK_PARAMS {
        return Err(Error::Contract(format!(
            "exact Fisher block for {layer} would have {p} parameters per side (limit {MAX_BLOCK_PARAMS})"
        )));
    }
    check_batch(inputs, labels)?;
    let oracle = OracleNet::from_network(net, head)?;
    let mut block = vec![0.0; p * p];
    for (r, &y) in labels.iter().enumerate() {
        let g = oracle.weight_grad(layer, inputs.row(r), y)?;
        let v = col_major(&g, l.weight.rows(), l.weight.cols());
        for i in 0..p {
            for j in 0..p {
                block[i * p + j] += v[i] * v[j];
            }
        }
    }
    let n = labels.len() as f64;
    block.iter_mut().for_each(|v| *v /= n);
    Matrix::new(p, p, block)
}

/// Literal Kronecker product `a ⊗ g`.
pub fn dense_kron(a: &Matrix, g: &Matrix) -> Result<Matrix> {
    let (ra, ca) = a.shape();
    let (rg, cg) = g.shape();
    let (rows, cols) = (ra * rg, ca * cg);
    if rows > MAX_KRON_DIM || cols > MAX_KRON_DIM {
        return Err(Error::Contract(format!(
            "Kronecker product of {rows}x{cols} exceeds the {MAX_KRON_DIM}x{MAX_KRON_DIM} limit"
        )));
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..ra {
        for j in 0..ca {
            let aij = a.data()[i * ca + j];
            for k in 0..rg {
                for l in 0..cg {
                    out[(i * rg + k) * cols + j * cg + l] = aij * g.data()[k * cg + l];
                }
            }
        }
    }
    Matrix::new(rows, cols, out)
}

/// `vᵀ M v` by explicit loops.
pub fn dense_quadratic(m: &Matrix, v: &[f64]) -> Result<f64> {
    if m.rows() != v.len() || m.cols() != v.len() {
        return Err(Error::Shape(format!("{}x{} form with a {}-vector", m.rows(), m.cols(), v.len())));
    }
    let mut total = 0.0;
    for i in 0..v.len() {
        let mut s = 0.0;
        for j in 0..v.len() {
            s += m.data()[i * v.len() + j] * v[j];
        }
        total += v[i] * s;
    }
    Ok(total)
}

/// Column-major `vec` of a matrix, by loops.
pub fn vec_of(m: &Matrix) -> Vec<f64> {
    col_major(m.data(), m.rows(), m.cols())
}

/// Central differences `(f(θ+εe) − f(θ−εe)) / 2ε` for every coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let up = f(&theta);
        theta[i] = orig - eps;
        let down = f(&theta);
        theta[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("objective is not finite around coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Finite-difference gradient of `f` with respect to every trainable
/// parameter of `net`, one coordinate at a time.
pub fn finite_diff_network(
    net: &Network,
    mut f: impl FnMut(&Network) -> Result<f64>,
    eps: f64,
) -> Result<BTreeMap<ParamId, Matrix>> {
    let ids: Vec<(ParamId, usize, usize)> = net
        .trainable_params()
        .into_iter()
        .map(|(id, m)| (id, m.rows(), m.cols()))
        .collect();
    let mut work = net.clone();
    let mut out = BTreeMap::new();
    for (id, rows, cols) in ids {
        let base = work.param_mut(&id)?.data().to_vec();
        let mut failure = None;
        let g = finite_diff_grad(
            |theta| {
                let m = work.param_mut(&id).expect("id taken from the network").data_mut();
                m.copy_from_slice(theta);
                match f(&work) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &base,
            eps,
        );
        work.param_mut(&id)?.data_mut().copy_from_slice(&base);
        if let Some(e) = failure {
            return Err(e);
        }
        out.insert(id, Matrix::new(rows, cols, g?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    #[test]
    fn kron_identities() {
        assert_eq!(dense_kron(&Matrix::identity(2), &Matrix::identity(3)).unwrap(), Matrix::identity(6));
        let swap = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let m = dense_kron(&swap, &Matrix::identity(2)).unwrap();
        let v = [1.0, 2.0, 3.0, 4.0];
        let mv: Vec<f64> = (0..4).map(|i| (0..4).map(|j| m.get(i, j) * v[j]).sum()).collect();
        assert_eq!(mv, vec![3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn kron_size_guard() {
        let big = Matrix::identity(33);
        assert!(matches!(dense_kron(&big, &big), Err(Error::Contract(_))));
    }

    #[test]
    fn half_squared_norm_gradient_is_theta() {
        let theta = [0.3, -1.2, 4.0];
        let g = finite_diff_grad(|t| 0.5 * t.iter().map(|v| v * v).sum::<f64>(), &theta, 1e-3).unwrap();
        for (a, b) in g.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn central_difference_error_is_second_order() {
        let f = |t: &[f64]| t[0].sin() * t[0].exp();
        let exact = 0.7f64.cos() * 0.7f64.exp() + 0.7f64.sin() * 0.7f64.exp();
        let e1 = (finite_diff_grad(f, &[0.7], 1e-2).unwrap()[0] - exact).abs();
        let e2 = (finite_diff_grad(f, &[0.7], 5e-3).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn non_finite_objective_and_bad_eps() {
        assert!(matches!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-3), Err(Error::Oracle(_))));
        assert!(matches!(finite_diff_grad(|_| 0.0, &[1.0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn block_size_guard_and_zero_gradients() {
        let net = Network::new(NetworkSpec::classifier(3), 1).unwrap();
        let x = Matrix::seeded_gaussian(2, 16, 0.0, 1.0, 2);
        assert!(matches!(
            exact_fisher_block(&net, "head", "fc1", &x, &[0, 1]),
            Err(Error::Contract(_))
        ));
        let tiny = NetworkSpec {
            input_dim: 4,
            hidden: vec![3],
            activation: Activation::Tanh,
            head: crate::model::HeadSpec::Classifier { classes: 2 },
        };
        let mut net = Network::new(tiny, 3).unwrap();
        net.layer_mut("fc1").unwrap().weight = Matrix::zeros(3, 4);
        net.layer_mut("head").unwrap().weight = Matrix::zeros(2, 3);
        let x = Matrix::seeded_gaussian(3, 4, 0.0, 1.0, 4);
        let block = exact_fisher_block(&net, "head", "fc1", &x, &[0, 1, 0]).unwrap();
        assert_eq!(block.max_abs(), 0.0);
    }

    #[test]
    fn oracle_loss_matches_main_path() {
        let net = Network::new(NetworkSpec::char_lm(16, 8), 5).unwrap();
        let mut x = Matrix::zeros(4, 128);
        for r in 0..4 {
            for p in 0..8 {
                x.set(r, p * 16 + (r * 3 + p * 5) % 16, 1.0);
            }
        }
        let y = [1, 7, 3, 15];
        let o = OracleNet::from_network(&net, "lm").unwrap().loss(&x, &y).unwrap();
        let m = net.task_loss(&x, &y, "lm").unwrap();
        assert!((o - m).abs() < 1e-12 * m.abs());
    }
}
