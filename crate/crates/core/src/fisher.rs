//! Per-layer empirical Fisher estimates at the pre-trained weights.
//!
//! For a biasless layer `s = W a`, the per-sample weight gradient is
//! `g aᵀ` with `g = ∂L/∂s`. The diagonal estimate averages `(g aᵀ)∘(g aᵀ)`;
//! the Kronecker estimate averages `a aᵀ` and `g gᵀ` separately so that
//! `F ≈ E[a aᵀ] ⊗ E[g gᵀ]` under column-major `vec`.
//!
//! Gradients are of the task-A training loss at the observed labels
//! (empirical Fisher), taken with respect to the full effective weight.
//! Every expectation is a plain mean over samples, accumulated in stream
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SampleStream;
use crate::error::{Error, Result};
use crate::model::{Bindings, Network};
use crate::tensor::{Matrix, Reduction, Tape};

pub const FISHER_FORMAT: &str = "bayes-peft-fisher";
pub const FISHER_VERSION: u32 = 1;
pub const DEFAULT_DAMPING: f64 = 1e-8;

/// Samples pushed through the network per forward pass while estimating.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherKind {
    Identity,
    Diagonal,
    Kronecker,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    Identity,
    /// Same shape as the weight; nonnegative.
    Diagonal(Matrix),
    /// `input = E[a aᵀ] (+δI)`, `d_in x d_in`; `grad = E[g gᵀ] (+δI)`, `d_out x d_out`.
    Kronecker { input: Matrix, grad: Matrix },
}

impl Curvature {
    pub fn kind(&self) -> FisherKind {
        match self {
            Curvature::Identity => FisherKind::Identity,
            Curvature::Diagonal(_) => FisherKind::Diagonal,
            Curvature::Kronecker { .. } => FisherKind::Kronecker,
        }
    }

    /// Number of stored reals.
    pub fn storage(&self) -> usize {
        match self {
            Curvature::Identity => 0,
            Curvature::Diagonal(f) => f.len(),
            Curvature::Kronecker { input, grad } => input.len() + grad.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFisher {
    pub d_out: usize,
    pub d_in: usize,
    pub curvature: Curvature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEstimate {
    pub kind: FisherKind,
    pub layers: BTreeMap<String, LayerFisher>,
    pub sample_count: usize,
    pub damping: f64,
    /// Seed of the sample draw, recorded for reproducibility.
    pub seed: u64,
}

/// Running sums for the diagonal estimate of one layer.
#[derive(Debug, Clone)]
pub struct DiagonalAccumulator {
    sum: Matrix,
    count: usize,
}

impl DiagonalAccumulator {
    pub fn new(d_out: usize, d_in: usize) -> Self {
        Self {
            sum: Matrix::zeros(d_out, d_in),
            count: 0,
        }
    }

    /// `inputs: batch x d_in`, `grads: batch x d_out`, one sample per row.
    /// Adds `Σ_n (g_n a_nᵀ)∘(g_n a_nᵀ) = (g∘g)ᵀ (a∘a)`.
    pub fn add_batch(&mut self, inputs: &Matrix, grads: &Matrix) -> Result<()> {
        let a2 = inputs.map(|v| v * v);
        let g2 = grads.map(|v| v * v);
        self.sum.add_assign(&g2.t_matmul(&a2)?)?;
        self.count += inputs.rows();
        Ok(())
    }

    pub fn finish(self) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::Data("no samples accumulated".into()));
        }
        Ok(self.sum.scale(1.0 / self.count as f64))
    }
}

/// Running sums of both Kronecker factors for one layer.
#[derive(Debug, Clone)]
pub struct KroneckerAccumulator {
    input: Matrix,
    grad: Matrix,
    count: usize,
}

impl KroneckerAccumulator {
    pub fn new(d_out: usize, d_in: usize) -> Self {
        Self {
            input: Matrix::zeros(d_in, d_in),
            grad: Matrix::zeros(d_out, d_out),
            count: 0,
        }
    }

    pub fn add_batch(&mut self, inputs: &Matrix, grads: &Matrix) -> Result<()> {
        self.input.add_assign(&inputs.t_matmul(inputs)?)?;
        self.grad.add_assign(&grads.t_matmul(grads)?)?;
        self.count += inputs.rows();
        Ok(())
    }

    /// Means of the factors, then `+δI` on each.
    pub fn finish(self, damping: f64) -> Result<(Matrix, Matrix)> {
        if self.count == 0 {
            return Err(Error::Data("no samples accumulated".into()));
        }
        let n = self.count as f64;
        let mut input = symmetrize(self.input.scale(1.0 / n));
        let mut grad = symmetrize(self.grad.scale(1.0 / n));
        input.add_diagonal(damping)?;
        grad.add_diagonal(damping)?;
        Ok((input, grad))
    }
}

// XᵀX computed row by row is symmetric up to summation order; make it exact.
fn symmetrize(m: Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for c in r + 1..m.cols() {
            let v = 0.5 * (m.get(r, c) + m.get(c, r));
            out.set(r, c, v);
            out.set(c, r, v);
        }
    }
    out
}

/// Runs `n_samples` from the stream through the network (through `head`)
/// and hands each captured layer's per-sample inputs and pre-activation
/// gradients to `sink`, chunk by chunk, in stream order.
fn per_sample_pass(
    net: &Network,
    head: &str,
    layers: &[String],
    stream: &mut SampleStream<'_>,
    n_samples: usize,
    mut sink: impl FnMut(usize, &Matrix, &Matrix) -> Result<()>,
) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    if n_samples > stream.remaining() {
        return Err(Error::Data(format!(
            "sample stream has {} samples, {n_samples} requested",
            stream.remaining()
        )));
    }
    let path = net.path(head)?;
    for name in layers {
        if !path.contains(name) {
            return Err(Error::Contract(format!("layer {name} is not on the path through {head}")));
        }
    }
    // Evaluate at the effective weights with every layer constant; only the
    // requested layers capture.
    let mut frozen = net.clone();
    for l in frozen.layers_mut() {
        l.weight = l.effective_weight();
        l.adapter = None;
        l.anchor = None;
        l.trainable = false;
        l.capture = layers.contains(&l.name);
    }
    let mut done = 0;
    while done < n_samples {
        let take = CHUNK.min(n_samples - done);
        let (x, y) = stream.take_batch(take)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let out = frozen.forward(&mut tape, &mut binds, &x, head)?;
        // Summed loss: row n of ∂L/∂s is exactly sample n's gradient.
        let loss = tape.softmax_cross_entropy(out.logits, &y, Reduction::Sum)?;
        let grads = tape.backward(loss)?;
        for cap in &out.captures {
            let idx = layers.iter().position(|n| *n == cap.layer).expect("captured layer requested");
            let g = grads
                .get(cap.preact)
                .ok_or_else(|| Error::Contract(format!("no gradient reached layer {}", cap.layer)))?;
            sink(idx, &cap.input, g)?;
        }
        done += take;
    }
    Ok(())
}

fn layer_dims(net: &Network, layers: &[String]) -> Result<Vec<(usize, usize)>> {
    layers
        .iter()
        .map(|n| net.layer(n).map(|l| (l.d_out(), l.d_in())))
        .collect()
}

/// Identity curvature for every listed layer; needs no data.
pub fn estimate_identity(net: &Network, layers: &[String]) -> Result<FisherEstimate> {
    let dims = layer_dims(net, layers)?;
    Ok(FisherEstimate {
        kind: FisherKind::Identity,
        layers: layers
            .iter()
            .zip(dims)
            .map(|(n, (d_out, d_in))| {
                (
                    n.clone(),
                    LayerFisher {
                        d_out,
                        d_in,
                        curvature: Curvature::Identity,
                    },
                )
            })
            .collect(),
        sample_count: 1,
        damping: 0.0,
        seed: 0,
    })
}

/// Diagonal Fisher: mean over samples of the squared per-sample weight gradient.
pub fn estimate_diagonal(
    net: &Network,
    head: &str,
    layers: &[String],
    stream: &mut SampleStream<'_>,
    n_samples: usize,
) -> Result<FisherEstimate> {
    let dims = layer_dims(net, layers)?;
    let mut acc: Vec<_> = dims.iter().map(|&(o, i)| DiagonalAccumulator::new(o, i)).collect();
    per_sample_pass(net, head, layers, stream, n_samples, |idx, a, g| acc[idx].add_batch(a, g))?;
    let mut out = BTreeMap::new();
    for ((name, (d_out, d_in)), acc) in layers.iter().zip(dims).zip(acc) {
        out.insert(
            name.clone(),
            LayerFisher {
                d_out,
                d_in,
                curvature: Curvature::Diagonal(acc.finish()?),
            },
        );
    }
    Ok(FisherEstimate {
        kind: FisherKind::Diagonal,
        layers: out,
        sample_count: n_samples,
        damping: 0.0,
        seed: 0,
    })
}

/// Kronecker-factored Fisher: `E[a aᵀ] + δI` and `E[g gᵀ] + δI` per layer.
pub fn estimate_kronecker(
    net: &Network,
    head: &str,
    layers: &[String],
    stream: &mut SampleStream<'_>,
    n_samples: usize,
    damping: f64,
) -> Result<FisherEstimate> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::Contract(format!("damping must be finite and nonnegative, got {damping}")));
    }
    let dims = layer_dims(net, layers)?;
    let mut acc: Vec<_> = dims.iter().map(|&(o, i)| KroneckerAccumulator::new(o, i)).collect();
    per_sample_pass(net, head, layers, stream, n_samples, |idx, a, g| acc[idx].add_batch(a, g))?;
    let mut out = BTreeMap::new();
    for ((name, (d_out, d_in)), acc) in layers.iter().zip(dims).zip(acc) {
        let (input, grad) = acc.finish(damping)?;
        out.insert(
            name.clone(),
            LayerFisher {
                d_out,
                d_in,
                curvature: Curvature::Kronecker { input, grad },
            },
        );
    }
    Ok(FisherEstimate {
        kind: FisherKind::Kronecker,
        layers: out,
        sample_count: n_samples,
        damping,
        seed: 0,
    })
}

/// Sample draw settings for [`estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub samples: usize,
    pub seed: u64,
    pub damping: f64,
}

impl EstimateOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            damping: DEFAULT_DAMPING,
        }
    }
}

/// Draws `opts.samples` from `pool` without replacement and estimates the
/// requested kind.
pub fn estimate(
    kind: FisherKind,
    net: &Network,
    head: &str,
    layers: &[String],
    pool: &crate::data::Dataset,
    opts: &EstimateOptions,
) -> Result<FisherEstimate> {
    let EstimateOptions {
        samples: n_samples,
        seed,
        damping,
    } = *opts;
    if kind != FisherKind::Identity && n_samples > pool.len() {
        return Err(Error::Contract(format!(
            "{n_samples} samples requested from a pool of {}",
            pool.len()
        )));
    }
    let mut est = match kind {
        FisherKind::Identity => return estimate_identity(net, layers),
        FisherKind::Diagonal => estimate_diagonal(net, head, layers, &mut pool.sample_stream(seed), n_samples)?,
        FisherKind::Kronecker => {
            estimate_kronecker(net, head, layers, &mut pool.sample_stream(seed), n_samples, damping)?
        }
    };
    est.seed = seed;
    Ok(est)
}

impl FisherEstimate {
    pub fn layer(&self, name: &str) -> Option<&LayerFisher> {
        self.layers.get(name)
    }

    /// Total stored reals across layers.
    pub fn storage(&self) -> usize {
        self.layers.values().map(|l| l.curvature.storage()).sum()
    }

    /// Kronecker factors with the damping removed.
    pub fn undamped_factors(&self, layer: &str) -> Result<(Matrix, Matrix)> {
        match self.layer(layer).map(|l| &l.curvature) {
            Some(Curvature::Kronecker { input, grad }) => {
                let (mut a, mut g) = (input.clone(), grad.clone());
                a.add_diagonal(-self.damping)?;
                g.add_diagonal(-self.damping)?;
                Ok((a, g))
            }
            _ => Err(Error::Contract(format!("no Kronecker factors for layer {layer}"))),
        }
    }

    /// Every estimated layer exists in `net` with the same dims.
    pub fn check_compatible(&self, net: &Network) -> Result<()> {
        for (name, lf) in &self.layers {
            let l = net.layer(name)?;
            if (l.d_out(), l.d_in()) != (lf.d_out, lf.d_in) {
                return Err(Error::Shape(format!(
                    "estimate for {name} is {}x{}, network layer is {}x{}",
                    lf.d_out,
                    lf.d_in,
                    l.d_out(),
                    l.d_in()
                )));
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> FisherFile {
        FisherFile {
            format: FISHER_FORMAT.into(),
            version: FISHER_VERSION,
            kind: self.kind,
            sample_count: self.sample_count,
            damping: self.damping,
            seed: self.seed,
            layers: self
                .layers
                .iter()
                .map(|(name, lf)| {
                    let (diagonal, input_factor, grad_factor) = match &lf.curvature {
                        Curvature::Identity => (None, None, None),
                        Curvature::Diagonal(f) => (Some(f.data().to_vec()), None, None),
                        Curvature::Kronecker { input, grad } => {
                            (None, Some(input.data().to_vec()), Some(grad.data().to_vec()))
                        }
                    };
                    LayerFisherRecord {
                        name: name.clone(),
                        d_out: lf.d_out,
                        d_in: lf.d_in,
                        diagonal,
                        input_factor,
                        grad_factor,
                    }
                })
                .collect(),
        }
    }

    pub fn from_file(file: FisherFile) -> Result<Self> {
        if file.format != FISHER_FORMAT {
            return Err(Error::Format(format!("not a Fisher file: {}", file.format)));
        }
        if file.version != FISHER_VERSION {
            return Err(Error::Format(format!(
                "Fisher file version {} (expected {FISHER_VERSION})",
                file.version
            )));
        }
        if file.sample_count == 0 || !(file.damping >= 0.0) {
            return Err(Error::Format("sample_count must be >= 1 and damping >= 0".into()));
        }
        let bad = |name: &str, what: &str| Error::Format(format!("layer {name}: {what}"));
        let mut layers = BTreeMap::new();
        for rec in file.layers {
            let curvature = match (file.kind, rec.diagonal, rec.input_factor, rec.grad_factor) {
                (FisherKind::Identity, None, None, None) => Curvature::Identity,
                (FisherKind::Diagonal, Some(f), None, None) => Curvature::Diagonal(
                    Matrix::new(rec.d_out, rec.d_in, f).map_err(|e| bad(&rec.name, &e.to_string()))?,
                ),
                (FisherKind::Kronecker, None, Some(a), Some(g)) => Curvature::Kronecker {
                    input: Matrix::new(rec.d_in, rec.d_in, a).map_err(|e| bad(&rec.name, &e.to_string()))?,
                    grad: Matrix::new(rec.d_out, rec.d_out, g).map_err(|e| bad(&rec.name, &e.to_string()))?,
                },
                _ => return Err(bad(&rec.name, "payload does not match estimator kind")),
            };
            layers.insert(
                rec.name,
                LayerFisher {
                    d_out: rec.d_out,
                    d_in: rec.d_in,
                    curvature,
                },
            );
        }
        Ok(Self {
            kind: file.kind,
            layers,
            sample_count: file.sample_count,
            damping: file.damping,
            seed: file.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(&self.to_file()).map_err(|e| Error::Format(e.to_string()))?;
        crate::report::write_file(path, json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: FisherFile =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    /// Loads and checks the layer dims against `net`.
    pub fn load_for(path: impl AsRef<Path>, net: &Network) -> Result<Self> {
        let est = Self::load(path)?;
        est.check_compatible(net)?;
        Ok(est)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFisherRecord {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagonal: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_factor: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_factor: Option<Vec<f64>>,
}

/// On-disk Fisher estimate. Payloads are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherFile {
    pub format: String,
    pub version: u32,
    pub kind: FisherKind,
    pub sample_count: usize,
    pub damping: f64,
    pub seed: u64,
    pub layers: Vec<LayerFisherRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::model::{Activation, HeadSpec, LinearLayer, NetworkSpec};

    fn linear_net(w: Matrix) -> Network {
        let classes = w.rows();
        let mut net = Network::new(
            NetworkSpec {
                input_dim: w.cols(),
                hidden: vec![],
                activation: Activation::Identity,
                head: HeadSpec::Classifier { classes },
            },
            0,
        )
        .unwrap();
        net.heads[0] = LinearLayer::new("head", w);
        net
    }

    fn small_net(seed: u64) -> (Network, Dataset) {
        let net = Network::new(
            NetworkSpec {
                input_dim: 5,
                hidden: vec![6],
                activation: Activation::Tanh,
                head: HeadSpec::Classifier { classes: 3 },
            },
            seed,
        )
        .unwrap();
        let x = Matrix::seeded_gaussian(80, 5, 0.0, 1.0, seed + 1);
        let labels = (0..80).map(|i| (i * 7 + seed as usize) % 3).collect();
        (net, Dataset::new(x, labels).unwrap())
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_sample_diagonal_is_squared_gradient() {
        let w = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25], [0.0, 1.0]]);
        let net = linear_net(w.clone());
        let x = Matrix::from_rows(&[[1.5, -0.5]]);
        let data = Dataset::new(x.clone(), vec![2]).unwrap();
        let est = estimate_diagonal(&net, "head", &names(&["head"]), &mut data.sequential_stream(), 1).unwrap();
        // g = softmax(Wx) - e_label, gradient = g xᵀ
        let z = w.matmul(&x.transpose()).unwrap();
        let denom: f64 = z.data().iter().map(|v| v.exp()).sum();
        let Curvature::Diagonal(f) = &est.layers["head"].curvature else { panic!() };
        for o in 0..3 {
            let g = z.get(o, 0).exp() / denom - if o == 2 { 1.0 } else { 0.0 };
            for i in 0..2 {
                let want = (g * x.get(0, i)).powi(2);
                assert!((f.get(o, i) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn perfectly_fit_model_has_zero_diagonal() {
        // Huge margins make every per-sample gradient underflow to zero.
        let net = linear_net(Matrix::from_rows(&[[1e3, 0.0], [-1e3, 0.0]]));
        let data = Dataset::new(Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0]]), vec![0, 0]).unwrap();
        let est = estimate_diagonal(&net, "head", &names(&["head"]), &mut data.sequential_stream(), 2).unwrap();
        let Curvature::Diagonal(f) = &est.layers["head"].curvature else { panic!() };
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn zero_inputs_give_damped_identity_factor() {
        let (net, _) = small_net(1);
        let data = Dataset::new(Matrix::zeros(10, 5), vec![0; 10]).unwrap();
        let est = estimate_kronecker(&net, "head", &names(&["fc1"]), &mut data.sequential_stream(), 10, 1e-3).unwrap();
        let Curvature::Kronecker { input, .. } = &est.layers["fc1"].curvature else { panic!() };
        assert_eq!(input, &Matrix::identity(5).scale(1e-3));
    }

    #[test]
    fn scaling_inputs_scales_input_factor_quadratically() {
        let w = Matrix::seeded_gaussian(3, 4, 0.0, 1.0, 2);
        let net = linear_net(w);
        let x = Matrix::seeded_gaussian(12, 4, 0.0, 1.0, 3);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let a1 = {
            let d = Dataset::new(x.clone(), labels.clone()).unwrap();
            let e = estimate_kronecker(&net, "head", &names(&["head"]), &mut d.sequential_stream(), 12, 0.0).unwrap();
            e.undamped_factors("head").unwrap().0
        };
        // Only the input factor is compared; g changes with the logits.
        let a2 = {
            let d = Dataset::new(x.scale(3.0), labels).unwrap();
            let e = estimate_kronecker(&net, "head", &names(&["head"]), &mut d.sequential_stream(), 12, 0.0).unwrap();
            e.undamped_factors("head").unwrap().0
        };
        assert!(a2.sub(&a1.scale(9.0)).unwrap().max_abs() < 1e-12 * a2.max_abs());
    }

    #[test]
    fn factors_symmetric_psd_and_diagonal_nonnegative() {
        let (net, data) = small_net(4);
        let layers = names(&["fc1", "head"]);
        let k = estimate(FisherKind::Kronecker, &net, "head", &layers, &data, &EstimateOptions { samples: 50, seed: 3, damping: 1e-8 }).unwrap();
        for lf in k.layers.values() {
            let Curvature::Kronecker { input, grad } = &lf.curvature else { panic!() };
            for m in [input, grad] {
                assert!(m.asymmetry() < 1e-10);
                let e = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data()).symmetric_eigenvalues();
                assert!(e.min() > 0.0, "damped factor not PD: {}", e.min());
            }
        }
        let d = estimate(FisherKind::Diagonal, &net, "head", &layers, &data, &EstimateOptions { samples: 50, seed: 3, damping: 0.0 }).unwrap();
        for lf in d.layers.values() {
            let Curvature::Diagonal(f) = &lf.curvature else { panic!() };
            assert!(f.data().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(k.sample_count, 50);
    }

    #[test]
    fn estimates_are_deterministic_and_chunking_invariant() {
        let (net, data) = small_net(5);
        let layers = names(&["fc1", "head"]);
        let a = estimate(FisherKind::Diagonal, &net, "head", &layers, &data, &EstimateOptions { samples: 70, seed: 9, damping: 0.0 }).unwrap();
        let b = estimate(FisherKind::Diagonal, &net, "head", &layers, &data, &EstimateOptions { samples: 70, seed: 9, damping: 0.0 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_is_data_free() {
        let (net, _) = small_net(6);
        let layers = names(&["fc1"]);
        let a = estimate_identity(&net, &layers).unwrap();
        assert_eq!(a, estimate_identity(&net, &layers).unwrap());
        assert_eq!(a.storage(), 0);
    }

    #[test]
    fn exhausted_stream_and_oversized_request() {
        let (net, data) = small_net(7);
        let layers = names(&["fc1"]);
        let mut s = data.sequential_stream();
        assert!(matches!(estimate_diagonal(&net, "head", &layers, &mut s, 81), Err(Error::Data(_))));
        assert!(matches!(
            estimate(FisherKind::Kronecker, &net, "head", &layers, &data, &EstimateOptions { samples: 81, seed: 0, damping: 0.0 }),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn file_round_trip_all_kinds() {
        let (net, data) = small_net(8);
        let layers = names(&["fc1", "head"]);
        let dir = tempfile::tempdir().unwrap();
        for kind in [FisherKind::Identity, FisherKind::Diagonal, FisherKind::Kronecker] {
            let est = estimate(kind, &net, "head", &layers, &data, &EstimateOptions { samples: 33, seed: 4, damping: 1e-8 }).unwrap();
            let p = dir.path().join(format!("{kind:?}.json"));
            est.save(&p).unwrap();
            let back = FisherEstimate::load_for(&p, &net).unwrap();
            assert_eq!(back, est);
            assert_eq!(back.sample_count, est.sample_count);
            assert_eq!(back.damping.to_bits(), est.damping.to_bits());
        }
    }

    #[test]
    fn mismatched_dims_and_versions_rejected() {
        let (net, data) = small_net(9);
        let est = estimate(FisherKind::Diagonal, &net, "head", &names(&["fc1"]), &data, &EstimateOptions { samples: 10, seed: 4, damping: 0.0 }).unwrap();
        let other = Network::new(
            NetworkSpec {
                input_dim: 5,
                hidden: vec![7],
                activation: Activation::Tanh,
                head: HeadSpec::Classifier { classes: 3 },
            },
            0,
        )
        .unwrap();
        assert!(matches!(est.check_compatible(&other), Err(Error::Shape(_))));
        let mut file = est.to_file();
        file.version = 2;
        assert!(matches!(FisherEstimate::from_file(file), Err(Error::Format(_))));
        let mut file = est.to_file();
        file.kind = FisherKind::Kronecker;
        assert!(matches!(FisherEstimate::from_file(file), Err(Error::Format(_))));
    }
}
