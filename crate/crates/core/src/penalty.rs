//! The Laplace regularizer `λ Σ_l vec(ΔW_l)ᵀ F_l vec(ΔW_l)` and its gradients.
//!
//! `vec` is column-major throughout, which makes `(A ⊗ G) vec(ΔW) =
//! vec(G ΔW A)` exact for symmetric `A`. The per-layer quadratic forms are:
//!
//! * identity: `‖ΔW‖²_F`
//! * diagonal: `⟨F, ΔW∘ΔW⟩`
//! * Kronecker: `⟨ΔW, G ΔW A⟩`
//!
//! There is no factor ½; λ absorbs it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{Curvature, FisherEstimate, FisherKind};
use crate::model::{Bindings, Network, ParamId, Slot};
use crate::tensor::{Matrix, Reduction, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    L2sp,
    Ewc,
    Kfac,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 4] = [PenaltyKind::None, PenaltyKind::L2sp, PenaltyKind::Ewc, PenaltyKind::Kfac];

    /// Curvature variant this penalty reads, if any.
    pub fn fisher_kind(self) -> Option<FisherKind> {
        match self {
            PenaltyKind::None => None,
            PenaltyKind::L2sp => Some(FisherKind::Identity),
            PenaltyKind::Ewc => Some(FisherKind::Diagonal),
            PenaltyKind::Kfac => Some(FisherKind::Kronecker),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PenaltyKind::None => "None",
            PenaltyKind::L2sp => "L2-SP",
            PenaltyKind::Ewc => "EWC",
            PenaltyKind::Kfac => "KFAC",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::L2sp => "l2sp",
            PenaltyKind::Ewc => "ewc",
            PenaltyKind::Kfac => "kfac",
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PenaltyKind::None),
            "l2sp" => Ok(PenaltyKind::L2sp),
            "ewc" => Ok(PenaltyKind::Ewc),
            "kfac" => Ok(PenaltyKind::Kfac),
            other => Err(Error::Config(format!(
                "unknown penalty kind {other:?} (expected none, l2sp, ewc or kfac)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub layers: BTreeSet<String>,
}

impl PenaltyConfig {
    pub fn none() -> Self {
        Self {
            kind: PenaltyKind::None,
            lambda: 0.0,
            layers: BTreeSet::new(),
        }
    }

    pub fn new<S: AsRef<str>>(kind: PenaltyKind, lambda: f64, layers: &[S]) -> Self {
        Self {
            kind,
            lambda,
            layers: layers.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != PenaltyKind::None
    }

    /// Checks λ, layer membership, and that the estimate carries the
    /// matching curvature variant with matching dims for every layer.
    pub fn validate(&self, net: &Network, fisher: Option<&FisherEstimate>) -> Result<()> {
        if !self.is_active() {
            return Ok(());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        for name in &self.layers {
            let layer = net.layer(name)?;
            if !layer.pretrained {
                return Err(Error::Config(format!("{name} has no pre-trained value and cannot be regularized")));
            }
            if layer.delta().is_none() {
                return Err(Error::Config(format!("{name} has neither an adapter nor an anchor")));
            }
        }
        let want = self.kind.fisher_kind().expect("active kind");
        match fisher {
            None if self.kind == PenaltyKind::L2sp => Ok(()),
            None => Err(Error::Config(format!("{} needs a Fisher estimate", self.kind.label()))),
            Some(est) => {
                for name in &self.layers {
                    let lf = est.layer(name).ok_or_else(|| {
                        Error::Config(format!("Fisher estimate has no entry for layer {name}"))
                    })?;
                    if lf.curvature.kind() != want {
                        return Err(Error::Config(format!(
                            "{} needs {want:?} curvature but layer {name} has {:?}",
                            self.kind.label(),
                            lf.curvature.kind()
                        )));
                    }
                    let l = net.layer(name)?;
                    if (l.d_out(), l.d_in()) != (lf.d_out, lf.d_in) {
                        return Err(Error::Shape(format!(
                            "estimate for {name} is {}x{}, layer is {}x{}",
                            lf.d_out,
                            lf.d_in,
                            l.d_out(),
                            l.d_in()
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

fn curvature_for<'a>(fisher: Option<&'a FisherEstimate>, name: &str) -> &'a Curvature {
    static IDENTITY: Curvature = Curvature::Identity;
    fisher
        .and_then(|f| f.layer(name))
        .map(|lf| &lf.curvature)
        .unwrap_or(&IDENTITY)
}

/// `vec(ΔW)ᵀ F vec(ΔW)` for one layer.
pub fn layer_quadratic(curv: &Curvature, delta: &Matrix) -> Result<f64> {
    match curv {
        Curvature::Identity => delta.inner(delta),
        Curvature::Diagonal(f) => f.inner(&delta.hadamard(delta)?),
        Curvature::Kronecker { input, grad } => delta.inner(&grad.matmul(delta)?.matmul(input)?),
    }
}

/// Gradient of [`layer_quadratic`] with respect to ΔW.
pub fn layer_quadratic_grad(curv: &Curvature, delta: &Matrix) -> Result<Matrix> {
    match curv {
        Curvature::Identity => Ok(delta.scale(2.0)),
        Curvature::Diagonal(f) => Ok(f.hadamard(delta)?.scale(2.0)),
        Curvature::Kronecker { input, grad } => Ok(grad.matmul(delta)?.matmul(input)?.scale(2.0)),
    }
}

/// λ Σ over the configured layers of the layer quadratic form.
pub fn penalty_value(net: &Network, fisher: Option<&FisherEstimate>, config: &PenaltyConfig) -> Result<f64> {
    if !config.is_active() {
        return Ok(0.0);
    }
    config.validate(net, fisher)?;
    let mut total = 0.0;
    for name in &config.layers {
        let delta = net.layer(name)?.delta().expect("validated");
        total += layer_quadratic(curvature_for(fisher, name), &delta)?;
    }
    Ok(config.lambda * total)
}

/// Closed-form penalty gradients per trainable parameter of the regularized
/// layers, chained through `ΔW = γABᵀ` (`∂/∂A = γ D B`, `∂/∂B = γ Dᵀ A`) or
/// taken directly for full fine-tuning.
pub fn penalty_gradients(
    net: &Network,
    fisher: Option<&FisherEstimate>,
    config: &PenaltyConfig,
) -> Result<BTreeMap<ParamId, Matrix>> {
    let mut out = BTreeMap::new();
    if !config.is_active() {
        return Ok(out);
    }
    config.validate(net, fisher)?;
    for name in &config.layers {
        let layer = net.layer(name)?;
        let delta = layer.delta().expect("validated");
        let d = layer_quadratic_grad(curvature_for(fisher, name), &delta)?.scale(config.lambda);
        match &layer.adapter {
            Some(ad) => {
                out.insert(ParamId::new(name.clone(), Slot::LoraA), d.matmul(&ad.b)?.scale(ad.gamma));
                out.insert(ParamId::new(name.clone(), Slot::LoraB), d.t_matmul(&ad.a)?.scale(ad.gamma));
            }
            None => {
                out.insert(ParamId::new(name.clone(), Slot::Weight), d);
            }
        }
    }
    Ok(out)
}

/// Records the penalty on `tape`, reusing any ΔW nodes already bound by a
/// forward pass. `None` when the penalty is inactive.
pub fn penalty_on_tape(
    tape: &mut Tape,
    binds: &mut Bindings,
    net: &Network,
    fisher: Option<&FisherEstimate>,
    config: &PenaltyConfig,
) -> Result<Option<Var>> {
    if !config.is_active() {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(config.layers.len());
    for name in &config.layers {
        let d = net.delta_var(tape, binds, name)?;
        let q = match curvature_for(fisher, name) {
            Curvature::Identity => tape.inner(d, d)?,
            Curvature::Diagonal(f) => {
                let fv = tape.constant(f.clone());
                let d2 = tape.mul(d, d)?;
                tape.inner(fv, d2)?
            }
            Curvature::Kronecker { input, grad } => match &net.layer(name)?.adapter {
                // With ΔW = γABᵀ the form collapses to γ²⟨AᵀGA, BᵀĀB⟩,
                // two r×r products instead of d_o×d_i ones.
                Some(ad) => {
                    let a = binds.param(&ParamId::new(name.clone(), Slot::LoraA)).expect("bound by delta_var");
                    let b = binds.param(&ParamId::new(name.clone(), Slot::LoraB)).expect("bound by delta_var");
                    let gv = tape.constant(grad.clone());
                    let av = tape.constant(input.clone());
                    let ga = tape.matmul(gv, a)?;
                    let at = tape.transpose(a);
                    let aga = tape.matmul(at, ga)?;
                    let ab = tape.matmul(av, b)?;
                    let bt = tape.transpose(b);
                    let bab = tape.matmul(bt, ab)?;
                    let q = tape.inner(aga, bab)?;
                    tape.scale(q, ad.gamma * ad.gamma)
                }
                None => {
                    let gv = tape.constant(grad.clone());
                    let av = tape.constant(input.clone());
                    let gd = tape.matmul(gv, d)?;
                    let gda = tape.matmul(gd, av)?;
                    tape.inner(d, gda)?
                }
            },
        };
        terms.push(q);
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut sum = first;
    for &t in rest {
        sum = tape.add(sum, t)?;
    }
    Ok(Some(tape.scale(sum, config.lambda)))
}

/// Task loss plus penalty, with gradients for every trainable parameter
/// from a single backward pass.
pub fn total_loss_and_grads(
    net: &Network,
    inputs: &Matrix,
    labels: &[usize],
    head: &str,
    fisher: Option<&FisherEstimate>,
    config: &PenaltyConfig,
) -> Result<(f64, BTreeMap<ParamId, Matrix>)> {
    if labels.is_empty() {
        return Err(Error::Contract("total loss over an empty batch".into()));
    }
    config.validate(net, fisher)?;
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let out = net.forward(&mut tape, &mut binds, inputs, head)?;
    let task = tape.softmax_cross_entropy(out.logits, labels, Reduction::Mean)?;
    let root = match penalty_on_tape(&mut tape, &mut binds, net, fisher, config)? {
        Some(p) => tape.add(task, p)?,
        None => task,
    };
    let value = tape.value(root).get(0, 0);
    let mut grads = tape.backward(root)?;
    let mut out = BTreeMap::new();
    for (id, v) in binds.params() {
        let g = grads
            .take(*v)
            .unwrap_or_else(|| Matrix::zeros(tape.value(*v).rows(), tape.value(*v).cols()));
        out.insert(id.clone(), g);
    }
    Ok((value, out))
}

pub fn total_loss(
    net: &Network,
    inputs: &Matrix,
    labels: &[usize],
    head: &str,
    fisher: Option<&FisherEstimate>,
    config: &PenaltyConfig,
) -> Result<f64> {
    Ok(net.task_loss(inputs, labels, head)? + penalty_value(net, fisher, config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::LayerFisher;
    use crate::lora::{attach_to_network, LoraAdapter, LoraConfig};
    use crate::model::NetworkSpec;
    use proptest::prelude::*;

    fn estimate_with(name: &str, curvature: Curvature, d_out: usize, d_in: usize) -> FisherEstimate {
        let kind = curvature.kind();
        FisherEstimate {
            kind,
            layers: [(name.to_string(), LayerFisher { d_out, d_in, curvature })].into_iter().collect(),
            sample_count: 1,
            damping: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn ewc_hand_value() {
        let f = Curvature::Diagonal(Matrix::from_rows(&[[1.0, 4.0]]));
        let d = Matrix::from_rows(&[[0.5, -0.5]]);
        assert_eq!(layer_quadratic(&f, &d).unwrap(), 1.25);
    }

    #[test]
    fn kfac_hand_value() {
        let k = Curvature::Kronecker {
            input: Matrix::identity(2),
            grad: Matrix::diag(&[2.0, 3.0]),
        };
        assert_eq!(layer_quadratic(&k, &Matrix::identity(2)).unwrap(), 5.0);
    }

    #[test]
    fn kfac_with_identity_factors_gives_l2sp_gradient() {
        let d = Matrix::seeded_gaussian(3, 4, 0.0, 1.0, 3);
        let k = Curvature::Kronecker {
            input: Matrix::identity(4),
            grad: Matrix::identity(3),
        };
        assert_eq!(
            layer_quadratic_grad(&k, &d).unwrap(),
            layer_quadratic_grad(&Curvature::Identity, &d).unwrap()
        );
    }

    fn lora_net(seed: u64) -> Network {
        let mut net = Network::new(NetworkSpec::classifier(3), seed).unwrap();
        attach_to_network(&mut net, &["fc1".into(), "fc2".into()], LoraConfig { rank: 2, gamma: 2.0 }, seed).unwrap();
        net
    }

    #[test]
    fn fresh_adapters_give_zero_penalty_and_gradient() {
        let net = lora_net(1);
        let layers = ["fc1", "fc2"];
        for kind in [PenaltyKind::L2sp] {
            let cfg = PenaltyConfig::new(kind, 10.0, &layers);
            assert_eq!(penalty_value(&net, None, &cfg).unwrap(), 0.0);
            for g in penalty_gradients(&net, None, &cfg).unwrap().values() {
                assert_eq!(g.max_abs(), 0.0);
            }
        }
        assert_eq!(penalty_value(&net, None, &PenaltyConfig::none()).unwrap(), 0.0);
    }

    #[test]
    fn variant_mismatch_is_config_error() {
        let net = lora_net(2);
        let est = estimate_with("fc1", Curvature::Diagonal(Matrix::filled(32, 16, 1.0)), 32, 16);
        let cfg = PenaltyConfig::new(PenaltyKind::Kfac, 1.0, &["fc1"]);
        assert!(matches!(penalty_value(&net, Some(&est), &cfg), Err(Error::Config(_))));
        let cfg = PenaltyConfig::new(PenaltyKind::Ewc, 1.0, &["fc2"]);
        assert!(matches!(penalty_value(&net, Some(&est), &cfg), Err(Error::Config(_))));
        let cfg = PenaltyConfig::new(PenaltyKind::Ewc, 1.0, &["fc1"]);
        assert!(matches!(penalty_value(&net, None, &cfg), Err(Error::Config(_))));
        let wrong = estimate_with("fc1", Curvature::Diagonal(Matrix::filled(16, 32, 1.0)), 16, 32);
        assert!(matches!(penalty_value(&net, Some(&wrong), &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn heads_cannot_be_regularized() {
        let mut net = lora_net(3);
        net.attach_head("task_b", 32, 4, 1).unwrap();
        let cfg = PenaltyConfig::new(PenaltyKind::L2sp, 1.0, &["task_b"]);
        assert!(matches!(cfg.validate(&net, None), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_zero_total_equals_task_loss() {
        let mut net = lora_net(4);
        randomize_b(&mut net, 5);
        let x = Matrix::seeded_gaussian(6, 16, 0.0, 1.0, 1);
        let y = [0, 1, 2, 0, 1, 2];
        let cfg = PenaltyConfig::new(PenaltyKind::L2sp, 0.0, &["fc1", "fc2"]);
        assert_eq!(
            total_loss(&net, &x, &y, "head", None, &cfg).unwrap(),
            net.task_loss(&x, &y, "head").unwrap()
        );
        let (v, _) = total_loss_and_grads(&net, &x, &y, "head", None, &cfg).unwrap();
        assert_eq!(v, net.task_loss(&x, &y, "head").unwrap());
    }

    fn randomize_b(net: &mut Network, seed: u64) {
        for (i, l) in net.layers_mut().enumerate() {
            if let Some(ad) = &mut l.adapter {
                ad.b = Matrix::seeded_gaussian(ad.b.rows(), ad.b.cols(), 0.0, 0.5, seed + i as u64);
                ad.a = Matrix::seeded_gaussian(ad.a.rows(), ad.a.cols(), 0.0, 0.5, seed + 100 + i as u64);
            }
        }
    }

    #[test]
    fn doubling_delta_quadruples_penalty() {
        let mut net = lora_net(6);
        randomize_b(&mut net, 7);
        let cfg = PenaltyConfig::new(PenaltyKind::L2sp, 3.0, &["fc1", "fc2"]);
        let p1 = penalty_value(&net, None, &cfg).unwrap();
        for l in net.layers_mut() {
            if let Some(ad) = &mut l.adapter {
                ad.gamma *= 2.0;
            }
        }
        let p2 = penalty_value(&net, None, &cfg).unwrap();
        assert!((p2 - 4.0 * p1).abs() < 1e-12 * p2);
    }

    #[test]
    fn tape_and_closed_form_gradients_agree() {
        let mut net = lora_net(8);
        randomize_b(&mut net, 9);
        let mut rng_seed = 20;
        let mut spd = |n: usize| {
            rng_seed += 1;
            let m = Matrix::seeded_gaussian(n, n, 0.0, 1.0, rng_seed);
            let mut s = m.t_matmul(&m).unwrap();
            s.add_diagonal(0.1).unwrap();
            s
        };
        let est = FisherEstimate {
            kind: FisherKind::Kronecker,
            layers: [
                ("fc1".to_string(), LayerFisher { d_out: 32, d_in: 16, curvature: Curvature::Kronecker { input: spd(16), grad: spd(32) } }),
                ("fc2".to_string(), LayerFisher { d_out: 32, d_in: 32, curvature: Curvature::Kronecker { input: spd(32), grad: spd(32) } }),
            ]
            .into_iter()
            .collect(),
            sample_count: 1,
            damping: 0.0,
            seed: 0,
        };
        let cfg = PenaltyConfig::new(PenaltyKind::Kfac, 0.7, &["fc1", "fc2"]);
        let closed = penalty_gradients(&net, Some(&est), &cfg).unwrap();
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let p = penalty_on_tape(&mut tape, &mut binds, &net, Some(&est), &cfg).unwrap().unwrap();
        assert!((tape.value(p).get(0, 0) - penalty_value(&net, Some(&est), &cfg).unwrap()).abs() < 1e-9);
        let grads = tape.backward(p).unwrap();
        for (id, g) in &closed {
            let t = grads.get(binds.param(id).unwrap()).unwrap();
            assert!(t.sub(g).unwrap().max_abs() <= 1e-10 * g.max_abs().max(1.0), "{id:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn penalty_is_nonnegative(seed in 0u64..10_000, lambda in 0.0f64..100.0) {
            let d = Matrix::seeded_gaussian(4, 3, 0.0, 1.0, seed);
            let a0 = Matrix::seeded_gaussian(3, 3, 0.0, 1.0, seed + 1);
            let g0 = Matrix::seeded_gaussian(4, 4, 0.0, 1.0, seed + 2);
            let k = Curvature::Kronecker { input: a0.t_matmul(&a0).unwrap(), grad: g0.t_matmul(&g0).unwrap() };
            let f = Curvature::Diagonal(Matrix::seeded_gaussian(4, 3, 0.0, 1.0, seed + 3).map(|v| v * v));
            for c in [&Curvature::Identity, &f, &k] {
                prop_assert!(lambda * layer_quadratic(c, &d).unwrap() >= 0.0);
            }
        }

        #[test]
        fn full_finetune_delta_uses_anchor(seed in 0u64..1000) {
            let mut net = Network::new(NetworkSpec::classifier(3), seed).unwrap();
            net.layer_mut("fc1").unwrap().set_anchor();
            let shift = Matrix::seeded_gaussian(32, 16, 0.0, 0.1, seed + 1);
            net.layer_mut("fc1").unwrap().weight.add_assign(&shift).unwrap();
            let cfg = PenaltyConfig::new(PenaltyKind::L2sp, 2.0, &["fc1"]);
            let p = penalty_value(&net, None, &cfg).unwrap();
            let want = 2.0 * shift.inner(&shift).unwrap();
            prop_assert!((p - want).abs() < 1e-12 * want);
            let g = penalty_gradients(&net, None, &cfg).unwrap();
            let gw = &g[&ParamId::new("fc1", Slot::Weight)];
            prop_assert!(gw.sub(&shift.scale(4.0)).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn lora_gradient_chain_by_hand() {
        // ΔW = γ a bᵀ with r = 1; l2sp: P = λ‖ΔW‖², ∂P/∂a = 2λγ² ‖b‖² a.
        let mut net = Network::new(NetworkSpec::classifier(3), 0).unwrap();
        let a = Matrix::seeded_gaussian(32, 1, 0.0, 1.0, 1);
        let b = Matrix::seeded_gaussian(16, 1, 0.0, 1.0, 2);
        net.layer_mut("fc1").unwrap().adapter = Some(LoraAdapter::new(a.clone(), b.clone(), 2.0).unwrap());
        let cfg = PenaltyConfig::new(PenaltyKind::L2sp, 0.5, &["fc1"]);
        let g = penalty_gradients(&net, None, &cfg).unwrap();
        let want = a.scale(2.0 * 0.5 * 4.0 * b.inner(&b).unwrap());
        assert!(g[&ParamId::new("fc1", Slot::LoraA)].sub(&want).unwrap().max_abs() < 1e-12);
    }
}
