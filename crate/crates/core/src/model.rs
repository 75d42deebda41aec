//! Biasless linear-layer networks.
//!
//! A [`Network`] is a trunk of linear layers, each followed by the same
//! hidden activation, plus one or more named linear output heads that read the
//! last trunk activation. The classifier uses a task-specific head per task;
//! the character model has a single `lm` head that belongs to the base model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::tensor::{Matrix, Reduction, Tape, Var};

pub const CHECKPOINT_FORMAT: &str = "bayes-peft-network";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadSpec {
    Classifier { classes: usize },
    CharLm { vocab: usize, context_len: usize },
}

impl HeadSpec {
    pub fn outputs(&self) -> usize {
        match *self {
            HeadSpec::Classifier { classes } => classes,
            HeadSpec::CharLm { vocab, .. } => vocab,
        }
    }

    /// Name given to the head created with the network.
    pub fn default_head_name(&self) -> &'static str {
        match self {
            HeadSpec::Classifier { .. } => "head",
            HeadSpec::CharLm { .. } => "lm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: HeadSpec,
}

impl NetworkSpec {
    /// 16 → 32 → 32 → classes.
    pub fn classifier(classes: usize) -> Self {
        Self {
            input_dim: 16,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            head: HeadSpec::Classifier { classes },
        }
    }

    /// (vocab·context) → 64 → 64 → vocab over one-hot context windows.
    pub fn char_lm(vocab: usize, context_len: usize) -> Self {
        Self {
            input_dim: vocab * context_len,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            head: HeadSpec::CharLm { vocab, context_len },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) || self.head.outputs() == 0 {
            return Err(Error::Shape(format!("all layer dims must be positive: {self:?}")));
        }
        if let HeadSpec::CharLm { vocab, context_len } = self.head {
            if context_len == 0 {
                return Err(Error::Contract("char_lm context_len must be at least 1".into()));
            }
            if vocab * context_len != self.input_dim {
                return Err(Error::Shape(format!(
                    "char_lm input width {} != vocab {vocab} x context {context_len}",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }
}

/// Which matrix of a layer a parameter refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Weight,
    LoraA,
    LoraB,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: String,
    pub slot: Slot,
}

impl ParamId {
    pub fn new(layer: impl Into<String>, slot: Slot) -> Self {
        Self {
            layer: layer.into(),
            slot,
        }
    }
}

/// `s = W a` with `W: d_out x d_in`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    /// Base weight. With an adapter attached this is the frozen W⁰.
    pub weight: Matrix,
    /// Whether `weight` itself is updated by training.
    pub trainable: bool,
    pub adapter: Option<LoraAdapter>,
    /// Record inputs and pre-activation handles during forward passes.
    pub capture: bool,
    /// Snapshot of W⁰ for full fine-tuning, where ΔW = W − W⁰.
    pub anchor: Option<Matrix>,
    /// Part of the pre-trained model (as opposed to a head added later).
    pub pretrained: bool,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, weight: Matrix) -> Self {
        Self {
            name: name.into(),
            weight,
            trainable: true,
            adapter: None,
            capture: false,
            anchor: None,
            pretrained: true,
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    /// W⁰ + γABᵀ, or the base weight.
    pub fn effective_weight(&self) -> Matrix {
        match &self.adapter {
            Some(ad) => self
                .weight
                .add(&ad.delta())
                .expect("adapter dims checked at attach"),
            None => self.weight.clone(),
        }
    }

    /// Parameter shift from the pre-trained value, if one is defined.
    pub fn delta(&self) -> Option<Matrix> {
        match (&self.adapter, &self.anchor) {
            (Some(ad), _) => Some(ad.delta()),
            (None, Some(anchor)) => Some(self.weight.sub(anchor).expect("anchor dims match")),
            (None, None) => None,
        }
    }

    /// Starts full fine-tuning: W becomes trainable and W⁰ is remembered.
    pub fn set_anchor(&mut self) {
        self.anchor = Some(self.weight.clone());
        self.trainable = true;
    }

    pub fn trainable_params(&self) -> Vec<(Slot, &Matrix)> {
        let mut out = Vec::new();
        if let Some(ad) = &self.adapter {
            out.push((Slot::LoraA, &ad.a));
            out.push((Slot::LoraB, &ad.b));
        } else if self.trainable {
            out.push((Slot::Weight, &self.weight));
        }
        out
    }

    pub fn param_mut(&mut self, slot: Slot) -> Result<&mut Matrix> {
        match (slot, &mut self.adapter) {
            (Slot::Weight, None) => Ok(&mut self.weight),
            (Slot::LoraA, Some(ad)) => Ok(&mut ad.a),
            (Slot::LoraB, Some(ad)) => Ok(&mut ad.b),
            (slot, _) => Err(Error::Contract(format!(
                "layer {} has no trainable {slot:?} parameter",
                self.name
            ))),
        }
    }
}

/// Tape handles for a network's parameters and derived weights. One per tape.
#[derive(Debug, Default)]
pub struct Bindings {
    params: BTreeMap<ParamId, Var>,
    weights: HashMap<String, Var>,
    deltas: HashMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Var)> {
        self.params.iter()
    }

    pub fn param(&self, id: &ParamId) -> Option<Var> {
        self.params.get(id).copied()
    }
}

/// Per-layer record from a capturing forward pass.
#[derive(Debug, Clone)]
pub struct Capture {
    pub layer: String,
    /// Layer inputs `a_{l-1}`, one row per sample.
    pub input: Matrix,
    /// Pre-activation node `s_l`; its gradient rows are `g_l` per sample.
    pub preact: Var,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub captures: Vec<Capture>,
}

/// Evaluation summary over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub trunk: Vec<LinearLayer>,
    pub heads: Vec<LinearLayer>,
}

fn init_weight(d_out: usize, d_in: usize, seed: u64) -> Matrix {
    Matrix::seeded_gaussian(d_out, d_in, 0.0, 1.0 / (d_in as f64).sqrt(), seed)
}

/// SplitMix64 step; derives independent stream seeds from one base seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut trunk = Vec::new();
        let mut d_in = spec.input_dim;
        for (i, &d) in spec.hidden.iter().enumerate() {
            trunk.push(LinearLayer::new(
                format!("fc{}", i + 1),
                init_weight(d, d_in, mix_seed(seed, i as u64 + 1)),
            ));
            d_in = d;
        }
        let head = LinearLayer::new(
            spec.head.default_head_name(),
            init_weight(spec.head.outputs(), d_in, mix_seed(seed, 1000)),
        );
        Ok(Self {
            spec,
            trunk,
            heads: vec![head],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Width of the representation the heads read.
    pub fn feature_dim(&self) -> usize {
        self.trunk.last().map(|l| l.d_out()).unwrap_or(self.spec.input_dim)
    }

    pub fn default_head(&self) -> &str {
        self.spec.head.default_head_name()
    }

    pub fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.trunk.iter().chain(self.heads.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    pub fn layer(&self, name: &str) -> Result<&LinearLayer> {
        self.layers()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Contract(format!("no layer named {name}")))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut LinearLayer> {
        self.layers_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Contract(format!("no layer named {name}")))
    }

    fn head(&self, name: &str) -> Result<&LinearLayer> {
        self.heads
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Contract(format!("no head named {name}")))
    }

    /// Names of the layers traversed when predicting through `head`.
    pub fn path(&self, head: &str) -> Result<Vec<String>> {
        let h = self.head(head)?;
        Ok(self
            .trunk
            .iter()
            .map(|l| l.name.clone())
            .chain(std::iter::once(h.name.clone()))
            .collect())
    }

    /// Pre-trained layers on the path through `head`; the candidates for
    /// curvature estimation and regularization.
    pub fn pretrained_path(&self, head: &str) -> Result<Vec<String>> {
        Ok(self
            .path(head)?
            .into_iter()
            .filter(|n| self.layer(n).map(|l| l.pretrained).unwrap_or(false))
            .collect())
    }

    /// Appends a fresh trainable output head. Heads never carry a pre-trained
    /// value, so they are never regularized.
    pub fn attach_head(&mut self, name: &str, d_in: usize, outputs: usize, seed: u64) -> Result<()> {
        if d_in != self.feature_dim() {
            return Err(Error::Shape(format!(
                "head input dim {d_in} does not match trunk output dim {}",
                self.feature_dim()
            )));
        }
        if outputs == 0 {
            return Err(Error::Shape("head needs at least one output".into()));
        }
        if self.layers().any(|l| l.name == name) {
            return Err(Error::Contract(format!("layer {name} already exists")));
        }
        let mut layer = LinearLayer::new(name, init_weight(outputs, d_in, seed));
        layer.pretrained = false;
        self.heads.push(layer);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for l in self.layers_mut() {
            l.trainable = false;
        }
    }

    pub fn set_capture(&mut self, on: bool) {
        for l in self.layers_mut() {
            l.capture = on;
        }
    }

    pub fn param_mut(&mut self, id: &ParamId) -> Result<&mut Matrix> {
        self.layer_mut(&id.layer)?.param_mut(id.slot)
    }

    /// Every currently trainable parameter, in layer order.
    pub fn trainable_params(&self) -> Vec<(ParamId, &Matrix)> {
        self.layers()
            .flat_map(|l| {
                l.trainable_params()
                    .into_iter()
                    .map(move |(slot, m)| (ParamId::new(l.name.clone(), slot), m))
            })
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_params().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn total_base_count(&self) -> usize {
        self.layers().map(|l| l.weight.len()).sum()
    }

    /// Tape node for the effective weight of `layer`, created once per tape.
    pub fn weight_var(&self, tape: &mut Tape, binds: &mut Bindings, layer: &str) -> Result<Var> {
        if let Some(v) = binds.weights.get(layer) {
            return Ok(*v);
        }
        let l = self.layer(layer)?;
        let w = if l.adapter.is_some() {
            let base = tape.constant(l.weight.clone());
            let delta = self.delta_var(tape, binds, layer)?;
            tape.add(base, delta)?
        } else if l.trainable {
            let id = ParamId::new(layer, Slot::Weight);
            match binds.params.get(&id) {
                Some(v) => *v,
                None => {
                    let v = tape.param(l.weight.clone());
                    binds.params.insert(id, v);
                    v
                }
            }
        } else {
            tape.constant(l.weight.clone())
        };
        binds.weights.insert(layer.to_string(), w);
        Ok(w)
    }

    /// Tape node for ΔW of `layer`: γABᵀ with an adapter, W − W⁰ with an anchor.
    pub fn delta_var(&self, tape: &mut Tape, binds: &mut Bindings, layer: &str) -> Result<Var> {
        if let Some(v) = binds.deltas.get(layer) {
            return Ok(*v);
        }
        let l = self.layer(layer)?;
        let d = if let Some(ad) = &l.adapter {
            let a = *binds
                .params
                .entry(ParamId::new(layer, Slot::LoraA))
                .or_insert_with(|| tape.param(ad.a.clone()));
            let b = *binds
                .params
                .entry(ParamId::new(layer, Slot::LoraB))
                .or_insert_with(|| tape.param(ad.b.clone()));
            let ab = tape.matmul_t(a, b)?;
            tape.scale(ab, ad.gamma)
        } else if let Some(anchor) = &l.anchor {
            let w = self.weight_var(tape, binds, layer)?;
            let w0 = tape.constant(anchor.clone());
            tape.sub(w, w0)?
        } else {
            return Err(Error::Contract(format!(
                "layer {layer} has neither an adapter nor an anchor, so ΔW is undefined"
            )));
        };
        binds.deltas.insert(layer.to_string(), d);
        Ok(d)
    }

    fn activate(&self, tape: &mut Tape, s: Var) -> Var {
        match self.spec.activation {
            Activation::Relu => tape.relu(s),
            Activation::Tanh => tape.tanh(s),
            Activation::Identity => s,
        }
    }

    /// Logits for `inputs` (one sample per row) through the named head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binds: &mut Bindings,
        inputs: &Matrix,
        head: &str,
    ) -> Result<ForwardPass> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} does not match first layer input {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let head_layer = self.head(head)?;
        let mut captures = Vec::new();
        let mut h = tape.constant(inputs.clone());
        let n_trunk = self.trunk.len();
        for (i, layer) in self.trunk.iter().chain(std::iter::once(head_layer)).enumerate() {
            let w = self.weight_var(tape, binds, &layer.name)?;
            let s = tape.matmul_t(h, w)?;
            if layer.capture {
                tape.watch(s);
                captures.push(Capture {
                    layer: layer.name.clone(),
                    input: tape.value(h).clone(),
                    preact: s,
                });
            }
            h = if i < n_trunk { self.activate(tape, s) } else { s };
        }
        Ok(ForwardPass {
            logits: h,
            captures,
        })
    }

    /// Logits without gradient tracking.
    pub fn predict(&self, inputs: &Matrix, head: &str) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let frozen = self.frozen_view();
        let out = frozen.forward(&mut tape, &mut binds, inputs, head)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Copy with every layer constant and adapters merged, so evaluation
    /// builds no parameter nodes.
    fn frozen_view(&self) -> Network {
        let mut net = self.clone();
        for l in net.layers_mut() {
            l.weight = l.effective_weight();
            l.adapter = None;
            l.anchor = None;
            l.trainable = false;
            l.capture = false;
        }
        net
    }

    /// Mean cross-entropy of `labels` under the network's predictions.
    pub fn task_loss(&self, inputs: &Matrix, labels: &[usize], head: &str) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Contract("task loss over an empty batch".into()));
        }
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let out = self.forward(&mut tape, &mut binds, inputs, head)?;
        let loss = tape.softmax_cross_entropy(out.logits, labels, Reduction::Mean)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Loss, accuracy and perplexity = exp(loss) over a dataset, evaluated in
    /// fixed-size chunks in row order.
    pub fn evaluate(&self, data: &Dataset, head: &str) -> Result<EvalMetrics> {
        const CHUNK: usize = 512;
        let frozen = self.frozen_view();
        let n = data.len();
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (x, y) = data.batch(&idx)?;
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let out = frozen.forward(&mut tape, &mut binds, &x, head)?;
            let loss = tape.softmax_cross_entropy(out.logits, &y, Reduction::Sum)?;
            total_loss += tape.value(loss).get(0, 0);
            let logits = tape.value(out.logits);
            for (i, &label) in y.iter().enumerate() {
                if argmax(logits.row(i)) == label {
                    correct += 1;
                }
            }
            start = end;
        }
        let loss = total_loss / n as f64;
        Ok(EvalMetrics {
            loss,
            accuracy: correct as f64 / n as f64,
            perplexity: loss.exp(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<NetworkCheckpoint> {
        if self.layers().any(|l| l.adapter.is_some()) {
            return Err(Error::Contract(
                "base checkpoints hold plain weights; merge or save adapters separately".into(),
            ));
        }
        let layer = |l: &LinearLayer, role: LayerRole| LayerRecord {
            name: l.name.clone(),
            role,
            d_out: l.d_out(),
            d_in: l.d_in(),
            pretrained: l.pretrained,
            weight: l.weight.data().to_vec(),
        };
        Ok(NetworkCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            layers: self
                .trunk
                .iter()
                .map(|l| layer(l, LayerRole::Trunk))
                .chain(self.heads.iter().map(|l| layer(l, LayerRole::Head)))
                .collect(),
        })
    }

    pub fn from_checkpoint(ck: NetworkCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a network checkpoint: {}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "network checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.spec.validate()?;
        let mut trunk = Vec::new();
        let mut heads = Vec::new();
        for rec in ck.layers {
            let weight = Matrix::new(rec.d_out, rec.d_in, rec.weight)
                .map_err(|e| Error::Format(format!("layer {}: {e}", rec.name)))?;
            let mut layer = LinearLayer::new(rec.name, weight);
            layer.pretrained = rec.pretrained;
            match rec.role {
                LayerRole::Trunk => trunk.push(layer),
                LayerRole::Head => heads.push(layer),
            }
        }
        let mut d_in = ck.spec.input_dim;
        if trunk.len() != ck.spec.hidden.len() {
            return Err(Error::Format("trunk depth does not match declared dims".into()));
        }
        for (l, &d) in trunk.iter().zip(&ck.spec.hidden) {
            if l.d_in() != d_in || l.d_out() != d {
                return Err(Error::Format(format!("layer {} dims do not chain", l.name)));
            }
            d_in = d;
        }
        if heads.is_empty() || heads.iter().any(|h| h.d_in() != d_in) {
            return Err(Error::Format("head dims do not match trunk output".into()));
        }
        Ok(Self {
            spec: ck.spec,
            trunk,
            heads,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint()?)
            .map_err(|e| Error::Format(e.to_string()))?;
        crate::report::write_file(path, json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: NetworkCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ck)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Trunk,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub role: LayerRole,
    pub d_out: usize,
    pub d_in: usize,
    pub pretrained: bool,
    /// Row-major.
    pub weight: Vec<f64>,
}

/// Portable base-model record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    pub layers: Vec<LayerRecord>,
}
