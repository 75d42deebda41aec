//! Low-rank adaptation: `W = W⁰ + γ A Bᵀ` with `A: d_out x r`, `B: d_in x r`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mix_seed, LinearLayer, Network};
use crate::tensor::Matrix;

pub const ADAPTER_FORMAT: &str = "bayes-peft-adapters";
pub const ADAPTER_VERSION: u32 = 1;

/// Standard deviation of the Gaussian initialization of `A`.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Applied as given; not divided by the rank.
    pub gamma: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub gamma: f64,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, gamma: f64) -> Result<Self> {
        if a.cols() != b.cols() {
            return Err(Error::Shape(format!(
                "A is {}x{} but B is {}x{}; both need r columns",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Contract(format!("scaling factor must be positive, got {gamma}")));
        }
        let rank = a.cols();
        Ok(Self { a, b, gamma, rank })
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.rows()
    }

    /// γ A Bᵀ
    pub fn delta(&self) -> Matrix {
        self.a
            .matmul_t(&self.b)
            .expect("A and B share the rank dimension")
            .scale(self.gamma)
    }
}

/// Attaches a fresh adapter: `A ~ N(0, 0.02²)`, `B = 0`, so ΔW starts at 0.
/// Freezes the base weight.
pub fn attach_lora(layer: &mut LinearLayer, rank: usize, gamma: f64, seed: u64) -> Result<()> {
    if layer.adapter.is_some() {
        return Err(Error::Contract(format!("layer {} already has an adapter", layer.name)));
    }
    if rank == 0 || rank > layer.d_out().min(layer.d_in()) {
        return Err(Error::Contract(format!(
            "rank {rank} not in 1..={} for {}x{} layer {}",
            layer.d_out().min(layer.d_in()),
            layer.d_out(),
            layer.d_in(),
            layer.name
        )));
    }
    let a = Matrix::seeded_gaussian(layer.d_out(), rank, 0.0, INIT_STD, seed);
    let b = Matrix::zeros(layer.d_in(), rank);
    layer.adapter = Some(LoraAdapter::new(a, b, gamma)?);
    layer.trainable = false;
    layer.anchor = None;
    Ok(())
}

pub fn delta_weight(layer: &LinearLayer) -> Result<Matrix> {
    layer
        .adapter
        .as_ref()
        .map(LoraAdapter::delta)
        .ok_or_else(|| Error::Contract(format!("layer {} has no adapter", layer.name)))
}

/// Folds the adapter into the base weight and removes it.
pub fn merge(layer: &mut LinearLayer) -> Result<()> {
    let delta = delta_weight(layer)?;
    layer.weight.add_assign(&delta)?;
    layer.adapter = None;
    Ok(())
}

/// Attaches adapters to the named layers, each with its own derived seed,
/// and freezes everything else that is not a fresh head. Layers narrower
/// than the configured rank get a full-rank adapter instead.
pub fn attach_to_network(net: &mut Network, layers: &[String], config: LoraConfig, seed: u64) -> Result<()> {
    for (i, name) in layers.iter().enumerate() {
        let layer = net.layer_mut(name)?;
        if !layer.pretrained {
            return Err(Error::Contract(format!("{name} has no pre-trained value to adapt")));
        }
        let rank = config.rank.min(layer.d_out()).min(layer.d_in());
        attach_lora(layer, rank, config.gamma, mix_seed(seed, 0xA0 + i as u64))?;
    }
    for l in net.layers_mut() {
        if l.pretrained {
            l.trainable = false;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub layer: String,
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub gamma: f64,
    /// Row-major `d_out x rank`.
    pub a: Vec<f64>,
    /// Row-major `d_in x rank`.
    pub b: Vec<f64>,
}

/// Adapter-only checkpoint, stored apart from the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub version: u32,
    pub adapters: Vec<AdapterRecord>,
}

impl AdapterCheckpoint {
    pub fn from_network(net: &Network) -> Self {
        let adapters = net
            .layers()
            .filter_map(|l| {
                l.adapter.as_ref().map(|ad| AdapterRecord {
                    layer: l.name.clone(),
                    d_out: ad.d_out(),
                    d_in: ad.d_in(),
                    rank: ad.rank,
                    gamma: ad.gamma,
                    a: ad.a.data().to_vec(),
                    b: ad.b.data().to_vec(),
                })
            })
            .collect();
        Self {
            format: ADAPTER_FORMAT.into(),
            version: ADAPTER_VERSION,
            adapters,
        }
    }

    /// Installs the adapters onto a base network with matching dims.
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        if self.format != ADAPTER_FORMAT || self.version != ADAPTER_VERSION {
            return Err(Error::Format(format!(
                "adapter file {} v{} not understood",
                self.format, self.version
            )));
        }
        for rec in &self.adapters {
            let layer = net.layer_mut(&rec.layer)?;
            if (layer.d_out(), layer.d_in()) != (rec.d_out, rec.d_in) {
                return Err(Error::Shape(format!(
                    "adapter for {} expects {}x{}, base layer is {}x{}",
                    rec.layer,
                    rec.d_out,
                    rec.d_in,
                    layer.d_out(),
                    layer.d_in()
                )));
            }
            let a = Matrix::new(rec.d_out, rec.rank, rec.a.clone()).map_err(|e| Error::Format(e.to_string()))?;
            let b = Matrix::new(rec.d_in, rec.rank, rec.b.clone()).map_err(|e| Error::Format(e.to_string()))?;
            layer.adapter = Some(LoraAdapter::new(a, b, rec.gamma)?);
            layer.trainable = false;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        crate::report::write_file(path, json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
