//! Two-task transfer benchmarks and the studies run on them.

pub mod studies;
pub mod tasks;

pub use tasks::{make_charlm, make_clusters, PairKind, TaskPair};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lora::{attach_to_network, LoraConfig};
use crate::model::{mix_seed, EvalMetrics, Network};
use crate::penalty::PenaltyConfig;
use crate::trainer::{fit, FitData, RetentionSet, RunReport, TrainConfig};

/// Trains a fresh network on the task-A pre-training split.
pub fn pretrain(pair: &TaskPair, cfg: &TrainConfig) -> Result<(Network, RunReport)> {
    let net = Network::new(pair.kind.network_spec(), mix_seed(cfg.seed, 0xB0))?;
    let data = FitData {
        train: &pair.task_a.pretrain,
        val: &pair.task_a.retention,
        head: pair.kind.task_a_head(),
        metric: pair.kind.retention_metric(),
        retention: None,
    };
    fit(net, &data, None, &PenaltyConfig::none(), cfg)
}

/// Task-A metrics of a network on the held-out retention split.
pub fn task_a_metrics(pair: &TaskPair, net: &Network) -> Result<EvalMetrics> {
    net.evaluate(&pair.task_a.retention, pair.kind.task_a_head())
}

/// Layers that receive adapters and are regularized: every pre-trained
/// layer on the task-B path.
pub fn adapted_layers(pair: &TaskPair, base: &Network) -> Result<Vec<String>> {
    let mut probe = base.clone();
    prepare_head(pair.kind, &mut probe, 0)?;
    probe.pretrained_path(pair.kind.task_b_head())
}

fn prepare_head(kind: PairKind, net: &mut Network, seed: u64) -> Result<()> {
    if kind.task_b_head() != kind.task_a_head() {
        let d = net.feature_dim();
        net.attach_head(kind.task_b_head(), d, tasks::CLUSTER_CLASSES, mix_seed(seed, 0xB1))?;
    }
    Ok(())
}

/// Starting point of one fine-tuning run: the pre-trained network with a
/// fresh task-B head where needed and fresh adapters, all seeded by `seed`.
pub fn finetune_start(kind: PairKind, base: &Network, lora: LoraConfig, seed: u64) -> Result<Network> {
    let mut net = base.clone();
    prepare_head(kind, &mut net, seed)?;
    let layers = net.pretrained_path(kind.task_b_head())?;
    attach_to_network(&mut net, &layers, lora, mix_seed(seed, 0xB2))?;
    Ok(net)
}

/// Fine-tuning data view of a pair, tracking task-A retention.
pub fn fit_data(pair: &TaskPair) -> FitData<'_> {
    FitData {
        train: &pair.task_b.train,
        val: &pair.task_b.val,
        head: pair.kind.task_b_head(),
        metric: pair.kind.task_b_metric(),
        retention: Some(RetentionSet {
            data: &pair.task_a.retention,
            head: pair.kind.task_a_head(),
            metric: pair.kind.retention_metric(),
        }),
    }
}

/// Per-pair training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSettings {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub lora: LoraConfig,
}

impl PairSettings {
    pub fn defaults(kind: PairKind) -> Self {
        match kind {
            PairKind::Clusters => Self {
                pretrain: TrainConfig {
                    epochs: 10,
                    ..TrainConfig::default()
                },
                finetune: TrainConfig::default(),
                lora: LoraConfig::default(),
            },
            PairKind::Charlm => Self {
                pretrain: TrainConfig {
                    epochs: 8,
                    ..TrainConfig::default()
                },
                finetune: TrainConfig {
                    epochs: 10,
                    ..TrainConfig::default()
                },
                lora: LoraConfig::default(),
            },
        }
    }
}
