//! Adam fine-tuning with the Laplace penalty, and the λ sweep.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fisher::FisherEstimate;
use crate::model::{mix_seed, EvalMetrics, Network, ParamId};
use crate::penalty::{penalty_value, total_loss_and_grads, PenaltyConfig, PenaltyKind};
use crate::report::{num, CellStore, Csv};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Always 0; present so reports state it explicitly.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            schedule: Schedule::LinearDecay,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::Config("weight_decay is fixed at 0".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::LinearDecay => self.learning_rate * (1.0 - step as f64 / total as f64),
        }
    }
}

/// Which evaluation number a task reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Loss,
    Perplexity,
}

impl MetricKind {
    pub fn of(self, m: &EvalMetrics) -> f64 {
        match self {
            MetricKind::Accuracy => m.accuracy,
            MetricKind::Loss => m.loss,
            MetricKind::Perplexity => m.perplexity,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == MetricKind::Accuracy
    }

    /// True when `a` is at least as good as `b`.
    pub fn at_least_as_good(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a >= b
        } else {
            a <= b
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Loss => "loss",
            MetricKind::Perplexity => "perplexity",
        }
    }
}

/// Held-out task-A data and the head it is read through.
#[derive(Debug, Clone, Copy)]
pub struct RetentionSet<'a> {
    pub data: &'a Dataset,
    pub head: &'a str,
    pub metric: MetricKind,
}

/// Fine-tuning data: task-B train and validation sets, the head they use,
/// and optionally a task-A set tracked for forgetting.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub head: &'a str,
    pub metric: MetricKind,
    pub retention: Option<RetentionSet<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch objective (task loss plus penalty).
    pub objective: f64,
    pub task_b: f64,
    pub retention: Option<f64>,
    pub penalty: f64,
    pub delta_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub train: TrainConfig,
    pub penalty_kind: PenaltyKind,
    pub lambda: f64,
    pub task_b_metric: MetricKind,
    pub retention_metric: Option<MetricKind>,
    pub epochs: Vec<EpochRecord>,
}

impl RunReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn to_csv(&self) -> Csv {
        let layers: Vec<String> = self.last().delta_norms.keys().cloned().collect();
        let mut header = vec![
            "epoch".to_string(),
            "objective".into(),
            format!("task_b_{}", self.task_b_metric.label()),
            "retention".into(),
            "penalty".into(),
        ];
        header.extend(layers.iter().map(|l| format!("delta_norm_{l}")));
        let mut csv = Csv::new(&header);
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                num(e.objective),
                num(e.task_b),
                e.retention.map(num).unwrap_or_default(),
                num(e.penalty),
            ];
            row.extend(layers.iter().map(|l| num(e.delta_norms[l])));
            csv.push(row);
        }
        csv
    }
}

/// Retention metric on held-out task-A data.
pub fn evaluate_retention(net: &Network, set: &RetentionSet) -> Result<f64> {
    if set.data.is_empty() {
        return Err(Error::Contract("retention set is empty".into()));
    }
    Ok(set.metric.of(&net.evaluate(set.data, set.head)?))
}

fn delta_norms(net: &Network) -> BTreeMap<String, f64> {
    net.layers()
        .filter_map(|l| l.delta().map(|d| (l.name.clone(), d.frobenius_norm())))
        .collect()
}

struct Adam {
    m: BTreeMap<ParamId, Matrix>,
    v: BTreeMap<ParamId, Matrix>,
    t: i32,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &BTreeMap<ParamId, Matrix>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (id, g) in grads {
            let m = self.m.entry(id.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(id.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let p = net.param_mut(id)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient for {id:?} has the wrong shape")));
            }
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((p, m), v), &g) in iter {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Minimizes task-B cross-entropy plus the penalty over the trainable
/// parameters. Batches are reshuffled each epoch from the config seed.
pub fn fit(
    mut net: Network,
    data: &FitData,
    fisher: Option<&FisherEstimate>,
    penalty: &PenaltyConfig,
    cfg: &TrainConfig,
) -> Result<(Network, RunReport)> {
    cfg.validate()?;
    penalty.validate(&net, fisher)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Contract("fine-tuning needs non-empty train and validation sets".into()));
    }
    if net.trainable_count() == 0 {
        return Err(Error::Contract("network has no trainable parameters".into()));
    }
    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7A1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(chunk)?;
            let (loss, grads) = total_loss_and_grads(&net, &x, &y, data.head, fisher, penalty)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    step,
                    message: format!("non-finite objective {loss} in epoch {epoch}"),
                });
            }
            adam.step(&mut net, &grads, cfg.lr_at(step, total), cfg)?;
            sum += loss;
            step += 1;
        }
        let task_b = data.metric.of(&net.evaluate(data.val, data.head)?);
        let retention = data.retention.as_ref().map(|r| evaluate_retention(&net, r)).transpose()?;
        epochs.push(EpochRecord {
            epoch,
            objective: sum / per_epoch as f64,
            task_b,
            retention,
            penalty: penalty_value(&net, fisher, penalty)?,
            delta_norms: delta_norms(&net),
        });
    }
    let report = RunReport {
        train: cfg.clone(),
        penalty_kind: penalty.kind,
        lambda: if penalty.is_active() { penalty.lambda } else { 0.0 },
        task_b_metric: data.metric,
        retention_metric: data.retention.map(|r| r.metric),
        epochs,
    };
    Ok((net, report))
}

/// Sample mean and standard deviation (n − 1 denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, n }
    }

    /// Pooled standard deviation of any number of groups.
    pub fn pooled(groups: &[Summary]) -> f64 {
        let dof: usize = groups.iter().map(|g| g.n.saturating_sub(1)).sum();
        if dof == 0 {
            return 0.0;
        }
        let ss: f64 = groups.iter().map(|g| g.n.saturating_sub(1) as f64 * g.sd * g.sd).sum();
        (ss / dof as f64).sqrt()
    }

    /// Pooled standard deviation of two groups.
    pub fn pooled_sd(&self, other: &Summary) -> f64 {
        let dof = (self.n + other.n).saturating_sub(2);
        if dof == 0 {
            return 0.0;
        }
        let ss = (self.n.saturating_sub(1)) as f64 * self.sd * self.sd
            + (other.n.saturating_sub(1)) as f64 * other.sd * other.sd;
        (ss / dof as f64).sqrt()
    }
}

/// How close to the unregularized task-B metric a run must stay to count
/// as matched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Tolerance {
    Absolute(f64),
    Relative(f64),
}

impl Tolerance {
    /// Whether `value` is no worse than `base` beyond the tolerance.
    pub fn matches(self, metric: MetricKind, value: f64, base: f64) -> bool {
        let slack = match self {
            Tolerance::Absolute(t) => t,
            Tolerance::Relative(t) => t * base.abs(),
        };
        if metric.higher_is_better() {
            value >= base - slack
        } else {
            value <= base + slack
        }
    }
}

/// Result of one (λ, seed) cell; failures are kept rather than aborting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub lambda: f64,
    pub seed: u64,
    pub task_b: Option<f64>,
    pub retention: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub task_b: Summary,
    pub retention: Summary,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: PenaltyKind,
    pub task_b_metric: MetricKind,
    pub retention_metric: MetricKind,
    pub tolerance: Tolerance,
    pub baseline: SweepRow,
    pub rows: Vec<SweepRow>,
    /// Chosen λ, or `None` when no grid value matched the baseline.
    pub selected: Option<f64>,
    pub monotonicity: Vec<MonotoneStep>,
    pub baseline_cells: Vec<CellOutcome>,
    pub cells: Vec<CellOutcome>,
}

/// Retention comparison between neighbouring grid values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneStep {
    pub from: f64,
    pub to: f64,
    pub seeds_non_worse: usize,
    pub seeds: usize,
}

impl SweepTable {
    pub fn selected_row(&self) -> Option<&SweepRow> {
        let lambda = self.selected?;
        self.rows.iter().find(|r| r.lambda == lambda)
    }

    pub fn cells_at(&self, lambda: f64) -> impl Iterator<Item = &CellOutcome> {
        self.cells.iter().filter(move |c| c.lambda == lambda)
    }

    /// Retention is non-worsening in λ for a majority of seeds at every step.
    pub fn is_monotone(&self) -> bool {
        self.monotonicity.iter().all(|m| 2 * m.seeds_non_worse > m.seeds)
    }

    /// Table with one row per λ: Method, λ, fine-tune metric, retention metric.
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&[
            "method",
            "lambda",
            &format!("finetune_{}_mean", self.task_b_metric.label()),
            &format!("finetune_{}_sd", self.task_b_metric.label()),
            &format!("retention_{}_mean", self.retention_metric.label()),
            &format!("retention_{}_sd", self.retention_metric.label()),
            "failures",
            "selected",
        ]);
        let mut push = |label: &str, r: &SweepRow, selected: bool| {
            csv.push(vec![
                label.to_string(),
                num(r.lambda),
                num(r.task_b.mean),
                num(r.task_b.sd),
                num(r.retention.mean),
                num(r.retention.sd),
                r.failures.to_string(),
                selected.to_string(),
            ])
        };
        push(PenaltyKind::None.label(), &self.baseline, false);
        for r in &self.rows {
            push(self.kind.label(), r, Some(r.lambda) == self.selected);
        }
        csv
    }
}

/// Among the λ whose mean task-B metric matches the baseline within
/// `tolerance`, picks the one with the best mean retention; equal retention
/// goes to the larger λ. Rows with failed cells are never selected.
pub fn select_lambda(
    rows: &[SweepRow],
    baseline: &SweepRow,
    task_b_metric: MetricKind,
    retention_metric: MetricKind,
    tolerance: Tolerance,
) -> Option<f64> {
    let mut best: Option<&SweepRow> = None;
    for r in rows {
        if r.failures > 0 || !tolerance.matches(task_b_metric, r.task_b.mean, baseline.task_b.mean) {
            continue;
        }
        best = match best {
            None => Some(r),
            Some(b) if r.retention.mean == b.retention.mean => Some(if r.lambda > b.lambda { r } else { b }),
            Some(b) if retention_metric.at_least_as_good(r.retention.mean, b.retention.mean) => Some(r),
            Some(b) => Some(b),
        };
    }
    best.map(|r| r.lambda)
}

/// Everything a sweep needs besides the grid.
pub struct SweepSpec<'a, F> {
    /// Builds the starting network (fresh adapters) for a seed.
    pub factory: F,
    pub data: FitData<'a>,
    pub fisher: Option<&'a FisherEstimate>,
    pub kind: PenaltyKind,
    pub layers: Vec<String>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub tolerance: Tolerance,
    /// Unregularized cells from an earlier sweep over the same data, train
    /// config and seeds; when absent the baseline is trained here.
    pub baseline: Option<Vec<CellOutcome>>,
    /// Finished cells are looked up here first and stored after running.
    pub store: Option<&'a CellStore>,
    pub key_prefix: String,
}

impl<'a, F> SweepSpec<'a, F>
where
    F: Fn(u64) -> Result<Network> + Sync,
{
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        factory: F,
        data: FitData<'a>,
        fisher: Option<&'a FisherEstimate>,
        kind: PenaltyKind,
        layers: Vec<String>,
        seeds: Vec<u64>,
        train: TrainConfig,
        tolerance: Tolerance,
    ) -> Self {
        Self {
            factory,
            data,
            fisher,
            kind,
            layers,
            seeds,
            train,
            tolerance,
            baseline: None,
            store: None,
            key_prefix: String::new(),
        }
    }

    /// Key of a cell in the store.
    pub fn cell_key(&self, kind: PenaltyKind, lambda: f64, seed: u64) -> String {
        if kind == PenaltyKind::None {
            format!("{}none/seed={seed}", self.key_prefix)
        } else {
            format!("{}{}/lambda={}/seed={seed}", self.key_prefix, kind.key(), num(lambda))
        }
    }

    /// Runs (or reloads) one cell. Fit failures become part of the outcome;
    /// only store failures are returned as errors.
    pub fn run_cell(&self, kind: PenaltyKind, lambda: f64, seed: u64) -> Result<CellOutcome> {
        let key = self.cell_key(kind, lambda, seed);
        if let Some(store) = self.store {
            if let Some(cell) = store.get::<CellOutcome>(&key)? {
                return Ok(cell);
            }
        }
        let cell = self.fit_cell(kind, lambda, seed);
        if let Some(store) = self.store {
            store.put(&key, &cell)?;
        }
        Ok(cell)
    }

    fn fit_cell(&self, kind: PenaltyKind, lambda: f64, seed: u64) -> CellOutcome {
        let outcome = (|| -> Result<(f64, f64)> {
            let net = (self.factory)(seed)?;
            let penalty = if kind == PenaltyKind::None {
                PenaltyConfig::none()
            } else {
                PenaltyConfig::new(kind, lambda, &self.layers)
            };
            let cfg = TrainConfig {
                seed,
                ..self.train.clone()
            };
            let (_, report) = fit(net, &self.data, self.fisher, &penalty, &cfg)?;
            let last = report.last();
            let retention = last
                .retention
                .ok_or_else(|| Error::Contract("sweeps need a retention set".into()))?;
            Ok((last.task_b, retention))
        })();
        match outcome {
            Ok((task_b, retention)) => CellOutcome {
                lambda,
                seed,
                task_b: Some(task_b),
                retention: Some(retention),
                error: None,
            },
            Err(e) => CellOutcome {
                lambda,
                seed,
                task_b: None,
                retention: None,
                error: Some(e.to_string()),
            },
        }
    }

    /// Unregularized cells, one per seed.
    pub fn baseline_cells(&self) -> Result<Vec<CellOutcome>> {
        if let Some(cells) = &self.baseline {
            return Ok(cells.clone());
        }
        self.seeds
            .par_iter()
            .map(|&s| self.run_cell(PenaltyKind::None, 0.0, s))
            .collect()
    }
}

fn summarize(lambda: f64, cells: &[CellOutcome]) -> SweepRow {
    let ok: Vec<&CellOutcome> = cells.iter().filter(|c| c.error.is_none()).collect();
    SweepRow {
        lambda,
        task_b: Summary::of(&ok.iter().map(|c| c.task_b.unwrap()).collect::<Vec<_>>()),
        retention: Summary::of(&ok.iter().map(|c| c.retention.unwrap()).collect::<Vec<_>>()),
        failures: cells.len() - ok.len(),
    }
}

/// For consecutive grid values, how many seeds did not get worse retention
/// when λ grew.
fn monotonicity(grid: &[f64], cells: &[CellOutcome], seeds: &[u64], metric: MetricKind) -> Vec<MonotoneStep> {
    let at = |lambda: f64, seed: u64| {
        cells
            .iter()
            .find(|c| c.lambda == lambda && c.seed == seed)
            .and_then(|c| c.retention)
    };
    grid.windows(2)
        .map(|w| {
            let non_worse = seeds
                .iter()
                .filter(|&&s| match (at(w[0], s), at(w[1], s)) {
                    (Some(lo), Some(hi)) => metric.at_least_as_good(hi, lo),
                    _ => false,
                })
                .count();
            MonotoneStep {
                from: w[0],
                to: w[1],
                seeds_non_worse: non_worse,
                seeds: seeds.len(),
            }
        })
        .collect()
}

/// One fit per (λ, seed) plus an unregularized baseline per seed. Cells may
/// run in parallel on the current rayon pool; the table is assembled in grid
/// order. A failing cell is recorded and the others still run.
pub fn sweep_lambda<F>(spec: &SweepSpec<'_, F>, grid: &[f64]) -> Result<SweepTable>
where
    F: Fn(u64) -> Result<Network> + Sync,
{
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if spec.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    if spec.kind == PenaltyKind::None {
        return Err(Error::Config("sweeps need a regularized penalty kind".into()));
    }
    let retention_metric = spec
        .data
        .retention
        .map(|r| r.metric)
        .ok_or_else(|| Error::Contract("sweeps need a retention set".into()))?;
    let base_cells = spec.baseline_cells()?;
    if base_cells.iter().map(|c| c.seed).collect::<Vec<_>>() != spec.seeds {
        return Err(Error::Contract("baseline cells do not match the sweep seeds".into()));
    }
    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&lambda| spec.seeds.iter().map(move |&s| (lambda, s)))
        .collect();
    let cells: Vec<CellOutcome> = jobs
        .par_iter()
        .map(|&(lambda, seed)| spec.run_cell(spec.kind, lambda, seed))
        .collect::<Result<_>>()?;
    let k = spec.seeds.len();
    let baseline = summarize(0.0, &base_cells);
    let rows: Vec<SweepRow> = grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| summarize(lambda, &cells[k * i..k * (i + 1)]))
        .collect();
    let selected = select_lambda(&rows, &baseline, spec.data.metric, retention_metric, spec.tolerance);
    let monotone = monotonicity(grid, &cells, &spec.seeds, retention_metric);
    Ok(SweepTable {
        kind: spec.kind,
        task_b_metric: spec.data.metric,
        retention_metric,
        tolerance: spec.tolerance,
        baseline,
        rows,
        selected,
        monotonicity: monotone,
        baseline_cells: base_cells,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_and_pooled_sd() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.sd, s.n), (2.0, 1.0, 3));
        let t = Summary::of(&[5.0, 5.0, 5.0]);
        assert!((s.pooled_sd(&t) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).sd, 0.0);
    }

    fn row(lambda: f64, task_b: f64, retention: f64) -> SweepRow {
        SweepRow {
            lambda,
            task_b: Summary { mean: task_b, sd: 0.0, n: 5 },
            retention: Summary { mean: retention, sd: 0.0, n: 5 },
            failures: 0,
        }
    }

    #[test]
    fn selection_takes_best_retention_among_matching() {
        let base = row(0.0, 0.95, 1.0);
        let rows = [row(1.0, 0.96, 0.8), row(10.0, 0.95, 0.6), row(100.0, 0.90, 0.2)];
        let pick = |tol| select_lambda(&rows, &base, MetricKind::Accuracy, MetricKind::Loss, tol);
        assert_eq!(pick(Tolerance::Absolute(0.0)), Some(10.0));
        assert_eq!(pick(Tolerance::Absolute(0.06)), Some(100.0));

        // Retention that worsens again at large λ is not chosen just for being larger.
        let rows = [row(1.0, 0.95, 0.3), row(10.0, 0.95, 0.7), row(100.0, 0.95, 0.7)];
        let pick = select_lambda(&rows, &base, MetricKind::Accuracy, MetricKind::Loss, Tolerance::Absolute(0.0));
        assert_eq!(pick, Some(1.0));
        let rows = [row(1.0, 0.95, 0.7), row(10.0, 0.95, 0.7)];
        let pick = select_lambda(&rows, &base, MetricKind::Accuracy, MetricKind::Loss, Tolerance::Absolute(0.0));
        assert_eq!(pick, Some(10.0));
        let mut failed = rows.clone();
        failed[1].failures = 1;
        assert_eq!(
            select_lambda(&failed, &base, MetricKind::Accuracy, MetricKind::Loss, Tolerance::Absolute(0.0)),
            Some(1.0)
        );
    }

    #[test]
    fn relative_tolerance_for_lower_is_better() {
        assert!(Tolerance::Relative(0.05).matches(MetricKind::Perplexity, 10.4, 10.0));
        assert!(!Tolerance::Relative(0.05).matches(MetricKind::Perplexity, 10.6, 10.0));
        assert!(Tolerance::Absolute(0.02).matches(MetricKind::Accuracy, 0.93, 0.95));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { weight_decay: 0.1, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn linear_decay_reaches_zero() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0, 10), 5e-3);
        assert_eq!(c.lr_at(10, 10), 0.0);
        let k = TrainConfig { schedule: Schedule::Constant, ..c };
        assert_eq!(k.lr_at(9, 10), 5e-3);
    }
}
