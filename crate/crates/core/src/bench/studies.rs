//! Forgetting, sample-size and cost studies.
//!
//! Every report carries the seeds and grids it was produced from together
//! with the crate version, so a run can be regenerated exactly.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adapted_layers, finetune_start, fit_data, pretrain, PairKind, PairSettings, TaskPair};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fisher::{estimate, estimate_identity, EstimateOptions, FisherEstimate, FisherKind};
use crate::lora::{attach_to_network, LoraConfig};
use crate::model::{mix_seed, Activation, HeadSpec, Network, NetworkSpec};
use crate::penalty::{penalty_gradients, penalty_value, PenaltyConfig, PenaltyKind};
use crate::report::{num, CellStore, Csv};
use crate::tensor::Matrix;
use crate::trainer::{
    evaluate_retention, fit, sweep_lambda, CellOutcome, MetricKind, RunReport, Summary, SweepSpec, SweepTable,
    Tolerance,
};

pub const REPORT_SCHEMA: u32 = 1;
pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seeds 0..5, one fine-tuning run each.
pub fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// λ grids for the forgetting study. The cluster pair uses the ×10 coarse
/// grid; the character model sits in a narrower useful band and gets
/// half-decade steps.
pub fn default_grids(kind: PairKind) -> BTreeMap<PenaltyKind, Vec<f64>> {
    let mut g = BTreeMap::new();
    match kind {
        PairKind::Clusters => {
            g.insert(PenaltyKind::L2sp, vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]);
            g.insert(PenaltyKind::Ewc, vec![1e2, 1e3, 1e4, 1e5, 1e6, 1e7]);
            g.insert(PenaltyKind::Kfac, vec![1e2, 1e3, 1e4, 1e5, 1e6, 1e7]);
        }
        PairKind::Charlm => {
            g.insert(PenaltyKind::L2sp, vec![1e-4, 3e-4, 1e-3, 3e-3]);
            g.insert(PenaltyKind::Ewc, vec![3e-2, 1e-1, 3e-1, 1.0]);
            g.insert(PenaltyKind::Kfac, vec![3e-2, 1e-1, 3e-1, 1.0]);
        }
    }
    g
}

/// λ used by the sample-size study: the value the forgetting study selects
/// on the default grid.
pub fn default_sample_size_lambdas(kind: PairKind) -> BTreeMap<PenaltyKind, f64> {
    let mut m = BTreeMap::new();
    match kind {
        PairKind::Clusters => {
            m.insert(PenaltyKind::Ewc, 1e3);
            m.insert(PenaltyKind::Kfac, 1e6);
        }
        PairKind::Charlm => {
            m.insert(PenaltyKind::Ewc, 3e-1);
            m.insert(PenaltyKind::Kfac, 3e-1);
        }
    }
    m
}

fn badness(metric: MetricKind, v: f64) -> f64 {
    if metric.higher_is_better() {
        -v
    } else {
        v
    }
}

/// A generated task pair together with its pre-trained network.
#[derive(Debug, Clone)]
pub struct PairContext {
    pub pair: TaskPair,
    pub base: Network,
    pub settings: PairSettings,
    /// Pre-trained layers that get adapters and are regularized.
    pub layers: Vec<String>,
    /// Retention metric of the pre-trained network.
    pub pretrained_retention: f64,
}

impl PairContext {
    /// Generates the pair from `pair_seed` and pre-trains on task A.
    pub fn build(kind: PairKind, pair_seed: u64, settings: PairSettings) -> Result<(Self, RunReport)> {
        let pair = TaskPair::generate(kind, pair_seed)?;
        let (base, report) = pretrain(&pair, &settings.pretrain)?;
        Ok((Self::with_base(pair, base, settings)?, report))
    }

    /// Wraps an existing pre-trained network.
    pub fn with_base(pair: TaskPair, base: Network, settings: PairSettings) -> Result<Self> {
        if base.layers().any(|l| l.adapter.is_some()) {
            return Err(Error::Contract("the pre-trained network must not carry adapters".into()));
        }
        let layers = adapted_layers(&pair, &base)?;
        let retention = fit_data(&pair).retention.expect("fit data tracks retention");
        let pretrained_retention = evaluate_retention(&base, &retention)?;
        Ok(Self {
            pair,
            base,
            settings,
            layers,
            pretrained_retention,
        })
    }

    pub fn kind(&self) -> PairKind {
        self.pair.kind
    }

    /// Fresh fine-tuning start for a training seed.
    pub fn start(&self, seed: u64) -> Result<Network> {
        finetune_start(self.kind(), &self.base, self.settings.lora, seed)
    }

    /// Curvature estimate used by `kind`, or `None` for the unregularized run.
    pub fn fisher(&self, kind: PenaltyKind, opts: &EstimateOptions) -> Result<Option<FisherEstimate>> {
        let Some(fk) = kind.fisher_kind() else {
            return Ok(None);
        };
        let est = if fk == FisherKind::Identity {
            estimate_identity(&self.base, &self.layers)?
        } else {
            estimate(
                fk,
                &self.base,
                self.kind().task_a_head(),
                &self.layers,
                &self.pair.task_a.fisher_pool,
                opts,
            )?
        };
        Ok(Some(est))
    }

    pub fn sweep_spec<'a>(
        &'a self,
        kind: PenaltyKind,
        fisher: Option<&'a FisherEstimate>,
        seeds: &[u64],
    ) -> SweepSpec<'a, impl Fn(u64) -> Result<Network> + Sync + 'a> {
        SweepSpec::new(
            move |s| self.start(s),
            fit_data(&self.pair),
            fisher,
            kind,
            self.layers.clone(),
            seeds.to_vec(),
            self.settings.finetune.clone(),
            self.kind().tolerance(),
        )
    }
}

/// Settings of a forgetting study.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingOptions {
    /// Regularized methods; the unregularized run is always included.
    pub methods: Vec<PenaltyKind>,
    pub seeds: Vec<u64>,
    pub grids: BTreeMap<PenaltyKind, Vec<f64>>,
    pub fisher: EstimateOptions,
}

impl ForgettingOptions {
    pub fn defaults(kind: PairKind) -> Self {
        Self {
            methods: vec![PenaltyKind::L2sp, PenaltyKind::Ewc, PenaltyKind::Kfac],
            seeds: default_seeds(),
            grids: default_grids(kind),
            fisher: EstimateOptions::new(1024, 0),
        }
    }
}

/// One method at its selected λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: PenaltyKind,
    /// Selected λ; `None` for the unregularized run or when no grid value
    /// kept task B within tolerance.
    pub lambda: Option<f64>,
    pub task_b: Summary,
    pub retention: Summary,
    /// Values per training seed, in seed order.
    pub seed_task_b: Vec<Option<f64>>,
    pub seed_retention: Vec<Option<f64>>,
    /// Fraction of the forgetting gap closed relative to the unregularized run.
    pub recovery: Option<f64>,
}

/// Per-seed comparisons at the selected λ of each method; counts seeds where
/// the first method retains at least as well as the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub seeds: usize,
    pub kfac_ge_ewc: usize,
    pub ewc_ge_l2sp: usize,
    pub kfac_ge_l2sp: usize,
    /// kfac ≥ ewc ≥ l2sp in the same seed.
    pub full_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub schema_version: u32,
    pub software_version: String,
    pub pair: PairKind,
    pub pair_seed: u64,
    pub pretrain_seed: u64,
    pub fisher: EstimateOptions,
    pub train_seeds: Vec<u64>,
    pub grids: BTreeMap<String, Vec<f64>>,
    pub task_b_metric: MetricKind,
    pub retention_metric: MetricKind,
    pub tolerance: Tolerance,
    pub pretrained_retention: f64,
    pub baseline: MethodResult,
    pub methods: Vec<MethodResult>,
    /// How far unregularized retention falls behind the pre-trained value,
    /// in pooled standard deviations (positive means forgetting).
    pub forgetting_margin_sd: f64,
    pub ordering: Option<OrderingCheck>,
    pub sweeps: Vec<SweepTable>,
}

fn seed_values(cells: &[&CellOutcome], seeds: &[u64], pick: fn(&CellOutcome) -> Option<f64>) -> Vec<Option<f64>> {
    seeds
        .iter()
        .map(|s| cells.iter().find(|c| c.seed == *s).and_then(|c| pick(c)))
        .collect()
}

fn summary_of(values: &[Option<f64>]) -> Summary {
    Summary::of(&values.iter().flatten().copied().collect::<Vec<_>>())
}

impl ForgettingReport {
    pub fn method(&self, kind: PenaltyKind) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == kind)
    }

    /// Table with the pre-trained retention and, per method, the selected λ
    /// with fine-tune and retention metrics.
    pub fn to_csv(&self) -> Csv {
        let tb = self.task_b_metric.label();
        let rt = self.retention_metric.label();
        let mut csv = Csv::new(&[
            "pair".to_string(),
            "method".to_string(),
            "lambda".to_string(),
            format!("pretrained_{rt}"),
            format!("finetune_{tb}_mean"),
            format!("finetune_{tb}_sd"),
            format!("retention_{rt}_mean"),
            format!("retention_{rt}_sd"),
            "recovery".to_string(),
        ]);
        for m in std::iter::once(&self.baseline).chain(&self.methods) {
            csv.push(vec![
                self.pair.key().to_string(),
                m.method.label().to_string(),
                m.lambda.map(num).unwrap_or_else(|| "-".into()),
                num(self.pretrained_retention),
                num(m.task_b.mean),
                num(m.task_b.sd),
                num(m.retention.mean),
                num(m.retention.sd),
                m.recovery.map(num).unwrap_or_else(|| "-".into()),
            ]);
        }
        csv
    }
}

/// Fine-tunes without a penalty and with each regularizer over its λ grid,
/// picks λ per method, and compares retention against the pre-trained
/// network. The unregularized runs are shared by all sweeps.
pub fn run_forgetting_study(
    ctx: &PairContext,
    opts: &ForgettingOptions,
    store: Option<&CellStore>,
) -> Result<ForgettingReport> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let kind = ctx.kind();
    let mut fishers = BTreeMap::new();
    for &m in &opts.methods {
        if m == PenaltyKind::None {
            continue;
        }
        if !opts.grids.contains_key(&m) {
            return Err(Error::Config(format!("no lambda grid for method {}", m.key())));
        }
        fishers.insert(m, ctx.fisher(m, &opts.fisher)?);
    }
    let mut base_spec = ctx.sweep_spec(PenaltyKind::None, None, &opts.seeds);
    base_spec.store = store;
    base_spec.key_prefix = "forgetting/".into();
    let base_cells = base_spec.baseline_cells()?;
    let task_b_metric = kind.task_b_metric();
    let retention_metric = kind.retention_metric();
    let pt = ctx.pretrained_retention;

    let base_refs: Vec<&CellOutcome> = base_cells.iter().collect();
    let seed_task_b = seed_values(&base_refs, &opts.seeds, |c| c.task_b);
    let seed_retention = seed_values(&base_refs, &opts.seeds, |c| c.retention);
    let none_ret = summary_of(&seed_retention);
    let gap = badness(retention_metric, none_ret.mean) - badness(retention_metric, pt);
    let baseline = MethodResult {
        method: PenaltyKind::None,
        lambda: None,
        task_b: summary_of(&seed_task_b),
        retention: none_ret,
        seed_task_b,
        seed_retention,
        recovery: None,
    };

    let mut sweeps = Vec::new();
    let mut methods = Vec::new();
    for (&m, fisher) in &fishers {
        let mut spec = ctx.sweep_spec(m, fisher.as_ref(), &opts.seeds);
        spec.store = store;
        spec.key_prefix = "forgetting/".into();
        spec.baseline = Some(base_cells.clone());
        let table = sweep_lambda(&spec, &opts.grids[&m])?;
        let (seed_task_b, seed_retention) = match table.selected {
            Some(l) => {
                let cells: Vec<&CellOutcome> = table.cells_at(l).collect();
                (
                    seed_values(&cells, &opts.seeds, |c| c.task_b),
                    seed_values(&cells, &opts.seeds, |c| c.retention),
                )
            }
            None => (vec![None; opts.seeds.len()], vec![None; opts.seeds.len()]),
        };
        let retention = summary_of(&seed_retention);
        let recovery = table
            .selected
            .map(|_| (badness(retention_metric, none_ret.mean) - badness(retention_metric, retention.mean)) / gap);
        methods.push(MethodResult {
            method: m,
            lambda: table.selected,
            task_b: summary_of(&seed_task_b),
            retention,
            seed_task_b,
            seed_retention,
            recovery,
        });
        sweeps.push(table);
    }

    let pt_group = Summary {
        mean: pt,
        sd: 0.0,
        n: baseline.retention.n,
    };
    let forgetting_margin_sd = gap / baseline.retention.pooled_sd(&pt_group);
    let ordering = ordering_check(&methods, retention_metric, opts.seeds.len());
    Ok(ForgettingReport {
        schema_version: REPORT_SCHEMA,
        software_version: SOFTWARE_VERSION.into(),
        pair: kind,
        pair_seed: ctx.pair.seed,
        pretrain_seed: ctx.settings.pretrain.seed,
        fisher: opts.fisher,
        train_seeds: opts.seeds.clone(),
        grids: opts
            .grids
            .iter()
            .filter(|(k, _)| fishers.contains_key(k))
            .map(|(k, v)| (k.key().to_string(), v.clone()))
            .collect(),
        task_b_metric,
        retention_metric,
        tolerance: kind.tolerance(),
        pretrained_retention: pt,
        baseline,
        methods,
        forgetting_margin_sd,
        ordering,
        sweeps,
    })
}

fn ordering_check(methods: &[MethodResult], metric: MetricKind, seeds: usize) -> Option<OrderingCheck> {
    let get = |k| methods.iter().find(|m| m.method == k);
    let (kfac, ewc, l2sp) = (get(PenaltyKind::Kfac)?, get(PenaltyKind::Ewc)?, get(PenaltyKind::L2sp)?);
    let ge = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if metric.at_least_as_good(a, b));
    let mut check = OrderingCheck {
        seeds,
        kfac_ge_ewc: 0,
        ewc_ge_l2sp: 0,
        kfac_ge_l2sp: 0,
        full_order: 0,
    };
    for i in 0..seeds {
        let (k, e, l) = (kfac.seed_retention[i], ewc.seed_retention[i], l2sp.seed_retention[i]);
        let ke = ge(k, e);
        let el = ge(e, l);
        check.kfac_ge_ewc += ke as usize;
        check.ewc_ge_l2sp += el as usize;
        check.kfac_ge_l2sp += ge(k, l) as usize;
        check.full_order += (ke && el) as usize;
    }
    Some(check)
}

/// λ shared by several pairs for one method: the largest value present in
/// every pair's grid that keeps task B within tolerance on all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedLambda {
    pub method: PenaltyKind,
    pub lambda: Option<f64>,
}

pub fn shared_lambdas(reports: &[&ForgettingReport]) -> Vec<SharedLambda> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    first
        .sweeps
        .iter()
        .map(|t| {
            let ok_everywhere = |lambda: f64| {
                reports.iter().all(|r| {
                    r.sweeps.iter().find(|s| s.kind == t.kind).is_some_and(|s| {
                        s.rows.iter().any(|row| {
                            row.lambda == lambda
                                && row.failures == 0
                                && s.tolerance.matches(s.task_b_metric, row.task_b.mean, s.baseline.task_b.mean)
                        })
                    })
                })
            };
            let lambda = t
                .rows
                .iter()
                .map(|r| r.lambda)
                .filter(|&l| ok_everywhere(l))
                .fold(None, |best: Option<f64>, l| Some(best.map_or(l, |b| b.max(l))));
            SharedLambda { method: t.kind, lambda }
        })
        .collect()
}

/// Settings of a sample-size study.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSizeOptions {
    /// Fisher sample counts, largest first.
    pub sizes: Vec<usize>,
    pub lambdas: BTreeMap<PenaltyKind, f64>,
    pub seeds: Vec<u64>,
    /// Mixed with each training seed to draw that run's Fisher samples.
    pub fisher_seed: u64,
    pub damping: f64,
}

impl SampleSizeOptions {
    pub fn defaults(kind: PairKind) -> Self {
        Self {
            sizes: vec![1024, 128, 16],
            lambdas: default_sample_size_lambdas(kind),
            seeds: default_seeds(),
            fisher_seed: 0,
            damping: crate::fisher::DEFAULT_DAMPING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub task_b: Summary,
    pub retention: Summary,
    pub seed_retention: Vec<Option<f64>>,
    pub cells: Vec<CellOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeMethod {
    pub method: PenaltyKind,
    pub lambda: f64,
    pub rows: Vec<SizeRow>,
    /// Range of mean retention across sizes over the pooled sd.
    pub spread_sd: f64,
    /// Seeds whose retention at the smallest size is strictly worse than at
    /// the largest.
    pub smallest_worse: usize,
    /// Mean retention loss from the largest to the smallest size.
    pub degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeReport {
    pub schema_version: u32,
    pub software_version: String,
    pub pair: PairKind,
    pub pair_seed: u64,
    pub pretrain_seed: u64,
    pub fisher_seed: u64,
    pub damping: f64,
    pub train_seeds: Vec<u64>,
    pub sizes: Vec<usize>,
    pub retention_metric: MetricKind,
    pub task_b_metric: MetricKind,
    pub pretrained_retention: f64,
    pub methods: Vec<SampleSizeMethod>,
    /// Whether kfac loses more retention than ewc at the smallest size.
    pub kfac_degrades_more: Option<bool>,
}

impl SampleSizeReport {
    pub fn method(&self, kind: PenaltyKind) -> Option<&SampleSizeMethod> {
        self.methods.iter().find(|m| m.method == kind)
    }

    pub fn to_csv(&self) -> Csv {
        let tb = self.task_b_metric.label();
        let rt = self.retention_metric.label();
        let mut csv = Csv::new(&[
            "pair".to_string(),
            "method".to_string(),
            "lambda".to_string(),
            "samples".to_string(),
            format!("finetune_{tb}_mean"),
            format!("finetune_{tb}_sd"),
            format!("retention_{rt}_mean"),
            format!("retention_{rt}_sd"),
        ]);
        for m in &self.methods {
            for r in &m.rows {
                csv.push(vec![
                    self.pair.key().to_string(),
                    m.method.label().to_string(),
                    num(m.lambda),
                    r.size.to_string(),
                    num(r.task_b.mean),
                    num(r.task_b.sd),
                    num(r.retention.mean),
                    num(r.retention.sd),
                ]);
            }
        }
        csv
    }
}

/// Fisher seed of one training run in the sample-size study.
pub fn run_fisher_seed(fisher_seed: u64, train_seed: u64) -> u64 {
    mix_seed(fisher_seed, train_seed)
}

/// Re-estimates the curvature at each sample count and fine-tunes with it at
/// a fixed λ per method.
pub fn run_sample_size_study(
    ctx: &PairContext,
    opts: &SampleSizeOptions,
    store: Option<&CellStore>,
) -> Result<SampleSizeReport> {
    let pool = ctx.pair.task_a.fisher_pool.len();
    if opts.sizes.is_empty() || opts.seeds.is_empty() || opts.lambdas.is_empty() {
        return Err(Error::Config("sample-size study needs sizes, seeds and methods".into()));
    }
    if let Some(&n) = opts.sizes.iter().find(|&&n| n == 0 || n > pool) {
        return Err(Error::Contract(format!("sample size {n} outside 1..={pool} (Fisher pool)")));
    }
    if let Some(k) = opts.lambdas.keys().find(|k| k.fisher_kind().is_none_or(|f| f == FisherKind::Identity)) {
        return Err(Error::Config(format!(
            "sample-size study needs a data-driven method, got {}",
            k.key()
        )));
    }
    let jobs: Vec<(PenaltyKind, f64, usize, u64)> = opts
        .lambdas
        .iter()
        .flat_map(|(&m, &l)| {
            opts.sizes
                .iter()
                .flat_map(move |&n| opts.seeds.iter().map(move |&s| (m, l, n, s)))
        })
        .collect();
    let cells: Vec<CellOutcome> = jobs
        .par_iter()
        .map(|&(m, lambda, n, seed)| {
            let key = format!("sample_size/{}/lambda={}/samples={n}/seed={seed}", m.key(), num(lambda));
            if let Some(store) = store {
                if let Some(cell) = store.get::<CellOutcome>(&key)? {
                    return Ok(cell);
                }
            }
            let cell = sample_size_cell(ctx, opts, m, lambda, n, seed);
            if let Some(store) = store {
                store.put(&key, &cell)?;
            }
            Ok(cell)
        })
        .collect::<Result<_>>()?;

    let metric = ctx.kind().retention_metric();
    let k = opts.seeds.len();
    let per_method = opts.sizes.len() * k;
    let methods: Vec<SampleSizeMethod> = opts
        .lambdas
        .iter()
        .enumerate()
        .map(|(mi, (&m, &lambda))| {
            let rows: Vec<SizeRow> = opts
                .sizes
                .iter()
                .enumerate()
                .map(|(si, &size)| {
                    let start = mi * per_method + si * k;
                    let cells = cells[start..start + k].to_vec();
                    let refs: Vec<&CellOutcome> = cells.iter().collect();
                    let seed_retention = seed_values(&refs, &opts.seeds, |c| c.retention);
                    SizeRow {
                        size,
                        task_b: summary_of(&seed_values(&refs, &opts.seeds, |c| c.task_b)),
                        retention: summary_of(&seed_retention),
                        seed_retention,
                        cells,
                    }
                })
                .collect();
            let means: Vec<f64> = rows.iter().map(|r| r.retention.mean).collect();
            let range = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - means.iter().cloned().fold(f64::INFINITY, f64::min);
            let pooled = Summary::pooled(&rows.iter().map(|r| r.retention).collect::<Vec<_>>());
            let (largest, smallest) = size_extremes(&opts.sizes);
            let smallest_worse = (0..k)
                .filter(|&i| {
                    match (rows[largest].seed_retention[i], rows[smallest].seed_retention[i]) {
                        (Some(big), Some(small)) => badness(metric, small) > badness(metric, big),
                        _ => false,
                    }
                })
                .count();
            SampleSizeMethod {
                method: m,
                lambda,
                spread_sd: range / pooled,
                smallest_worse,
                degradation: badness(metric, rows[smallest].retention.mean)
                    - badness(metric, rows[largest].retention.mean),
                rows,
            }
        })
        .collect();
    let find = |k| methods.iter().find(|m| m.method == k);
    let kfac_degrades_more = match (find(PenaltyKind::Kfac), find(PenaltyKind::Ewc)) {
        (Some(kf), Some(ew)) => Some(kf.degradation > ew.degradation),
        _ => None,
    };
    Ok(SampleSizeReport {
        schema_version: REPORT_SCHEMA,
        software_version: SOFTWARE_VERSION.into(),
        pair: ctx.kind(),
        pair_seed: ctx.pair.seed,
        pretrain_seed: ctx.settings.pretrain.seed,
        fisher_seed: opts.fisher_seed,
        damping: opts.damping,
        train_seeds: opts.seeds.clone(),
        sizes: opts.sizes.clone(),
        retention_metric: metric,
        task_b_metric: ctx.kind().task_b_metric(),
        pretrained_retention: ctx.pretrained_retention,
        methods,
        kfac_degrades_more,
    })
}

/// Indices of the largest and smallest sample counts.
fn size_extremes(sizes: &[usize]) -> (usize, usize) {
    let mut largest = 0;
    let mut smallest = 0;
    for (i, &n) in sizes.iter().enumerate() {
        if n > sizes[largest] {
            largest = i;
        }
        if n < sizes[smallest] {
            smallest = i;
        }
    }
    (largest, smallest)
}

fn sample_size_cell(
    ctx: &PairContext,
    opts: &SampleSizeOptions,
    method: PenaltyKind,
    lambda: f64,
    size: usize,
    seed: u64,
) -> CellOutcome {
    let outcome = (|| -> Result<(f64, f64)> {
        let est_opts = EstimateOptions {
            samples: size,
            seed: run_fisher_seed(opts.fisher_seed, seed),
            damping: opts.damping,
        };
        let fisher = ctx.fisher(method, &est_opts)?;
        let penalty = PenaltyConfig::new(method, lambda, &ctx.layers);
        let cfg = crate::trainer::TrainConfig {
            seed,
            ..ctx.settings.finetune.clone()
        };
        let (_, report) = fit(ctx.start(seed)?, &fit_data(&ctx.pair), fisher.as_ref(), &penalty, &cfg)?;
        let last = report.last();
        Ok((last.task_b, last.retention.expect("fit data tracks retention")))
    })();
    match outcome {
        Ok((b, r)) => CellOutcome {
            lambda,
            seed,
            task_b: Some(b),
            retention: Some(r),
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

/// Settings of the cost study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOptions {
    /// Side lengths of the square layer.
    pub dims: Vec<usize>,
    /// Samples per estimate.
    pub samples: usize,
    /// Timed repetitions; the median is reported.
    pub repeats: usize,
    pub seed: u64,
    pub rank: usize,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            dims: vec![8, 16, 32, 64],
            samples: 256,
            repeats: 5,
            seed: 0,
            rank: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: PenaltyKind,
    pub dim: usize,
    pub params: usize,
    /// Reals stored by the curvature estimate.
    pub storage: usize,
    /// Samples pushed through the network to estimate.
    pub samples_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub software_version: String,
    pub options: CostOptions,
    pub rows: Vec<CostRow>,
    /// Log-log slope of storage against the dim, per method with nonzero storage.
    pub storage_exponents: BTreeMap<String, f64>,
}

impl CostReport {
    pub fn row(&self, method: PenaltyKind, dim: usize) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.method == method && r.dim == dim)
    }

    /// Storage ratio between consecutive dims that double.
    pub fn doubling_ratios(&self, method: PenaltyKind) -> Vec<f64> {
        let dims = &self.options.dims;
        dims.windows(2)
            .filter(|w| w[1] == 2 * w[0])
            .filter_map(|w| {
                let a = self.row(method, w[0])?.storage as f64;
                let b = self.row(method, w[1])?.storage as f64;
                (a > 0.0).then(|| b / a)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["method", "dim", "params", "storage", "samples_used"]);
        for r in &self.rows {
            csv.push(vec![
                r.method.label().to_string(),
                r.dim.to_string(),
                r.params.to_string(),
                r.storage.to_string(),
                r.samples_used.to_string(),
            ]);
        }
        csv
    }
}

/// Wall-clock measurements, kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTiming {
    pub rows: Vec<TimingRow>,
    /// Log-log slopes of time against the dim.
    pub estimate_exponents: BTreeMap<String, f64>,
    pub penalty_exponents: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: PenaltyKind,
    pub dim: usize,
    pub estimate_seconds: f64,
    /// One penalty value plus its gradients.
    pub penalty_seconds: f64,
}

/// Least-squares slope of ln y on ln x; points with y ≤ 0 are skipped.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn median_seconds(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Estimation and penalty cost of each method on a single square layer.
pub fn run_cost_study(opts: &CostOptions) -> Result<(CostReport, CostTiming)> {
    if opts.dims.is_empty() || opts.samples == 0 || opts.rank == 0 {
        return Err(Error::Config("cost study needs dims, samples and a rank".into()));
    }
    let methods = [PenaltyKind::L2sp, PenaltyKind::Ewc, PenaltyKind::Kfac];
    let layers = vec!["fc1".to_string()];
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for &d in &opts.dims {
        let spec = NetworkSpec {
            input_dim: d,
            hidden: vec![d],
            activation: Activation::Tanh,
            head: HeadSpec::Classifier { classes: d },
        };
        let base = Network::new(spec, mix_seed(opts.seed, d as u64))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0xC0 + d as u64));
        let inputs: Vec<f64> = (0..opts.samples * d).map(|_| rng.sample(StandardNormal)).collect();
        let labels: Vec<usize> = (0..opts.samples).map(|_| rng.gen_range(0..d)).collect();
        let pool = Dataset::new(Matrix::new(opts.samples, d, inputs)?, labels)?;
        let est_opts = EstimateOptions::new(opts.samples, opts.seed);
        let mut adapted = base.clone();
        let lora = LoraConfig {
            rank: opts.rank,
            ..LoraConfig::default()
        };
        attach_to_network(&mut adapted, &layers, lora, mix_seed(opts.seed, 0xAD))?;
        // B starts at zero; give it values so the penalty does real work.
        {
            let ad = adapted.layer_mut("fc1")?.adapter.as_mut().expect("attached");
            let values = (0..ad.b.len()).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.01).collect();
            ad.b = Matrix::new(ad.b.rows(), ad.b.cols(), values)?;
        }
        for &m in &methods {
            let fk = m.fisher_kind().expect("regularized method");
            let run = || -> Result<FisherEstimate> {
                if fk == FisherKind::Identity {
                    estimate_identity(&base, &layers)
                } else {
                    estimate(fk, &base, "head", &layers, &pool, &est_opts)
                }
            };
            let fisher = run()?;
            let estimate_seconds = median_seconds(opts.repeats, || run().map(|_| ()))?;
            let cfg = PenaltyConfig::new(m, 1.0, &layers);
            let penalty_seconds = median_seconds(opts.repeats, || {
                penalty_value(&adapted, Some(&fisher), &cfg)?;
                penalty_gradients(&adapted, Some(&fisher), &cfg).map(|_| ())
            })?;
            rows.push(CostRow {
                method: m,
                dim: d,
                params: d * d,
                storage: fisher.storage(),
                samples_used: if fk == FisherKind::Identity { 0 } else { opts.samples },
            });
            timing.push(TimingRow {
                method: m,
                dim: d,
                estimate_seconds,
                penalty_seconds,
            });
        }
    }
    let slope = |pick: &dyn Fn(PenaltyKind) -> Vec<(f64, f64)>| -> BTreeMap<String, f64> {
        methods
            .iter()
            .map(|&m| (m.key().to_string(), log_log_slope(&pick(m))))
            .filter(|(_, s)| s.is_finite())
            .collect()
    };
    let storage_exponents = slope(&|m| {
        rows.iter()
            .filter(|r| r.method == m)
            .map(|r| (r.dim as f64, r.storage as f64))
            .collect()
    });
    let estimate_exponents = slope(&|m| {
        timing
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.dim as f64, r.estimate_seconds))
            .collect()
    });
    let penalty_exponents = slope(&|m| {
        timing
            .iter()
            .filter(|r| r.method == m)
            .map(|r| (r.dim as f64, r.penalty_seconds))
            .collect()
    });
    Ok((
        CostReport {
            schema_version: REPORT_SCHEMA,
            software_version: SOFTWARE_VERSION.into(),
            options: opts.clone(),
            rows,
            storage_exponents,
        },
        CostTiming {
            rows: timing,
            estimate_exponents,
            penalty_exponents,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cost_storage_is_exact() {
        let opts = CostOptions {
            dims: vec![4, 8],
            samples: 16,
            repeats: 1,
            ..CostOptions::default()
        };
        let (report, _) = run_cost_study(&opts).unwrap();
        assert_eq!(report.row(PenaltyKind::L2sp, 8).unwrap().storage, 0);
        assert_eq!(report.row(PenaltyKind::Ewc, 8).unwrap().storage, 64);
        assert_eq!(report.row(PenaltyKind::Kfac, 8).unwrap().storage, 128);
        assert_eq!(report.doubling_ratios(PenaltyKind::Kfac), vec![4.0]);
    }

    #[test]
    fn extremes_ignore_order() {
        assert_eq!(size_extremes(&[128, 1024, 16]), (1, 2));
    }
}
