//! Command-line front end.
//!
//! Output layout under the output root:
//!
//! ```text
//! <pair>/checkpoint.json          pre-trained network
//! <pair>/pretrain/                pre-training report
//! <pair>/fisher_<kind>.json       curvature estimate
//! <pair>/estimate_<kind>/         estimation report
//! <pair>/finetune_<kind>/         one fine-tuning run and its adapters
//! <pair>/sweep_<kind>/            λ sweep, with finished cells in cells/
//! <pair>/study_<forgetting|sample_size>/
//! study_cost/                     cost study; wall-clock times in timing.json
//! ```
//!
//! Every command directory holds `report.json` (with the effective config
//! embedded), CSV tables, `seeds.json` and `effective_config.toml`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::bench::studies::{
    run_cost_study, run_forgetting_study, run_sample_size_study, ForgettingOptions, PairContext, SampleSizeOptions,
    REPORT_SCHEMA, SOFTWARE_VERSION,
};
use crate::bench::{task_a_metrics, TaskPair};
use crate::config::{Config, StudyKind};
use crate::error::{Error, Result};
use crate::fisher::{EstimateOptions, FisherEstimate};
use crate::lora::AdapterCheckpoint;
use crate::model::{EvalMetrics, Network};
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::report::{write_file, write_json, CellStore};
use crate::trainer::{fit, sweep_lambda, TrainConfig};
use crate::bench::fit_data;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "BAYES_PEFT_OUT";

#[derive(Debug, Parser)]
#[command(name = "bayes-peft", version, about = "Laplace-regularized LoRA fine-tuning lab")]
pub struct Cli {
    /// TOML configuration; defaults apply to every key not set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root [default: $BAYES_PEFT_OUT or ./out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the top-level `seed` of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweep and study cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the network on task A and write the checkpoint.
    Pretrain,
    /// Estimate the curvature named by `fisher.kind`.
    Estimate,
    /// Fine-tune once on task B with `penalty.kind` at `penalty.lambda`.
    Finetune,
    /// Fine-tune over `sweep.grid` and select λ.
    Sweep,
    /// Run the study named by `study.kind`.
    Study,
}

impl Command {
    fn key(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Estimate => "estimate",
            Command::Finetune => "finetune",
            Command::Sweep => "sweep",
            Command::Study => "study",
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    software_version: &'static str,
    command: &'static str,
    seeds: &'a Seeds,
    effective_config: &'a Config,
    result: T,
}

/// Every seed a command used.
#[derive(Debug, Clone, Default, Serialize)]
struct Seeds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pair: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrain: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fisher: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    train: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost: Option<u64>,
}

/// Which pre-training produced a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
struct CheckpointOrigin {
    pair: crate::bench::PairKind,
    seed: u64,
    pretrain: TrainConfig,
}

impl CheckpointOrigin {
    fn of(cfg: &Config) -> Self {
        Self {
            pair: cfg.pair,
            seed: cfg.seed,
            pretrain: cfg.pretrain.clone(),
        }
    }
}

struct Run {
    cfg: Config,
    out: PathBuf,
}

impl Run {
    fn pair_dir(&self) -> PathBuf {
        self.out.join(self.cfg.pair.key())
    }

    /// Writes the report envelope, seeds and effective config into `dir`.
    fn finish<T: Serialize>(&self, dir: &Path, command: Command, seeds: &Seeds, result: T) -> Result<()> {
        write_json(
            dir.join("report.json"),
            &Envelope {
                schema_version: REPORT_SCHEMA,
                software_version: SOFTWARE_VERSION,
                command: command.key(),
                seeds,
                effective_config: &self.cfg,
                result,
            },
        )?;
        write_json(dir.join("seeds.json"), seeds)?;
        write_file(dir.join("effective_config.toml"), self.cfg.to_toml()?.as_bytes())
    }

    fn context(&self) -> Result<PairContext> {
        let dir = self.pair_dir();
        let ck = dir.join("checkpoint.json");
        let origin_path = dir.join("checkpoint_origin.json");
        if !ck.exists() || !origin_path.exists() {
            return Err(Error::Contract(format!(
                "no pre-trained checkpoint for pair {}; run `pretrain` first",
                self.cfg.pair.key()
            )));
        }
        let text = std::fs::read_to_string(&origin_path).map_err(|e| Error::io(&origin_path, e))?;
        let origin: CheckpointOrigin =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint_origin.json: {e}")))?;
        if origin != CheckpointOrigin::of(&self.cfg) {
            return Err(Error::Config(
                "the checkpoint was pre-trained with a different pair, seed or [pretrain] section; rerun `pretrain`"
                    .into(),
            ));
        }
        let base = Network::load(&ck)?;
        let pair = TaskPair::generate(self.cfg.pair, self.cfg.seed)?;
        PairContext::with_base(pair, base, self.cfg.settings())
    }

    fn seeds(&self) -> Seeds {
        Seeds {
            pair: Some(self.cfg.seed),
            pretrain: Some(self.cfg.pretrain.seed),
            ..Seeds::default()
        }
    }

    fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions {
            samples: self.cfg.fisher.samples,
            seed: self.cfg.fisher.seed,
            damping: self.cfg.fisher.damping,
        }
    }

    /// Curvature for `kind`: computed for L2-SP, read from the estimate file
    /// for EWC and KFAC, which must match the `[fisher]` section.
    fn load_fisher(&self, ctx: &PairContext, kind: PenaltyKind) -> Result<Option<FisherEstimate>> {
        match kind {
            PenaltyKind::None => Ok(None),
            PenaltyKind::L2sp => ctx.fisher(kind, &self.estimate_options()),
            _ => {
                let path = self.pair_dir().join(format!("fisher_{}.json", kind.key()));
                if !path.exists() {
                    return Err(Error::Contract(format!(
                        "no {} estimate; run `estimate` with fisher.kind = \"{}\" first",
                        kind.key(),
                        kind.key()
                    )));
                }
                let est = FisherEstimate::load_for(&path, &ctx.base)?;
                let f = &self.cfg.fisher;
                if Some(est.kind) != kind.fisher_kind()
                    || est.sample_count != f.samples
                    || est.seed != f.seed
                    || est.damping != if est.kind == crate::fisher::FisherKind::Kronecker { f.damping } else { 0.0 }
                {
                    return Err(Error::Config(format!(
                        "fisher_{}.json ({} samples, seed {}) does not match the [fisher] section ({} samples, seed {}); rerun `estimate`",
                        kind.key(),
                        est.sample_count,
                        est.seed,
                        f.samples,
                        f.seed
                    )));
                }
                Ok(Some(est))
            }
        }
    }

    fn store(&self, dir: &Path) -> Result<CellStore> {
        CellStore::open(dir.join("cells"), &self.cfg)
    }

    fn pretrain(&self) -> Result<()> {
        let (ctx, report) = PairContext::build(self.cfg.pair, self.cfg.seed, self.cfg.settings())?;
        let dir = self.pair_dir();
        ctx.base.save(dir.join("checkpoint.json"))?;
        write_json(dir.join("checkpoint_origin.json"), &CheckpointOrigin::of(&self.cfg))?;
        let sub = dir.join("pretrain");
        report.to_csv().write(sub.join("metrics.csv"))?;
        #[derive(Serialize)]
        struct Out<'a> {
            task_a: EvalMetrics,
            retention_metric: crate::trainer::MetricKind,
            pretrained_retention: f64,
            run: &'a crate::trainer::RunReport,
        }
        let out = Out {
            task_a: task_a_metrics(&ctx.pair, &ctx.base)?,
            retention_metric: ctx.kind().retention_metric(),
            pretrained_retention: ctx.pretrained_retention,
            run: &report,
        };
        self.finish(&sub, Command::Pretrain, &self.seeds(), out)
    }

    fn estimate(&self) -> Result<()> {
        let ctx = self.context()?;
        let kind = self.cfg.fisher.kind;
        let est = ctx.fisher(kind, &self.estimate_options())?.expect("fisher.kind is validated");
        let dir = self.pair_dir();
        est.save(dir.join(format!("fisher_{}.json", kind.key())))?;
        #[derive(Serialize)]
        struct Layer {
            name: String,
            d_out: usize,
            d_in: usize,
            storage: usize,
        }
        #[derive(Serialize)]
        struct Out {
            kind: PenaltyKind,
            samples: usize,
            storage: usize,
            layers: Vec<Layer>,
        }
        let out = Out {
            kind,
            samples: if kind == PenaltyKind::L2sp { 0 } else { est.sample_count },
            storage: est.storage(),
            layers: est
                .layers
                .iter()
                .map(|(n, l)| Layer {
                    name: n.clone(),
                    d_out: l.d_out,
                    d_in: l.d_in,
                    storage: l.curvature.storage(),
                })
                .collect(),
        };
        let seeds = Seeds {
            fisher: Some(self.cfg.fisher.seed),
            ..self.seeds()
        };
        self.finish(&dir.join(format!("estimate_{}", kind.key())), Command::Estimate, &seeds, out)
    }

    fn finetune(&self) -> Result<()> {
        let ctx = self.context()?;
        let kind = self.cfg.penalty.kind;
        let fisher = self.load_fisher(&ctx, kind)?;
        let penalty = if kind == PenaltyKind::None {
            PenaltyConfig::none()
        } else {
            PenaltyConfig::new(kind, self.cfg.penalty.lambda, &ctx.layers)
        };
        let seed = self.cfg.finetune.seed;
        let (net, report) = fit(ctx.start(seed)?, &fit_data(&ctx.pair), fisher.as_ref(), &penalty, &self.cfg.finetune)?;
        let dir = self.pair_dir().join(format!("finetune_{}", kind.key()));
        AdapterCheckpoint::from_network(&net).save(dir.join("adapters.json"))?;
        report.to_csv().write(dir.join("metrics.csv"))?;
        let seeds = Seeds {
            fisher: fisher.as_ref().filter(|_| kind != PenaltyKind::L2sp).map(|f| f.seed),
            train: vec![seed],
            ..self.seeds()
        };
        self.finish(&dir, Command::Finetune, &seeds, &report)
    }

    fn sweep(&self) -> Result<()> {
        let ctx = self.context()?;
        let kind = self.cfg.sweep.kind;
        let fisher = self.load_fisher(&ctx, kind)?;
        let dir = self.pair_dir().join(format!("sweep_{}", kind.key()));
        let store = self.store(&dir)?;
        let mut spec = ctx.sweep_spec(kind, fisher.as_ref(), &self.cfg.sweep.seeds);
        spec.store = Some(&store);
        let table = sweep_lambda(&spec, &self.cfg.sweep.grid.0)?;
        store.write_manifest()?;
        table.to_csv().write(dir.join("table.csv"))?;
        let seeds = Seeds {
            fisher: fisher.as_ref().filter(|_| kind != PenaltyKind::L2sp).map(|f| f.seed),
            train: self.cfg.sweep.seeds.clone(),
            ..self.seeds()
        };
        self.finish(&dir, Command::Sweep, &seeds, &table)
    }

    fn study(&self) -> Result<()> {
        let study = &self.cfg.study;
        match study.kind {
            StudyKind::Cost => {
                let dir = self.out.join("study_cost");
                let (report, timing) = run_cost_study(&study.cost)?;
                report.to_csv().write(dir.join("table.csv"))?;
                write_json(dir.join("timing.json"), &timing)?;
                let seeds = Seeds {
                    cost: Some(study.cost.seed),
                    ..Seeds::default()
                };
                self.finish(&dir, Command::Study, &seeds, &report)
            }
            StudyKind::Forgetting => {
                let ctx = self.context()?;
                let dir = self.pair_dir().join("study_forgetting");
                let store = self.store(&dir)?;
                let opts = ForgettingOptions {
                    methods: study.methods.clone(),
                    seeds: study.seeds.clone(),
                    grids: self.cfg.study_grids(),
                    fisher: self.estimate_options(),
                };
                let report = run_forgetting_study(&ctx, &opts, Some(&store))?;
                store.write_manifest()?;
                report.to_csv().write(dir.join("table.csv"))?;
                for t in &report.sweeps {
                    t.to_csv().write(dir.join(format!("sweep_{}.csv", t.kind.key())))?;
                }
                let seeds = Seeds {
                    fisher: Some(self.cfg.fisher.seed),
                    train: study.seeds.clone(),
                    ..self.seeds()
                };
                self.finish(&dir, Command::Study, &seeds, &report)
            }
            StudyKind::SampleSize => {
                let ctx = self.context()?;
                let dir = self.pair_dir().join("study_sample_size");
                let store = self.store(&dir)?;
                let opts = SampleSizeOptions {
                    sizes: study.sizes.clone(),
                    lambdas: study.sample_lambdas.clone(),
                    seeds: study.seeds.clone(),
                    fisher_seed: self.cfg.fisher.seed,
                    damping: self.cfg.fisher.damping,
                };
                let report = run_sample_size_study(&ctx, &opts, Some(&store))?;
                store.write_manifest()?;
                report.to_csv().write(dir.join("table.csv"))?;
                let seeds = Seeds {
                    fisher: Some(self.cfg.fisher.seed),
                    train: study.seeds.clone(),
                    ..self.seeds()
                };
                self.finish(&dir, Command::Study, &seeds, &report)
            }
        }
    }
}

/// Resolves the configuration and output root of a parsed command line.
pub fn resolve(cli: &Cli) -> Result<(Config, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::defaults(crate::bench::PairKind::Clusters),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let (cfg, out) = resolve(cli)?;
    let run = Run { cfg, out };
    let go = || match cli.command {
        Command::Pretrain => run.pretrain(),
        Command::Estimate => run.estimate(),
        Command::Finetune => run.finetune(),
        Command::Sweep => run.sweep(),
        Command::Study => run.study(),
    };
    match cli.jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(go),
        None => go(),
    }
}

/// Machine-readable error written to stderr on failure.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
            "exit_code": e.exit_code(),
        }
    })
    .to_string()
}
