//! Run configuration: a TOML file merged over per-pair defaults.
//!
//! Every key has a default, so an empty file is a valid configuration. Keys
//! the program does not know are rejected with their path and line. The
//! resolved configuration is written next to every report and can be fed
//! back in unchanged to repeat a run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::bench::studies::{default_grids, default_sample_size_lambdas, default_seeds, CostOptions};
use crate::bench::{PairKind, PairSettings};
use crate::error::{Error, Result};
use crate::fisher::DEFAULT_DAMPING;
use crate::lora::LoraConfig;
use crate::penalty::PenaltyKind;
use crate::trainer::TrainConfig;

/// A λ grid. Written either as a list of numbers or as a geometric range
/// such as `"1e2..1e5 step x10"`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid(pub Vec<f64>);

/// Rounds to 15 significant digits so `1e-3 · 10³` comes out as exactly `1`.
fn tidy(v: f64) -> f64 {
    format!("{v:.14e}").parse().unwrap_or(v)
}

/// Parses `"START..END step xRATIO"` (`×` also accepted) into the geometric
/// sequence from START up to END inclusive.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Config(format!("bad lambda grid {text:?}: {why}"));
    let (range, step) = text
        .split_once("step")
        .ok_or_else(|| bad("expected \"START..END step xRATIO\""))?;
    let (lo, hi) = range.trim().split_once("..").ok_or_else(|| bad("missing \"..\""))?;
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("{:?} is not a number", s.trim())));
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    let ratio = step.trim();
    let ratio = ratio
        .strip_prefix('x')
        .or_else(|| ratio.strip_prefix('×'))
        .or_else(|| ratio.strip_prefix('*'))
        .ok_or_else(|| bad("the step must look like x10"))?;
    let ratio = parse(ratio)?;
    if !(lo > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
        return Err(bad("need 0 < START <= END"));
    }
    if !(ratio > 1.0 && ratio.is_finite()) {
        return Err(bad("the ratio must exceed 1"));
    }
    let mut out = Vec::new();
    for k in 0.. {
        let v = tidy(lo * ratio.powi(k));
        if v > hi * (1.0 + 1e-12) {
            break;
        }
        out.push(v);
        if out.len() > 1000 {
            return Err(bad("more than 1000 cells"));
        }
    }
    Ok(out)
}

impl Serialize for Grid {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct GridVisitor;
        impl<'de> Visitor<'de> for GridVisitor {
            type Value = Grid;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a list of numbers or a range like \"1e2..1e5 step x10\"")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Grid, E> {
                parse_grid(v).map(Grid).map_err(E::custom)
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Grid, A::Error> {
                let mut out = Vec::new();
                while let Some(v) = seq.next_element::<f64>()? {
                    out.push(v);
                }
                Ok(Grid(out))
            }
        }
        d.deserialize_any(GridVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherSection {
    /// Method whose curvature is estimated: l2sp, ewc or kfac.
    pub kind: PenaltyKind,
    pub samples: usize,
    pub seed: u64,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySection {
    pub kind: PenaltyKind,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: PenaltyKind,
    pub grid: Grid,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Forgetting,
    SampleSize,
    Cost,
}

impl StudyKind {
    pub fn key(self) -> &'static str {
        match self {
            StudyKind::Forgetting => "forgetting",
            StudyKind::SampleSize => "sample_size",
            StudyKind::Cost => "cost",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSet {
    pub l2sp: Grid,
    pub ewc: Grid,
    pub kfac: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub kind: StudyKind,
    /// Regularized methods of the forgetting study.
    pub methods: Vec<PenaltyKind>,
    pub seeds: Vec<u64>,
    pub grids: GridSet,
    /// Fisher sample counts of the sample-size study.
    pub sizes: Vec<usize>,
    /// Methods of the sample-size study and their fixed λ.
    pub sample_lambdas: BTreeMap<PenaltyKind, f64>,
    pub cost: CostOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub pair: PairKind,
    /// Seeds generation of the task pair.
    pub seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub lora: LoraConfig,
    pub fisher: FisherSection,
    pub penalty: PenaltySection,
    pub sweep: SweepSection,
    pub study: StudySection,
}

impl Config {
    pub fn defaults(pair: PairKind) -> Self {
        let settings = PairSettings::defaults(pair);
        let grids = default_grids(pair);
        Self {
            pair,
            seed: 0,
            pretrain: settings.pretrain,
            finetune: settings.finetune,
            lora: settings.lora,
            fisher: FisherSection {
                kind: PenaltyKind::Kfac,
                samples: 1024,
                seed: 0,
                damping: DEFAULT_DAMPING,
            },
            penalty: PenaltySection {
                kind: PenaltyKind::Kfac,
                lambda: grids[&PenaltyKind::Kfac][grids[&PenaltyKind::Kfac].len() - 2],
            },
            sweep: SweepSection {
                kind: PenaltyKind::Kfac,
                grid: Grid(grids[&PenaltyKind::Kfac].clone()),
                seeds: default_seeds(),
            },
            study: StudySection {
                kind: StudyKind::Forgetting,
                methods: vec![PenaltyKind::L2sp, PenaltyKind::Ewc, PenaltyKind::Kfac],
                seeds: default_seeds(),
                grids: GridSet {
                    l2sp: Grid(grids[&PenaltyKind::L2sp].clone()),
                    ewc: Grid(grids[&PenaltyKind::Ewc].clone()),
                    kfac: Grid(grids[&PenaltyKind::Kfac].clone()),
                },
                sizes: vec![1024, 128, 16],
                sample_lambdas: default_sample_size_lambdas(pair),
                cost: CostOptions::default(),
            },
        }
    }

    pub fn settings(&self) -> PairSettings {
        PairSettings {
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            lora: self.lora,
        }
    }

    pub fn study_grids(&self) -> BTreeMap<PenaltyKind, Vec<f64>> {
        let g = &self.study.grids;
        BTreeMap::from([
            (PenaltyKind::L2sp, g.l2sp.0.clone()),
            (PenaltyKind::Ewc, g.ewc.0.clone()),
            (PenaltyKind::Kfac, g.kfac.0.clone()),
        ])
    }

    /// Parses a configuration file body. `origin` names the source in
    /// error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.to_string().trim_end())))?;
        let pair = match user.get("pair") {
            None => PairKind::Clusters,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => {
                return Err(Error::Config(format!(
                    "{origin}: line {}: key `pair` must be a string",
                    line_of(text, &["pair"])
                )))
            }
        };
        let defaults = toml::Table::try_from(Config::defaults(pair)).map_err(|e| Error::Config(e.to_string()))?;
        check_keys(&user, &defaults, &mut Vec::new(), text, origin)?;
        let mut merged = defaults;
        merge(&mut merged, user);
        let cfg: Config = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("{origin}: {}", e.to_string().trim_end()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.lora.rank == 0 || !(self.lora.gamma.is_finite() && self.lora.gamma > 0.0) {
            return Err(Error::Config("lora.rank must be at least 1 and lora.gamma positive".into()));
        }
        if self.fisher.kind == PenaltyKind::None {
            return Err(Error::Config("fisher.kind must be l2sp, ewc or kfac".into()));
        }
        if self.fisher.kind != PenaltyKind::L2sp && self.fisher.samples == 0 {
            return Err(Error::Config(format!(
                "fisher.samples must be at least 1 for kind {}",
                self.fisher.kind.key()
            )));
        }
        if !(self.fisher.damping >= 0.0 && self.fisher.damping.is_finite()) {
            return Err(Error::Config("fisher.damping must be finite and nonnegative".into()));
        }
        let lambda_ok = |l: f64| l >= 0.0 && l.is_finite();
        if !lambda_ok(self.penalty.lambda) {
            return Err(Error::Config(format!("penalty.lambda must be >= 0, got {}", self.penalty.lambda)));
        }
        if self.sweep.kind == PenaltyKind::None {
            return Err(Error::Config("sweep.kind must be l2sp, ewc or kfac".into()));
        }
        for (name, g) in [
            ("sweep.grid", &self.sweep.grid),
            ("study.grids.l2sp", &self.study.grids.l2sp),
            ("study.grids.ewc", &self.study.grids.ewc),
            ("study.grids.kfac", &self.study.grids.kfac),
        ] {
            if g.0.is_empty() || !g.0.iter().all(|&l| lambda_ok(l)) {
                return Err(Error::Config(format!("{name} must be a nonempty list of λ >= 0")));
            }
        }
        for (name, seeds) in [("sweep.seeds", &self.sweep.seeds), ("study.seeds", &self.study.seeds)] {
            if seeds.is_empty() {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
            let mut sorted = seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != seeds.len() {
                return Err(Error::Config(format!("{name} has duplicates")));
            }
        }
        if self.study.methods.contains(&PenaltyKind::None) {
            return Err(Error::Config("study.methods lists regularizers only; none is always run".into()));
        }
        if self.study.sample_lambdas.values().any(|&l| !lambda_ok(l)) {
            return Err(Error::Config("study.sample_lambdas must be >= 0".into()));
        }
        Ok(())
    }
}

/// Line (1-based) where `path` is set in `text`, or 0 when not found.
fn line_of(text: &str, path: &[&str]) -> usize {
    let mut section: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[') {
            let h = h.trim_start_matches('[').trim_end_matches(']').trim();
            section = h.split('.').map(|s| s.trim().trim_matches('"').to_string()).collect();
            if path.len() <= section.len() && section[..path.len()] == *path {
                return i + 1;
            }
            continue;
        }
        let Some((key, _)) = line.split_once('=') else {
            continue;
        };
        let mut full = section.clone();
        full.extend(key.split('.').map(|s| s.trim().trim_matches('"').to_string()));
        let n = path.len().min(full.len());
        if n > 0 && full[..n] == path[..n] {
            return i + 1;
        }
    }
    0
}

fn check_keys(
    user: &toml::Table,
    defaults: &toml::Table,
    path: &mut Vec<String>,
    text: &str,
    origin: &str,
) -> Result<()> {
    for (k, v) in user {
        path.push(k.clone());
        match defaults.get(k) {
            None => {
                let refs: Vec<&str> = path.iter().map(String::as_str).collect();
                return Err(Error::Config(format!(
                    "{origin}: line {}: unknown key `{}`",
                    line_of(text, &refs),
                    path.join(".")
                )));
            }
            Some(toml::Value::Table(d)) => {
                if let toml::Value::Table(u) = v {
                    check_keys(u, d, path, text, origin)?;
                }
            }
            Some(_) => {}
        }
        path.pop();
    }
    Ok(())
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
