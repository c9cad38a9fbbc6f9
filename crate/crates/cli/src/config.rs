//! Run configuration: a TOML file merged over built-in defaults, with
//! command-line overrides on top. Every leaf remembers where its value came
//! from, and the resolved form is written next to the outputs of a run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndcl_core::diagnostics::{DiscrepancyMode, MarginSurrogate};
use ndcl_core::negmine::MiningConfig;
use ndcl_core::splits::SplitPlan;
use ndcl_core::trainer::{
    make_longtail_world, make_prior_shift_world_sized, world_from_plan, Activation, EvalOptions, LongtailKind,
    LossVariant, Reduction, SyntheticWorld, TrainConfig, WorldGeometry,
};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Name of the resolved configuration written into every output directory.
pub const RESOLVED_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSection,
    pub train: TrainSection,
    pub mining: MiningSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    /// `prior-shift`, `plan`, `misalignment`, `absorption` or `balanced`.
    pub kind: String,
    pub source_per_domain: usize,
    pub target_total: usize,
    /// Split plan file, read when `kind = "plan"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    /// Class count of the long-tail worlds; plan worlds take it from the plan.
    pub classes: usize,
    pub radius: f64,
    pub std: f64,
    pub domain_shift: f64,
    pub target_shift: f64,
    pub target_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub variant: String,
    pub alpha: f64,
    pub beta: f64,
    pub batch_per_domain: usize,
    pub iterations: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub reduction: String,
    pub con_on_augmented_only: bool,
    pub ce_weight_stop_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningSection {
    pub rho: f64,
    pub budget_scale: f64,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub delta: f64,
    /// `identity`, `hinge` or `softplus`.
    pub surrogate: String,
    /// `pooled` or `per-domain`.
    pub discrepancy: String,
    pub projections: usize,
    pub max_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = MiningConfig::default();
        let e = EvalOptions::default();
        let g = WorldGeometry::default();
        Self {
            seed: t.seed,
            world: WorldSection {
                kind: "prior-shift".into(),
                source_per_domain: 1000,
                target_total: 2000,
                plan: None,
                classes: g.num_classes,
                radius: g.radius,
                std: g.std,
                domain_shift: g.domain_shift,
                target_shift: g.target_shift,
                target_per_class: g.target_per_class,
            },
            train: TrainSection {
                variant: t.variant.name().into(),
                alpha: t.alpha,
                beta: t.beta,
                batch_per_domain: t.batch_per_domain,
                iterations: t.iterations,
                lr: t.lr,
                hidden: t.hidden.clone(),
                activation: t.activation.name().into(),
                reduction: t.reduction.name().into(),
                con_on_augmented_only: t.con_on_augmented_only,
                ce_weight_stop_gradient: t.ce_weight_stop_gradient,
            },
            mining: MiningSection {
                rho: m.rho,
                budget_scale: m.budget_scale,
                positive_fraction: m.positive_fraction,
            },
            eval: EvalSection {
                delta: e.delta,
                surrogate: surrogate_name(e.surrogate).into(),
                discrepancy: discrepancy_name(e.discrepancy).into(),
                projections: e.projections,
                max_points: e.max_points,
            },
            output: OutputSection { dir: "run".into() },
        }
    }
}

fn surrogate_name(s: MarginSurrogate) -> &'static str {
    match s {
        MarginSurrogate::Identity => "identity",
        MarginSurrogate::Hinge => "hinge",
        MarginSurrogate::Softplus => "softplus",
    }
}

fn discrepancy_name(d: DiscrepancyMode) -> &'static str {
    match d {
        DiscrepancyMode::Pooled => "pooled",
        DiscrepancyMode::PerDomain => "per-domain",
    }
}

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// A configuration together with the origin of each dotted key.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

/// Parses one `key=value` override. The value is read as a TOML value and
/// falls back to a bare string, so `train.variant=supcon-nd` needs no quotes.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{s}' is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        bail!("override '{s}' has an empty key");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Merges defaults, the optional config file and the overrides, in that
/// order of increasing precedence.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Resolved> {
    let mut merged = Table::try_from(RunConfig::default()).context("serializing defaults")?;
    let mut provenance = BTreeMap::new();
    collect_leaves(&merged, "", &mut |k| {
        provenance.insert(k, Source::Default);
    });

    if let Some(path) = file {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut table: Table = text
            .parse()
            .with_context(|| format!("config file {} is not valid TOML", path.display()))?;
        // A resolved config can be fed back in as-is.
        table.remove("provenance");
        collect_leaves(&table, "", &mut |k| {
            provenance.insert(k, Source::File);
        });
        merge(&mut merged, table);
    }

    for (key, value) in overrides {
        set_dotted(&mut merged, key, value.clone())?;
        provenance.insert(key.clone(), Source::Flag);
    }

    let config: RunConfig = merged.try_into().context("invalid configuration")?;
    config.check()?;
    Ok(Resolved { config, provenance })
}

fn collect_leaves(table: &Table, prefix: &str, f: &mut dyn FnMut(String)) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => collect_leaves(t, &key, f),
            _ => f(key),
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => bail!("override key '{key}': '{p}' is not a section"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Converts every field to its library type once, so errors surface
    /// before any work starts.
    pub fn check(&self) -> Result<()> {
        self.train_config()?.validate()?;
        self.eval_options()?;
        match self.world.kind.as_str() {
            "prior-shift" | "plan" => {}
            other => {
                other
                    .parse::<LongtailKind>()
                    .map_err(|_| anyhow!("unknown world kind '{other}'"))?;
            }
        }
        if self.world.kind == "plan" && self.world.plan.is_none() {
            bail!("world.kind = \"plan\" needs world.plan");
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            alpha: t.alpha,
            beta: t.beta,
            variant: t.variant.parse::<LossVariant>()?,
            mining: MiningConfig {
                rho: self.mining.rho,
                budget_scale: self.mining.budget_scale,
                positive_fraction: self.mining.positive_fraction,
                seed: self.seed,
            },
            batch_per_domain: t.batch_per_domain,
            iterations: t.iterations,
            lr: t.lr,
            seed: self.seed,
            hidden: t.hidden.clone(),
            activation: t.activation.parse::<Activation>()?,
            con_on_augmented_only: t.con_on_augmented_only,
            ce_weight_stop_gradient: t.ce_weight_stop_gradient,
            reduction: t.reduction.parse::<Reduction>()?,
        })
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let e = &self.eval;
        let surrogate = match e.surrogate.as_str() {
            "identity" => MarginSurrogate::Identity,
            "hinge" => MarginSurrogate::Hinge,
            "softplus" => MarginSurrogate::Softplus,
            other => bail!("unknown margin surrogate '{other}'"),
        };
        let discrepancy = match e.discrepancy.as_str() {
            "pooled" => DiscrepancyMode::Pooled,
            "per-domain" => DiscrepancyMode::PerDomain,
            other => bail!("unknown discrepancy mode '{other}'"),
        };
        if e.projections == 0 || e.max_points == 0 {
            bail!("eval.projections and eval.max_points must be positive");
        }
        Ok(EvalOptions {
            delta: e.delta,
            surrogate,
            discrepancy,
            projections: e.projections,
            max_points: e.max_points,
        })
    }

    pub fn geometry(&self, num_classes: usize) -> WorldGeometry {
        let w = &self.world;
        WorldGeometry {
            num_classes,
            radius: w.radius,
            std: w.std,
            domain_shift: w.domain_shift,
            target_shift: w.target_shift,
            target_per_class: w.target_per_class,
        }
    }

    pub fn world(&self) -> Result<SyntheticWorld> {
        let w = &self.world;
        match w.kind.as_str() {
            "prior-shift" => Ok(make_prior_shift_world_sized(w.source_per_domain, w.target_total)),
            "plan" => {
                let path = w.plan.as_deref().ok_or_else(|| anyhow!("world.plan is not set"))?;
                let text = std::fs::read_to_string(path).with_context(|| format!("cannot read plan file {path}"))?;
                let plan = SplitPlan::from_text(&text).with_context(|| format!("plan file {path}"))?;
                let k = plan.counts[0].len();
                Ok(world_from_plan(&plan, &self.geometry(k))?)
            }
            other => Ok(make_longtail_world(other.parse()?, &self.geometry(w.classes))?),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

impl Resolved {
    /// The configuration as TOML followed by a `[provenance]` table.
    pub fn to_toml(&self) -> Result<String> {
        let mut table = Table::try_from(&self.config)?;
        let prov: Table = self
            .provenance
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.to_string())))
            .collect();
        table.insert("provenance".into(), Value::Table(prov));
        Ok(toml::to_string(&table)?)
    }
}
