//! The training loop: domain-balanced batches, the three sub-losses,
//! hard-negative augmentation, hand-written backprop and Adam updates on a
//! small MLP, plus evaluation of a trained model on a held-out target domain.
//!
//! Randomness is split into named substreams of the master seed: `init` for
//! weights, `data` for drawing a world, `batches` for sampling, `mining` for
//! mixing coefficients and `eval` for projection directions.

mod mlp;
mod world;

pub use mlp::{Activation, Adam, Forward, ForwardCache, MlpModel};
pub use world::{
    make_longtail_world, make_prior_shift_world, make_prior_shift_world_sized, sample_batch, world_from_counts,
    world_from_plan, Dataset, DomainSpec, LongtailKind, Sample, SyntheticWorld, WorldGeometry,
};

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::diagnostics::{
    average_margin, grouped_accuracy, margins_with, posterior_discrepancy, prior_discrepancy, small_margin_prob,
    DiscrepancyMode, MarginSurrogate, MetricsReport,
};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, plain_ce_loss, prototype_alignment_loss, reweighted_ce_loss_with, AnchorPolicy, CeWeighting,
    ContrastiveBatch, ContrastiveVariant, LossValue, PrototypeSet,
};
use crate::negmine::{mine_hard_negatives, AugmentedSample, MiningBatch, MiningConfig};
use crate::numkit::Rng;
use crate::splits::ClassGroup;

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// Unweighted mean cross-entropy only.
    CeOnly,
    /// The class-wise re-weighted cross-entropy only.
    ReweightedCe,
    #[default]
    InfoNceNd,
    SupConNd,
    InfoNce,
    SupCon,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::CeOnly,
        LossVariant::ReweightedCe,
        LossVariant::InfoNceNd,
        LossVariant::SupConNd,
        LossVariant::InfoNce,
        LossVariant::SupCon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::CeOnly => "ce-only",
            LossVariant::ReweightedCe => "reweighted-ce",
            LossVariant::InfoNceNd => "infonce-nd",
            LossVariant::SupConNd => "supcon-nd",
            LossVariant::InfoNce => "infonce",
            LossVariant::SupCon => "supcon",
        }
    }

    pub fn contrastive(self) -> Option<ContrastiveVariant> {
        match self {
            LossVariant::CeOnly | LossVariant::ReweightedCe => None,
            LossVariant::InfoNceNd => Some(ContrastiveVariant::InfoNceNd),
            LossVariant::SupConNd => Some(ContrastiveVariant::SupConNd),
            LossVariant::InfoNce => Some(ContrastiveVariant::InfoNce),
            LossVariant::SupCon => Some(ContrastiveVariant::SupCon),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }
}

/// How the anchor-summed contrastive and alignment terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Divided by the number of anchors (samples or prototypes).
    #[default]
    Mean,
    /// Summed over anchors.
    Sum,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }

    fn scale(self, anchors: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / anchors.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(Error::InvalidConfig(format!("unknown reduction '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub variant: LossVariant,
    /// Mixing parameters; the trainer draws λ from its own `mining`
    /// substream, so `mining.seed` is not consulted here.
    pub mining: MiningConfig,
    pub batch_per_domain: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub con_on_augmented_only: bool,
    pub ce_weight_stop_gradient: bool,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
            variant: LossVariant::InfoNceNd,
            mining: MiningConfig::default(),
            batch_per_domain: 32,
            iterations: 1000,
            lr: 5e-3,
            seed: 0,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            con_on_augmented_only: false,
            ce_weight_stop_gradient: false,
            reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_per_domain < 2 {
            return Err(Error::InvalidConfig("batch_per_domain must be at least 2".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        for t in [self.alpha, self.beta] {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::InvalidTradeOff(t));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer sizes must be positive".into()));
        }
        self.mining.validate()
    }

    fn ce_weighting(&self) -> CeWeighting {
        if self.ce_weight_stop_gradient {
            CeWeighting::StopGradient
        } else {
            CeWeighting::DifferentiateThrough
        }
    }

    fn uses_contrastive(&self) -> bool {
        self.alpha > 0.0 && self.variant.contrastive().is_some()
    }

    fn uses_alignment(&self) -> bool {
        self.beta > 0.0 && self.variant.contrastive().is_some()
    }

    pub fn layer_sizes(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.hidden);
        s.push(num_classes);
        s
    }
}

/// A freshly initialized model for this config.
pub fn init_model(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<MlpModel> {
    let mut rng = Rng::new(cfg.seed).substream("init");
    MlpModel::xavier(&cfg.layer_sizes(input_dim, num_classes), cfg.activation, &mut rng)
}

/// The labelled inputs of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch {
    pub fn from_indices(data: &Dataset, idx: &[usize]) -> Self {
        Self {
            xs: idx.iter().map(|&i| data.samples[i].x.clone()).collect(),
            labels: idx.iter().map(|&i| data.samples[i].label).collect(),
            domains: idx.iter().map(|&i| data.samples[i].domain).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce: f64,
    pub con: f64,
    pub cst: f64,
    pub total: f64,
}

fn forward_all(model: &MlpModel, xs: &[Vec<f64>]) -> Result<Vec<Forward>> {
    xs.iter().map(|x| model.forward(x)).collect()
}

fn preds_of(fwd: &[Forward]) -> Vec<Vec<f64>> {
    fwd.iter().map(|f| f.pred.as_slice().to_vec()).collect()
}

/// Contrastive term over `preds`. Anchors without a usable partition or
/// with a vanishing log argument contribute nothing; a batch with a single
/// label contributes nothing at all.
fn contrastive_term(
    preds: &[Vec<f64>],
    labels: &[usize],
    variant: ContrastiveVariant,
    with_grad: bool,
) -> Result<LossValue> {
    let single_label = labels.windows(2).all(|w| w[0] == w[1]);
    if preds.len() < 2 || single_label {
        return Ok(LossValue {
            value: 0.0,
            grads: with_grad.then(|| vec![vec![0.0; preds.first().map_or(0, Vec::len)]; preds.len()]),
        });
    }
    let batch = ContrastiveBatch::new(preds.to_vec(), labels.to_vec())?.with_policy(AnchorPolicy::SkipDegenerate);
    contrastive_loss(&batch, variant, with_grad)
}

/// Total objective for fixed batch and augmented inputs, with the parameter
/// gradient when requested. Augmented inputs are treated as constants.
pub fn objective(
    model: &MlpModel,
    cfg: &TrainConfig,
    batch: &Batch,
    aug: &[AugmentedSample],
    with_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let fwd = forward_all(model, &batch.xs)?;
    objective_from(model, cfg, batch, &fwd, aug, with_grad)
}

fn objective_from(
    model: &MlpModel,
    cfg: &TrainConfig,
    batch: &Batch,
    fwd: &[Forward],
    aug: &[AugmentedSample],
    with_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let preds = preds_of(fwd);
    let n = preds.len();
    let k = model.num_classes();

    let ce = match cfg.variant {
        LossVariant::CeOnly => plain_ce_loss(&preds, &batch.labels, with_grad)?,
        _ => reweighted_ce_loss_with(&preds, &batch.labels, with_grad, cfg.ce_weighting())?,
    };
    let mut parts = LossParts {
        ce: ce.value,
        ..Default::default()
    };
    let mut batch_grads = ce.grads.unwrap_or_else(|| vec![vec![0.0; k]; n]);

    if cfg.uses_alignment() {
        let protos = PrototypeSet::from_batch(&preds, &batch.labels, &batch.domains)?;
        if protos.len() >= 2 {
            let l = prototype_alignment_loss(&protos, with_grad)?;
            let r = cfg.reduction.scale(protos.len());
            parts.cst = r * l.value;
            if let Some(pg) = l.grads {
                for (g, m) in batch_grads.iter_mut().zip(protos.member_grads(&pg, n)) {
                    crate::numkit::axpy(cfg.beta * r, &m, g);
                }
            }
        }
    }

    let mut aug_fwd = Vec::new();
    let mut aug_grads: Vec<Vec<f64>> = Vec::new();
    if let (true, Some(variant)) = (cfg.uses_contrastive(), cfg.variant.contrastive()) {
        aug_fwd = aug.iter().map(|a| model.forward(&a.x)).collect::<Result<_>>()?;
        aug_grads = vec![vec![0.0; k]; aug.len()];
        let (mut all_preds, mut all_labels, offset) = if cfg.con_on_augmented_only {
            (Vec::new(), Vec::new(), 0)
        } else {
            (preds.clone(), batch.labels.clone(), n)
        };
        all_preds.extend(preds_of(&aug_fwd));
        all_labels.extend(aug.iter().map(|a| a.assigned_label));
        let r = cfg.reduction.scale(all_preds.len());
        let l = contrastive_term(&all_preds, &all_labels, variant, with_grad)?;
        parts.con = r * l.value;
        if let Some(g) = l.grads {
            for (j, row) in g.iter().enumerate() {
                let target = if j < offset {
                    &mut batch_grads[j]
                } else {
                    &mut aug_grads[j - offset]
                };
                crate::numkit::axpy(cfg.alpha * r, row, target);
            }
        }
    }
    parts.total = parts.ce + cfg.alpha * parts.con + cfg.beta * parts.cst;
    if !cfg.uses_contrastive() && !cfg.uses_alignment() {
        parts.total = parts.ce;
    }

    if !with_grad {
        return Ok((parts, None));
    }
    let mut grads = vec![0.0; model.params().len()];
    for (f, g) in fwd.iter().zip(&batch_grads) {
        model.backward(f, g, &mut grads)?;
    }
    for (f, g) in aug_fwd.iter().zip(&aug_grads) {
        model.backward(f, g, &mut grads)?;
    }
    Ok((parts, Some(grads)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub parts: LossParts,
}

pub fn loss_log_to_text(rows: &[LogRow]) -> String {
    let mut out = String::from("iteration\tce\tcon\tconst\ttotal\n");
    for r in rows {
        let p = r.parts;
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.iteration, p.ce, p.con, p.cst, p.total);
    }
    out
}

pub fn loss_log_from_text(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "iteration\tce\tcon\tconst\ttotal")) => {}
        _ => return Err(Error::parse(1, "missing loss log header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::parse(i + 1, "expected 5 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(i + 1, format!("bad number '{s}'")));
            Ok(LogRow {
                iteration: f[0].parse().map_err(|_| Error::parse(i + 1, "bad iteration"))?,
                parts: LossParts {
                    ce: num(f[1])?,
                    con: num(f[2])?,
                    cst: num(f[3])?,
                    total: num(f[4])?,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: MlpModel,
    pub log: Vec<LogRow>,
}

fn dump_batch(batch: &Batch, preds: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for i in 0..batch.len() {
        let _ = write!(
            out,
            "[x={:?} y={} d={} p={:?}]",
            batch.xs[i], batch.labels[i], batch.domains[i], preds[i]
        );
    }
    out
}

/// Runs `cfg.iterations` steps from `model` on `data`.
pub fn train(model: MlpModel, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let master = Rng::new(cfg.seed);
    let mut batch_rng = master.substream("batches");
    let mut mining_rng = master.substream("mining");
    let class_counts = data.class_counts();
    let mut model = model;
    let mut adam = Adam::new(cfg.lr, model.params().len());
    let mut log = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let wrap = |e: Error| Error::Training {
            iteration: it,
            source: Box::new(e),
        };
        let idx = sample_batch(data, cfg.batch_per_domain, &mut batch_rng).map_err(wrap)?;
        let batch = Batch::from_indices(data, &idx);
        let fwd = forward_all(&model, &batch.xs).map_err(wrap)?;
        let aug = if cfg.uses_contrastive() {
            let preds = preds_of(&fwd);
            let mb = MiningBatch::new(&batch.xs, &batch.labels, &preds).map_err(wrap)?;
            match mine_hard_negatives(&mb, &cfg.mining, &class_counts, &mut mining_rng) {
                Ok(a) => a,
                Err(Error::NoNegativesAvailable(_)) => Vec::new(),
                Err(e) => return Err(wrap(e)),
            }
        } else {
            Vec::new()
        };
        let (parts, grads) = objective_from(&model, cfg, &batch, &fwd, &aug, true).map_err(wrap)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                dump: dump_batch(&batch, &preds_of(&fwd)),
            });
        }
        adam.step(&mut model, &grads.expect("gradient requested")).map_err(wrap)?;
        log.push(LogRow { iteration: it, parts });
    }
    Ok(TrainOutput { model, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub delta: f64,
    pub surrogate: MarginSurrogate,
    pub discrepancy: DiscrepancyMode,
    pub projections: usize,
    /// Points per domain fed to the sliced-Wasserstein estimate.
    pub max_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            delta: 0.0,
            surrogate: MarginSurrogate::Identity,
            discrepancy: DiscrepancyMode::Pooled,
            projections: crate::diagnostics::DEFAULT_PROJECTIONS,
            max_points: 500,
        }
    }
}

fn subsample(points: Vec<Vec<f64>>, max: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    if points.len() <= max {
        return points;
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(max);
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i].clone()).collect()
}

/// Target-domain metrics of a trained model. Groups come from the training
/// counts; prior discrepancy is measured on the last hidden layer.
pub fn evaluate(
    model: &MlpModel,
    train: &Dataset,
    test: &Dataset,
    groups: &[ClassGroup],
    opts: &EvalOptions,
    rng: &mut Rng,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::NoTargetSamples);
    }
    let tfwd = forward_all(model, &test.xs())?;
    let tpreds = preds_of(&tfwd);
    let tlabels = test.labels();
    let records = margins_with(&tpreds, &tlabels, &test.domains(), opts.surrogate)?;
    let acc = grouped_accuracy(&tpreds, &tlabels, groups)?;

    let sfwd = forward_all(model, &train.xs())?;
    let spreds = preds_of(&sfwd);
    let pd = posterior_discrepancy(
        &spreds,
        &train.labels(),
        &train.domains(),
        &tpreds,
        &tlabels,
        opts.discrepancy,
    )?;

    let mut by_domain = vec![Vec::new(); train.num_domains];
    for (f, s) in sfwd.iter().zip(&train.samples) {
        by_domain[s.domain].push(f.cache.penultimate().to_vec());
    }
    let sources: Vec<Vec<Vec<f64>>> = by_domain
        .into_iter()
        .filter(|d| !d.is_empty())
        .map(|d| subsample(d, opts.max_points, rng))
        .collect();
    let target = subsample(tfwd.iter().map(|f| f.cache.penultimate().to_vec()).collect(), opts.max_points, rng);
    let (ss, st) = prior_discrepancy(&sources, &target, opts.projections, rng)?;

    Ok(MetricsReport {
        accuracy: acc.overall,
        group_accuracy: acc.by_group.iter().filter_map(|(g, v)| v.map(|v| (*g, v))).collect(),
        class_accuracy: acc
            .per_class
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.map(|v| (c, v)))
            .collect(),
        avg_gamma: average_margin(&records)?,
        delta: opts.delta,
        small_margin_prob: small_margin_prob(&records, opts.delta)?,
        posterior_discrepancy: pd.mean,
        class_posterior_discrepancy: pd.per_class,
        prior_ss: ss,
        prior_st: st,
    })
}

/// Accuracy of `model` on one class of `data`; `None` when the class is
/// absent.
pub fn class_accuracy(model: &MlpModel, data: &Dataset, class: usize) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut seen = 0usize;
    for s in data.samples.iter().filter(|s| s.label == class) {
        seen += 1;
        if crate::diagnostics::argmax(&model.predict(&s.x)?) == class {
            hits += 1;
        }
    }
    Ok((seen > 0).then(|| hits as f64 / seen as f64))
}

pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut hits = 0usize;
    for s in &data.samples {
        if crate::diagnostics::argmax(&model.predict(&s.x)?) == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Everything produced by one end-to-end run on a synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub output: TrainOutput,
    pub report: MetricsReport,
    pub train: Dataset,
    pub test: Dataset,
}

/// Draws the world, trains a fresh model and evaluates it on the target.
pub fn run_world(world: &SyntheticWorld, cfg: &TrainConfig, opts: &EvalOptions) -> Result<RunResult> {
    let master = Rng::new(cfg.seed);
    let (train_set, test_set) = world.sample(&mut master.substream("data"))?;
    let model = init_model(cfg, world.dim, world.num_classes)?;
    let output = train(model, cfg, &train_set)?;
    let report = report_on(&output.model, world, &train_set, &test_set, &master, opts)?;
    Ok(RunResult {
        output,
        report,
        train: train_set,
        test: test_set,
    })
}

/// Evaluates `model` on the data [`run_world`] draws for `seed`, so a saved
/// checkpoint reproduces the report of the run that produced it.
pub fn evaluate_world(model: &MlpModel, world: &SyntheticWorld, seed: u64, opts: &EvalOptions) -> Result<MetricsReport> {
    let master = Rng::new(seed);
    let (train_set, test_set) = world.sample(&mut master.substream("data"))?;
    report_on(model, world, &train_set, &test_set, &master, opts)
}

fn report_on(
    model: &MlpModel,
    world: &SyntheticWorld,
    train_set: &Dataset,
    test_set: &Dataset,
    master: &Rng,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if model.input_dim() != world.dim || model.num_classes() != world.num_classes {
        return Err(Error::InvalidConfig(format!(
            "model maps {} inputs to {} classes but the world has {} inputs and {} classes",
            model.input_dim(),
            model.num_classes(),
            world.dim,
            world.num_classes
        )));
    }
    let groups = crate::splits::group_classes(&world.plan()?);
    evaluate(model, train_set, test_set, &groups, opts, &mut master.substream("eval"))
}
