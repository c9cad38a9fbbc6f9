//! Randomized analytic-vs-finite-difference gradient audits.
//!
//! Each trial draws its own inputs from a seed derived from the audit seed,
//! the target name and the trial number, so any failing trial can be rerun
//! alone. Inputs where two predictions nearly coincide (1 − s < 1e-3) are
//! redrawn: log(1 − s) is too curved there for a central difference to act
//! as an oracle.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, prototype_alignment_loss, reweighted_ce_loss, ContrastiveBatch, ContrastiveVariant,
    PrototypeSet,
};
use crate::negmine::{mine_hard_negatives, MiningBatch, MiningConfig};
use crate::numkit::{cosine_sim, derive_seed, finite_diff_grad, relative_error, softmax, Rng};
use crate::trainer::{objective, Activation, Batch, LossVariant, MlpModel, Reduction, TrainConfig};

/// Step for the central differences (relative to each coordinate for
/// prediction-level audits, absolute for network parameters).
pub const AUDIT_STEP: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
const MIN_DISSIMILARITY: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AuditTarget {
    InfoNceNd,
    SupConNd,
    InfoNce,
    SupCon,
    ReweightedCe,
    Alignment,
    /// The full objective, differentiated through the MLP parameters.
    Total,
}

impl AuditTarget {
    pub const ALL: [AuditTarget; 7] = [
        AuditTarget::InfoNceNd,
        AuditTarget::SupConNd,
        AuditTarget::InfoNce,
        AuditTarget::SupCon,
        AuditTarget::ReweightedCe,
        AuditTarget::Alignment,
        AuditTarget::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AuditTarget::InfoNceNd => "infonce-nd",
            AuditTarget::SupConNd => "supcon-nd",
            AuditTarget::InfoNce => "infonce",
            AuditTarget::SupCon => "supcon",
            AuditTarget::ReweightedCe => "reweighted-ce",
            AuditTarget::Alignment => "alignment",
            AuditTarget::Total => "total",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            AuditTarget::Total => NETWORK_TOLERANCE,
            _ => LOSS_TOLERANCE,
        }
    }

    fn contrastive(self) -> Option<ContrastiveVariant> {
        match self {
            AuditTarget::InfoNceNd => Some(ContrastiveVariant::InfoNceNd),
            AuditTarget::SupConNd => Some(ContrastiveVariant::SupConNd),
            AuditTarget::InfoNce => Some(ContrastiveVariant::InfoNce),
            AuditTarget::SupCon => Some(ContrastiveVariant::SupCon),
            _ => None,
        }
    }
}

impl fmt::Display for AuditTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AuditTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AuditTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown audit target '{s}'")))
    }
}

/// Results for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub target: AuditTarget,
    pub trials: usize,
    pub max_rel_err: f64,
    pub worst_trial_seed: u64,
    /// Seeds of the trials above tolerance.
    pub failures: Vec<u64>,
}

impl AuditRow {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub seed: u64,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(AuditRow::passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# gradient audit seed={}\ntarget\ttrials\tmax_rel_err\ttolerance\tstatus\tworst_seed\n", self.seed);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.3e}\t{:.0e}\t{}\t{}",
                r.target,
                r.trials,
                r.max_rel_err,
                r.target.tolerance(),
                if r.passed() { "pass" } else { "FAIL" },
                r.worst_trial_seed
            );
        }
        out
    }
}

pub fn trial_seed(seed: u64, target: AuditTarget, trial: usize) -> u64 {
    derive_seed(seed, &format!("{}/{trial}", target.name()))
}

fn well_separated(preds: &[Vec<f64>]) -> bool {
    (0..preds.len()).all(|i| {
        (0..i).all(|j| cosine_sim(&preds[i], &preds[j]).is_ok_and(|s| 1.0 - s >= MIN_DISSIMILARITY))
    })
}

struct PredCase {
    preds: Vec<Vec<f64>>,
    labels: Vec<usize>,
    domains: Vec<usize>,
}

/// 4–32 predictions over K ∈ 2..=8, each present label appearing at least
/// twice, labels from at least two classes, three domains.
fn pred_case(rng: &mut Rng) -> PredCase {
    loop {
        let k = 2 + rng.below(7);
        let classes = 2 + rng.below(k.min(4) - 1);
        let n = (2 * classes + rng.below(32 - 2 * classes + 1)).max(4);
        let mut labels: Vec<usize> = (0..n)
            .map(|i| if i < 2 * classes { i % classes } else { rng.below(classes) })
            .collect();
        rng.shuffle(&mut labels);
        let preds: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..k).map(|_| 1.5 * rng.normal()).collect();
                softmax(&z).map(|p| p.into_inner()).unwrap_or_default()
            })
            .collect();
        let domains = (0..n).map(|_| rng.below(3)).collect();
        if well_separated(&preds) {
            return PredCase { preds, labels, domains };
        }
    }
}

/// How finite-difference steps are sized.
#[derive(Clone, Copy)]
enum Step {
    /// The same step for every coordinate; suits losses that see
    /// predictions only through cosines.
    Absolute,
    /// Steps proportional to each coordinate (p = p0·(1 + u)); suits
    /// losses built from −ln p, whose curvature grows like 1/p².
    Relative,
}

fn check<F>(preds: &[Vec<f64>], analytic: &[Vec<f64>], step: Step, f: F) -> Result<f64>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    let k = preds[0].len();
    let flat: Vec<f64> = preds.iter().flatten().copied().collect();
    let mut failure = None;
    let scale: Vec<f64> = match step {
        Step::Absolute => vec![1.0; flat.len()],
        Step::Relative => flat.clone(),
    };
    let numeric = finite_diff_grad(
        |u| {
            let x: Vec<f64> = flat.iter().zip(&scale).zip(u).map(|((p0, s), u)| p0 + s * u).collect();
            let p: Vec<Vec<f64>> = x.chunks(k).map(<[f64]>::to_vec).collect();
            f(&p).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        &vec![0.0; flat.len()],
        AUDIT_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric: Vec<f64> = numeric?.iter().zip(&scale).map(|(g, s)| g / s).collect();
    Ok(relative_error(&analytic.concat(), &numeric))
}

fn loss_trial(target: AuditTarget, rng: &mut Rng) -> Result<f64> {
    let c = pred_case(rng);
    if let Some(v) = target.contrastive() {
        let g = contrastive_loss(&ContrastiveBatch::new(c.preds.clone(), c.labels.clone())?, v, true)?
            .grads
            .unwrap_or_default();
        return check(&c.preds, &g, Step::Absolute, |p| {
            Ok(contrastive_loss(&ContrastiveBatch::new(p.to_vec(), c.labels.clone())?, v, false)?.value)
        });
    }
    match target {
        AuditTarget::ReweightedCe => {
            let g = reweighted_ce_loss(&c.preds, &c.labels, true)?.grads.unwrap_or_default();
            check(&c.preds, &g, Step::Relative, |p| Ok(reweighted_ce_loss(p, &c.labels, false)?.value))
        }
        AuditTarget::Alignment => {
            let protos = PrototypeSet::from_batch(&c.preds, &c.labels, &c.domains)?;
            let pg = prototype_alignment_loss(&protos, true)?.grads.unwrap_or_default();
            let g = protos.member_grads(&pg, c.preds.len());
            check(&c.preds, &g, Step::Absolute, |p| {
                Ok(prototype_alignment_loss(&PrototypeSet::from_batch(p, &c.labels, &c.domains)?, false)?.value)
            })
        }
        _ => unreachable!("contrastive and total targets are handled elsewhere"),
    }
}

fn total_trial(rng: &mut Rng) -> Result<f64> {
    loop {
        let k = 2 + rng.below(3);
        let activation = if rng.below(2) == 0 { Activation::Tanh } else { Activation::Relu };
        let variant = [LossVariant::InfoNceNd, LossVariant::SupConNd, LossVariant::InfoNce, LossVariant::SupCon]
            [rng.below(4)];
        let cfg = TrainConfig {
            variant,
            alpha: rng.uniform_range(0.05, 1.0),
            beta: rng.uniform_range(0.05, 1.0),
            hidden: vec![4 + rng.below(4), 4 + rng.below(4)],
            activation,
            reduction: if rng.below(2) == 0 { Reduction::Mean } else { Reduction::Sum },
            ..Default::default()
        };
        let mut model = MlpModel::xavier(&cfg.layer_sizes(2, k), activation, rng)?;
        // Xavier biases start at exactly zero, which puts a ReLU unit fed by
        // a dead layer on its kink; jitter every parameter off it.
        let jittered: Vec<f64> = model.params().iter().map(|w| w + 0.1 * rng.normal()).collect();
        model.set_params(jittered)?;
        let domains = 2;
        let per_domain = 2 * k + rng.below(4);
        let mut labels = Vec::new();
        let mut doms = Vec::new();
        for d in 0..domains {
            for i in 0..per_domain {
                labels.push(if i < 2 * k { i % k } else { rng.below(k) });
                doms.push(d);
            }
        }
        let batch = Batch {
            xs: (0..labels.len()).map(|_| vec![2.0 * rng.normal(), 2.0 * rng.normal()]).collect(),
            labels,
            domains: doms,
        };
        let preds: Vec<Vec<f64>> = batch.xs.iter().map(|x| model.predict(x)).collect::<Result<_>>()?;
        let counts: Vec<usize> = (0..k).map(|_| 1 + rng.below(50)).collect();
        let mb = MiningBatch::new(&batch.xs, &batch.labels, &preds)?;
        let aug = mine_hard_negatives(&mb, &MiningConfig::default(), &counts, rng)?;
        let mut all = preds.clone();
        for a in &aug {
            all.push(model.predict(&a.x)?);
        }
        if !well_separated(&all) {
            continue;
        }
        let analytic = objective(&model, &cfg, &batch, &aug, true)?.1.unwrap_or_default();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |theta| {
                let mut m = model.clone();
                let r = m
                    .set_params(theta.to_vec())
                    .and_then(|()| objective(&m, &cfg, &batch, &aug, false));
                match r {
                    Ok((parts, _)) => parts.total,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            model.params(),
            AUDIT_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        return Ok(relative_error(&analytic, &numeric?));
    }
}

/// Relative error of one trial.
pub fn run_trial(target: AuditTarget, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    match target {
        AuditTarget::Total => total_trial(&mut rng),
        t => loss_trial(t, &mut rng),
    }
}

/// Runs `trials` audits for each target. A trial whose evaluation errors
/// counts as a failure with infinite error.
pub fn run_audit(targets: &[AuditTarget], trials: usize, seed: u64) -> AuditReport {
    let rows = targets
        .iter()
        .map(|&target| {
            let mut row = AuditRow {
                target,
                trials,
                max_rel_err: 0.0,
                worst_trial_seed: trial_seed(seed, target, 0),
                failures: Vec::new(),
            };
            for t in 0..trials {
                let s = trial_seed(seed, target, t);
                let err = run_trial(target, s).unwrap_or_else(|e| {
                    log::warn!("{target} trial {t} (seed {s}) failed to evaluate: {e}");
                    f64::INFINITY
                });
                if !(err <= target.tolerance()) {
                    row.failures.push(s);
                }
                if !(err <= row.max_rel_err) {
                    row.max_rel_err = err;
                    row.worst_trial_seed = s;
                }
            }
            row
        })
        .collect();
    AuditReport { seed, rows }
}
