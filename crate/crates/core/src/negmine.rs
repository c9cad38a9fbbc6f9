//! Hard-negative synthesis by Beta-mixup between uncertain positives and
//! confident negatives of each class.
//!
//! For a class `k` the batch is ranked by the current `p_k`. The least
//! confident in-class samples are paired round-robin with the out-of-class
//! samples the model most wants to call `k`, and each pair is mixed in input
//! space with `λ ~ Beta(ρ, ρ)`. The number of mixes per class is inversely
//! proportional to the class's training count.

use crate::error::{Error, Result};
use crate::numkit::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub rho: f64,
    pub budget_scale: f64,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            budget_scale: 1.0,
            positive_fraction: 0.25,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidMiningConfig(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.budget_scale > 0.0) || !self.budget_scale.is_finite() {
            return Err(Error::InvalidMiningConfig(format!(
                "budget_scale must be positive, got {}",
                self.budget_scale
            )));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::InvalidMiningConfig(format!(
                "positive_fraction must lie in (0, 1], got {}",
                self.positive_fraction
            )));
        }
        Ok(())
    }
}

/// Inputs, labels and current predictions of one mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct MiningBatch<'a> {
    pub xs: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub preds: &'a [Vec<f64>],
}

impl<'a> MiningBatch<'a> {
    pub fn new(xs: &'a [Vec<f64>], labels: &'a [usize], preds: &'a [Vec<f64>]) -> Result<Self> {
        if xs.len() != labels.len() || preds.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: xs.len().min(preds.len()),
            });
        }
        Ok(Self { xs, labels, preds })
    }

    fn confidence(&self, i: usize, class: usize) -> Result<f64> {
        self.preds[i].get(class).copied().ok_or(Error::LabelOutOfRange {
            label: class,
            classes: self.preds[i].len(),
        })
    }

    /// Classes present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub x: Vec<f64>,
    pub anchor_class: usize,
    pub source_pos: usize,
    pub source_neg: usize,
    pub lambda: f64,
    pub assigned_label: usize,
}

/// The selected uncertain positives and hard negatives for one class, both
/// as batch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub low_positives: Vec<usize>,
    pub high_negatives: Vec<usize>,
}

/// Selects the bottom `positive_fraction` of class-`k` samples by `p_k` and
/// enough top out-of-class samples to fill `budget` pairs (`⌈budget/L⌉`,
/// capped by what the batch has). Ties are broken by batch index.
pub fn rank_by_confidence(
    batch: &MiningBatch<'_>,
    class: usize,
    positive_fraction: f64,
    budget: usize,
) -> Result<Ranking> {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for i in 0..batch.labels.len() {
        let p = batch.confidence(i, class)?;
        if batch.labels[i] == class {
            inside.push((p, i));
        } else {
            outside.push((p, i));
        }
    }
    if inside.is_empty() {
        return Err(Error::ClassNotInBatch(class));
    }
    if outside.is_empty() {
        return Err(Error::NoNegativesAvailable(class));
    }
    inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    outside.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let n_low = ((positive_fraction * inside.len() as f64).ceil() as usize).clamp(1, inside.len());
    let n_high = budget.max(1).div_ceil(n_low).clamp(1, outside.len());
    Ok(Ranking {
        low_positives: inside[..n_low].iter().map(|e| e.1).collect(),
        high_negatives: outside[..n_high].iter().map(|e| e.1).collect(),
    })
}

/// `n̂_k = round(scale · max_j n_j / n_k)`.
pub fn augment_budget(class_counts: &[usize], budget_scale: f64) -> Result<Vec<usize>> {
    if let Some(k) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(k));
    }
    let max = *class_counts.iter().max().ok_or(Error::EmptyInput("class counts"))? as f64;
    Ok(class_counts
        .iter()
        .map(|&n| (budget_scale * max / n as f64).round() as usize)
        .collect())
}

/// Convex combination clamped to the per-coordinate hull of its sources, so
/// rounding can never leave the segment and `λ ∈ {0, 1}` returns a source
/// exactly.
pub fn mix(pos: &[f64], neg: &[f64], lambda: f64) -> Vec<f64> {
    pos.iter()
        .zip(neg)
        .map(|(&a, &b)| (lambda * a + (1.0 - lambda) * b).clamp(a.min(b), a.max(b)))
        .collect()
}

/// Mines every class present in the batch with `λ ~ Beta(ρ, ρ)` drawn from
/// `rng`. `class_counts` are the training-set totals that set the budget.
pub fn mine_hard_negatives(
    batch: &MiningBatch<'_>,
    config: &MiningConfig,
    class_counts: &[usize],
    rng: &mut Rng,
) -> Result<Vec<AugmentedSample>> {
    let rho = config.rho;
    mine_hard_negatives_with(batch, config, class_counts, |_| rng.beta(rho, rho))
}

/// As [`mine_hard_negatives`], with the mixing coefficients supplied by
/// `draw` (called once per mix, in output order, with the anchor class).
pub fn mine_hard_negatives_with<F>(
    batch: &MiningBatch<'_>,
    config: &MiningConfig,
    class_counts: &[usize],
    mut draw: F,
) -> Result<Vec<AugmentedSample>>
where
    F: FnMut(usize) -> Result<f64>,
{
    config.validate()?;
    let budgets = augment_budget(class_counts, config.budget_scale)?;
    let classes = batch.classes();
    if classes.len() < 2 {
        return Err(Error::NoNegativesAvailable(classes.first().copied().unwrap_or(0)));
    }
    let mut out = Vec::new();
    for k in classes {
        let budget = *budgets.get(k).ok_or(Error::LabelOutOfRange {
            label: k,
            classes: budgets.len(),
        })?;
        if budget == 0 {
            continue;
        }
        let ranking = rank_by_confidence(batch, k, config.positive_fraction, budget)?;
        let (low, high) = (&ranking.low_positives, &ranking.high_negatives);
        for m in 0..budget {
            let pos = low[m % low.len()];
            let neg = high[(m / low.len()) % high.len()];
            let lambda = draw(k)?;
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::InvalidMiningConfig(format!("mixing coefficient {lambda} outside [0, 1]")));
            }
            out.push(AugmentedSample {
                x: mix(&batch.xs[pos], &batch.xs[neg], lambda),
                anchor_class: k,
                source_pos: pos,
                source_neg: neg,
                lambda,
                assigned_label: batch.labels[neg],
            });
        }
    }
    Ok(out)
}
