//! Contrastive objectives over prediction vectors with cosine similarity.
//!
//! Four members of one family, differing in which pairs sit in the
//! numerator and where the log is taken:
//!
//! | variant            | per-anchor term                                              |
//! |--------------------|--------------------------------------------------------------|
//! | InfoNCE-ND         | `−log[ (1/|N|) Σ_n (1−s_in) / Σ_a (1−s_ia) ]`                |
//! | SupCon-ND          | `−(1/|N|) Σ_n log[ (1−s_in) / Σ_a (1−s_ia) ]`                |
//! | InfoNCE (classic)  | `−log[ (1/|P|) Σ_p s_ip / Σ_a s_ia ]`                        |
//! | SupCon (classic)   | `−(1/|P|) Σ_p log[ s_ip / Σ_a s_ia ]`                        |
//!
//! `a` ranges over every other batch entry, `p` over same-label entries and
//! `n` over different-label entries. The negative-dominant variants put
//! dissimilarity to negatives in the numerator, which makes the gradient on
//! each negative pair scale with `Σ_p(1−s) / Σ_n(1−s)`.
//!
//! Every term is a function of the pairwise similarities only, so each
//! loss is computed as a table of `∂L/∂s_ia` coefficients which is then
//! scattered onto both arguments of each similarity. That yields the full
//! batch gradient, including each vector's appearances as somebody else's
//! positive or negative.

use crate::error::{Error, Result};
use crate::numkit::{axpy, cosine_grad, EPS};

use super::{scatter_cosine_coeffs, similarity_matrix, LossValue};

/// What to do with an anchor whose positive/negative partition does not
/// satisfy the variant's requirements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorPolicy {
    /// Error out, naming the anchor.
    #[default]
    Strict,
    /// The anchor contributes nothing but still serves as a positive or
    /// negative for others. Degenerate similarity sums still error.
    SkipIncomplete,
    /// Like `SkipIncomplete`, and anchors whose similarity sums vanish or
    /// whose log argument is zero are skipped as well.
    SkipDegenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveVariant {
    InfoNceNd,
    SupConNd,
    InfoNce,
    SupCon,
}

impl ContrastiveVariant {
    pub const ALL: [ContrastiveVariant; 4] = [
        ContrastiveVariant::InfoNceNd,
        ContrastiveVariant::SupConNd,
        ContrastiveVariant::InfoNce,
        ContrastiveVariant::SupCon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContrastiveVariant::InfoNceNd => "infonce-nd",
            ContrastiveVariant::SupConNd => "supcon-nd",
            ContrastiveVariant::InfoNce => "infonce",
            ContrastiveVariant::SupCon => "supcon",
        }
    }

    fn negative_dominant(self) -> bool {
        matches!(self, ContrastiveVariant::InfoNceNd | ContrastiveVariant::SupConNd)
    }
}

/// Prediction vectors with class labels; every entry is an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    preds: Vec<Vec<f64>>,
    labels: Vec<usize>,
    policy: AnchorPolicy,
}

impl ContrastiveBatch {
    pub fn new(preds: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: preds.len(),
                got: labels.len(),
            });
        }
        if preds.len() < 2 {
            return Err(Error::BatchTooSmall);
        }
        let dim = preds[0].len();
        if let Some(bad) = preds.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self {
            preds,
            labels,
            policy: AnchorPolicy::Strict,
        })
    }

    pub fn with_policy(mut self, policy: AnchorPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn preds(&self) -> &[Vec<f64>] {
        &self.preds
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn policy(&self) -> AnchorPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    /// Copy of the batch with one prediction vector replaced.
    pub fn with_pred(&self, index: usize, pred: Vec<f64>) -> Self {
        let mut out = self.clone();
        out.preds[index] = pred;
        out
    }

    pub fn positives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let y = self.labels[i];
        (0..self.len()).filter(move |&a| a != i && self.labels[a] == y)
    }

    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let y = self.labels[i];
        (0..self.len()).filter(move |&a| a != i && self.labels[a] != y)
    }
}

/// Per-anchor value and `∂L_i/∂s_ia` row; `None` for skipped anchors.
type AnchorTerm = Option<(f64, Vec<f64>)>;

fn anchor_term(
    batch: &ContrastiveBatch,
    sim: &[Vec<f64>],
    i: usize,
    variant: ContrastiveVariant,
) -> Result<AnchorTerm> {
    match anchor_term_strict(batch, sim, i, variant) {
        Err(
            Error::DegenerateAnchorNeighborhood { .. } | Error::LogOfZero { .. } | Error::ZeroDenominator { .. },
        ) if batch.policy == AnchorPolicy::SkipDegenerate => Ok(None),
        other => other,
    }
}

fn anchor_term_strict(
    batch: &ContrastiveBatch,
    sim: &[Vec<f64>],
    i: usize,
    variant: ContrastiveVariant,
) -> Result<AnchorTerm> {
    let n = batch.len();
    let pos: Vec<usize> = batch.positives(i).collect();
    let neg: Vec<usize> = batch.negatives(i).collect();
    let skip = batch.policy != AnchorPolicy::Strict;

    if variant.negative_dominant() && neg.is_empty() {
        return if skip {
            Ok(None)
        } else {
            Err(Error::AnchorWithoutNegatives { anchor: i })
        };
    }
    if !variant.negative_dominant() && pos.is_empty() {
        return if skip {
            Ok(None)
        } else {
            Err(Error::AnchorWithoutPositives { anchor: i })
        };
    }

    let mut coeffs = vec![0.0; n];
    let row = &sim[i];
    match variant {
        ContrastiveVariant::InfoNceNd => {
            let f_pos: f64 = pos.iter().map(|&p| 1.0 - row[p]).sum();
            let f_neg: f64 = neg.iter().map(|&m| 1.0 - row[m]).sum();
            let z = f_pos + f_neg;
            if z <= EPS {
                return Err(Error::DegenerateAnchorNeighborhood { anchor: i });
            }
            let arg = f_neg / (neg.len() as f64 * z);
            if arg < EPS {
                return Ok(Some((-EPS.ln(), coeffs)));
            }
            // ∂/∂s_in = Σ_p(1−s)/(Σ_n(1−s)·Z'),  ∂/∂s_ip = −1/Z'
            let c_neg = f_pos / (f_neg * z);
            for &m in &neg {
                coeffs[m] = c_neg;
            }
            for &p in &pos {
                coeffs[p] = -1.0 / z;
            }
            Ok(Some((-arg.ln(), coeffs)))
        }
        ContrastiveVariant::SupConNd => {
            let z: f64 = (0..n).filter(|&a| a != i).map(|a| 1.0 - row[a]).sum();
            if z <= EPS {
                return Err(Error::DegenerateAnchorNeighborhood { anchor: i });
            }
            let inv_n = 1.0 / neg.len() as f64;
            let mut value = 0.0;
            for &m in &neg {
                let f = 1.0 - row[m];
                if f <= EPS {
                    return Err(Error::LogOfZero {
                        anchor: i,
                        negative: m,
                    });
                }
                value -= inv_n * (f / z).ln();
                coeffs[m] = inv_n / f - 1.0 / z;
            }
            for &p in &pos {
                coeffs[p] = -1.0 / z;
            }
            Ok(Some((value, coeffs)))
        }
        ContrastiveVariant::InfoNce => {
            let s_pos: f64 = pos.iter().map(|&p| row[p]).sum();
            let s_neg: f64 = neg.iter().map(|&m| row[m]).sum();
            let z = s_pos + s_neg;
            if z <= EPS {
                return Err(Error::ZeroDenominator { anchor: i });
            }
            let arg = s_pos / (pos.len() as f64 * z);
            if arg < EPS {
                return Ok(Some((-EPS.ln(), coeffs)));
            }
            // ∂/∂s_ip = −Σ_n s/(Σ_p s·Z),  ∂/∂s_in = 1/Z
            let c_pos = -s_neg / (s_pos * z);
            for &p in &pos {
                coeffs[p] = c_pos;
            }
            for &m in &neg {
                coeffs[m] = 1.0 / z;
            }
            Ok(Some((-arg.ln(), coeffs)))
        }
        ContrastiveVariant::SupCon => {
            let z: f64 = (0..n).filter(|&a| a != i).map(|a| row[a]).sum();
            if z <= EPS {
                return Err(Error::ZeroDenominator { anchor: i });
            }
            let inv_p = 1.0 / pos.len() as f64;
            let mut value = 0.0;
            for &p in &pos {
                let s = row[p];
                if s <= EPS {
                    return Err(Error::LogOfZero {
                        anchor: i,
                        negative: p,
                    });
                }
                value -= inv_p * (s / z).ln();
                coeffs[p] = -inv_p / s + 1.0 / z;
            }
            for &m in &neg {
                coeffs[m] = 1.0 / z;
            }
            Ok(Some((value, coeffs)))
        }
    }
}

/// Any member of the contrastive family.
pub fn contrastive_loss(
    batch: &ContrastiveBatch,
    variant: ContrastiveVariant,
    with_grad: bool,
) -> Result<LossValue> {
    let sim = similarity_matrix(&batch.preds)?;
    let mut value = 0.0;
    let mut coeffs = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        match anchor_term(batch, &sim, i, variant)? {
            Some((v, c)) => {
                value += v;
                coeffs.push(c);
            }
            None => coeffs.push(vec![0.0; batch.len()]),
        }
    }
    let grads = if with_grad {
        Some(scatter_cosine_coeffs(&batch.preds, &coeffs)?)
    } else {
        None
    };
    Ok(LossValue { value, grads })
}

/// Negative-dominant InfoNCE.
pub fn infonce_nd_loss(batch: &ContrastiveBatch, with_grad: bool) -> Result<LossValue> {
    contrastive_loss(batch, ContrastiveVariant::InfoNceNd, with_grad)
}

/// Negative-dominant SupCon (log inside the negative average).
pub fn supcon_nd_loss(batch: &ContrastiveBatch, with_grad: bool) -> Result<LossValue> {
    contrastive_loss(batch, ContrastiveVariant::SupConNd, with_grad)
}

/// Positive-dominant InfoNCE.
pub fn infonce_classic_loss(batch: &ContrastiveBatch, with_grad: bool) -> Result<LossValue> {
    contrastive_loss(batch, ContrastiveVariant::InfoNce, with_grad)
}

/// Positive-dominant SupCon.
pub fn supcon_classic_loss(batch: &ContrastiveBatch, with_grad: bool) -> Result<LossValue> {
    contrastive_loss(batch, ContrastiveVariant::SupCon, with_grad)
}

/// `Σ_p(1−s(p_i,p_p)) / Σ_n(1−s(p_i,p_n))` for one anchor.
pub fn amplification_factor(batch: &ContrastiveBatch, anchor: usize) -> Result<f64> {
    let pi = &batch.preds[anchor];
    let mut f_pos = 0.0;
    let mut n_pos = 0;
    for p in batch.positives(anchor) {
        f_pos += 1.0 - crate::numkit::cosine_sim(pi, &batch.preds[p])?;
        n_pos += 1;
    }
    let mut f_neg = 0.0;
    let mut n_neg = 0;
    for m in batch.negatives(anchor) {
        f_neg += 1.0 - crate::numkit::cosine_sim(pi, &batch.preds[m])?;
        n_neg += 1;
    }
    if n_pos == 0 {
        return Err(Error::AnchorWithoutPositives { anchor });
    }
    if n_neg == 0 {
        return Err(Error::AnchorWithoutNegatives { anchor });
    }
    if f_neg <= EPS {
        return Err(Error::NegativesCoincideWithAnchor { anchor });
    }
    Ok(f_pos / f_neg)
}

/// The scalar multipliers applied to positive-pair and negative-pair
/// similarity gradients at one anchor (its own term only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorScales {
    /// Magnitude of the attraction coefficient on each positive.
    pub positive: f64,
    /// Magnitude of the repulsion coefficient on each negative.
    pub negative: f64,
    /// The variant's normalizer (`Z'` for the ND losses, `Z` otherwise).
    pub normalizer: f64,
}

/// Positive and negative gradient scales of one anchor's term, for the two
/// InfoNCE variants:
///
/// * InfoNCE-ND: positive `1/Z'`, negative `(Σ_p(1−s)/Σ_n(1−s)) / Z'`
/// * InfoNCE: positive `(Σ_n s/Σ_p s) / Z`, negative `1/Z`
pub fn anchor_scales(
    batch: &ContrastiveBatch,
    anchor: usize,
    variant: ContrastiveVariant,
) -> Result<AnchorScales> {
    let pi = &batch.preds[anchor];
    let sims = |it: Vec<usize>| -> Result<Vec<f64>> {
        it.into_iter()
            .map(|a| crate::numkit::cosine_sim(pi, &batch.preds[a]))
            .collect()
    };
    let pos = sims(batch.positives(anchor).collect())?;
    let neg = sims(batch.negatives(anchor).collect())?;
    if pos.is_empty() {
        return Err(Error::AnchorWithoutPositives { anchor });
    }
    if neg.is_empty() {
        return Err(Error::AnchorWithoutNegatives { anchor });
    }
    match variant {
        ContrastiveVariant::InfoNceNd => {
            let f_pos: f64 = pos.iter().map(|s| 1.0 - s).sum();
            let f_neg: f64 = neg.iter().map(|s| 1.0 - s).sum();
            if f_neg <= EPS {
                return Err(Error::NegativesCoincideWithAnchor { anchor });
            }
            let z = f_pos + f_neg;
            Ok(AnchorScales {
                positive: 1.0 / z,
                negative: (f_pos / f_neg) / z,
                normalizer: z,
            })
        }
        ContrastiveVariant::InfoNce => {
            let s_pos: f64 = pos.iter().sum();
            let s_neg: f64 = neg.iter().sum();
            if s_pos <= EPS {
                return Err(Error::ZeroDenominator { anchor });
            }
            let z = s_pos + s_neg;
            Ok(AnchorScales {
                positive: (s_neg / s_pos) / z,
                negative: 1.0 / z,
                normalizer: z,
            })
        }
        other => Err(Error::InvalidConfig(format!(
            "anchor scales are defined for the InfoNCE variants, not {}",
            other.name()
        ))),
    }
}

/// Gradient of a single anchor's term with respect to its own prediction,
/// written in the closed form
/// `(1/Z)[ −Σ_p w_p ∇s(p_i,p_p) + Σ_n w_n ∇s(p_i,p_n) ]`.
///
/// This is the anchor-argument view only: it omits the dependence of the
/// other anchors' terms on `p_i`, which [`contrastive_loss`] does include.
pub fn anchor_gradient_closed_form(
    batch: &ContrastiveBatch,
    anchor: usize,
    variant: ContrastiveVariant,
) -> Result<Vec<f64>> {
    let pi = &batch.preds[anchor];
    let pos: Vec<usize> = batch.positives(anchor).collect();
    let neg: Vec<usize> = batch.negatives(anchor).collect();
    let s = |a: usize| crate::numkit::cosine_sim(pi, &batch.preds[a]);
    let grad_s = |a: usize| cosine_grad(pi, &batch.preds[a]);
    let mut out = vec![0.0; pi.len()];
    match variant {
        ContrastiveVariant::InfoNceNd => {
            let f_pos: f64 = pos.iter().map(|&p| s(p).map(|v| 1.0 - v)).sum::<Result<f64>>()?;
            let f_neg: f64 = neg.iter().map(|&m| s(m).map(|v| 1.0 - v)).sum::<Result<f64>>()?;
            let z = f_pos + f_neg;
            if neg.is_empty() {
                return Err(Error::AnchorWithoutNegatives { anchor });
            }
            if z <= EPS {
                return Err(Error::DegenerateAnchorNeighborhood { anchor });
            }
            let amp = f_pos / f_neg;
            for &p in &pos {
                axpy(-1.0 / z, &grad_s(p)?, &mut out);
            }
            for &m in &neg {
                axpy(amp / z, &grad_s(m)?, &mut out);
            }
        }
        ContrastiveVariant::SupConNd => {
            let fs: Vec<f64> = neg.iter().map(|&m| s(m).map(|v| 1.0 - v)).collect::<Result<_>>()?;
            let f_pos: f64 = pos.iter().map(|&p| s(p).map(|v| 1.0 - v)).sum::<Result<f64>>()?;
            let z = f_pos + fs.iter().sum::<f64>();
            if neg.is_empty() {
                return Err(Error::AnchorWithoutNegatives { anchor });
            }
            if z <= EPS {
                return Err(Error::DegenerateAnchorNeighborhood { anchor });
            }
            for &p in &pos {
                axpy(-1.0 / z, &grad_s(p)?, &mut out);
            }
            for (&m, &f) in neg.iter().zip(&fs) {
                let w = z / (neg.len() as f64 * f) - 1.0;
                axpy(w / z, &grad_s(m)?, &mut out);
            }
        }
        ContrastiveVariant::InfoNce => {
            let s_pos: f64 = pos.iter().map(|&p| s(p)).sum::<Result<f64>>()?;
            let s_neg: f64 = neg.iter().map(|&m| s(m)).sum::<Result<f64>>()?;
            let z = s_pos + s_neg;
            if pos.is_empty() {
                return Err(Error::AnchorWithoutPositives { anchor });
            }
            if z <= EPS || s_pos <= EPS {
                return Err(Error::ZeroDenominator { anchor });
            }
            let amp = s_neg / s_pos;
            for &p in &pos {
                axpy(-amp / z, &grad_s(p)?, &mut out);
            }
            for &m in &neg {
                axpy(1.0 / z, &grad_s(m)?, &mut out);
            }
        }
        ContrastiveVariant::SupCon => {
            let ss: Vec<f64> = pos.iter().map(|&p| s(p)).collect::<Result<_>>()?;
            let z = ss.iter().sum::<f64>() + neg.iter().map(|&m| s(m)).sum::<Result<f64>>()?;
            if pos.is_empty() {
                return Err(Error::AnchorWithoutPositives { anchor });
            }
            if z <= EPS {
                return Err(Error::ZeroDenominator { anchor });
            }
            for (&p, &sp) in pos.iter().zip(&ss) {
                let w = z / (pos.len() as f64 * sp) - 1.0;
                axpy(-w / z, &grad_s(p)?, &mut out);
            }
            for &m in &neg {
                axpy(1.0 / z, &grad_s(m)?, &mut out);
            }
        }
    }
    Ok(out)
}
