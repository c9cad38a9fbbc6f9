//! Cross-entropy objectives: the class-wise re-weighted form and the plain
//! batch mean used as the ERM baseline.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::EPS;

use super::LossValue;

/// Whether the per-sample weights receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CeWeighting {
    #[default]
    DifferentiateThrough,
    StopGradient,
}

fn sample_losses(preds: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: preds.len(),
            got: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    preds
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, &y))| {
            let py = *p.get(y).ok_or(Error::LabelOutOfRange {
                label: y,
                classes: p.len(),
            })?;
            if !(py > 0.0) {
                return Err(Error::InfiniteCeLoss { sample: i });
            }
            Ok(-py.max(EPS).ln())
        })
        .collect()
}

fn class_members(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    by_class
}

/// Within-class softmax of per-sample CE losses, indexed like `labels`.
pub fn ce_weights(preds: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    let losses = sample_losses(preds, labels)?;
    let mut w = vec![0.0; labels.len()];
    for members in class_members(labels).values() {
        let l: Vec<f64> = members.iter().map(|&i| losses[i]).collect();
        let soft = crate::numkit::softmax(&l)?;
        for (&i, &wi) in members.iter().zip(soft.as_slice()) {
            w[i] = wi;
        }
    }
    Ok(w)
}

/// `(1/K′) Σ_k Σ_{i∈k} ω_i ℓ_i` with `ℓ_i = −log p_i[y_i]`, `ω` the
/// within-class softmax of `ℓ`, and `K′` the number of classes present.
pub fn reweighted_ce_loss(preds: &[Vec<f64>], labels: &[usize], with_grad: bool) -> Result<LossValue> {
    reweighted_ce_loss_with(preds, labels, with_grad, CeWeighting::default())
}

pub fn reweighted_ce_loss_with(
    preds: &[Vec<f64>],
    labels: &[usize],
    with_grad: bool,
    weighting: CeWeighting,
) -> Result<LossValue> {
    let losses = sample_losses(preds, labels)?;
    let weights = ce_weights(preds, labels)?;
    let classes = class_members(labels);
    let inv_k = 1.0 / classes.len() as f64;

    let mut value = 0.0;
    let mut grads = with_grad.then(|| vec![vec![0.0; preds[0].len()]; preds.len()]);
    for members in classes.values() {
        let class_value: f64 = members.iter().map(|&i| weights[i] * losses[i]).sum();
        value += inv_k * class_value;
        if let Some(g) = grads.as_mut() {
            for &i in members {
                // dV/dℓ_j = ω_j (1 + ℓ_j − V) through the softmax weights
                let dv_dl = match weighting {
                    CeWeighting::DifferentiateThrough => {
                        weights[i] * (1.0 + losses[i] - class_value)
                    }
                    CeWeighting::StopGradient => weights[i],
                };
                let py = preds[i][labels[i]];
                if py >= EPS {
                    g[i][labels[i]] = -inv_k * dv_dl / py;
                }
            }
        }
    }
    Ok(LossValue { value, grads })
}

/// Unweighted mean cross-entropy over the batch.
pub fn plain_ce_loss(preds: &[Vec<f64>], labels: &[usize], with_grad: bool) -> Result<LossValue> {
    let losses = sample_losses(preds, labels)?;
    let inv_n = 1.0 / losses.len() as f64;
    let value = inv_n * losses.iter().sum::<f64>();
    let grads = with_grad.then(|| {
        preds
            .iter()
            .zip(labels)
            .map(|(p, &y)| {
                let mut g = vec![0.0; p.len()];
                if p[y] >= EPS {
                    g[y] = -inv_n / p[y];
                }
                g
            })
            .collect()
    });
    Ok(LossValue { value, grads })
}
