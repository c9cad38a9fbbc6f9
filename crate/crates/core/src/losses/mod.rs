//! Objectives over prediction vectors.
//!
//! All losses take simplex points `p = f(x)` and report, on request, the
//! gradient with respect to each of those vectors. Pushing that gradient
//! through the softmax and the network is the trainer's business.

mod alignment;
mod ce;
mod contrastive;

pub use alignment::{prototype_alignment_loss, Prototype, PrototypeSet};
pub use ce::{ce_weights, plain_ce_loss, reweighted_ce_loss, reweighted_ce_loss_with, CeWeighting};
pub use contrastive::{
    amplification_factor, anchor_gradient_closed_form, anchor_scales, contrastive_loss,
    infonce_classic_loss, infonce_nd_loss, supcon_classic_loss, supcon_nd_loss, AnchorPolicy,
    AnchorScales, ContrastiveBatch, ContrastiveVariant,
};

use crate::error::{Error, Result};

/// A scalar objective value plus optional per-vector gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Option<Vec<Vec<f64>>>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self { value, grads: None }
    }

    /// A zero loss with all-zero gradients of the given shape.
    pub fn zero_like(rows: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grads: Some(vec![vec![0.0; dim]; rows]),
        }
    }
}

/// `L = L_ce + α·L_con + β·L_const`, gradients combined with the same
/// coefficients when all three carry gradients of the same shape.
pub fn total_loss(
    ce: &LossValue,
    con: &LossValue,
    cst: &LossValue,
    alpha: f64,
    beta: f64,
) -> Result<LossValue> {
    for t in [alpha, beta] {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidTradeOff(t));
        }
    }
    let value = ce.value + alpha * con.value + beta * cst.value;
    let grads = match (&ce.grads, &con.grads, &cst.grads) {
        (Some(g0), Some(g1), Some(g2)) => {
            let same = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
            };
            if !same(g0, g1) || !same(g0, g2) {
                return Err(Error::GradientShapeMismatch);
            }
            let combined = g0
                .iter()
                .zip(g1)
                .zip(g2)
                .map(|((a, b), c)| {
                    a.iter()
                        .zip(b)
                        .zip(c)
                        .map(|((x, y), z)| x + alpha * y + beta * z)
                        .collect()
                })
                .collect();
            Some(combined)
        }
        _ => None,
    };
    Ok(LossValue { value, grads })
}

/// Scatter pairwise coefficients `c[i][a] = ∂L/∂s(v_i, v_a)` into
/// per-vector gradients, crediting both arguments of every similarity.
pub(crate) fn scatter_cosine_coeffs(vectors: &[Vec<f64>], coeffs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; dim]; vectors.len()];
    for (i, row) in coeffs.iter().enumerate() {
        for (a, &c) in row.iter().enumerate() {
            if a == i || c == 0.0 {
                continue;
            }
            let gi = crate::numkit::cosine_grad(&vectors[i], &vectors[a])?;
            let ga = crate::numkit::cosine_grad(&vectors[a], &vectors[i])?;
            crate::numkit::axpy(c, &gi, &mut grads[i]);
            crate::numkit::axpy(c, &ga, &mut grads[a]);
        }
    }
    Ok(grads)
}

/// Symmetric cosine-similarity matrix; the diagonal is left at 1.
pub(crate) fn similarity_matrix(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    let mut sim = vec![vec![1.0; n]; n];
    for i in 0..n {
        for a in (i + 1)..n {
            let s = crate::numkit::cosine_sim(&vectors[i], &vectors[a])?;
            sim[i][a] = s;
            sim[a][i] = s;
        }
    }
    Ok(sim)
}
