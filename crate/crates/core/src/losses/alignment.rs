//! Prediction-central alignment over per-(class, domain) prototypes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::axpy;

use super::{scatter_cosine_coeffs, similarity_matrix, LossValue};

/// Mean prediction of one class within one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class: usize,
    pub domain: usize,
    pub mean: Vec<f64>,
    /// Batch indices averaged into `mean`; empty when built from raw means.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    protos: Vec<Prototype>,
}

impl PrototypeSet {
    /// One prototype per (class, domain) pair present, ordered by class then
    /// domain.
    pub fn from_batch(preds: &[Vec<f64>], labels: &[usize], domains: &[usize]) -> Result<Self> {
        if preds.len() != labels.len() || preds.len() != domains.len() {
            return Err(Error::DimensionMismatch {
                expected: preds.len(),
                got: labels.len().min(domains.len()),
            });
        }
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, (&y, &d)) in labels.iter().zip(domains).enumerate() {
            groups.entry((y, d)).or_default().push(i);
        }
        let dim = preds.first().map_or(0, Vec::len);
        let protos = groups
            .into_iter()
            .map(|((class, domain), members)| {
                let mut mean = vec![0.0; dim];
                for &i in &members {
                    axpy(1.0, &preds[i], &mut mean);
                }
                let inv = 1.0 / members.len() as f64;
                mean.iter_mut().for_each(|v| *v *= inv);
                Prototype {
                    class,
                    domain,
                    mean,
                    members,
                }
            })
            .collect();
        Ok(Self { protos })
    }

    /// Prototypes given directly as `(class, domain, mean)`.
    pub fn from_means(entries: Vec<(usize, usize, Vec<f64>)>) -> Self {
        Self {
            protos: entries
                .into_iter()
                .map(|(class, domain, mean)| Prototype {
                    class,
                    domain,
                    mean,
                    members: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn protos(&self) -> &[Prototype] {
        &self.protos
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Pushes prototype gradients back through the means onto the
    /// `batch_len` member predictions.
    pub fn member_grads(&self, proto_grads: &[Vec<f64>], batch_len: usize) -> Vec<Vec<f64>> {
        let dim = self.protos.first().map_or(0, |p| p.mean.len());
        let mut out = vec![vec![0.0; dim]; batch_len];
        for (proto, g) in self.protos.iter().zip(proto_grads) {
            let inv = 1.0 / proto.members.len().max(1) as f64;
            for &i in &proto.members {
                axpy(inv, g, &mut out[i]);
            }
        }
        out
    }
}

/// SupCon-style loss over prototypes: for every prototype with at least one
/// same-class prototype from another domain,
/// `−(1/|P|) Σ_p log[ exp(s(μ_i,μ_p)) / Σ_{a≠i} exp(s(μ_i,μ_a)) ]`.
/// Prototypes without such a partner contribute nothing.
///
/// Gradients are with respect to the prototype means, in `protos` order.
pub fn prototype_alignment_loss(protos: &PrototypeSet, with_grad: bool) -> Result<LossValue> {
    let n = protos.len();
    if n < 2 {
        return Err(Error::DegeneratePrototypeSet);
    }
    let means: Vec<Vec<f64>> = protos.protos.iter().map(|p| p.mean.clone()).collect();
    let sim = similarity_matrix(&means)?;
    let mut value = 0.0;
    let mut coeffs = vec![vec![0.0; n]; n];
    for i in 0..n {
        let pi = &protos.protos[i];
        let partners: Vec<usize> = (0..n)
            .filter(|&a| {
                a != i && protos.protos[a].class == pi.class && protos.protos[a].domain != pi.domain
            })
            .collect();
        if partners.is_empty() {
            continue;
        }
        // log-sum-exp over a ≠ i
        let max = (0..n)
            .filter(|&a| a != i)
            .map(|a| sim[i][a])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (0..n)
            .map(|a| if a == i { 0.0 } else { (sim[i][a] - max).exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        let log_norm = max + total.ln();
        let inv_p = 1.0 / partners.len() as f64;
        for &p in &partners {
            value -= inv_p * (sim[i][p] - log_norm);
        }
        for a in 0..n {
            if a != i {
                coeffs[i][a] = weights[a] / total;
            }
        }
        for &p in &partners {
            coeffs[i][p] -= inv_p;
        }
    }
    let grads = if with_grad {
        Some(scatter_cosine_coeffs(&means, &coeffs)?)
    } else {
        None
    };
    Ok(LossValue { value, grads })
}
