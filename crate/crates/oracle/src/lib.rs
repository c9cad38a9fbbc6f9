//! Slow, literal reference evaluators for the loss family.
//!
//! Every function recomputes similarities pair by pair and sums in the
//! order the formulas are written. Nothing here is shared with `ndcl-core`,
//! so agreement between the two is evidence rather than tautology. Inputs
//! are assumed valid; these functions panic instead of reporting errors.

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Σ_i −log[ (1/|N(i)|) Σ_n (1−s_in) / Σ_{a≠i} (1−s_ia) ]
pub fn infonce_nd(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = preds.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut num = 0.0;
        let mut count = 0usize;
        let mut den = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = 1.0 - cosine(&preds[i], &preds[j]);
            den += d;
            if labels[j] != labels[i] {
                num += d;
                count += 1;
            }
        }
        total -= (num / count as f64 / den).ln();
    }
    total
}

/// Σ_i −(1/|N(i)|) Σ_n log[ (1−s_in) / Σ_{a≠i} (1−s_ia) ]
pub fn supcon_nd(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = preds.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut den = 0.0;
        for j in 0..n {
            if j != i {
                den += 1.0 - cosine(&preds[i], &preds[j]);
            }
        }
        let negs: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        for &m in &negs {
            total -= ((1.0 - cosine(&preds[i], &preds[m])) / den).ln() / negs.len() as f64;
        }
    }
    total
}

/// Σ_i −log[ (1/|P(i)|) Σ_p s_ip / Σ_{a≠i} s_ia ]
pub fn infonce(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = preds.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut num = 0.0;
        let mut count = 0usize;
        let mut den = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = cosine(&preds[i], &preds[j]);
            den += s;
            if labels[j] == labels[i] {
                num += s;
                count += 1;
            }
        }
        total -= (num / count as f64 / den).ln();
    }
    total
}

/// Σ_i −(1/|P(i)|) Σ_p log[ s_ip / Σ_{a≠i} s_ia ]
pub fn supcon(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = preds.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut den = 0.0;
        for j in 0..n {
            if j != i {
                den += cosine(&preds[i], &preds[j]);
            }
        }
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        for &p in &pos {
            total -= (cosine(&preds[i], &preds[p]) / den).ln() / pos.len() as f64;
        }
    }
    total
}

/// Class-domain mean predictions as `(class, domain, mean)`, ordered by
/// class then domain.
pub fn prototypes(preds: &[Vec<f64>], labels: &[usize], domains: &[usize]) -> Vec<(usize, usize, Vec<f64>)> {
    let kmax = labels.iter().max().map_or(0, |&k| k + 1);
    let dmax = domains.iter().max().map_or(0, |&d| d + 1);
    let mut out = Vec::new();
    for k in 0..kmax {
        for d in 0..dmax {
            let mut sum = vec![0.0; preds[0].len()];
            let mut count = 0usize;
            for i in 0..preds.len() {
                if labels[i] == k && domains[i] == d {
                    for c in 0..sum.len() {
                        sum[c] += preds[i][c];
                    }
                    count += 1;
                }
            }
            if count > 0 {
                out.push((k, d, sum.iter().map(|v| v / count as f64).collect()));
            }
        }
    }
    out
}

/// Σ_i −(1/|P(i)|) Σ_p log[ exp(s_ip) / Σ_{a≠i} exp(s_ia) ] over prototypes,
/// where P(i) holds same-class prototypes from other domains. Prototypes
/// without such partners are left out.
pub fn prototype_alignment(preds: &[Vec<f64>], labels: &[usize], domains: &[usize]) -> f64 {
    let protos = prototypes(preds, labels, domains);
    let n = protos.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ki, di, ref mi) = protos[i];
        let partners: Vec<usize> = (0..n).filter(|&p| protos[p].0 == ki && protos[p].1 != di).collect();
        if partners.is_empty() {
            continue;
        }
        let mut den = 0.0;
        for a in 0..n {
            if a != i {
                den += cosine(mi, &protos[a].2).exp();
            }
        }
        for &p in &partners {
            total -= (cosine(mi, &protos[p].2).exp() / den).ln() / partners.len() as f64;
        }
    }
    total
}

/// (1/K) Σ_k Σ_{i∈k} ω_i ℓ_i, ω the within-class softmax of ℓ = −log p_y,
/// K the number of classes present.
pub fn reweighted_ce(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let kmax = labels.iter().max().map_or(0, |&k| k + 1);
    let mut total = 0.0;
    let mut present = 0usize;
    for k in 0..kmax {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        present += 1;
        let mut z = 0.0;
        for &i in &members {
            z += (-preds[i][k].ln()).exp();
        }
        for &i in &members {
            let l = -preds[i][k].ln();
            total += l.exp() / z * l;
        }
    }
    total / present as f64
}

pub fn plain_ce(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..preds.len() {
        total -= preds[i][labels[i]].ln();
    }
    total / preds.len() as f64
}
