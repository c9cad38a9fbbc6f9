//! Evaluation quantities: decision margins, small-margin probability,
//! Jensen–Shannon posterior discrepancy, sliced-Wasserstein distance between
//! point clouds, grouped accuracy and Pearson correlation.
//!
//! [`MetricsReport`] collects them into a flat table:
//!
//! ```text
//! metric,qualifier,value
//! accuracy,overall,0.91
//! accuracy,many,0.97
//! accuracy,class=3,0.42
//! avg_gamma,,0.55
//! small_margin_prob,delta=0,0.08
//! posterior_discrepancy,mean,0.013
//! posterior_discrepancy,class=0,0.02
//! prior_discrepancy,ss,0.11
//! prior_discrepancy,st,0.30
//! ```
//!
//! Groups or classes without test samples have no row.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numkit::{dot, is_on_simplex, Rng};
use crate::splits::ClassGroup;

/// How the raw score gap is mapped to the reported margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginSurrogate {
    #[default]
    Identity,
    /// `max(0, −z)`
    Hinge,
    /// `log(1 + e^z)`
    Softplus,
}

impl MarginSurrogate {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            MarginSurrogate::Identity => z,
            MarginSurrogate::Hinge => (-z).max(0.0),
            MarginSurrogate::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginRecord {
    pub sample: usize,
    pub gamma: f64,
    pub label: usize,
    pub domain: usize,
}

/// `h_y − max_{k≠y} h_k` per sample.
pub fn margins(preds: &[Vec<f64>], labels: &[usize], domains: &[usize]) -> Result<Vec<MarginRecord>> {
    margins_with(preds, labels, domains, MarginSurrogate::Identity)
}

pub fn margins_with(
    preds: &[Vec<f64>],
    labels: &[usize],
    domains: &[usize],
    surrogate: MarginSurrogate,
) -> Result<Vec<MarginRecord>> {
    if preds.len() != labels.len() || preds.len() != domains.len() {
        return Err(Error::DimensionMismatch {
            expected: preds.len(),
            got: labels.len().min(domains.len()),
        });
    }
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let y = labels[i];
            if p.len() < 2 || y >= p.len() {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: p.len(),
                });
            }
            let rival = p
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(MarginRecord {
                sample: i,
                gamma: surrogate.apply(p[y] - rival),
                label: y,
                domain: domains[i],
            })
        })
        .collect()
}

/// Fraction of records with `γ ≤ δ`.
pub fn small_margin_prob(records: &[MarginRecord], delta: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("margin records"));
    }
    let hits = records.iter().filter(|r| r.gamma <= delta).count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn average_margin(records: &[MarginRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("margin records"));
    }
    Ok(records.iter().map(|r| r.gamma).sum::<f64>() / records.len() as f64)
}

/// `Σ p log(p/q)` with `0 log 0 = 0`; infinite where `q` misses mass of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| if qi > 0.0 { pi * (pi / qi).ln() } else { f64::INFINITY })
        .sum())
}

/// Jensen–Shannon divergence with natural log, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if !is_on_simplex(p) || !is_on_simplex(q) {
        return Err(Error::OffSimplex);
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?;
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// How source domains are combined before comparing with the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiscrepancyMode {
    /// One mean over all source samples of the class.
    #[default]
    Pooled,
    /// Mean over source domains of JS(domain mean, target mean).
    PerDomain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDiscrepancy {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

fn mean_of(preds: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; preds[idx[0]].len()];
    for &i in idx {
        crate::numkit::axpy(1.0, &preds[i], &mut m);
    }
    let inv = 1.0 / idx.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Per-class JS divergence between mean source and mean target predictions,
/// and its unweighted mean over the classes that could be compared.
pub fn posterior_discrepancy(
    source_preds: &[Vec<f64>],
    source_labels: &[usize],
    source_domains: &[usize],
    target_preds: &[Vec<f64>],
    target_labels: &[usize],
    mode: DiscrepancyMode,
) -> Result<PosteriorDiscrepancy> {
    if target_preds.is_empty() {
        return Err(Error::NoTargetSamples);
    }
    if target_preds.len() != target_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: target_preds.len(),
            got: target_labels.len(),
        });
    }
    if source_preds.len() != source_labels.len() || source_preds.len() != source_domains.len() {
        return Err(Error::DimensionMismatch {
            expected: source_preds.len(),
            got: source_labels.len().min(source_domains.len()),
        });
    }
    let mut target_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in target_labels.iter().enumerate() {
        target_by_class.entry(y).or_default().push(i);
    }
    let mut source_by_class: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (i, (&y, &d)) in source_labels.iter().zip(source_domains).enumerate() {
        source_by_class.entry(y).or_default().entry(d).or_default().push(i);
    }

    let mut per_class = BTreeMap::new();
    for (&class, tidx) in &target_by_class {
        let Some(domains) = source_by_class.get(&class) else {
            log::warn!("class {class} has no source samples; skipped in posterior discrepancy");
            continue;
        };
        let tmean = mean_of(target_preds, tidx);
        let pd = match mode {
            DiscrepancyMode::Pooled => {
                let all: Vec<usize> = domains.values().flatten().copied().collect();
                js_divergence(&mean_of(source_preds, &all), &tmean)?
            }
            DiscrepancyMode::PerDomain => {
                let mut total = 0.0;
                for idx in domains.values() {
                    total += js_divergence(&mean_of(source_preds, idx), &tmean)?;
                }
                total / domains.len() as f64
            }
        };
        per_class.insert(class, pd);
    }
    if per_class.is_empty() {
        return Err(Error::NoTargetSamples);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(PosteriorDiscrepancy { per_class, mean })
}

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Sorted sample resampled to `m` points at the mid-quantiles
/// `(i + ½)/m`, by linear interpolation between order statistics.
fn quantiles(sorted: &[f64], m: usize) -> Vec<f64> {
    let n = sorted.len();
    if n == m {
        return sorted.to_vec();
    }
    (0..m)
        .map(|i| {
            let pos = ((i as f64 + 0.5) / m as f64 * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = pos - lo as f64;
            sorted[lo] + t * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// 2-Wasserstein distance between two 1-D empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("point set"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let m = a.len().max(b.len());
    let (qa, qb) = (quantiles(&a, m), quantiles(&b, m));
    let ms = qa.iter().zip(&qb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m as f64;
    Ok(ms.sqrt())
}

/// Random unit directions with Gaussian coordinates.
pub fn random_directions(dim: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = crate::numkit::norm(&v);
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

/// Mean over `num_projections` random directions of the 1-D 2-Wasserstein
/// distance between the projected clouds.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], num_projections: usize, rng: &mut Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("point set"));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if num_projections == 0 {
        return Err(Error::EmptyInput("projections"));
    }
    let dirs = random_directions(dim, num_projections, rng);
    sliced_wasserstein_along(a, b, &dirs)
}

/// As [`sliced_wasserstein`] with caller-supplied unit directions.
pub fn sliced_wasserstein_along(a: &[Vec<f64>], b: &[Vec<f64>], dirs: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for u in dirs {
        let pa: Vec<f64> = a.iter().map(|x| dot(x, u)).collect();
        let pb: Vec<f64> = b.iter().map(|x| dot(x, u)).collect();
        total += wasserstein_1d(&pa, &pb)?;
    }
    Ok(total / dirs.len() as f64)
}

/// Source–source (mean over domain pairs) and source–target (mean over
/// source domains) sliced-Wasserstein distances between embedding clouds.
pub fn prior_discrepancy(
    sources: &[Vec<Vec<f64>>],
    target: &[Vec<f64>],
    num_projections: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if sources.is_empty() {
        return Err(Error::EmptyInput("source domains"));
    }
    let dim = target.first().ok_or(Error::NoTargetSamples)?.len();
    let dirs = random_directions(dim, num_projections.max(1), rng);
    let mut ss = 0.0;
    let mut pairs = 0;
    for i in 0..sources.len() {
        for j in (i + 1)..sources.len() {
            ss += sliced_wasserstein_along(&sources[i], &sources[j], &dirs)?;
            pairs += 1;
        }
    }
    let ss = if pairs > 0 { ss / pairs as f64 } else { 0.0 };
    let mut st = 0.0;
    for s in sources {
        st += sliced_wasserstein_along(s, target, &dirs)?;
    }
    Ok((ss, st / sources.len() as f64))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedAccuracy {
    pub overall: f64,
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// Macro accuracy within each group; `None` when the group has no test
    /// samples.
    pub by_group: BTreeMap<ClassGroup, Option<f64>>,
}

pub fn grouped_accuracy(preds: &[Vec<f64>], labels: &[usize], groups: &[ClassGroup]) -> Result<GroupedAccuracy> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: preds.len(),
            got: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let k = groups.len();
    let mut hits = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (p, &y) in preds.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        seen[y] += 1;
        if argmax(p) == y {
            hits[y] += 1;
        }
    }
    let overall = hits.iter().sum::<usize>() as f64 / preds.len() as f64;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| (seen[c] > 0).then(|| hits[c] as f64 / seen[c] as f64))
        .collect();
    let by_group = ClassGroup::ALL
        .iter()
        .map(|&g| {
            let accs: Vec<f64> = (0..k).filter(|&c| groups[c] == g).filter_map(|c| per_class[c]).collect();
            let value = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
            (g, value)
        })
        .collect();
    Ok(GroupedAccuracy {
        overall,
        per_class,
        by_group,
    })
}

/// Sample correlation and its two-sided p-value from a t-distribution with
/// `n − 2` degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::EmptyInput("pearson needs at least three points"));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::DegenerateSeries);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| Error::DegenerateSeries)?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub group_accuracy: BTreeMap<ClassGroup, f64>,
    pub class_accuracy: BTreeMap<usize, f64>,
    pub avg_gamma: f64,
    pub delta: f64,
    pub small_margin_prob: f64,
    pub posterior_discrepancy: f64,
    pub class_posterior_discrepancy: BTreeMap<usize, f64>,
    pub prior_ss: f64,
    pub prior_st: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("metric,qualifier,value\n");
        let mut row = |m: &str, q: &str, v: f64| {
            let _ = writeln!(out, "{m},{q},{v}");
        };
        row("accuracy", "overall", self.accuracy);
        for (g, v) in &self.group_accuracy {
            row("accuracy", g.name(), *v);
        }
        for (c, v) in &self.class_accuracy {
            row("accuracy", &format!("class={c}"), *v);
        }
        row("avg_gamma", "", self.avg_gamma);
        row("small_margin_prob", &format!("delta={}", self.delta), self.small_margin_prob);
        row("posterior_discrepancy", "mean", self.posterior_discrepancy);
        for (c, v) in &self.class_posterior_discrepancy {
            row("posterior_discrepancy", &format!("class={c}"), *v);
        }
        row("prior_discrepancy", "ss", self.prior_ss);
        row("prior_discrepancy", "st", self.prior_st);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "metric,qualifier,value")) => {}
            _ => return Err(Error::parse(1, "missing header 'metric,qualifier,value'")),
        }
        let mut r = MetricsReport::default();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, line) in lines {
            let ln = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::parse(ln, "expected 3 fields"));
            }
            let (m, q) = (fields[0], fields[1]);
            let v: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(ln, format!("bad value '{}'", fields[2])))?;
            let class = |q: &str| -> Result<usize> {
                q.strip_prefix("class=")
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(ln, format!("bad qualifier '{q}'")))
            };
            match (m, q) {
                ("accuracy", "overall") => r.accuracy = v,
                ("accuracy", q) if q.starts_with("class=") => {
                    r.class_accuracy.insert(class(q)?, v);
                }
                ("accuracy", q) => {
                    r.group_accuracy
                        .insert(q.parse().map_err(|_| Error::parse(ln, format!("bad group '{q}'")))?, v);
                }
                ("avg_gamma", "") => r.avg_gamma = v,
                ("small_margin_prob", q) => {
                    r.delta = q
                        .strip_prefix("delta=")
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| Error::parse(ln, format!("bad qualifier '{q}'")))?;
                    r.small_margin_prob = v;
                }
                ("posterior_discrepancy", "mean") => r.posterior_discrepancy = v,
                ("posterior_discrepancy", q) => {
                    r.class_posterior_discrepancy.insert(class(q)?, v);
                }
                ("prior_discrepancy", "ss") => r.prior_ss = v,
                ("prior_discrepancy", "st") => r.prior_st = v,
                _ => return Err(Error::parse(ln, format!("unknown metric '{m},{q}'"))),
            }
            if !seen.insert((m.to_string(), q.to_string())) {
                return Err(Error::parse(ln, format!("duplicate metric '{m},{q}'")));
            }
        }
        for required in ["accuracy", "avg_gamma", "small_margin_prob", "posterior_discrepancy", "prior_discrepancy"] {
            if !seen.iter().any(|(m, _)| m == required) {
                return Err(Error::parse(0, format!("missing metric '{required}'")));
            }
        }
        Ok(r)
    }

    /// One line for terminal output.
    pub fn summary(&self) -> String {
        let group = |g: ClassGroup| {
            self.group_accuracy
                .get(&g)
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
        };
        format!(
            "acc={:.4} many={} medium={} few={} avg_gamma={:.4} P[gamma<={}]={:.4} pd={:.5} ss={:.4} st={:.4}",
            self.accuracy,
            group(ClassGroup::Many),
            group(ClassGroup::Medium),
            group(ClassGroup::Few),
            self.avg_gamma,
            self.delta,
            self.small_margin_prob,
            self.posterior_discrepancy,
            self.prior_ss,
            self.prior_st
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use crate::numkit::softmax;
    use proptest::prelude::*;

    fn rec(gamma: f64) -> MarginRecord {
        MarginRecord {
            sample: 0,
            gamma,
            label: 0,
            domain: 0,
        }
    }

    #[test]
    fn margin_examples() {
        let m = margins(
            &[vec![0.7, 0.3], vec![0.25; 4], vec![0.2, 0.8]],
            &[0, 2, 0],
            &[0, 0, 1],
        )
        .unwrap();
        assert!((m[0].gamma - 0.4).abs() < 1e-15);
        assert_eq!(m[1].gamma, 0.0);
        assert!((m[2].gamma + 0.6).abs() < 1e-15);
        assert_eq!(m[2].domain, 1);
    }

    #[test]
    fn surrogates() {
        assert_eq!(MarginSurrogate::Hinge.apply(0.3), 0.0);
        assert_eq!(MarginSurrogate::Hinge.apply(-0.3), 0.3);
        let sp = MarginSurrogate::Softplus.apply(0.0);
        assert!((sp - 2f64.ln()).abs() < 1e-15);
        assert!((MarginSurrogate::Softplus.apply(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn small_margin_examples() {
        let r: Vec<_> = [-0.1, 0.2, 0.0].into_iter().map(rec).collect();
        assert!((small_margin_prob(&r, 0.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let pos: Vec<_> = [0.1, 0.2].into_iter().map(rec).collect();
        assert_eq!(small_margin_prob(&pos, 0.0).unwrap(), 0.0);
        assert_eq!(small_margin_prob(&r, 1.0).unwrap(), 1.0);
        assert!(small_margin_prob(&[], 0.0).is_err());
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let d = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::OffSimplex));
    }

    #[test]
    fn js_matches_direct_kl() {
        // independent evaluation of ½KL(p‖m) + ½KL(q‖m)
        let (p, q) = ([0.5, 0.5], [0.9, 0.1]);
        let m = [0.7, 0.3];
        let kl_pm = 0.5 * (0.5f64 / 0.7).ln() + 0.5 * (0.5f64 / 0.3).ln();
        let kl_qm = 0.9 * (0.9f64 / 0.7).ln() + 0.1 * (0.1f64 / 0.3).ln();
        let expected = 0.5 * kl_pm + 0.5 * kl_qm;
        assert!((m[0] + m[1] - 1.0f64).abs() < 1e-15);
        assert!((js_divergence(&p, &q).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn posterior_discrepancy_examples() {
        let src = vec![vec![0.8, 0.2], vec![0.6, 0.4], vec![0.1, 0.9]];
        let pd = posterior_discrepancy(&src, &[0, 0, 1], &[0, 1, 0], &src, &[0, 0, 1], DiscrepancyMode::Pooled).unwrap();
        assert!(pd.per_class.values().all(|&v| v.abs() < 1e-15));

        let pd = posterior_discrepancy(
            &[vec![1.0, 0.0]],
            &[0],
            &[0],
            &[vec![0.0, 1.0]],
            &[0],
            DiscrepancyMode::Pooled,
        )
        .unwrap();
        assert!((pd.mean - std::f64::consts::LN_2).abs() < 1e-12);

        assert_eq!(
            posterior_discrepancy(&src, &[0, 0, 1], &[0, 1, 0], &[], &[], DiscrepancyMode::Pooled),
            Err(Error::NoTargetSamples)
        );
    }

    #[test]
    fn pooled_and_per_domain_differ_when_domains_disagree() {
        let src = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let tgt = vec![vec![0.5, 0.5]];
        let pooled = posterior_discrepancy(&src, &[0, 0], &[0, 1], &tgt, &[0], DiscrepancyMode::Pooled).unwrap();
        let per = posterior_discrepancy(&src, &[0, 0], &[0, 1], &tgt, &[0], DiscrepancyMode::PerDomain).unwrap();
        assert!(pooled.mean.abs() < 1e-15);
        assert!(per.mean > 0.1);
    }

    #[test]
    fn sliced_wasserstein_examples() {
        let mut rng = Rng::new(1);
        let a: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.normal(), rng.normal()]).collect();
        assert!(sliced_wasserstein(&a, &a, 32, &mut rng).unwrap().abs() < 1e-12);
        let d = sliced_wasserstein(&[vec![0.0]], &[vec![3.0]], 16, &mut rng).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
        assert!(matches!(
            sliced_wasserstein(&[vec![0.0]], &[vec![3.0, 1.0]], 4, &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unequal_sizes_use_quantile_resampling() {
        // {0, 1} against {0, 0.5, 1}: mid-quantiles of the pair are
        // 0, 0.5 and 1 after interpolation
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        let q = quantiles(&[0.0, 1.0], 3);
        let expected = (q.iter().zip([0.0, 0.5, 1.0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0).sqrt();
        assert!((w - expected).abs() < 1e-15);
        assert!((wasserstein_1d(&[0.0, 0.5, 1.0], &[0.0, 1.0]).unwrap() - w).abs() < 1e-15);
    }

    #[test]
    fn gaussian_shift_matches_monte_carlo_projection_oracle() {
        let mut rng = Rng::new(5);
        let n = 256;
        let a: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| vec![2.0 + rng.normal(), 2.0 + rng.normal()]).collect();
        let sw = sliced_wasserstein(&a, &b, DEFAULT_PROJECTIONS, &mut rng).unwrap();
        // ‖Δμ‖·E|⟨θ,u⟩| estimated from 10⁴ directions
        let dirs = random_directions(2, 10_000, &mut Rng::new(77));
        let dmu = [2.0, 2.0];
        let oracle = dirs.iter().map(|u| dot(u, &dmu).abs()).sum::<f64>() / dirs.len() as f64;
        assert!((sw / oracle - 1.0).abs() < 0.10, "sw={sw} oracle={oracle}");
    }

    #[test]
    fn sliced_wasserstein_triangle_inequality() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let cloud = |rng: &mut Rng, n: usize| -> Vec<Vec<f64>> {
                let s = rng.uniform_range(-2.0, 2.0);
                (0..n).map(|_| vec![s + rng.normal(), rng.normal(), -s + rng.normal()]).collect()
            };
            let (a, b, c) = (cloud(&mut rng, 40), cloud(&mut rng, 40), cloud(&mut rng, 40));
            let dirs = random_directions(3, 64, &mut rng);
            let ab = sliced_wasserstein_along(&a, &b, &dirs).unwrap();
            let bc = sliced_wasserstein_along(&b, &c, &dirs).unwrap();
            let ac = sliced_wasserstein_along(&a, &c, &dirs).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn grouped_accuracy_examples() {
        let groups = [ClassGroup::Many, ClassGroup::Few];
        let preds = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]];
        let perfect = grouped_accuracy(&preds, &[0, 1, 0], &groups).unwrap();
        assert_eq!(perfect.overall, 1.0);
        assert_eq!(perfect.by_group[&ClassGroup::Many], Some(1.0));
        assert_eq!(perfect.by_group[&ClassGroup::Few], Some(1.0));
        assert_eq!(perfect.by_group[&ClassGroup::Medium], None);

        let majority = vec![vec![0.9, 0.1]; 4];
        let acc = grouped_accuracy(&majority, &[0, 0, 1, 1], &groups).unwrap();
        assert_eq!(acc.by_group[&ClassGroup::Many], Some(1.0));
        assert_eq!(acc.by_group[&ClassGroup::Few], Some(0.0));
        assert_eq!(acc.overall, 0.5);
    }

    #[test]
    fn random_labels_give_half_accuracy() {
        let mut rng = Rng::new(8);
        let n = 20_000;
        let preds: Vec<Vec<f64>> = (0..n)
            .map(|_| softmax(&[rng.normal(), rng.normal()]).unwrap().into_inner())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let acc = grouped_accuracy(&preds, &labels, &[ClassGroup::Many, ClassGroup::Few]).unwrap();
        for g in [ClassGroup::Many, ClassGroup::Few] {
            assert!((acc.by_group[&g].unwrap() - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn argmax_tie_goes_to_lowest_index() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        let (r, p) = pearson(&xs, &up).unwrap();
        assert!((r - 1.0).abs() < 1e-15 && p == 0.0);
        assert!((pearson(&xs, &down).unwrap().0 + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&xs, &[1.0; 5]), Err(Error::DegenerateSeries));
        assert!(pearson(&xs[..2], &up[..2]).is_err());
    }

    #[test]
    fn pearson_matches_textbook_and_closed_form_t4() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let ys = [2.0, 1.0, 4.0, 3.0, 7.0, 3.0];
        // two-pass textbook r
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let r_ref = cov / (vx * vy).sqrt();
        // Student-t CDF with 4 degrees of freedom in closed form
        let t = r_ref * (4.0 / (1.0 - r_ref * r_ref)).sqrt();
        let a = 1.0 + t * t / 4.0;
        let cdf = 0.5 + 0.375 * (t / a.sqrt()) * (1.0 - t * t / (12.0 * a));
        let p_ref = 2.0 * (1.0 - cdf);
        let (r, p) = pearson(&xs, &ys).unwrap();
        assert!((r - r_ref).abs() < 1e-12);
        assert!((p - p_ref).abs() < 1e-10, "p = {p}, expected {p_ref}");
    }

    #[test]
    fn report_round_trip() {
        let mut r = MetricsReport {
            accuracy: 0.875,
            avg_gamma: 0.1 + 0.2,
            delta: 0.0,
            small_margin_prob: 1.0 / 3.0,
            posterior_discrepancy: 0.0123456789,
            prior_ss: 1e-17,
            prior_st: 2.5,
            ..Default::default()
        };
        r.group_accuracy.insert(ClassGroup::Many, 0.9);
        r.group_accuracy.insert(ClassGroup::Few, 0.1);
        r.class_accuracy.insert(0, 0.9);
        r.class_accuracy.insert(1, 0.1);
        r.class_posterior_discrepancy.insert(1, 0.02);
        let text = r.to_text();
        assert_eq!(MetricsReport::from_text(&text).unwrap(), r);
        assert!(r.summary().contains("medium=-"));
        assert!(MetricsReport::from_text("metric,qualifier,value\nfoo,,1\n").is_err());
    }

    fn simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..k).map(|_| 3.0 * rng.normal()).collect();
        softmax(&z).unwrap().into_inner()
    }

    #[test]
    fn correct_iff_positive_margin_or_winning_tie() {
        let mut rng = Rng::new(12);
        for _ in 0..2000 {
            let k = 2 + rng.below(3);
            // coarse values make ties common
            let raw: Vec<f64> = (0..k).map(|_| rng.below(3) as f64 + 1.0).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let y = rng.below(k);
            let g = margins(std::slice::from_ref(&p), &[y], &[0]).unwrap()[0].gamma;
            let correct = argmax(&p) == y;
            let tie_win = g == 0.0 && argmax(&p) == y;
            assert_eq!(correct, g > 0.0 || tie_win);
        }
    }

    proptest! {
        #[test]
        fn margins_lie_in_unit_interval(seed in any::<u64>(), k in 2usize..8) {
            let mut rng = Rng::new(seed);
            let p = simplex(&mut rng, k);
            let y = rng.below(k);
            let g = margins(&[p], &[y], &[0]).unwrap()[0].gamma;
            prop_assert!((-1.0..=1.0).contains(&g));
        }

        #[test]
        fn js_is_symmetric_bounded_nonnegative(seed in any::<u64>(), k in 2usize..8) {
            let mut rng = Rng::new(seed);
            let (p, q) = (simplex(&mut rng, k), simplex(&mut rng, k));
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
            prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn sliced_wasserstein_is_symmetric(seed in any::<u64>(), na in 1usize..20, nb in 1usize..20) {
            let mut rng = Rng::new(seed);
            let a: Vec<Vec<f64>> = (0..na).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let b: Vec<Vec<f64>> = (0..nb).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let dirs = random_directions(2, 8, &mut rng);
            let ab = sliced_wasserstein_along(&a, &b, &dirs).unwrap();
            let ba = sliced_wasserstein_along(&b, &a, &dirs).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
        }
    }
}
