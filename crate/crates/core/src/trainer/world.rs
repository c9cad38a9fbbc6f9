//! Synthetic multi-domain Gaussian worlds and domain-balanced batch
//! sampling.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::Rng;
use crate::splits::SplitPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub num_domains: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices of each domain, in order.
    pub fn domain_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_domains];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.domain].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_classes];
        for s in &self.samples {
            out[s.label] += 1;
        }
        out
    }

    pub fn xs(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.x.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.domain).collect()
    }
}

/// One domain: a Gaussian mean per class and how many samples of each class
/// to draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl DomainSpec {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn priors(&self) -> Vec<f64> {
        let t = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Class-conditional isotropic Gaussians with shared standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub name: String,
    pub dim: usize,
    pub num_classes: usize,
    pub std: f64,
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        let check = |d: &DomainSpec, which: &str| -> Result<()> {
            if d.means.len() != self.num_classes || d.counts.len() != self.num_classes {
                return Err(Error::InvalidConfig(format!("{which}: one mean and count per class required")));
            }
            if d.means.iter().any(|m| m.len() != self.dim) {
                return Err(Error::InvalidConfig(format!("{which}: mean dimension mismatch")));
            }
            Ok(())
        };
        if self.sources.is_empty() {
            return Err(Error::InvalidConfig("world has no source domains".into()));
        }
        for (d, s) in self.sources.iter().enumerate() {
            check(s, &format!("source domain {d}"))?;
            if s.total() == 0 {
                return Err(Error::EmptyDomain(d));
            }
        }
        check(&self.target, "target domain")?;
        if !(self.std > 0.0) {
            return Err(Error::InvalidConfig("std must be positive".into()));
        }
        Ok(())
    }

    /// The source counts as a plan.
    pub fn plan(&self) -> Result<SplitPlan> {
        SplitPlan::from_counts(self.sources.iter().map(|d| d.counts.clone()).collect())
    }

    fn draw(&self, domain: &DomainSpec, domain_id: usize, rng: &mut Rng) -> Vec<Sample> {
        let mut out = Vec::with_capacity(domain.total());
        for (k, &n) in domain.counts.iter().enumerate() {
            for _ in 0..n {
                let x = domain.means[k].iter().map(|m| m + self.std * rng.normal()).collect();
                out.push(Sample {
                    x,
                    label: k,
                    domain: domain_id,
                });
            }
        }
        out
    }

    /// Draws the source training set and the target test set. Target samples
    /// carry domain id `sources.len()`.
    pub fn sample(&self, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let n = self.sources.len();
        let mut train = Vec::new();
        for (d, spec) in self.sources.iter().enumerate() {
            train.extend(self.draw(spec, d, rng));
        }
        let test = self.draw(&self.target, n, rng);
        Ok((
            Dataset {
                samples: train,
                num_classes: self.num_classes,
                num_domains: n,
            },
            Dataset {
                samples: test,
                num_classes: self.num_classes,
                num_domains: n + 1,
            },
        ))
    }
}

/// Two classes at `[∓1, 0]` with unit variance, shared by all domains; two
/// source domains with priors (0.1, 0.9) and a target with (0.9, 0.1).
/// `source_per_domain` and `target_total` set the sample counts.
pub fn make_prior_shift_world_sized(source_per_domain: usize, target_total: usize) -> SyntheticWorld {
    let means = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
    let split = |total: usize, p0: f64| {
        let a = (p0 * total as f64).round() as usize;
        vec![a, total - a]
    };
    SyntheticWorld {
        name: "prior-shift".into(),
        dim: 2,
        num_classes: 2,
        std: 1.0,
        sources: vec![
            DomainSpec {
                means: means.clone(),
                counts: split(source_per_domain, 0.1),
            },
            DomainSpec {
                means: means.clone(),
                counts: split(source_per_domain, 0.1),
            },
        ],
        target: DomainSpec {
            means,
            counts: split(target_total, 0.9),
        },
    }
}

/// 2 000 source samples over two domains and 2 000 target samples.
pub fn make_prior_shift_world() -> SyntheticWorld {
    make_prior_shift_world_sized(1000, 2000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LongtailKind {
    /// Two domains with mirrored 400:1 class imbalance.
    Misalignment,
    /// Three domains with 100/20/4 samples per class, classes balanced.
    Absorption,
    /// Every (domain, class) cell the same size.
    Balanced,
}

impl LongtailKind {
    pub fn name(self) -> &'static str {
        match self {
            LongtailKind::Misalignment => "misalignment",
            LongtailKind::Absorption => "absorption",
            LongtailKind::Balanced => "balanced",
        }
    }
}

impl FromStr for LongtailKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "misalignment" => Ok(LongtailKind::Misalignment),
            "absorption" => Ok(LongtailKind::Absorption),
            "balanced" => Ok(LongtailKind::Balanced),
            _ => Err(Error::InvalidConfig(format!("unknown long-tail world '{s}'"))),
        }
    }
}

/// Shape of a long-tail world beyond its per-domain counts.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGeometry {
    pub num_classes: usize,
    /// Radius of the circle carrying the class means.
    pub radius: f64,
    pub std: f64,
    /// Length of each domain's translation; domain `d` of `n` moves along
    /// angle `2πd/n`, the target along the angle halfway between domains 0
    /// and 1 scaled by `target_shift / domain_shift`.
    pub domain_shift: f64,
    pub target_shift: f64,
    pub target_per_class: usize,
}

impl Default for WorldGeometry {
    fn default() -> Self {
        Self {
            num_classes: 2,
            radius: 2.0,
            std: 1.0,
            domain_shift: 0.5,
            target_shift: 1.0,
            target_per_class: 500,
        }
    }
}

fn class_means(g: &WorldGeometry, offset: [f64; 2]) -> Vec<Vec<f64>> {
    (0..g.num_classes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / g.num_classes as f64;
            vec![g.radius * a.cos() + offset[0], g.radius * a.sin() + offset[1]]
        })
        .collect()
}

/// A world whose source counts are `counts[d][k]`, with class means on a
/// circle and per-domain translations.
pub fn world_from_counts(name: &str, counts: Vec<Vec<usize>>, g: &WorldGeometry) -> Result<SyntheticWorld> {
    if g.num_classes < 2 {
        return Err(Error::InvalidConfig("a long-tail world needs at least two classes".into()));
    }
    if counts.iter().any(|row| row.len() != g.num_classes) {
        return Err(Error::InvalidConfig("counts must have one entry per class".into()));
    }
    let n = counts.len();
    let sources = counts
        .into_iter()
        .enumerate()
        .map(|(d, c)| {
            let a = 2.0 * PI * d as f64 / n as f64;
            DomainSpec {
                means: class_means(g, [g.domain_shift * a.cos(), g.domain_shift * a.sin()]),
                counts: c,
            }
        })
        .collect();
    let a = PI / n as f64;
    let world = SyntheticWorld {
        name: name.into(),
        dim: 2,
        num_classes: g.num_classes,
        std: g.std,
        sources,
        target: DomainSpec {
            means: class_means(g, [g.target_shift * a.cos(), g.target_shift * a.sin()]),
            counts: vec![g.target_per_class; g.num_classes],
        },
    };
    world.validate()?;
    Ok(world)
}

/// The failure-mode worlds: mirrored 400:1 tails, 100/20/4 domain sizes,
/// or a balanced control.
pub fn make_longtail_world(kind: LongtailKind, g: &WorldGeometry) -> Result<SyntheticWorld> {
    let k = g.num_classes;
    if k < 2 {
        return Err(Error::InvalidConfig("a long-tail world needs at least two classes".into()));
    }
    let counts = match kind {
        LongtailKind::Misalignment => {
            // geometric from 400 down to 1 across classes, reversed in the
            // second domain
            let row: Vec<usize> = (0..k)
                .map(|c| 400f64.powf(1.0 - c as f64 / (k - 1) as f64).round() as usize)
                .collect();
            let mut rev = row.clone();
            rev.reverse();
            vec![row, rev]
        }
        LongtailKind::Absorption => vec![vec![100; k], vec![20; k], vec![4; k]],
        LongtailKind::Balanced => vec![vec![100; k]; 3],
    };
    world_from_counts(kind.name(), counts, g)
}

/// The world described by a split plan.
pub fn world_from_plan(plan: &SplitPlan, g: &WorldGeometry) -> Result<SyntheticWorld> {
    let g = WorldGeometry {
        num_classes: plan.num_classes(),
        ..g.clone()
    };
    world_from_counts("plan", plan.counts.clone(), &g)
}

/// `per_domain` samples from every domain of `data`, returned as indices
/// into `data.samples`, grouped by domain. A domain smaller than
/// `per_domain` contributes whole copies of itself plus a random remainder.
pub fn sample_batch(data: &Dataset, per_domain: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let by_domain = data.domain_indices();
    let mut out = Vec::with_capacity(per_domain * by_domain.len());
    for (d, idx) in by_domain.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyDomain(d));
        }
        let mut pool = idx.clone();
        let mut need = per_domain;
        while need >= pool.len() {
            out.extend_from_slice(&pool);
            need -= pool.len();
        }
        // partial Fisher–Yates for the remainder
        for i in 0..need {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
            out.push(pool[i]);
        }
    }
    Ok(out)
}
