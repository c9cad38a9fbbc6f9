//! Class×domain sampling plans with controlled imbalance, their summary
//! ratios, and the Many/Medium/Few class grouping.
//!
//! Three regimes are generated:
//!
//! * `TotalHeavyTail`: every domain follows the same exponential decay over
//!   classes, `n_k = base·exp(−tail·k)`.
//! * `Duality`: the same decay, but odd domains reverse the class order of
//!   the even ones and domain totals shrink geometrically by
//!   `domain_imbalance` from the first domain to the last.
//! * `MildGini`: independent per-cell factors `tail^(−U)` with `U ~ U[0,1)`,
//!   so no cell (and hence no pooled class) is more than `tail` times another.
//!
//! Counts are rounded half-up. A class that rounds to zero in every domain is
//! given one sample in the domain where its unrounded count was largest.
//!
//! # Plan file
//!
//! ```text
//! # ndcl split plan v1
//! # regime=totalheavytail domains=3 classes=5 base=160 tail=1 domain_imbalance=1 seed=7
//! # many=100 few=20
//! domain_id,class_id,count,group
//! 0,0,160,many
//! ...
//! ```
//!
//! The second header line is absent for hand-built plans.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::Rng;

pub const DEFAULT_MANY_THRESHOLD: usize = 100;
pub const DEFAULT_FEW_THRESHOLD: usize = 20;

const PLAN_MAGIC: &str = "# ndcl split plan v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    MildGini,
    TotalHeavyTail,
    Duality,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::MildGini => "mildgini",
            Regime::TotalHeavyTail => "totalheavytail",
            Regime::Duality => "duality",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "mildgini" | "gini" => Ok(Regime::MildGini),
            "totalheavytail" => Ok(Regime::TotalHeavyTail),
            "duality" => Ok(Regime::Duality),
            _ => Err(Error::InvalidSpec(format!("unknown regime '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    /// Head-class count in the largest domain.
    pub total_per_domain: usize,
    pub regime: Regime,
    pub tail_param: f64,
    pub domain_imbalance: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::InvalidSpec("num_domains must be at least 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        if self.total_per_domain == 0 {
            return Err(Error::InvalidSpec("total_per_domain must be positive".into()));
        }
        if !(self.tail_param > 0.0) || !self.tail_param.is_finite() {
            return Err(Error::InvalidSpec("tail_param must be positive".into()));
        }
        if self.regime == Regime::MildGini && self.tail_param < 1.0 {
            return Err(Error::InvalidSpec(
                "tail_param is the class-ratio bound for mildgini and must be at least 1".into(),
            ));
        }
        if !(self.domain_imbalance >= 1.0) || !self.domain_imbalance.is_finite() {
            return Err(Error::InvalidSpec("domain_imbalance must be at least 1".into()));
        }
        Ok(())
    }

    /// Pooled class ratio implied by the parameters before rounding.
    /// `None` for `MildGini`, where `tail_param` is only an upper bound.
    pub fn target_cr(&self) -> Option<f64> {
        let k = (self.num_classes - 1) as f64;
        match self.regime {
            Regime::TotalHeavyTail => Some((self.tail_param * k).exp()),
            Regime::Duality => {
                let pooled = self.unrounded_counts().ok()?;
                let totals: Vec<f64> = (0..self.num_classes)
                    .map(|c| pooled.iter().map(|row| row[c]).sum())
                    .collect();
                let max = totals.iter().copied().fold(f64::MIN, f64::max);
                let min = totals.iter().copied().fold(f64::MAX, f64::min);
                Some(max / min)
            }
            Regime::MildGini => None,
        }
    }

    /// Domain ratio implied by the parameters before rounding.
    pub fn target_dr(&self) -> f64 {
        match self.regime {
            Regime::Duality => self.domain_imbalance,
            _ => 1.0,
        }
    }

    fn unrounded_counts(&self) -> Result<Vec<Vec<f64>>> {
        self.unrounded_counts_with(&mut Rng::new(self.seed))
    }

    fn unrounded_counts_with(&self, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let (n, k) = (self.num_domains, self.num_classes);
        let base = self.total_per_domain as f64;
        let decay = |rank: usize| base * (-self.tail_param * rank as f64).exp();
        let counts = match self.regime {
            Regime::TotalHeavyTail => (0..n).map(|_| (0..k).map(decay).collect()).collect(),
            Regime::Duality => (0..n)
                .map(|d| {
                    let scale = self.domain_imbalance.powf(-(d as f64) / (n - 1) as f64);
                    (0..k)
                        .map(|c| {
                            let rank = if d % 2 == 0 { c } else { k - 1 - c };
                            scale * decay(rank)
                        })
                        .collect()
                })
                .collect(),
            Regime::MildGini => {
                let ln_tail = self.tail_param.ln();
                (0..n)
                    .map(|_| (0..k).map(|_| base * (-ln_tail * rng.uniform()).exp()).collect())
                    .collect()
            }
        };
        Ok(counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassGroup {
    Many,
    Medium,
    Few,
}

impl ClassGroup {
    pub const ALL: [ClassGroup; 3] = [ClassGroup::Many, ClassGroup::Medium, ClassGroup::Few];

    pub fn name(self) -> &'static str {
        match self {
            ClassGroup::Many => "many",
            ClassGroup::Medium => "medium",
            ClassGroup::Few => "few",
        }
    }
}

impl fmt::Display for ClassGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "many" => Ok(ClassGroup::Many),
            "medium" => Ok(ClassGroup::Medium),
            "few" => Ok(ClassGroup::Few),
            _ => Err(Error::InvalidSpec(format!("unknown class group '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    /// `counts[d][k]`.
    pub counts: Vec<Vec<usize>>,
    pub many_threshold: usize,
    pub few_threshold: usize,
    /// The generating spec, when there was one.
    pub spec: Option<SplitSpec>,
}

impl SplitPlan {
    /// A hand-built plan with the default thresholds.
    pub fn from_counts(counts: Vec<Vec<usize>>) -> Result<Self> {
        let plan = Self {
            counts,
            many_threshold: DEFAULT_MANY_THRESHOLD,
            few_threshold: DEFAULT_FEW_THRESHOLD,
            spec: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_thresholds(mut self, many: usize, few: usize) -> Result<Self> {
        self.many_threshold = many;
        self.few_threshold = few;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() {
            return Err(Error::InvalidSpec("plan has no domains".into()));
        }
        let k = self.counts[0].len();
        if k == 0 || self.counts.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidSpec("plan rows must share a positive class count".into()));
        }
        if let Some(d) = self.counts.iter().position(|row| row.iter().all(|&c| c == 0)) {
            return Err(Error::EmptyDomain(d));
        }
        if !(self.many_threshold > self.few_threshold && self.few_threshold >= 1) {
            return Err(Error::InvalidSpec(format!(
                "thresholds must satisfy many > few >= 1, got many={} few={}",
                self.many_threshold, self.few_threshold
            )));
        }
        Ok(())
    }

    pub fn num_domains(&self) -> usize {
        self.counts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// `n_k = Σ_d n_k^d`.
    pub fn class_totals(&self) -> Vec<usize> {
        (0..self.num_classes())
            .map(|k| self.counts.iter().map(|row| row[k]).sum())
            .collect()
    }

    pub fn domain_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(PLAN_MAGIC);
        out.push('\n');
        if let Some(s) = &self.spec {
            out.push_str(&format!(
                "# regime={} domains={} classes={} base={} tail={} domain_imbalance={} seed={}\n",
                s.regime, s.num_domains, s.num_classes, s.total_per_domain, s.tail_param, s.domain_imbalance, s.seed
            ));
        }
        out.push_str(&format!("# many={} few={}\n", self.many_threshold, self.few_threshold));
        out.push_str("domain_id,class_id,count,group\n");
        let groups = group_classes(self);
        for (d, row) in self.counts.iter().enumerate() {
            for (k, c) in row.iter().enumerate() {
                out.push_str(&format!("{d},{k},{c},{}\n", groups[k]));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == PLAN_MAGIC => {}
            _ => return Err(Error::parse(1, "missing plan header")),
        }
        let mut spec = None;
        let mut thresholds = None;
        let mut cells: Vec<(usize, usize, usize, ClassGroup)> = Vec::new();
        let mut saw_columns = false;
        for (idx, line) in lines {
            let ln = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let kv = parse_kv(rest, ln)?;
                if kv.iter().any(|(k, _)| k == "regime") {
                    spec = Some(spec_from_kv(&kv, ln)?);
                } else if kv.iter().any(|(k, _)| k == "many") {
                    let get = |key: &str| -> Result<usize> {
                        kv.iter()
                            .find(|(k, _)| k == key)
                            .ok_or_else(|| Error::parse(ln, format!("missing {key}")))?
                            .1
                            .parse()
                            .map_err(|_| Error::parse(ln, format!("bad {key}")))
                    };
                    thresholds = Some((get("many")?, get("few")?));
                }
                continue;
            }
            if !saw_columns {
                if line != "domain_id,class_id,count,group" {
                    return Err(Error::parse(ln, "expected column header"));
                }
                saw_columns = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::parse(ln, "expected 4 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(ln, format!("bad integer '{s}'")));
            cells.push((num(fields[0])?, num(fields[1])?, num(fields[2])?, fields[3].parse()?));
        }
        let (many, few) = thresholds.ok_or_else(|| Error::parse(0, "missing threshold line"))?;
        let n = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let k = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if cells.len() != n * k {
            return Err(Error::parse(0, "plan records do not form a full matrix"));
        }
        let mut counts = vec![vec![usize::MAX; k]; n];
        for &(d, c, v, _) in &cells {
            if counts[d][c] != usize::MAX {
                return Err(Error::parse(0, format!("duplicate record ({d}, {c})")));
            }
            counts[d][c] = v;
        }
        let plan = Self {
            counts,
            many_threshold: many,
            few_threshold: few,
            spec,
        };
        plan.validate()?;
        let groups = group_classes(&plan);
        if let Some(&(d, c, _, _)) = cells.iter().find(|cell| groups[cell.1] != cell.3) {
            return Err(Error::parse(0, format!("group of record ({d}, {c}) disagrees with its count")));
        }
        Ok(plan)
    }
}

fn parse_kv(s: &str, line: usize) -> Result<Vec<(String, String)>> {
    s.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::parse(line, format!("expected key=value, got '{tok}'")))
        })
        .collect()
}

fn spec_from_kv(kv: &[(String, String)], line: usize) -> Result<SplitSpec> {
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::parse(line, format!("missing {key}")))
    };
    let bad = |key: &str| Error::parse(line, format!("bad {key}"));
    Ok(SplitSpec {
        regime: get("regime")?.parse()?,
        num_domains: get("domains")?.parse().map_err(|_| bad("domains"))?,
        num_classes: get("classes")?.parse().map_err(|_| bad("classes"))?,
        total_per_domain: get("base")?.parse().map_err(|_| bad("base"))?,
        tail_param: get("tail")?.parse().map_err(|_| bad("tail"))?,
        domain_imbalance: get("domain_imbalance")?.parse().map_err(|_| bad("domain_imbalance"))?,
        seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
    })
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Generates a plan drawing any randomness from `rng`.
pub fn generate_plan(spec: &SplitSpec, rng: &mut Rng) -> Result<SplitPlan> {
    let raw = spec.unrounded_counts_with(rng)?;
    let mut counts: Vec<Vec<usize>> = raw
        .iter()
        .map(|row| row.iter().map(|&v| round_half_up(v)).collect())
        .collect();
    for k in 0..spec.num_classes {
        if counts.iter().all(|row| row[k] == 0) {
            let (best, &value) = raw
                .iter()
                .map(|row| &row[k])
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least two domains");
            if !(value > 0.0) {
                return Err(Error::ClassEliminated(k));
            }
            counts[best][k] = 1;
        }
    }
    let plan = SplitPlan {
        counts,
        many_threshold: DEFAULT_MANY_THRESHOLD,
        few_threshold: DEFAULT_FEW_THRESHOLD,
        spec: Some(spec.clone()),
    };
    plan.validate()?;
    Ok(plan)
}

/// [`generate_plan`] with the `splits` substream of the spec's own seed.
pub fn generate_plan_seeded(spec: &SplitSpec) -> Result<SplitPlan> {
    generate_plan(spec, &mut Rng::new(spec.seed).substream("splits"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceStats {
    pub cr: f64,
    pub dr: f64,
    pub ecr: Vec<f64>,
}

/// CR over pooled class totals, DR over domain totals, and per-domain ECR
/// over the classes present in that domain.
pub fn compute_stats(plan: &SplitPlan) -> Result<ImbalanceStats> {
    if let Some(d) = plan.counts.iter().position(|row| row.iter().all(|&c| c == 0)) {
        return Err(Error::EmptyDomain(d));
    }
    let ratio = |xs: &[usize]| -> f64 {
        let present = xs.iter().copied().filter(|&c| c > 0);
        let max = present.clone().max().unwrap_or(0) as f64;
        let min = present.min().unwrap_or(1) as f64;
        max / min
    };
    let totals = plan.class_totals();
    if let Some(k) = totals.iter().position(|&c| c == 0) {
        return Err(Error::ClassEliminated(k));
    }
    Ok(ImbalanceStats {
        cr: ratio(&totals),
        dr: ratio(&plan.domain_totals()),
        ecr: plan.counts.iter().map(|row| ratio(row)).collect(),
    })
}

/// Many if the pooled count is at least `many_threshold`, Few if at most
/// `few_threshold`, Medium otherwise.
pub fn group_classes(plan: &SplitPlan) -> Vec<ClassGroup> {
    plan.class_totals()
        .into_iter()
        .map(|n| {
            if n >= plan.many_threshold {
                ClassGroup::Many
            } else if n <= plan.few_threshold {
                ClassGroup::Few
            } else {
                ClassGroup::Medium
            }
        })
        .collect()
}
