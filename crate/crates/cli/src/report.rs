//! Aggregation of finished runs into one comparison table.
//!
//! The text form has a `# runs` block (tab-separated, `-` for a class group
//! the run has no classes in) and then either a `# correlations` block with
//! Pearson r and p of each diagnostic against average accuracy, or a single
//! `# correlations omitted` line when fewer than three runs are present.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndcl_core::diagnostics::{pearson, MetricsReport};
use ndcl_core::splits::ClassGroup;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MIN_RUNS_FOR_CORRELATION: usize = 3;

const RUN_HEADER: &str = "run\taverage\tmany\tmedium\tfew\tavg_gamma\tpr_small_margin\tposterior_discrepancy\tprior_ss\tprior_st";
const CORR_HEADER: &str = "metric\tr\tp";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub name: String,
    pub average: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub avg_gamma: f64,
    pub small_margin_prob: f64,
    pub posterior_discrepancy: f64,
    pub prior_ss: f64,
    pub prior_st: f64,
}

impl RunRow {
    pub fn from_report(name: &str, r: &MetricsReport) -> Self {
        let group = |g| r.group_accuracy.get(&g).copied();
        Self {
            name: name.to_string(),
            average: r.accuracy,
            many: group(ClassGroup::Many),
            medium: group(ClassGroup::Medium),
            few: group(ClassGroup::Few),
            avg_gamma: r.avg_gamma,
            small_margin_prob: r.small_margin_prob,
            posterior_discrepancy: r.posterior_discrepancy,
            prior_ss: r.prior_ss,
            prior_st: r.prior_st,
        }
    }
}

/// Pearson correlation of one diagnostic with average accuracy. `r` and `p`
/// are NaN when the series is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub metric: String,
    pub r: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<RunRow>,
    pub correlations: Option<Vec<Correlation>>,
}

impl ReportTable {
    pub fn new(rows: Vec<RunRow>) -> Self {
        let correlations = (rows.len() >= MIN_RUNS_FOR_CORRELATION).then(|| {
            let acc: Vec<f64> = rows.iter().map(|r| r.average).collect();
            let metric = |name: &str, f: fn(&RunRow) -> f64| {
                let xs: Vec<f64> = rows.iter().map(f).collect();
                let (r, p) = pearson(&xs, &acc).unwrap_or((f64::NAN, f64::NAN));
                Correlation { metric: name.into(), r, p }
            };
            vec![
                metric("avg_gamma", |r| r.avg_gamma),
                metric("pr_small_margin", |r| r.small_margin_prob),
                metric("posterior_discrepancy", |r| r.posterior_discrepancy),
            ]
        });
        Self { rows, correlations }
    }

    pub fn correlation(&self, metric: &str) -> Option<&Correlation> {
        self.correlations.as_ref()?.iter().find(|c| c.metric == metric)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let mut out = format!("# runs\n{RUN_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.name,
                r.average,
                opt(r.many),
                opt(r.medium),
                opt(r.few),
                r.avg_gamma,
                r.small_margin_prob,
                r.posterior_discrepancy,
                r.prior_ss,
                r.prior_st
            );
        }
        match &self.correlations {
            Some(cs) => {
                let _ = writeln!(out, "# correlations\n{CORR_HEADER}");
                for c in cs {
                    let _ = writeln!(out, "{}\t{:.6}\t{:.6}", c.metric, c.r, c.p);
                }
            }
            None => {
                let _ = writeln!(
                    out,
                    "# correlations omitted: need at least {MIN_RUNS_FOR_CORRELATION} runs, got {}",
                    self.rows.len()
                );
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut expect = |want: &str| -> Result<()> {
            match lines.next() {
                Some((_, l)) if l == want => Ok(()),
                Some((i, l)) => bail!("line {}: expected '{want}', got '{l}'", i + 1),
                None => bail!("unexpected end of report, expected '{want}'"),
            }
        };
        expect("# runs")?;
        expect(RUN_HEADER)?;
        let num = |i: usize, s: &str| -> Result<f64> {
            s.parse().map_err(|_| anyhow!("line {}: bad number '{s}'", i + 1))
        };
        let mut rows = Vec::new();
        let mut correlations = None;
        let mut in_corr = false;
        for (i, line) in lines {
            if line == "# correlations" {
                correlations = Some(Vec::new());
                in_corr = true;
                continue;
            }
            if line.starts_with("# correlations omitted") {
                continue;
            }
            if in_corr && line == CORR_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if in_corr {
                if f.len() != 3 {
                    bail!("line {}: expected 3 fields, got {}", i + 1, f.len());
                }
                let cs = correlations.as_mut().expect("set on the section header");
                cs.push(Correlation {
                    metric: f[0].to_string(),
                    r: num(i, f[1])?,
                    p: num(i, f[2])?,
                });
                continue;
            }
            if f.len() != 10 {
                bail!("line {}: expected 10 fields, got {}", i + 1, f.len());
            }
            let opt = |s: &str| -> Result<Option<f64>> { if s == "-" { Ok(None) } else { num(i, s).map(Some) } };
            rows.push(RunRow {
                name: f[0].to_string(),
                average: num(i, f[1])?,
                many: opt(f[2])?,
                medium: opt(f[3])?,
                few: opt(f[4])?,
                avg_gamma: num(i, f[5])?,
                small_margin_prob: num(i, f[6])?,
                posterior_discrepancy: num(i, f[7])?,
                prior_ss: num(i, f[8])?,
                prior_st: num(i, f[9])?,
            });
        }
        Ok(Self { rows, correlations })
    }
}

/// Reads the metrics of one run directory.
pub fn load_run(dir: &Path) -> Result<RunRow> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let report = MetricsReport::from_text(&text).with_context(|| format!("malformed {}", path.display()))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunRow::from_report(&name, &report))
}
