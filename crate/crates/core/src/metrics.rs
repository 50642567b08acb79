//! Correlation metrics used to score quality predictors.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn check_pair(pred: &[Scalar], truth: &[Scalar]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Precondition(format!(
            "prediction and ground-truth lengths differ ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value passed to a correlation".into()));
    }
    Ok(())
}

fn pearson(x: &[Scalar], y: &[Scalar]) -> Result<Scalar> {
    let n = x.len() as Scalar;
    let mx = x.iter().sum::<Scalar>() / n;
    let my = y.iter().sum::<Scalar>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input has zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation, computed on raw scores.
pub fn plcc(pred: &[Scalar], truth: &[Scalar]) -> Result<Scalar> {
    check_pair(pred, truth)?;
    pearson(pred, truth)
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn mid_ranks(v: &[Scalar]) -> Vec<Scalar> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as Scalar / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with mid-ranks for ties.
pub fn srcc(pred: &[Scalar], truth: &[Scalar]) -> Result<Scalar> {
    check_pair(pred, truth)?;
    pearson(&mid_ranks(pred), &mid_ranks(truth))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlations {
    pub plcc: Scalar,
    pub srcc: Scalar,
    pub n: usize,
}

impl Correlations {
    pub fn compute(pred: &[Scalar], truth: &[Scalar]) -> Result<Self> {
        Ok(Self { plcc: plcc(pred, truth)?, srcc: srcc(pred, truth)?, n: pred.len() })
    }
}

/// Overall correlations plus a breakdown by domain tag. Domains where the
/// correlation is undefined (one sample, constant labels) are omitted.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: Correlations,
    pub per_domain: BTreeMap<String, Correlations>,
}

impl EvalReport {
    pub fn new(pred: &[Scalar], truth: &[Scalar], domains: &[String]) -> Result<Self> {
        let overall = Correlations::compute(pred, truth)?;
        if domains.len() != pred.len() {
            return Err(Error::Precondition(format!("{} domain tags for {} predictions", domains.len(), pred.len())));
        }
        let mut groups: BTreeMap<&str, (Vec<Scalar>, Vec<Scalar>)> = BTreeMap::new();
        for ((p, t), d) in pred.iter().zip(truth).zip(domains) {
            let g = groups.entry(d).or_default();
            g.0.push(*p);
            g.1.push(*t);
        }
        let per_domain = groups
            .into_iter()
            .filter_map(|(d, (p, t))| Correlations::compute(&p, &t).ok().map(|c| (d.to_string(), c)))
            .collect();
        Ok(Self { overall, per_domain })
    }

    pub fn plcc(&self) -> Scalar {
        self.overall.plcc
    }

    pub fn srcc(&self) -> Scalar {
        self.overall.srcc
    }

    /// One CSV row per domain plus an `all` row: `domain,n,plcc,srcc`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain,n,plcc,srcc\n");
        let row = |s: &mut String, d: &str, c: &Correlations| {
            s.push_str(&format!("{d},{},{:.6},{:.6}\n", c.n, c.plcc, c.srcc));
        };
        row(&mut s, "all", &self.overall);
        for (d, c) in &self.per_domain {
            row(&mut s, d, c);
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>6} {:>8} {:>8}", "domain", "n", "PLCC", "SRCC")?;
        let mut row = |d: &str, c: &Correlations| writeln!(f, "{d:<12} {:>6} {:>8.4} {:>8.4}", c.n, c.plcc, c.srcc);
        row("all", &self.overall)?;
        for (d, c) in &self.per_domain {
            row(d, c)?;
        }
        Ok(())
    }
}
