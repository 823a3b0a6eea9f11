//! Metrics per OOD source and per source group, computed from trace rows.

use std::fmt::Write as _;

use oodd_core::eval::{self, EvalError, EvalResult};
use oodd_core::stream::TraceRow;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub auroc: f64,
    pub fpr95: f64,
    pub tau: f64,
}

impl From<EvalResult> for Metrics {
    fn from(r: EvalResult) -> Self {
        Self { auroc: r.auroc, fpr95: r.fpr95, tau: r.tau }
    }
}

/// Integrated score next to the uncalibrated latent score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pair {
    pub integrated: Metrics,
    pub latent: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceReport {
    pub name: String,
    pub group: Option<String>,
    pub n: usize,
    #[serde(flatten)]
    pub metrics: Pair,
}

/// Unweighted means over the members of a group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub members: Vec<String>,
    pub integrated_auroc: f64,
    pub integrated_fpr95: f64,
    pub latent_auroc: f64,
    pub latent_fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub n_id: usize,
    pub n_ood: usize,
    /// All OOD rows pooled against all ID rows.
    pub overall: Pair,
    pub sources: Vec<SourceReport>,
    pub groups: Vec<GroupReport>,
}

fn pair(id: &[&TraceRow], ood: &[&TraceRow]) -> Result<(EvalResult, EvalResult), EvalError> {
    let col = |rows: &[&TraceRow], f: fn(&TraceRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
    let integrated = eval::evaluate(&col(id, |r| r.s), &col(ood, |r| r.s))?;
    let latent = eval::evaluate(&col(id, |r| r.s_in), &col(ood, |r| r.s_in))?;
    Ok((integrated, latent))
}

/// Builds the report. `group_of` maps an OOD source name to its group.
pub fn build(rows: &[TraceRow], group_of: impl Fn(&str) -> Option<String>) -> Result<Report, EvalError> {
    let id: Vec<&TraceRow> = rows.iter().filter(|r| !r.is_ood).collect();
    let ood: Vec<&TraceRow> = rows.iter().filter(|r| r.is_ood).collect();
    let (i, l) = pair(&id, &ood)?;
    let overall = Pair { integrated: i.into(), latent: l.into() };

    let mut names: Vec<&str> = Vec::new();
    for r in &ood {
        if !names.contains(&r.source.as_str()) {
            names.push(&r.source);
        }
    }
    let mut sources = Vec::new();
    let mut raw: Vec<(Option<String>, EvalResult, EvalResult)> = Vec::new();
    for name in names {
        let members: Vec<&TraceRow> = ood.iter().copied().filter(|r| r.source == name).collect();
        let (i, l) = pair(&id, &members)?;
        let group = group_of(name);
        raw.push((group.clone(), i, l));
        sources.push(SourceReport {
            name: name.to_string(),
            group,
            n: members.len(),
            metrics: Pair { integrated: i.into(), latent: l.into() },
        });
    }

    let mut group_names: Vec<String> = Vec::new();
    for s in &sources {
        if let Some(g) = &s.group {
            if !group_names.contains(g) {
                group_names.push(g.clone());
            }
        }
    }
    let groups = group_names
        .into_iter()
        .map(|g| {
            let member = |s: &&(Option<String>, EvalResult, EvalResult)| s.0.as_deref() == Some(g.as_str());
            let integrated: Vec<EvalResult> = raw.iter().filter(member).map(|s| s.1).collect();
            let latent: Vec<EvalResult> = raw.iter().filter(member).map(|s| s.2).collect();
            let (ia, iff) = eval::group_mean(&integrated).expect("group has members");
            let (la, lf) = eval::group_mean(&latent).expect("group has members");
            GroupReport {
                members: sources.iter().filter(|s| s.group.as_ref() == Some(&g)).map(|s| s.name.clone()).collect(),
                name: g,
                integrated_auroc: ia,
                integrated_fpr95: iff,
                latent_auroc: la,
                latent_fpr95: lf,
            }
        })
        .collect();
    Ok(Report { n_id: id.len(), n_ood: ood.len(), overall, sources, groups })
}

/// Fixed-width table in percent.
pub fn render(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "id samples: {}, ood samples: {}", report.n_id, report.n_ood);
    let _ = writeln!(
        out,
        "{:<20} {:>7} {:>10} {:>10} {:>10} {:>10}",
        "source", "n", "AUROC", "FPR95", "AUROC_in", "FPR95_in"
    );
    let line = |out: &mut String, name: &str, n: String, p: &Pair| {
        let _ = writeln!(
            out,
            "{:<20} {:>7} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
            name,
            n,
            100.0 * p.integrated.auroc,
            100.0 * p.integrated.fpr95,
            100.0 * p.latent.auroc,
            100.0 * p.latent.fpr95
        );
    };
    for s in &report.sources {
        line(&mut out, &s.name, s.n.to_string(), &s.metrics);
    }
    line(&mut out, "(all)", report.n_ood.to_string(), &report.overall);
    for g in &report.groups {
        let _ = writeln!(
            out,
            "{:<20} {:>7} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
            format!("[{}]", g.name),
            g.members.len(),
            100.0 * g.integrated_auroc,
            100.0 * g.integrated_fpr95,
            100.0 * g.latent_auroc,
            100.0 * g.latent_fpr95
        );
    }
    out
}
