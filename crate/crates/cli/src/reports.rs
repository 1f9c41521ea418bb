//! Report files: evaluation CSVs with a summary text block, training logs,
//! and attribution tables. All writers are byte-deterministic.

use std::fmt::Write as _;
use std::path::Path;

use crcrisk_core::evalstat::{EvalReport, P_SENTINEL};
use crcrisk_core::interpret::{GroupStat, ShapleyReport};
use crcrisk_core::training::TrainLogRow;

use crate::error::Result;

/// One row per repeat per pipeline.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pipeline", "repeat", "auc", "accuracy", "f1", "precision", "recall", "threshold"])?;
    for p in &report.pipelines {
        for (i, m) in p.per_repeat.iter().enumerate() {
            w.write_record([
                p.name.clone(),
                i.to_string(),
                format!("{}", m.auc),
                format!("{}", m.accuracy),
                format!("{}", m.f1),
                format!("{}", m.precision),
                format!("{}", m.recall),
                format!("{}", p.thresholds[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pvalues_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pipeline_a", "pipeline_b", "t", "p", "mean_auc_diff"])?;
    for c in &report.comparisons {
        w.write_record([
            c.pipeline_a.clone(),
            c.pipeline_b.clone(),
            format!("{}", c.test.t),
            format!("{}", c.test.p),
            format!("{}", c.test.mean_diff),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_p(p: f64) -> String {
    if p <= P_SENTINEL {
        "<1e-12".to_string()
    } else {
        format!("{p:.6}")
    }
}

/// Human-readable summary: mean (std) per metric per pipeline, then the
/// pairwise AUC comparisons.
pub fn render_summary(report: &EvalReport) -> String {
    let mut out = String::new();
    let n = report.pipelines.first().map_or(0, |p| p.per_repeat.len());
    let _ = writeln!(out, "evaluation over {n} repeats; mean (std) on held-out test splits");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<28} {:>16} {:>16} {:>16} {:>16} {:>16}",
        "pipeline", "auc", "accuracy", "f1", "precision", "recall"
    );
    for p in &report.pipelines {
        let cell = |pick: fn(&crcrisk_core::evalstat::Metrics) -> f64| {
            let (m, s) = p.mean_std(pick);
            format!("{m:.3} ({s:.3})")
        };
        let _ = writeln!(
            out,
            "{:<28} {:>16} {:>16} {:>16} {:>16} {:>16}",
            p.name,
            cell(|m| m.auc),
            cell(|m| m.accuracy),
            cell(|m| m.f1),
            cell(|m| m.precision),
            cell(|m| m.recall),
        );
    }
    if !report.comparisons.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "paired t-tests on per-repeat AUC:");
        for c in &report.comparisons {
            let _ = writeln!(
                out,
                "  {} vs {}: mean diff {:+.4}, t = {:.4}, p = {}",
                c.pipeline_a,
                c.pipeline_b,
                c.test.mean_diff,
                c.test.t,
                fmt_p(c.test.p),
            );
        }
    }
    out
}

pub fn write_summary(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, render_summary(report))?;
    Ok(())
}

/// Read an eval CSV + pvalues CSV pair back into a report for `report`.
pub fn read_eval_csv(
    eval_path: &Path,
    pvalues_path: &Path,
) -> Result<EvalReport> {
    use crcrisk_core::evalstat::{Comparison, Metrics, PairedTTest, PipelineResult};
    use std::collections::BTreeMap;

    let mut rows: Vec<(String, Metrics, f64)> = Vec::new();
    let mut rdr = csv::Reader::from_path(eval_path)
        .map_err(|e| crate::error::CliError::Format(format!("{}: {e}", eval_path.display())))?;
    for record in rdr.records() {
        let r = record.map_err(|e| crate::error::CliError::Format(format!("eval csv: {e}")))?;
        let parse = |i: usize| -> Result<f64> {
            r.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| crate::error::CliError::Format("eval csv: bad number".into()))
        };
        rows.push((
            r[0].to_string(),
            Metrics {
                auc: parse(2)?,
                accuracy: parse(3)?,
                f1: parse(4)?,
                precision: parse(5)?,
                recall: parse(6)?,
            },
            parse(7)?,
        ));
    }
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, PipelineResult> = BTreeMap::new();
    for (name, metrics, threshold) in rows {
        if !order.contains(&name) {
            order.push(name.clone());
        }
        let entry = grouped.entry(name.clone()).or_insert_with(|| PipelineResult {
            name,
            per_repeat: Vec::new(),
            thresholds: Vec::new(),
        });
        entry.per_repeat.push(metrics);
        entry.thresholds.push(threshold);
    }
    let pipelines: Vec<PipelineResult> =
        order.into_iter().map(|n| grouped.remove(&n).unwrap()).collect();

    let mut comparisons = Vec::new();
    let mut rdr = csv::Reader::from_path(pvalues_path)
        .map_err(|e| crate::error::CliError::Format(format!("{}: {e}", pvalues_path.display())))?;
    for record in rdr.records() {
        let r = record.map_err(|e| crate::error::CliError::Format(format!("pvalues csv: {e}")))?;
        let parse = |i: usize| -> Result<f64> {
            r.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| crate::error::CliError::Format("pvalues csv: bad number".into()))
        };
        comparisons.push(Comparison {
            pipeline_a: r[0].to_string(),
            pipeline_b: r[1].to_string(),
            test: PairedTTest { t: parse(2)?, p: parse(3)?, mean_diff: parse(4)? },
        });
    }
    Ok(EvalReport { pipelines, comparisons })
}

pub fn write_train_log(path: &Path, log: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "stage", "loss"])?;
    for row in log {
        w.write_record([row.step.to_string(), row.stage.clone(), format!("{}", row.loss)])?;
    }
    w.flush()?;
    Ok(())
}

/// Shapley (or permutation-importance) table: group, mean, std, rank.
pub fn write_group_stats_csv(path: &Path, report: &ShapleyReport) -> Result<()> {
    write_stats(path, &report.groups)
}

pub fn write_stats(path: &Path, groups: &[GroupStat]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "mean", "std", "rank"])?;
    for (rank, g) in groups.iter().enumerate() {
        w.write_record([
            g.name.clone(),
            format!("{}", g.mean),
            format!("{}", g.std),
            (rank + 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crcrisk_core::evalstat::{Comparison, Metrics, PairedTTest, PipelineResult};

    fn sample_report() -> EvalReport {
        let metrics = |auc: f64| Metrics { auc, accuracy: 0.6, f1: 0.3, precision: 0.25, recall: 0.5 };
        EvalReport {
            pipelines: vec![
                PipelineResult {
                    name: "wsi".into(),
                    per_repeat: vec![metrics(0.6), metrics(0.65)],
                    thresholds: vec![0.4, 0.45],
                },
                PipelineResult {
                    name: "clinical".into(),
                    per_repeat: vec![metrics(0.58), metrics(0.6)],
                    thresholds: vec![0.5, 0.5],
                },
            ],
            comparisons: vec![Comparison {
                pipeline_a: "wsi".into(),
                pipeline_b: "clinical".into(),
                test: PairedTTest { t: 2.3, p: 0.04, mean_diff: 0.035 },
            }],
        }
    }

    #[test]
    fn eval_csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        let eval = dir.path().join("report.csv");
        let pvals = dir.path().join("pvalues.csv");
        write_eval_csv(&eval, &report).unwrap();
        write_pvalues_csv(&pvals, &report).unwrap();
        let back = read_eval_csv(&eval, &pvals).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn summary_mentions_pipelines_and_pvalues() {
        let text = render_summary(&sample_report());
        assert!(text.contains("wsi"));
        assert!(text.contains("clinical"));
        assert!(text.contains("p = 0.04"));
    }

    #[test]
    fn sentinel_p_renders_as_inequality() {
        let mut report = sample_report();
        report.comparisons[0].test.p = 1e-12;
        assert!(render_summary(&report).contains("p = <1e-12"));
    }
}
