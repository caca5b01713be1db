//! CSV and JSON report tables written by the command-line stages.

use std::path::Path;

use nalgebra::DMatrix;

use crate::analysis::{InfluenceRanking, ParameterSummary, PpcReport, MAX_ACF_LAG};
use crate::error::{DppcaError, Result};
use crate::lmm::{centered_times, GroupComparison, LmmFit};
use crate::ppca::PpcaFit;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| DppcaError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| DppcaError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| DppcaError::io(path, e))
}

/// `parameter,mean,lower,upper,ess,estimate`
pub fn write_summary_csv(summaries: &[ParameterSummary], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["parameter", "mean", "lower", "upper", "ess", "estimate"])?;
    for s in summaries {
        w.write_record([
            s.name.clone(),
            s.mean.to_string(),
            s.lower.to_string(),
            s.upper.to_string(),
            s.ess.to_string(),
            s.format(2),
        ])?;
    }
    finish(w, path)
}

/// One row per lag, one column per parameter.
pub fn write_acf_csv(summaries: &[ParameterSummary], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["lag".to_string()];
    header.extend(summaries.iter().map(|s| s.name.clone()));
    w.write_record(&header)?;
    let lags = summaries.iter().map(|s| s.acf.len()).max().unwrap_or(0).min(MAX_ACF_LAG + 1);
    for k in 0..lags {
        let mut row = vec![k.to_string()];
        row.extend(summaries.iter().map(|s| s.acf.get(k).map_or(String::new(), |r| r.to_string())));
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// `time,rank,variable,mean,lower,upper,ci_excludes_zero`
pub fn write_ranking_csv(
    ranking: &InfluenceRanking,
    variable_names: &[String],
    time_labels: &[String],
    path: &Path,
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["time", "rank", "variable", "mean", "lower", "upper", "ci_excludes_zero"])?;
    for (m, entries) in ranking.per_time.iter().enumerate() {
        for (r, e) in entries.iter().enumerate() {
            w.write_record([
                time_labels[m].clone(),
                (r + 1).to_string(),
                variable_names[e.variable].clone(),
                e.mean.to_string(),
                e.lower.to_string(),
                e.upper.to_string(),
                e.ci_excludes_zero.to_string(),
            ])?;
        }
    }
    finish(w, path)
}

/// Distinct variable names of a ranking table, in order of first appearance.
pub fn read_ranking_variables(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DppcaError::Ingest(format!("{}: {e}", path.display())))?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "variable")
        .ok_or_else(|| DppcaError::Ingest(format!("{}: no `variable` column", path.display())))?;
    let mut out: Vec<String> = Vec::new();
    for rec in r.records() {
        let v = rec?.get(col).unwrap_or_default().to_string();
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// `obs_id,group,time,pc_1,...` from time-aligned posterior-mean scores.
pub fn write_trajectories_csv(
    obs_ids: &[String],
    groups: &[String],
    time_labels: &[String],
    scores: &[DMatrix<f64>],
    path: &Path,
) -> Result<()> {
    let mut w = writer(path)?;
    let q = scores.first().map_or(0, |s| s.ncols());
    let mut header = vec!["obs_id".to_string(), "group".into(), "time".into()];
    header.extend((1..=q).map(|j| format!("pc_{j}")));
    w.write_record(&header)?;
    for i in 0..obs_ids.len() {
        for (m, s) in scores.iter().enumerate() {
            let mut row = vec![obs_ids[i].clone(), groups[i].clone(), time_labels[m].clone()];
            row.extend(s.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    finish(w, path)
}

/// `ppc_mads.csv` (replicate, draw, time, mad) and `ppc_histogram.csv` (lower, upper, count).
pub fn write_ppc(report: &PpcReport, time_labels: &[String], mads_path: &Path, hist_path: &Path) -> Result<()> {
    let mut w = writer(mads_path)?;
    w.write_record(["replicate", "draw", "time", "mad"])?;
    for (r, row) in report.mads.iter().enumerate() {
        for (m, v) in row.iter().enumerate() {
            w.write_record([r.to_string(), report.draws[r].to_string(), time_labels[m].clone(), v.to_string()])?;
        }
    }
    finish(w, mads_path)?;
    let mut w = writer(hist_path)?;
    w.write_record(["lower", "upper", "count"])?;
    for (b, c) in report.histogram.counts.iter().enumerate() {
        w.write_record([
            report.histogram.edges[b].to_string(),
            report.histogram.edges[b + 1].to_string(),
            c.to_string(),
        ])?;
    }
    finish(w, hist_path)
}

/// `time,sigma2,eigenvalue_1..p` plus a loadings table `time,variable,w_1..w_q`.
pub fn write_ppca(fits: &[PpcaFit], variable_names: &[String], time_labels: &[String], summary: &Path, loadings: &Path) -> Result<()> {
    let mut w = writer(summary)?;
    let p = variable_names.len();
    let mut header = vec!["time".to_string(), "sigma2".into()];
    header.extend((1..=p).map(|k| format!("eigenvalue_{k}")));
    w.write_record(&header)?;
    for (m, f) in fits.iter().enumerate() {
        let mut row = vec![time_labels[m].clone(), f.sigma2.to_string()];
        row.extend(f.eigvals.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    finish(w, summary)?;
    let mut w = writer(loadings)?;
    let q = fits.first().map_or(0, |f| f.q());
    let mut header = vec!["time".to_string(), "variable".into()];
    header.extend((1..=q).map(|j| format!("w_{j}")));
    w.write_record(&header)?;
    for (m, f) in fits.iter().enumerate() {
        for k in 0..p {
            let mut row = vec![time_labels[m].clone(), variable_names[k].clone()];
            row.extend(f.w.row(k).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    finish(w, loadings)
}

/// Predicted mean trajectories: `variable,degree,time,t,predicted`.
pub fn write_lmm_trajectories(fits: &[LmmFit], time_labels: &[String], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["variable", "degree", "time", "t", "predicted"])?;
    let t = centered_times(time_labels.len());
    for f in fits {
        for (m, y) in f.trajectory.iter().enumerate() {
            w.write_record([
                f.variable.clone(),
                f.degree.to_string(),
                time_labels[m].clone(),
                t[m].to_string(),
                y.to_string(),
            ])?;
        }
    }
    finish(w, path)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_comparison_csv(rows: &[GroupComparison], group_a: &str, group_b: &str, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "variable",
        &format!("degree_{group_a}"),
        &format!("degree_{group_b}"),
        "evolving",
        &format!("top_sign_{group_a}"),
        &format!("top_sign_{group_b}"),
        "sign_discordant",
    ])?;
    for r in rows {
        let evolving = match r.evolving {
            crate::lmm::Evolving::Neither => "neither".to_string(),
            crate::lmm::Evolving::OnlyA => group_a.to_string(),
            crate::lmm::Evolving::OnlyB => group_b.to_string(),
            crate::lmm::Evolving::Both => "both".to_string(),
        };
        w.write_record([
            r.variable.clone(),
            opt(r.degree_a),
            opt(r.degree_b),
            evolving,
            opt(r.top_sign_a),
            opt(r.top_sign_b),
            r.sign_discordant.to_string(),
        ])?;
    }
    finish(w, path)
}
