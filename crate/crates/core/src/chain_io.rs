//! Chain directories: one wide CSV per parameter block plus `chain.json`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! directory back reproduces the chain bit for bit.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::McmcConfig;
use crate::data::LongitudinalDataset;
use crate::error::{DppcaError, Result};
use crate::sampler::{AcceptanceRates, ModelState, PosteriorChain};
use crate::sv::{SvScalarParams, SvVectorParams};

pub const CHAIN_MANIFEST: &str = "chain.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub format_version: u32,
    pub n_samples: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub n_times: usize,
    pub identified: bool,
    pub config: McmcConfig,
    pub acceptance: AcceptanceRates,
    pub files: Vec<String>,
    #[serde(default)]
    pub labels: Option<DataLabels>,
}

/// Names needed to report a chain without its dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataLabels {
    pub obs_ids: Vec<String>,
    pub groups: Vec<String>,
    pub variable_names: Vec<String>,
    pub time_labels: Vec<String>,
}

impl DataLabels {
    pub fn of(ds: &LongitudinalDataset) -> Self {
        DataLabels {
            obs_ids: ds.obs_ids().to_vec(),
            groups: ds.groups().to_vec(),
            variable_names: ds.variable_names().to_vec(),
            time_labels: ds.time_labels().to_vec(),
        }
    }

    /// Placeholder names `obs1.., v1.., 1..` for unlabelled chains.
    pub fn generic(n: usize, p: usize, n_times: usize) -> Self {
        DataLabels {
            obs_ids: (1..=n).map(|i| format!("obs{i}")).collect(),
            groups: vec![String::new(); n],
            variable_names: (1..=p).map(|k| format!("v{k}")).collect(),
            time_labels: (1..=n_times).map(|m| m.to_string()).collect(),
        }
    }
}

fn write_table(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DppcaError::Ingest(format!("{}: {e}", path.display())))?;
    w.write_record(&header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| DppcaError::io(path, e))?;
    Ok(())
}

fn read_table(path: &Path, expect_cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DppcaError::Ingest(format!("{}: {e}", path.display())))?;
    let cols = r.headers()?.len();
    if cols != expect_cols {
        return Err(DppcaError::Ingest(format!(
            "{}: expected {expect_cols} columns, found {cols}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<f64>().map_err(|_| {
                    DppcaError::Ingest(format!("{}: row {}, column {}: bad number {s:?}", path.display(), line + 2, c + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn matrix_header(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let mut h = vec!["sample".to_string()];
    for r in 0..rows {
        for c in 0..cols {
            h.push(format!("{prefix}_{}_{}", r + 1, c + 1));
        }
    }
    h
}

fn flatten_row_major(s: usize, m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(1 + m.len());
    v.push(s as f64);
    for r in 0..m.nrows() {
        v.extend(m.row(r).iter());
    }
    v
}

fn unflatten(row: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &row[1..])
}

/// Write `chain` into `dir`, creating it if needed. Returns the manifest.
pub fn write_chain(chain: &PosteriorChain, labels: Option<&DataLabels>, dir: &Path) -> Result<ChainManifest> {
    let first = chain
        .samples
        .first()
        .ok_or_else(|| DppcaError::Invalid("cannot write an empty chain".into()))?;
    fs::create_dir_all(dir).map_err(|e| DppcaError::io(dir, e))?;
    let (q, m_times) = (chain.q(), chain.n_times());
    let (p, n) = (first.loadings[0].nrows(), first.scores[0].nrows());
    let mut files = Vec::new();

    let mut header = vec!["sample".to_string(), "log_posterior".into(), "nu".into(), "phi".into(), "v2".into()];
    for prefix in ["mu", "phi", "V"] {
        header.extend((1..=q).map(|j| format!("{prefix}_{j}")));
    }
    write_table(
        &dir.join("scalars.csv"),
        header,
        chain.samples.iter().enumerate().map(|(s, st)| {
            let mut row = vec![s as f64, chain.log_posterior_trace[s], st.theta1.nu, st.theta1.phi, st.theta1.v2];
            row.extend(&st.theta2.mu);
            row.extend(&st.theta2.phi);
            row.extend(&st.theta2.v);
            row
        }),
    )?;
    files.push("scalars.csv".to_string());

    let mut header = vec!["sample".to_string()];
    header.extend((1..=m_times).map(|m| format!("eta_{m}")));
    write_table(
        &dir.join("eta.csv"),
        header,
        chain.samples.iter().enumerate().map(|(s, st)| {
            let mut row = vec![s as f64];
            row.extend(st.vol.eta.iter());
            row
        }),
    )?;
    files.push("eta.csv".to_string());

    // lambda_{m}_{j}: time first, matching its M x q storage
    write_table(
        &dir.join("lambda.csv"),
        matrix_header("lambda", m_times, q),
        chain.samples.iter().enumerate().map(|(s, st)| flatten_row_major(s, &st.vol.lambda)),
    )?;
    files.push("lambda.csv".to_string());

    for m in 0..m_times {
        let name = format!("loadings_t{}.csv", m + 1);
        write_table(
            &dir.join(&name),
            matrix_header("w", p, q),
            chain.samples.iter().enumerate().map(|(s, st)| flatten_row_major(s, &st.loadings[m])),
        )?;
        files.push(name);
        let name = format!("scores_t{}.csv", m + 1);
        write_table(
            &dir.join(&name),
            matrix_header("u", n, q),
            chain.samples.iter().enumerate().map(|(s, st)| flatten_row_major(s, &st.scores[m])),
        )?;
        files.push(name);
    }

    if let Some(rot) = &chain.rotations {
        for m in 0..m_times {
            let name = format!("rotations_t{}.csv", m + 1);
            write_table(
                &dir.join(&name),
                matrix_header("r", q, q),
                rot.iter().enumerate().map(|(s, per_time)| flatten_row_major(s, &per_time[m])),
            )?;
            files.push(name);
        }
    }

    let manifest = ChainManifest {
        format_version: 1,
        n_samples: chain.len(),
        n,
        p,
        q,
        n_times: m_times,
        identified: chain.rotations.is_some(),
        config: chain.config.clone(),
        acceptance: chain.acceptance,
        files,
        labels: labels.cloned(),
    };
    let path = dir.join(CHAIN_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| DppcaError::io(&path, e))?;
    Ok(manifest)
}

fn check_rows(path: &Path, rows: &[Vec<f64>], n: usize) -> Result<()> {
    if rows.len() != n {
        return Err(DppcaError::Ingest(format!("{}: expected {n} samples, found {}", path.display(), rows.len())));
    }
    Ok(())
}

pub fn read_chain_manifest(dir: &Path) -> Result<ChainManifest> {
    let path = dir.join(CHAIN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DppcaError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Stored labels, or generic ones when the chain was written without them.
pub fn read_chain_labels(dir: &Path) -> Result<DataLabels> {
    let man = read_chain_manifest(dir)?;
    Ok(man
        .labels
        .unwrap_or_else(|| DataLabels::generic(man.n, man.p, man.n_times)))
}

pub fn read_chain(dir: &Path) -> Result<PosteriorChain> {
    let man = read_chain_manifest(dir)?;
    let (s_n, n, p, q, m_times) = (man.n_samples, man.n, man.p, man.q, man.n_times);

    let path = dir.join("scalars.csv");
    let scalars = read_table(&path, 5 + 3 * q)?;
    check_rows(&path, &scalars, s_n)?;
    let path = dir.join("eta.csv");
    let eta = read_table(&path, 1 + m_times)?;
    check_rows(&path, &eta, s_n)?;
    let path = dir.join("lambda.csv");
    let lambda = read_table(&path, 1 + m_times * q)?;
    check_rows(&path, &lambda, s_n)?;
    let mut loadings = Vec::with_capacity(m_times);
    let mut scores = Vec::with_capacity(m_times);
    let mut rotations = Vec::new();
    for m in 1..=m_times {
        let path = dir.join(format!("loadings_t{m}.csv"));
        let t = read_table(&path, 1 + p * q)?;
        check_rows(&path, &t, s_n)?;
        loadings.push(t);
        let path = dir.join(format!("scores_t{m}.csv"));
        let t = read_table(&path, 1 + n * q)?;
        check_rows(&path, &t, s_n)?;
        scores.push(t);
        if man.identified {
            let path = dir.join(format!("rotations_t{m}.csv"));
            let t = read_table(&path, 1 + q * q)?;
            check_rows(&path, &t, s_n)?;
            rotations.push(t);
        }
    }

    let mut samples = Vec::with_capacity(s_n);
    let mut trace = Vec::with_capacity(s_n);
    for s in 0..s_n {
        let sc = &scalars[s];
        trace.push(sc[1]);
        let theta1 = SvScalarParams { nu: sc[2], phi: sc[3], v2: sc[4] };
        let theta2 = SvVectorParams {
            mu: sc[5..5 + q].to_vec(),
            phi: sc[5 + q..5 + 2 * q].to_vec(),
            v: sc[5 + 2 * q..5 + 3 * q].to_vec(),
        };
        samples.push(ModelState::new(
            (0..m_times).map(|m| unflatten(&loadings[m][s], p, q)).collect(),
            (0..m_times).map(|m| unflatten(&scores[m][s], n, q)).collect(),
            DVector::from_column_slice(&eta[s][1..]),
            unflatten(&lambda[s], m_times, q),
            theta1,
            theta2,
        ));
    }
    let rotations = man.identified.then(|| {
        (0..s_n)
            .map(|s| (0..m_times).map(|m| unflatten(&rotations[m][s], q, q)).collect())
            .collect()
    });
    Ok(PosteriorChain {
        samples,
        acceptance: man.acceptance,
        config: man.config,
        log_posterior_trace: trace,
        rotations,
    })
}
