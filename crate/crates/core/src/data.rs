//! Longitudinal multivariate datasets: `n` observations measured on `p`
//! variables at each of `M` time points.
//!
//! The on-disk form is a long CSV with header
//! `obs_id,<group>,time,<var_1>,...,<var_p>`, one row per (observation, time).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{DppcaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    obs_ids: Vec<String>,
    groups: Vec<String>,
    variable_names: Vec<String>,
    time_labels: Vec<String>,
    /// One `n x p` matrix per time point.
    slices: Vec<DMatrix<f64>>,
    /// Per-time column means removed by [`center_per_time`], if any.
    centering: Option<Vec<DVector<f64>>>,
    /// Per-time column standard deviations divided out by [`scale_per_time`], if any.
    scaling: Option<Vec<DVector<f64>>>,
}

impl LongitudinalDataset {
    pub fn new(
        obs_ids: Vec<String>,
        groups: Vec<String>,
        variable_names: Vec<String>,
        time_labels: Vec<String>,
        slices: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = obs_ids.len();
        let p = variable_names.len();
        if groups.len() != n {
            return Err(DppcaError::Dimension(format!(
                "{} group labels for {} observations",
                groups.len(),
                n
            )));
        }
        if slices.len() != time_labels.len() {
            return Err(DppcaError::Dimension(format!(
                "{} slices for {} time labels",
                slices.len(),
                time_labels.len()
            )));
        }
        if time_labels.len() < 2 {
            return Err(DppcaError::Invalid(format!(
                "at least 2 time points are required, got {}",
                time_labels.len()
            )));
        }
        if n == 0 || p == 0 {
            return Err(DppcaError::Invalid("dataset has no observations or no variables".into()));
        }
        for (m, s) in slices.iter().enumerate() {
            if s.nrows() != n || s.ncols() != p {
                return Err(DppcaError::Dimension(format!(
                    "slice {} is {}x{}, expected {}x{}",
                    m,
                    s.nrows(),
                    s.ncols(),
                    n,
                    p
                )));
            }
            if let Some((idx, _)) = s.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                let (i, k) = (idx % n, idx / n);
                return Err(DppcaError::Ingest(format!(
                    "non-finite value at obs {}, time {}, variable {}",
                    obs_ids[i], time_labels[m], variable_names[k]
                )));
            }
        }
        Ok(LongitudinalDataset {
            obs_ids,
            groups,
            variable_names,
            time_labels,
            slices,
            centering: None,
            scaling: None,
        })
    }

    pub fn n(&self) -> usize {
        self.obs_ids.len()
    }

    pub fn p(&self) -> usize {
        self.variable_names.len()
    }

    pub fn n_times(&self) -> usize {
        self.time_labels.len()
    }

    pub fn value(&self, i: usize, m: usize, k: usize) -> f64 {
        self.slices[m][(i, k)]
    }

    /// Data at time `m` as an `n x p` matrix.
    pub fn slice(&self, m: usize) -> &DMatrix<f64> {
        &self.slices[m]
    }

    pub fn slices(&self) -> &[DMatrix<f64>] {
        &self.slices
    }

    pub fn obs_ids(&self) -> &[String] {
        &self.obs_ids
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn centering(&self) -> Option<&[DVector<f64>]> {
        self.centering.as_deref()
    }

    pub fn scaling(&self) -> Option<&[DVector<f64>]> {
        self.scaling.as_deref()
    }

    /// Distinct group labels in order of first appearance.
    pub fn group_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    /// The `n x M` matrix of profiles for variable `k`.
    pub fn profiles(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.n_times(), |i, m| self.slices[m][(i, k)])
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|v| v == name)
    }

    /// Replace the values at time `m`; used by generators that post-process data.
    pub fn set_slice(&mut self, m: usize, slice: DMatrix<f64>) -> Result<()> {
        if slice.nrows() != self.n() || slice.ncols() != self.p() {
            return Err(DppcaError::Dimension("replacement slice has the wrong shape".into()));
        }
        self.slices[m] = slice;
        Ok(())
    }
}

/// Read a long-format CSV. `group_column` names the categorical label column.
pub fn load_dataset(path: &Path, group_column: &str) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path).map_err(|e| DppcaError::io(path, e))?;
    read_dataset(file, group_column)
}

pub fn read_dataset<R: std::io::Read>(reader: R, group_column: &str) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let obs_col = find("obs_id").ok_or_else(|| DppcaError::Ingest("header lacks `obs_id` column".into()))?;
    let time_col = find("time").ok_or_else(|| DppcaError::Ingest("header lacks `time` column".into()))?;
    let group_col = find(group_column)
        .ok_or_else(|| DppcaError::Ingest(format!("header lacks group column `{group_column}`")))?;
    let var_cols: Vec<usize> = (0..header.len())
        .filter(|c| *c != obs_col && *c != time_col && *c != group_col)
        .collect();
    if var_cols.is_empty() {
        return Err(DppcaError::Ingest("header has no variable columns".into()));
    }
    let variable_names: Vec<String> = var_cols.iter().map(|&c| header[c].to_string()).collect();

    let mut obs_ids: Vec<String> = Vec::new();
    let mut obs_index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<String> = Vec::new();
    let mut times: Vec<String> = Vec::new();
    let mut cells: HashMap<(usize, String), Vec<f64>> = HashMap::new();

    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row_idx + 2;
        if record.len() != header.len() {
            return Err(DppcaError::Ingest(format!(
                "row {line}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        let obs = record[obs_col].to_string();
        let group = record[group_col].to_string();
        let time = record[time_col].to_string();
        let i = match obs_index.get(&obs) {
            Some(&i) => {
                if groups[i] != group {
                    return Err(DppcaError::Ingest(format!(
                        "row {line}: obs {obs} has group `{group}` but earlier rows say `{}`",
                        groups[i]
                    )));
                }
                i
            }
            None => {
                obs_index.insert(obs.clone(), obs_ids.len());
                obs_ids.push(obs.clone());
                groups.push(group);
                obs_ids.len() - 1
            }
        };
        if !times.contains(&time) {
            times.push(time.clone());
        }
        let mut values = Vec::with_capacity(var_cols.len());
        for (&c, name) in var_cols.iter().zip(&variable_names) {
            let raw = &record[c];
            let v: f64 = raw.parse().map_err(|_| {
                DppcaError::Ingest(format!("row {line}, column `{name}`: non-numeric value `{raw}`"))
            })?;
            if !v.is_finite() {
                return Err(DppcaError::Ingest(format!(
                    "row {line}, column `{name}`: non-finite value `{raw}`"
                )));
            }
            values.push(v);
        }
        if cells.insert((i, time.clone()), values).is_some() {
            return Err(DppcaError::Ingest(format!(
                "row {line}: duplicate row for obs {obs}, time {time}"
            )));
        }
    }
    if obs_ids.is_empty() {
        return Err(DppcaError::Ingest("no data rows".into()));
    }

    let time_labels = order_time_labels(times);
    let n = obs_ids.len();
    let p = variable_names.len();
    let mut slices = Vec::with_capacity(time_labels.len());
    for t in &time_labels {
        let mut slice = DMatrix::zeros(n, p);
        for i in 0..n {
            let row = cells.get(&(i, t.clone())).ok_or_else(|| {
                DppcaError::Ingest(format!("missing row for obs {}, time {}", obs_ids[i], t))
            })?;
            for (k, v) in row.iter().enumerate() {
                slice[(i, k)] = *v;
            }
        }
        slices.push(slice);
    }
    LongitudinalDataset::new(obs_ids, groups, variable_names, time_labels, slices)
}

/// Numeric order when every label parses as a number, lexicographic otherwise.
fn order_time_labels(mut labels: Vec<String>) -> Vec<String> {
    let numeric: Option<Vec<f64>> = labels.iter().map(|t| t.parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => labels.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.total_cmp(&y)
        }),
        None => labels.sort(),
    }
    labels
}

pub fn write_dataset(ds: &LongitudinalDataset, path: &Path, group_column: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DppcaError::io(path, e))?;
    write_dataset_to(ds, file, group_column)
}

pub fn write_dataset_to<W: std::io::Write>(
    ds: &LongitudinalDataset,
    writer: W,
    group_column: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["obs_id".to_string(), group_column.to_string(), "time".to_string()];
    header.extend(ds.variable_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        for m in 0..ds.n_times() {
            let mut row = vec![ds.obs_ids[i].clone(), ds.groups[i].clone(), ds.time_labels[m].clone()];
            row.extend((0..ds.p()).map(|k| format!("{}", ds.slices[m][(i, k)])));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| DppcaError::io("<csv writer>", e))?;
    Ok(())
}

/// Keep only observations whose group label equals `label`.
pub fn subset_by_group(ds: &LongitudinalDataset, label: &str) -> Result<LongitudinalDataset> {
    let keep: Vec<usize> = (0..ds.n()).filter(|&i| ds.groups[i] == label).collect();
    if keep.is_empty() {
        return Err(DppcaError::UnknownGroup {
            label: label.to_string(),
            available: ds.group_labels(),
        });
    }
    let slices = ds
        .slices
        .iter()
        .map(|s| DMatrix::from_fn(keep.len(), ds.p(), |r, k| s[(keep[r], k)]))
        .collect();
    Ok(LongitudinalDataset {
        obs_ids: keep.iter().map(|&i| ds.obs_ids[i].clone()).collect(),
        groups: keep.iter().map(|&i| ds.groups[i].clone()).collect(),
        variable_names: ds.variable_names.clone(),
        time_labels: ds.time_labels.clone(),
        slices,
        centering: None,
        scaling: None,
    })
}

/// Subtract, for every time point and variable, the mean over observations.
///
/// The removed means are accumulated in [`LongitudinalDataset::centering`] so
/// the transformation can be reported and undone.
pub fn center_per_time(ds: &LongitudinalDataset) -> LongitudinalDataset {
    let mut out = ds.clone();
    let mut removed = Vec::with_capacity(ds.n_times());
    for (m, slice) in out.slices.iter_mut().enumerate() {
        let means = column_means(slice);
        for k in 0..slice.ncols() {
            let mk = means[k];
            slice.column_mut(k).add_scalar_mut(-mk);
        }
        let total = match &ds.centering {
            Some(prev) => &prev[m] + &means,
            None => means,
        };
        removed.push(total);
    }
    out.centering = Some(removed);
    out
}

/// Divide every (time, variable) column by its sample standard deviation.
/// Constant columns are left untouched.
pub fn scale_per_time(ds: &LongitudinalDataset) -> LongitudinalDataset {
    let mut out = ds.clone();
    let mut sds = Vec::with_capacity(ds.n_times());
    for slice in out.slices.iter_mut() {
        let n = slice.nrows();
        let means = column_means(slice);
        let mut sd = DVector::from_element(slice.ncols(), 1.0);
        for k in 0..slice.ncols() {
            let ss: f64 = slice.column(k).iter().map(|v| (v - means[k]).powi(2)).sum();
            let s = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
            if s > 0.0 {
                slice.column_mut(k).scale_mut(1.0 / s);
                sd[k] = s;
            }
        }
        sds.push(sd);
    }
    out.scaling = Some(sds);
    out
}

/// Undo [`center_per_time`] (and [`scale_per_time`] if it was applied after centering).
pub fn uncenter(ds: &LongitudinalDataset) -> LongitudinalDataset {
    let mut out = ds.clone();
    for m in 0..out.n_times() {
        if let Some(sd) = &ds.scaling {
            for k in 0..out.p() {
                out.slices[m].column_mut(k).scale_mut(sd[m][k]);
            }
        }
        if let Some(c) = &ds.centering {
            for k in 0..out.p() {
                out.slices[m].column_mut(k).add_scalar_mut(c[m][k]);
            }
        }
    }
    out.centering = None;
    out.scaling = None;
    out
}

pub(crate) fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Counts per group label, for reporting.
pub fn group_sizes(ds: &LongitudinalDataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for g in &ds.groups {
        *out.entry(g.clone()).or_insert(0) += 1;
    }
    out
}
