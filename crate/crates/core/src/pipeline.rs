//! Stage orchestration behind the command-line tool: fitting, reporting and the
//! per-group pipeline, with a manifest of inputs, outputs and timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{posterior_predictive_check, rank_influential, summarize, PpcReport};
use crate::chain_io::{read_chain, read_chain_labels, write_chain, DataLabels};
use crate::config::{DataConfig, LmmConfig, RunConfig, Scaling};
use crate::data::{center_per_time, load_dataset, scale_per_time, subset_by_group, LongitudinalDataset};
use crate::error::{DppcaError, Result};
use crate::identify::{identify_chain, unify_timepoints};
use crate::lmm::{backwards_select, compare_groups, LmmFit};
use crate::ppca::{fit_all_timepoints, PpcaFit};
use crate::report;
use crate::sampler::{run_chain, PosteriorChain};

pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Input path to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    /// Output path, relative to the output directory, to SHA-256 digest.
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DppcaError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects stage timings and written files for one run.
#[derive(Debug, Default)]
pub struct Recorder {
    stages: Vec<StageRecord>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(name))?;
        self.stages.push(StageRecord {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    pub fn absorb(&mut self, other: Recorder) {
        self.stages.extend(other.stages);
        self.outputs.extend(other.outputs);
    }

    /// Digest every output and write `manifest.json` into `out_dir`.
    pub fn finish(self, out_dir: &Path, cfg: &RunConfig, inputs: &[&Path]) -> Result<RunManifest> {
        let mut input_digests = BTreeMap::new();
        for p in inputs {
            input_digests.insert(p.display().to_string(), sha256_file(p)?);
        }
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(out_dir).unwrap_or(p);
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            outputs.insert(key, sha256_file(p)?);
        }
        let manifest = RunManifest {
            software_version: SOFTWARE_VERSION.to_string(),
            seed: cfg.mcmc.seed,
            config: cfg.clone(),
            inputs: input_digests,
            outputs,
            stages: self.stages,
        };
        report::write_json(&manifest, &out_dir.join(RUN_MANIFEST))?;
        Ok(manifest)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DppcaError::io(dir, e))
}

/// Apply the configured per-time centering and scaling.
pub fn prepare(ds: &LongitudinalDataset, cfg: &DataConfig) -> LongitudinalDataset {
    let centered = if cfg.center { center_per_time(ds) } else { ds.clone() };
    match cfg.scale {
        Scaling::None => centered,
        Scaling::UnitVariance => scale_per_time(&centered),
    }
}

/// PPCA initialization, sampling and identification against the PPCA loadings.
pub fn fit_dataset(prepared: &LongitudinalDataset, cfg: &RunConfig, rec: &mut Recorder) -> Result<(Vec<PpcaFit>, PosteriorChain)> {
    let fits = rec.stage("ppca", |_| fit_all_timepoints(prepared, cfg.mcmc.q))?;
    let raw = rec.stage("sampler", |_| run_chain(prepared, &cfg.prior, &cfg.mcmc, &fits))?;
    let templates: Vec<_> = fits.iter().map(|f| f.w.clone()).collect();
    let chain = rec.stage("identification", |_| {
        identify_chain(&raw, &templates, cfg.analysis.signed_permutation)
    })?;
    Ok((fits, chain))
}

fn write_fit_outputs(
    prepared: &LongitudinalDataset,
    fits: &[PpcaFit],
    chain: &PosteriorChain,
    dir: &Path,
    rec: &mut Recorder,
) -> Result<()> {
    create_dir(dir)?;
    let labels = DataLabels::of(prepared);
    let summary = rec.output(dir.join("ppca_summary.csv"));
    let loadings = rec.output(dir.join("ppca_loadings.csv"));
    report::write_ppca(fits, &labels.variable_names, &labels.time_labels, &summary, &loadings)?;
    let chain_dir = dir.join("chain");
    let man = write_chain(chain, Some(&labels), &chain_dir)?;
    for f in man.files.iter().chain(std::iter::once(&crate::chain_io::CHAIN_MANIFEST.to_string())) {
        rec.output(chain_dir.join(f));
    }
    Ok(())
}

/// Load, prepare, fit and write a chain directory plus manifest under `out_dir`.
pub fn cmd_fit(data_path: &Path, cfg: &RunConfig, config_path: Option<&Path>, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let mut rec = Recorder::default();
    let ds = rec.stage("ingest", |_| load_dataset(data_path, &cfg.data.group_column))?;
    let prepared = prepare(&ds, &cfg.data);
    let (fits, chain) = fit_dataset(&prepared, cfg, &mut rec)?;
    rec.stage("write", |r| write_fit_outputs(&prepared, &fits, &chain, out_dir, r))?;
    let mut inputs = vec![data_path];
    inputs.extend(config_path);
    rec.finish(out_dir, cfg, &inputs)
}

/// Posterior summary and autocorrelation tables for a chain directory.
pub fn diagnose(chain: &PosteriorChain, out_dir: &Path, rec: &mut Recorder) -> Result<()> {
    create_dir(out_dir)?;
    let summaries = summarize(chain)?;
    report::write_summary_csv(&summaries, &rec.output(out_dir.join("summary.csv")))?;
    report::write_acf_csv(&summaries, &rec.output(out_dir.join("acf.csv")))
}

pub fn rank(chain: &PosteriorChain, labels: &DataLabels, top_k: usize, out_dir: &Path, rec: &mut Recorder) -> Result<Vec<String>> {
    create_dir(out_dir)?;
    let ranking = rank_influential(chain, top_k)?;
    report::write_ranking_csv(
        &ranking,
        &labels.variable_names,
        &labels.time_labels,
        &rec.output(out_dir.join("ranking.csv")),
    )?;
    Ok(ranking.union.iter().map(|&k| labels.variable_names[k].clone()).collect())
}

/// Posterior-mean scores aligned to the first time point.
pub fn trajectories(chain: &PosteriorChain, labels: &DataLabels, out_dir: &Path, rec: &mut Recorder) -> Result<()> {
    create_dir(out_dir)?;
    let (_, scores, _) = unify_timepoints(&chain.mean_loadings(), &chain.mean_scores())?;
    report::write_trajectories_csv(
        &labels.obs_ids,
        &labels.groups,
        &labels.time_labels,
        &scores,
        &rec.output(out_dir.join("trajectories.csv")),
    )
}

pub fn ppc(
    chain: &PosteriorChain,
    prepared: &LongitudinalDataset,
    cfg: &RunConfig,
    out_dir: &Path,
    rec: &mut Recorder,
) -> Result<PpcReport> {
    create_dir(out_dir)?;
    let a = &cfg.analysis;
    let rep = posterior_predictive_check(chain, prepared, a.ppc_replicates, a.ppc_threshold, a.ppc_bins, cfg.mcmc.seed)?;
    report::write_ppc(
        &rep,
        prepared.time_labels(),
        &rec.output(out_dir.join("ppc_mads.csv")),
        &rec.output(out_dir.join("ppc_histogram.csv")),
    )?;
    #[derive(Serialize)]
    struct PpcSummary {
        threshold: f64,
        fraction_above: f64,
        replicates: usize,
    }
    report::write_json(
        &PpcSummary {
            threshold: rep.threshold,
            fraction_above: rep.fraction_above,
            replicates: rep.mads.len(),
        },
        &rec.output(out_dir.join("ppc_summary.json")),
    )?;
    Ok(rep)
}

/// Backwards-selected mixed models for the named variables on raw profiles.
/// Variable `k` of the dataset draws from stream `k` of the seeded generator.
pub fn fit_lmms(raw: &LongitudinalDataset, variables: &[String], cfg: &LmmConfig) -> Result<Vec<LmmFit>> {
    cfg.validate()?;
    variables
        .par_iter()
        .map(|name| {
            let k = raw.variable_index(name).ok_or_else(|| {
                DppcaError::Invalid(format!("variable `{name}` is not in the dataset"))
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            backwards_select(name, &raw.profiles(k), cfg, &mut rng).map_err(|e| e.in_stage(format!("variable {name}")))
        })
        .collect()
}

pub fn lmm(raw: &LongitudinalDataset, variables: &[String], cfg: &LmmConfig, out_dir: &Path, rec: &mut Recorder) -> Result<Vec<LmmFit>> {
    create_dir(out_dir)?;
    let fits = fit_lmms(raw, variables, cfg)?;
    report::write_json(&fits, &rec.output(out_dir.join("lmm_fits.json")))?;
    report::write_lmm_trajectories(&fits, raw.time_labels(), &rec.output(out_dir.join("lmm_trajectories.csv")))?;
    Ok(fits)
}

/// Output directory name for a group label.
pub fn group_dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn run_group(raw: &LongitudinalDataset, cfg: &RunConfig, dir: &Path) -> Result<(Vec<LmmFit>, Recorder)> {
    let mut rec = Recorder::default();
    let prepared = prepare(raw, &cfg.data);
    let (fits, chain) = fit_dataset(&prepared, cfg, &mut rec)?;
    let labels = DataLabels::of(&prepared);
    rec.stage("write", |r| write_fit_outputs(&prepared, &fits, &chain, dir, r))?;
    rec.stage("diagnose", |r| diagnose(&chain, dir, r))?;
    let ranked = rec.stage("rank", |r| rank(&chain, &labels, cfg.analysis.top_k, dir, r))?;
    rec.stage("ppc", |r| ppc(&chain, &prepared, cfg, dir, r))?;
    let lmm_fits = rec.stage("lmm", |r| lmm(raw, &ranked, &cfg.lmm, dir, r))?;
    Ok((lmm_fits, rec))
}

fn run_combined(raw: &LongitudinalDataset, cfg: &RunConfig, dir: &Path) -> Result<Recorder> {
    let mut rec = Recorder::default();
    let prepared = prepare(raw, &cfg.data);
    let (fits, chain) = fit_dataset(&prepared, cfg, &mut rec)?;
    let labels = DataLabels::of(&prepared);
    rec.stage("write", |r| write_fit_outputs(&prepared, &fits, &chain, dir, r))?;
    rec.stage("trajectories", |r| trajectories(&chain, &labels, dir, r))?;
    Ok(rec)
}

fn prefixed(mut rec: Recorder, prefix: &str) -> Recorder {
    for s in &mut rec.stages {
        s.stage = format!("{prefix}/{}", s.stage);
    }
    rec
}

/// Full analysis: a combined fit over every observation for trajectories, and
/// per-group fits driving summaries, ranking, predictive checks and mixed
/// models, followed by pairwise group comparisons. Group `g` (in order of first
/// appearance) samples with seed `mcmc.seed + g + 1`; the combined fit uses `mcmc.seed`.
/// At most `jobs` fits run at once (`None` uses every core).
pub fn cmd_pipeline(
    data_path: &Path,
    cfg: &RunConfig,
    config_path: Option<&Path>,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<RunManifest> {
    cfg.validate()?;
    let mut rec = Recorder::default();
    let ds = rec.stage("ingest", |_| load_dataset(data_path, &cfg.data.group_column))?;
    let labels = ds.group_labels();
    if labels.is_empty() || labels.iter().any(|l| l.trim().is_empty()) {
        return Err(DppcaError::Invalid(format!(
            "column `{}` has empty group labels",
            cfg.data.group_column
        )));
    }
    let dir_names: Vec<String> = labels.iter().map(|l| group_dir_name(l)).collect();
    for (a, name) in dir_names.iter().enumerate() {
        if dir_names[..a].contains(name) {
            return Err(DppcaError::Invalid(format!("group labels collide as directory name `{name}`")));
        }
    }
    let groups: Vec<LongitudinalDataset> = labels.iter().map(|l| subset_by_group(&ds, l)).collect::<Result<_>>()?;
    create_dir(out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| DppcaError::Invalid(format!("thread pool: {e}")))?;
    let combined_dir = out_dir.join("combined");
    let (combined, per_group) = pool.install(|| {
        rayon::join(
            || run_combined(&ds, cfg, &combined_dir).map_err(|e| e.in_stage("combined")),
            || {
                groups
                    .par_iter()
                    .enumerate()
                    .map(|(g, sub)| {
                        let mut gcfg = cfg.clone();
                        gcfg.mcmc.seed = cfg.mcmc.seed.wrapping_add(g as u64 + 1);
                        let dir = out_dir.join("groups").join(&dir_names[g]);
                        run_group(sub, &gcfg, &dir).map_err(|e| e.in_stage(format!("group {}", labels[g])))
                    })
                    .collect::<Result<Vec<_>>>()
            },
        )
    });
    rec.absorb(prefixed(combined?, "combined"));
    let mut all_fits = Vec::with_capacity(labels.len());
    for (g, (fits, grec)) in per_group?.into_iter().enumerate() {
        rec.absorb(prefixed(grec, &format!("group {}", labels[g])));
        all_fits.push(fits);
    }
    rec.stage("compare", |r| {
        for a in 0..labels.len() {
            for b in a + 1..labels.len() {
                let rows = compare_groups(&all_fits[a], &all_fits[b]);
                let path = r.output(out_dir.join(format!("comparison_{}_vs_{}.csv", dir_names[a], dir_names[b])));
                report::write_comparison_csv(&rows, &labels[a], &labels[b], &path)?;
            }
        }
        Ok(())
    })?;
    let mut inputs = vec![data_path];
    inputs.extend(config_path);
    rec.finish(out_dir, cfg, &inputs)
}

/// Read a chain directory and its labels.
pub fn load_chain(dir: &Path) -> Result<(PosteriorChain, DataLabels)> {
    Ok((read_chain(dir)?, read_chain_labels(dir)?))
}
