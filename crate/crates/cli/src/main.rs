use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dppca::config::{RunConfig, Scaling};
use dppca::data::{load_dataset, subset_by_group, write_dataset};
use dppca::pipeline::{self, Recorder};
use dppca::ppca::fit_all_timepoints;
use dppca::report;
use dppca::simulate::{add_mean_trend, concat_observations, simulate_seeded, LoadingScheme, Scenario};
use dppca::DppcaError;

/// Dynamic probabilistic PCA for longitudinal multivariate data.
#[derive(Parser, Debug)]
#[command(name = "dppca", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides mcmc.seed and lmm.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Column holding group labels (overrides data.group_column).
    #[arg(long, global = true)]
    group_column: Option<String>,
    /// Maximum number of concurrent fits.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Per-time scaling: `none` or `unit-variance` (overrides data.scale).
    #[arg(long, global = true)]
    scale: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Per-time maximum-likelihood PPCA fits.
    Ppca(DataArg),
    /// Sample the posterior and identify the chain.
    Fit(DataArg),
    /// Posterior summaries and autocorrelations of a chain.
    Diagnose(ChainArg),
    /// Influential variables per time point.
    Rank(RankArgs),
    /// Time-aligned posterior-mean score trajectories.
    Trajectories(ChainArg),
    /// Posterior predictive covariance check.
    Ppc(PpcArgs),
    /// Mixed-model follow-up for ranked variables.
    Lmm(LmmArgs),
    /// Every stage, per group and combined.
    Pipeline(DataArg),
}

#[derive(Args, Debug)]
struct DataArg {
    /// Long-format dataset CSV.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ChainArg {
    /// Chain directory written by `fit`.
    #[arg(long)]
    chain: PathBuf,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    chain: PathBuf,
    /// Variables kept per time point (overrides analysis.top_k).
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args, Debug)]
struct PpcArgs {
    #[arg(long)]
    chain: PathBuf,
    /// The dataset the chain was fitted to.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct LmmArgs {
    #[arg(long)]
    data: PathBuf,
    /// Ranking CSV written by `rank`.
    #[arg(long)]
    ranking: PathBuf,
    /// Restrict to one group.
    #[arg(long)]
    group: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    p: usize,
    #[arg(long, default_value_t = 8)]
    times: usize,
    #[arg(long, default_value_t = 2)]
    q: usize,
    /// Comma-separated group labels, `n` observations each.
    #[arg(long, default_value = "A")]
    groups: String,
    /// Rotate loadings by this many radians per time point.
    #[arg(long)]
    rotate: Option<f64>,
    /// Planted mean trend `[GROUP/]VARIABLE:c0,c1,...` in centered time; repeatable.
    #[arg(long)]
    trend: Vec<String>,
}

fn load_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.mcmc.seed = s;
        cfg.lmm.seed = s;
    }
    if let Some(c) = &g.group_column {
        cfg.data.group_column = c.clone();
    }
    if let Some(s) = &g.scale {
        cfg.data.scale = s.parse::<Scaling>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &GlobalArgs) -> anyhow::Result<&Path> {
    match &g.out {
        Some(p) => {
            std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(p)
        }
        None => bail!("--out is required"),
    }
}

fn parse_trend(spec: &str) -> anyhow::Result<(Option<String>, String, Vec<f64>)> {
    let (target, coefs) = spec.split_once(':').context("trend must look like [GROUP/]VARIABLE:c0,c1,...")?;
    let (group, var) = match target.split_once('/') {
        Some((g, v)) => (Some(g.to_string()), v.to_string()),
        None => (None, target.to_string()),
    };
    let coefs = coefs
        .split(',')
        .map(|c| c.trim().parse::<f64>().with_context(|| format!("bad trend coefficient `{c}`")))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    Ok((group, var, coefs))
}

fn simulate(g: &GlobalArgs, a: &SimulateArgs) -> anyhow::Result<()> {
    let out = out_dir(g)?;
    let seed = g.seed.unwrap_or(1);
    let mut scenario = Scenario::desk();
    scenario.n = a.n;
    scenario.p = a.p;
    scenario.n_times = a.times;
    scenario.q = a.q;
    if a.q != 2 {
        let d = Scenario::desk();
        scenario.theta2.mu = (0..a.q).map(|j| d.theta2.mu[j.min(1)]).collect();
        scenario.theta2.phi = vec![0.8; a.q];
        scenario.theta2.v = vec![0.1; a.q];
    }
    if let Some(angle) = a.rotate {
        scenario.scheme = LoadingScheme::Rotating { angle_per_step: angle };
    }
    let labels: Vec<&str> = a.groups.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if labels.is_empty() {
        bail!("--groups needs at least one label");
    }
    let mut parts = Vec::new();
    let mut truth = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        let (ds, t) = simulate_seeded(&scenario, label, seed.wrapping_add(i as u64))?;
        parts.push(ds);
        truth.insert(label.to_string(), t);
    }
    let mut ds = concat_observations(&parts)?;
    for spec in &a.trend {
        let (group, var, coefs) = parse_trend(spec)?;
        let k = ds.variable_index(&var).with_context(|| format!("unknown variable `{var}`"))?;
        ds = add_mean_trend(&ds, k, &coefs, group.as_deref())?;
    }
    let cfg = load_config(g)?;
    write_dataset(&ds, &out.join("data.csv"), &cfg.data.group_column)?;
    report::write_json(&truth, &out.join("truth.json"))?;
    // the scenario itself, so a run can be reproduced from its outputs
    report::write_json(&scenario, &out.join("scenario.json"))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => simulate(g, a)?,
        Command::Ppca(a) => {
            let cfg = load_config(g)?;
            let out = out_dir(g)?;
            let ds = pipeline::prepare(&load_dataset(&a.data, &cfg.data.group_column)?, &cfg.data);
            let fits = fit_all_timepoints(&ds, cfg.mcmc.q)?;
            report::write_ppca(
                &fits,
                ds.variable_names(),
                ds.time_labels(),
                &out.join("ppca_summary.csv"),
                &out.join("ppca_loadings.csv"),
            )?;
        }
        Command::Fit(a) => {
            let cfg = load_config(g)?;
            let out = out_dir(g)?;
            let man = pipeline::cmd_fit(&a.data, &cfg, g.config.as_deref(), out)?;
            log::info!("wrote {} outputs to {}", man.outputs.len(), out.display());
        }
        Command::Diagnose(a) => {
            let out = out_dir(g)?;
            let (chain, _) = pipeline::load_chain(&a.chain)?;
            pipeline::diagnose(&chain, out, &mut Recorder::default())?;
        }
        Command::Rank(a) => {
            let cfg = load_config(g)?;
            let out = out_dir(g)?;
            let (chain, labels) = pipeline::load_chain(&a.chain)?;
            let k = a.top_k.unwrap_or(cfg.analysis.top_k);
            let union = pipeline::rank(&chain, &labels, k, out, &mut Recorder::default())?;
            log::info!("{} distinct influential variables", union.len());
        }
        Command::Trajectories(a) => {
            let out = out_dir(g)?;
            let (chain, labels) = pipeline::load_chain(&a.chain)?;
            pipeline::trajectories(&chain, &labels, out, &mut Recorder::default())?;
        }
        Command::Ppc(a) => {
            let cfg = load_config(g)?;
            let out = out_dir(g)?;
            let (chain, _) = pipeline::load_chain(&a.chain)?;
            let ds = pipeline::prepare(&load_dataset(&a.data, &cfg.data.group_column)?, &cfg.data);
            let rep = pipeline::ppc(&chain, &ds, &cfg, out, &mut Recorder::default())?;
            println!("fraction of MADs above {}: {}", rep.threshold, rep.fraction_above);
        }
        Command::Lmm(a) => {
            let cfg = load_config(g)?;
            let out = out_dir(g)?;
            let mut ds = load_dataset(&a.data, &cfg.data.group_column)?;
            if let Some(label) = &a.group {
                ds = subset_by_group(&ds, label)?;
            }
            let vars = report::read_ranking_variables(&a.ranking)?;
            let pool = rayon_pool(g.jobs)?;
            pool.install(|| pipeline::lmm(&ds, &vars, &cfg.lmm, out, &mut Recorder::default()))?;
        }
        Command::Pipeline(a) => {
            let cfg = load_config(g)?;
            let out = out_dir(g)?;
            pipeline::cmd_pipeline(&a.data, &cfg, g.config.as_deref(), out, g.jobs)?;
        }
    }
    Ok(())
}

fn rayon_pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<DppcaError>().is_some_and(DppcaError::is_config);
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trend_specs() {
        assert_eq!(parse_trend("v3:0,1").unwrap(), (None, "v3".into(), vec![0.0, 1.0]));
        assert_eq!(
            parse_trend("B/v1:0,0,-0.5").unwrap(),
            (Some("B".into()), "v1".into(), vec![0.0, 0.0, -0.5])
        );
        assert!(parse_trend("v3").is_err());
        assert!(parse_trend("v3:a").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
