mod common;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

use common::{short_chain, state_from_truth};
use dppca::analysis::{posterior_predictive_check, rank_influential, replicate_dataset};
use dppca::chain_io::{read_chain, read_chain_labels, write_chain, DataLabels};
use dppca::config::{DataConfig, LmmConfig, PriorConfig, RunConfig};
use dppca::data::{load_dataset, write_dataset, LongitudinalDataset};
use dppca::identify::{identify_chain, unify_timepoints};
use dppca::linalg::{ln_inv_gamma_pdf, ln_normal_pdf, random_orthogonal, random_orthonormal, sample_cov, std_normal};
use dppca::lmm::{backwards_select, simulate_profiles, LmmSampler};
use dppca::pipeline::{cmd_fit, cmd_pipeline, prepare};
use dppca::ppca::fit_all_timepoints;
use dppca::sampler::{run_chain, AcceptanceRates, ModelState, PosteriorChain};
use dppca::simulate::{simulate_seeded, Scenario};
use dppca::sv::simulate_sv_vector;
use dppca::DppcaError;

fn chain_of(samples: Vec<ModelState>) -> PosteriorChain {
    let s = samples.len();
    PosteriorChain {
        samples,
        acceptance: AcceptanceRates::default(),
        config: dppca::config::McmcConfig::default(),
        log_posterior_trace: vec![0.0; s],
        rotations: None,
    }
}

fn fitted_chain(seed: u64) -> (LongitudinalDataset, PosteriorChain, Vec<DMatrix<f64>>) {
    let (ds, _) = simulate_seeded(&Scenario::desk(), "g", seed).unwrap();
    let prepared = prepare(&ds, &DataConfig::default());
    let fits = fit_all_timepoints(&prepared, 2).unwrap();
    let chain = run_chain(&prepared, &PriorConfig::default(), &short_chain(seed, 2_000, 10, 500), &fits).unwrap();
    (prepared, chain, fits.into_iter().map(|f| f.w).collect())
}

// identification ------------------------------------------------------------

#[test]
fn rotated_copies_of_template_identify_to_template() {
    let (_, truth) = simulate_seeded(&Scenario::desk(), "g", 3).unwrap();
    let base = state_from_truth(&truth);
    let templates: Vec<DMatrix<f64>> = base.loadings.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = (0..20)
        .map(|_| {
            let mut s = base.clone();
            for m in 0..s.n_times() {
                let q = random_orthogonal(2, &mut rng);
                s.loadings[m] = &s.loadings[m] * &q;
                s.scores[m] = &s.scores[m] * &q;
            }
            s
        })
        .collect();
    let ident = identify_chain(&chain_of(samples), &templates, false).unwrap();
    for s in &ident.samples {
        for m in 0..s.n_times() {
            assert!((&s.loadings[m] - &templates[m]).amax() < 1e-10);
            assert!((&s.scores[m] - &base.scores[m]).amax() < 1e-10);
        }
    }
}

#[test]
fn unify_displacements_survive_global_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w: Vec<DMatrix<f64>> = (0..5).map(|_| random_orthonormal(8, 2, &mut rng)).collect();
    let u: Vec<DMatrix<f64>> = (0..5).map(|_| DMatrix::from_fn(6, 2, |_, _| std_normal(&mut rng))).collect();
    let g = random_orthogonal(2, &mut rng);
    let w_rot: Vec<_> = w.iter().map(|x| x * &g).collect();
    let u_rot: Vec<_> = u.iter().map(|x| x * &g).collect();
    let (_, a, rots) = unify_timepoints(&w, &u).unwrap();
    let (_, b, _) = unify_timepoints(&w_rot, &u_rot).unwrap();
    assert_eq!(rots[0], DMatrix::identity(2, 2));
    for m in 1..5 {
        for i in 0..6 {
            let da = (a[m].row(i) - a[m - 1].row(i)).norm();
            let db = (b[m].row(i) - b[m - 1].row(i)).norm();
            assert!((da - db).abs() < 1e-10);
        }
    }
}

#[test]
fn identical_loadings_need_no_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = random_orthonormal(6, 2, &mut rng) * 1.5;
    let u = DMatrix::from_fn(4, 2, |_, _| std_normal(&mut rng));
    let (_, _, rots) = unify_timepoints(&vec![w; 4], &vec![u; 4]).unwrap();
    for r in rots {
        assert!((r - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}

// posterior analysis --------------------------------------------------------

#[test]
fn dominant_variable_ranks_first() {
    let (_, truth) = simulate_seeded(&Scenario::desk(), "g", 4).unwrap();
    let base = state_from_truth(&truth);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples = (0..30)
        .map(|_| {
            let mut s = base.clone();
            for m in 0..s.n_times() {
                s.loadings[m] = DMatrix::from_fn(30, 2, |_, _| 0.1 * std_normal(&mut rng));
                s.loadings[m][(17, 0)] = 3.0 + 0.1 * std_normal(&mut rng);
            }
            s
        })
        .collect();
    let ranking = rank_influential(&chain_of(samples), 5).unwrap();
    for entries in &ranking.per_time {
        assert_eq!(entries.len(), 5);
        assert_eq!(entries[0].variable, 17);
        assert!(entries[0].ci_excludes_zero);
    }
}

#[test]
fn five_per_time_over_eight_times_can_collapse_to_eight_variables() {
    // a shared core of four variables plus one rotating fifth per time point
    let (_, truth) = simulate_seeded(&Scenario::desk(), "g", 4).unwrap();
    let base = state_from_truth(&truth);
    let mut s = base.clone();
    for m in 0..8 {
        let mut w = DMatrix::from_element(30, 2, 0.01);
        for (r, v) in [0usize, 1, 2, 3].iter().enumerate() {
            w[(*v, 0)] = 2.0 - 0.1 * r as f64;
        }
        w[(4 + m % 4, 0)] = 1.0;
        s.loadings[m] = w;
    }
    let ranking = rank_influential(&chain_of(vec![s; 12]), 5).unwrap();
    assert_eq!(ranking.per_time.len(), 8);
    assert_eq!(ranking.union.len(), 8);
}

#[test]
fn ppc_is_reproducible_across_thread_counts() {
    let (prepared, chain, _) = fitted_chain(21);
    let a = posterior_predictive_check(&chain, &prepared, 30, 1.0, 10, 9).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| posterior_predictive_check(&chain, &prepared, 30, 1.0, 10, 9).unwrap());
    assert_eq!(a, b);
    let c = posterior_predictive_check(&chain, &prepared, 30, 1.0, 10, 10).unwrap();
    assert_ne!(a.mads, c.mads);
    assert!(a.mads.iter().flatten().all(|v| *v >= 0.0));
    assert!((0.0..=1.0).contains(&a.fraction_above));
    assert_eq!(a.histogram.counts.iter().sum::<usize>(), 30 * 8);
}

#[test]
fn replicate_matches_model_covariance_at_scale() {
    let (_, truth) = simulate_seeded(&Scenario::desk(), "g", 8).unwrap();
    let state = state_from_truth(&truth);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rep = replicate_dataset(&state, 20_000, &mut rng);
    for (m, x) in rep.iter().enumerate() {
        let emp = sample_cov(x);
        let model = truth.implied_cov(m);
        assert!((emp - &model).amax() < 0.1 * model.diagonal().amax());
    }
}

// mixed models --------------------------------------------------------------

fn lmm_log_joint(y: &DMatrix<f64>, degree: usize, cfg: &LmmConfig, beta: &DVector<f64>, b: &DVector<f64>, tau2: f64, s2: f64) -> f64 {
    let m = y.ncols();
    let c = (m as f64 + 1.0) / 2.0;
    let mut total = 0.0;
    for i in 0..y.nrows() {
        for t in 0..m {
            let tt = (t + 1) as f64 - c;
            let mean: f64 = (0..=degree).map(|r| beta[r] * tt.powi(r as i32)).sum::<f64>() + b[i];
            total += ln_normal_pdf(y[(i, t)], mean, s2);
        }
        total += ln_normal_pdf(b[i], 0.0, tau2);
    }
    total += beta.iter().map(|v| ln_normal_pdf(*v, 0.0, cfg.beta_prior_var)).sum::<f64>();
    total + ln_inv_gamma_pdf(tau2, cfg.var_shape, cfg.var_rate) + ln_inv_gamma_pdf(s2, cfg.var_shape, cfg.var_rate)
}

#[test]
fn lmm_conditionals_match_joint_differences() {
    let cfg = LmmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let y = simulate_profiles(7, 6, &[1.0, 0.3, -0.2], 0.3, 0.2, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let degree = rng.random_range(0..=3usize);
        let mut sampler = LmmSampler::new(&y, degree, &cfg).unwrap();
        sampler.state.beta = DVector::from_fn(degree + 1, |_, _| std_normal(&mut rng));
        sampler.state.intercepts = DVector::from_fn(7, |_, _| std_normal(&mut rng));
        sampler.state.tau2 = rng.random_range(0.05..2.0);
        sampler.state.sigma2_e = rng.random_range(0.05..2.0);
        let a = sampler.state.clone();
        let joint = |s: &dppca::lmm::LmmState| lmm_log_joint(&y, degree, &cfg, &s.beta, &s.intercepts, s.tau2, s.sigma2_e);

        let mut b = a.clone();
        b.beta = DVector::from_fn(degree + 1, |_, _| std_normal(&mut rng));
        let c = sampler.beta_conditional().unwrap();
        worst = worst.max(((c.ln_pdf(&b.beta) - c.ln_pdf(&a.beta)) - (joint(&b) - joint(&a))).abs());

        let i = rng.random_range(0..7);
        let mut b = a.clone();
        b.intercepts[i] += std_normal(&mut rng);
        let (mean, var) = sampler.intercept_conditional(i);
        let d = ln_normal_pdf(b.intercepts[i], mean, var) - ln_normal_pdf(a.intercepts[i], mean, var);
        worst = worst.max((d - (joint(&b) - joint(&a))).abs());

        let mut b = a.clone();
        b.tau2 = rng.random_range(0.05..2.0);
        let (sh, sc) = sampler.tau2_conditional();
        let d = ln_inv_gamma_pdf(b.tau2, sh, sc) - ln_inv_gamma_pdf(a.tau2, sh, sc);
        worst = worst.max((d - (joint(&b) - joint(&a))).abs());

        let mut b = a.clone();
        b.sigma2_e = rng.random_range(0.05..2.0);
        let (sh, sc) = sampler.sigma2_conditional();
        let d = ln_inv_gamma_pdf(b.sigma2_e, sh, sc) - ln_inv_gamma_pdf(a.sigma2_e, sh, sc);
        worst = worst.max((d - (joint(&b) - joint(&a))).abs());
    }
    assert!(worst < 1e-8, "worst {worst:e}");
}

#[test]
fn lmm_simulated_covariance_has_compound_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (tau2, s2) = (0.4, 0.25);
    let y = simulate_profiles(40_000, 4, &[1.0, 0.5], tau2, s2, &mut rng);
    let fitted = dppca::lmm::centered_times(4);
    let resid = DMatrix::from_fn(y.nrows(), 4, |i, t| y[(i, t)] - 1.0 - 0.5 * fitted[t]);
    let cov = sample_cov(&resid);
    for a in 0..4 {
        for b in 0..4 {
            let want = tau2 + if a == b { s2 } else { 0.0 };
            assert!((cov[(a, b)] - want).abs() < 0.02, "({a},{b}) {}", cov[(a, b)]);
        }
    }
}

#[test]
fn null_selection_stays_near_nominal_per_step() {
    let cfg = LmmConfig::default();
    let degrees: Vec<usize> = (0..200u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(5_000 + r);
            let y = simulate_profiles(20, 8, &[1.0], 0.2, 0.1, &mut rng);
            backwards_select("null", &y, &cfg, &mut rng).unwrap().degree
        })
        .collect();
    for step in (1..=3).rev() {
        let reached = degrees.iter().filter(|d| **d <= step).count() as u64;
        let flagged = degrees.iter().filter(|d| **d == step).count() as u64;
        let tail = if flagged == 0 { 1.0 } else { 1.0 - Binomial::new(0.05, reached).unwrap().cdf(flagged - 1) };
        assert!(tail >= 0.01, "degree {step}: {flagged}/{reached} flagged, p = {tail:.4}");
    }
}

// simulator -----------------------------------------------------------------

#[test]
fn latent_paths_have_the_configured_persistence() {
    let mut s = Scenario::desk().theta2;
    s.phi = vec![0.3, 0.8];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut num = [0.0; 2];
    let mut den = [0.0; 2];
    for _ in 0..4_000 {
        let lam = simulate_sv_vector(&s, 8, &mut rng).unwrap();
        for j in 0..2 {
            for m in 1..8 {
                num[j] += (lam[(m, j)] - s.mu[j]) * (lam[(m - 1, j)] - s.mu[j]);
                den[j] += (lam[(m - 1, j)] - s.mu[j]).powi(2);
            }
        }
    }
    for j in 0..2 {
        assert!((num[j] / den[j] - s.phi[j]).abs() < 0.02, "component {j}: {}", num[j] / den[j]);
    }
}

// chain files ---------------------------------------------------------------

#[test]
fn chain_directory_round_trips_exactly() {
    let (prepared, chain, templates) = fitted_chain(17);
    let tmp = tempfile::tempdir().unwrap();
    let raw_dir = tmp.path().join("raw");
    write_chain(&chain, None, &raw_dir).unwrap();
    assert_eq!(read_chain(&raw_dir).unwrap(), chain);
    assert_eq!(read_chain_labels(&raw_dir).unwrap().variable_names[0], "v1");

    let ident = identify_chain(&chain, &templates, false).unwrap();
    let dir = tmp.path().join("ident");
    write_chain(&ident, Some(&DataLabels::of(&prepared)), &dir).unwrap();
    assert_eq!(read_chain(&dir).unwrap(), ident);
    assert_eq!(read_chain_labels(&dir).unwrap(), DataLabels::of(&prepared));
}

#[test]
fn truncated_chain_file_is_reported() {
    let (_, chain, _) = fitted_chain(18);
    let tmp = tempfile::tempdir().unwrap();
    write_chain(&chain, None, tmp.path()).unwrap();
    let path = tmp.path().join("eta.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let cut: Vec<&str> = text.lines().take(5).collect();
    std::fs::write(&path, cut.join("\n") + "\n").unwrap();
    let err = read_chain(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("eta.csv") && err.contains("samples"), "{err}");
}

// pipeline ------------------------------------------------------------------

fn quick_config() -> RunConfig {
    RunConfig::from_json_str(
        r#"{"mcmc": {"n_iterations": 1500, "thin": 10, "burn_in_raw": 300},
            "lmm": {"n_iterations": 1000, "thin": 5, "burn_in_raw": 200},
            "analysis": {"ppc_replicates": 10}}"#,
    )
    .unwrap()
}

fn write_groups(dir: &Path, labels: &[&str]) -> std::path::PathBuf {
    let parts: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(g, l)| simulate_seeded(&Scenario::desk(), l, 70 + g as u64).unwrap().0)
        .collect();
    let ds = dppca::simulate::concat_observations(&parts).unwrap();
    let path = dir.join("data.csv");
    write_dataset(&ds, &path, "group").unwrap();
    path
}

#[test]
fn fit_reruns_give_identical_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_groups(tmp.path(), &["A"]);
    let cfg = quick_config();
    let a = cmd_fit(&data, &cfg, None, &tmp.path().join("a")).unwrap();
    let b = cmd_fit(&data, &cfg, None, &tmp.path().join("b")).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.inputs, b.inputs);
    for name in a.outputs.keys() {
        assert!(tmp.path().join("a").join(name).exists(), "{name}");
    }
    let stages: Vec<&str> = a.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["ingest", "ppca", "sampler", "identification", "write"]);
}

#[test]
fn pipeline_names_outputs_by_group() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_groups(tmp.path(), &["ctrl", "treat"]);
    let out = tmp.path().join("out");
    let man = cmd_pipeline(&data, &quick_config(), None, &out, Some(2)).unwrap();
    for g in ["ctrl", "treat"] {
        for f in ["ranking.csv", "summary.csv", "acf.csv", "ppc_mads.csv", "lmm_fits.json", "chain/chain.json"] {
            let rel = format!("groups/{g}/{f}");
            assert!(out.join(&rel).exists(), "{rel}");
            assert!(man.outputs.contains_key(&rel), "{rel}");
        }
    }
    assert!(out.join("combined/trajectories.csv").exists());
    assert!(out.join("comparison_ctrl_vs_treat.csv").exists());
    let traj = std::fs::read_to_string(out.join("combined/trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 40 * 8);
}

#[test]
fn pipeline_rejects_empty_group_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, _) = simulate_seeded(&Scenario::desk(), "", 1).unwrap();
    let path = tmp.path().join("data.csv");
    write_dataset(&ds, &path, "group").unwrap();
    let err = cmd_pipeline(&path, &quick_config(), None, &tmp.path().join("out"), None).unwrap_err();
    assert!(err.to_string().contains("empty group"), "{err}");
}

#[test]
fn invalid_config_names_the_field() {
    let err = RunConfig::from_json_str(r#"{"prior": {"phi_var": -1}}"#).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("prior.phi_var"), "{err}");
    let err = RunConfig::from_json_str(r#"{"mcmc": {"thinning": 3}}"#).unwrap_err();
    assert!(matches!(err, DppcaError::Config { .. }), "{err}");
}

#[test]
fn fit_reports_the_failing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_groups(tmp.path(), &["A"]);
    let mut cfg = quick_config();
    // more components than the per-time PPCA can support
    cfg.mcmc.q = 25;
    let err = cmd_fit(&data, &cfg, None, &tmp.path().join("o")).unwrap_err().to_string();
    assert!(err.contains("stage `ppca`"), "{err}");
    let ds = load_dataset(&data, "group").unwrap();
    assert_eq!(ds.n(), 20);
}
