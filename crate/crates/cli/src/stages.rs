//! The pipeline verbs. Each stage reads its inputs from the output directory,
//! writes its artifacts and a `metrics/<stage>.json` report, and returns the
//! report.

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use switchid_core::gmm::{self, GmmArtifact, Labeling};
use switchid_core::mhe::run_observer;
use switchid_core::pendulum::{
    generate_dropdown, generate_torque_steps, simulate_truth, sticking_condition, ExperimentTag, NoiseSpec,
    State, Trajectory,
};
use switchid_core::sysid::{fit_switched_model_with, simulate_identified, SwitchedModel};
use switchid_core::tree::{self, fit_tree, DecisionTree, SplitFeature};
use switchid_core::Class;

use crate::config::{RunConfig, Seeds, TruthSource};
use crate::error::{CliError, CliResult};
use crate::io::{self, num, paths, Dataset, ExperimentEntry, LabelRow, Manifest};

/// Pipeline verbs in execution order.
pub const STAGES: [&str; 6] = ["simulate", "cluster", "classify", "identify", "validate", "estimate"];

/// Separates the held-out experiment stream from the training stream.
const HOLDOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn write_metrics<T: Serialize>(out: &Path, stage: &str, m: &T) -> CliResult<()> {
    io::write_json(&out.join("metrics").join(format!("{stage}.json")), m)
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub training_samples: usize,
    pub holdout_samples: usize,
    /// Share of sticking transitions among drop-down and torque-step samples.
    pub sticking_fraction_dropdown: f64,
    pub sticking_fraction_torque_steps: f64,
    pub regime_switches: usize,
}

/// Experiment list of one stream: kinds alternate, starting with a drop-down.
fn experiments(
    cfg: &RunConfig,
    n_dropdown: usize,
    n_torque: usize,
    seed: u64,
    prefix: &str,
) -> CliResult<Vec<(ExperimentEntry, Trajectory)>> {
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = Vec::with_capacity(n_dropdown + n_torque);
    let (mut nd, mut nt) = (0, 0);
    while nd < n_dropdown || nt < n_torque {
        if nd < n_dropdown {
            kinds.push(ExperimentTag::DropDown);
            nd += 1;
        }
        if nt < n_torque {
            kinds.push(ExperimentTag::TorqueSteps);
            nt += 1;
        }
    }
    let mut out = Vec::with_capacity(kinds.len());
    for (i, tag) in kinds.into_iter().enumerate() {
        let [lo, hi] = d.initial_offset;
        let magnitude: f64 = rng.random_range(lo..=hi);
        let offset = if rng.random::<bool>() { magnitude } else { -magnitude };
        let x0 = State::new(PI + offset, 0.0, 0.0);
        let noise = NoiseSpec { std: d.noise_std, seed: rng.random() };
        let (traj, input_seed, kind) = match tag {
            ExperimentTag::DropDown => (generate_dropdown(&cfg.pendulum, x0, d.steps, d.dt, &noise)?, None, "dropdown"),
            ExperimentTag::TorqueSteps => {
                let s: u64 = rng.random();
                (generate_torque_steps(&cfg.pendulum, x0, d.steps, d.dt, &d.step_spec(), s, &noise)?, Some(s), "torque")
            }
        };
        let entry = ExperimentEntry {
            file: format!("{prefix}_{i:03}_{kind}.csv"),
            tag,
            x0: x0.to_array(),
            noise_seed: noise.seed,
            input_seed,
            samples: traj.len(),
        };
        out.push((entry, traj));
    }
    Ok(out)
}

/// Training and held-out datasets as described by `[data]`.
pub fn generate_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let d = &cfg.data;
    let seed = cfg.seeds().data;
    let training = experiments(cfg, d.n_dropdown, d.n_torque_steps, seed, "train")?;
    let holdout = experiments(cfg, d.holdout_per_kind, d.holdout_per_kind, seed ^ HOLDOUT_STREAM, "holdout")?;
    let count = |v: &[(ExperimentEntry, Trajectory)]| v.iter().map(|(_, t)| t.len()).sum();
    let manifest = Manifest {
        seed,
        dt: d.dt,
        noise_std: d.noise_std,
        params: cfg.pendulum,
        training_samples: count(&training),
        holdout_samples: count(&holdout),
        training: training.iter().map(|(e, _)| e.clone()).collect(),
        holdout: holdout.iter().map(|(e, _)| e.clone()).collect(),
    };
    Ok(Dataset {
        manifest,
        training: training.into_iter().map(|(_, t)| t).collect(),
        holdout: holdout.into_iter().map(|(_, t)| t).collect(),
    })
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> CliResult<SimulateReport> {
    let ds = generate_dataset(cfg)?;
    let data_dir = out.join(paths::DATA_DIR);
    io::ensure_dir(&data_dir)?;
    let entries = ds.manifest.training.iter().zip(&ds.training).chain(ds.manifest.holdout.iter().zip(&ds.holdout));
    for (e, t) in entries {
        io::write_trajectory(&data_dir.join(&e.file), t)?;
    }
    io::write_json(&out.join(paths::MANIFEST), &ds.manifest)?;

    let share = |tag: ExperimentTag| {
        let samples = || ds.training.iter().filter(|t| t.experiment_tag == tag).flat_map(|t| &t.samples);
        fraction(samples().filter(|s| s.true_class == Class::C1).count(), samples().count())
    };
    let report = SimulateReport {
        training_samples: ds.manifest.training_samples,
        holdout_samples: ds.manifest.holdout_samples,
        sticking_fraction_dropdown: share(ExperimentTag::DropDown),
        sticking_fraction_torque_steps: share(ExperimentTag::TorqueSteps),
        regime_switches: ds
            .training
            .iter()
            .map(|t| t.samples.windows(2).filter(|w| w[0].true_class != w[1].true_class).count())
            .sum(),
    };
    write_metrics(out, "simulate", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub samples: usize,
    pub seed: u64,
    pub iterations: usize,
    pub final_loglik: f64,
    /// Largest drop of the log-likelihood between EM iterations.
    pub max_loglik_decrease: f64,
    /// Agreement with the simulator's classes, maximised over label permutations.
    pub truth_agreement: f64,
    pub sticking_fraction: f64,
}

pub fn cluster(cfg: &RunConfig, out: &Path) -> CliResult<ClusterReport> {
    let ds = Dataset::read(out)?;
    let samples: Vec<_> = ds.training.iter().flat_map(|t| &t.samples).collect();
    let features: Vec<_> = samples.iter().map(|s| gmm::feature_vector(s)).collect();
    let truth: Vec<Class> = samples.iter().map(|s| s.true_class).collect();
    let seed = cfg.seeds().cluster;
    let fit = gmm::fit(&features, seed, cfg.cluster.tol, cfg.cluster.max_iters)?;

    io::write_json(&out.join(paths::GMM), &GmmArtifact::from_fit(&fit))?;
    let rows: Vec<LabelRow> = fit
        .labeling
        .labels
        .iter()
        .zip(&fit.labeling.posteriors)
        .map(|(l, p)| LabelRow { label: *l, posterior: *p })
        .collect();
    io::write_labels(&out.join(paths::LABELS), &rows)?;
    let plot = samples
        .iter()
        .zip(&fit.labeling.labels)
        .map(|(s, l)| {
            let x = s.state;
            vec![num(x.phi1), num(x.omega1), num(x.omega2), num(s.input), l.to_string(), s.true_class.to_string()]
        })
        .collect();
    io::write_csv(
        &out.join(paths::PLOTS_DIR).join("clusters.csv"),
        &["phi1", "omega1", "omega2", "u", "label", "true_class"],
        plot,
    )?;

    let labels = &fit.labeling.labels;
    let report = ClusterReport {
        samples: features.len(),
        seed,
        iterations: fit.model.n_iters,
        final_loglik: fit.model.final_loglik,
        max_loglik_decrease: fit.max_loglik_decrease(),
        truth_agreement: gmm::agreement(labels, &truth),
        sticking_fraction: fraction(labels.iter().filter(|c| **c == Class::C1).count(), labels.len()),
    };
    write_metrics(out, "cluster", &report)?;
    Ok(report)
}

fn read_training_labels(out: &Path, ds: &Dataset) -> CliResult<Labeling> {
    let path = out.join(paths::LABELS);
    let rows = io::read_labels(&path)?;
    if rows.len() != ds.manifest.training_samples {
        return Err(CliError::SchemaMismatch {
            path,
            message: format!("{} labels for {} training samples", rows.len(), ds.manifest.training_samples),
        });
    }
    Ok(Labeling::from_labels(rows.into_iter().map(|r| r.label).collect()))
}

/// Fraction of held-out samples on which `tree` agrees with the analytic
/// sticking condition evaluated at the recorded state and input.
pub fn analytic_agreement(cfg: &RunConfig, tree: &DecisionTree, holdout: &[Trajectory]) -> f64 {
    let samples = || holdout.iter().flat_map(|t| &t.samples);
    let hits = samples()
        .filter(|s| tree::predict(tree, &tree::sample_feature(s)) == sticking_condition(&cfg.pendulum, &s.state, s.input))
        .count();
    fraction(hits, samples().count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub depth: usize,
    pub leaves: usize,
    /// Agreement with the cluster labels it was trained on.
    pub training_accuracy: f64,
    pub holdout_samples: usize,
    /// Held-out agreement with the analytic sticking condition.
    pub holdout_agreement: f64,
    /// The same for a tree trained on the simulator's classes.
    pub reference_holdout_agreement: f64,
}

pub fn classify(cfg: &RunConfig, out: &Path) -> CliResult<ClassifyReport> {
    let ds = Dataset::read(out)?;
    let labels = read_training_labels(out, &ds)?;
    let samples: Vec<_> = ds.training.iter().flat_map(|t| &t.samples).collect();
    let data: Vec<(SplitFeature, Class)> =
        samples.iter().zip(&labels.labels).map(|(s, l)| (tree::sample_feature(s), *l)).collect();
    let t = fit_tree(&data, cfg.tree.max_depth, cfg.tree.min_samples_leaf);
    io::write_json(&out.join(paths::TREE), &t)?;

    let reference_data: Vec<_> = samples.iter().map(|s| (tree::sample_feature(s), s.true_class)).collect();
    let reference = fit_tree(&reference_data, cfg.tree.max_depth, cfg.tree.min_samples_leaf);
    let hits = data.iter().filter(|(f, l)| tree::predict(&t, f) == *l).count();
    let report = ClassifyReport {
        depth: t.depth(),
        leaves: t.n_leaves(),
        training_accuracy: fraction(hits, data.len()),
        holdout_samples: ds.manifest.holdout_samples,
        holdout_agreement: analytic_agreement(cfg, &t, &ds.holdout),
        reference_holdout_agreement: analytic_agreement(cfg, &reference, &ds.holdout),
    };
    write_metrics(out, "classify", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFitReport {
    pub alpha: f64,
    pub sparsity: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub library_terms: usize,
    pub c1: ClassFitReport,
    pub c2: ClassFitReport,
    /// One-step prediction RMSE of the switched model on the held-out set.
    pub holdout_one_step_rmse: [f64; 3],
}

/// One-step RMSE of `m` (tree-selected class) against recorded transitions.
pub fn one_step_rmse(m: &SwitchedModel, trajs: &[Trajectory]) -> [f64; 3] {
    let mut sse = [0.0; 3];
    let mut n = 0usize;
    for s in trajs.iter().flat_map(|t| &t.samples) {
        let p = m.step(&s.state, s.input).0.to_array();
        let t = s.next_state.to_array();
        for k in 0..3 {
            sse[k] += (p[k] - t[k]).powi(2);
        }
        n += 1;
    }
    sse.map(|v| (v / n.max(1) as f64).sqrt())
}

pub fn identify(cfg: &RunConfig, out: &Path) -> CliResult<IdentifyReport> {
    let ds = Dataset::read(out)?;
    let labels = read_training_labels(out, &ds)?;
    let t: DecisionTree = io::read_json(&out.join(paths::TREE), "classify")?;
    t.validate()
        .map_err(|e| CliError::SchemaMismatch { path: out.join(paths::TREE), message: e.to_string() })?;
    let lib = cfg.sysid.library();
    let m = fit_switched_model_with(&ds.training, &labels, &t, &lib, &cfg.sysid.selection(), cfg.sysid.refit)?;
    io::write_json(&out.join(paths::MODEL), &m)?;

    let count = |c: Class| labels.labels.iter().filter(|l| **l == c).count();
    let class_report = |c: Class| {
        let xi = m.coefficients(c);
        ClassFitReport { alpha: xi.alpha, sparsity: xi.sparsity, samples: count(c) }
    };
    let report = IdentifyReport {
        library_terms: lib.len(),
        c1: class_report(Class::C1),
        c2: class_report(Class::C2),
        holdout_one_step_rmse: one_step_rmse(&m, &ds.holdout),
    };
    write_metrics(out, "identify", &report)?;
    Ok(report)
}

fn read_model(out: &Path) -> CliResult<SwitchedModel> {
    let path = out.join(paths::MODEL);
    let m: SwitchedModel = io::read_json(&path, "identify")?;
    m.validate().map_err(|e| CliError::SchemaMismatch { path, message: e.to_string() })?;
    Ok(m)
}

fn samples_for(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize
}

fn rms(errors: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for e in errors {
        s += e * e;
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub x0: [f64; 3],
    pub steps: usize,
    pub rmse: [f64; 3],
    pub max_abs_error: [f64; 3],
    pub truth_switches: usize,
    pub model_switches: usize,
}

/// Free-running rollout of the identified model next to the noise-free simulator.
pub fn validate(cfg: &RunConfig, out: &Path) -> CliResult<ValidateReport> {
    let m = read_model(out)?;
    let x0 = State::new(PI + cfg.validate.initial_offset, 0.0, 0.0);
    let n = samples_for(cfg.validate.duration, m.dt);
    let inputs = vec![0.0; n];
    let (truth, truth_classes) = simulate_truth(&cfg.pendulum, x0, &inputs, m.dt)?;
    let model = simulate_identified(&m, x0, &inputs)?;
    let model_classes: Vec<Class> = model[..n].iter().map(|x| m.classify(x, 0.0)).collect();

    let rows = (0..=n)
        .map(|k| {
            let (a, b) = (truth[k], model[k]);
            let class = |c: Option<&Class>| c.map(|c| c.to_string()).unwrap_or_default();
            vec![
                num(k as f64 * m.dt),
                num(a.phi1),
                num(a.omega1),
                num(a.omega2),
                class(truth_classes.get(k)),
                num(b.phi1),
                num(b.omega1),
                num(b.omega2),
                class(model_classes.get(k)),
            ]
        })
        .collect();
    io::write_csv(
        &out.join(paths::ROLLOUT),
        &["t", "phi1", "omega1", "omega2", "class", "phi1_model", "omega1_model", "omega2_model", "class_model"],
        rows,
    )?;

    let err = |k: usize| truth.iter().zip(&model).map(move |(a, b)| a.to_array()[k] - b.to_array()[k]);
    let switches = |c: &[Class]| c.windows(2).filter(|w| w[0] != w[1]).count();
    let report = ValidateReport {
        x0: x0.to_array(),
        steps: n,
        rmse: [0, 1, 2].map(|k| rms(err(k))),
        max_abs_error: [0, 1, 2].map(|k| err(k).map(f64::abs).fold(0.0, f64::max)),
        truth_switches: switches(&truth_classes),
        model_switches: switches(&model_classes),
    };
    write_metrics(out, "validate", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub steps: usize,
    pub seed: u64,
    pub initial_error: f64,
    /// Earliest time after which the error norm stays below 5 % of its initial value.
    pub settling_time: Option<f64>,
    pub final_error: f64,
    pub max_error_after_1s: f64,
    pub truth_switches: usize,
    pub unconverged_solves: usize,
}

/// Relative error band used for the settling time.
pub const SETTLING_BAND: f64 = 0.05;

/// Observer run on a drop-down measured through the pendulum angle.
pub fn estimate(cfg: &RunConfig, out: &Path) -> CliResult<EstimateReport> {
    let m = read_model(out)?;
    let o = &cfg.observer;
    let Seeds { observer: seed, .. } = cfg.seeds();
    let x0 = State::new(PI + o.initial_offset, 0.0, 0.0);
    let n = samples_for(o.duration, m.dt);
    let inputs = vec![0.0; n];
    let (truth, classes) = match o.source {
        TruthSource::Simulator => simulate_truth(&cfg.pendulum, x0, &inputs, m.dt)?,
        TruthSource::Model => {
            let xs = simulate_identified(&m, x0, &inputs)?;
            let cs = xs[..n].iter().map(|x| m.classify(x, 0.0)).collect();
            (xs, cs)
        }
    };
    let sigma = cfg.data.noise_std[0];
    let normal = Normal::new(0.0, sigma).map_err(|e| CliError::Config(format!("measurement noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meas: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            (truth[k].phi1 + v, inputs[k])
        })
        .collect();
    let guess = match o.x0_guess {
        Some(g) => State::from_array(g),
        None => {
            let [a, b, c] = x0.to_array();
            let [ea, eb, ec] = o.x0_error;
            State::new(a + ea, b + eb, c + ec)
        }
    };
    let est = run_observer(&m, &meas, &cfg.mhe_settings(), guess)?;

    let norm = |a: State, b: State| {
        let (a, b) = (a.to_array(), b.to_array());
        (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
    };
    let errors: Vec<f64> = est.iter().enumerate().map(|(k, e)| norm(e.state, truth[k + 1])).collect();
    let initial = norm(guess, x0);
    let rows = est
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let x = e.state;
            vec![
                num((k + 1) as f64 * m.dt),
                num(x.phi1),
                num(x.omega1),
                num(x.omega2),
                num(e.cost),
                e.iterations.to_string(),
                e.class_k.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &out.join(paths::ESTIMATES),
        &["t", "phi1_hat", "omega1_hat", "omega2_hat", "cost", "iters", "class_k"],
        rows,
    )?;
    let plot = est
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let x = truth[k + 1];
            vec![
                num((k + 1) as f64 * m.dt),
                num(x.phi1),
                num(x.omega1),
                num(x.omega2),
                classes[k].to_string(),
                num(e.state.phi1),
                num(e.state.omega1),
                num(e.state.omega2),
                num(errors[k]),
            ]
        })
        .collect();
    io::write_csv(
        &out.join(paths::PLOTS_DIR).join("observer.csv"),
        &["t", "phi1", "omega1", "omega2", "class", "phi1_hat", "omega1_hat", "omega2_hat", "error_norm"],
        plot,
    )?;

    let band = SETTLING_BAND * initial;
    let settled_from = errors.iter().rposition(|e| *e >= band).map_or(0, |i| i + 1);
    let one_second = samples_for(1.0, m.dt);
    let report = EstimateReport {
        steps: n,
        seed,
        initial_error: initial,
        settling_time: (settled_from < errors.len()).then(|| settled_from as f64 * m.dt),
        final_error: *errors.last().expect("at least horizon + 1 samples"),
        max_error_after_1s: errors.iter().skip(one_second.saturating_sub(1)).fold(0.0, |a, b| a.max(*b)),
        truth_switches: classes.windows(2).filter(|w| w[0] != w[1]).count(),
        unconverged_solves: est.iter().filter(|e| !e.converged).count(),
    };
    write_metrics(out, "estimate", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Seeds,
    pub simulate: SimulateReport,
    pub cluster: ClusterReport,
    pub classify: ClassifyReport,
    pub identify: IdentifyReport,
    pub validate: ValidateReport,
    pub estimate: EstimateReport,
}

/// All stages in order, followed by `summary.json`.
pub fn pipeline(cfg: &RunConfig, out: &Path) -> CliResult<Summary> {
    pipeline_timed(cfg, out).map(|(s, _)| s)
}

/// [`pipeline`] that also reports the wall-clock time of every stage.
/// Timings are returned only, never written to the artifacts.
pub fn pipeline_timed(cfg: &RunConfig, out: &Path) -> CliResult<(Summary, Vec<(&'static str, Duration)>)> {
    let mut t = Vec::with_capacity(STAGES.len());
    let summary = Summary {
        seeds: cfg.seeds(),
        simulate: timed(&mut t, "simulate", || simulate(cfg, out))?,
        cluster: timed(&mut t, "cluster", || cluster(cfg, out))?,
        classify: timed(&mut t, "classify", || classify(cfg, out))?,
        identify: timed(&mut t, "identify", || identify(cfg, out))?,
        validate: timed(&mut t, "validate", || validate(cfg, out))?,
        estimate: timed(&mut t, "estimate", || estimate(cfg, out))?,
    };
    io::write_json(&out.join(paths::SUMMARY), &summary)?;
    Ok((summary, t))
}

fn timed<T>(
    timings: &mut Vec<(&'static str, Duration)>,
    stage: &'static str,
    f: impl FnOnce() -> CliResult<T>,
) -> CliResult<T> {
    let t0 = Instant::now();
    let r = f().map_err(|e| CliError::Stage { stage, source: Box::new(e) });
    timings.push((stage, t0.elapsed()));
    r
}
