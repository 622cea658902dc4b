//! End-to-end acceptance checks.
//!
//! Runs the default pipeline twice (library and binary), then evaluates every
//! acceptance property against the artifacts and against independent oracles.
//! Prints one PASS/FAIL line per property and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use switchid::config::{RunConfig, TruthSource};
use switchid::io::{self, paths};
use switchid::stages::{self, Summary};
use switchid_core::gmm::{GmmArtifact, Labeling};
use switchid_core::mhe::{run_observer, MheProblem, MheSettings, NoiseWeights};
use switchid_core::pendulum::State;
use switchid_core::sysid::{
    fit_switched_model_with, one_step_rmse, partition_data, simulate_identified, CandidateLibrary,
    CoefficientMatrix, SwitchedModel, Term,
};
use switchid_core::tree::{best_split, DecisionTree, SplitFeature, N_FEATURES};
use switchid_core::Class;

const CLUSTER_MIN_SAMPLES: usize = 50_000;
const CLUSTER_MIN_AGREEMENT: f64 = 0.99;
const CLUSTER_MAX_RUNTIME: Duration = Duration::from_secs(60);
/// Relative slack on consecutive EM log-likelihood values.
const EM_SLACK: f64 = 1e-9;
const SURFACE_HOLDOUT_SAMPLES: usize = 20_000;
const SURFACE_MIN_AGREEMENT: f64 = 0.99;
const SURFACE_MIN_AGREEMENT_TRUTH: f64 = 0.995;
const SPLIT_NODES: usize = 100;
const SPLIT_MAX_SAMPLES: usize = 200;
const SPARSE_COEF_TOL: f64 = 1e-6;
const SPARSE_RMSE_TOL: f64 = 1e-6;
const ROLLOUT_MAX_RMSE: [f64; 3] = [0.02, 0.1, 1.0];
const EXACT_STATE_TOL: f64 = 1e-8;
const EXACT_COST_TOL: f64 = 1e-12;
const EXACT_STEPS: usize = 400;
const KALMAN_TOL: f64 = 1e-6;
const KALMAN_STEPS: usize = 500;
const OBSERVER_BAND: f64 = 0.05;
const OBSERVER_MAX_SETTLING: f64 = 1.0;
const OBSERVER_MAX_RUNTIME: Duration = Duration::from_secs(30);

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Check {
    fn new(name: &'static str, pass: bool, detail: String) -> Check {
        Check { name, pass, detail }
    }
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    summary: Summary,
    timings: Vec<(&'static str, Duration)>,
}

fn fmt3(v: [f64; 3]) -> String {
    format!("[{:.3e}, {:.3e}, {:.3e}]", v[0], v[1], v[2])
}

fn clustering_fidelity(run: &Run) -> Check {
    let s = &run.summary;
    let runtime = run.timings.iter().find(|(n, _)| *n == "cluster").map(|t| t.1).unwrap_or_default();
    let balanced = run.cfg.data.n_dropdown == run.cfg.data.n_torque_steps;
    let pass = s.cluster.samples >= CLUSTER_MIN_SAMPLES
        && balanced
        && s.cluster.truth_agreement >= CLUSTER_MIN_AGREEMENT
        && runtime <= CLUSTER_MAX_RUNTIME;
    Check::new(
        "clustering fidelity",
        pass,
        format!(
            "{} samples, agreement {:.4} (need ≥ {CLUSTER_MIN_AGREEMENT}), fit + IO {:.1} s",
            s.cluster.samples,
            s.cluster.truth_agreement,
            runtime.as_secs_f64()
        ),
    )
}

fn em_monotonicity(run: &Run) -> Check {
    let gmm: GmmArtifact = io::read_json(&run.dir.join(paths::GMM), "cluster").expect("gmm artifact");
    let h = &gmm.loglik_history;
    let worst = h
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max);
    Check::new(
        "EM monotonicity",
        h.len() >= 2 && worst <= EM_SLACK,
        format!("{} log-likelihood values, largest relative decrease {worst:.3e}", h.len()),
    )
}

fn switching_surface(run: &Run) -> Check {
    let c = &run.summary.classify;
    let pass = c.holdout_samples >= SURFACE_HOLDOUT_SAMPLES
        && c.holdout_agreement >= SURFACE_MIN_AGREEMENT
        && c.reference_holdout_agreement >= SURFACE_MIN_AGREEMENT_TRUTH;
    Check::new(
        "switching-surface fidelity",
        pass,
        format!(
            "{} held-out samples; clustered labels {:.4} (need ≥ {SURFACE_MIN_AGREEMENT}), true labels {:.4} (need ≥ {SURFACE_MIN_AGREEMENT_TRUTH})",
            c.holdout_samples, c.holdout_agreement, c.reference_holdout_agreement
        ),
    )
}

/// `n/2 ·` weighted Gini impurity of a split, as an exact fraction.
fn impurity(left: [u128; 2], right: [u128; 2]) -> (u128, u128) {
    let (nl, nr) = (left[0] + left[1], right[0] + right[1]);
    (left[0] * left[1] * nr + right[0] * right[1] * nl, nl * nr)
}

/// Exhaustive search: every feature, every observed value as an upper bound
/// of the left child. Ties go to the lower feature, then the smaller left child.
fn exhaustive_split(node: &[(SplitFeature, Class)]) -> Option<(usize, Vec<bool>)> {
    let count = |pred: &dyn Fn(usize) -> bool| {
        let mut c = [0u128; 2];
        for (i, (_, l)) in node.iter().enumerate() {
            if pred(i) {
                c[l.index()] += 1;
            }
        }
        c
    };
    let total = count(&|_| true);
    let parent = (total[0] * total[1], total[0] + total[1]);
    let mut best: Option<((u128, u128), usize, f64, Vec<bool>)> = None;
    for f in 0..N_FEATURES {
        let mut values: Vec<f64> = node.iter().map(|(x, _)| x[f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for &v in &values[..values.len() - 1] {
            let left: Vec<bool> = node.iter().map(|(x, _)| x[f] <= v).collect();
            let g = impurity(count(&|i| left[i]), count(&|i| !left[i]));
            let better = match &best {
                None => true,
                Some((bg, bf, bv, _)) => {
                    let (a, b) = (g.0 * bg.1, bg.0 * g.1);
                    a < b || (a == b && (f < *bf || (f == *bf && v < *bv)))
                }
            };
            if better {
                best = Some((g, f, v, left));
            }
        }
    }
    best.filter(|(g, ..)| g.0 * parent.1 < parent.0 * g.1).map(|(_, f, _, left)| (f, left))
}

fn split_optimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut matched = 0;
    let mut splits = 0;
    for case in 0..SPLIT_NODES {
        let n = rng.random_range(2..=SPLIT_MAX_SAMPLES);
        // Coarse grids for some nodes so that tied values and tied impurities occur.
        let levels = if case % 3 == 0 { Some(rng.random_range(2..8)) } else { None };
        let bias: f64 = rng.random_range(0.1..0.9);
        let node: Vec<(SplitFeature, Class)> = (0..n)
            .map(|_| {
                let x: SplitFeature = std::array::from_fn(|_| match levels {
                    Some(l) => rng.random_range(0..l) as f64,
                    None => rng.random_range(-1.0..1.0),
                });
                let p = if x[1] > 0.0 { bias } else { 1.0 - bias };
                (x, if rng.random::<f64>() < p { Class::C1 } else { Class::C2 })
            })
            .collect();
        let expected = exhaustive_split(&node);
        let got = best_split(&node).map(|s| (s.feature, node.iter().map(|(x, _)| s.goes_left(x)).collect::<Vec<_>>()));
        splits += usize::from(expected.is_some());
        matched += usize::from(expected == got);
    }
    Check::new(
        "split optimality",
        matched == SPLIT_NODES,
        format!("{matched}/{SPLIT_NODES} nodes match exhaustive enumeration ({splits} with a split)"),
    )
}

fn sparse_recovery(run: &Run) -> Check {
    let mut cfg = run.cfg.clone();
    cfg.data.noise_std = [0.0; 3];
    let ds = stages::generate_dataset(&cfg).expect("noise-free dataset");
    let truth = |t: &[switchid_core::pendulum::Trajectory]| {
        Labeling::from_labels(t.iter().flat_map(|t| &t.samples).map(|s| s.true_class).collect())
    };
    let lib = cfg.sysid.library();
    let tree = DecisionTree::constant(Class::C2);
    let m = fit_switched_model_with(&ds.training, &truth(&ds.training), &tree, &lib, &cfg.sysid.selection(), true)
        .expect("noise-free fit");
    let w2 = lib.position(Term::Linear(2)).expect("library has omega2");
    let row = &m.xi_c1.xi[2];
    let identity_err = row
        .iter()
        .enumerate()
        .map(|(j, c)| if j == w2 { (c - 1.0).abs() } else { c.abs() })
        .fold(0.0, f64::max);
    let (h1, h2) = partition_data(&ds.holdout, &truth(&ds.holdout)).expect("held-out partition");
    let r1 = one_step_rmse(&lib, &m.xi_c1, &h1);
    let r2 = one_step_rmse(&lib, &m.xi_c2, &h2);
    let worst = r1.iter().chain(&r2).fold(0.0f64, |a, b| a.max(*b));
    Check::new(
        "sparse recovery",
        identity_err <= SPARSE_COEF_TOL && worst <= SPARSE_RMSE_TOL,
        format!(
            "sticking wheel row off identity by {identity_err:.2e}; held-out one-step RMSE C1 {} C2 {} (need ≤ {SPARSE_RMSE_TOL:e})",
            fmt3(r1),
            fmt3(r2)
        ),
    )
}

fn rollout_validation(run: &Run) -> Check {
    let v = &run.summary.validate;
    let pass = (0..3).all(|k| v.rmse[k] <= ROLLOUT_MAX_RMSE[k]);
    Check::new(
        "closed-loop model validation",
        pass,
        format!(
            "{} s rollout RMSE {} (limits {:?}), {} simulator / {} model regime changes",
            v.steps as f64 * run.cfg.data.dt,
            fmt3(v.rmse),
            ROLLOUT_MAX_RMSE,
            v.truth_switches,
            v.model_switches
        ),
    )
}

fn read_model(dir: &Path) -> SwitchedModel {
    io::read_json(&dir.join(paths::MODEL), "identify").expect("model artifact")
}

fn exactness(run: &Run) -> Check {
    let m = read_model(&run.dir);
    let settings = run.cfg.mhe_settings();
    let x0 = State::new(PI + run.cfg.observer.initial_offset, 0.0, 0.0);
    let inputs = vec![0.0; EXACT_STEPS];
    let truth = simulate_identified(&m, x0, &inputs).expect("model rollout");
    let switches = inputs.iter().zip(&truth).map(|(u, x)| m.classify(x, *u)).collect::<Vec<_>>();
    let switches = switches.windows(2).filter(|w| w[0] != w[1]).count();
    let mut p = MheProblem::new(m, settings, x0, truth[0].phi1, inputs[0]).expect("problem");
    let (mut max_err, mut max_cost) = (0.0f64, 0.0f64);
    for k in 0..EXACT_STEPS {
        if k > 0 {
            // `advance` needs the previous solution; re-solving is deterministic.
            let prev = p.solve().expect("solve");
            p.advance(&prev, truth[k].phi1, inputs[k]).expect("advance");
        }
        let sol = p.solve().expect("solve");
        let start = p.time() + 1 - p.window().count();
        for (i, x) in sol.states.iter().enumerate() {
            let t = truth[start + i].to_array();
            let e = x.to_array().iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            max_err = max_err.max(e);
        }
        max_cost = max_cost.max(sol.cost);
    }
    Check::new(
        "MHE zero-noise exactness",
        max_err <= EXACT_STATE_TOL && max_cost <= EXACT_COST_TOL,
        format!(
            "{EXACT_STEPS} windows on identified-model data ({switches} regime changes): max state error {max_err:.2e}, max cost {max_cost:.2e}"
        ),
    )
}

/// Damped oscillator driving a first-order lag, as a single-class model.
fn linear_model(dt: f64) -> (SwitchedModel, Matrix3<f64>, Vector3<f64>) {
    let a = Matrix3::new(1.0, dt, 0.0, -4.0 * dt, 1.0 - 0.3 * dt, 0.0, 0.0, 0.5 * dt, 1.0 - 0.8 * dt);
    let b = Vector3::new(0.0, 2.0 * dt, 0.0);
    let library = CandidateLibrary { terms: vec![Term::Linear(0), Term::Linear(1), Term::Linear(2), Term::Input] };
    let xi: Vec<Vec<f64>> = (0..3).map(|r| vec![a[(r, 0)], a[(r, 1)], a[(r, 2)], b[r]]).collect();
    let coef = |class| CoefficientMatrix { xi: xi.clone(), sparsity: 12, ..CoefficientMatrix::zeros(class, 4) };
    let m = SwitchedModel {
        library,
        xi_c1: coef(Class::C1),
        xi_c2: coef(Class::C2),
        tree: DecisionTree::constant(Class::C1),
        dt,
    };
    (m, a, b)
}

fn kalman_equivalence() -> Check {
    let dt = 0.01;
    let (m, a, b) = linear_model(dt);
    let q = [1e-6, 1e-4, 1e-4];
    let r = 1e-4;
    let p0 = [1e-2, 1e-1, 1.0];
    let weights = NoiseWeights::from_diagonals(q, r, p0);
    let settings = MheSettings { horizon: 10, weights, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w: Vec<Normal<f64>> = q.iter().map(|v| Normal::new(0.0, v.sqrt()).unwrap()).collect();
    let v = Normal::new(0.0, r.sqrt()).unwrap();
    let mut x = Vector3::new(0.4, 0.0, -0.2);
    let mut meas = Vec::with_capacity(KALMAN_STEPS);
    for k in 0..KALMAN_STEPS {
        let u = if (k / 50) % 2 == 0 { 0.5 } else { -0.5 };
        meas.push((x[0] + v.sample(&mut rng), u));
        x = a * x + b * u + Vector3::from_fn(|i, _| w[i].sample(&mut rng));
    }
    let guess = State::new(0.3, 0.1, 0.5);
    let est = run_observer(&m, &meas, &settings, guess).expect("observer");

    // Kalman filter; the terminal state of the fixed-interval smoother over
    // data up to k is the one-step prediction x̂_{k+1|k}.
    let q = Matrix3::from_diagonal(&Vector3::from(q));
    let mut xh = Vector3::new(guess.phi1, guess.omega1, guess.omega2);
    let mut p = Matrix3::from_diagonal(&Vector3::from(p0));
    let mut worst = 0.0f64;
    for (k, &(y, u)) in meas.iter().enumerate() {
        let s = p[(0, 0)] + r;
        let gain = p.column(0) / s;
        xh += gain * (y - xh[0]);
        p -= gain * p.row(0);
        xh = a * xh + b * u;
        p = a * p * a.transpose() + q;
        let e = est[k].state.to_array();
        worst = worst.max((0..3).map(|i| (e[i] - xh[i]).abs()).fold(0.0, f64::max));
    }
    Check::new(
        "linear-Gaussian equivalence",
        worst <= KALMAN_TOL,
        format!("{KALMAN_STEPS} steps, max deviation from Kalman estimates {worst:.2e} (need ≤ {KALMAN_TOL:e})"),
    )
}

/// Same observer run with the identified model standing in for the plant,
/// which separates estimator behaviour from model mismatch.
fn observer_on_model_data(run: &Run, scratch: &Path) -> String {
    let dir = scratch.join("model-plant");
    io::ensure_dir(&dir).expect("output directory");
    std::fs::copy(run.dir.join(paths::MODEL), dir.join(paths::MODEL)).expect("copy model");
    let mut cfg = run.cfg.clone();
    cfg.observer.source = TruthSource::Model;
    match stages::estimate(&cfg, &dir) {
        Ok(e) => format!(
            "with the identified model as plant: settles after {}, max error after 1 s {:.3e}",
            e.settling_time.map_or("never".to_string(), |t| format!("{t:.3} s")),
            e.max_error_after_1s
        ),
        Err(e) => format!("with the identified model as plant: {e}"),
    }
}

fn observer_convergence(run: &Run, scratch: &Path) -> Check {
    let e = &run.summary.estimate;
    let runtime = run.timings.iter().find(|(n, _)| *n == "estimate").map(|t| t.1).unwrap_or_default();
    let settled = e.settling_time.is_some_and(|t| t <= OBSERVER_MAX_SETTLING)
        && e.max_error_after_1s <= OBSERVER_BAND * e.initial_error;
    let pass = settled && runtime <= OBSERVER_MAX_RUNTIME && run.cfg.observer.horizon == 10;
    Check::new(
        "observer convergence",
        pass,
        format!(
            "initial error {:.3}, within {:.0}% after {} (need ≤ {OBSERVER_MAX_SETTLING} s), final error {:.3e}, {} regime changes, {:.1} s for {} samples; {}",
            e.initial_error,
            OBSERVER_BAND * 100.0,
            e.settling_time.map_or("never".to_string(), |t| format!("{t:.3} s")),
            e.final_error,
            e.truth_switches,
            runtime.as_secs_f64(),
            e.steps,
            observer_on_model_data(run, scratch)
        ),
    )
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable output") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("inside root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable artifact"));
            }
        }
    }
    out
}

fn determinism(run: &Run, config: &Path, scratch: &Path) -> Check {
    let second = scratch.join("second");
    let status = Command::new(env!("CARGO_BIN_EXE_switchid"))
        .args(["pipeline", "--config"])
        .arg(config)
        .arg("--out")
        .arg(&second)
        .status()
        .expect("spawn switchid");
    if !status.success() {
        return Check::new("determinism", false, format!("second pipeline run failed: {status}"));
    }
    let a = files(&run.dir);
    let b = files(&second);
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.display().to_string()).collect();
    let pass = differing.is_empty() && a.len() == b.len();
    Check::new(
        "determinism",
        pass,
        format!("{} artifacts compared, {} differ {:?}", a.len(), differing.len() + a.len().abs_diff(b.len()), differing),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let config = scratch.path().join("run.toml");
    std::fs::write(&config, "").expect("write config");
    let cfg = RunConfig::load(&config).expect("default config");
    let dir = scratch.path().join("first");
    io::ensure_dir(&dir).expect("output directory");
    let t0 = Instant::now();
    let (summary, timings) = stages::pipeline_timed(&cfg, &dir).expect("default pipeline");
    println!("default pipeline finished in {:.1} s", t0.elapsed().as_secs_f64());
    let run = Run { cfg, dir, summary, timings };

    let checks = [
        clustering_fidelity(&run),
        em_monotonicity(&run),
        switching_surface(&run),
        split_optimality(),
        sparse_recovery(&run),
        rollout_validation(&run),
        exactness(&run),
        kalman_equivalence(),
        observer_convergence(&run, scratch.path()),
        determinism(&run, &config, scratch.path()),
    ];
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
