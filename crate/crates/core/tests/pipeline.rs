//! The library stages chained on a small dataset.

use std::f64::consts::PI;

use switchid_core::gmm::{self, Labeling};
use switchid_core::mhe::{run_observer, MheSettings, NoiseWeights};
use switchid_core::pendulum::{
    generate_dropdown, generate_torque_steps, NoiseSpec, PendulumParams, State, StepSpec, Trajectory,
};
use switchid_core::sysid::{fit_switched_model, simulate_identified, CandidateLibrary};
use switchid_core::tree::{self, fit_tree};
use switchid_core::Class;

const DT: f64 = 0.005;

fn dataset(p: &PendulumParams, noise: bool) -> Vec<Trajectory> {
    let spec = StepSpec { amplitude: [1.05 * p.r_s, 5.0 * p.r_s], dwell: [0.13, 0.25] };
    (0..8)
        .map(|i| {
            let off = 0.2 + 0.2 * i as f64;
            let x0 = State::new(PI + if i % 2 == 0 { off } else { -off }, 0.0, 0.0);
            let n = if noise { NoiseSpec::default_with_seed(i) } else { NoiseSpec::none() };
            if i % 2 == 0 {
                generate_dropdown(p, x0, 600, DT, &n).unwrap()
            } else {
                generate_torque_steps(p, x0, 600, DT, &spec, 100 + i, &n).unwrap()
            }
        })
        .collect()
}

fn truth(trajs: &[Trajectory]) -> Vec<Class> {
    trajs.iter().flat_map(|t| &t.samples).map(|s| s.true_class).collect()
}

#[test]
fn clustering_beats_chance_on_a_small_dataset() {
    let p = PendulumParams::default();
    let trajs = dataset(&p, true);
    let features: Vec<_> = trajs.iter().flat_map(|t| &t.samples).map(gmm::feature_vector).collect();
    let fit = gmm::fit(&features, 3, 1e-8, 300).unwrap();
    assert!(fit.max_loglik_decrease() <= 1e-9 * fit.loglik_history.last().unwrap().abs());
    let agreement = gmm::agreement(&fit.labeling.labels, &truth(&trajs));
    // Eight short experiments are far too few for the full-scale agreement.
    assert!(agreement > 0.6, "agreement {agreement}");
}

#[test]
fn tree_learns_the_sticking_region() {
    let p = PendulumParams::default();
    let train = dataset(&p, false);
    let data: Vec<_> = train.iter().flat_map(|t| &t.samples).map(|s| (tree::sample_feature(s), s.true_class)).collect();
    let t = fit_tree(&data, 12, 5);
    let hits = data.iter().filter(|(f, c)| tree::predict(&t, f) == *c).count();
    assert!(hits as f64 / data.len() as f64 > 0.98);
    // At rest with no load the wheel is held.
    assert_eq!(tree::predict(&t, &[PI, 0.0, 0.0, 0.0]), Class::C1);
}

#[test]
fn observer_tracks_the_identified_model() {
    let p = PendulumParams::default();
    let train = dataset(&p, false);
    let labels = Labeling::from_labels(truth(&train));
    let data: Vec<_> = train.iter().flat_map(|t| &t.samples).map(|s| (tree::sample_feature(s), s.true_class)).collect();
    let t = fit_tree(&data, 12, 5);
    let m = fit_switched_model(&train, &labels, &t, &CandidateLibrary::default(), 1e-9, 1e-9).unwrap();

    let x0 = State::new(PI + 0.8, 0.0, 0.0);
    let inputs = vec![0.0; 600];
    let xs = simulate_identified(&m, x0, &inputs).unwrap();
    let meas: Vec<_> = xs.iter().zip(&inputs).map(|(x, u)| (x.phi1, *u)).collect();
    let weights = NoiseWeights::from_diagonals([1e-8, 1e-6, 1e-4], 1e-8, [0.1, 1.0, 4.0]);
    let settings = MheSettings { weights, ..Default::default() };
    let guess = State::new(x0.phi1 + 0.3, 0.0, 2.0);
    let est = run_observer(&m, &meas, &settings, guess).unwrap();
    let err = |k: usize| {
        let (a, b) = (est[k].state.to_array(), xs[k + 1].to_array());
        a.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let initial = (0.3f64.powi(2) + 4.0).sqrt();
    assert!((400..600).all(|k| err(k) < 0.05 * initial), "final error {}", err(599));
}
