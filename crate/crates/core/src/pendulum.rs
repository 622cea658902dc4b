//! Inertia wheel pendulum with static friction on the wheel bearing.
//!
//! The state is `x = [φ1, ω1, ω2]` (absolute pendulum angle, pendulum rate and
//! wheel rate relative to the pendulum); the input is the motor torque `M`.
//! `φ1 = 0` is the upright position, so the hanging rest position is `φ1 = π`.
//!
//! The wheel is held by static friction (class [`Class::C1`]) while
//!
//! ```text
//! | θ2/(θ1+θ2)·(d1·ω1 − a·sin φ1) + M | < rS
//! ```
//!
//! and slides with Stribeck friction otherwise (class [`Class::C2`]). The
//! simulator evaluates the class once at the start of every sampling interval,
//! holds it, and integrates with classic fixed-step RK4.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{sign0, Class, Error, Result};

/// Physical parameters of the pendulum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    /// Potential-term coefficient (N·m).
    pub a: f64,
    /// Pendulum moment of inertia (kg·m²).
    pub theta1: f64,
    /// Wheel moment of inertia (kg·m²).
    pub theta2: f64,
    /// Coupled wheel inertia of the sliding wheel row (kg·m²).
    pub thetac: f64,
    /// Viscous damping of the pendulum (N·m·s).
    pub d1: f64,
    /// Viscous damping of the wheel (N·m·s).
    pub d2: f64,
    /// Coulomb friction level (N·m).
    #[serde(rename = "rC")]
    pub r_c: f64,
    /// Static friction level (N·m).
    #[serde(rename = "rS")]
    pub r_s: f64,
    /// Stribeck velocity (rad/s).
    pub omega20: f64,
    /// Use `exp(−|ω2|/ω2,0)` instead of the literal `exp(−ω2/ω2,0)`.
    #[serde(default)]
    pub stribeck_abs_exponent: bool,
}

impl Default for PendulumParams {
    /// A light wheel on a stiff pendulum. The wheel breaks loose once the
    /// pendulum leans about 0.33 rad away from its rest position, so releases
    /// from further out alternate between sliding and sticking before they
    /// settle.
    fn default() -> Self {
        let theta1 = 0.012;
        let theta2 = 1.0e-3;
        PendulumParams {
            a: 4.8,
            theta1,
            theta2,
            thetac: theta1 * theta2 / (theta1 + theta2),
            d1: 0.041,
            d2: 5.2e-4,
            r_c: 0.0122,
            r_s: 0.12,
            omega20: 35.0,
            stribeck_abs_exponent: false,
        }
    }
}

impl PendulumParams {
    /// Checks the parameter invariants.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a, self.theta1, self.theta2, self.thetac, self.d1, self.d2, self.r_c, self.r_s,
            self.omega20,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("parameters must be finite".into()));
        }
        if self.theta1 <= 0.0 || self.theta2 <= 0.0 || self.thetac <= 0.0 {
            return Err(Error::InvalidParams("inertias must be positive".into()));
        }
        if self.d1 < 0.0 || self.d2 < 0.0 {
            return Err(Error::InvalidParams("damping must be non-negative".into()));
        }
        if !(self.r_s >= self.r_c && self.r_c >= 0.0) {
            return Err(Error::InvalidParams("friction levels must satisfy rS ≥ rC ≥ 0".into()));
        }
        if self.omega20 <= 0.0 {
            return Err(Error::InvalidParams("Stribeck velocity must be positive".into()));
        }
        Ok(())
    }

    /// Fraction of pendulum torque transmitted to the locked wheel.
    pub fn coupling_ratio(&self) -> f64 {
        self.theta2 / (self.theta1 + self.theta2)
    }
}

/// Pendulum state `[φ1, ω1, ω2]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub phi1: f64,
    pub omega1: f64,
    pub omega2: f64,
}

impl State {
    pub const fn new(phi1: f64, omega1: f64, omega2: f64) -> Self {
        State { phi1, omega1, omega2 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.phi1, self.omega1, self.omega2]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        State::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.phi1.is_finite() && self.omega1.is_finite() && self.omega2.is_finite()
    }

    fn axpy(self, h: f64, d: [f64; 3]) -> State {
        State::new(self.phi1 + h * d[0], self.omega1 + h * d[1], self.omega2 + h * d[2])
    }
}

/// One recorded transition `(x_k, u_k, x_{k+1})` with its ground-truth class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: State,
    pub input: f64,
    pub next_state: State,
    pub true_class: Class,
}

/// Kind of excitation that produced a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentTag {
    DropDown,
    TorqueSteps,
}

/// Uniformly sampled transitions of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub dt: f64,
    pub experiment_tag: ExperimentTag,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The `n + 1` recorded states of an `n`-sample trajectory.
    pub fn states(&self) -> Vec<State> {
        let mut out: Vec<State> = self.samples.iter().map(|s| s.state).collect();
        if let Some(last) = self.samples.last() {
            out.push(last.next_state);
        }
        out
    }

    pub fn inputs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.input).collect()
    }
}

/// Additive Gaussian noise on recorded states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviations for `(φ1, ω1, ω2)`.
    pub std: [f64; 3],
    pub seed: u64,
}

impl NoiseSpec {
    pub const DEFAULT_STD: [f64; 3] = [1e-4, 1e-3, 1e-2];

    pub fn none() -> Self {
        NoiseSpec { std: [0.0; 3], seed: 0 }
    }

    pub fn default_with_seed(seed: u64) -> Self {
        NoiseSpec { std: Self::DEFAULT_STD, seed }
    }

    pub fn is_zero(&self) -> bool {
        self.std.iter().all(|s| *s == 0.0)
    }
}

/// Random piecewise-constant torque profile.
///
/// Each segment draws a magnitude uniformly from `amplitude`, a random sign, and
/// a duration uniformly from `dwell` (seconds, rounded to whole samples).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub amplitude: [f64; 2],
    pub dwell: [f64; 2],
}

/// Static friction torque on the wheel as a function of the slip rate.
pub fn stribeck_torque(p: &PendulumParams, omega2: f64) -> f64 {
    let s = sign0(omega2);
    if s == 0.0 {
        return 0.0;
    }
    let arg = if p.stribeck_abs_exponent { -omega2.abs() / p.omega20 } else { -omega2 / p.omega20 };
    p.r_c * s + (p.r_s - p.r_c) * arg.exp() * s
}

/// Analytic switching condition.
pub fn sticking_condition(p: &PendulumParams, x: &State, u: f64) -> Class {
    let load = p.coupling_ratio() * (p.d1 * x.omega1 - p.a * x.phi1.sin()) + u;
    if load.abs() < p.r_s {
        Class::C1
    } else {
        Class::C2
    }
}

/// Right-hand side of the ODE for a given regime.
pub fn vector_field(p: &PendulumParams, x: &State, u: f64, c: Class) -> [f64; 3] {
    let sin_phi = x.phi1.sin();
    match c {
        Class::C1 => [x.omega1, (p.a * sin_phi - p.d1 * x.omega1) / p.theta1, 0.0],
        Class::C2 => {
            let ms = stribeck_torque(p, x.omega2);
            [
                x.omega1,
                (p.a * sin_phi - p.d1 * x.omega1 + p.d2 * x.omega2 - u + ms) / p.theta1,
                -p.a / p.theta1 * sin_phi + p.d1 / p.theta1 * x.omega1
                    + (u - ms - p.d2 * x.omega2) / p.thetac,
            ]
        }
    }
}

/// One RK4 step of length `dt` with the class frozen at its start.
pub fn step(p: &PendulumParams, x: &State, u: f64, dt: f64) -> Result<(State, Class)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    let c = sticking_condition(p, x, u);
    let k1 = vector_field(p, x, u, c);
    let k2 = vector_field(p, &x.axpy(0.5 * dt, k1), u, c);
    let k3 = vector_field(p, &x.axpy(0.5 * dt, k2), u, c);
    let k4 = vector_field(p, &x.axpy(dt, k3), u, c);
    let mut d = [0.0; 3];
    for i in 0..3 {
        d[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
    }
    let mut next = x.axpy(dt, d);
    if c == Class::C1 {
        next.omega2 = x.omega2;
    }
    if !next.is_finite() {
        return Err(Error::NonFinite(format!("state diverged from {x:?} with u = {u}")));
    }
    Ok((next, c))
}

/// Stored mechanical energy of the regime `c`.
///
/// While sliding, the wheel's absolute rate `ω1 + ω2` carries kinetic energy
/// of its own; while sticking it rotates with the pendulum, whose inertia
/// `θ1` already includes it. The sliding expression is a Lyapunov function of
/// the unforced dynamics when `θc = θ1·θ2/(θ1+θ2)`.
pub fn mechanical_energy(p: &PendulumParams, x: &State, c: Class) -> f64 {
    let pendulum = 0.5 * p.theta1 * x.omega1 * x.omega1 + p.a * x.phi1.cos();
    match c {
        Class::C1 => pendulum,
        Class::C2 => {
            let w = x.omega1 + x.omega2;
            pendulum + 0.5 * p.theta2 * w * w
        }
    }
}

/// Drives the simulator with `inputs`, recording noisy copies of the states.
fn simulate(
    p: &PendulumParams,
    x0: State,
    inputs: &[f64],
    dt: f64,
    noise: &NoiseSpec,
    tag: ExperimentTag,
) -> Result<Trajectory> {
    p.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidParams("at least one step is required".into()));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }
    let mut truth = Vec::with_capacity(inputs.len() + 1);
    let mut classes = Vec::with_capacity(inputs.len());
    truth.push(x0);
    let mut x = x0;
    for &u in inputs {
        let (next, c) = step(p, &x, u, dt)?;
        classes.push(c);
        truth.push(next);
        x = next;
    }

    let recorded = if noise.is_zero() {
        truth.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let normals: Vec<Option<Normal<f64>>> = noise
            .std
            .iter()
            .map(|&s| if s > 0.0 { Normal::new(0.0, s).ok() } else { None })
            .collect();
        truth
            .iter()
            .map(|s| {
                let mut v = s.to_array();
                for (vi, n) in v.iter_mut().zip(&normals) {
                    if let Some(n) = n {
                        *vi += n.sample(&mut rng);
                    }
                }
                State::from_array(v)
            })
            .collect()
    };

    let samples = inputs
        .iter()
        .enumerate()
        .map(|(k, &u)| Sample {
            state: recorded[k],
            input: u,
            next_state: recorded[k + 1],
            true_class: classes[k],
        })
        .collect();
    Ok(Trajectory { samples, dt, experiment_tag: tag })
}

/// Unactuated release from `x0`.
pub fn generate_dropdown(
    p: &PendulumParams,
    x0: State,
    n_steps: usize,
    dt: f64,
    noise: &NoiseSpec,
) -> Result<Trajectory> {
    simulate(p, x0, &vec![0.0; n_steps], dt, noise, ExperimentTag::DropDown)
}

/// Seeded piecewise-constant torque sequence of length `n_steps`.
pub fn torque_step_inputs(spec: &StepSpec, n_steps: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
    let [a_lo, a_hi] = spec.amplitude;
    let [d_lo, d_hi] = spec.dwell;
    if !(a_lo >= 0.0 && a_hi >= a_lo && d_lo > 0.0 && d_hi >= d_lo) || !(dt > 0.0) {
        return Err(Error::InvalidParams(format!("invalid step spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = Uniform::new_inclusive(a_lo, a_hi).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let dwell = Uniform::new_inclusive(d_lo, d_hi).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut out = Vec::with_capacity(n_steps);
    while out.len() < n_steps {
        let magnitude = amp.sample(&mut rng);
        let sign = if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 };
        let len = ((dwell.sample(&mut rng) / dt).round() as usize).max(1);
        let m = magnitude * sign;
        // Keep a zero-amplitude profile free of negative zeros.
        let m = if m == 0.0 { 0.0 } else { m };
        out.extend(std::iter::repeat(m).take(len.min(n_steps - out.len())));
    }
    Ok(out)
}

/// Release from `x0` under a seeded random torque step sequence.
pub fn generate_torque_steps(
    p: &PendulumParams,
    x0: State,
    n_steps: usize,
    dt: f64,
    step_spec: &StepSpec,
    seed: u64,
    noise: &NoiseSpec,
) -> Result<Trajectory> {
    let inputs = torque_step_inputs(step_spec, n_steps, dt, seed)?;
    simulate(p, x0, &inputs, dt, noise, ExperimentTag::TorqueSteps)
}

/// Noise-free simulation of an arbitrary input sequence; returns all `n + 1`
/// states and the `n` classes used.
pub fn simulate_truth(
    p: &PendulumParams,
    x0: State,
    inputs: &[f64],
    dt: f64,
) -> Result<(Vec<State>, Vec<Class>)> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut classes = Vec::with_capacity(inputs.len());
    states.push(x0);
    let mut x = x0;
    for &u in inputs {
        let (next, c) = step(p, &x, u, dt)?;
        states.push(next);
        classes.push(c);
        x = next;
    }
    Ok((states, classes))
}
