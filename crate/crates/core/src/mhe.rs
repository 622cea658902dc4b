//! Moving-horizon estimation over an identified [`SwitchedModel`].
//!
//! At time `k` the window holds measurements `y_{k−N..k}` of `φ1` and inputs
//! `u_{k−N..k}`; the decision variables are `x_{k−N..k+1}` and the cost is
//!
//! ```text
//! ‖x_{k−N} − x̂_{k−N}‖²_{P⁻¹} + Σ_i ‖y_i − φ1,i‖²_{R⁻¹} + ‖x_{i+1} − f̂_{c_i}(x_i, u_i)‖²_{Q⁻¹}
//! ```
//!
//! minimised by Levenberg–Marquardt with the class sequence `c_i` frozen per
//! outer iteration. Before the window is full the same problem is solved over
//! the available samples (full information) with the initial guess as prior.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::pendulum::State;
use crate::sysid::SwitchedModel;
use crate::{Class, Error, Result};

pub const DEFAULT_HORIZON: usize = 10;
pub const DEFAULT_Q: [f64; 3] = [1e-8, 1e-5, 1e-3];
pub const DEFAULT_R: f64 = 1e-8;
pub const DEFAULT_P0: [f64; 3] = [1e-2, 1e-1, 1.0];

const LAMBDA_INIT: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e16;

/// Process (`Q`), measurement (`R`) and arrival (`P`) covariances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseWeights {
    pub q: Matrix3<f64>,
    pub r: f64,
    pub p: Matrix3<f64>,
}

impl Default for NoiseWeights {
    fn default() -> Self {
        NoiseWeights::from_diagonals(DEFAULT_Q, DEFAULT_R, DEFAULT_P0)
    }
}

impl NoiseWeights {
    pub fn from_diagonals(q: [f64; 3], r: f64, p: [f64; 3]) -> NoiseWeights {
        NoiseWeights {
            q: Matrix3::from_diagonal(&Vector3::from(q)),
            r,
            p: Matrix3::from_diagonal(&Vector3::from(p)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::InvalidParams(format!("R must be positive, got {}", self.r)));
        }
        whitener(&self.q, "Q")?;
        whitener(&self.p, "P")?;
        Ok(())
    }
}

/// `L⁻¹` for `M = L·Lᵀ`, so that `‖L⁻¹v‖² = vᵀM⁻¹v`.
fn whitener(m: &Matrix3<f64>, name: &str) -> Result<Matrix3<f64>> {
    if m.iter().any(|v| !v.is_finite()) || (m - m.transpose()).amax() > 1e-12 * m.amax() {
        return Err(Error::InvalidParams(format!("{name} must be finite and symmetric")));
    }
    let chol = m.cholesky().ok_or_else(|| Error::InvalidParams(format!("{name} is not positive definite")))?;
    chol.l()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParams(format!("{name} is not positive definite")))
}

/// Source of the arrival-cost mean when the window slides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorUpdate {
    /// One-step prediction `x̂_{k−N+1|k−N}` made by the solve that ended at
    /// `k−N`; with a linear model the estimator equals the Kalman smoother.
    #[default]
    Filtered,
    /// Current window estimate of `x_{k−N+1}`.
    Smoothed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_inner: usize,
    pub step_tol: f64,
    pub max_refreezes: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { max_inner: 50, step_tol: 1e-9, max_refreezes: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MheSettings {
    pub horizon: usize,
    pub weights: NoiseWeights,
    pub solver: SolverSettings,
    pub prior_update: PriorUpdate,
}

impl Default for MheSettings {
    fn default() -> Self {
        MheSettings {
            horizon: DEFAULT_HORIZON,
            weights: NoiseWeights::default(),
            solver: SolverSettings::default(),
            prior_update: PriorUpdate::default(),
        }
    }
}

impl MheSettings {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidParams("horizon must be at least 1".into()));
        }
        if self.solver.max_inner < 1 || !(self.solver.step_tol > 0.0) {
            return Err(Error::InvalidParams("solver needs ≥ 1 iteration and a positive step tolerance".into()));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MheSolution {
    /// `x̂_{k−N} … x̂_{k+1}` (fewer during start-up).
    pub states: Vec<State>,
    pub cost: f64,
    /// Inner iterations summed over all class freezes.
    pub iterations: usize,
    /// Class of each transition `x_i → x_{i+1}` in the final solve.
    pub active_classes: Vec<Class>,
    /// Costs after each accepted step of the final solve, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub refreezes: usize,
    pub converged: bool,
}

impl MheSolution {
    pub fn terminal(&self) -> State {
        *self.states.last().expect("solution has states")
    }
}

/// Sliding-window estimation problem.
#[derive(Clone, Debug)]
pub struct MheProblem {
    model: SwitchedModel,
    settings: MheSettings,
    prior: State,
    p: Matrix3<f64>,
    window: VecDeque<(f64, f64)>,
    /// Absolute time index of the first window entry.
    start: usize,
    /// Terminal predictions `(index, x̂_{index|index−1})` of earlier solves.
    predictions: VecDeque<(usize, State)>,
    guess: Vec<State>,
}

impl MheProblem {
    /// Window with the first measurement `(y0, u0)` and prior `x0_guess`.
    pub fn new(model: SwitchedModel, settings: MheSettings, x0_guess: State, y0: f64, u0: f64) -> Result<MheProblem> {
        settings.validate()?;
        model.validate()?;
        if !x0_guess.is_finite() || !y0.is_finite() || !u0.is_finite() {
            return Err(Error::NonFinite("initial guess or measurement".into()));
        }
        let next = model.step(&x0_guess, u0).0;
        let guess = vec![x0_guess, if next.is_finite() { next } else { x0_guess }];
        Ok(MheProblem {
            p: settings.weights.p,
            model,
            settings,
            prior: x0_guess,
            window: VecDeque::from([(y0, u0)]),
            start: 0,
            predictions: VecDeque::new(),
            guess,
        })
    }

    pub fn horizon(&self) -> usize {
        self.settings.horizon
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.settings.horizon + 1
    }

    /// `(y, u)` pairs, oldest first.
    pub fn window(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.window.iter()
    }

    /// Absolute index of the most recent measurement.
    pub fn time(&self) -> usize {
        self.start + self.window.len() - 1
    }

    pub fn prior(&self) -> (State, Matrix3<f64>) {
        (self.prior, self.p)
    }

    pub fn model(&self) -> &SwitchedModel {
        &self.model
    }

    /// Classes chosen by the model's tree along `states`.
    pub fn classify(&self, states: &[State]) -> Vec<Class> {
        self.window.iter().zip(states).map(|(&(_, u), x)| self.model.classify(x, u)).collect()
    }

    /// Cost with classes chosen by the tree at each `(x_i, u_i)`.
    pub fn cost(&self, states: &[State]) -> Result<f64> {
        self.check_states(states)?;
        let classes = self.classify(states);
        self.cost_with_classes(states, &classes)
    }

    pub fn cost_with_classes(&self, states: &[State], classes: &[Class]) -> Result<f64> {
        self.check_states(states)?;
        let w = self.whitening()?;
        let r = self.residuals(&w, states, classes);
        let c = r.norm_squared();
        if c.is_finite() {
            Ok(c)
        } else {
            Err(Error::NonFinite("MHE cost".into()))
        }
    }

    /// Gradient of the frozen-class cost with respect to all window states.
    pub fn gradient(&self, states: &[State], classes: &[Class]) -> Result<Vec<f64>> {
        self.check_states(states)?;
        let w = self.whitening()?;
        let r = self.residuals(&w, states, classes);
        let j = self.jacobian(&w, states, classes);
        Ok((j.transpose() * r * 2.0).iter().copied().collect())
    }

    fn check_states(&self, states: &[State]) -> Result<()> {
        if states.len() != self.window.len() + 1 {
            return Err(Error::Dimension(format!(
                "{} states for a window of {} measurements",
                states.len(),
                self.window.len()
            )));
        }
        if states.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("window states".into()));
        }
        Ok(())
    }

    fn whitening(&self) -> Result<Whitening> {
        Ok(Whitening {
            p: whitener(&self.p, "P")?,
            q: whitener(&self.settings.weights.q, "Q")?,
            r: 1.0 / self.settings.weights.r.sqrt(),
        })
    }

    fn residuals(&self, w: &Whitening, states: &[State], classes: &[Class]) -> DVector<f64> {
        let m = self.window.len();
        let mut r = DVector::zeros(3 + m + 3 * m);
        let d0 = w.p * (vec3(&states[0]) - vec3(&self.prior));
        r.fixed_rows_mut::<3>(0).copy_from(&d0);
        for (i, &(y, _)) in self.window.iter().enumerate() {
            r[3 + i] = w.r * (y - states[i].phi1);
        }
        for (i, &(_, u)) in self.window.iter().enumerate() {
            let pred = self.model.step_class(&states[i], u, classes[i]);
            let d = w.q * (vec3(&states[i + 1]) - vec3(&pred));
            r.fixed_rows_mut::<3>(3 + m + 3 * i).copy_from(&d);
        }
        r
    }

    fn jacobian(&self, w: &Whitening, states: &[State], classes: &[Class]) -> DMatrix<f64> {
        let m = self.window.len();
        let mut j = DMatrix::zeros(3 + m + 3 * m, 3 * (m + 1));
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&w.p);
        for i in 0..m {
            j[(3 + i, 3 * i)] = -w.r;
        }
        for (i, &(_, _)) in self.window.iter().enumerate() {
            let a = self.model.jacobian(&states[i], classes[i]);
            let row = 3 + m + 3 * i;
            j.fixed_view_mut::<3, 3>(row, 3 * (i + 1)).copy_from(&w.q);
            j.fixed_view_mut::<3, 3>(row, 3 * i).copy_from(&(-(w.q * a)));
        }
        j
    }

    /// Levenberg–Marquardt with frozen classes, from `states`.
    fn minimise_frozen(&self, w: &Whitening, mut states: Vec<State>, classes: &[Class]) -> Result<Inner> {
        let cfg = &self.settings.solver;
        let mut r = self.residuals(w, &states, classes);
        let mut cost = r.norm_squared();
        if !cost.is_finite() {
            return Err(Error::NonFinite("MHE initial cost".into()));
        }
        let mut jac = self.jacobian(w, &states, classes);
        let mut history = vec![cost];
        let mut lambda = LAMBDA_INIT;
        let mut nu = 2.0;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_inner {
            iterations += 1;
            let h = jac.transpose() * &jac;
            let g = jac.transpose() * &r;
            let step = loop {
                let mut damped = h.clone();
                for d in 0..h.nrows() {
                    damped[(d, d)] += lambda * h[(d, d)].max(f64::MIN_POSITIVE);
                }
                match damped.cholesky() {
                    Some(ch) => break -ch.solve(&g),
                    None => {
                        lambda *= nu;
                        nu *= 2.0;
                        if lambda > LAMBDA_MAX {
                            return Err(Error::IllConditioned);
                        }
                    }
                }
            };
            let candidate: Vec<State> = states
                .iter()
                .enumerate()
                .map(|(i, s)| State::new(s.phi1 + step[3 * i], s.omega1 + step[3 * i + 1], s.omega2 + step[3 * i + 2]))
                .collect();
            let r_new = self.residuals(w, &candidate, classes);
            let new_cost = r_new.norm_squared();
            let step_norm = step.norm();
            if new_cost.is_finite() && new_cost <= cost {
                let predicted = cost - (&r + &jac * &step).norm_squared();
                let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { 1.0 };
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                states = candidate;
                r = r_new;
                cost = new_cost;
                jac = self.jacobian(w, &states, classes);
                history.push(cost);
            } else {
                lambda *= nu;
                nu *= 2.0;
                if lambda > LAMBDA_MAX {
                    return Err(Error::IllConditioned);
                }
            }
            if step_norm < cfg.step_tol {
                converged = true;
                break;
            }
        }
        Ok(Inner { states, cost, iterations, converged, history })
    }

    /// Minimises the window cost, re-freezing the class sequence from the
    /// current iterate until it is self-consistent or the refreeze budget is
    /// spent; the lowest tree-classified cost across freezes is returned.
    pub fn solve(&self) -> Result<MheSolution> {
        let w = self.whitening()?;
        let mut states = self.guess.clone();
        let mut classes = self.classify(&states);
        let mut best: Option<(f64, MheSolution)> = None;
        let mut total_iters = 0;
        for refreeze in 0..=self.settings.solver.max_refreezes {
            let inner = self.minimise_frozen(&w, states, &classes)?;
            total_iters += inner.iterations;
            let next_classes = self.classify(&inner.states);
            let stable = next_classes == classes;
            let tree_cost = self.cost_with_classes(&inner.states, &next_classes)?;
            if best.as_ref().is_none_or(|(c, _)| tree_cost < *c) {
                best = Some((
                    tree_cost,
                    MheSolution {
                        states: inner.states.clone(),
                        cost: inner.cost,
                        iterations: 0,
                        active_classes: classes.clone(),
                        accepted_costs: inner.history,
                        refreezes: refreeze,
                        converged: inner.converged && stable,
                    },
                ));
            }
            if stable {
                break;
            }
            states = inner.states;
            classes = next_classes;
        }
        let (_, mut sol) = best.expect("at least one freeze");
        sol.iterations = total_iters;
        Ok(sol)
    }

    /// Appends `(y, u)`; once the window is full the oldest pair leaves and
    /// its information is folded into the arrival cost by an EKF-style
    /// measurement update and prediction linearised at the prior.
    pub fn advance(&mut self, sol: &MheSolution, y: f64, u: f64) -> Result<()> {
        if sol.states.len() != self.window.len() + 1 {
            return Err(Error::Dimension("solution does not match the current window".into()));
        }
        if !y.is_finite() || !u.is_finite() {
            return Err(Error::NonFinite("measurement".into()));
        }
        let next_index = self.start + self.window.len();
        self.predictions.push_back((next_index, sol.terminal()));
        let mut guess = sol.states.clone();
        if self.is_full() {
            let (_, u_old) = self.window[0];
            self.p = self.propagate_covariance(u_old);
            let new_start = self.start + 1;
            self.prior = match self.settings.prior_update {
                PriorUpdate::Filtered => self
                    .predictions
                    .iter()
                    .find(|(i, _)| *i == new_start)
                    .map(|(_, x)| *x)
                    .unwrap_or(sol.states[1]),
                PriorUpdate::Smoothed => sol.states[1],
            };
            while self.predictions.front().is_some_and(|(i, _)| *i <= new_start) {
                self.predictions.pop_front();
            }
            self.window.pop_front();
            self.start = new_start;
            guess.remove(0);
        }
        let last = *guess.last().expect("non-empty");
        let next = self.model.step(&last, u).0;
        guess.push(if next.is_finite() { next } else { last });
        self.window.push_back((y, u));
        self.guess = guess;
        Ok(())
    }

    fn propagate_covariance(&self, u: f64) -> Matrix3<f64> {
        let r = self.settings.weights.r;
        let p = self.p;
        let s = p[(0, 0)] + r;
        let k = p.column(0) / s;
        let mut ikc = Matrix3::identity();
        ikc.column_mut(0).axpy(-1.0, &k, 1.0);
        let updated = ikc * p * ikc.transpose() + k * k.transpose() * r;
        let c = self.model.classify(&self.prior, u);
        let a = self.model.jacobian(&self.prior, c);
        let next = a * updated * a.transpose() + self.settings.weights.q;
        (next + next.transpose()) * 0.5
    }
}

struct Whitening {
    p: Matrix3<f64>,
    q: Matrix3<f64>,
    r: f64,
}

struct Inner {
    states: Vec<State>,
    cost: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn vec3(s: &State) -> Vector3<f64> {
    Vector3::from(s.to_array())
}

/// Window cost of `states` for problem `p`.
pub fn mhe_cost(p: &MheProblem, states: &[State]) -> Result<f64> {
    p.cost(states)
}

/// Per-step observer output.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    /// `x̂_{k+1}`.
    pub state: State,
    pub cost: f64,
    pub iterations: usize,
    /// Class of the transition `k → k+1`.
    pub class_k: Class,
    pub converged: bool,
    /// Smallest eigenvalue of the arrival covariance used at step `k`.
    pub arrival_min_eig: f64,
}

/// Runs the estimator over `(y, u)` pairs, emitting one estimate per sample.
pub fn run_observer(
    model: &SwitchedModel,
    measurements: &[(f64, f64)],
    settings: &MheSettings,
    x0_guess: State,
) -> Result<Vec<Estimate>> {
    if measurements.len() < settings.horizon + 1 {
        return Err(Error::InvalidParams(format!(
            "need at least {} measurements, got {}",
            settings.horizon + 1,
            measurements.len()
        )));
    }
    let (y0, u0) = measurements[0];
    let mut problem = MheProblem::new(model.clone(), settings.clone(), x0_guess, y0, u0)?;
    let mut out = Vec::with_capacity(measurements.len());
    let mut previous: Option<MheSolution> = None;
    for &(y, u) in measurements {
        if let Some(prev) = &previous {
            problem.advance(prev, y, u)?;
        }
        let sol = problem.solve()?;
        out.push(Estimate {
            state: sol.terminal(),
            cost: sol.cost,
            iterations: sol.iterations,
            class_k: *sol.active_classes.last().expect("non-empty window"),
            converged: sol.converged,
            arrival_min_eig: SymmetricEigen::new(problem.p).eigenvalues.min(),
        });
        previous = Some(sol);
    }
    Ok(out)
}
