//! Sparse identification of one discrete-time model per regime.
//!
//! Each class model is `x_{k+1} = Ξ·ψ(x_k, u_k)` over a shared candidate
//! library `ψ`. Rows of `Ξ` are fitted independently by the Lasso
//!
//! ```text
//! min_b ‖y − Z·b‖² + α·‖b‖₁
//! ```
//!
//! on RMS-scaled regressor columns `Z`, solved by cyclic coordinate descent on
//! the Gram matrix, and then mapped back to the original regressor scale.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::gmm::Labeling;
use crate::pendulum::{State, Trajectory};
use crate::tree::{predict, split_feature, DecisionTree};
use crate::{sign0, Class, Error, Result};

pub const N_STATES: usize = 3;
pub const MAX_SWEEPS: usize = 10_000;
pub const CD_TOL: f64 = 1e-10;
const RIDGE_FLOOR: f64 = 1e-12;
/// Gram matrices whose smallest Cholesky pivot falls below this fraction of
/// the largest diagonal entry are treated as singular.
const SINGULAR_PIVOT: f64 = 1e-10;

const STATE_NAMES: [&str; N_STATES] = ["phi1", "omega1", "omega2"];

/// One regressor of the candidate library.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Term {
    Linear(usize),
    Square(usize),
    Sin(usize),
    Cos(usize),
    Sign(usize),
    Input,
    Constant,
}

impl Term {
    pub fn eval(&self, x: &[f64; N_STATES], u: f64) -> f64 {
        match *self {
            Term::Linear(i) => x[i],
            Term::Square(i) => x[i] * x[i],
            Term::Sin(i) => x[i].sin(),
            Term::Cos(i) => x[i].cos(),
            Term::Sign(i) => sign0(x[i]),
            Term::Input => u,
            Term::Constant => 1.0,
        }
    }

    /// Gradient with respect to the state; sign terms have zero derivative.
    pub fn grad(&self, x: &[f64; N_STATES]) -> [f64; N_STATES] {
        let mut g = [0.0; N_STATES];
        match *self {
            Term::Linear(i) => g[i] = 1.0,
            Term::Square(i) => g[i] = 2.0 * x[i],
            Term::Sin(i) => g[i] = x[i].cos(),
            Term::Cos(i) => g[i] = -x[i].sin(),
            Term::Sign(_) | Term::Input | Term::Constant => {}
        }
        g
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Term::Linear(i) => write!(f, "{}", STATE_NAMES[i]),
            Term::Square(i) => write!(f, "{}^2", STATE_NAMES[i]),
            Term::Sin(i) => write!(f, "sin({})", STATE_NAMES[i]),
            Term::Cos(i) => write!(f, "cos({})", STATE_NAMES[i]),
            Term::Sign(i) => write!(f, "sign({})", STATE_NAMES[i]),
            Term::Input => f.write_str("u"),
            Term::Constant => f.write_str("1"),
        }
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Term> {
        let state = |name: &str| {
            STATE_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Parse(format!("unknown library term {s:?}")))
        };
        let inner = |prefix: &str| s.strip_prefix(prefix).and_then(|r| r.strip_suffix(')'));
        match s {
            "u" => Ok(Term::Input),
            "1" => Ok(Term::Constant),
            _ => {
                if let Some(n) = inner("sin(") {
                    Ok(Term::Sin(state(n)?))
                } else if let Some(n) = inner("cos(") {
                    Ok(Term::Cos(state(n)?))
                } else if let Some(n) = inner("sign(") {
                    Ok(Term::Sign(state(n)?))
                } else if let Some(n) = s.strip_suffix("^2") {
                    Ok(Term::Square(state(n)?))
                } else {
                    Ok(Term::Linear(state(s)?))
                }
            }
        }
    }
}

impl TryFrom<String> for Term {
    type Error = Error;
    fn try_from(s: String) -> Result<Term> {
        s.parse()
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.to_string()
    }
}

/// Which blocks of the default library are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryFlags {
    pub linear: bool,
    pub square: bool,
    pub sin: bool,
    pub cos: bool,
    pub sign: bool,
    pub input: bool,
    pub constant: bool,
}

impl Default for LibraryFlags {
    fn default() -> Self {
        LibraryFlags { linear: true, square: true, sin: true, cos: true, sign: true, input: true, constant: false }
    }
}

/// Ordered list of regressors `ψ(x, u)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateLibrary {
    pub terms: Vec<Term>,
}

impl Default for CandidateLibrary {
    /// `[x, x², sin x, cos x, sign x, u]`, 16 terms.
    fn default() -> Self {
        CandidateLibrary::from_flags(&LibraryFlags::default())
    }
}

impl CandidateLibrary {
    pub fn from_flags(flags: &LibraryFlags) -> CandidateLibrary {
        let mut terms = Vec::new();
        let blocks: [(bool, fn(usize) -> Term); 5] = [
            (flags.linear, Term::Linear),
            (flags.square, Term::Square),
            (flags.sin, Term::Sin),
            (flags.cos, Term::Cos),
            (flags.sign, Term::Sign),
        ];
        for (on, make) in blocks {
            if on {
                terms.extend((0..N_STATES).map(make));
            }
        }
        if flags.input {
            terms.push(Term::Input);
        }
        if flags.constant {
            terms.push(Term::Constant);
        }
        CandidateLibrary { terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn position(&self, t: Term) -> Option<usize> {
        self.terms.iter().position(|x| *x == t)
    }
}

/// `ψ(x, u)` in descriptor order.
pub fn evaluate_library(lib: &CandidateLibrary, x: &State, u: f64) -> Vec<f64> {
    let v = x.to_array();
    lib.terms.iter().map(|t| t.eval(&v, u)).collect()
}

/// `∂ψ/∂x` as one row per term.
pub fn library_jacobian(lib: &CandidateLibrary, x: &State) -> Vec<[f64; N_STATES]> {
    let v = x.to_array();
    lib.terms.iter().map(|t| t.grad(&v)).collect()
}

/// Regression data of one class: rows of `X`, `X'`, `U`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DataMatrices {
    pub class: Option<Class>,
    pub x: Vec<State>,
    pub x_next: Vec<State>,
    pub u: Vec<f64>,
}

impl DataMatrices {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn push(&mut self, x: State, u: f64, next: State) {
        self.x.push(x);
        self.u.push(u);
        self.x_next.push(next);
    }

    /// Rows in `range` (used for cross-validation folds).
    fn select(&self, keep: impl Fn(usize) -> bool) -> DataMatrices {
        let mut out = DataMatrices { class: self.class, ..Default::default() };
        for i in (0..self.len()).filter(|i| keep(*i)) {
            out.push(self.x[i], self.u[i], self.x_next[i]);
        }
        out
    }
}

/// Splits all samples of `trajs` by `labels`, preserving order.
pub fn partition_data(trajs: &[Trajectory], labels: &Labeling) -> Result<(DataMatrices, DataMatrices)> {
    let total: usize = trajs.iter().map(|t| t.len()).sum();
    if total != labels.len() {
        return Err(Error::Dimension(format!("{} labels for {total} samples", labels.len())));
    }
    let mut parts = [
        DataMatrices { class: Some(Class::C1), ..Default::default() },
        DataMatrices { class: Some(Class::C2), ..Default::default() },
    ];
    for (s, c) in trajs.iter().flat_map(|t| &t.samples).zip(&labels.labels) {
        parts[c.index()].push(s.state, s.input, s.next_state);
    }
    let [c1, c2] = parts;
    if c1.is_empty() {
        return Err(Error::EmptyClass(Class::C1));
    }
    if c2.is_empty() {
        return Err(Error::EmptyClass(Class::C2));
    }
    Ok((c1, c2))
}

/// Cross-validation record of an alpha selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvScores {
    /// Relative penalties `α / N`.
    pub grid: Vec<f64>,
    /// Mean held-out one-step error per grid point (normalised per state).
    pub scores: Vec<f64>,
    pub folds: usize,
}

/// `Ξ` (row-major, `3 × n_ψ`) of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix {
    pub class: Class,
    pub xi: Vec<Vec<f64>>,
    pub alpha: f64,
    pub sparsity: usize,
    #[serde(default)]
    pub refit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvScores>,
}

impl CoefficientMatrix {
    pub fn zeros(class: Class, n_psi: usize) -> CoefficientMatrix {
        CoefficientMatrix {
            class,
            xi: vec![vec![0.0; n_psi]; N_STATES],
            alpha: 0.0,
            sparsity: 0,
            refit: false,
            cv: None,
        }
    }

    fn count_nonzero(xi: &[Vec<f64>]) -> usize {
        xi.iter().flatten().filter(|v| **v != 0.0).count()
    }

    /// `Ξ·ψ`.
    pub fn apply(&self, psi: &[f64]) -> [f64; N_STATES] {
        let mut out = [0.0; N_STATES];
        for (o, row) in out.iter_mut().zip(&self.xi) {
            *o = row.iter().zip(psi).map(|(a, b)| a * b).sum();
        }
        out
    }
}

/// Regressor matrix with RMS column scaling.
struct Design {
    /// Row-major `N × n` scaled regressors.
    z: Vec<f64>,
    n: usize,
    p: usize,
    scale: Vec<f64>,
}

impl Design {
    fn new(dm: &DataMatrices, lib: &CandidateLibrary) -> Design {
        let n = dm.len();
        let p = lib.len();
        let mut z = Vec::with_capacity(n * p);
        for (x, u) in dm.x.iter().zip(&dm.u) {
            z.extend(evaluate_library(lib, x, *u));
        }
        let mut scale = vec![0.0; p];
        for row in z.chunks(p) {
            for (s, v) in scale.iter_mut().zip(row) {
                *s += v * v;
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / n.max(1) as f64).sqrt();
        }
        for row in z.chunks_mut(p) {
            for (v, s) in row.iter_mut().zip(&scale) {
                *v = if *s > 0.0 { *v / s } else { 0.0 };
            }
        }
        Design { z, n, p, scale }
    }

    fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.p, self.p);
        for row in self.z.chunks(self.p) {
            for a in 0..self.p {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in 0..=a {
                    g[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..self.p {
            for b in 0..a {
                g[(b, a)] = g[(a, b)];
            }
        }
        g
    }

    fn correlate(&self, y: &[f64]) -> DVector<f64> {
        let mut c = DVector::zeros(self.p);
        for (row, yi) in self.z.chunks(self.p).zip(y) {
            for (cj, zj) in c.iter_mut().zip(row) {
                *cj += zj * yi;
            }
        }
        c
    }
}

fn targets(dm: &DataMatrices, k: usize) -> Vec<f64> {
    dm.x_next.iter().map(|s| s.to_array()[k]).collect()
}

#[inline]
fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Covariance-update coordinate descent for `min ‖y − Zb‖² + α‖b‖₁` given
/// `G = ZᵀZ` and `c = Zᵀy`, warm-started from `b`. Columns with zero norm stay
/// at zero.
fn lasso_cd_from(g: &DMatrix<f64>, c: &DVector<f64>, alpha: f64, b: &mut DVector<f64>) {
    let p = c.len();
    let half = 0.5 * alpha;
    for _ in 0..MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let gjj = g[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let mut rho = c[j];
            for k in 0..p {
                if k != j {
                    rho -= g[(j, k)] * b[k];
                }
            }
            let new = soft_threshold(rho, half) / gjj;
            max_change = max_change.max((new - b[j]).abs());
            b[j] = new;
        }
        if max_change < CD_TOL {
            break;
        }
    }
}

/// Geometric ratio between consecutive penalties on the warm-start path.
const PATH_RATIO: f64 = 0.8;

/// Lasso solution at `alpha`, reached by warm-started coordinate descent along
/// a decreasing penalty path from `α_max = 2‖c‖∞` (where `b = 0`). Plain
/// descent from zero stalls on the nearly collinear trigonometric columns.
fn lasso_cd(g: &DMatrix<f64>, c: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let mut b: DVector<f64> = DVector::zeros(c.len());
    let alpha_max = 2.0 * c.amax();
    if alpha >= alpha_max {
        return b;
    }
    let mut a = alpha_max * PATH_RATIO;
    while a > alpha {
        lasso_cd_from(g, c, a, &mut b);
        a *= PATH_RATIO;
    }
    lasso_cd_from(g, c, alpha, &mut b);
    b
}

/// Ordinary least squares through the normal equations restricted to `support`.
fn normal_equations(g: &DMatrix<f64>, c: &DVector<f64>, support: &[usize]) -> Result<DVector<f64>> {
    let p = c.len();
    let mut b = DVector::zeros(p);
    if support.is_empty() {
        return Ok(b);
    }
    let m = support.len();
    let mut gs = DMatrix::from_fn(m, m, |a, k| g[(support[a], support[k])]);
    let cs = DVector::from_fn(m, |a, _| c[support[a]]);
    let max_diag = (0..m).map(|i| gs[(i, i)]).fold(0.0, f64::max);
    if !(max_diag > 0.0) {
        return Err(Error::RankDeficient);
    }
    for i in 0..m {
        gs[(i, i)] += RIDGE_FLOOR * max_diag;
    }
    let chol = gs.cholesky().ok_or(Error::RankDeficient)?;
    let l = chol.l_dirty();
    let min_pivot = (0..m).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < SINGULAR_PIVOT * max_diag {
        return Err(Error::RankDeficient);
    }
    let sol = chol.solve(&cs);
    for (a, &j) in support.iter().enumerate() {
        b[j] = sol[a];
    }
    Ok(b)
}

/// Minimum-norm least squares on the columns in `support`, by SVD of the
/// scaled design itself (the Gram matrix squares its condition number).
fn svd_least_squares(design: &Design, y: &[f64], support: &[usize]) -> Result<DVector<f64>> {
    let mut b = DVector::zeros(design.p);
    if support.is_empty() {
        return Ok(b);
    }
    let zs = DMatrix::from_fn(design.n, support.len(), |i, a| design.z[i * design.p + support[a]]);
    let svd = zs.svd(true, true);
    let cutoff = svd.singular_values.max() * 1e-13;
    let sol = svd.solve(&DVector::from_column_slice(y), cutoff).map_err(|e| Error::NonFinite(e.into()))?;
    for (a, &j) in support.iter().enumerate() {
        b[j] = sol[a];
    }
    Ok(b)
}

fn usable_columns(g: &DMatrix<f64>) -> Vec<usize> {
    (0..g.nrows()).filter(|&j| g[(j, j)] > 0.0).collect()
}

fn assemble(
    class: Class,
    scaled: Vec<DVector<f64>>,
    design: &Design,
    alpha: f64,
    refit: bool,
) -> CoefficientMatrix {
    let xi: Vec<Vec<f64>> = scaled
        .iter()
        .map(|b| {
            (0..design.p)
                .map(|j| if design.scale[j] > 0.0 && b[j] != 0.0 { b[j] / design.scale[j] } else { 0.0 })
                .collect()
        })
        .collect();
    let sparsity = CoefficientMatrix::count_nonzero(&xi);
    CoefficientMatrix { class, xi, alpha, sparsity, refit, cv: None }
}

/// Lasso fit of every state row; `alpha = 0` is ordinary least squares.
pub fn sparse_fit(dm: &DataMatrices, lib: &CandidateLibrary, alpha: f64) -> Result<CoefficientMatrix> {
    fit_rows(dm, lib, alpha, false)
}

/// Lasso support selection followed by unpenalised least squares on the support.
pub fn sparse_fit_refit(dm: &DataMatrices, lib: &CandidateLibrary, alpha: f64) -> Result<CoefficientMatrix> {
    fit_rows(dm, lib, alpha, true)
}

fn fit_rows(dm: &DataMatrices, lib: &CandidateLibrary, alpha: f64, refit: bool) -> Result<CoefficientMatrix> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParams(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    if lib.is_empty() {
        return Err(Error::InvalidParams("empty candidate library".into()));
    }
    if dm.is_empty() {
        return Err(Error::EmptyClass(dm.class.unwrap_or(Class::C1)));
    }
    let design = Design::new(dm, lib);
    let g = design.gram();
    let mut rows = Vec::with_capacity(N_STATES);
    for k in 0..N_STATES {
        let y = targets(dm, k);
        let c = design.correlate(&y);
        let b = if alpha == 0.0 {
            normal_equations(&g, &c, &usable_columns(&g))?
        } else {
            let b = lasso_cd(&g, &c, alpha);
            if refit {
                let support: Vec<usize> = (0..b.len()).filter(|&j| b[j] != 0.0).collect();
                svd_least_squares(&design, &y, &support)?
            } else {
                b
            }
        };
        rows.push(b);
    }
    Ok(assemble(dm.class.unwrap_or(Class::C1), rows, &design, alpha, refit && alpha > 0.0))
}

/// Largest violation of the Lasso optimality conditions of `xi` on `dm`, in
/// the scaled coordinates used by the solver.
pub fn kkt_violation(dm: &DataMatrices, lib: &CandidateLibrary, xi: &CoefficientMatrix) -> f64 {
    let design = Design::new(dm, lib);
    let g = design.gram();
    let half = 0.5 * xi.alpha;
    let mut worst: f64 = 0.0;
    for k in 0..N_STATES {
        let c = design.correlate(&targets(dm, k));
        let b = DVector::from_fn(design.p, |j, _| xi.xi[k][j] * design.scale[j]);
        let corr = &c - &g * &b;
        for j in 0..design.p {
            if design.scale[j] == 0.0 {
                continue;
            }
            let v = if b[j] == 0.0 {
                (corr[j].abs() - half).max(0.0)
            } else {
                (corr[j] - half * b[j].signum()).abs()
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// One-step-ahead prediction of one class model.
pub fn predict_class(lib: &CandidateLibrary, xi: &CoefficientMatrix, x: &State, u: f64) -> State {
    State::from_array(xi.apply(&evaluate_library(lib, x, u)))
}

/// Per-state one-step RMSE of a class model on `dm`.
pub fn one_step_rmse(lib: &CandidateLibrary, xi: &CoefficientMatrix, dm: &DataMatrices) -> [f64; N_STATES] {
    let mut sse = [0.0; N_STATES];
    for ((x, u), next) in dm.x.iter().zip(&dm.u).zip(&dm.x_next) {
        let p = predict_class(lib, xi, x, *u).to_array();
        let t = next.to_array();
        for k in 0..N_STATES {
            sse[k] += (p[k] - t[k]).powi(2);
        }
    }
    sse.map(|s| (s / dm.len().max(1) as f64).sqrt())
}

/// Default relative penalty grid `α/N ∈ {1e-6, …, 1e-1}` in half decades.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| 10f64.powf(-6.0 + 0.5 * i as f64)).collect()
}

/// Chooses `α/N` from `grid` by `folds`-fold cross-validation over contiguous
/// blocks, scoring the held-out one-step error of every state normalised by
/// the variance of that state's increment.
pub fn cross_validate_alpha(
    dm: &DataMatrices,
    lib: &CandidateLibrary,
    grid: &[f64],
    folds: usize,
) -> Result<(f64, CvScores)> {
    if grid.is_empty() || folds < 2 || dm.len() < folds {
        return Err(Error::InvalidParams("cross-validation needs a grid, ≥ 2 folds and enough rows".into()));
    }
    let n = dm.len();
    let mut increment_var = [0.0; N_STATES];
    for k in 0..N_STATES {
        let d: Vec<f64> = dm.x.iter().zip(&dm.x_next).map(|(a, b)| b.to_array()[k] - a.to_array()[k]).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        increment_var[k] = if var > 0.0 { var } else { 1.0 };
    }
    let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
    let mut scores = vec![0.0; grid.len()];
    for f in 0..folds {
        let (lo, hi) = (bounds[f], bounds[f + 1]);
        let train = dm.select(|i| i < lo || i >= hi);
        let test = dm.select(|i| i >= lo && i < hi);
        for (s, rel) in scores.iter_mut().zip(grid) {
            let xi = sparse_fit(&train, lib, rel * train.len() as f64)?;
            let rmse = one_step_rmse(lib, &xi, &test);
            *s += (0..N_STATES).map(|k| rmse[k] * rmse[k] / increment_var[k]).sum::<f64>() / folds as f64;
        }
    }
    // Smallest score; ties favour the larger penalty.
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] <= scores[best] {
            best = i;
        }
    }
    Ok((grid[best], CvScores { grid: grid.to_vec(), scores, folds }))
}

/// How the per-class penalty is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum AlphaSelection {
    /// Absolute penalties for `C1` and `C2`.
    Fixed(f64, f64),
    /// Relative grid `α/N` and fold count.
    CrossValidated { grid: Vec<f64>, folds: usize },
}

/// Identified switched plant `x_{k+1} = Ξ_{ĝ(x,u)}·ψ(x, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchedModel {
    pub library: CandidateLibrary,
    pub xi_c1: CoefficientMatrix,
    pub xi_c2: CoefficientMatrix,
    pub tree: DecisionTree,
    pub dt: f64,
}

impl SwitchedModel {
    pub fn validate(&self) -> Result<()> {
        let p = self.library.len();
        for xi in [&self.xi_c1, &self.xi_c2] {
            if xi.xi.len() != N_STATES || xi.xi.iter().any(|r| r.len() != p) {
                return Err(Error::Dimension("coefficient matrix does not match library".into()));
            }
            if xi.xi.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("coefficient matrix".into()));
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParams("dt must be positive".into()));
        }
        self.tree.validate()
    }

    pub fn coefficients(&self, c: Class) -> &CoefficientMatrix {
        match c {
            Class::C1 => &self.xi_c1,
            Class::C2 => &self.xi_c2,
        }
    }

    pub fn classify(&self, x: &State, u: f64) -> Class {
        predict(&self.tree, &split_feature(x, u))
    }

    /// Successor under the class model `c`.
    pub fn step_class(&self, x: &State, u: f64, c: Class) -> State {
        predict_class(&self.library, self.coefficients(c), x, u)
    }

    /// Successor with the class chosen by the tree.
    pub fn step(&self, x: &State, u: f64) -> (State, Class) {
        let c = self.classify(x, u);
        (self.step_class(x, u, c), c)
    }

    /// `∂f̂_c/∂x` at `(x, u)`.
    pub fn jacobian(&self, x: &State, c: Class) -> Matrix3<f64> {
        let xi = self.coefficients(c);
        let grads = library_jacobian(&self.library, x);
        let mut a = Matrix3::zeros();
        for (k, row) in xi.xi.iter().enumerate() {
            for (coef, g) in row.iter().zip(&grads) {
                if *coef != 0.0 {
                    for i in 0..N_STATES {
                        a[(k, i)] += coef * g[i];
                    }
                }
            }
        }
        a
    }
}

/// Partition, fit both classes with fixed penalties, and bind to `tree`.
pub fn fit_switched_model(
    trajs: &[Trajectory],
    labels: &Labeling,
    tree: &DecisionTree,
    lib: &CandidateLibrary,
    alpha_c1: f64,
    alpha_c2: f64,
) -> Result<SwitchedModel> {
    fit_switched_model_with(trajs, labels, tree, lib, &AlphaSelection::Fixed(alpha_c1, alpha_c2), false)
}

/// Like [`fit_switched_model`] with cross-validated penalties and optional refit.
pub fn fit_switched_model_with(
    trajs: &[Trajectory],
    labels: &Labeling,
    tree: &DecisionTree,
    lib: &CandidateLibrary,
    selection: &AlphaSelection,
    refit: bool,
) -> Result<SwitchedModel> {
    let dt = trajs.first().map(|t| t.dt).ok_or_else(|| Error::InvalidParams("no trajectories".into()))?;
    let (c1, c2) = partition_data(trajs, labels)?;
    let fit_one = |dm: &DataMatrices, fixed: f64| -> Result<CoefficientMatrix> {
        match selection {
            AlphaSelection::Fixed(..) => fit_rows(dm, lib, fixed, refit),
            AlphaSelection::CrossValidated { grid, folds } => {
                let (rel, cv) = cross_validate_alpha(dm, lib, grid, *folds)?;
                let mut xi = fit_rows(dm, lib, rel * dm.len() as f64, refit)?;
                xi.cv = Some(cv);
                Ok(xi)
            }
        }
    };
    let (a1, a2) = match selection {
        AlphaSelection::Fixed(a1, a2) => (*a1, *a2),
        AlphaSelection::CrossValidated { .. } => (0.0, 0.0),
    };
    let model = SwitchedModel { library: lib.clone(), xi_c1: fit_one(&c1, a1)?, xi_c2: fit_one(&c2, a2)?, tree: tree.clone(), dt };
    model.validate()?;
    Ok(model)
}

/// Free-running simulation of the identified model; returns `n + 1` states.
pub fn simulate_identified(m: &SwitchedModel, x0: State, inputs: &[f64]) -> Result<Vec<State>> {
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(x0);
    let mut x = x0;
    for (k, &u) in inputs.iter().enumerate() {
        x = m.step(&x, u).0;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("identified model diverged at step {k}")));
        }
        out.push(x);
    }
    Ok(out)
}
