//! Two-component Gaussian mixture clustering fitted by expectation maximization.
//!
//! Samples are the 7-dimensional tuples `(x_k, u_k, x_{k+1})`. [`fit`] z-scores
//! the features, initialises the mixture with k-means++ / Lloyd iterations and
//! alternates [`e_step`] and [`m_step`] until the log-likelihood stalls.
//! Every covariance update floors the eigenvalues at `λ = 1e-6 ·` mean
//! per-feature variance, because sticking samples have an (almost) constant
//! `ω2' − ω2` and would otherwise produce a singular component. The floored
//! covariance is the exact maximiser over `{Σ ⪰ λ·I}`, so EM stays monotone.

use nalgebra::{Cholesky, SMatrix, SVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pendulum::Sample;
use crate::{Class, Error, Result};

pub const DIM: usize = 7;

/// `(φ1, ω1, ω2, M, φ1', ω1', ω2')`.
pub type FeatureVector = [f64; DIM];
pub type Vec7 = SVector<f64, DIM>;
pub type Mat7 = SMatrix<f64, DIM, DIM>;

/// Relative regularization added to every covariance.
pub const REG_SCALE: f64 = 1e-6;
/// Relative log-likelihood change that ends EM.
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITERS: usize = 500;
const KMEANS_MAX_ITERS: usize = 100;
/// Independent k-means++ starts tried by [`kmeans_init`].
pub const KMEANS_RESTARTS: usize = 10;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn feature_vector(s: &Sample) -> FeatureVector {
    [
        s.state.phi1,
        s.state.omega1,
        s.state.omega2,
        s.input,
        s.next_state.phi1,
        s.next_state.omega1,
        s.next_state.omega2,
    ]
}

/// Mixture parameters. `mu[j]`, `sigma[j]` belong to class `C(j+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub pi: [f64; 2],
    pub mu: [Vec7; 2],
    pub sigma: [Mat7; 2],
    pub n_iters: usize,
    pub final_loglik: f64,
}

impl GmmModel {
    /// The same mixture with component indices exchanged.
    pub fn swapped(&self) -> GmmModel {
        GmmModel {
            pi: [self.pi[1], self.pi[0]],
            mu: [self.mu[1], self.mu[0]],
            sigma: [self.sigma[1], self.sigma[0]],
            n_iters: self.n_iters,
            final_loglik: self.final_loglik,
        }
    }
}

/// Hard labels and soft posteriors `(p(C1|ξ), p(C2|ξ))` per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<Class>,
    pub posteriors: Vec<[f64; 2]>,
}

impl Labeling {
    pub fn from_posteriors(posteriors: Vec<[f64; 2]>) -> Labeling {
        let labels = posteriors.iter().map(|p| argmax(p)).collect();
        Labeling { labels, posteriors }
    }

    /// Hard labels with one-hot posteriors, e.g. for ground-truth partitions.
    pub fn from_labels(labels: Vec<Class>) -> Labeling {
        let posteriors = labels
            .iter()
            .map(|c| match c {
                Class::C1 => [1.0, 0.0],
                Class::C2 => [0.0, 1.0],
            })
            .collect();
        Labeling { labels, posteriors }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Ties go to `C2`.
fn argmax(p: &[f64; 2]) -> Class {
    if p[0] > p[1] {
        Class::C1
    } else {
        Class::C2
    }
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; DIM],
    pub scale: [f64; DIM],
}

impl Standardizer {
    /// Population mean and standard deviation; constant features keep scale 1.
    pub fn fit(data: &[FeatureVector]) -> Standardizer {
        let n = data.len().max(1) as f64;
        let mut mean = [0.0; DIM];
        for x in data {
            for d in 0..DIM {
                mean[d] += x[d];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; DIM];
        for x in data {
            for d in 0..DIM {
                let e = x[d] - mean[d];
                var[d] += e * e;
            }
        }
        let scale = var.map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        });
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &FeatureVector) -> FeatureVector {
        let mut z = [0.0; DIM];
        for d in 0..DIM {
            z[d] = (x[d] - self.mean[d]) / self.scale[d];
        }
        z
    }

    pub fn apply_all(&self, data: &[FeatureVector]) -> Vec<FeatureVector> {
        data.iter().map(|x| self.apply(x)).collect()
    }
}

/// Cached Cholesky factor and normalisation of one component.
struct Component {
    log_weight: f64,
    log_norm: f64,
    mean: Vec7,
    chol: Mat7,
}

impl Component {
    fn new(m: &GmmModel, j: usize) -> Result<Component> {
        let chol = Cholesky::new(m.sigma[j])
            .ok_or(Error::SingularCovariance { component: j })?
            .unpack();
        let log_det: f64 = 2.0 * (0..DIM).map(|i| chol[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::SingularCovariance { component: j });
        }
        Ok(Component {
            log_weight: m.pi[j].ln(),
            log_norm: -0.5 * (DIM as f64 * LN_2PI + log_det),
            mean: m.mu[j],
            chol,
        })
    }

    /// `ln π_j + ln N(x | μ_j, Σ_j)`.
    fn log_joint(&self, x: &FeatureVector) -> f64 {
        let mut z = [0.0; DIM];
        let mut q = 0.0;
        for i in 0..DIM {
            let mut acc = x[i] - self.mean[i];
            for k in 0..i {
                acc -= self.chol[(i, k)] * z[k];
            }
            z[i] = acc / self.chol[(i, i)];
            q += z[i] * z[i];
        }
        self.log_weight + self.log_norm - 0.5 * q
    }
}

fn components(m: &GmmModel) -> Result<[Component; 2]> {
    Ok([Component::new(m, 0)?, Component::new(m, 1)?])
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn validate_data(data: &[FeatureVector]) -> Result<()> {
    if data.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    Ok(())
}

/// `(1/(1+e^{l1−l0}), 1/(1+e^{l0−l1}))`: exactly symmetric under swapping
/// and exactly one half for tied components.
fn posterior_pair(l0: f64, l1: f64) -> [f64; 2] {
    if l0 == f64::NEG_INFINITY && l1 == f64::NEG_INFINITY {
        return [0.5, 0.5];
    }
    [1.0 / (1.0 + (l1 - l0).exp()), 1.0 / (1.0 + (l0 - l1).exp())]
}

/// Posteriors and total log-likelihood in one pass.
fn expectation(m: &GmmModel, data: &[FeatureVector]) -> Result<(Vec<[f64; 2]>, f64)> {
    let [c0, c1] = components(m)?;
    let mut total = 0.0;
    let post = data
        .iter()
        .map(|x| {
            let l0 = c0.log_joint(x);
            let l1 = c1.log_joint(x);
            total += log_sum_exp(l0, l1);
            posterior_pair(l0, l1)
        })
        .collect();
    Ok((post, total))
}

/// `Σ_i ln Σ_j π_j N(ξ_i | μ_j, Σ_j)`.
pub fn log_likelihood(m: &GmmModel, data: &[FeatureVector]) -> Result<f64> {
    let [c0, c1] = components(m)?;
    Ok(data.iter().map(|x| log_sum_exp(c0.log_joint(x), c1.log_joint(x))).sum())
}

/// Posterior class probabilities of every sample.
pub fn e_step(m: &GmmModel, data: &[FeatureVector]) -> Result<Vec<[f64; 2]>> {
    Ok(expectation(m, data)?.0)
}

/// `λ_reg` for a dataset.
pub fn regularization(data: &[FeatureVector]) -> f64 {
    let s = Standardizer::fit(data);
    let n = data.len().max(1) as f64;
    let mut total = 0.0;
    for d in 0..DIM {
        total += data.iter().map(|x| (x[d] - s.mean[d]).powi(2)).sum::<f64>() / n;
    }
    let lambda = REG_SCALE * total / DIM as f64;
    if lambda > 0.0 {
        lambda
    } else {
        REG_SCALE
    }
}

/// Same eigenvectors, eigenvalues raised to at least `floor`; `s` is returned
/// unchanged when it already satisfies the bound.
pub fn floor_eigenvalues(s: Mat7, floor: f64) -> Mat7 {
    let eig = SymmetricEigen::new(s);
    if eig.eigenvalues.min() >= floor {
        return s;
    }
    let d = eig.eigenvalues.map(|v| v.max(floor));
    let m = eig.eigenvectors * Mat7::from_diagonal(&d) * eig.eigenvectors.transpose();
    (m + m.transpose()) * 0.5
}

/// Responsibility-weighted means, covariances (eigenvalues floored at
/// `λ_reg`) and mixing weights.
pub fn m_step(posteriors: &[[f64; 2]], data: &[FeatureVector]) -> Result<GmmModel> {
    if posteriors.len() != data.len() {
        return Err(Error::Dimension(format!(
            "{} posteriors for {} samples",
            posteriors.len(),
            data.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::DegenerateData("no samples".into()));
    }
    let n = data.len() as f64;
    let lambda = regularization(data);
    let mut pi = [0.0; 2];
    let mut mu = [Vec7::zeros(); 2];
    let mut sigma = [Mat7::zeros(); 2];
    for j in 0..2 {
        let nj: f64 = posteriors.iter().map(|p| p[j]).sum();
        if !(nj >= 1e-10 * n) {
            return Err(Error::EmptyComponent { component: j });
        }
        let mut mean = [0.0; DIM];
        for (x, p) in data.iter().zip(posteriors) {
            for d in 0..DIM {
                mean[d] += p[j] * x[d];
            }
        }
        mean.iter_mut().for_each(|v| *v /= nj);
        let mut cov = Mat7::zeros();
        for (x, p) in data.iter().zip(posteriors) {
            let w = p[j];
            if w == 0.0 {
                continue;
            }
            let mut e = [0.0; DIM];
            for d in 0..DIM {
                e[d] = x[d] - mean[d];
            }
            for a in 0..DIM {
                let wa = w * e[a];
                for b in 0..=a {
                    cov[(a, b)] += wa * e[b];
                }
            }
        }
        for a in 0..DIM {
            for b in 0..=a {
                let v = cov[(a, b)] / nj;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        pi[j] = nj / n;
        mu[j] = Vec7::from(mean);
        sigma[j] = floor_eigenvalues(cov, lambda);
    }
    // Both weights come from the same posteriors; renormalise away rounding.
    let s = pi[0] + pi[1];
    pi = [pi[0] / s, pi[1] / s];
    Ok(GmmModel { pi, mu, sigma, n_iters: 0, final_loglik: 0.0 })
}

fn sq_dist(a: &FeatureVector, b: &FeatureVector) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Two-means clustering on standardized features, returned as a mixture in
/// the coordinates of `data`.
///
/// Runs [`KMEANS_RESTARTS`] seeded k-means++ / Lloyd restarts and keeps the
/// partition with the smallest within-cluster sum of squares.
pub fn kmeans_init(data: &[FeatureVector], seed: u64) -> Result<GmmModel> {
    validate_data(data)?;
    if data.len() < 2 || data.iter().all(|x| x == &data[0]) {
        return Err(Error::DegenerateData("k-means needs at least two distinct samples".into()));
    }
    let z = Standardizer::fit(data).apply_all(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (inertia, assign) = lloyd(&z, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    let assign = best.map(|(_, a)| a).unwrap_or_default();
    let posteriors: Vec<[f64; 2]> =
        assign.iter().map(|&a| if a == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    m_step(&posteriors, data)
}

/// One k-means++ seeded Lloyd run; returns inertia and assignments.
fn lloyd(z: &[FeatureVector], rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let first = rng.random_range(0..z.len());
    let d2: Vec<f64> = z.iter().map(|x| sq_dist(x, &z[first])).collect();
    let total: f64 = d2.iter().sum();
    let mut target = rng.random::<f64>() * total;
    let mut second = None;
    for (i, d) in d2.iter().enumerate() {
        if *d > 0.0 && target < *d {
            second = Some(i);
            break;
        }
        target -= d;
    }
    // Rounding may push the draw past the last positive weight.
    let second = second
        .or_else(|| d2.iter().rposition(|d| *d > 0.0))
        .unwrap_or(z.len() - 1);
    let mut centers = [z[first], z[second]];

    let mut assign = vec![usize::MAX; z.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, x) in z.iter().enumerate() {
            let c = usize::from(sq_dist(x, &centers[1]) < sq_dist(x, &centers[0]));
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        for j in 0..2 {
            if !assign.contains(&j) {
                // Re-seed an empty cluster at the point farthest from the other centre.
                let other = centers[1 - j];
                let far = (0..z.len())
                    .max_by(|&a, &b| sq_dist(&z[a], &other).total_cmp(&sq_dist(&z[b], &other)))
                    .unwrap_or(0);
                assign[far] = j;
                changed = true;
            }
        }
        for (j, center) in centers.iter_mut().enumerate() {
            let mut sum = [0.0; DIM];
            let mut count = 0.0;
            for (x, _) in z.iter().zip(&assign).filter(|(_, a)| **a == j) {
                for d in 0..DIM {
                    sum[d] += x[d];
                }
                count += 1.0;
            }
            *center = sum.map(|s| s / count);
        }
        if !changed {
            break;
        }
    }
    let inertia = z.iter().zip(&assign).map(|(x, &a)| sq_dist(x, &centers[a])).sum();
    (inertia, assign)
}

/// Result of [`fit`]. The model lives in standardized coordinates.
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    pub standardizer: Standardizer,
    pub labeling: Labeling,
    /// Log-likelihood of the initial model followed by one entry per EM iteration.
    pub loglik_history: Vec<f64>,
    pub seed: u64,
    /// Whether EM's component order was exchanged to put the sticking regime first.
    pub swapped: bool,
}

impl GmmFit {
    /// Classifies raw feature vectors with the fitted mixture.
    pub fn predict(&self, data: &[FeatureVector]) -> Result<Labeling> {
        let z = self.standardizer.apply_all(data);
        Ok(Labeling::from_posteriors(e_step(&self.model, &z)?))
    }

    /// Largest decrease between consecutive log-likelihood values (0 if monotone).
    pub fn max_loglik_decrease(&self) -> f64 {
        self.loglik_history.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
    }
}

/// Posterior-weighted mean `|ω2' − ω2|` of both components, in original units.
pub fn mean_wheel_change(posteriors: &[[f64; 2]], data: &[FeatureVector]) -> [f64; 2] {
    let mut num = [0.0; 2];
    let mut den = [0.0; 2];
    for (p, x) in posteriors.iter().zip(data) {
        let change = (x[6] - x[2]).abs();
        for j in 0..2 {
            num[j] += p[j] * change;
            den[j] += p[j];
        }
    }
    [num[0] / den[0], num[1] / den[1]]
}

/// EM from a k-means start; the component with the smaller mean wheel-rate
/// change is reported as `C1`.
pub fn fit(data: &[FeatureVector], seed: u64, tol: f64, max_iters: usize) -> Result<GmmFit> {
    validate_data(data)?;
    if data.is_empty() {
        return Err(Error::DegenerateData("no samples".into()));
    }
    let standardizer = Standardizer::fit(data);
    let z = standardizer.apply_all(data);
    let mut model = kmeans_init(&z, seed)?;
    let (mut post, mut ll) = expectation(&model, &z)?;
    let mut history = vec![ll];
    let mut iters = 0;
    while iters < max_iters {
        model = m_step(&post, &z)?;
        let (next_post, next_ll) = expectation(&model, &z)?;
        iters += 1;
        history.push(next_ll);
        let delta = (next_ll - ll).abs();
        post = next_post;
        ll = next_ll;
        if delta < tol * ll.abs().max(1.0) {
            break;
        }
    }
    model.n_iters = iters;
    model.final_loglik = ll;

    let change = mean_wheel_change(&post, data);
    let swapped = change[1] < change[0];
    if swapped {
        model = model.swapped();
        post.iter_mut().for_each(|p| p.swap(0, 1));
    }
    Ok(GmmFit {
        model,
        standardizer,
        labeling: Labeling::from_posteriors(post),
        loglik_history: history,
        seed,
        swapped,
    })
}

/// Fraction of labels agreeing with `truth`, maximised over the two class permutations.
pub fn agreement(labels: &[Class], truth: &[Class]) -> f64 {
    if labels.is_empty() {
        return 1.0;
    }
    let same = labels.iter().zip(truth).filter(|(a, b)| a == b).count() as f64;
    let frac = same / labels.len() as f64;
    frac.max(1.0 - frac)
}

/// JSON form of a fitted mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmArtifact {
    pub pi: [f64; 2],
    pub mu: [Vec<f64>; 2],
    /// Row-major 7×7 covariances.
    pub sigma: [Vec<f64>; 2],
    pub standardization_mean: Vec<f64>,
    pub standardization_scale: Vec<f64>,
    pub seed: u64,
    pub n_iters: usize,
    pub final_loglik: f64,
    pub loglik_history: Vec<f64>,
    /// How `C1` was chosen among the two fitted components.
    pub canonicalization: String,
    pub components_swapped: bool,
}

pub const CANONICALIZATION_RULE: &str = "C1 = component with smaller mean |omega2' - omega2|";

impl GmmArtifact {
    pub fn from_fit(f: &GmmFit) -> GmmArtifact {
        let row_major = |m: &Mat7| {
            let mut v = Vec::with_capacity(DIM * DIM);
            for r in 0..DIM {
                for c in 0..DIM {
                    v.push(m[(r, c)]);
                }
            }
            v
        };
        GmmArtifact {
            pi: f.model.pi,
            mu: [f.model.mu[0].iter().copied().collect(), f.model.mu[1].iter().copied().collect()],
            sigma: [row_major(&f.model.sigma[0]), row_major(&f.model.sigma[1])],
            standardization_mean: f.standardizer.mean.to_vec(),
            standardization_scale: f.standardizer.scale.to_vec(),
            seed: f.seed,
            n_iters: f.model.n_iters,
            final_loglik: f.model.final_loglik,
            loglik_history: f.loglik_history.clone(),
            canonicalization: CANONICALIZATION_RULE.to_string(),
            components_swapped: f.swapped,
        }
    }

    /// Model and standardization, validated for shape.
    pub fn to_model(&self) -> Result<(GmmModel, Standardizer)> {
        let bad = |what: &str| Error::Dimension(format!("gmm artifact: {what}"));
        let vec7 = |v: &Vec<f64>, what: &str| -> Result<[f64; DIM]> {
            v.as_slice().try_into().map_err(|_| bad(what))
        };
        let mat = |v: &Vec<f64>| -> Result<Mat7> {
            if v.len() != DIM * DIM {
                return Err(bad("sigma"));
            }
            Ok(Mat7::from_row_slice(v))
        };
        let model = GmmModel {
            pi: self.pi,
            mu: [Vec7::from(vec7(&self.mu[0], "mu")?), Vec7::from(vec7(&self.mu[1], "mu")?)],
            sigma: [mat(&self.sigma[0])?, mat(&self.sigma[1])?],
            n_iters: self.n_iters,
            final_loglik: self.final_loglik,
        };
        let standardizer = Standardizer {
            mean: vec7(&self.standardization_mean, "standardization_mean")?,
            scale: vec7(&self.standardization_scale, "standardization_scale")?,
        };
        Ok((model, standardizer))
    }
}
