//! Closed-form analytics for isotropic Gaussian-mixture priors.
//!
//! A prior `p(x0) = sum_i w_i N(x0; mu_i, sigma^2 I)` pushed through the VE
//! forward kernel `N(x_t; x0, sigma_t^2 I)` stays a Gaussian mixture with
//! variance `sigma^2 + sigma_t^2`, so densities, scores, Hessians and the exact
//! posterior `p(x0 | x_t)` are all available analytically. All weight
//! computations go through log-sum-exp: at toy scales the raw exponentials
//! already underflow.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{argmax, log_sum_exp, softmax};
use crate::rng::{normal_vector, Stream};
use crate::{Error, Matrix, Point, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Isotropic Gaussian mixture with a shared component standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    means: Vec<Point>,
    sigma: f64,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

/// Serializable description of a mixture, as found in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl GaussianMixture {
    /// Mixture with uniform weights `1/N`.
    pub fn new(means: Vec<Point>, sigma: f64) -> Result<Self> {
        let n = means.len();
        Self::with_weights(means, sigma, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn with_weights(means: Vec<Point>, sigma: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidMixture("at least one component required".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidMixture(format!("sigma must be positive, got {sigma}")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        for m in &means {
            Error::check_dim(dim, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture("non-finite mean".into()));
            }
        }
        if weights.len() != means.len() {
            return Err(Error::InvalidMixture(format!(
                "{} weights for {} components",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidMixture("weights must be strictly positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, expected 1")));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            dim,
            means,
            sigma,
            weights,
            log_weights,
        })
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        let means = spec.means.iter().map(|m| Point::from_column_slice(m)).collect();
        match &spec.weights {
            Some(w) => Self::with_weights(means, spec.sigma, w.clone()),
            None => Self::new(means, spec.sigma),
        }
    }

    pub fn to_spec(&self) -> MixtureSpec {
        let uniform = self.weights.iter().all(|w| *w == self.weights[0]);
        MixtureSpec {
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            sigma: self.sigma,
            weights: (!uniform).then(|| self.weights.clone()),
        }
    }

    /// The five-component planar mixture: corners of the square `[-1, 1]^2`
    /// plus the origin, component std 0.1.
    pub fn five_mode_toy() -> Self {
        let centers = [(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0), (0.0, 0.0)];
        let means = centers.iter().map(|&(a, b)| crate::point(&[a, b])).collect();
        Self::new(means, 0.1).expect("toy mixture is valid")
    }

    /// Uniform-weight mixture with means drawn uniformly from `[-spread, spread]^dim`.
    pub fn random(dim: usize, components: usize, spread: f64, sigma: f64, rng: &mut Stream) -> Result<Self> {
        let means = (0..components)
            .map(|_| Point::from_iterator(dim, (0..dim).map(|_| rng.random_range(-spread..=spread))))
            .collect();
        Self::new(means, sigma)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Point] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn has_uniform_weights(&self) -> bool {
        self.weights.iter().all(|w| *w == self.weights[0])
    }

    /// Variance of each component of the noised marginal at level `sigma_t`.
    pub fn marginal_variance(&self, sigma_t: f64) -> f64 {
        self.sigma * self.sigma + sigma_t * sigma_t
    }

    fn check_point(&self, x: &Point) -> Result<()> {
        Error::check_dim(self.dim, x.len())
    }

    fn check_level(sigma_t: f64) -> Result<()> {
        if sigma_t >= 0.0 && sigma_t.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("noise level must be >= 0, got {sigma_t}")))
        }
    }

    /// `log w_i - |x - mu_i|^2 / (2 v)` per component.
    fn component_logits(&self, var: f64, x: &Point) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.log_weights)
            .map(|(m, lw)| lw - (x - m).norm_squared() / (2.0 * var))
            .collect()
    }

    /// Responsibilities of each component for `x` under the marginal at
    /// `sigma_t`.
    pub fn responsibilities(&self, sigma_t: f64, x: &Point) -> Result<Vec<f64>> {
        Self::check_level(sigma_t)?;
        self.check_point(x)?;
        Ok(softmax(&self.component_logits(self.marginal_variance(sigma_t), x)))
    }

    pub fn log_marginal_density(&self, sigma_t: f64, x: &Point) -> Result<f64> {
        Self::check_level(sigma_t)?;
        self.check_point(x)?;
        let var = self.marginal_variance(sigma_t);
        let logits = self.component_logits(var, x);
        Ok(log_sum_exp(&logits) - 0.5 * self.dim as f64 * (2.0 * PI * var).ln())
    }

    /// `p_t(x) = sum_i w_i N(x; mu_i, (sigma^2 + sigma_t^2) I)`.
    pub fn marginal_density(&self, sigma_t: f64, x: &Point) -> Result<f64> {
        self.log_marginal_density(sigma_t, x).map(f64::exp)
    }

    pub fn log_prior_density(&self, x: &Point) -> Result<f64> {
        self.log_marginal_density(0.0, x)
    }

    /// `grad_x log p_t(x) = sum_i r_i (mu_i - x) / v`.
    pub fn score(&self, sigma_t: f64, x: &Point) -> Result<Point> {
        let r = self.responsibilities(sigma_t, x)?;
        let var = self.marginal_variance(sigma_t);
        let mut s = Point::zeros(self.dim);
        for (ri, m) in r.iter().zip(&self.means) {
            s += (m - x) * (*ri / var);
        }
        Ok(s)
    }

    /// `grad_x^2 log p_t(x) = -I / v + sum_i r_i (a_i - s)(a_i - s)^T` with
    /// `a_i = (mu_i - x) / v` and `s` the score.
    pub fn score_hessian(&self, sigma_t: f64, x: &Point) -> Result<Matrix> {
        let r = self.responsibilities(sigma_t, x)?;
        let var = self.marginal_variance(sigma_t);
        let dirs: Vec<Point> = self.means.iter().map(|m| (m - x) / var).collect();
        let mut s = Point::zeros(self.dim);
        for (ri, a) in r.iter().zip(&dirs) {
            s += a * *ri;
        }
        let mut h = Matrix::identity(self.dim, self.dim) * (-1.0 / var);
        for (ri, a) in r.iter().zip(&dirs) {
            let c = a - &s;
            h.ger(*ri, &c, &c, 1.0);
        }
        Ok(h)
    }

    /// Closed-form posterior `p(x0 | x_t)` at noise level `sigma_t > 0`.
    pub fn exact_posterior(&self, sigma_t: f64, x_t: &Point) -> Result<PosteriorMixture> {
        if !(sigma_t > 0.0 && sigma_t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "exact posterior requires sigma_t > 0, got {sigma_t}"
            )));
        }
        self.check_point(x_t)?;
        let s2 = self.sigma * self.sigma;
        let t2 = sigma_t * sigma_t;
        let var = s2 + t2;
        let logits = self.component_logits(var, x_t);
        let lse = log_sum_exp(&logits);
        let log_weights: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        let means = self
            .means
            .iter()
            .map(|m| (x_t * s2 + m * t2) / var)
            .collect();
        Ok(PosteriorMixture {
            weights,
            log_weights,
            means,
            var: s2 * t2 / var,
        })
    }

    pub fn posterior_mean(&self, sigma_t: f64, x_t: &Point) -> Result<Point> {
        Ok(self.exact_posterior(sigma_t, x_t)?.mean())
    }

    pub fn posterior_cov(&self, sigma_t: f64, x_t: &Point) -> Result<Matrix> {
        Ok(self.exact_posterior(sigma_t, x_t)?.cov())
    }

    /// First-order Tweedie estimate `x_t + sigma_t^2 * score`.
    pub fn tweedie_mean(&self, sigma_t: f64, x_t: &Point) -> Result<Point> {
        Ok(x_t + self.score(sigma_t, x_t)? * (sigma_t * sigma_t))
    }

    /// Second-order Tweedie estimate `sigma_t^2 (I + sigma_t^2 * Hessian)`.
    pub fn tweedie_cov(&self, sigma_t: f64, x_t: &Point) -> Result<Matrix> {
        let t2 = sigma_t * sigma_t;
        let h = self.score_hessian(sigma_t, x_t)?;
        Ok((Matrix::identity(self.dim, self.dim) + h * t2) * t2)
    }

    /// Jacobian of [`Self::tweedie_mean`] with respect to `x_t`.
    pub fn tweedie_jacobian(&self, sigma_t: f64, x_t: &Point) -> Result<Matrix> {
        let t2 = sigma_t * sigma_t;
        Ok(Matrix::identity(self.dim, self.dim) + self.score_hessian(sigma_t, x_t)? * t2)
    }

    /// Index of the closest mean. Ties go to the lowest index.
    pub fn nearest_mode(&self, x: &Point) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, m) in self.means.iter().enumerate() {
            let d = (x - m).norm_squared();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Distance from `x` to the boundary of its Voronoi cell.
    pub fn voronoi_boundary_distance(&self, x: &Point) -> f64 {
        let k = self.nearest_mode(x);
        let dk = (x - &self.means[k]).norm_squared();
        self.means
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, m)| {
                let sep = (m - &self.means[k]).norm();
                if sep == 0.0 {
                    f64::INFINITY
                } else {
                    ((x - m).norm_squared() - dk) / (2.0 * sep)
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Draws a component index by its prior weight.
    pub fn sample_component(&self, rng: &mut Stream) -> usize {
        sample_categorical(&self.weights, rng)
    }

    pub fn sample_prior(&self, rng: &mut Stream) -> Point {
        let k = self.sample_component(rng);
        &self.means[k] + normal_vector(rng, self.dim) * self.sigma
    }

    /// Draw from the noised marginal at `sigma_t`.
    pub fn sample_marginal(&self, sigma_t: f64, rng: &mut Stream) -> Point {
        let x0 = self.sample_prior(rng);
        x0 + normal_vector(rng, self.dim) * sigma_t
    }
}

/// The exact posterior `p(x0 | x_t)`: a mixture of shrunk components
/// `N(m_i, s^2 I)` with reweighted coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Point>,
    var: f64,
}

impl PosteriorMixture {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Point] {
        &self.means
    }

    /// Shared isotropic component variance `s^2`.
    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn argmax_weight(&self) -> usize {
        argmax(&self.weights)
    }

    pub fn log_density(&self, x0: &Point) -> Result<f64> {
        Error::check_dim(self.dim(), x0.len())?;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_weights)
            .map(|(m, lw)| lw - (x0 - m).norm_squared() / (2.0 * self.var))
            .collect();
        Ok(log_sum_exp(&logits) - 0.5 * self.dim() as f64 * (2.0 * PI * self.var).ln())
    }

    pub fn density(&self, x0: &Point) -> Result<f64> {
        self.log_density(x0).map(f64::exp)
    }

    pub fn mean(&self) -> Point {
        let mut m = Point::zeros(self.dim());
        for (w, mi) in self.weights.iter().zip(&self.means) {
            m += mi * *w;
        }
        m
    }

    /// `sum_i w_i (s^2 I + m_i m_i^T) - mean mean^T`, accumulated as
    /// centered outer products.
    pub fn cov(&self) -> Matrix {
        let d = self.dim();
        let mean = self.mean();
        let mut c = Matrix::identity(d, d) * self.var;
        for (w, mi) in self.weights.iter().zip(&self.means) {
            let dev = mi - &mean;
            c.ger(*w, &dev, &dev, 1.0);
        }
        c
    }

    pub fn sample(&self, rng: &mut Stream) -> Point {
        let k = sample_categorical(&self.weights, rng);
        &self.means[k] + normal_vector(rng, self.dim()) * self.var.sqrt()
    }
}

fn sample_categorical(weights: &[f64], rng: &mut Stream) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
