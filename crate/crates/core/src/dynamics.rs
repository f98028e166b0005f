//! Reverse-time dynamics over a mixture prior.
//!
//! The PF-ODE is integrated in the noise level itself,
//! `dx/dsigma = -sigma * score(sigma, x)`, which is the time-parametrized
//! `dx/dt = -1/2 (d sigma^2/dt) score` with the `dt` factored out. The
//! consistency function is the exact solution map of this ODE from `sigma_t`
//! down to the terminal level `sigma_min`; its Jacobian is propagated with the
//! forward-sensitivity system `dJ/dsigma = -sigma * Hessian * J`, discretized
//! with the same Heun stages so that it is the exact derivative of the
//! discrete map.

use serde::{Deserialize, Serialize};

use crate::mixture::GaussianMixture;
use crate::numeric::softmax;
use crate::rng::{normal_vector, Stream};
use crate::schedule::NoiseSchedule;
use crate::{Error, Matrix, Point, Result};

/// Substep budget used by the consistency function unless configured.
pub const DEFAULT_INTEGRATOR_STEPS: usize = 80;
/// Substep budget of the dense reference integration.
pub const REFERENCE_INTEGRATOR_STEPS: usize = 10_000;
const SUBSTEP_RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Heun,
    Euler,
}

/// Velocity `dx/dt` in the weighted-sum form
/// `sum_i r_i / 2 * (d sigma^2/dt) * (x - mu_i) / (sigma^2 + sigma_t^2)`.
pub fn velocity(gmm: &GaussianMixture, schedule: &NoiseSchedule, sigma_t: f64, x: &Point) -> Result<Point> {
    Error::check_dim(gmm.dim(), x.len())?;
    let var = gmm.marginal_variance(sigma_t);
    let logits: Vec<f64> = gmm
        .means()
        .iter()
        .zip(gmm.weights())
        .map(|(m, w)| w.ln() - (x - m).norm_squared() / (2.0 * var))
        .collect();
    let weights = softmax(&logits);
    let rate = schedule.sigma_sq_rate(sigma_t);
    let mut v = Point::zeros(x.len());
    for (w, m) in weights.iter().zip(gmm.means()) {
        v += (x - m) * (w / 2.0 * rate / var);
    }
    Ok(v)
}

/// Velocity from the score: `-1/2 (d sigma^2/dt) score(sigma_t, x)`.
pub fn velocity_from_score(gmm: &GaussianMixture, schedule: &NoiseSchedule, sigma_t: f64, x: &Point) -> Result<Point> {
    Ok(gmm.score(sigma_t, x)? * (-0.5 * schedule.sigma_sq_rate(sigma_t)))
}

/// Substep levels from `start` down to `end`, Karras-spaced (`rho = 7`).
fn substep_levels(start: f64, end: f64, steps: usize) -> Vec<f64> {
    let a = start.powf(1.0 / SUBSTEP_RHO);
    let b = end.powf(1.0 / SUBSTEP_RHO);
    let mut levels: Vec<f64> = (0..=steps)
        .map(|i| (a + (i as f64 / steps as f64) * (b - a)).powf(SUBSTEP_RHO))
        .collect();
    levels[0] = start;
    levels[steps] = end;
    levels
}

fn drift(gmm: &GaussianMixture, sigma: f64, x: &Point) -> Result<Point> {
    Ok(gmm.score(sigma, x)? * (-sigma))
}

fn drift_jacobian(gmm: &GaussianMixture, sigma: f64, x: &Point) -> Result<Matrix> {
    Ok(gmm.score_hessian(sigma, x)? * (-sigma))
}

fn ensure_finite(x: &Point, sigma: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure { sigma })
    }
}

fn integrate(
    gmm: &GaussianMixture,
    sigma_start: f64,
    sigma_end: f64,
    x: &Point,
    steps: usize,
    method: Integrator,
    mut jacobian: Option<&mut Matrix>,
) -> Result<Point> {
    Error::check_dim(gmm.dim(), x.len())?;
    if !(sigma_end > 0.0 && sigma_start.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "PF-ODE interval [{sigma_end}, {sigma_start}] must lie above zero"
        )));
    }
    if sigma_start < sigma_end {
        return Err(Error::Ordering {
            sigma_t: sigma_start,
            sigma_prev: sigma_end,
        });
    }
    if sigma_start == sigma_end {
        return Ok(x.clone());
    }
    if steps == 0 || (method == Integrator::Heun && steps < 2) {
        return Err(Error::InvalidArgument(format!("{steps} integrator steps is too few")));
    }
    let levels = substep_levels(sigma_start, sigma_end, steps);
    let mut x = x.clone();
    for w in levels.windows(2) {
        let (s0, s1) = (w[0], w[1]);
        let h = s1 - s0;
        let d0 = drift(gmm, s0, &x)?;
        match method {
            Integrator::Euler => {
                if let Some(j) = jacobian.as_deref_mut() {
                    let a0 = drift_jacobian(gmm, s0, &x)?;
                    *j += (&a0 * &*j) * h;
                }
                x += d0 * h;
            }
            Integrator::Heun => {
                let x_pred = &x + &d0 * h;
                ensure_finite(&x_pred, s1)?;
                let d1 = drift(gmm, s1, &x_pred)?;
                if let Some(j) = jacobian.as_deref_mut() {
                    let a0 = drift_jacobian(gmm, s0, &x)?;
                    let a1 = drift_jacobian(gmm, s1, &x_pred)?;
                    let k0 = &a0 * &*j;
                    let j_pred = &*j + &k0 * h;
                    let k1 = &a1 * &j_pred;
                    *j += (k0 + k1) * (0.5 * h);
                }
                x += (d0 + d1) * (0.5 * h);
            }
        }
        ensure_finite(&x, s1)?;
        if let Some(j) = jacobian.as_deref() {
            if j.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationFailure { sigma: s1 });
            }
        }
    }
    Ok(x)
}

/// Integrates the PF-ODE from `sigma_start` down to `sigma_end` starting at
/// `x`, using `steps` substeps.
pub fn solve_pf_ode(
    gmm: &GaussianMixture,
    sigma_start: f64,
    sigma_end: f64,
    x: &Point,
    steps: usize,
    method: Integrator,
) -> Result<Point> {
    integrate(gmm, sigma_start, sigma_end, x, steps, method, None)
}

/// Solution value of the PF-ODE together with its Jacobian `d Phi / d x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityResult {
    pub value: Point,
    pub jacobian: Matrix,
}

impl SensitivityResult {
    /// `J^T u`.
    pub fn vjp(&self, u: &Point) -> Point {
        self.jacobian.tr_mul(u)
    }
}

/// The exact PF-ODE solution map standing in for a distilled consistency
/// model: `g(sigma_t, x) = Phi_0(x)`, integrated down to `sigma_min`.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyFunction<'a> {
    gmm: &'a GaussianMixture,
    sigma_min: f64,
    steps: usize,
    method: Integrator,
}

impl<'a> ConsistencyFunction<'a> {
    pub fn new(gmm: &'a GaussianMixture, sigma_min: f64, steps: usize, method: Integrator) -> Result<Self> {
        if !(sigma_min > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_min must be positive, got {sigma_min}")));
        }
        let min_steps = if method == Integrator::Heun { 2 } else { 1 };
        if steps < min_steps {
            return Err(Error::InvalidArgument(format!(
                "{method:?} needs at least {min_steps} integrator steps, got {steps}"
            )));
        }
        Ok(Self {
            gmm,
            sigma_min,
            steps,
            method,
        })
    }

    /// Heun with the default budget, terminating at the schedule's floor.
    pub fn for_schedule(gmm: &'a GaussianMixture, schedule: &NoiseSchedule) -> Self {
        Self::new(gmm, schedule.sigma_min(), DEFAULT_INTEGRATOR_STEPS, Integrator::Heun).expect("valid")
    }

    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        Self::new(self.gmm, self.sigma_min, steps, self.method).map(|cf| {
            self = cf;
            self
        })
    }

    pub fn gmm(&self) -> &'a GaussianMixture {
        self.gmm
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn method(&self) -> Integrator {
        self.method
    }

    /// `g(sigma_t, x)`. Levels at or below `sigma_min` map to `x` itself.
    pub fn apply(&self, sigma_t: f64, x: &Point) -> Result<Point> {
        if sigma_t <= self.sigma_min {
            Error::check_dim(self.gmm.dim(), x.len())?;
            return Ok(x.clone());
        }
        integrate(self.gmm, sigma_t, self.sigma_min, x, self.steps, self.method, None)
    }

    /// `g(sigma_t, x)` and its Jacobian with respect to `x`.
    pub fn jacobian(&self, sigma_t: f64, x: &Point) -> Result<SensitivityResult> {
        let d = self.gmm.dim();
        let mut j = Matrix::identity(d, d);
        if sigma_t <= self.sigma_min {
            Error::check_dim(d, x.len())?;
            return Ok(SensitivityResult {
                value: x.clone(),
                jacobian: j,
            });
        }
        let value = integrate(self.gmm, sigma_t, self.sigma_min, x, self.steps, self.method, Some(&mut j))?;
        Ok(SensitivityResult { value, jacobian: j })
    }
}

/// One reverse ancestral step
/// `x + (sigma_t^2 - sigma_prev^2) score + sqrt(sigma_t^2 - sigma_prev^2) eps`.
pub fn ancestral_step(
    gmm: &GaussianMixture,
    sigma_t: f64,
    sigma_prev: f64,
    x: &Point,
    rng: &mut Stream,
) -> Result<Point> {
    if !(sigma_prev >= 0.0 && sigma_prev < sigma_t) {
        return Err(Error::Ordering { sigma_t, sigma_prev });
    }
    let dv = sigma_t * sigma_t - sigma_prev * sigma_prev;
    let score = gmm.score(sigma_t, x)?;
    Ok(x + score * dv + normal_vector(rng, x.len()) * dv.sqrt())
}

/// Draw of the terminal noise `x_T ~ N(0, sigma_max^2 I)`.
pub fn initial_noise(dim: usize, sigma_max: f64, rng: &mut Stream) -> Point {
    normal_vector(rng, dim) * sigma_max
}

/// States visited by an unconditional ancestral run.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconditionalRun {
    /// `(sigma_t, x_t)` before each of the `T` steps.
    pub states: Vec<(f64, Point)>,
    pub final_sample: Point,
}

/// Ancestral sampling down the full ladder from `N(0, sigma_max^2 I)`.
pub fn sample_unconditional(gmm: &GaussianMixture, schedule: &NoiseSchedule, rng: &mut Stream) -> Result<UnconditionalRun> {
    let mut x = initial_noise(gmm.dim(), schedule.sigma_max(), rng);
    let mut states = Vec::with_capacity(schedule.steps());
    for (sigma_t, sigma_prev) in schedule.reverse_pairs() {
        states.push((sigma_t, x.clone()));
        x = ancestral_step(gmm, sigma_t, sigma_prev, &x, rng)?;
    }
    Ok(UnconditionalRun {
        states,
        final_sample: x,
    })
}
