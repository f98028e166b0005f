//! Diffusion inverse solvers on the analytic prior.
//!
//! Every solver draws from two independent streams derived from the run
//! seed: `dynamics` (terminal noise, ancestral/bridge/renoise draws, CM
//! noise `z`) and `guidance` (approximation noise such as `r_t`, `tau` and
//! the STSL probe). Draws are skipped when the corresponding scale is zero,
//! which is what makes the degenerate configurations reproduce their parent
//! solvers bit for bit.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ancestral_step, initial_noise, ConsistencyFunction, Integrator, DEFAULT_INTEGRATOR_STEPS};
use crate::mixture::GaussianMixture;
use crate::operators::{MeasurementOperator, Target};
use crate::rng::{normal_vector, stream, Stream};
use crate::schedule::{bridge_sample, renoise, NoiseSchedule};
use crate::{Error, Point, Result};

/// States with a larger norm than this abort the run.
pub const DIVERGENCE_NORM: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Dps,
    Freedom,
    Mpgd,
    Lgd,
    Stsl,
    Proposed1,
    Cm,
    Proposed2,
}

impl SolverKind {
    pub const ALL: [SolverKind; 8] = [
        SolverKind::Dps,
        SolverKind::Freedom,
        SolverKind::Mpgd,
        SolverKind::Lgd,
        SolverKind::Stsl,
        SolverKind::Proposed1,
        SolverKind::Cm,
        SolverKind::Proposed2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dps => "dps",
            SolverKind::Freedom => "freedom",
            SolverKind::Mpgd => "mpgd",
            SolverKind::Lgd => "lgd",
            SolverKind::Stsl => "stsl",
            SolverKind::Proposed1 => "proposed1",
            SolverKind::Cm => "cm",
            SolverKind::Proposed2 => "proposed2",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown solver '{name}'")))
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stand-in for a posterior sample used by the guidance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Approximation {
    #[serde(rename = "posterior_mean")]
    PosteriorMean,
    #[default]
    #[serde(rename = "cm")]
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub solver: SolverKind,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Proposed II step for the first (largest) stage; falls back to `zeta`.
    #[serde(default)]
    pub zeta1: Option<f64>,
    /// Proposed II step for later stages; falls back to `zeta`.
    #[serde(default)]
    pub zeta2: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Inclusive `[lo, hi]` of 1-based step indices counted from the noisy
    /// end. Defaults to `[T/4, T/2]`.
    #[serde(default)]
    pub travel_range: Option<[usize; 2]>,
    #[serde(default)]
    pub r_t: f64,
    #[serde(default)]
    pub eta: f64,
    /// Extra CM levels, strictly increasing; visited from largest to smallest.
    #[serde(default)]
    pub ts: Vec<f64>,
    #[serde(default)]
    pub approx: Approximation,
    #[serde(default)]
    pub normalize_by_loss: bool,
    #[serde(default = "default_integrator_steps")]
    pub integrator_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_zeta() -> f64 {
    0.05
}
fn default_tau() -> f64 {
    0.05
}
fn default_k() -> usize {
    1
}
fn default_integrator_steps() -> usize {
    DEFAULT_INTEGRATOR_STEPS
}

impl SolverConfig {
    pub fn new(solver: SolverKind) -> Self {
        Self {
            solver,
            zeta: default_zeta(),
            zeta1: None,
            zeta2: None,
            tau: default_tau(),
            k: default_k(),
            travel_range: None,
            r_t: 0.0,
            eta: 0.0,
            ts: Vec::new(),
            approx: Approximation::default(),
            normalize_by_loss: false,
            integrator_steps: default_integrator_steps(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn zeta1(&self) -> f64 {
        self.zeta1.unwrap_or(self.zeta)
    }

    pub fn zeta2(&self) -> f64 {
        self.zeta2.unwrap_or(self.zeta)
    }

    pub fn travel_range(&self, steps: usize) -> [usize; 2] {
        self.travel_range.unwrap_or([(steps / 4).max(1), (steps / 2).max(1)])
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg("zeta", self.zeta)?;
        nonneg("zeta1", self.zeta1())?;
        nonneg("zeta2", self.zeta2())?;
        nonneg("tau", self.tau)?;
        nonneg("r_t", self.r_t)?;
        nonneg("eta", self.eta)?;
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let [lo, hi] = self.travel_range(schedule.steps());
        if lo == 0 || lo > hi || hi > schedule.steps() {
            return Err(Error::Config(format!(
                "travel_range [{lo}, {hi}] must satisfy 1 <= lo <= hi <= {}",
                schedule.steps()
            )));
        }
        if self.ts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("ts must be strictly increasing".into()));
        }
        if let Some(t) = self
            .ts
            .iter()
            .find(|t| !(**t >= schedule.sigma_min() && **t <= schedule.sigma_max()))
        {
            return Err(Error::Config(format!(
                "ts entry {t} outside [{}, {}]",
                schedule.sigma_min(),
                schedule.sigma_max()
            )));
        }
        if self.integrator_steps < 2 {
            return Err(Error::Config("integrator_steps must be >= 2".into()));
        }
        Ok(())
    }
}

/// Prior, noise ladder, forward operator and measurement.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub gmm: &'a GaussianMixture,
    pub schedule: &'a NoiseSchedule,
    pub operator: &'a MeasurementOperator,
    pub target: &'a Target,
}

impl<'a> Problem<'a> {
    pub fn new(
        gmm: &'a GaussianMixture,
        schedule: &'a NoiseSchedule,
        operator: &'a MeasurementOperator,
        target: &'a Target,
    ) -> Result<Self> {
        Error::check_dim(gmm.dim(), operator.input_dim())?;
        let p = Self {
            gmm,
            schedule,
            operator,
            target,
        };
        p.loss(&Point::zeros(gmm.dim()))?;
        Ok(p)
    }

    /// Noise-free `d(f(x), y)`.
    pub fn loss(&self, x: &Point) -> Result<f64> {
        self.operator.loss_and_grad(x, self.target).map(|(l, _)| l)
    }
}

/// One recorded solver step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub sigma: f64,
    pub x_t: Point,
    pub x0t: Point,
    pub loss: f64,
    /// `log p(x0t | x_t)` under the exact posterior.
    pub post_logdensity: f64,
    pub prior_logdensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub solver: SolverKind,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub final_sample: Point,
    /// Noise-free loss of the final sample.
    pub final_loss: f64,
    /// Denoiser (or consistency function) evaluations.
    pub evaluations: usize,
}

/// `dynamics` stream for a run seed; also the stream an unconditional run
/// with the same seed uses.
pub fn dynamics_stream(seed: u64) -> Stream {
    stream(seed, 0, "dynamics")
}

pub fn guidance_stream(seed: u64) -> Stream {
    stream(seed, 0, "guidance")
}

/// Guidance quantities at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceEval {
    pub x0t: Point,
    pub loss: f64,
    /// `grad_{x0t} d(f(x0t), y)`.
    pub grad_x0: Point,
    /// `grad_{x_t} d(f(approx(x_t) + noise), y)` with the noise held fixed.
    pub grad_xt: Point,
}

/// Evaluates `approx(sigma, x_t) + noise` and chains the loss gradient back
/// to `x_t` through the approximation's Jacobian.
pub fn guidance(
    problem: &Problem,
    approx: Approximation,
    integrator_steps: usize,
    sigma: f64,
    x_t: &Point,
    noise: Option<&Point>,
) -> Result<GuidanceEval> {
    let gmm = problem.gmm;
    let (base, jac) = match approx {
        Approximation::PosteriorMean => (gmm.tweedie_mean(sigma, x_t)?, gmm.tweedie_jacobian(sigma, x_t)?),
        Approximation::Consistency => {
            let cf = ConsistencyFunction::new(gmm, problem.schedule.sigma_min(), integrator_steps, Integrator::Heun)?;
            let s = cf.jacobian(sigma, x_t)?;
            (s.value, s.jacobian)
        }
    };
    let x0t = match noise {
        Some(n) => base + n,
        None => base,
    };
    let (loss, grad_x0) = problem.operator.loss_and_grad(&x0t, problem.target)?;
    let grad_xt = jac.tr_mul(&grad_x0);
    Ok(GuidanceEval {
        x0t,
        loss,
        grad_x0,
        grad_xt,
    })
}

/// STSL correction direction
/// `grad_x [eps^T (s(x + eps) - s(x))] = H(x + eps) eps - H(x) eps`.
pub fn stsl_correction(gmm: &GaussianMixture, sigma: f64, x: &Point, eps: &Point) -> Result<Point> {
    let shifted = x + eps;
    Ok(gmm.score_hessian(sigma, &shifted)? * eps - gmm.score_hessian(sigma, x)? * eps)
}

/// The scalar `eps^T (s(x + eps) - s(x))` differentiated by [`stsl_correction`].
pub fn stsl_scalar(gmm: &GaussianMixture, sigma: f64, x: &Point, eps: &Point) -> Result<f64> {
    Ok(eps.dot(&(gmm.score(sigma, &(x + eps))? - gmm.score(sigma, x)?)))
}

fn record(problem: &Problem, sigma: f64, x_t: &Point, x0t: &Point, loss: f64) -> Result<StepRecord> {
    let post = problem.gmm.exact_posterior(sigma, x_t)?;
    Ok(StepRecord {
        sigma,
        x_t: x_t.clone(),
        x0t: x0t.clone(),
        loss,
        post_logdensity: post.log_density(x0t)?,
        prior_logdensity: problem.gmm.log_prior_density(x0t)?,
    })
}

fn guard(solver: SolverKind, step: usize, x: &Point) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) && x.norm() <= DIVERGENCE_NORM {
        Ok(())
    } else {
        Err(Error::Divergence {
            solver: solver.name().into(),
            step,
        })
    }
}

fn step_size(cfg: &SolverConfig, zeta: f64, loss: f64) -> f64 {
    if cfg.normalize_by_loss {
        zeta / (2.0 * loss).sqrt().max(1e-12)
    } else {
        zeta
    }
}

fn noise_draw(scale: f64, dim: usize, rng: &mut Stream) -> Option<Point> {
    (scale > 0.0).then(|| normal_vector(rng, dim) * scale)
}

fn finish(problem: &Problem, cfg: &SolverConfig, records: Vec<StepRecord>, x: Point, evaluations: usize) -> Result<Trajectory> {
    Ok(Trajectory {
        solver: cfg.solver,
        seed: cfg.seed,
        records,
        final_loss: problem.loss(&x)?,
        final_sample: x,
        evaluations,
    })
}

/// Shared ancestral loop with optional time travel. `approx`, `noise_scale`
/// select the guidance estimate; `k` and `range` control re-noising.
fn guided_ancestral(
    problem: &Problem,
    cfg: &SolverConfig,
    approx: Approximation,
    noise_scale: f64,
    k: usize,
) -> Result<Trajectory> {
    cfg.validate(problem.schedule)?;
    let schedule = problem.schedule;
    let dim = problem.gmm.dim();
    let [lo, hi] = cfg.travel_range(schedule.steps());
    let mut dyn_rng = dynamics_stream(cfg.seed);
    let mut g_rng = guidance_stream(cfg.seed);
    let mut x = initial_noise(dim, schedule.sigma_max(), &mut dyn_rng);
    let mut records = Vec::with_capacity(schedule.steps());
    let mut evaluations = 0;
    for (i, (sigma_t, sigma_prev)) in schedule.reverse_pairs().enumerate() {
        let inner = if (lo..=hi).contains(&(i + 1)) { k } else { 1 };
        let mut x_t = x.clone();
        let mut last = None;
        for j in 0..inner {
            if j > 0 {
                x_t = renoise(&x, sigma_prev, sigma_t, &mut dyn_rng)?;
            }
            let noise = noise_draw(noise_scale, dim, &mut g_rng);
            let g = guidance(problem, approx, cfg.integrator_steps, sigma_t, &x_t, noise.as_ref())?;
            let stepped = ancestral_step(problem.gmm, sigma_t, sigma_prev, &x_t, &mut dyn_rng)?;
            x = stepped - &g.grad_xt * step_size(cfg, cfg.zeta, g.loss);
            evaluations += 1;
            guard(cfg.solver, i, &x)?;
            last = Some(g);
        }
        let g = last.expect("at least one inner iteration");
        records.push(record(problem, sigma_t, &x_t, &g.x0t, g.loss)?);
    }
    finish(problem, cfg, records, x, evaluations)
}

/// Guidance through the posterior-mean Jacobian after each ancestral step.
pub fn solve_dps(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    guided_ancestral(problem, cfg, Approximation::PosteriorMean, 0.0, 1)
}

/// DPS with `k`-fold re-noise-and-repeat inside the travel range.
pub fn solve_freedom(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    guided_ancestral(problem, cfg, Approximation::PosteriorMean, 0.0, cfg.k)
}

/// DPS with the posterior mean perturbed by `N(0, r_t^2 I)`.
pub fn solve_lgd(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    guided_ancestral(problem, cfg, Approximation::PosteriorMean, cfg.r_t, 1)
}

/// DPS with `x0t = g(sigma_t, x_t) + N(0, tau^2 I)` (or the posterior mean
/// when `approx` is switched off).
pub fn solve_proposed1(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    guided_ancestral(problem, cfg, cfg.approx, cfg.tau, 1)
}

/// Gradient step on the posterior mean itself, then a bridge draw.
pub fn solve_mpgd(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate(problem.schedule)?;
    let gmm = problem.gmm;
    let schedule = problem.schedule;
    let mut dyn_rng = dynamics_stream(cfg.seed);
    let mut x = initial_noise(gmm.dim(), schedule.sigma_max(), &mut dyn_rng);
    let mut records = Vec::with_capacity(schedule.steps());
    for (i, (sigma_t, sigma_prev)) in schedule.reverse_pairs().enumerate() {
        let mean = gmm.tweedie_mean(sigma_t, &x)?;
        let (loss, grad) = problem.operator.loss_and_grad(&mean, problem.target)?;
        let moved = &mean - grad * step_size(cfg, cfg.zeta, loss);
        records.push(record(problem, sigma_t, &x, &mean, loss)?);
        x = bridge_sample(&x, &moved, sigma_t, sigma_prev, &mut dyn_rng)?;
        guard(cfg.solver, i, &x)?;
    }
    let n = records.len();
    finish(problem, cfg, records, x, n)
}

/// Guided update, second-order correction, then the ancestral step.
pub fn solve_stsl(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate(problem.schedule)?;
    let gmm = problem.gmm;
    let schedule = problem.schedule;
    let mut dyn_rng = dynamics_stream(cfg.seed);
    let mut g_rng = guidance_stream(cfg.seed);
    let mut x = initial_noise(gmm.dim(), schedule.sigma_max(), &mut dyn_rng);
    let mut records = Vec::with_capacity(schedule.steps());
    for (i, (sigma_t, sigma_prev)) in schedule.reverse_pairs().enumerate() {
        let g = guidance(problem, Approximation::PosteriorMean, cfg.integrator_steps, sigma_t, &x, None)?;
        records.push(record(problem, sigma_t, &x, &g.x0t, g.loss)?);
        let mut y = &x - &g.grad_xt * step_size(cfg, cfg.zeta, g.loss);
        if cfg.eta > 0.0 {
            let eps = normal_vector(&mut g_rng, gmm.dim());
            y -= stsl_correction(gmm, sigma_t, &y, &eps)? * cfg.eta;
        }
        x = ancestral_step(gmm, sigma_t, sigma_prev, &y, &mut dyn_rng)?;
        guard(cfg.solver, i, &x)?;
    }
    let n = records.len();
    finish(problem, cfg, records, x, n)
}

/// CM stage levels: `sigma_max` followed by `ts` from largest to smallest.
pub fn cm_stages(schedule: &NoiseSchedule, ts: &[f64]) -> Vec<f64> {
    std::iter::once(schedule.sigma_max()).chain(ts.iter().rev().copied()).collect()
}

/// Multistep consistency sampling: `x0 = g(sigma_max, x_T)`, then for each
/// extra level `x0 = g(t_n, x0 + t_n z)`.
pub fn sample_cm(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate(problem.schedule)?;
    let gmm = problem.gmm;
    let cf = ConsistencyFunction::new(gmm, problem.schedule.sigma_min(), cfg.integrator_steps, Integrator::Heun)?;
    let mut dyn_rng = dynamics_stream(cfg.seed);
    let mut x0 = Point::zeros(gmm.dim());
    let mut records = Vec::new();
    for (i, t) in cm_stages(problem.schedule, &cfg.ts).into_iter().enumerate() {
        let x_t = &x0 + normal_vector(&mut dyn_rng, gmm.dim()) * t;
        x0 = cf.apply(t, &x_t)?;
        guard(cfg.solver, i, &x0)?;
        let loss = problem.loss(&x0)?;
        records.push(record(problem, t, &x_t, &x0, loss)?);
    }
    let n = records.len();
    finish(problem, cfg, records, x0, n)
}

/// Consistency-model inversion: per stage, `k` gradient steps on the noise
/// `z` with `grad_z = t_n J^T grad_{x0} d`, base `x0` held fixed within the
/// stage, and a final evaluation at the optimized `z`.
pub fn solve_proposed2(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate(problem.schedule)?;
    let gmm = problem.gmm;
    let dim = gmm.dim();
    let cf = ConsistencyFunction::new(gmm, problem.schedule.sigma_min(), cfg.integrator_steps, Integrator::Heun)?;
    let mut dyn_rng = dynamics_stream(cfg.seed);
    let mut g_rng = guidance_stream(cfg.seed);
    let mut x0 = Point::zeros(dim);
    let mut records = Vec::new();
    let mut evaluations = 0;
    for (i, t) in cm_stages(problem.schedule, &cfg.ts).into_iter().enumerate() {
        let zeta = if i == 0 { cfg.zeta1() } else { cfg.zeta2() };
        let mut z = normal_vector(&mut dyn_rng, dim);
        if zeta > 0.0 {
            for _ in 0..cfg.k {
                let x_t = &x0 + &z * t;
                let noise = noise_draw(cfg.tau, dim, &mut g_rng);
                let g = guidance(problem, Approximation::Consistency, cfg.integrator_steps, t, &x_t, noise.as_ref())?;
                evaluations += 1;
                z -= &g.grad_xt * (t * step_size(cfg, zeta, g.loss));
                if !z.iter().all(|v| v.is_finite()) || z.norm() > DIVERGENCE_NORM {
                    return Err(Error::Divergence {
                        solver: cfg.solver.name().into(),
                        step: i,
                    });
                }
            }
        }
        let x_t = &x0 + &z * t;
        x0 = cf.apply(t, &x_t)?;
        evaluations += 1;
        guard(cfg.solver, i, &x0)?;
        let loss = problem.loss(&x0)?;
        records.push(record(problem, t, &x_t, &x0, loss)?);
    }
    finish(problem, cfg, records, x0, evaluations)
}

/// Runs the solver named in `cfg`.
pub fn solve(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    match cfg.solver {
        SolverKind::Dps => solve_dps(problem, cfg),
        SolverKind::Freedom => solve_freedom(problem, cfg),
        SolverKind::Mpgd => solve_mpgd(problem, cfg),
        SolverKind::Lgd => solve_lgd(problem, cfg),
        SolverKind::Stsl => solve_stsl(problem, cfg),
        SolverKind::Proposed1 => solve_proposed1(problem, cfg),
        SolverKind::Cm => sample_cm(problem, cfg),
        SolverKind::Proposed2 => solve_proposed2(problem, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::sample_unconditional;
    use crate::numeric::chi_square_uniform;
    use crate::operators::{train_mlp, TrainConfig};
    use crate::point;
    use crate::Matrix;
    use std::sync::OnceLock;

    fn toy() -> &'static GaussianMixture {
        static G: OnceLock<GaussianMixture> = OnceLock::new();
        G.get_or_init(GaussianMixture::five_mode_toy)
    }

    fn schedule() -> &'static NoiseSchedule {
        static S: OnceLock<NoiseSchedule> = OnceLock::new();
        S.get_or_init(NoiseSchedule::toy)
    }

    fn classifier() -> &'static MeasurementOperator {
        static OP: OnceLock<MeasurementOperator> = OnceLock::new();
        OP.get_or_init(|| MeasurementOperator::classifier(train_mlp(toy(), &TrainConfig::model_a(1)).unwrap()))
    }

    fn identity_op() -> MeasurementOperator {
        MeasurementOperator::linear(Matrix::identity(2, 2)).unwrap()
    }

    fn cfg(kind: SolverKind, seed: u64) -> SolverConfig {
        SolverConfig::new(kind).with_seed(seed)
    }

    fn all_finite(t: &Trajectory) -> bool {
        t.records.iter().all(|r| {
            r.sigma.is_finite()
                && r.loss.is_finite()
                && r.post_logdensity.is_finite()
                && r.prior_logdensity.is_finite()
                && r.x_t.iter().chain(r.x0t.iter()).all(|v| v.is_finite())
        }) && t.final_sample.iter().all(|v| v.is_finite())
    }

    #[test]
    fn solver_names_round_trip() {
        for k in SolverKind::ALL {
            assert_eq!(SolverKind::parse(k.name()).unwrap(), k);
        }
        assert!(matches!(SolverKind::parse("ddrm"), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let s = schedule();
        assert!(cfg(SolverKind::Dps, 0).validate(s).is_ok());
        let bad = [
            SolverConfig { zeta: -1.0, ..cfg(SolverKind::Dps, 0) },
            SolverConfig { k: 0, ..cfg(SolverKind::Freedom, 0) },
            SolverConfig { travel_range: Some([0, 3]), ..cfg(SolverKind::Freedom, 0) },
            SolverConfig { travel_range: Some([5, 101]), ..cfg(SolverKind::Freedom, 0) },
            SolverConfig { ts: vec![1.0, 0.5], ..cfg(SolverKind::Cm, 0) },
            SolverConfig { ts: vec![5.0], ..cfg(SolverKind::Cm, 0) },
            SolverConfig { tau: f64::NAN, ..cfg(SolverKind::Proposed1, 0) },
        ];
        for b in bad {
            assert!(matches!(b.validate(s), Err(Error::Config(_))), "{b:?}");
        }
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let c: SolverConfig = serde_json::from_str(r#"{"solver":"freedom","k":2}"#).unwrap();
        assert_eq!(c.k, 2);
        assert_eq!(c.travel_range(100), [25, 50]);
        assert_eq!(c.approx, Approximation::Consistency);
        assert!(serde_json::from_str::<SolverConfig>(r#"{"solver":"dps","zetta":1}"#).is_err());
        let a: SolverConfig = serde_json::from_str(r#"{"solver":"proposed1","approx":"posterior_mean"}"#).unwrap();
        assert_eq!(a.approx, Approximation::PosteriorMean);
    }

    #[test]
    fn dps_without_guidance_is_unconditional_sampling() {
        let op = identity_op();
        let y = Target::Vector(vec![1.0, 1.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        for seed in 0..3 {
            let t = solve_dps(&p, &SolverConfig { zeta: 0.0, ..cfg(SolverKind::Dps, seed) }).unwrap();
            let u = sample_unconditional(toy(), schedule(), &mut dynamics_stream(seed)).unwrap();
            assert_eq!(t.final_sample, u.final_sample);
            for (r, (s, x)) in t.records.iter().zip(&u.states) {
                assert_eq!(r.sigma, *s);
                assert_eq!(&r.x_t, x);
            }
        }
    }

    #[test]
    fn dps_concentrates_on_linear_target() {
        let op = identity_op();
        let y = Target::Vector(vec![1.0, 1.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        let hits = (0..100)
            .filter(|&seed| {
                let t = solve_dps(&p, &SolverConfig { zeta: 0.2, ..cfg(SolverKind::Dps, seed) }).unwrap();
                (&t.final_sample - point(&[1.0, 1.0])).norm() < 0.2
            })
            .count();
        assert!(hits >= 90, "{hits}");
    }

    #[test]
    fn trajectories_are_deterministic_finite_and_complete() {
        let y = Target::Class(2);
        let p = Problem::new(toy(), schedule(), classifier(), &y).unwrap();
        for kind in SolverKind::ALL {
            let c = SolverConfig {
                zeta: 0.02,
                k: 2,
                r_t: 0.2,
                eta: 0.1,
                ts: vec![0.5, 1.0],
                ..cfg(kind, 7)
            };
            let a = solve(&p, &c).unwrap();
            let b = solve(&p, &c).unwrap();
            assert_eq!(a, b, "{kind}");
            assert!(all_finite(&a), "{kind}");
            let expected = match kind {
                SolverKind::Cm | SolverKind::Proposed2 => 3,
                _ => schedule().steps(),
            };
            assert_eq!(a.records.len(), expected, "{kind}");
            let c2 = SolverConfig { seed: 8, ..c };
            assert_ne!(solve(&p, &c2).unwrap().final_sample, a.final_sample, "{kind}");
        }
    }

    #[test]
    fn reduction_web_is_bitwise() {
        let y = Target::Class(0);
        let p = Problem::new(toy(), schedule(), classifier(), &y).unwrap();
        for seed in 0..3 {
            let base = SolverConfig { zeta: 0.03, ..cfg(SolverKind::Dps, seed) };
            let dps = solve_dps(&p, &base).unwrap();
            let lgd = solve_lgd(&p, &SolverConfig { r_t: 0.0, solver: SolverKind::Lgd, ..base.clone() }).unwrap();
            let fd = solve_freedom(&p, &SolverConfig { k: 1, solver: SolverKind::Freedom, ..base.clone() }).unwrap();
            let p1 = solve_proposed1(
                &p,
                &SolverConfig {
                    approx: Approximation::PosteriorMean,
                    tau: 0.0,
                    solver: SolverKind::Proposed1,
                    ..base.clone()
                },
            )
            .unwrap();
            for t in [&lgd, &fd, &p1] {
                assert_eq!(t.records, dps.records);
                assert_eq!(t.final_sample, dps.final_sample);
            }
            let cm_cfg = SolverConfig { ts: vec![0.3, 1.5], ..cfg(SolverKind::Cm, seed) };
            let cm = sample_cm(&p, &cm_cfg).unwrap();
            let p2 = solve_proposed2(
                &p,
                &SolverConfig {
                    zeta: 0.0,
                    k: 3,
                    solver: SolverKind::Proposed2,
                    ..cm_cfg
                },
            )
            .unwrap();
            assert_eq!(p2.records, cm.records);
            assert_eq!(p2.final_sample, cm.final_sample);
        }
    }

    #[test]
    fn freedom_evaluation_count() {
        let y = Target::Class(1);
        let p = Problem::new(toy(), schedule(), classifier(), &y).unwrap();
        let t = solve_freedom(
            &p,
            &SolverConfig {
                k: 3,
                travel_range: Some([10, 19]),
                ..cfg(SolverKind::Freedom, 4)
            },
        )
        .unwrap();
        assert_eq!(t.evaluations, 90 + 10 * 3);
        assert_eq!(t.records.len(), 100);
    }

    fn fd_wrt(f: impl Fn(&Point) -> f64, x: &Point, h: f64) -> Point {
        Point::from_iterator(
            x.len(),
            (0..x.len()).map(|i| {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            }),
        )
    }

    fn rel(a: &Point, b: &Point) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-8)
    }

    #[test]
    fn guidance_gradients_match_finite_differences() {
        let y = Target::Class(3);
        let p = Problem::new(toy(), schedule(), classifier(), &y).unwrap();
        let lin = MeasurementOperator::first_coordinate(2);
        let y1 = Target::Vector(vec![1.0]);
        let pl = Problem::new(toy(), schedule(), &lin, &y1).unwrap();
        let mut rng = stream(11, 0, "fd");
        for prob in [&p, &pl] {
            for step in [0, 10, 25, 40, 50, 60, 70, 80, 90, 99] {
                let sigma = schedule().sigma(step);
                let x = normal_vector(&mut rng, 2) * (0.5 + sigma);
                let noise = normal_vector(&mut rng, 2) * 0.1;
                for approx in [Approximation::PosteriorMean, Approximation::Consistency] {
                    for n in [None, Some(&noise)] {
                        let g = guidance(prob, approx, 80, sigma, &x, n).unwrap();
                        let f = |z: &Point| guidance(prob, approx, 80, sigma, z, n).unwrap().loss;
                        let fd = fd_wrt(f, &x, 1e-5 * (1.0 + sigma));
                        assert!(rel(&g.grad_xt, &fd) <= 1e-3, "step {step} {approx:?}: {} vs {fd}", g.grad_xt);
                    }
                }
                // Proposed II differentiates through x_t = x0 + t z.
                let base = point(&[0.2, -0.1]);
                let z = normal_vector(&mut rng, 2);
                let loss_z = |z: &Point| guidance(prob, Approximation::Consistency, 80, sigma, &(&base + z * sigma), None).unwrap().loss;
                let g = guidance(prob, Approximation::Consistency, 80, sigma, &(&base + &z * sigma), None).unwrap();
                assert!(rel(&(g.grad_xt * sigma), &fd_wrt(loss_z, &z, 1e-5)) <= 1e-3);
                // MPGD differentiates with respect to x0t directly.
                let m = toy().tweedie_mean(sigma, &x).unwrap();
                let (_, gm) = prob.operator.loss_and_grad(&m, prob.target).unwrap();
                let fm = fd_wrt(|v| prob.loss(v).unwrap(), &m, 1e-5);
                assert!(rel(&gm, &fm) <= 1e-3);
            }
        }
    }

    #[test]
    fn stsl_correction_matches_finite_differences() {
        let mut rng = stream(12, 0, "stsl");
        for _ in 0..20 {
            let sigma = 0.1 + 2.0 * rand::Rng::random::<f64>(&mut rng);
            let x = normal_vector(&mut rng, 2);
            let eps = normal_vector(&mut rng, 2);
            let g = stsl_correction(toy(), sigma, &x, &eps).unwrap();
            let fd = fd_wrt(|v| stsl_scalar(toy(), sigma, v, &eps).unwrap(), &x, 1e-5);
            assert!(rel(&g, &fd) <= 1e-4, "{g} vs {fd}");
        }
    }

    #[test]
    fn stsl_eta_is_inert_for_single_gaussian() {
        let g = GaussianMixture::new(vec![point(&[0.3, -0.2])], 0.4).unwrap();
        let op = identity_op();
        let y = Target::Vector(vec![0.5, 0.5]);
        let p = Problem::new(&g, schedule(), &op, &y).unwrap();
        let eps = point(&[0.7, -1.1]);
        assert!(stsl_correction(&g, 1.3, &point(&[2.0, 1.0]), &eps).unwrap().norm() < 1e-12);
        let a = solve_stsl(&p, &SolverConfig { eta: 0.0, ..cfg(SolverKind::Stsl, 3) }).unwrap();
        let b = solve_stsl(&p, &SolverConfig { eta: 0.5, ..cfg(SolverKind::Stsl, 3) }).unwrap();
        assert!((&a.final_sample - &b.final_sample).norm() < 1e-9);
    }

    #[test]
    fn mpgd_without_guidance_preserves_mode_law() {
        let op = identity_op();
        let y = Target::Vector(vec![0.0, 0.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        let mut counts = [0usize; 5];
        for seed in 0..1000 {
            let t = solve_mpgd(&p, &SolverConfig { zeta: 0.0, ..cfg(SolverKind::Mpgd, seed) }).unwrap();
            counts[toy().nearest_mode(&t.final_sample)] += 1;
        }
        let (_, pval) = chi_square_uniform(&counts);
        assert!(pval > 0.01, "{counts:?}");
    }

    #[test]
    fn mpgd_concentrates_on_linear_target() {
        let op = identity_op();
        let y = Target::Vector(vec![-1.0, -1.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        let hits = (0..100)
            .filter(|&seed| {
                let t = solve_mpgd(&p, &SolverConfig { zeta: 0.5, ..cfg(SolverKind::Mpgd, seed) }).unwrap();
                (&t.final_sample - point(&[-1.0, -1.0])).norm() < 0.2
            })
            .count();
        assert!(hits >= 80, "{hits}");
    }

    #[test]
    fn single_step_cm_preserves_mode_law() {
        let op = identity_op();
        let y = Target::Vector(vec![0.0, 0.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        let mut counts = [0usize; 5];
        for seed in 0..1000 {
            let t = sample_cm(&p, &cfg(SolverKind::Cm, seed)).unwrap();
            assert_eq!(t.records.len(), 1);
            counts[toy().nearest_mode(&t.final_sample)] += 1;
        }
        assert!(chi_square_uniform(&counts).1 > 0.01, "{counts:?}");
    }

    #[test]
    fn cm_tiny_second_level_barely_moves() {
        let op = identity_op();
        let y = Target::Vector(vec![0.0, 0.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        let smin = schedule().sigma_min();
        let within = (0..50)
            .filter(|&seed| {
                let t = sample_cm(&p, &SolverConfig { ts: vec![smin], ..cfg(SolverKind::Cm, seed) }).unwrap();
                (&t.records[1].x0t - &t.records[0].x0t).norm() <= 3.0 * smin
            })
            .count();
        assert!(within >= 45, "{within}");
    }

    #[test]
    fn proposed2_fits_linear_measurement() {
        let op = MeasurementOperator::first_coordinate(2);
        let y = Target::Vector(vec![1.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        let hits = (0..100)
            .filter(|&seed| {
                let c = SolverConfig {
                    zeta: 8.0,
                    k: 20,
                    tau: 0.0,
                    ts: vec![0.5],
                    ..cfg(SolverKind::Proposed2, seed)
                };
                let t = solve_proposed2(&p, &c).unwrap();
                (t.final_sample[0] - 1.0).abs() < 0.1
            })
            .count();
        assert!(hits >= 80, "{hits}");
    }

    #[test]
    fn divergence_is_typed() {
        let op = identity_op();
        let y = Target::Vector(vec![1.0, 1.0]);
        let p = Problem::new(toy(), schedule(), &op, &y).unwrap();
        let r = solve_dps(&p, &SolverConfig { zeta: 1e6, ..cfg(SolverKind::Dps, 0) });
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
        let r = solve_proposed2(&p, &SolverConfig { zeta: 1e9, k: 5, ..cfg(SolverKind::Proposed2, 0) });
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn problem_checks_target_shape() {
        let op = identity_op();
        let bad = Target::Vector(vec![1.0]);
        assert!(Problem::new(toy(), schedule(), &op, &bad).is_err());
        assert!(Problem::new(toy(), schedule(), classifier(), &Target::Class(9)).is_err());
    }

    fn median_at(runs: &[Trajectory], step: usize) -> f64 {
        let v: Vec<f64> = runs.iter().map(|t| t.records[step].post_logdensity).collect();
        crate::numeric::quantile(&v, 0.5)
    }

    #[test]
    fn proposed1_estimates_are_more_plausible_at_high_noise() {
        let (mut dps, mut p1) = (Vec::new(), Vec::new());
        for seed in 0..50u64 {
            let target = Target::Class(seed as usize % 5);
            let p = Problem::new(toy(), schedule(), classifier(), &target).unwrap();
            let base = |k| SolverConfig {
                zeta: 0.3,
                tau: 0.0,
                ..cfg(k, seed)
            };
            dps.push(solve(&p, &base(SolverKind::Dps)).unwrap());
            p1.push(solve(&p, &base(SolverKind::Proposed1)).unwrap());
        }
        let high: Vec<usize> = (0..schedule().steps()).filter(|&i| schedule().sigma(i) >= 1.0).collect();
        assert!(high.len() > 20);
        for &i in &high {
            assert!(median_at(&p1, i) > median_at(&dps, i), "step {i}");
        }
        let wins: usize = dps
            .iter()
            .zip(&p1)
            .map(|(d, q)| {
                high.iter()
                    .filter(|&&i| q.records[i].post_logdensity > d.records[i].post_logdensity)
                    .count()
            })
            .sum();
        assert!(wins as f64 / (50 * high.len()) as f64 > 0.8);
    }

    #[test]
    fn lgd_perturbation_leaves_the_prior_support() {
        let op = MeasurementOperator::first_coordinate(2);
        let target = Target::Vector(vec![1.0]);
        let p = Problem::new(toy(), schedule(), &op, &target).unwrap();
        let mean_prior = |t: &Trajectory| t.records.iter().map(|r| r.prior_logdensity).sum::<f64>() / t.records.len() as f64;
        let mut lower = 0;
        for seed in 0..30 {
            let dps = solve(&p, &SolverConfig { zeta: 0.2, ..cfg(SolverKind::Dps, seed) }).unwrap();
            let lgd = solve(&p, &SolverConfig { zeta: 0.2, r_t: 0.2, ..cfg(SolverKind::Lgd, seed) }).unwrap();
            lower += usize::from(mean_prior(&lgd) < mean_prior(&dps));
        }
        assert!(lower > 15, "{lower}/30");
    }

    #[test]
    fn stsl_without_correction_matches_dps_loss_distribution() {
        let op = MeasurementOperator::first_coordinate(2);
        let target = Target::Vector(vec![-1.0]);
        let p = Problem::new(toy(), schedule(), &op, &target).unwrap();
        let losses = |kind| -> Vec<f64> {
            (0..50)
                .map(|seed| solve(&p, &SolverConfig { zeta: 0.2, eta: 0.0, ..cfg(kind, seed) }).unwrap().final_loss)
                .collect()
        };
        let (d, s) = (losses(SolverKind::Dps), losses(SolverKind::Stsl));
        let q = |v: &[f64], a| crate::numeric::quantile(v, a);
        // Interquartile ranges overlap and medians share an order of magnitude.
        assert!(q(&d, 0.25) <= q(&s, 0.75) && q(&s, 0.25) <= q(&d, 0.75));
        let ratio = q(&d, 0.5) / q(&s, 0.5);
        assert!((0.1..10.0).contains(&ratio), "{ratio}");
    }

}
