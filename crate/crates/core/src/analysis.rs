//! Experiments and metrics built on the exact posterior.
//!
//! All densities reported here are evaluated through
//! [`GaussianMixture::exact_posterior`], never through the approximations
//! being compared.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ConsistencyFunction, Integrator, DEFAULT_INTEGRATOR_STEPS};
use crate::mixture::GaussianMixture;
use crate::numeric::{compensated_sum, mean, quantile};
use crate::operators::{MeasurementOperator, MlpNetwork, Target};
use crate::rng::{derive_seed, normal_vector, Stream};
use crate::schedule::NoiseSchedule;
use crate::solvers::{solve, Problem, SolverConfig, Trajectory};
use crate::{Error, Matrix, Point, Result};

/// Posterior-sample stand-ins compared against the exact posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxMethod {
    PosteriorMean,
    MeanPlusNoise,
    MeanPlusCov,
    PfOde,
}

impl ApproxMethod {
    pub const ALL: [ApproxMethod; 4] = [
        ApproxMethod::PosteriorMean,
        ApproxMethod::MeanPlusNoise,
        ApproxMethod::MeanPlusCov,
        ApproxMethod::PfOde,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ApproxMethod::PosteriorMean => "posterior_mean",
            ApproxMethod::MeanPlusNoise => "mean_plus_noise",
            ApproxMethod::MeanPlusCov => "mean_plus_cov",
            ApproxMethod::PfOde => "pf_ode",
        }
    }
}

/// Points produced by one method and their exact-posterior log-densities.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodDensities {
    pub method: ApproxMethod,
    pub points: Vec<Point>,
    pub log_densities: Vec<f64>,
    pub prior_log_densities: Vec<f64>,
}

impl MethodDensities {
    pub fn median_log_density(&self) -> f64 {
        quantile(&self.log_densities, 0.5)
    }

    pub fn mean_log_density(&self) -> f64 {
        mean(&self.log_densities)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    pub sigma_t: f64,
    pub x_t: Point,
    pub methods: Vec<MethodDensities>,
}

impl ValidityReport {
    pub fn method(&self, m: ApproxMethod) -> &MethodDensities {
        self.methods.iter().find(|r| r.method == m).expect("all methods present")
    }
}

/// Default perturbation scale for the mean-plus-noise stand-in,
/// `r_t = sigma_t / sqrt(1 + sigma_t^2)`.
pub fn default_noise_scale(sigma_t: f64) -> f64 {
    sigma_t / (1.0 + sigma_t * sigma_t).sqrt()
}

/// Evaluates the four stand-ins at one `(x_t, sigma_t)`. Stochastic methods
/// contribute `draws` points each; `noise_scale` is the isotropic std of the
/// mean-plus-noise draws.
pub fn compare_approximations(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    x_t: &Point,
    sigma_t: f64,
    noise_scale: f64,
    draws: usize,
    rng: &mut Stream,
) -> Result<ValidityReport> {
    if !(sigma_t > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_t must be positive, got {sigma_t}")));
    }
    let post = gmm.exact_posterior(sigma_t, x_t)?;
    let mean_pt = gmm.tweedie_mean(sigma_t, x_t)?;
    let cov = gmm.tweedie_cov(sigma_t, x_t)?;
    let chol = cov_factor(&cov);
    let cf = ConsistencyFunction::new(
        gmm,
        schedule.sigma_min().min(sigma_t),
        DEFAULT_INTEGRATOR_STEPS,
        Integrator::Heun,
    )?;
    let d = gmm.dim();
    let mut methods = Vec::with_capacity(4);
    for m in ApproxMethod::ALL {
        let points: Vec<Point> = match m {
            ApproxMethod::PosteriorMean => vec![mean_pt.clone()],
            ApproxMethod::MeanPlusNoise => (0..draws)
                .map(|_| &mean_pt + normal_vector(rng, d) * noise_scale)
                .collect(),
            ApproxMethod::MeanPlusCov => (0..draws).map(|_| &mean_pt + &chol * normal_vector(rng, d)).collect(),
            ApproxMethod::PfOde => vec![cf.apply(sigma_t, x_t)?],
        };
        let log_densities = points.iter().map(|p| post.log_density(p)).collect::<Result<Vec<_>>>()?;
        let prior_log_densities = points.iter().map(|p| gmm.log_prior_density(p)).collect::<Result<Vec<_>>>()?;
        methods.push(MethodDensities {
            method: m,
            points,
            log_densities,
            prior_log_densities,
        });
    }
    Ok(ValidityReport {
        sigma_t,
        x_t: x_t.clone(),
        methods,
    })
}

// Lower Cholesky factor of a PSD matrix, falling back to a symmetric square
// root when the matrix is numerically singular.
fn cov_factor(cov: &Matrix) -> Matrix {
    match cov.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let eig = cov.clone().symmetric_eigen();
            let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
        }
    }
}

/// Axis-aligned square lattice `[lo, hi]^2` with `resolution` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: -2.0,
            hi: 2.0,
            resolution: 201,
        }
    }
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        if self.resolution == 1 {
            return 0.5 * (self.lo + self.hi);
        }
        self.lo + (self.hi - self.lo) * i as f64 / (self.resolution - 1) as f64
    }

    /// Cell `idx` in row-major order (`y` outer, `x` inner).
    pub fn point(&self, idx: usize) -> Point {
        let (row, col) = (idx / self.resolution, idx % self.resolution);
        Point::from_vec(vec![self.coordinate(col), self.coordinate(row)])
    }

    fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid grid {self:?}")));
        }
        Ok(())
    }
}

/// Cells closer than this to a Voronoi boundary are excluded from agreement.
pub const BOUNDARY_BAND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionMap {
    pub grid: Grid,
    pub sigma_t: f64,
    /// Mode reached by the PF-ODE from each cell; `None` on integration failure.
    pub ode_mode: Vec<Option<usize>>,
    pub voronoi_mode: Vec<usize>,
    pub in_band: Vec<bool>,
    pub agreement: f64,
    pub counted: usize,
}

/// Classifies every grid cell by where the PF-ODE from `sigma_t` lands and
/// compares against the Voronoi partition of the prior means.
pub fn decision_map(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    sigma_t: f64,
    grid: Grid,
    band: f64,
) -> Result<DecisionMap> {
    Error::check_dim(2, gmm.dim())?;
    grid.validate()?;
    let cf = ConsistencyFunction::for_schedule(gmm, schedule);
    let cells: Vec<(Option<usize>, usize, bool)> = (0..grid.cells())
        .into_par_iter()
        .map(|idx| {
            let x = grid.point(idx);
            let ode = cf.apply(sigma_t, &x).ok().map(|p| gmm.nearest_mode(&p));
            (ode, gmm.nearest_mode(&x), gmm.voronoi_boundary_distance(&x) < band)
        })
        .collect();
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (ode, vor, banded) in &cells {
        if let (Some(o), false) = (ode, banded) {
            counted += 1;
            hits += usize::from(o == vor);
        }
    }
    Ok(DecisionMap {
        grid,
        sigma_t,
        agreement: if counted == 0 { f64::NAN } else { hits as f64 / counted as f64 },
        counted,
        ode_mode: cells.iter().map(|c| c.0).collect(),
        voronoi_mode: cells.iter().map(|c| c.1).collect(),
        in_band: cells.iter().map(|c| c.2).collect(),
    })
}

/// Outcome of the density lower-bound check at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub sigma_t: f64,
    pub samples: usize,
    pub qualifying: usize,
    pub violations: usize,
    /// `log density - log bound` for each qualifying sample.
    pub log_margins: Vec<f64>,
}

impl BoundReport {
    pub fn qualification_rate(&self) -> f64 {
        self.qualifying as f64 / self.samples as f64
    }

    pub fn min_log_margin(&self) -> f64 {
        self.log_margins.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `log` of `w_k (4 pi sigma^2)^{-d/2} exp(-2 c^2 / sigma_t^2 - (d + 1) / 2)`.
pub fn log_density_bound(weight: f64, sigma: f64, dim: usize, c: f64, sigma_t: f64) -> f64 {
    let d = dim as f64;
    weight.ln() - 0.5 * d * (4.0 * std::f64::consts::PI * sigma * sigma).ln()
        - 2.0 * c * c / (sigma_t * sigma_t)
        - 0.5 * (d + 1.0)
}

/// Checks that PF-ODE endpoints close to a component sphere keep at least
/// the bound's density under the exact posterior.
pub fn check_density_bound(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    sigma_t: f64,
    n_samples: usize,
    rng: &mut Stream,
) -> Result<BoundReport> {
    if !(sigma_t > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_t must be positive, got {sigma_t}")));
    }
    let cf = ConsistencyFunction::new(gmm, schedule.sigma_min().min(sigma_t), DEFAULT_INTEGRATOR_STEPS, Integrator::Heun)?;
    let xs: Vec<Point> = (0..n_samples).map(|_| gmm.sample_marginal(sigma_t, rng)).collect();
    let d = gmm.dim() as f64;
    let radius_sq = (d + 1.0) * gmm.sigma() * gmm.sigma();
    let margins: Vec<Option<f64>> = xs
        .par_iter()
        .map(|x| -> Result<Option<f64>> {
            let phi = cf.apply(sigma_t, x)?;
            let k = gmm.nearest_mode(&phi);
            if (&phi - &gmm.means()[k]).norm_squared() > radius_sq {
                return Ok(None);
            }
            let c = x.norm().max(phi.norm());
            let bound = log_density_bound(gmm.weights()[k], gmm.sigma(), gmm.dim(), c, sigma_t);
            Ok(Some(gmm.exact_posterior(sigma_t, x)?.log_density(&phi)? - bound))
        })
        .collect::<Result<_>>()?;
    let log_margins: Vec<f64> = margins.into_iter().flatten().collect();
    Ok(BoundReport {
        sigma_t,
        samples: n_samples,
        qualifying: log_margins.len(),
        violations: log_margins.iter().filter(|m| **m < 0.0).count(),
        log_margins,
    })
}

/// Inverse task used by the benchmark.
#[derive(Debug, Clone)]
pub enum TaskKind {
    /// Guide with `model_a`, score consistency with the independent `model_b`.
    /// Run `i` targets class `i mod classes`.
    Classification { model_a: MlpNetwork, model_b: MlpNetwork },
    Linear { matrix: Matrix, y: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Task {
    pub gmm: GaussianMixture,
    pub schedule: NoiseSchedule,
    pub kind: TaskKind,
}

impl Task {
    pub fn operator(&self) -> Result<MeasurementOperator> {
        match &self.kind {
            TaskKind::Classification { model_a, .. } => Ok(MeasurementOperator::classifier(model_a.clone())),
            TaskKind::Linear { matrix, .. } => MeasurementOperator::linear(matrix.clone()),
        }
    }

    pub fn target(&self, run: usize) -> Target {
        match &self.kind {
            TaskKind::Classification { model_a, .. } => Target::Class(run % model_a.classes()),
            TaskKind::Linear { y, .. } => Target::Vector(y.clone()),
        }
    }
}

/// One benchmarked solver configuration; `config.seed` is replaced per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchEntry {
    pub label: String,
    pub config: SolverConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub label: String,
    pub run: usize,
    pub seed: u64,
    pub target: Target,
    pub final_sample: Option<Point>,
    pub final_loss: f64,
    /// Mean exact-posterior log-density of the recorded `x0t`.
    pub mean_post_logdensity: f64,
    /// Same, restricted to steps with `sigma_t` above the component scale.
    pub mean_post_logdensity_high: f64,
    pub final_prior_logdensity: f64,
    pub correct_a: Option<bool>,
    pub correct_b: Option<bool>,
    pub error: Option<String>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSummary {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub divergence_rate: f64,
    /// Model-B accuracy for classification, mean squared error for linear.
    pub consistency: f64,
    pub accuracy_a: Option<f64>,
    pub mean_post_logdensity: f64,
    pub mean_post_logdensity_high: f64,
    pub mean_final_prior_logdensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResults {
    pub master_seed: u64,
    pub outcomes: Vec<RunOutcome>,
    pub summaries: Vec<SolverSummary>,
}

impl BenchmarkResults {
    pub fn outcomes_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RunOutcome> + 'a {
        self.outcomes.iter().filter(move |o| o.label == label)
    }

    pub fn summary(&self, label: &str) -> Option<&SolverSummary> {
        self.summaries.iter().find(|s| s.label == label)
    }
}

fn run_one(task: &Task, op: &MeasurementOperator, entry: &BenchEntry, master_seed: u64, run: usize) -> RunOutcome {
    let seed = derive_seed(master_seed, run as u64);
    let target = task.target(run);
    let cfg = SolverConfig {
        seed,
        ..entry.config.clone()
    };
    let result = Problem::new(&task.gmm, &task.schedule, op, &target).and_then(|p| solve(&p, &cfg));
    let mut out = RunOutcome {
        label: entry.label.clone(),
        run,
        seed,
        target: target.clone(),
        final_sample: None,
        final_loss: f64::NAN,
        mean_post_logdensity: f64::NAN,
        mean_post_logdensity_high: f64::NAN,
        final_prior_logdensity: f64::NAN,
        correct_a: None,
        correct_b: None,
        error: None,
        diverged: false,
    };
    match result {
        Ok(t) => fill_outcome(task, &t, &mut out),
        Err(e) => {
            out.diverged = matches!(e, Error::Divergence { .. });
            out.error = Some(e.to_string());
        }
    }
    out
}

fn fill_outcome(task: &Task, t: &Trajectory, out: &mut RunOutcome) {
    let post: Vec<f64> = t.records.iter().map(|r| r.post_logdensity).collect();
    let high: Vec<f64> = t
        .records
        .iter()
        .filter(|r| r.sigma > task.gmm.sigma())
        .map(|r| r.post_logdensity)
        .collect();
    out.mean_post_logdensity = mean(&post);
    out.mean_post_logdensity_high = mean(&high);
    out.final_loss = t.final_loss;
    out.final_prior_logdensity = task.gmm.log_prior_density(&t.final_sample).unwrap_or(f64::NAN);
    if let (TaskKind::Classification { model_a, model_b }, Target::Class(k)) = (&task.kind, &out.target) {
        out.correct_a = model_a.predict(&t.final_sample).ok().map(|c| c == *k);
        out.correct_b = model_b.predict(&t.final_sample).ok().map(|c| c == *k);
    }
    out.final_sample = Some(t.final_sample.clone());
}

fn summarize(task: &Task, label: &str, outcomes: &[&RunOutcome]) -> SolverSummary {
    let ok: Vec<&RunOutcome> = outcomes.iter().copied().filter(|o| o.error.is_none()).collect();
    let runs = outcomes.len();
    let frac = |flag: fn(&RunOutcome) -> Option<bool>| {
        // Failed runs count as incorrect.
        outcomes.iter().filter(|o| flag(o) == Some(true)).count() as f64 / runs.max(1) as f64
    };
    let (consistency, accuracy_a) = match &task.kind {
        TaskKind::Classification { .. } => (frac(|o| o.correct_b), Some(frac(|o| o.correct_a))),
        TaskKind::Linear { y, .. } => {
            let m = y.len() as f64;
            let mses: Vec<f64> = ok.iter().map(|o| 2.0 * o.final_loss / m).collect();
            (mean(&mses), None)
        }
    };
    let field = |f: fn(&RunOutcome) -> f64| mean(&ok.iter().map(|o| f(o)).collect::<Vec<_>>());
    SolverSummary {
        label: label.to_string(),
        runs,
        failures: runs - ok.len(),
        divergence_rate: outcomes.iter().filter(|o| o.diverged).count() as f64 / runs.max(1) as f64,
        consistency,
        accuracy_a,
        mean_post_logdensity: field(|o| o.mean_post_logdensity),
        mean_post_logdensity_high: field(|o| o.mean_post_logdensity_high),
        mean_final_prior_logdensity: field(|o| o.final_prior_logdensity),
    }
}

/// Runs every entry for `runs` seeded runs derived from `master_seed`.
/// Individual failures are recorded in the outcomes, not propagated.
pub fn benchmark_solvers(task: &Task, entries: &[BenchEntry], master_seed: u64, runs: usize) -> Result<BenchmarkResults> {
    if entries.is_empty() {
        return Err(Error::Config("benchmark needs at least one solver entry".into()));
    }
    let op = task.operator()?;
    let jobs: Vec<(usize, usize)> = (0..entries.len()).flat_map(|e| (0..runs).map(move |r| (e, r))).collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(e, r)| run_one(task, &op, &entries[e], master_seed, r))
        .collect();
    let summaries = entries
        .iter()
        .map(|e| {
            let mine: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.label == e.label).collect();
            summarize(task, &e.label, &mine)
        })
        .collect();
    Ok(BenchmarkResults {
        master_seed,
        outcomes,
        summaries,
    })
}

/// Fraction of paired runs where `better` scores at least as well as
/// `baseline` under `score` (failed runs score as incorrect).
pub fn paired_no_worse(results: &BenchmarkResults, better: &str, baseline: &str, score: fn(&RunOutcome) -> Option<bool>) -> f64 {
    let a: Vec<&RunOutcome> = results.outcomes_for(better).collect();
    let b: Vec<&RunOutcome> = results.outcomes_for(baseline).collect();
    let n = a.len().min(b.len());
    if n == 0 {
        return f64::NAN;
    }
    let wins = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| score(x).unwrap_or(false) >= score(y).unwrap_or(false))
        .count();
    wins as f64 / n as f64
}

/// Paired fraction of runs where `better` has a strictly lower or equal
/// final loss than `baseline`.
pub fn paired_loss_no_worse(results: &BenchmarkResults, better: &str, baseline: &str) -> f64 {
    let a: Vec<&RunOutcome> = results.outcomes_for(better).collect();
    let b: Vec<&RunOutcome> = results.outcomes_for(baseline).collect();
    let n = a.len().min(b.len());
    let wins = a.iter().zip(&b).filter(|(x, y)| x.final_loss <= y.final_loss).count();
    wins as f64 / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitRow {
    pub tau: f64,
    pub label: String,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    pub rows: Vec<OverfitRow>,
    /// Fraction of runs where Model B is no worse at `tau = rows[i].tau`
    /// than at `tau = 0`; aligned with `rows`.
    pub no_worse_than_zero: Vec<f64>,
    pub results: BenchmarkResults,
}

/// Evaluates final samples of `base` under Models A and B for each `tau`.
/// The first entry of `taus` should be `0` to serve as the reference.
pub fn overfit_ablation(task: &Task, base: &SolverConfig, taus: &[f64], master_seed: u64, runs: usize) -> Result<OverfitReport> {
    if !matches!(task.kind, TaskKind::Classification { .. }) {
        return Err(Error::Config("overfit ablation needs a classification task".into()));
    }
    let entries: Vec<BenchEntry> = taus
        .iter()
        .map(|&tau| BenchEntry {
            label: format!("{}_tau{tau}", base.solver),
            config: SolverConfig {
                tau,
                ..base.clone()
            },
        })
        .collect();
    let results = benchmark_solvers(task, &entries, master_seed, runs)?;
    let rows: Vec<OverfitRow> = entries
        .iter()
        .zip(taus)
        .map(|(e, &tau)| {
            let s = results.summary(&e.label).expect("summary per entry");
            OverfitRow {
                tau,
                label: e.label.clone(),
                accuracy_a: s.accuracy_a.unwrap_or(f64::NAN),
                accuracy_b: s.consistency,
            }
        })
        .collect();
    let no_worse_than_zero = entries
        .iter()
        .map(|e| paired_no_worse(&results, &e.label, &entries[0].label, |o| o.correct_b))
        .collect();
    Ok(OverfitReport {
        rows,
        no_worse_than_zero,
        results,
    })
}

/// Mean exact-posterior log-density of recorded `x0t` per step index,
/// averaged over trajectories with compensated summation.
pub fn stepwise_mean_post_logdensity(trajectories: &[Trajectory]) -> Vec<f64> {
    let steps = trajectories.iter().map(|t| t.records.len()).min().unwrap_or(0);
    (0..steps)
        .map(|i| compensated_sum(trajectories.iter().map(|t| t.records[i].post_logdensity)) / trajectories.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{train_mlp, TrainConfig};
    use crate::point;
    use crate::rng::stream;
    use crate::solvers::{SolverKind, Approximation};
    use std::sync::OnceLock;

    fn toy() -> GaussianMixture {
        GaussianMixture::five_mode_toy()
    }

    fn classification_task() -> &'static Task {
        static T: OnceLock<Task> = OnceLock::new();
        T.get_or_init(|| {
            let gmm = toy();
            let model_a = train_mlp(&gmm, &TrainConfig::model_a(1)).unwrap();
            let model_b = train_mlp(&gmm, &TrainConfig::model_b(2)).unwrap();
            Task {
                gmm,
                schedule: NoiseSchedule::toy(),
                kind: TaskKind::Classification { model_a, model_b },
            }
        })
    }

    #[test]
    fn pf_ode_beats_posterior_mean_at_reference_point() {
        let g = toy();
        let s = NoiseSchedule::toy();
        let r = compare_approximations(&g, &s, &point(&[1.0, 0.4]), 1.0, default_noise_scale(1.0), 200, &mut stream(1, 0, "c")).unwrap();
        let pf = r.method(ApproxMethod::PfOde).log_densities[0];
        let pm = r.method(ApproxMethod::PosteriorMean).log_densities[0];
        assert!(pf > pm + 10f64.ln(), "pf {pf} pm {pm}");
        assert!(pf > r.method(ApproxMethod::MeanPlusNoise).median_log_density());
        assert!(pf > r.method(ApproxMethod::MeanPlusCov).median_log_density());
        assert_eq!(r.method(ApproxMethod::MeanPlusNoise).points.len(), 200);
    }

    #[test]
    fn approximations_converge_as_noise_vanishes() {
        let g = toy();
        let s = NoiseSchedule::toy();
        let sigma = 1e-6;
        let r = compare_approximations(&g, &s, &point(&[0.9, 1.05]), sigma, default_noise_scale(sigma), 101, &mut stream(2, 0, "c")).unwrap();
        let reference = r.method(ApproxMethod::PosteriorMean).log_densities[0];
        for m in ApproxMethod::ALL {
            let v = r.method(m).median_log_density();
            assert!((v / reference - 1.0).abs() < 0.1, "{m:?}: {v} vs {reference}");
        }
    }

    #[test]
    fn single_gaussian_mean_is_the_mode() {
        let g = GaussianMixture::new(vec![point(&[0.5, -0.5])], 0.3).unwrap();
        let s = NoiseSchedule::toy();
        let r = compare_approximations(&g, &s, &point(&[1.0, 1.0]), 0.8, 0.3, 100, &mut stream(3, 0, "c")).unwrap();
        let pm = r.method(ApproxMethod::PosteriorMean).log_densities[0];
        for m in ApproxMethod::ALL {
            for v in &r.method(m).log_densities {
                assert!(pm >= *v - 1e-9);
            }
        }
    }

    #[test]
    fn decision_map_small_grid_properties() {
        let g = toy();
        let s = NoiseSchedule::toy();
        let one = decision_map(&g, &s, 0.1, Grid { lo: 1.0, hi: 1.0, resolution: 1 }, BOUNDARY_BAND).unwrap();
        assert_eq!(one.agreement, 1.0);
        assert_eq!(one.grid.point(0), point(&[1.0, 1.0]));
        let grid = Grid { lo: -2.0, hi: 2.0, resolution: 41 };
        let lo = decision_map(&g, &s, 0.1, grid, BOUNDARY_BAND).unwrap();
        let hi = decision_map(&g, &s, 2.0, grid, BOUNDARY_BAND).unwrap();
        assert!(lo.agreement >= 0.99, "{}", lo.agreement);
        assert!(hi.agreement < lo.agreement);
        assert_eq!(lo.ode_mode.len(), 41 * 41);
        assert_eq!(lo, decision_map(&g, &s, 0.1, grid, BOUNDARY_BAND).unwrap());
        assert!(decision_map(&g, &s, 0.1, Grid { lo: 1.0, hi: 0.0, resolution: 3 }, 0.05).is_err());
    }

    #[test]
    fn bound_holds_on_toy_and_vanishes_at_small_noise() {
        let g = toy();
        let s = NoiseSchedule::toy();
        let r = check_density_bound(&g, &s, 1.0, 300, &mut stream(4, 0, "p")).unwrap();
        assert!(r.qualifying > 0);
        assert_eq!(r.violations, 0, "min margin {}", r.min_log_margin());
        let tiny = log_density_bound(0.2, 0.1, 2, 1.0, 0.002);
        assert!(tiny < -1e5);
    }

    #[test]
    fn bound_holds_in_eight_dimensions() {
        let g = GaussianMixture::random(8, 5, 1.0, 0.1, &mut stream(5, 0, "m")).unwrap();
        let s = NoiseSchedule::toy();
        let r = check_density_bound(&g, &s, 0.5, 200, &mut stream(5, 1, "p")).unwrap();
        assert!(r.qualifying > 0);
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn benchmark_is_deterministic_and_records_failures() {
        let task = classification_task();
        let entries = vec![
            BenchEntry {
                label: "dps".into(),
                config: SolverConfig { zeta: 0.3, ..SolverConfig::new(SolverKind::Dps) },
            },
            BenchEntry {
                label: "broken".into(),
                config: SolverConfig { zeta: 1e9, ..SolverConfig::new(SolverKind::Dps) },
            },
        ];
        let a = benchmark_solvers(task, &entries, 3, 6).unwrap();
        let b = benchmark_solvers(task, &entries, 3, 6).unwrap();
        // NaN fields of failed runs compare unequal, so compare renderings.
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let broken = a.summary("broken").unwrap();
        assert_eq!(broken.failures, 6);
        assert_eq!(broken.divergence_rate, 1.0);
        assert!(a.summary("dps").unwrap().consistency > 0.5);
        assert!(benchmark_solvers(task, &[], 3, 6).is_err());
    }

    #[test]
    fn zero_guidance_matches_unconditional_baseline() {
        let task = classification_task();
        let entries = vec![BenchEntry {
            label: "dps0".into(),
            config: SolverConfig { zeta: 0.0, ..SolverConfig::new(SolverKind::Dps) },
        }];
        let res = benchmark_solvers(task, &entries, 9, 4).unwrap();
        for o in &res.outcomes {
            let u = crate::dynamics::sample_unconditional(&task.gmm, &task.schedule, &mut crate::solvers::dynamics_stream(o.seed)).unwrap();
            assert_eq!(o.final_sample.as_ref().unwrap(), &u.final_sample);
        }
    }

    #[test]
    fn identical_models_give_equal_accuracies() {
        let base = classification_task();
        let TaskKind::Classification { model_a, .. } = &base.kind else { unreachable!() };
        let task = Task {
            kind: TaskKind::Classification {
                model_a: model_a.clone(),
                model_b: model_a.clone(),
            },
            ..base.clone()
        };
        let cfg = SolverConfig { zeta: 0.3, approx: Approximation::Consistency, ..SolverConfig::new(SolverKind::Proposed1) };
        let rep = overfit_ablation(&task, &cfg, &[0.0, 0.1], 1, 5).unwrap();
        for row in &rep.rows {
            assert_eq!(row.accuracy_a, row.accuracy_b);
        }
        assert_eq!(rep.no_worse_than_zero[0], 1.0);
    }

    #[test]
    fn linear_task_reports_mse() {
        let task = Task {
            gmm: toy(),
            schedule: NoiseSchedule::toy(),
            kind: TaskKind::Linear {
                matrix: Matrix::identity(2, 2),
                y: vec![1.0, 1.0],
            },
        };
        let entries = vec![BenchEntry {
            label: "dps".into(),
            config: SolverConfig { zeta: 0.2, ..SolverConfig::new(SolverKind::Dps) },
        }];
        let res = benchmark_solvers(&task, &entries, 0, 8).unwrap();
        let s = res.summary("dps").unwrap();
        assert!(s.accuracy_a.is_none());
        assert!(s.consistency < 0.05, "{}", s.consistency);
        assert!(overfit_ablation(&task, &entries[0].config, &[0.0], 0, 2).is_err());
    }
}
