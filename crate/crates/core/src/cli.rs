//! Experiment configuration, orchestration and artifact emission behind the
//! `dislab` binary.
//!
//! Every CSV starts with `#`-prefixed metadata lines carrying the command,
//! the SHA-256 of the canonical configuration and the master seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    benchmark_solvers, compare_approximations, decision_map, default_noise_scale, overfit_ablation, BenchEntry,
    BenchmarkResults, DecisionMap, Grid, OverfitReport, Task, TaskKind, BOUNDARY_BAND,
};
use crate::mixture::{GaussianMixture, MixtureSpec};
use crate::operators::{train_mlp, Distance, MeasurementOperator, OperatorKind, Target, TrainConfig};
use crate::plot::{decision_panels, heatmap_with_points, Overlay};
use crate::rng::{derive_seed, stream};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::solvers::{solve, Problem, SolverConfig, SolverKind, Trajectory};
use crate::verify::{run_verify, VerifyOptions, VerifyReport};
use crate::{point, Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Linear {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        tau: f64,
    },
    Mlp {
        #[serde(default = "default_model_a")]
        train: TrainConfig,
        /// Independent network used only to score consistency.
        #[serde(default = "default_model_b")]
        evaluator: TrainConfig,
        #[serde(default)]
        tau: f64,
    },
}

fn default_model_a() -> TrainConfig {
    TrainConfig::model_a(1)
}

fn default_model_b() -> TrainConfig {
    TrainConfig::model_b(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    #[serde(default)]
    pub master: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_runs() -> usize {
    10
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            master: 0,
            runs: default_runs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Smoothing levels for the overfitting ablation; the first is the reference.
    #[serde(default = "default_taus")]
    pub overfit_taus: Vec<f64>,
}

fn default_taus() -> Vec<f64> {
    vec![0.0, 0.05]
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            overfit_taus: default_taus(),
        }
    }
}

/// One experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_prior")]
    pub prior: MixtureSpec,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSpec,
    pub operator: OperatorSpec,
    /// Fixed measurement. Classification runs cycle through the classes when absent.
    #[serde(default)]
    pub target: Option<Target>,
    pub solvers: Vec<SolverConfig>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_prior() -> MixtureSpec {
    GaussianMixture::five_mode_toy().to_spec()
}

fn default_schedule() -> ScheduleSpec {
    NoiseSchedule::toy().to_spec()
}

impl ExperimentConfig {
    /// Parses and fully validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let gmm = GaussianMixture::from_spec(&self.prior).map_err(|e| Error::Config(e.to_string()))?;
        let schedule = NoiseSchedule::from_spec(&self.schedule)?;
        if self.solvers.is_empty() {
            return Err(Error::Config("at least one solver is required".into()));
        }
        if self.seeds.runs == 0 {
            return Err(Error::Config("seeds.runs must be >= 1".into()));
        }
        for s in &self.solvers {
            s.validate(&schedule)?;
        }
        if self.analysis.overfit_taus.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Config("overfit_taus must be finite and >= 0".into()));
        }
        match &self.operator {
            OperatorSpec::Linear { matrix, tau } => {
                let op = linear_operator(matrix, *tau)?;
                if op.input_dim() != gmm.dim() {
                    return Err(Error::Config(format!(
                        "operator expects dimension {}, prior has {}",
                        op.input_dim(),
                        gmm.dim()
                    )));
                }
                match &self.target {
                    Some(Target::Vector(v)) if v.len() == op.output_dim() => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "linear operator needs a vector target of length {}",
                            op.output_dim()
                        )))
                    }
                }
            }
            OperatorSpec::Mlp { tau, train, evaluator } => {
                if !(*tau >= 0.0 && tau.is_finite()) {
                    return Err(Error::Config("operator tau must be finite and >= 0".into()));
                }
                for t in [train, evaluator] {
                    if t.samples < 10 * gmm.components() || t.epochs == 0 || t.batch_size == 0 || !(t.lr > 0.0) {
                        return Err(Error::Config(format!("invalid training parameters {t:?}")));
                    }
                }
                match &self.target {
                    None => {}
                    Some(Target::Class(k)) if *k < gmm.components() => {}
                    Some(t) => return Err(Error::Config(format!("invalid classification target {t:?}"))),
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (defaults filled in) JSON rendering.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_string(self).expect("config serializes"))
    }
}

fn linear_operator(matrix: &[Vec<f64>], tau: f64) -> Result<MeasurementOperator> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || matrix.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("operator matrix must be non-empty and rectangular".into()));
    }
    let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
    MeasurementOperator::new(OperatorKind::Linear(Matrix::from_row_slice(rows, cols, &flat)), Distance::Mse, tau)
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Metadata written as `#` lines at the top of every CSV.
#[derive(Debug, Clone)]
pub struct Meta {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

/// Writes a CSV with metadata lines, a header row and `rows`.
pub fn write_csv(path: &Path, meta: &Meta, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = format!(
        "# dislab {}\n# config_sha256: {}\n# seed: {}\n",
        meta.command, meta.config_hash, meta.seed
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Runs `f` on a dedicated pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Reference point and level for the posterior-validity figure.
pub const DEMO_POINT: [f64; 2] = [1.0, 0.4];
pub const DEMO_SIGMA: f64 = 1.0;
/// Noise levels of the decision-map panels.
pub const DEMO_LEVELS: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

/// Built-in toy demonstration: posterior heatmap with approximation scatter
/// and PF-ODE decision maps. Returns the written paths.
pub fn cmd_toy_demo(seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let description = serde_json::json!({
        "command": "toy-demo",
        "prior": gmm.to_spec(),
        "schedule": schedule.to_spec(),
        "point": DEMO_POINT,
        "sigma_t": DEMO_SIGMA,
        "levels": DEMO_LEVELS,
        "grid": Grid::default(),
        "band": BOUNDARY_BAND,
    });
    let meta = Meta {
        command: "toy-demo",
        config_hash: sha256_hex(&description.to_string()),
        seed,
    };
    let mut written = Vec::new();

    let x_t = point(&DEMO_POINT);
    let post = gmm.exact_posterior(DEMO_SIGMA, &x_t)?;
    let heat_grid = Grid {
        lo: -2.0,
        hi: 2.0,
        resolution: 101,
    };
    let heat: Vec<f64> = (0..heat_grid.cells())
        .map(|i| post.log_density(&heat_grid.point(i)))
        .collect::<Result<_>>()?;
    let path = out.join("posterior_heatmap.csv");
    let rows: Vec<Vec<String>> = heat
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let p = heat_grid.point(i);
            vec![fmt(p[0]), fmt(p[1]), fmt(*v)]
        })
        .collect();
    write_csv(&path, &meta, &strings(&["x", "y", "post_logdensity"]), &rows)?;
    written.push(path);

    let mut rng = stream(seed, 0, "toy-demo");
    let report = compare_approximations(&gmm, &schedule, &x_t, DEMO_SIGMA, default_noise_scale(DEMO_SIGMA), 50, &mut rng)?;
    let path = out.join("approximations.csv");
    let mut rows = Vec::new();
    for m in &report.methods {
        for (i, p) in m.points.iter().enumerate() {
            rows.push(vec![
                m.method.name().to_string(),
                i.to_string(),
                fmt(p[0]),
                fmt(p[1]),
                fmt(m.log_densities[i]),
                fmt(m.prior_log_densities[i]),
            ]);
        }
    }
    write_csv(
        &path,
        &meta,
        &strings(&["method", "index", "x", "y", "post_logdensity", "prior_logdensity"]),
        &rows,
    )?;
    written.push(path);

    let overlays: Vec<Overlay> = report
        .methods
        .iter()
        .map(|m| Overlay {
            label: m.method.name(),
            points: &m.points,
        })
        .collect();
    let svg = heatmap_with_points(
        "exact posterior log-density at x_t = (1, 0.4), sigma_t = 1",
        &heat_grid,
        &heat,
        &overlays,
    );
    let path = out.join("posterior.svg");
    fs::write(&path, svg)?;
    written.push(path);

    let maps: Vec<DecisionMap> = DEMO_LEVELS
        .iter()
        .map(|&s| decision_map(&gmm, &schedule, s, Grid::default(), BOUNDARY_BAND))
        .collect::<Result<_>>()?;
    let path = out.join("decision_maps.csv");
    let mut rows = Vec::new();
    for m in &maps {
        for i in 0..m.grid.cells() {
            let p = m.grid.point(i);
            rows.push(vec![
                fmt(m.sigma_t),
                fmt(p[0]),
                fmt(p[1]),
                m.ode_mode[i].map_or_else(|| "failed".to_string(), |k| k.to_string()),
                m.voronoi_mode[i].to_string(),
                u8::from(m.in_band[i]).to_string(),
            ]);
        }
    }
    write_csv(
        &path,
        &meta,
        &strings(&["sigma_t", "x", "y", "ode_mode", "voronoi_mode", "in_band"]),
        &rows,
    )?;
    written.push(path);

    let path = out.join("decision_agreement.csv");
    let rows: Vec<Vec<String>> = maps
        .iter()
        .map(|m| vec![fmt(m.sigma_t), fmt(m.agreement), m.counted.to_string()])
        .collect();
    write_csv(&path, &meta, &strings(&["sigma_t", "agreement", "counted"]), &rows)?;
    written.push(path);

    let path = out.join("decision_maps.svg");
    fs::write(&path, decision_panels(&maps))?;
    written.push(path);
    Ok(written)
}

/// Prior, schedule, operator and evaluation network built from a config.
pub struct Setup {
    pub gmm: GaussianMixture,
    pub schedule: NoiseSchedule,
    pub task: Task,
    pub operator: MeasurementOperator,
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let gmm = GaussianMixture::from_spec(&cfg.prior)?;
    let schedule = NoiseSchedule::from_spec(&cfg.schedule)?;
    let (kind, operator) = match &cfg.operator {
        OperatorSpec::Linear { matrix, tau } => {
            let op = linear_operator(matrix, *tau)?;
            let Some(Target::Vector(y)) = &cfg.target else {
                return Err(Error::Config("linear operator needs a vector target".into()));
            };
            let kind = TaskKind::Linear {
                matrix: match op.kind() {
                    OperatorKind::Linear(a) => a.clone(),
                    OperatorKind::Mlp(_) => unreachable!("linear spec"),
                },
                y: y.clone(),
            };
            (kind, op)
        }
        OperatorSpec::Mlp { train, evaluator, tau } => {
            let model_a = train_mlp(&gmm, train)?;
            let model_b = train_mlp(&gmm, evaluator)?;
            let op = MeasurementOperator::classifier(model_a.clone()).with_smoothing(*tau)?;
            (TaskKind::Classification { model_a, model_b }, op)
        }
    };
    let task = Task {
        gmm: gmm.clone(),
        schedule: schedule.clone(),
        kind,
    };
    Ok(Setup {
        gmm,
        schedule,
        task,
        operator,
    })
}

fn run_target(cfg: &ExperimentConfig, setup: &Setup, run: usize) -> Target {
    cfg.target.clone().unwrap_or_else(|| setup.task.target(run))
}

fn trajectory_rows(t: &Trajectory) -> (Vec<String>, Vec<Vec<String>>) {
    let d = t.final_sample.len();
    let mut header = strings(&["step", "sigma_t"]);
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend((1..=d).map(|i| format!("x0t_{i}")));
    header.extend(strings(&["loss", "post_logdensity", "prior_logdensity"]));
    let rows = t
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![i.to_string(), fmt(r.sigma)];
            row.extend(r.x_t.iter().map(|v| fmt(*v)));
            row.extend(r.x0t.iter().map(|v| fmt(*v)));
            row.extend([fmt(r.loss), fmt(r.post_logdensity), fmt(r.prior_logdensity)]);
            row
        })
        .collect();
    (header, rows)
}

/// Unique labels for the configured solvers (`dps`, `dps_2`, ...).
pub fn solver_labels(solvers: &[SolverConfig]) -> Vec<String> {
    let mut labels = Vec::with_capacity(solvers.len());
    for (i, s) in solvers.iter().enumerate() {
        let n = solvers[..i].iter().filter(|o| o.solver == s.solver).count();
        labels.push(if n == 0 {
            s.solver.name().to_string()
        } else {
            format!("{}_{}", s.solver, n + 1)
        });
    }
    labels
}

/// Runs every configured solver for every seeded run and writes one
/// trajectory CSV per run plus a summary. Divergences are reported after all
/// files are written.
pub fn cmd_solve(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let setup = build_setup(cfg)?;
    let meta = Meta {
        command: "solve",
        config_hash: cfg.hash(),
        seed: cfg.seeds.master,
    };
    let labels = solver_labels(&cfg.solvers);
    let jobs: Vec<(usize, usize)> = (0..cfg.solvers.len())
        .flat_map(|s| (0..cfg.seeds.runs).map(move |r| (s, r)))
        .collect();
    let results: Vec<Result<Trajectory>> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let target = run_target(cfg, &setup, r);
            let problem = Problem::new(&setup.gmm, &setup.schedule, &setup.operator, &target)?;
            let sc = SolverConfig {
                seed: derive_seed(cfg.seeds.master, r as u64),
                ..cfg.solvers[s].clone()
            };
            solve(&problem, &sc)
        })
        .collect();
    let mut written = Vec::new();
    let mut summary = Vec::new();
    let mut divergence = None;
    for (&(s, r), res) in jobs.iter().zip(&results) {
        let seed = derive_seed(cfg.seeds.master, r as u64);
        match res {
            Ok(t) => {
                let (header, rows) = trajectory_rows(t);
                let path = out.join(format!("{}_run{r:03}.csv", labels[s]));
                write_csv(&path, &meta, &header, &rows)?;
                written.push(path);
                let mut row = vec![labels[s].clone(), r.to_string(), seed.to_string()];
                row.extend(t.final_sample.iter().map(|v| fmt(*v)));
                row.extend([fmt(t.final_loss), t.evaluations.to_string(), String::new()]);
                summary.push(row);
            }
            Err(e) => {
                if let (None, Error::Divergence { solver, step }) = (&divergence, e) {
                    divergence = Some((solver.clone(), *step));
                }
                let mut row = vec![labels[s].clone(), r.to_string(), seed.to_string()];
                row.extend((0..setup.gmm.dim()).map(|_| String::new()));
                row.extend([String::new(), String::new(), e.to_string()]);
                summary.push(row);
            }
        }
    }
    let mut header = strings(&["solver", "run", "seed"]);
    header.extend((1..=setup.gmm.dim()).map(|i| format!("final_{i}")));
    header.extend(strings(&["final_loss", "evaluations", "error"]));
    let path = out.join("solve_summary.csv");
    write_csv(&path, &meta, &header, &summary)?;
    written.push(path);
    if let Some((solver, step)) = divergence {
        return Err(Error::Divergence { solver, step });
    }
    if let Some(Err(e)) = results.into_iter().find(|r| r.is_err()) {
        return Err(e);
    }
    Ok(written)
}

/// Benchmark and overfitting ablation outputs.
pub struct BenchOutput {
    pub files: Vec<PathBuf>,
    pub results: BenchmarkResults,
    pub ablations: Vec<OverfitReport>,
}

pub fn cmd_bench(cfg: &ExperimentConfig, out: &Path) -> Result<BenchOutput> {
    if cfg.solvers.len() < 2 {
        return Err(Error::Config("bench needs at least two solvers".into()));
    }
    fs::create_dir_all(out)?;
    let setup = build_setup(cfg)?;
    let meta = Meta {
        command: "bench",
        config_hash: cfg.hash(),
        seed: cfg.seeds.master,
    };
    let labels = solver_labels(&cfg.solvers);
    let entries: Vec<BenchEntry> = labels
        .iter()
        .zip(&cfg.solvers)
        .map(|(l, c)| BenchEntry {
            label: l.clone(),
            config: c.clone(),
        })
        .collect();
    let results = benchmark_solvers(&setup.task, &entries, cfg.seeds.master, cfg.seeds.runs)?;
    let mut files = Vec::new();

    let header = strings(&[
        "solver",
        "runs",
        "failures",
        "divergence_rate",
        "consistency",
        "accuracy_a",
        "mean_post_logdensity",
        "mean_post_logdensity_high_noise",
        "mean_final_prior_logdensity",
    ]);
    let rows: Vec<Vec<String>> = results
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.label.clone(),
                s.runs.to_string(),
                s.failures.to_string(),
                fmt(s.divergence_rate),
                fmt(s.consistency),
                s.accuracy_a.map(fmt).unwrap_or_default(),
                fmt(s.mean_post_logdensity),
                fmt(s.mean_post_logdensity_high),
                fmt(s.mean_final_prior_logdensity),
            ]
        })
        .collect();
    let path = out.join("bench_summary.csv");
    write_csv(&path, &meta, &header, &rows)?;
    files.push(path);

    let run_header = strings(&[
        "solver",
        "run",
        "seed",
        "final_loss",
        "correct_a",
        "correct_b",
        "mean_post_logdensity",
        "failures",
    ]);
    let flag = |b: Option<bool>| b.map(|v| u8::from(v).to_string()).unwrap_or_default();
    let run_rows: Vec<Vec<String>> = results
        .outcomes
        .iter()
        .map(|o| {
            vec![
                o.label.clone(),
                o.run.to_string(),
                o.seed.to_string(),
                fmt(o.final_loss),
                flag(o.correct_a),
                flag(o.correct_b),
                fmt(o.mean_post_logdensity),
                o.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let path = out.join("bench_runs.csv");
    write_csv(&path, &meta, &run_header, &run_rows)?;
    files.push(path);

    let mut ablations = Vec::new();
    if matches!(setup.task.kind, TaskKind::Classification { .. }) {
        let mut rows = Vec::new();
        for c in cfg
            .solvers
            .iter()
            .filter(|c| matches!(c.solver, SolverKind::Proposed1 | SolverKind::Proposed2))
        {
            let rep = overfit_ablation(&setup.task, c, &cfg.analysis.overfit_taus, cfg.seeds.master, cfg.seeds.runs)?;
            for (row, frac) in rep.rows.iter().zip(&rep.no_worse_than_zero) {
                rows.push(vec![
                    row.label.clone(),
                    fmt(row.tau),
                    fmt(row.accuracy_a),
                    fmt(row.accuracy_b),
                    fmt(*frac),
                ]);
            }
            ablations.push(rep);
        }
        let path = out.join("overfit.csv");
        write_csv(
            &path,
            &meta,
            &strings(&["entry", "tau", "accuracy_a", "accuracy_b", "b_no_worse_than_tau0"]),
            &rows,
        )?;
        files.push(path);
    }

    let mut md = String::from(
        "| solver | runs | failures | consistency | accuracy A | mean post log-density | same, sigma_t > prior sigma |\n",
    );
    md.push_str("|---|---|---|---|---|---|---|\n");
    for s in &results.summaries {
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} | {} | {:.4} | {:.4} |\n",
            s.label,
            s.runs,
            s.failures,
            s.consistency,
            s.accuracy_a.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            s.mean_post_logdensity,
            s.mean_post_logdensity_high
        ));
    }
    let path = out.join("bench_summary.md");
    fs::write(&path, md)?;
    files.push(path);
    Ok(BenchOutput {
        files,
        results,
        ablations,
    })
}

pub fn cmd_verify(corrupt_score: f64, seed: u64) -> Result<VerifyReport> {
    run_verify(&VerifyOptions { corrupt_score, seed })
}
