//! Self-check suite run by `dislab verify`.
//!
//! Each check reports a measured error against its tolerance. The optional
//! score corruption rescales the analytic score used by the score-based
//! checks, which must then fail.

use rand::Rng;

use crate::analysis::check_density_bound;
use crate::dynamics::{solve_pf_ode, velocity, ConsistencyFunction, Integrator};
use crate::mixture::GaussianMixture;
use crate::numeric::chi_square_uniform;
use crate::operators::{MeasurementOperator, MlpNetwork, Target};
use crate::rng::{normal_vector, stream};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::{point, Point, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    /// Multiplies the score by `1 + corrupt_score` inside score-based checks.
    pub corrupt_score: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_most(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Self {
            name,
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }

    fn at_least(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Self {
            name,
            measured,
            tolerance,
            passed: measured >= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per check: status, name, measured value and tolerance.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<28} measured={:.3e} tolerance={:.3e}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance
            ));
        }
        out
    }
}

fn fd_gradient(f: impl Fn(&Point) -> f64, x: &Point, h: f64) -> Point {
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

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let scale = 1.0 + opts.corrupt_score;
    let score = |sigma: f64, x: &Point| gmm.score(sigma, x).map(|s| s * scale);
    let mut rng = stream(opts.seed, 0, "verify");
    let mut checks = Vec::new();

    let mut cases = Vec::with_capacity(200);
    for _ in 0..200 {
        let sigma = 0.01 + 3.0 * rng.random::<f64>();
        cases.push((sigma, normal_vector(&mut rng, 2) * 2.0));
    }

    let mut mean_err: f64 = 0.0;
    let mut cov_err: f64 = 0.0;
    for (sigma, x) in &cases {
        let post = gmm.exact_posterior(*sigma, x)?;
        let tweedie = x + score(*sigma, x)? * (sigma * sigma);
        mean_err = mean_err.max((tweedie - post.mean()).norm() / (1.0 + x.norm()));
        cov_err = cov_err.max((gmm.tweedie_cov(*sigma, x)? - post.cov()).norm());
    }
    checks.push(CheckResult::at_most("tweedie_mean_oracle", mean_err, 1e-8));
    checks.push(CheckResult::at_most("tweedie_cov_oracle", cov_err, 1e-6));

    let mut score_err: f64 = 0.0;
    for (sigma, x) in cases.iter().take(50) {
        let fd = fd_gradient(|p| gmm.log_marginal_density(*sigma, p).unwrap_or(f64::NAN), x, 1e-6 * (1.0 + sigma));
        let s = score(*sigma, x)?;
        score_err = score_err.max((&s - &fd).norm() / s.norm().max(1.0));
    }
    checks.push(CheckResult::at_most("score_finite_difference", score_err, 1e-5));

    let mut identity_err: f64 = 0.0;
    for (sigma, x) in &cases {
        let v = velocity(&gmm, &schedule, *sigma, x)?;
        let rate = schedule.sigma_sq_rate(*sigma);
        let from_score = score(*sigma, x)? * (-0.5 * rate);
        identity_err = identity_err.max((&v - from_score).norm() / (1.0 + v.norm()));
    }
    checks.push(CheckResult::at_most("velocity_score_identity", identity_err, 1e-10));

    let single = GaussianMixture::new(vec![point(&[0.3])], 0.2)?;
    let quad = NoiseSchedule::new(ScheduleKind::Quadratic, 1e-4, 2.0, 10, 7.0)?;
    let mut flow_err: f64 = 0.0;
    for _ in 0..20 {
        let x = point(&[4.0 * rng.random::<f64>() - 2.0]);
        let t = 2.0;
        let got = solve_pf_ode(&single, t, quad.sigma_min(), &x, 400, Integrator::Heun)?;
        let s2 = 0.04;
        let exact = 0.3 + (x[0] - 0.3) * (s2 / (s2 + t * t)).sqrt();
        flow_err = flow_err.max((got[0] - exact).abs());
    }
    checks.push(CheckResult::at_most("pf_ode_closed_form", flow_err, 1e-4));

    let cf = ConsistencyFunction::for_schedule(&gmm, &schedule);
    let mut jac_err: f64 = 0.0;
    for (sigma, x) in cases.iter().take(10) {
        let sens = cf.jacobian(*sigma, x)?;
        for i in 0..2 {
            let h = 1e-5;
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let col = (cf.apply(*sigma, &a)? - cf.apply(*sigma, &b)?) / (2.0 * h);
            let scale = sens.jacobian.norm().max(1.0);
            jac_err = jac_err.max((sens.jacobian.column(i) - col).norm() / scale);
        }
    }
    checks.push(CheckResult::at_most("consistency_jacobian", jac_err, 1e-4));

    let net = MlpNetwork::new(&[2, 16, 5], &mut stream(opts.seed, 1, "verify-mlp"))?;
    let op = MeasurementOperator::classifier(net);
    let mut mlp_err: f64 = 0.0;
    for k in 0..20 {
        let x = normal_vector(&mut rng, 2);
        let y = Target::Class(k % 5);
        let (_, g) = op.loss_and_grad(&x, &y)?;
        let fd = fd_gradient(|p| op.loss_and_grad(p, &y).map(|r| r.0).unwrap_or(f64::NAN), &x, 1e-5);
        mlp_err = mlp_err.max((&g - &fd).norm() / g.norm().max(fd.norm()).max(1e-6));
    }
    checks.push(CheckResult::at_most("mlp_backprop", mlp_err, 1e-5));

    let bound = check_density_bound(&gmm, &schedule, 1.0, 300, &mut stream(opts.seed, 2, "verify-bound"))?;
    checks.push(CheckResult::at_most("density_lower_bound", bound.violations as f64, 0.0));

    let mut counts = [0usize; 5];
    let mut push_rng = stream(opts.seed, 3, "verify-push");
    for _ in 0..2000 {
        let x = normal_vector(&mut push_rng, 2) * schedule.sigma_max();
        counts[gmm.nearest_mode(&cf.apply(schedule.sigma_max(), &x)?)] += 1;
    }
    checks.push(CheckResult::at_least("marginal_preservation_p", chi_square_uniform(&counts).1, 0.01));

    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_every_check() {
        let r = run_verify(&VerifyOptions::default()).unwrap();
        assert!(r.all_passed(), "{}", r.render());
        assert_eq!(r.checks.len(), 9);
        assert_eq!(r.render().lines().count(), 9);
    }

    #[test]
    fn corrupted_score_fails() {
        let r = run_verify(&VerifyOptions {
            corrupt_score: 0.01,
            seed: 0,
        })
        .unwrap();
        assert!(!r.all_passed());
        let failed: Vec<_> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert!(failed.contains(&"tweedie_mean_oracle"), "{failed:?}");
        assert!(failed.contains(&"velocity_score_identity"));
    }
}
