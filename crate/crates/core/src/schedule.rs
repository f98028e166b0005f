//! VE noise ladders and the forward/bridge kernels.
//!
//! Every schedule carries a time parametrization `sigma(t)` so that the
//! continuous rate `d sigma^2 / dt` is available for the PF-ODE velocity:
//!
//! - `karras`: `t` in `[0, 1]`, `sigma(t) = (smin^(1/rho) + t (smax^(1/rho) - smin^(1/rho)))^rho`
//! - `linear`: `t` in `[0, 1]`, `sigma(t) = smin + t (smax - smin)` (karras with `rho = 1`)
//! - `quadratic`: `sigma_t = t`, i.e. `sigma_t^2 = t^2`
//!
//! Levels are stored descending, `levels[0] = sigma_max`, `levels[T-1] = sigma_min`.

use serde::{Deserialize, Serialize};

use crate::rng::{normal_vector, Stream};
use crate::{Error, Point, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Karras,
    Quadratic,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub steps: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_sigma_min() -> f64 {
    DEFAULT_SIGMA_MIN
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, sigma_min: f64, sigma_max: f64, steps: usize, rho: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule requires 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        if steps < 2 {
            return Err(Error::Config(format!("schedule requires at least 2 steps, got {steps}")));
        }
        if kind == ScheduleKind::Karras && !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        let mut s = Self {
            kind,
            sigma_min,
            sigma_max,
            rho,
            levels: Vec::with_capacity(steps),
        };
        for i in 0..steps {
            let frac = i as f64 / (steps - 1) as f64;
            s.levels.push(s.sigma_at_time(s.time_at_fraction(1.0 - frac)));
        }
        s.levels[0] = sigma_max;
        s.levels[steps - 1] = sigma_min;
        if s.levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("schedule levels are not strictly decreasing".into()));
        }
        Ok(s)
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        Self::new(spec.kind, spec.sigma_min, spec.sigma_max, spec.steps, spec.rho)
    }

    pub fn to_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            steps: self.levels.len(),
            rho: self.rho,
        }
    }

    /// Karras ladder from `sigma_max = 4` down to 0.002 in 100 levels.
    pub fn toy() -> Self {
        Self::new(ScheduleKind::Karras, DEFAULT_SIGMA_MIN, 4.0, 100, DEFAULT_RHO).expect("valid")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of levels `T`.
    pub fn steps(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.levels[i]
    }

    pub fn sigma_sq(&self, i: usize) -> f64 {
        self.levels[i] * self.levels[i]
    }

    /// Level following step `i` on the way down; the last step goes to 0.
    pub fn next_sigma(&self, i: usize) -> f64 {
        self.levels.get(i + 1).copied().unwrap_or(0.0)
    }

    /// `(sigma_t, sigma_prev)` for each of the `T` reverse steps.
    pub fn reverse_pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.levels.len()).map(move |i| (self.levels[i], self.next_sigma(i)))
    }

    // For karras/linear: map a unit fraction to time, which is the identity.
    fn time_at_fraction(&self, u: f64) -> f64 {
        match self.kind {
            ScheduleKind::Karras | ScheduleKind::Linear => u,
            ScheduleKind::Quadratic => self.sigma_min + u * (self.sigma_max - self.sigma_min),
        }
    }

    /// `sigma(t)` of the schedule's time parametrization.
    pub fn sigma_at_time(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Karras => {
                let a = self.sigma_min.powf(1.0 / self.rho);
                let b = self.sigma_max.powf(1.0 / self.rho);
                (a + t * (b - a)).powf(self.rho)
            }
            ScheduleKind::Linear => self.sigma_min + t * (self.sigma_max - self.sigma_min),
            ScheduleKind::Quadratic => t,
        }
    }

    /// Inverse of [`Self::sigma_at_time`].
    pub fn time_of(&self, sigma: f64) -> f64 {
        match self.kind {
            ScheduleKind::Karras => {
                let a = self.sigma_min.powf(1.0 / self.rho);
                let b = self.sigma_max.powf(1.0 / self.rho);
                (sigma.powf(1.0 / self.rho) - a) / (b - a)
            }
            ScheduleKind::Linear => (sigma - self.sigma_min) / (self.sigma_max - self.sigma_min),
            ScheduleKind::Quadratic => sigma,
        }
    }

    /// Continuous `d sigma^2 / dt` at noise level `sigma`.
    pub fn sigma_sq_rate(&self, sigma: f64) -> f64 {
        let dsigma_dt = match self.kind {
            ScheduleKind::Karras => {
                let a = self.sigma_min.powf(1.0 / self.rho);
                let b = self.sigma_max.powf(1.0 / self.rho);
                self.rho * sigma.powf(1.0 - 1.0 / self.rho) * (b - a)
            }
            ScheduleKind::Linear => self.sigma_max - self.sigma_min,
            ScheduleKind::Quadratic => 1.0,
        };
        2.0 * sigma * dsigma_dt
    }

    /// Discrete `(sigma_i^2 - sigma_{i+1}^2) / dt` between adjacent levels.
    pub fn discrete_sigma_sq_rate(&self, i: usize) -> f64 {
        let (hi, lo) = (self.levels[i], self.levels[i + 1]);
        (hi * hi - lo * lo) / (self.time_of(hi) - self.time_of(lo))
    }
}

/// Forward VE perturbation `x0 + sigma_t * eps`.
pub fn forward_perturb(x0: &Point, sigma_t: f64, rng: &mut Stream) -> Point {
    x0 + normal_vector(rng, x0.len()) * sigma_t
}

/// One forward Markov step `q(x_t | x_prev) = N(x_prev, (sigma_t^2 - sigma_prev^2) I)`.
pub fn renoise(x_prev: &Point, sigma_prev: f64, sigma_t: f64, rng: &mut Stream) -> Result<Point> {
    if sigma_prev >= sigma_t {
        return Err(Error::Ordering { sigma_t, sigma_prev });
    }
    let std = (sigma_t * sigma_t - sigma_prev * sigma_prev).sqrt();
    Ok(x_prev + normal_vector(rng, x_prev.len()) * std)
}

/// Draw from the VE bridge `q(x_prev | x_t, x0)`.
pub fn bridge_sample(x_t: &Point, x0: &Point, sigma_t: f64, sigma_prev: f64, rng: &mut Stream) -> Result<Point> {
    Error::check_dim(x_t.len(), x0.len())?;
    if !(sigma_prev >= 0.0 && sigma_prev < sigma_t) {
        return Err(Error::Ordering { sigma_t, sigma_prev });
    }
    let t2 = sigma_t * sigma_t;
    let p2 = sigma_prev * sigma_prev;
    let mean = (x0 * (t2 - p2) + x_t * p2) / t2;
    if p2 == 0.0 {
        return Ok(mean);
    }
    let std = (p2 * (t2 - p2) / t2).sqrt();
    Ok(mean + normal_vector(rng, x_t.len()) * std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point;
    use crate::rng::stream;

    #[test]
    fn toy_ladder_endpoints() {
        let s = NoiseSchedule::toy();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.sigma(0), 4.0);
        assert_eq!(s.sigma(99), 0.002);
        assert!(s.levels().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn quadratic_two_steps() {
        let s = NoiseSchedule::new(ScheduleKind::Quadratic, 0.01, 1.0, 2, DEFAULT_RHO).unwrap();
        assert_eq!(s.levels(), &[1.0, 0.01]);
        assert!((s.sigma_sq_rate(0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn karras_rho_one_is_linear() {
        let k = NoiseSchedule::new(ScheduleKind::Karras, 0.1, 3.0, 17, 1.0).unwrap();
        let l = NoiseSchedule::new(ScheduleKind::Linear, 0.1, 3.0, 17, 1.0).unwrap();
        for (a, b) in k.levels().iter().zip(l.levels()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((k.sigma_sq_rate(1.3) - l.sigma_sq_rate(1.3)).abs() < 1e-12);
    }

    #[test]
    fn invalid_bounds_are_config_errors() {
        assert!(matches!(
            NoiseSchedule::new(ScheduleKind::Karras, 0.0, 1.0, 10, 7.0),
            Err(Error::Config(_))
        ));
        assert!(NoiseSchedule::new(ScheduleKind::Karras, 2.0, 1.0, 10, 7.0).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 0.1, 1.0, 1, 7.0).is_err());
    }

    #[test]
    fn rate_matches_time_derivative() {
        for kind in [ScheduleKind::Karras, ScheduleKind::Linear, ScheduleKind::Quadratic] {
            let s = NoiseSchedule::new(kind, 0.002, 4.0, 50, 7.0).unwrap();
            for sigma in [0.01, 0.3, 2.0] {
                let t = s.time_of(sigma);
                assert!((s.sigma_at_time(t) - sigma).abs() < 1e-12);
                let h = 1e-6;
                let fd = (s.sigma_at_time(t + h).powi(2) - s.sigma_at_time(t - h).powi(2)) / (2.0 * h);
                assert!((fd - s.sigma_sq_rate(sigma)).abs() < 1e-5 * fd.abs().max(1.0), "{kind:?}");
            }
            for i in 0..49 {
                assert!(s.discrete_sigma_sq_rate(i) > 0.0);
            }
        }
    }

    #[test]
    fn forward_perturb_basics() {
        let x0 = point(&[0.5, -1.0]);
        assert_eq!(forward_perturb(&x0, 0.0, &mut stream(1, 0, "f")), x0);
        let a = forward_perturb(&x0, 1.0, &mut stream(1, 0, "f"));
        let b = forward_perturb(&x0, 1.0, &mut stream(1, 0, "f"));
        assert_eq!(a, b);
    }

    #[test]
    fn forward_perturb_variance() {
        let mut rng = stream(2, 0, "var");
        let x0 = point(&[0.0]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| forward_perturb(&x0, 2.0, &mut rng)[0]).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((3.9..=4.1).contains(&v), "{v}");
    }

    #[test]
    fn bridge_limits() {
        let xt = point(&[2.0, -1.0]);
        let x0 = point(&[0.1, 0.3]);
        let mut rng = stream(4, 0, "b");
        assert_eq!(bridge_sample(&xt, &x0, 1.0, 0.0, &mut rng).unwrap(), x0);
        let near = bridge_sample(&xt, &x0, 1.0, 1.0 - 1e-9, &mut rng).unwrap();
        assert!((near - &xt).norm() < 1e-3);
        assert!(matches!(
            bridge_sample(&xt, &x0, 1.0, 1.0, &mut rng),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn bridge_reproduces_forward_marginal() {
        // x_t ~ N(x0, st^2), then bridge to sp: law must be N(x0, sp^2).
        let x0 = point(&[0.0]);
        let (st, sp) = (1.5, 0.7);
        let mut rng = stream(9, 0, "law");
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let xt = forward_perturb(&x0, st, &mut rng);
                bridge_sample(&xt, &x0, st, sp, &mut rng).unwrap()[0]
            })
            .collect();
        let v = draws.iter().map(|d| d * d).sum::<f64>() / n as f64;
        assert!((v / (sp * sp) - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn bridging_down_the_ladder_reaches_lowest_level() {
        let s = NoiseSchedule::new(ScheduleKind::Karras, 0.05, 2.0, 20, 7.0).unwrap();
        let x0 = point(&[0.0]);
        let mut rng = stream(10, 0, "ladder");
        let n = 100_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let mut x = forward_perturb(&x0, s.sigma(0), &mut rng);
            for i in 0..s.steps() - 1 {
                x = bridge_sample(&x, &x0, s.sigma(i), s.sigma(i + 1), &mut rng).unwrap();
            }
            sq += x[0] * x[0];
        }
        let v = sq / n as f64;
        let target = s.sigma_min() * s.sigma_min();
        assert!((v / target - 1.0).abs() < 0.02, "{v} vs {target}");
    }

    #[test]
    fn renoise_requires_increasing_level() {
        let x = point(&[0.0]);
        let mut rng = stream(1, 0, "r");
        assert!(renoise(&x, 1.0, 0.5, &mut rng).is_err());
        assert!(renoise(&x, 0.5, 1.0, &mut rng).is_ok());
    }
}
