// Every guided solver on a linear measurement of the first coordinate.

use dislab::mixture::GaussianMixture;
use dislab::operators::{MeasurementOperator, Target};
use dislab::schedule::NoiseSchedule;
use dislab::solvers::{solve, Problem, SolverConfig, SolverKind};

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let op = MeasurementOperator::first_coordinate(2);
    let target = Target::Vector(vec![1.0]);
    let problem = Problem::new(&gmm, &schedule, &op, &target)?;

    for kind in SolverKind::ALL {
        let mut cfg = SolverConfig::new(kind).with_seed(3);
        cfg.zeta = match kind {
            SolverKind::Proposed2 => 2.0,
            SolverKind::Mpgd => 0.5,
            _ => 0.2,
        };
        if kind == SolverKind::Proposed2 {
            cfg.k = 10;
            cfg.ts = vec![0.5];
        }
        let t = solve(&problem, &cfg)?;
        println!(
            "{:<10} final=({:+.3}, {:+.3}) loss={:.2e} evaluations={}",
            kind.name(),
            t.final_sample[0],
            t.final_sample[1],
            t.final_loss,
            t.evaluations
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
