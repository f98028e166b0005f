// Classifier-guided inversion through the exact consistency map, with and
// without input smoothing of the guidance network.

use dislab::mixture::GaussianMixture;
use dislab::operators::{train_mlp, MeasurementOperator, Target, TrainConfig};
use dislab::schedule::NoiseSchedule;
use dislab::solvers::{solve, Problem, SolverConfig, SolverKind};

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let op = MeasurementOperator::classifier(train_mlp(&gmm, &TrainConfig::model_a(1))?);
    for class in 0..gmm.components() {
        let target = Target::Class(class);
        let problem = Problem::new(&gmm, &schedule, &op, &target)?;
        for tau in [0.0, 0.05] {
            let mut cfg = SolverConfig::new(SolverKind::Proposed2).with_seed(class as u64);
            cfg.zeta = 2.0;
            cfg.k = 10;
            cfg.ts = vec![0.5];
            cfg.tau = tau;
            let t = solve(&problem, &cfg)?;
            println!(
                "class {class} tau={tau:<4} final=({:+.3}, {:+.3}) lands on mode {}",
                t.final_sample[0],
                t.final_sample[1],
                gmm.nearest_mode(&t.final_sample)
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
