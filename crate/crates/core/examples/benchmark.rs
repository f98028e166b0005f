// A small seeded benchmark of DPS against both proposed solvers on the
// toy classification task.

use dislab::analysis::{benchmark_solvers, BenchEntry, Task, TaskKind};
use dislab::mixture::GaussianMixture;
use dislab::operators::{train_mlp, TrainConfig};
use dislab::schedule::NoiseSchedule;
use dislab::solvers::{SolverConfig, SolverKind};

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let task = Task {
        kind: TaskKind::Classification {
            model_a: train_mlp(&gmm, &TrainConfig::model_a(1))?,
            model_b: train_mlp(&gmm, &TrainConfig::model_b(2))?,
        },
        gmm,
        schedule: NoiseSchedule::toy(),
    };
    let entry = |label: &str, kind, zeta| {
        let mut config = SolverConfig::new(kind);
        config.zeta = zeta;
        if kind == SolverKind::Proposed2 {
            config.k = 10;
            config.ts = vec![0.5];
        }
        BenchEntry {
            label: label.to_string(),
            config,
        }
    };
    let entries = [
        entry("dps", SolverKind::Dps, 0.3),
        entry("proposed1", SolverKind::Proposed1, 0.3),
        entry("proposed2", SolverKind::Proposed2, 2.0),
    ];
    let results = benchmark_solvers(&task, &entries, 0, 10)?;
    for s in &results.summaries {
        println!(
            "{:<10} model-B accuracy={:.2} model-A accuracy={:.2} mean log p(x0t|x_t)={:.2}",
            s.label,
            s.consistency,
            s.accuracy_a.unwrap_or(f64::NAN),
            s.mean_post_logdensity
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
