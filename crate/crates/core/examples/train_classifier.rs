// Trains the guidance network (Model A) and the independent evaluator
// (Model B) on nearest-mode labels and round-trips one through JSON.

use dislab::mixture::GaussianMixture;
use dislab::operators::{accuracy, train_mlp, MlpNetwork, TrainConfig};
use dislab::rng::stream;

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let model_a = train_mlp(&gmm, &TrainConfig::model_a(1))?;
    let model_b = train_mlp(&gmm, &TrainConfig::model_b(2))?;
    let mut rng = stream(99, 0, "held-out");
    let test: Vec<_> = (0..1000).map(|_| gmm.sample_prior(&mut rng)).collect();
    let (acc_a, acc_b) = (accuracy(&model_a, &gmm, &test)?, accuracy(&model_b, &gmm, &test)?);
    println!("model A {:?}: {acc_a:.3}", model_a.layer_sizes());
    println!("model B {:?}: {acc_b:.3}", model_b.layer_sizes());
    anyhow::ensure!(acc_a >= 0.95 && acc_b >= 0.95);

    let restored = MlpNetwork::from_json(&model_a.to_json()?)?;
    anyhow::ensure!(restored == model_a);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
