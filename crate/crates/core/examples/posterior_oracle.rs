// Tweedie's first and second moments against the exact Gaussian-mixture
// posterior on the five-mode toy prior.

use dislab::mixture::GaussianMixture;
use dislab::point;

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let x_t = point(&[1.0, 0.4]);
    for sigma in [0.1, 0.5, 1.0, 2.0] {
        let post = gmm.exact_posterior(sigma, &x_t)?;
        let mean_gap = (gmm.tweedie_mean(sigma, &x_t)? - post.mean()).norm();
        let cov_gap = (gmm.tweedie_cov(sigma, &x_t)? - post.cov()).norm();
        println!(
            "sigma={sigma:<4} E[x0|x_t]=({:+.4}, {:+.4}) |mean gap|={mean_gap:.1e} |cov gap|_F={cov_gap:.1e} dominant mode={}",
            post.mean()[0],
            post.mean()[1],
            post.argmax_weight()
        );
        anyhow::ensure!(mean_gap <= 1e-8 * (1.0 + x_t.norm()) && cov_gap <= 1e-6);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
