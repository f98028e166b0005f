// Where the probability-flow ODE sends each point of a grid, compared with
// the Voronoi cells of the prior means.

use dislab::analysis::{decision_map, Grid, BOUNDARY_BAND};
use dislab::mixture::GaussianMixture;
use dislab::schedule::NoiseSchedule;

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let grid = Grid {
        lo: -2.0,
        hi: 2.0,
        resolution: 41,
    };
    for sigma in [0.1, 0.5, 1.0, 2.0] {
        let m = decision_map(&gmm, &schedule, sigma, grid, BOUNDARY_BAND)?;
        println!("sigma_t={sigma:<4} agreement={:.4} over {} cells", m.agreement, m.counted);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
