// Drives an experiment from a JSON document and lists the emitted CSVs.

use dislab::cli::{cmd_solve, ExperimentConfig};

const CONFIG: &str = r#"{
    "operator": {"kind": "linear", "matrix": [[1.0, 0.0]]},
    "target": {"vector": [-1.0]},
    "solvers": [{"solver": "dps", "zeta": 0.2}, {"solver": "cm"}],
    "seeds": {"master": 11, "runs": 2}
}"#;

pub fn run_example() -> anyhow::Result<()> {
    let cfg = ExperimentConfig::from_json(CONFIG)?;
    println!("config sha256 {}", cfg.hash());
    let dir = tempfile::tempdir()?;
    for f in cmd_solve(&cfg, dir.path())? {
        let text = std::fs::read_to_string(&f)?;
        println!("{} ({} lines)", f.file_name().unwrap().to_string_lossy(), text.lines().count());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
