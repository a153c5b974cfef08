//! All three policies on identical workloads, several seeds.

use spotsim::allocation::PolicyKind;
use spotsim::scenario::{compare_policies, comparison_csv, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ScenarioConfig::load("bundled:comparison")?;
    cfg.scale = 0.1;
    let rows = compare_policies(&cfg, &PolicyKind::ALL, &[1, 2, 3])?;
    print!("{}", comparison_csv(&rows)?);
    Ok(())
}
