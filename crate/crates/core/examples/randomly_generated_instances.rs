//! Seeded random workload, exported as CSV tables.

use spotsim::report::{self, Format};
use spotsim::scenario::{run_scenario, Overrides, RunOptions, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(42);
    let cfg = ScenarioConfig::load("bundled:randomly-generated")?;
    let run = run_scenario(&cfg, Overrides { seed: Some(seed), ..Default::default() }, RunOptions::default())?;

    let out = std::env::temp_dir().join(format!("spotsim-random-{seed}"));
    for path in report::export(&run.report, Format::Csv, &out)? {
        println!("wrote {}", path.display());
    }
    println!("{}", report::to_csv(&run.report, "spot")?);
    let s = &run.report.summary;
    println!("spot VMs: {}, interruptions: {}, terminated: {}", s.spot_vms, s.total_interruptions, s.terminated);
    Ok(())
}
