//! A best-fit policy plugged into the simulator: the candidate left with
//! the fewest free PEs wins.

use spotsim::allocation::{HostSnapshot, Selection, VmAllocationPolicy};
use spotsim::cloud::CloudSim;
use spotsim::report;
use spotsim::scenario::{build_workload, ScenarioConfig};

struct BestFit;

impl VmAllocationPolicy for BestFit {
    fn name(&self) -> &str {
        "best-fit"
    }

    fn select(&self, spec: &spotsim::infrastructure::VmSpec, candidates: &[&HostSnapshot], clearance: bool) -> Selection {
        let left = |h: &HostSnapshot| {
            let free = if clearance { h.free_after_clearance() } else { h.free };
            free.pes.saturating_sub(u64::from(spec.pes))
        };
        let index = candidates
            .iter()
            .enumerate()
            .min_by_key(|(_, h)| (left(h), h.id))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Selection { index, matrix: None }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::load("bundled:randomly-generated")?;
    let workload = build_workload(&cfg, cfg.seed)?;
    let mut sim = CloudSim::new(cfg.engine, workload.hosts.clone(), Box::new(BestFit), cfg.broker)?;
    for r in &workload.requests {
        sim.submit(r.clone())?;
    }
    let result = sim.run()?;
    println!("{}", serde_json::to_string_pretty(&report::aggregate(&result).summary)?);
    Ok(())
}
