//! Spot VMs preempted by on-demand arrivals, then resumed, terminated or
//! left to expire in hibernation.

use spotsim::scenario::{run_scenario, Overrides, RunOptions, ScenarioConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ScenarioConfig::load("bundled:restarting-interrupted")?;
    let run = run_scenario(&cfg, Overrides::default(), RunOptions { audit: true })?;
    let r = &run.result;
    for vm in &r.vms {
        let path: Vec<String> = r.state_sequence(vm.id).iter().map(|s| format!("{s:?}")).collect();
        println!("{:<10} {}", vm.label, path.join(" > "));
    }
    for i in &r.log.interruptions {
        println!("vm {} warned at {}, deallocated at {}", i.vm, i.signal_at.secs(), i.deallocate_at.secs());
    }
    println!("audits: {}, violations: {}", r.log.audits, r.log.violations.len());
    Ok(())
}
