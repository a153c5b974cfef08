//! Writes a small synthetic trace in the 2011 layout, reads it back and
//! simulates it with a few injected spot VMs.

use spotsim::scenario::{simulate, RunOptions, ScenarioConfig, Workload};
use spotsim::trace::{
    generate_synthetic_trace, load_trace, write_machine_events, write_task_events, SchemaMap, SpotInjection,
    SyntheticTraceConfig, TraceOptions,
};
use spotsim::report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("spotsim-trace");
    std::fs::create_dir_all(&dir)?;
    let shape = SyntheticTraceConfig { unresolvable: 10, recoverable: 15, evicted: 10, ..SyntheticTraceConfig::new(500, 10) };
    let (machines, tasks) = generate_synthetic_trace(&shape, 1);
    let (mp, tp) = (dir.join("machine_events.csv"), dir.join("task_events.csv"));
    write_machine_events(std::fs::File::create(&mp)?, &machines)?;
    write_task_events(std::fs::File::create(&tp)?, &tasks)?;

    let opts = TraceOptions { spot: SpotInjection { count: 10, durations: vec![900.0, 1800.0], ..Default::default() }, ..Default::default() };
    let trace = load_trace(&mp, &tp, &SchemaMap::default(), &opts, 1)?;
    println!("{}", serde_json::to_string_pretty(&trace.stats)?);

    let cfg = ScenarioConfig::load("bundled:trace")?;
    let workload = Workload { hosts: trace.hosts, requests: trace.requests, interruptions: Vec::new(), trace_stats: None };
    let result = simulate(&cfg, &workload, cfg.policy, RunOptions::default())?;
    let s = report::aggregate(&result).summary;
    println!("spot VMs {}, interrupted {}, average interruption {:?} s", s.spot_vms, s.interrupted, s.avg_interruption_s);
    Ok(())
}
