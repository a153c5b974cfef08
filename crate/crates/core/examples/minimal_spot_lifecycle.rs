//! One host, one hibernating spot VM, and an on-demand VM that arrives at
//! t=10 and needs the whole host.

use spotsim::allocation::PolicyKind;
use spotsim::broker::{BrokerConfig, DynamicVm, InterruptionBehavior, SpotParams};
use spotsim::cloud::CloudSim;
use spotsim::infrastructure::{Cloudlet, CloudletId, Host, HostId, HostSpec, VmId, VmSpec};
use spotsim::kernel::EngineConfig;
use spotsim::report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = EngineConfig { min_time_between_events: 0.5, terminate_at: Some(70.0), scheduling_interval: 1.0 };
    let host = Host::new(HostId(0), HostSpec::new(2, 2048, 10_000, 1_000_000));
    let broker = BrokerConfig { vm_destruction_delay: 1.0, ..Default::default() };
    let mut sim = CloudSim::new(engine, vec![host], PolicyKind::Hlem.build(Default::default()), broker)?;

    let spec = VmSpec::new(1000.0, 2, 512, 1000, 10_000);
    let params = SpotParams {
        interruption_behavior: InterruptionBehavior::Hibernate,
        minimum_running_time: 0.0,
        warning_time: 2.0,
        hibernation_time: 600.0,
    };
    let spot = DynamicVm::spot(VmId(0), spec, params);
    let mut on_demand = DynamicVm::on_demand(VmId(1), spec);
    on_demand.submission_delay = 10.0;
    for vm in [spot, on_demand] {
        let job = Cloudlet::new(CloudletId(0), vm.id, 20_000.0, 1);
        sim.submit_vm(vm, vec![job])?;
    }
    let result = sim.run()?;

    for t in result.log.transitions.iter().filter(|t| t.vm == VmId(0)) {
        println!("t={:>5.1}  vm 0 -> {:?}", t.time.secs(), t.to);
    }
    let spot = &report::aggregate(&result).spot[0];
    println!(
        "interruptions: {}, average interruption: {:?} s",
        spot.interruption_count, spot.avg_interruption_s
    );
    Ok(())
}
