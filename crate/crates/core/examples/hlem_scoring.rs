//! Host scores for three candidates, with and without the spot-load
//! adjustment.

use spotsim::allocation::{evaluate_hosts, Hlem, HlemParams, HostSnapshot, VmAllocationPolicy};
use spotsim::infrastructure::{HostId, Resources, VmSpec};

fn main() {
    let caps = [[8.0, 16_384.0, 1000.0, 500_000.0], [4.0, 32_768.0, 1000.0, 500_000.0], [8.0, 8192.0, 2000.0, 100_000.0]];
    let ids = [HostId(0), HostId(1), HostId(2)];
    let m = evaluate_hosts(&ids, &caps);
    println!("entropy  {:.4?}", m.entropy);
    println!("weights  {:.4?}", m.weights);
    println!("scores   {:.4?}", m.host_scores);

    // Equal free capacity, different spot load.
    let total = Resources::new(16, 65_536, 10_000, 1_000_000);
    let free = Resources::new(8, 32_768, 5_000, 500_000);
    let busy = HostSnapshot { spot_used: Resources::new(6, 0, 0, 0), free, ..HostSnapshot::idle(HostId(0), total, 1000.0) };
    let quiet = HostSnapshot { spot_used: Resources::new(1, 0, 0, 0), free, ..HostSnapshot::idle(HostId(1), total, 1000.0) };
    let spec = VmSpec::new(1000.0, 2, 2048, 100, 1000);
    for policy in [Hlem::new(HlemParams::default()), Hlem::adjusted(HlemParams::default())] {
        let sel = policy.select(&spec, &[&busy, &quiet], false);
        println!("{:<14} picks host {}", policy.name(), [&busy, &quiet][sel.index].id);
    }
}
