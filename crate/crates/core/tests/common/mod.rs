//! Shared test helpers: a from-scratch HLEM evaluator and lifecycle checks.
#![allow(dead_code)]

use spotsim::allocation::PolicyKind;
use spotsim::broker::{BrokerConfig, DynamicVm, InterruptionBehavior, SpotParams, VmState};
use spotsim::cloud::{CloudSim, RunResult};
use spotsim::infrastructure::{Cloudlet, CloudletId, Host, HostId, HostSpec, VmId, VmSpec};
use spotsim::kernel::EngineConfig;

/// Every quantity of the host evaluation, computed the long way.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub c_hat: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub e: Vec<f64>,
    pub g: Vec<f64>,
    pub w: Vec<f64>,
    pub hs: Vec<f64>,
    pub chosen: usize,
}

/// Direct evaluation over `caps[host][dim]`. Written without reference to
/// the library so the two can be compared.
pub fn oracle(caps: &[Vec<f64>]) -> Oracle {
    let n = caps.len();
    let dims = caps[0].len();
    let mut c_hat = vec![vec![0.0; dims]; n];
    let mut p = vec![vec![0.0; dims]; n];
    for j in 0..dims {
        let col: Vec<f64> = caps.iter().map(|row| row[j]).collect();
        let mut lo = col[0];
        let mut hi = col[0];
        for &x in &col {
            if x < lo {
                lo = x;
            }
            if x > hi {
                hi = x;
            }
        }
        let total: f64 = col.iter().sum();
        for i in 0..n {
            c_hat[i][j] = if hi == lo { 1.0 } else { (col[i] - lo) / (hi - lo) };
            p[i][j] = if total == 0.0 { 1.0 / n as f64 } else { col[i] / total };
        }
    }
    if n == 1 {
        return Oracle {
            c_hat,
            p,
            e: vec![1.0; dims],
            g: vec![0.0; dims],
            w: vec![1.0 / dims as f64; dims],
            hs: vec![1.0],
            chosen: 0,
        };
    }
    let k = 1.0 / (n as f64).ln();
    let mut e = vec![0.0; dims];
    for j in 0..dims {
        let mut acc = 0.0;
        for row in &p {
            if row[j] > 0.0 {
                acc += row[j] * row[j].ln();
            }
        }
        e[j] = (-k * acc).max(0.0).min(1.0);
    }
    let g: Vec<f64> = e.iter().map(|x| 1.0 - x).collect();
    let gsum: f64 = g.iter().sum();
    let w: Vec<f64> = if gsum > 0.0 { g.iter().map(|x| x / gsum).collect() } else { vec![1.0 / dims as f64; dims] };
    let hs: Vec<f64> = c_hat.iter().map(|row| row.iter().zip(&w).map(|(c, w)| c * w).sum()).collect();
    let mut chosen = 0;
    for i in 1..n {
        if hs[i] > hs[chosen] {
            chosen = i;
        }
    }
    Oracle { c_hat, p, e, g, w, hs, chosen }
}

/// Violations of the spot lifecycle rules found in a finished run.
pub fn lifecycle_violations(r: &RunResult) -> Vec<String> {
    let mut out = Vec::new();
    let interval = r.scheduling_interval;
    for i in &r.log.interruptions {
        let vm = r.vm(i.vm).expect("interrupted VM exists");
        let params = *vm.kind.spot().expect("only spot VMs are interrupted");
        let ran = i.signal_at - i.period_start;
        if i.requested_by.is_some() && ran < params.minimum_running_time {
            out.push(format!("vm {} interrupted after {ran} s, minimum {}", vm.id, params.minimum_running_time));
        }
        if ((i.deallocate_at - i.signal_at) - params.warning_time).abs() > 1e-9 {
            out.push(format!(
                "vm {} deallocation lag {} s, warning {}",
                vm.id,
                i.deallocate_at - i.signal_at,
                params.warning_time
            ));
        }
        if let Some(at) = i.executed_at {
            if at != i.deallocate_at {
                out.push(format!("vm {} deallocated at {at}, due {}", vm.id, i.deallocate_at.secs()));
            }
        }
    }
    for vm in &r.vms {
        let Some(params) = vm.kind.spot() else { continue };
        if vm.state == VmState::Finished && vm.history.len() > 1 {
            for c in r.cloudlets_of(vm.id) {
                if (c.executed - c.length).abs() > 1e-9 * c.length || c.remaining != 0.0 {
                    out.push(format!("vm {} cloudlet {} executed {} of {}", vm.id, c.id.0, c.executed, c.length));
                }
            }
        }
        if params.interruption_behavior != InterruptionBehavior::Hibernate {
            continue;
        }
        let ts: Vec<_> = r.log.transitions.iter().filter(|t| t.vm == vm.id).collect();
        for (k, t) in ts.iter().enumerate() {
            if t.to != VmState::Hibernated {
                continue;
            }
            let deadline = t.time.secs() + params.hibernation_time;
            match ts.get(k + 1) {
                Some(next) if next.time.secs() < deadline => {}
                Some(next) if next.to == VmState::Terminated => {
                    let late = next.time.secs() - deadline;
                    if !(0.0..=interval).contains(&late) {
                        out.push(format!("vm {} terminated {late} s after its hibernation limit", vm.id));
                    }
                }
                Some(next) => {
                    out.push(format!("vm {} left hibernation as {:?} after its limit", vm.id, next.to));
                }
                None if r.end_time.secs() > deadline + interval => {
                    out.push(format!("vm {} still hibernated past its limit", vm.id));
                }
                None => {}
            }
        }
    }
    out
}

/// One 2-PE host, a hibernating spot VM at t=0 and an on-demand VM of the
/// same size arriving at t=10. Both run one 20,000 MI single-PE cloudlet.
pub fn minimal_example() -> RunResult {
    let engine = EngineConfig { min_time_between_events: 0.5, terminate_at: Some(70.0), scheduling_interval: 1.0 };
    let host = Host::new(HostId(0), HostSpec::new(2, 2048, 10_000, 1_000_000));
    let broker = BrokerConfig { vm_destruction_delay: 1.0, ..Default::default() };
    let mut sim = CloudSim::new(engine, vec![host], PolicyKind::Hlem.build(Default::default()), broker).unwrap();
    sim.enable_audit();
    let spec = VmSpec::new(1000.0, 2, 512, 1000, 10_000);
    let spot = DynamicVm::spot(VmId(0), spec, SpotParams::default());
    let mut od = DynamicVm::on_demand(VmId(1), spec);
    od.submission_delay = 10.0;
    for vm in [spot, od] {
        let c = Cloudlet::new(CloudletId(0), vm.id, 20_000.0, 1);
        sim.submit_vm(vm, vec![c]).unwrap();
    }
    sim.run().unwrap()
}
