//! Physical and virtual resource model: hosts, VM demands, cloudlets and
//! cloudlet execution progress.
//!
//! Units: PEs are whole cores, MIPS is million instructions per second per
//! PE, RAM and storage are MB, bandwidth is Mbps, cloudlet lengths are MI.
//! A VM admitted to a host reserves every dimension exclusively.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::kernel::SimTime;

/// MIPS per PE when a scenario leaves it out.
pub const DEFAULT_MIPS_PER_PE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VmId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CloudletId(pub u32);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Resource dimensions a host reserves for a VM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Cpu,
    Ram,
    Bandwidth,
    Storage,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::Cpu, Dimension::Ram, Dimension::Bandwidth, Dimension::Storage];
}

/// Integer amounts per dimension. `pes` counts whole cores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub pes: u64,
    pub ram: u64,
    pub bw: u64,
    pub storage: u64,
}

impl Resources {
    pub const ZERO: Resources = Resources { pes: 0, ram: 0, bw: 0, storage: 0 };

    pub fn new(pes: u64, ram: u64, bw: u64, storage: u64) -> Self {
        Self { pes, ram, bw, storage }
    }

    pub fn get(&self, d: Dimension) -> u64 {
        match d {
            Dimension::Cpu => self.pes,
            Dimension::Ram => self.ram,
            Dimension::Bandwidth => self.bw,
            Dimension::Storage => self.storage,
        }
    }

    /// First dimension in which `self` cannot cover `demand`.
    pub fn shortfall(&self, demand: &Resources) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|d| self.get(*d) < demand.get(*d))
    }

    pub fn covers(&self, demand: &Resources) -> bool {
        self.shortfall(demand).is_none()
    }

    pub fn saturating_sub(&self, o: &Resources) -> Resources {
        Resources {
            pes: self.pes.saturating_sub(o.pes),
            ram: self.ram.saturating_sub(o.ram),
            bw: self.bw.saturating_sub(o.bw),
            storage: self.storage.saturating_sub(o.storage),
        }
    }

    pub fn plus(&self, o: &Resources) -> Resources {
        Resources { pes: self.pes + o.pes, ram: self.ram + o.ram, bw: self.bw + o.bw, storage: self.storage + o.storage }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub pes: u32,
    #[serde(default = "default_mips")]
    pub mips_per_pe: f64,
    pub ram: u64,
    pub bw: u64,
    pub storage: u64,
}

fn default_mips() -> f64 {
    DEFAULT_MIPS_PER_PE
}

impl HostSpec {
    pub fn new(pes: u32, ram: u64, bw: u64, storage: u64) -> Self {
        Self { pes, mips_per_pe: DEFAULT_MIPS_PER_PE, ram, bw, storage }
    }

    pub fn capacity(&self) -> Resources {
        Resources::new(u64::from(self.pes), self.ram, self.bw, self.storage)
    }

    pub fn total_mips(&self) -> f64 {
        f64::from(self.pes) * self.mips_per_pe
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmSpec {
    #[serde(default = "default_mips")]
    pub mips: f64,
    pub pes: u32,
    pub ram: u64,
    pub bw: u64,
    pub storage: u64,
}

impl VmSpec {
    pub fn new(mips: f64, pes: u32, ram: u64, bw: u64, storage: u64) -> Self {
        Self { mips, pes, ram, bw, storage }
    }

    pub fn demand(&self) -> Resources {
        Resources::new(u64::from(self.pes), self.ram, self.bw, self.storage)
    }

    pub fn total_mips(&self) -> f64 {
        self.mips * f64::from(self.pes)
    }

    /// Names the first non-positive field, if any.
    pub fn invalid_field(&self) -> Option<&'static str> {
        if !(self.mips > 0.0 && self.mips.is_finite()) {
            Some("mips")
        } else if self.pes == 0 {
            Some("pes")
        } else if self.ram == 0 {
            Some("ram")
        } else if self.bw == 0 {
            Some("bw")
        } else if self.storage == 0 {
            Some("storage")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationResult {
    Allocated,
    Insufficient(Dimension),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Host {
    pub id: HostId,
    pub spec: HostSpec,
    free: Resources,
    resident: Vec<(VmId, Resources)>,
    /// Hosts created by a trace join the pool at this time.
    pub available_from: SimTime,
    /// No new placements from this time on; residents keep running.
    pub retired_at: Option<SimTime>,
}

impl Host {
    pub fn new(id: HostId, spec: HostSpec) -> Self {
        Self { id, spec, free: spec.capacity(), resident: Vec::new(), available_from: SimTime::ZERO, retired_at: None }
    }

    pub fn free(&self) -> Resources {
        self.free
    }

    pub fn capacity(&self) -> Resources {
        self.spec.capacity()
    }

    /// Resident VMs in allocation order.
    pub fn resident_vms(&self) -> impl Iterator<Item = VmId> + '_ {
        self.resident.iter().map(|(id, _)| *id)
    }

    pub fn residents(&self) -> &[(VmId, Resources)] {
        &self.resident
    }

    pub fn is_resident(&self, vm: VmId) -> bool {
        self.resident.iter().any(|(id, _)| *id == vm)
    }

    pub fn accepts_at(&self, now: SimTime) -> bool {
        self.available_from <= now && self.retired_at.map_or(true, |r| now < r)
    }

    /// Fraction of the host's CPU capacity reserved by resident VMs.
    pub fn cpu_utilization(&self) -> f64 {
        let total = f64::from(self.spec.pes);
        (total - self.free.pes as f64) / total
    }

    pub fn can_host(&self, vm: &VmSpec) -> Option<Dimension> {
        if vm.mips > self.spec.mips_per_pe {
            return Some(Dimension::Cpu);
        }
        self.free.shortfall(&vm.demand())
    }

    pub fn allocate(&mut self, vm: VmId, spec: &VmSpec) -> AllocationResult {
        debug_assert!(!self.is_resident(vm));
        if let Some(d) = self.can_host(spec) {
            return AllocationResult::Insufficient(d);
        }
        let demand = spec.demand();
        self.free = self.free.saturating_sub(&demand);
        self.resident.push((vm, demand));
        AllocationResult::Allocated
    }

    pub fn deallocate(&mut self, vm: VmId) -> Result<(), SimError> {
        let pos = self
            .resident
            .iter()
            .position(|(id, _)| *id == vm)
            .ok_or(SimError::NotResident { vm, host: self.id })?;
        let (_, demand) = self.resident.remove(pos);
        self.free = self.free.plus(&demand);
        Ok(())
    }

    /// `free + Σ resident demand == total` in every dimension.
    pub fn conserves_capacity(&self) -> bool {
        let used = self.resident.iter().fold(Resources::ZERO, |acc, (_, d)| acc.plus(d));
        used.plus(&self.free) == self.capacity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CloudletState {
    Queued,
    Running,
    Paused,
    Finished,
    /// The owning VM was terminated; `remaining` keeps the unexecuted work.
    Abandoned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cloudlet {
    pub id: CloudletId,
    pub length: f64,
    pub remaining: f64,
    pub pes: u32,
    pub file_size: u64,
    pub output_size: u64,
    /// Only full utilization is modelled.
    pub utilization: f64,
    pub state: CloudletState,
    pub vm: VmId,
    /// Seconds after the VM first starts before this cloudlet is submitted.
    pub start_delay: f64,
    pub finished_at: Option<SimTime>,
    /// MI actually executed; equals `length - remaining` at all times.
    pub executed: f64,
}

impl Cloudlet {
    pub fn new(id: CloudletId, vm: VmId, length: f64, pes: u32) -> Self {
        Self {
            id,
            length,
            remaining: length,
            pes: pes.max(1),
            file_size: 300,
            output_size: 300,
            utilization: 1.0,
            state: CloudletState::Queued,
            vm,
            start_delay: 0.0,
            finished_at: None,
            executed: 0.0,
        }
    }

    pub fn with_start_delay(mut self, delay: f64) -> Self {
        self.start_delay = delay;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProcessingUpdate {
    pub finished: Vec<CloudletId>,
    pub next_completion: Option<SimTime>,
}

/// Per-VM time-shared cloudlet execution.
///
/// Running cloudlets share the VM's allocated MIPS. A cloudlet asking for
/// `p` PEs gets `min(p, vm PEs)` of them while the VM is not oversubscribed;
/// otherwise capacity is split in proportion to those effective PE counts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CloudletScheduler {
    last_update: SimTime,
    /// Total MI handed to cloudlets so far.
    delivered: f64,
}

const FINISH_EPS: f64 = 1e-9;

impl CloudletScheduler {
    pub fn new(now: SimTime) -> Self {
        Self { last_update: now, delivered: 0.0 }
    }

    pub fn last_update(&self) -> SimTime {
        self.last_update
    }

    pub fn delivered(&self) -> f64 {
        self.delivered
    }

    /// Restart the clock without executing anything (resume after a pause).
    pub fn reset_clock(&mut self, now: SimTime) {
        self.last_update = now;
    }

    fn rates(allocated_mips: &[f64], running: &[(usize, u32)]) -> Vec<f64> {
        let n_pe = allocated_mips.len() as f64;
        let total: f64 = allocated_mips.iter().sum();
        let per_pe = if n_pe > 0.0 { total / n_pe } else { 0.0 };
        let eff: Vec<f64> = running.iter().map(|&(_, p)| f64::from(p).min(n_pe)).collect();
        let requested: f64 = eff.iter().sum();
        let share = if requested > n_pe { n_pe / requested } else { 1.0 };
        eff.iter().map(|e| per_pe * e * share).collect()
    }

    /// Advances every running cloudlet in `ids` to `now`.
    pub fn update_processing(
        &mut self,
        vm: VmId,
        now: SimTime,
        allocated_mips: &[f64],
        cloudlets: &mut [Cloudlet],
        ids: &[CloudletId],
    ) -> Result<ProcessingUpdate, SimError> {
        let dt = now - self.last_update;
        if dt < 0.0 {
            return Err(SimError::NegativeDelta { vm, delta: dt });
        }
        let running: Vec<(usize, u32)> = ids
            .iter()
            .map(|c| c.0 as usize)
            .filter(|&i| cloudlets[i].state == CloudletState::Running)
            .map(|i| (i, cloudlets[i].pes))
            .collect();
        let rates = Self::rates(allocated_mips, &running);
        let mut out = ProcessingUpdate::default();
        for (&(i, _), &rate) in running.iter().zip(&rates) {
            let c = &mut cloudlets[i];
            let work = (rate * dt).min(c.remaining);
            c.remaining -= work;
            c.executed += work;
            self.delivered += work;
            if c.remaining <= FINISH_EPS * c.length.max(1.0) {
                c.executed += c.remaining;
                self.delivered += c.remaining;
                c.remaining = 0.0;
                c.state = CloudletState::Finished;
                c.finished_at = Some(now);
                out.finished.push(c.id);
            }
        }
        self.last_update = now;
        out.next_completion = self.next_completion(now, allocated_mips, cloudlets, ids);
        Ok(out)
    }

    /// Earliest projected finish among running cloudlets, assuming the
    /// current mix stays constant.
    pub fn next_completion(
        &self,
        now: SimTime,
        allocated_mips: &[f64],
        cloudlets: &[Cloudlet],
        ids: &[CloudletId],
    ) -> Option<SimTime> {
        let running: Vec<(usize, u32)> = ids
            .iter()
            .map(|c| c.0 as usize)
            .filter(|&i| cloudlets[i].state == CloudletState::Running)
            .map(|i| (i, cloudlets[i].pes))
            .collect();
        let rates = Self::rates(allocated_mips, &running);
        running
            .iter()
            .zip(&rates)
            .filter(|(_, r)| **r > 0.0)
            .map(|(&(i, _), r)| now + cloudlets[i].remaining / r)
            .min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host() -> Host {
        Host::new(HostId(0), HostSpec::new(8, 16384, 10000, 1_000_000))
    }

    fn vm(pes: u32, ram: u64) -> VmSpec {
        VmSpec::new(1000.0, pes, ram, 1000, 10000)
    }

    #[test]
    fn allocate_decrements_gauges() {
        let mut h = host();
        assert_eq!(h.allocate(VmId(0), &vm(2, 512)), AllocationResult::Allocated);
        assert_eq!(h.free().pes, 6);
        assert_eq!(h.free().ram, 16384 - 512);
        assert!(h.conserves_capacity());
    }

    #[test]
    fn allocate_reports_binding_dimension() {
        let mut h = Host::new(HostId(0), HostSpec::new(8, 256, 10000, 1_000_000));
        let before = h.free();
        assert_eq!(h.allocate(VmId(0), &vm(2, 512)), AllocationResult::Insufficient(Dimension::Ram));
        assert_eq!(h.free(), before);
        assert_eq!(h.resident_vms().count(), 0);
    }

    #[test]
    fn two_four_pe_vms_fill_an_eight_pe_host() {
        let mut h = host();
        h.allocate(VmId(0), &vm(4, 512));
        h.allocate(VmId(1), &vm(4, 512));
        assert_eq!(h.free().pes, 0);
        assert_eq!(h.allocate(VmId(2), &vm(1, 1)), AllocationResult::Insufficient(Dimension::Cpu));
    }

    #[test]
    fn vm_mips_above_pe_rating_does_not_fit() {
        let mut h = host();
        let fast = VmSpec::new(2000.0, 1, 1, 1, 1);
        assert_eq!(h.allocate(VmId(0), &fast), AllocationResult::Insufficient(Dimension::Cpu));
    }

    #[test]
    fn deallocate_restores_and_preserves_order() {
        let mut h = host();
        let initial = h.free();
        for i in 0..3 {
            h.allocate(VmId(i), &vm(1, 100));
        }
        h.deallocate(VmId(1)).unwrap();
        assert_eq!(h.resident_vms().collect::<Vec<_>>(), vec![VmId(0), VmId(2)]);
        h.deallocate(VmId(0)).unwrap();
        h.deallocate(VmId(2)).unwrap();
        assert_eq!(h.free(), initial);
    }

    #[test]
    fn deallocate_unknown_is_fatal() {
        let mut h = host();
        assert!(matches!(h.deallocate(VmId(9)), Err(SimError::NotResident { .. })));
    }

    fn one_cloudlet(length: f64, pes: u32) -> Vec<Cloudlet> {
        let mut c = Cloudlet::new(CloudletId(0), VmId(0), length, pes);
        c.state = CloudletState::Running;
        vec![c]
    }

    #[test]
    fn single_pe_cloudlet_on_two_pe_vm_finishes_at_twenty() {
        let mut cl = one_cloudlet(20000.0, 1);
        let mut s = CloudletScheduler::new(SimTime::ZERO);
        let mips = [1000.0, 1000.0];
        let ids = [CloudletId(0)];
        assert_eq!(s.next_completion(SimTime::ZERO, &mips, &cl, &ids), Some(SimTime(20.0)));
        let up = s.update_processing(VmId(0), SimTime(20.0), &mips, &mut cl, &ids).unwrap();
        assert_eq!(up.finished, vec![CloudletId(0)]);
        assert_eq!(cl[0].state, CloudletState::Finished);
        assert_eq!(up.next_completion, None);
    }

    #[test]
    fn pause_after_ten_seconds_leaves_half() {
        let mut cl = one_cloudlet(20000.0, 1);
        let mut s = CloudletScheduler::new(SimTime::ZERO);
        s.update_processing(VmId(0), SimTime(10.0), &[1000.0, 1000.0], &mut cl, &[CloudletId(0)]).unwrap();
        assert!((cl[0].remaining - 10000.0).abs() < 1e-9);
    }

    #[test]
    fn finished_cloudlet_is_untouched() {
        let mut cl = one_cloudlet(100.0, 1);
        cl[0].remaining = 0.0;
        cl[0].state = CloudletState::Finished;
        let mut s = CloudletScheduler::new(SimTime::ZERO);
        let up = s.update_processing(VmId(0), SimTime(5.0), &[1000.0], &mut cl, &[CloudletId(0)]).unwrap();
        assert!(up.finished.is_empty());
        assert_eq!(cl[0].remaining, 0.0);
    }

    #[test]
    fn negative_delta_is_fatal() {
        let mut cl = one_cloudlet(100.0, 1);
        let mut s = CloudletScheduler::new(SimTime(10.0));
        let err = s.update_processing(VmId(0), SimTime(5.0), &[1000.0], &mut cl, &[CloudletId(0)]);
        assert!(matches!(err, Err(SimError::NegativeDelta { .. })));
    }

    #[test]
    fn finish_time_uses_min_of_vm_and_cloudlet_pes() {
        let cl = one_cloudlet(12000.0, 4);
        let s = CloudletScheduler::new(SimTime(3.0));
        // 2-PE VM: the 4-PE cloudlet gets both PEs.
        let t = s.next_completion(SimTime(3.0), &[1000.0, 1000.0], &cl, &[CloudletId(0)]).unwrap();
        assert_eq!(t, SimTime(3.0 + 12000.0 / 2000.0));
    }

    /// Fixed-step integration of the same sharing rule, used as an oracle.
    fn stepped_oracle(lengths: &[(f64, u32)], vm_pes: usize, mips: f64, horizon: f64, dt: f64) -> Vec<f64> {
        let mut rem: Vec<f64> = lengths.iter().map(|l| l.0).collect();
        let mut t = 0.0;
        while t < horizon - 1e-12 {
            let active: Vec<usize> = (0..rem.len()).filter(|&i| rem[i] > 0.0).collect();
            let eff: Vec<f64> = active.iter().map(|&i| f64::from(lengths[i].1).min(vm_pes as f64)).collect();
            let req: f64 = eff.iter().sum();
            let share = if req > vm_pes as f64 { vm_pes as f64 / req } else { 1.0 };
            for (k, &i) in active.iter().enumerate() {
                rem[i] = (rem[i] - mips * eff[k] * share * dt).max(0.0);
            }
            t += dt;
        }
        rem.iter().zip(lengths).map(|(r, l)| l.0 - r).collect()
    }

    #[test]
    fn event_driven_work_matches_stepped_integration() {
        let spec = [(3000.0, 1), (9000.0, 2), (5000.0, 1)];
        let mut cl: Vec<Cloudlet> = spec
            .iter()
            .enumerate()
            .map(|(i, (l, p))| {
                let mut c = Cloudlet::new(CloudletId(i as u32), VmId(0), *l, *p);
                c.state = CloudletState::Running;
                c
            })
            .collect();
        let ids: Vec<CloudletId> = (0..3).map(CloudletId).collect();
        let mips = [1000.0, 1000.0];
        let mut s = CloudletScheduler::new(SimTime::ZERO);
        let horizon = 6.0;
        let mut now = SimTime::ZERO;
        loop {
            let next = s.next_completion(now, &mips, &cl, &ids);
            match next {
                Some(t) if t.0 < horizon => {
                    s.update_processing(VmId(0), t, &mips, &mut cl, &ids).unwrap();
                    now = t;
                }
                _ => {
                    s.update_processing(VmId(0), SimTime(horizon), &mips, &mut cl, &ids).unwrap();
                    break;
                }
            }
        }
        let oracle = stepped_oracle(&spec, 2, 1000.0, horizon, 1e-4);
        for (c, o) in cl.iter().zip(&oracle) {
            assert!((c.executed - o).abs() <= 1e-6 * c.length.max(1.0) + 0.5, "{} vs {}", c.executed, o);
            assert!((c.executed + c.remaining - c.length).abs() < 1e-9);
        }
        let total: f64 = cl.iter().map(|c| c.executed).sum();
        assert!((total - s.delivered()).abs() < 1e-6);
        // Capacity 2000 MI/s for 6 s, never idle: exactly 12000 MI delivered.
        assert!((total - 12000.0).abs() < 1e-6);
    }
}
