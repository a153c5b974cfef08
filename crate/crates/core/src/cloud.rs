//! The simulated cloud: one datacenter, one dynamic broker, and the event
//! handling that ties VM lifecycles to host capacity.
//!
//! [`CloudSim`] pairs a kernel [`Simulation`] with a [`World`]. The world
//! receives every event and drives:
//!
//! * VM creation, with spot clearance for on-demand requests that do not fit;
//! * cloudlet execution, refreshed on every scheduling tick and at projected
//!   completion times;
//! * spot interruption (warning, then hibernation or termination);
//! * resubmission of hibernated and still-waiting VMs whenever a VM is
//!   destroyed and on every tick.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::allocation::{
    place_vm, ClearableVm, HostSnapshot, Placement, PlacementRequest, PolicyScorecard, VmAllocationPolicy,
};
use crate::broker::{BrokerConfig, BrokerList, DynamicBroker, DynamicVm, InterruptionBehavior, VmState};
use crate::error::SimError;
use crate::infrastructure::{AllocationResult, Cloudlet, CloudletId, CloudletState, Host, HostId, Resources, VmId};
use crate::kernel::{
    DeliveryLog, EngineConfig, EntityId, EventHandler, EventTag, Payload, SimEvent, SimTime, Simulation,
};

/// One lifecycle state change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub time: SimTime,
    pub vm: VmId,
    pub from: Option<VmState>,
    pub to: VmState,
    pub host: Option<HostId>,
}

/// One accepted interruption signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interruption {
    pub vm: VmId,
    pub host: HostId,
    /// Start of the execution period that was interrupted.
    pub period_start: SimTime,
    pub signal_at: SimTime,
    pub warning_time: f64,
    /// When the deallocation event was scheduled for.
    pub deallocate_at: SimTime,
    /// Set once the VM actually left its host for this interruption.
    pub executed_at: Option<SimTime>,
    /// The on-demand VM that needed the capacity, if any.
    pub requested_by: Option<VmId>,
}

/// Everything recorded while the simulation runs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub transitions: Vec<Transition>,
    pub interruptions: Vec<Interruption>,
    /// Interruption requests refused by the minimum-running-time guard.
    pub rejected_interruptions: Vec<(VmId, SimTime)>,
    pub scorecards: Vec<PolicyScorecard>,
    /// Invariant violations found in audit mode.
    pub violations: Vec<String>,
    /// Number of audited event boundaries.
    pub audits: u64,
}

#[derive(Debug, Clone, Copy)]
struct PendingClearance {
    host: HostId,
    outstanding: u32,
}

/// Domain state of a run; the kernel hands it every event.
pub struct World {
    hosts: Vec<Host>,
    reserved_for: Vec<Option<VmId>>,
    policy: Box<dyn VmAllocationPolicy>,
    broker: DynamicBroker,
    vms: Vec<DynamicVm>,
    vm_index: HashMap<VmId, usize>,
    cloudlets: Vec<Cloudlet>,
    clearances: HashMap<VmId, PendingClearance>,
    datacenter_id: EntityId,
    broker_id: EntityId,
    log: RunLog,
    audit: bool,
    record_scorecards: bool,
    /// Bumped whenever a failed placement could start succeeding.
    epoch: u64,
    /// `(epoch, clearable spot VMs)` after the last tick retry pass.
    last_tick_retry: Option<(u64, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trigger {
    HostDeallocation,
    Tick,
    CapacityAdded,
}

impl World {
    fn idx(&self, vm: VmId) -> Result<usize, SimError> {
        self.vm_index.get(&vm).copied().ok_or(SimError::UnknownVm(vm))
    }

    pub fn vm(&self, id: VmId) -> Option<&DynamicVm> {
        self.vm_index.get(&id).map(|&i| &self.vms[i])
    }

    fn host_index(&self, id: HostId) -> usize {
        self.hosts.iter().position(|h| h.id == id).expect("host ids come from the host list")
    }

    fn transition(&mut self, i: usize, to: VmState, now: SimTime) -> Result<(), SimError> {
        self.epoch += 1;
        let vm = &mut self.vms[i];
        let from = vm.transition(to)?;
        log::debug!("t={now} vm {} {from:?} -> {to:?}", vm.id);
        self.log.transitions.push(Transition { time: now, vm: vm.id, from: Some(from), to, host: vm.host });
        Ok(())
    }

    fn snapshots(&self, now: SimTime, for_vm: VmId) -> Vec<HostSnapshot> {
        self.hosts
            .iter()
            .zip(&self.reserved_for)
            .filter(|(h, r)| h.accepts_at(now) && r.map_or(true, |v| v == for_vm))
            .map(|(h, _)| {
                let mut spot_used = Resources::ZERO;
                let mut clearable = Vec::new();
                for (id, demand) in h.residents() {
                    let vm = &self.vms[self.vm_index[id]];
                    if vm.is_spot() {
                        spot_used = spot_used.plus(demand);
                        if vm.is_clearable(now) {
                            clearable.push(ClearableVm { id: *id, demand: *demand });
                        }
                    }
                }
                HostSnapshot {
                    id: h.id,
                    mips_per_pe: h.spec.mips_per_pe,
                    total: h.capacity(),
                    free: h.free(),
                    spot_used,
                    clearable,
                }
            })
            .collect()
    }

    /// Advances cloudlet execution of a placed VM to `now` and keeps its
    /// completion event current.
    fn advance(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let now = sim.clock();
        let vm = &mut self.vms[i];
        if !vm.state.is_active() {
            return Ok(());
        }
        let mips = vec![vm.spec.mips; vm.spec.pes as usize];
        let update = vm.scheduler.update_processing(vm.id, now, &mips, &mut self.cloudlets, &vm.cloudlets)?;
        for c in &update.finished {
            log::trace!("t={now} cloudlet {} finished on vm {}", c.0, vm.id);
        }
        if !vm.work_done && vm.cloudlets.iter().all(|c| self.cloudlets[c.0 as usize].state == CloudletState::Finished)
        {
            vm.work_done = true;
            self.epoch += 1;
            vm.scheduled_finish = None;
            let delay = self.broker.config.vm_destruction_delay;
            sim.send(self.broker_id, self.datacenter_id, delay, EventTag::VmDestroy, Payload::Vm(vm.id))?;
            return Ok(());
        }
        if update.next_completion != vm.scheduled_finish {
            vm.scheduled_finish = update.next_completion;
            if let Some(at) = update.next_completion {
                sim.schedule(SimEvent::new(
                    at,
                    EventTag::CloudletFinish,
                    self.datacenter_id,
                    self.broker_id,
                    Payload::Vm(vm.id),
                ))?;
            }
        }
        Ok(())
    }

    fn place_on(&mut self, i: usize, host: HostId, sim: &mut Simulation) -> Result<(), SimError> {
        let now = sim.clock();
        let hi = self.host_index(host);
        let vm_id = self.vms[i].id;
        if let AllocationResult::Insufficient(needed) = self.hosts[hi].allocate(vm_id, &self.vms[i].spec) {
            return Err(SimError::PolicyChoseFullHost { vm: vm_id, host, needed });
        }
        let resumed = self.vms[i].state == VmState::Hibernated;
        self.vms[i].host = Some(host);
        self.transition(i, VmState::Running, now)?;
        let vm = &mut self.vms[i];
        vm.history.open(host, now);
        vm.scheduler.reset_clock(now);
        vm.hibernated_since = None;
        vm.scheduled_finish = None;
        self.broker.move_to(vm_id, BrokerList::Exec);
        if resumed {
            for c in &vm.cloudlets {
                let c = &mut self.cloudlets[c.0 as usize];
                if c.state == CloudletState::Paused {
                    c.state = CloudletState::Running;
                }
            }
        } else {
            vm.created_at.get_or_insert(now);
            vm.started_once = true;
            let submits: Vec<(CloudletId, f64)> =
                vm.cloudlets.iter().map(|c| (*c, self.cloudlets[c.0 as usize].start_delay)).collect();
            for (c, delay) in submits {
                sim.send(self.broker_id, self.datacenter_id, delay, EventTag::CloudletSubmit, Payload::Cloudlet(c))?;
            }
        }
        if self.vms[i].cloudlets.is_empty() {
            self.vms[i].work_done = true;
            self.epoch += 1;
            let delay = self.broker.config.vm_destruction_delay;
            sim.send(self.broker_id, self.datacenter_id, delay, EventTag::VmDestroy, Payload::Vm(vm_id))?;
        } else {
            self.advance(i, sim)?;
        }
        Ok(())
    }

    /// Signals an interruption; `false` when the minimum running time has
    /// not yet elapsed in the current execution period.
    fn interrupt_spot(
        &mut self,
        i: usize,
        requested_by: Option<VmId>,
        sim: &mut Simulation,
    ) -> Result<bool, SimError> {
        let now = sim.clock();
        let vm = &self.vms[i];
        let Some(params) = vm.kind.spot().copied() else {
            return Err(SimError::NotSpot(vm.id));
        };
        if vm.state != VmState::Running {
            return Err(SimError::NotInterruptible { vm: vm.id, state: vm.state });
        }
        if !vm.past_minimum_running_time(now) {
            self.log.rejected_interruptions.push((vm.id, now));
            return Ok(false);
        }
        let record = *vm.history.current().expect("running VM has an open record");
        let vm_id = vm.id;
        self.transition(i, VmState::Warned, now)?;
        let deallocate_at = now + params.warning_time;
        self.log.interruptions.push(Interruption {
            vm: vm_id,
            host: record.host,
            period_start: record.start,
            signal_at: now,
            warning_time: params.warning_time,
            deallocate_at,
            executed_at: None,
            requested_by,
        });
        sim.send(self.datacenter_id, self.broker_id, 0.0, EventTag::SpotInterruptWarning, Payload::Vm(vm_id))?;
        sim.schedule(SimEvent::new(
            deallocate_at,
            EventTag::SpotDeallocate,
            self.datacenter_id,
            self.datacenter_id,
            Payload::Vm(vm_id),
        ))?;
        Ok(true)
    }

    fn execute_interruption(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let now = sim.clock();
        self.advance(i, sim)?;
        let vm_id = self.vms[i].id;
        let params = *self.vms[i].kind.spot().ok_or(SimError::NotSpot(vm_id))?;
        let host = self.vms[i].host.expect("warned VM is placed");
        let hi = self.host_index(host);
        self.hosts[hi].deallocate(vm_id)?;
        if let Some(rec) = self.log.interruptions.iter_mut().rev().find(|r| r.vm == vm_id && r.executed_at.is_none()) {
            rec.executed_at = Some(now);
        }
        let vm = &mut self.vms[i];
        vm.history.close(now);
        vm.interruption_count += 1;
        vm.scheduled_finish = None;
        match params.interruption_behavior {
            InterruptionBehavior::Terminate => {
                self.transition(i, VmState::Terminated, now)?;
                self.abandon(i, now);
            }
            InterruptionBehavior::Hibernate => {
                self.transition(i, VmState::Hibernated, now)?;
                let vm = &mut self.vms[i];
                vm.host = None;
                vm.hibernated_since = Some(now);
                for c in &vm.cloudlets {
                    let c = &mut self.cloudlets[c.0 as usize];
                    if c.state == CloudletState::Running {
                        c.state = CloudletState::Paused;
                    }
                }
                self.broker.move_to(vm_id, BrokerList::Resubmitting);
                sim.send(
                    self.datacenter_id,
                    self.datacenter_id,
                    params.hibernation_time,
                    EventTag::HibernationExpire,
                    Payload::Vm(vm_id),
                )?;
            }
        }
        Ok(())
    }

    /// Final bookkeeping for a VM that will never run again.
    fn abandon(&mut self, i: usize, now: SimTime) {
        let vm = &mut self.vms[i];
        vm.host = None;
        vm.destroyed_at = Some(now);
        vm.hibernated_since = None;
        for c in &vm.cloudlets {
            let c = &mut self.cloudlets[c.0 as usize];
            if c.state != CloudletState::Finished {
                c.state = CloudletState::Abandoned;
            }
        }
        self.broker.move_to(vm.id, BrokerList::Finished);
    }

    fn release_reservation(&mut self, vm: VmId) -> Option<HostId> {
        let c = self.clearances.remove(&vm)?;
        self.epoch += 1;
        let hi = self.host_index(c.host);
        if self.reserved_for[hi] == Some(vm) {
            self.reserved_for[hi] = None;
        }
        self.vms[self.vm_index[&vm]].awaiting_clearance = false;
        Some(c.host)
    }

    /// Runs the placement policy for one VM. Returns whether the VM was
    /// placed or a clearance started.
    fn attempt_placement(&mut self, i: usize, sim: &mut Simulation) -> Result<bool, SimError> {
        let hosts = self.snapshots(sim.clock(), self.vms[i].id);
        self.place_with(i, &hosts, sim)
    }

    fn place_with(&mut self, i: usize, hosts: &[HostSnapshot], sim: &mut Simulation) -> Result<bool, SimError> {
        let now = sim.clock();
        let vm = &self.vms[i];
        let req = PlacementRequest { vm: vm.id, spec: vm.spec, spot: vm.is_spot(), preferred_host: vm.preferred_host };
        let outcome = place_vm(self.policy.as_ref(), &req, hosts, now.0);
        if self.record_scorecards {
            if let Some(card) = outcome.scorecard.clone() {
                self.log.scorecards.push(card);
            }
        }
        match outcome.placement {
            Placement::Host(h) => {
                self.place_on(i, h, sim)?;
                Ok(true)
            }
            Placement::Clearance { host, victims } => {
                let vm_id = req.vm;
                let mut outstanding = 0;
                for v in victims {
                    let vi = self.idx(v)?;
                    if self.interrupt_spot(vi, Some(vm_id), sim)? {
                        outstanding += 1;
                    }
                }
                if outstanding == 0 {
                    return Ok(false);
                }
                let hi = self.host_index(host);
                self.reserved_for[hi] = Some(vm_id);
                self.epoch += 1;
                self.clearances.insert(vm_id, PendingClearance { host, outstanding });
                self.vms[i].awaiting_clearance = true;
                log::debug!("t={now} vm {vm_id} waits for {outstanding} spot interruption(s) on host {host}");
                Ok(true)
            }
            Placement::None => Ok(false),
        }
    }

    /// A creation attempt failed with nothing pending.
    fn creation_failed(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let now = sim.clock();
        let vm = &self.vms[i];
        if vm.state == VmState::Hibernated {
            self.broker.move_to(vm.id, BrokerList::Resubmitting);
            return Ok(());
        }
        if !vm.persistent {
            self.transition(i, VmState::Failed, now)?;
            self.abandon(i, now);
            return Ok(());
        }
        let vm_id = vm.id;
        let expiry = match (vm.waiting_time, vm.waiting_expiry_scheduled, vm.requested_at) {
            (Some(w), false, Some(first)) => Some(first + w),
            _ => None,
        };
        self.broker.move_to(vm_id, BrokerList::Resubmitting);
        if let Some(at) = expiry {
            self.vms[i].waiting_expiry_scheduled = true;
            sim.schedule(SimEvent::new(
                at.max(now),
                EventTag::WaitingExpire,
                self.broker_id,
                self.broker_id,
                Payload::Vm(vm_id),
            ))?;
        }
        Ok(())
    }

    fn clearable_count(&self, now: SimTime) -> usize {
        self.broker.list(BrokerList::Exec).iter().filter(|id| self.vms[self.vm_index[*id]].is_clearable(now)).count()
    }

    fn try_resubmit(&mut self, trigger: Trigger, sim: &mut Simulation) -> Result<usize, SimError> {
        // Between state changes placement can only improve when a spot VM
        // clears its minimum running time, so an unchanged key means every
        // attempt would fail again.
        if trigger == Trigger::Tick {
            let key = (self.epoch, self.clearable_count(sim.clock()));
            if self.last_tick_retry == Some(key) {
                return Ok(0);
            }
        }
        let pending: Vec<VmId> = self.broker.list(BrokerList::Resubmitting).to_vec();
        let mut resumed = 0;
        // No VM in this list awaits clearance, so none may use a reserved
        // host and they all see the same snapshots. Until something changes,
        // a request shaped like one that just failed fails too.
        let mut hosts: Option<(u64, Vec<HostSnapshot>)> = None;
        let mut failed = std::collections::HashSet::new();
        for id in pending {
            let i = self.idx(id)?;
            let vm = &self.vms[i];
            if vm.awaiting_clearance || !matches!(vm.state, VmState::Waiting | VmState::Hibernated) {
                continue;
            }
            let was_hibernated = vm.state == VmState::Hibernated;
            let s = vm.spec;
            let shape = (s.mips.to_bits(), s.pes, s.ram, s.bw, s.storage, vm.is_spot(), vm.preferred_host);
            if hosts.as_ref().map_or(true, |(e, _)| *e != self.epoch) {
                failed.clear();
                hosts = Some((self.epoch, self.snapshots(sim.clock(), VmId(u32::MAX))));
            }
            if failed.contains(&shape) {
                continue;
            }
            let (epoch, snap) = hosts.take().expect("filled above");
            let placed = self.place_with(i, &snap, sim)?;
            if placed && self.vms[i].state == VmState::Running && was_hibernated {
                resumed += 1;
            }
            if !placed && epoch == self.epoch {
                failed.insert(shape);
            }
            hosts = Some((epoch, snap));
        }
        if resumed > 0 {
            log::debug!("t={} resumed {resumed} VM(s) on {trigger:?}", sim.clock());
        }
        self.last_tick_retry = Some((self.epoch, self.clearable_count(sim.clock())));
        Ok(resumed)
    }

    fn on_vm_create(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let vm = &mut self.vms[i];
        if vm.state != VmState::Waiting {
            return Ok(());
        }
        if vm.requested_at.is_none() {
            vm.requested_at = Some(sim.clock());
            let t = Transition { time: sim.clock(), vm: vm.id, from: None, to: VmState::Waiting, host: None };
            self.log.transitions.push(t);
        }
        if !self.attempt_placement(i, sim)? {
            self.creation_failed(i, sim)?;
        }
        Ok(())
    }

    fn on_create_retry(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let vm_id = self.vms[i].id;
        let reserved = self.release_reservation(vm_id);
        if !matches!(self.vms[i].state, VmState::Waiting | VmState::Hibernated) {
            return Ok(());
        }
        if let Some(h) = reserved {
            let hi = self.host_index(h);
            if self.hosts[hi].accepts_at(sim.clock()) && self.hosts[hi].can_host(&self.vms[i].spec).is_none() {
                return self.place_on(i, h, sim);
            }
        }
        if !self.attempt_placement(i, sim)? {
            self.creation_failed(i, sim)?;
        }
        Ok(())
    }

    fn on_spot_deallocate(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let vm_id = self.vms[i].id;
        if self.vms[i].state == VmState::Warned {
            self.advance(i, sim)?;
            if !self.vms[i].work_done {
                self.execute_interruption(i, sim)?;
            }
        }
        let requester = self
            .log
            .interruptions
            .iter()
            .rev()
            .find(|r| r.vm == vm_id && r.deallocate_at == sim.clock())
            .and_then(|r| r.requested_by);
        if let Some(req) = requester {
            if let Some(c) = self.clearances.get_mut(&req) {
                c.outstanding = c.outstanding.saturating_sub(1);
                if c.outstanding == 0 {
                    sim.send(self.broker_id, self.datacenter_id, 0.0, EventTag::VmCreateRetry, Payload::Vm(req))?;
                }
            }
        }
        Ok(())
    }

    fn on_vm_destroy(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let now = sim.clock();
        let vm = &self.vms[i];
        if !vm.state.is_active() || !vm.work_done {
            return Ok(());
        }
        let vm_id = vm.id;
        let host = vm.host.expect("active VM is placed");
        let hi = self.host_index(host);
        self.hosts[hi].deallocate(vm_id)?;
        self.transition(i, VmState::Finished, now)?;
        let vm = &mut self.vms[i];
        vm.history.close(now);
        vm.host = None;
        vm.destroyed_at = Some(now);
        self.broker.move_to(vm_id, BrokerList::Finished);
        self.try_resubmit(Trigger::HostDeallocation, sim)?;
        Ok(())
    }

    fn on_cloudlet_submit(&mut self, c: CloudletId, sim: &mut Simulation) -> Result<(), SimError> {
        let vm_id = self.cloudlets[c.0 as usize].vm;
        let i = self.idx(vm_id)?;
        if self.cloudlets[c.0 as usize].state != CloudletState::Queued {
            return Ok(());
        }
        match self.vms[i].state {
            s if s.is_active() => {
                self.advance(i, sim)?;
                self.cloudlets[c.0 as usize].state = CloudletState::Running;
                self.advance(i, sim)?;
            }
            VmState::Hibernated => self.cloudlets[c.0 as usize].state = CloudletState::Paused,
            _ => self.cloudlets[c.0 as usize].state = CloudletState::Abandoned,
        }
        Ok(())
    }

    fn on_hibernation_expire(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let now = sim.clock();
        let vm = &self.vms[i];
        let (Some(since), Some(p)) = (vm.hibernated_since, vm.kind.spot()) else {
            return Ok(());
        };
        if vm.state == VmState::Hibernated && now.secs() >= since.secs() + p.hibernation_time {
            self.transition(i, VmState::Terminated, now)?;
            self.abandon(i, now);
        }
        Ok(())
    }

    fn on_waiting_expire(&mut self, i: usize, sim: &mut Simulation) -> Result<(), SimError> {
        let now = sim.clock();
        let vm = &self.vms[i];
        if vm.state != VmState::Waiting || vm.started_once {
            return Ok(());
        }
        let vm_id = vm.id;
        self.release_reservation(vm_id);
        self.transition(i, VmState::Failed, now)?;
        self.abandon(i, now);
        Ok(())
    }

    fn on_tick(&mut self, sim: &mut Simulation) -> Result<(), SimError> {
        let exec: Vec<VmId> = self.broker.list(BrokerList::Exec).to_vec();
        for id in exec {
            let i = self.idx(id)?;
            self.advance(i, sim)?;
        }
        self.try_resubmit(Trigger::Tick, sim)?;
        Ok(())
    }

    fn on_end(&mut self, sim: &mut Simulation) -> Result<(), SimError> {
        let exec: Vec<VmId> = self.broker.list(BrokerList::Exec).to_vec();
        for id in exec {
            let i = self.idx(id)?;
            let vm = &mut self.vms[i];
            if vm.state.is_active() {
                let mips = vec![vm.spec.mips; vm.spec.pes as usize];
                vm.scheduler.update_processing(vm.id, sim.clock(), &mips, &mut self.cloudlets, &vm.cloudlets)?;
            }
        }
        Ok(())
    }

    /// Checks host, broker, lifecycle and work invariants; records violations.
    fn audit(&mut self, now: SimTime) {
        self.log.audits += 1;
        let mut v = Vec::new();
        for h in &self.hosts {
            if !h.conserves_capacity() {
                v.push(format!("t={now}: host {} capacity not conserved", h.id));
            }
        }
        if !self.broker.is_partition() || self.broker.total() != self.vms.len() {
            v.push(format!("t={now}: broker lists are not a partition of the submitted VMs"));
        }
        let mut delivered = 0.0;
        for vm in &self.vms {
            delivered += vm.scheduler.delivered();
            let placed = vm.host.map_or(false, |h| self.hosts[self.host_index(h)].is_resident(vm.id));
            if vm.state.is_active() != placed {
                v.push(format!("t={now}: vm {} in {:?} but placed={placed}", vm.id, vm.state));
            }
            if vm.state.is_active() != vm.history.current().is_some() {
                v.push(format!("t={now}: vm {} open record does not match {:?}", vm.id, vm.state));
            }
            if !vm.history.is_well_formed() {
                v.push(format!("t={now}: vm {} execution history overlaps", vm.id));
            }
            for c in &vm.cloudlets {
                let c = &self.cloudlets[c.0 as usize];
                if c.state == CloudletState::Running && !vm.state.is_active() {
                    v.push(format!("t={now}: cloudlet {} runs on non-running vm {}", c.id.0, vm.id));
                }
                if c.state == CloudletState::Paused && vm.state != VmState::Hibernated {
                    v.push(format!("t={now}: cloudlet {} paused on vm {} in {:?}", c.id.0, vm.id, vm.state));
                }
                if !(c.remaining >= 0.0 && c.remaining <= c.length) {
                    v.push(format!("t={now}: cloudlet {} remaining {} outside [0, {}]", c.id.0, c.remaining, c.length));
                }
                if (c.state == CloudletState::Finished) != (c.remaining == 0.0) {
                    v.push(format!("t={now}: cloudlet {} finished flag disagrees with remaining", c.id.0));
                }
                if (c.length - c.remaining - c.executed).abs() > 1e-6 * c.length.max(1.0) {
                    v.push(format!("t={now}: cloudlet {} executed MI drifted", c.id.0));
                }
            }
        }
        let executed: f64 = self.cloudlets.iter().map(|c| c.length - c.remaining).sum();
        if (executed - delivered).abs() > 1e-6 * executed.max(1.0) {
            v.push(format!("t={now}: executed {executed} MI but schedulers delivered {delivered} MI"));
        }
        self.log.violations.extend(v);
    }
}

impl EventHandler for World {
    fn handle(&mut self, event: &SimEvent, sim: &mut Simulation) -> Result<(), SimError> {
        let vm_of = |p: Payload| match p {
            Payload::Vm(v) => Some(v),
            _ => None,
        };
        match (event.tag, vm_of(event.payload)) {
            (EventTag::VmCreate, Some(v)) => {
                let i = self.idx(v)?;
                self.on_vm_create(i, sim)?;
            }
            (EventTag::VmCreateRetry, Some(v)) => {
                let i = self.idx(v)?;
                self.on_create_retry(i, sim)?;
            }
            (EventTag::VmCreateRetry, None) => {
                self.try_resubmit(Trigger::CapacityAdded, sim)?;
            }
            (EventTag::SpotInterruptWarning, Some(v)) if event.destination == self.datacenter_id => {
                let i = self.idx(v)?;
                self.interrupt_spot(i, None, sim)?;
            }
            (EventTag::SpotInterruptWarning, Some(v)) => {
                log::debug!("t={} broker notified: vm {v} will be interrupted", sim.clock());
            }
            (EventTag::SpotDeallocate, Some(v)) => {
                let i = self.idx(v)?;
                self.on_spot_deallocate(i, sim)?;
            }
            (EventTag::HibernationExpire, Some(v)) => {
                let i = self.idx(v)?;
                self.on_hibernation_expire(i, sim)?;
            }
            (EventTag::WaitingExpire, Some(v)) => {
                let i = self.idx(v)?;
                self.on_waiting_expire(i, sim)?;
            }
            (EventTag::CloudletFinish, Some(v)) => {
                let i = self.idx(v)?;
                if self.vms[i].scheduled_finish == Some(event.time) {
                    self.vms[i].scheduled_finish = None;
                    self.advance(i, sim)?;
                }
            }
            (EventTag::VmDestroy, Some(v)) => {
                let i = self.idx(v)?;
                self.on_vm_destroy(i, sim)?;
            }
            (EventTag::CloudletSubmit, _) => {
                if let Payload::Cloudlet(c) = event.payload {
                    self.on_cloudlet_submit(c, sim)?;
                }
            }
            (EventTag::SchedulingTick, _) => self.on_tick(sim)?,
            (EventTag::EndOfSimulation, _) => self.on_end(sim)?,
            (tag, _) => log::warn!("ignoring {tag:?} without a VM payload"),
        }
        if self.audit {
            self.audit(sim.clock());
        }
        if self.broker.config.shutdown_when_idle && !self.broker.has_work() && event.tag != EventTag::EndOfSimulation {
            sim.request_stop();
        }
        Ok(())
    }

    fn is_busy(&self) -> bool {
        !self.broker.list(BrokerList::Exec).is_empty()
    }
}

/// Final state of a completed run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub policy: String,
    pub end_time: SimTime,
    pub scheduling_interval: f64,
    pub fingerprint: u64,
    pub events_delivered: u64,
    pub hosts: Vec<Host>,
    pub vms: Vec<DynamicVm>,
    pub cloudlets: Vec<Cloudlet>,
    pub log: RunLog,
}

impl RunResult {
    pub fn vm(&self, id: VmId) -> Option<&DynamicVm> {
        self.vms.iter().find(|v| v.id == id)
    }

    /// Lifecycle states a VM went through, starting with `Waiting`.
    pub fn state_sequence(&self, id: VmId) -> Vec<VmState> {
        self.log.transitions.iter().filter(|t| t.vm == id).map(|t| t.to).collect()
    }

    pub fn cloudlets_of(&self, id: VmId) -> impl Iterator<Item = &Cloudlet> {
        self.cloudlets.iter().filter(move |c| c.vm == id)
    }
}

/// A VM together with the cloudlets it will run.
#[derive(Debug, Clone)]
pub struct VmRequest {
    pub vm: DynamicVm,
    pub cloudlets: Vec<Cloudlet>,
}

/// A simulation kernel plus one datacenter and one broker.
pub struct CloudSim {
    sim: Simulation,
    world: World,
}

impl CloudSim {
    pub fn new(
        engine: EngineConfig,
        hosts: Vec<Host>,
        policy: Box<dyn VmAllocationPolicy>,
        broker: BrokerConfig,
    ) -> Result<Self, SimError> {
        let mut sim = Simulation::new(engine)?;
        let datacenter_id = sim.register_entity("datacenter")?;
        let broker_id = sim.register_entity("broker")?;
        let mut ids: Vec<HostId> = hosts.iter().map(|h| h.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != hosts.len() {
            return Err(SimError::InvalidConfig("host ids must be unique".into()));
        }
        for h in &hosts {
            if h.available_from > SimTime::ZERO {
                sim.schedule(SimEvent::new(
                    h.available_from,
                    EventTag::VmCreateRetry,
                    datacenter_id,
                    datacenter_id,
                    Payload::None,
                ))?;
            }
        }
        let n = hosts.len();
        Ok(Self {
            sim,
            world: World {
                hosts,
                reserved_for: vec![None; n],
                policy,
                broker: DynamicBroker::new(broker),
                vms: Vec::new(),
                vm_index: HashMap::new(),
                cloudlets: Vec::new(),
                clearances: HashMap::new(),
                datacenter_id,
                broker_id,
                log: RunLog::default(),
                audit: false,
                record_scorecards: false,
                epoch: 0,
                last_tick_retry: None,
            },
        })
    }

    /// Check invariants after every delivered event.
    pub fn enable_audit(&mut self) {
        self.world.audit = true;
    }

    /// Keep a scorecard for every placement decision.
    pub fn record_scorecards(&mut self) {
        self.world.record_scorecards = true;
    }

    pub fn keep_delivery_records(&mut self) {
        self.sim.keep_delivery_records();
    }

    pub fn clock(&self) -> SimTime {
        self.sim.clock()
    }

    pub fn delivery_log(&self) -> &DeliveryLog {
        self.sim.delivery_log()
    }

    pub fn policy_name(&self) -> &str {
        self.world.policy.name()
    }

    pub fn vm(&self, id: VmId) -> Option<&DynamicVm> {
        self.world.vm(id)
    }

    pub fn broker(&self) -> &DynamicBroker {
        &self.world.broker
    }

    /// Submits a VM with its cloudlets. `VM_CREATE` fires after the VM's
    /// submission delay. Cloudlet ids are reassigned in submission order.
    pub fn submit_vm(&mut self, mut vm: DynamicVm, cloudlets: Vec<Cloudlet>) -> Result<VmId, SimError> {
        if self.world.vm_index.contains_key(&vm.id) {
            return Err(SimError::DuplicateSubmission(vm.id));
        }
        if let Some(f) = vm.spec.invalid_field() {
            return Err(SimError::InvalidConfig(format!("vm {}: {f} must be positive", vm.id)));
        }
        if !(vm.submission_delay >= 0.0) {
            return Err(SimError::InvalidConfig(format!("vm {}: submission_delay must be >= 0", vm.id)));
        }
        for c in &cloudlets {
            if c.vm != vm.id {
                return Err(SimError::CloudletBoundElsewhere { cloudlet: c.id, bound: c.vm, requested: vm.id });
            }
        }
        vm.state = VmState::Waiting;
        vm.cloudlets.clear();
        for mut c in cloudlets {
            c.id = CloudletId(self.world.cloudlets.len() as u32);
            vm.cloudlets.push(c.id);
            self.world.cloudlets.push(c);
        }
        let id = vm.id;
        self.sim.send(
            self.world.broker_id,
            self.world.datacenter_id,
            vm.submission_delay,
            EventTag::VmCreate,
            Payload::Vm(id),
        )?;
        self.world.vm_index.insert(id, self.world.vms.len());
        self.world.vms.push(vm);
        self.world.broker.insert(id, BrokerList::Waiting);
        Ok(id)
    }

    pub fn submit(&mut self, request: VmRequest) -> Result<VmId, SimError> {
        self.submit_vm(request.vm, request.cloudlets)
    }

    /// Asks the datacenter to interrupt a spot VM at time `at`, as if an
    /// external capacity event happened. The minimum-running-time guard
    /// still applies.
    pub fn schedule_interruption(&mut self, vm: VmId, at: f64) -> Result<(), SimError> {
        let dc = self.world.datacenter_id;
        self.sim.schedule(SimEvent::new(SimTime(at), EventTag::SpotInterruptWarning, dc, dc, Payload::Vm(vm)))
    }

    pub fn run(mut self) -> Result<RunResult, SimError> {
        let end = self.sim.run(&mut self.world)?;
        let w = self.world;
        Ok(RunResult {
            policy: w.policy.name().to_string(),
            end_time: end,
            scheduling_interval: self.sim.config().scheduling_interval,
            fingerprint: self.sim.delivery_log().fingerprint(),
            events_delivered: self.sim.delivery_log().len(),
            hosts: w.hosts,
            vms: w.vms,
            cloudlets: w.cloudlets,
            log: w.log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{FirstFit, Hlem, HlemParams};
    use crate::broker::SpotParams;
    use crate::infrastructure::{HostSpec, VmSpec};

    fn engine(end: Option<f64>) -> EngineConfig {
        EngineConfig { min_time_between_events: 0.5, terminate_at: end, scheduling_interval: 1.0 }
    }

    fn one_host(pes: u32) -> Vec<Host> {
        vec![Host::new(HostId(0), HostSpec::new(pes, 2048, 10000, 1_000_000))]
    }

    fn spec2() -> VmSpec {
        VmSpec::new(1000.0, 2, 512, 1000, 10000)
    }

    fn cloud(hosts: Vec<Host>, end: Option<f64>) -> CloudSim {
        let mut c = CloudSim::new(engine(end), hosts, Box::new(FirstFit), BrokerConfig::default()).unwrap();
        c.enable_audit();
        c
    }

    fn job(vm: u32, mi: f64) -> Vec<Cloudlet> {
        vec![Cloudlet::new(CloudletId(0), VmId(vm), mi, 1)]
    }

    fn spot(id: u32, params: SpotParams) -> DynamicVm {
        DynamicVm::spot(VmId(id), spec2(), params)
    }

    #[test]
    fn submission_delay_schedules_create() {
        let mut c = cloud(one_host(2), Some(70.0));
        c.keep_delivery_records();
        let mut vm = DynamicVm::on_demand(VmId(0), spec2());
        vm.submission_delay = 10.0;
        c.submit_vm(vm, job(0, 1000.0)).unwrap();
        let mut sim = c;
        sim.sim.run(&mut sim.world).unwrap();
        let recs = sim.delivery_log().records().unwrap();
        let create = recs.iter().find(|d| d.tag == EventTag::VmCreate).unwrap();
        assert_eq!(create.time, SimTime(10.0));
    }

    #[test]
    fn duplicate_submission_is_fatal() {
        let mut c = cloud(one_host(2), None);
        c.submit_vm(DynamicVm::on_demand(VmId(0), spec2()), vec![]).unwrap();
        assert!(matches!(
            c.submit_vm(DynamicVm::on_demand(VmId(0), spec2()), vec![]),
            Err(SimError::DuplicateSubmission(_))
        ));
    }

    #[test]
    fn cloudlet_bound_elsewhere_is_fatal() {
        let mut c = cloud(one_host(2), None);
        let r = c.submit_vm(DynamicVm::on_demand(VmId(0), spec2()), job(3, 10.0));
        assert!(matches!(r, Err(SimError::CloudletBoundElsewhere { .. })));
    }

    #[test]
    fn persistent_request_runs_when_capacity_frees() {
        let mut c = cloud(one_host(2), None);
        // Occupies the host until its cloudlet ends at 11; destroyed at 12.
        c.submit_vm(DynamicVm::on_demand(VmId(0), spec2()), job(0, 11000.0)).unwrap();
        let mut b = DynamicVm::on_demand(VmId(1), spec2());
        b.waiting_time = Some(30.0);
        c.submit_vm(b, job(1, 1000.0)).unwrap();
        let r = c.run().unwrap();
        let b = r.vm(VmId(1)).unwrap();
        assert_eq!(b.created_at, Some(SimTime(12.0)));
        assert_eq!(b.state, VmState::Finished);
        assert!(r.log.violations.is_empty(), "{:?}", r.log.violations);
    }

    #[test]
    fn persistent_request_expires() {
        let mut c = cloud(one_host(2), None);
        c.submit_vm(DynamicVm::on_demand(VmId(0), spec2()), job(0, 100_000.0)).unwrap();
        let mut b = DynamicVm::on_demand(VmId(1), spec2());
        b.waiting_time = Some(30.0);
        c.submit_vm(b, job(1, 1000.0)).unwrap();
        let r = c.run().unwrap();
        let t = r.log.transitions.iter().find(|t| t.vm == VmId(1) && t.to == VmState::Failed).unwrap();
        assert_eq!(t.time, SimTime(30.0));
    }

    #[test]
    fn non_persistent_failure_is_immediate() {
        let mut c = cloud(one_host(2), None);
        c.submit_vm(DynamicVm::on_demand(VmId(0), spec2()), job(0, 5000.0)).unwrap();
        let mut b = DynamicVm::on_demand(VmId(1), spec2());
        b.persistent = false;
        c.submit_vm(b, job(1, 1000.0)).unwrap();
        let r = c.run().unwrap();
        let t = r.log.transitions.iter().find(|t| t.vm == VmId(1) && t.to == VmState::Failed).unwrap();
        assert_eq!(t.time, SimTime::ZERO);
        assert!(r.cloudlets_of(VmId(1)).all(|c| c.state == CloudletState::Abandoned));
    }

    #[test]
    fn minimum_running_time_guard() {
        let p = SpotParams { minimum_running_time: 10.0, ..Default::default() };
        let mut c = cloud(one_host(2), Some(40.0));
        c.submit_vm(spot(0, p), job(0, 100_000.0)).unwrap();
        c.schedule_interruption(VmId(0), 5.0).unwrap();
        c.schedule_interruption(VmId(0), 15.0).unwrap();
        let r = c.run().unwrap();
        assert_eq!(r.log.rejected_interruptions, vec![(VmId(0), SimTime(5.0))]);
        assert_eq!(r.log.interruptions.len(), 1);
        let i = r.log.interruptions[0];
        assert_eq!(i.signal_at, SimTime(15.0));
        assert_eq!(i.deallocate_at, SimTime(17.0));
        assert_eq!(i.executed_at, Some(SimTime(17.0)));
    }

    #[test]
    fn interrupting_a_terminated_vm_is_fatal() {
        let p = SpotParams { interruption_behavior: InterruptionBehavior::Terminate, ..Default::default() };
        let mut c = cloud(one_host(2), Some(40.0));
        c.submit_vm(spot(0, p), job(0, 100_000.0)).unwrap();
        c.schedule_interruption(VmId(0), 5.0).unwrap();
        c.schedule_interruption(VmId(0), 20.0).unwrap();
        assert!(matches!(c.run(), Err(SimError::NotInterruptible { state: VmState::Terminated, .. })));
    }

    #[test]
    fn interrupting_on_demand_is_fatal() {
        let mut c = cloud(one_host(2), Some(40.0));
        c.submit_vm(DynamicVm::on_demand(VmId(0), spec2()), job(0, 100_000.0)).unwrap();
        c.schedule_interruption(VmId(0), 5.0).unwrap();
        assert!(matches!(c.run(), Err(SimError::NotSpot(_))));
    }

    #[test]
    fn terminate_behavior_abandons_work() {
        let p = SpotParams { interruption_behavior: InterruptionBehavior::Terminate, ..Default::default() };
        let mut c = cloud(one_host(2), Some(40.0));
        c.submit_vm(spot(0, p), job(0, 20_000.0)).unwrap();
        c.schedule_interruption(VmId(0), 8.0).unwrap();
        let r = c.run().unwrap();
        let vm = r.vm(VmId(0)).unwrap();
        assert_eq!(vm.state, VmState::Terminated);
        assert_eq!(vm.interruption_count, 1);
        let cl = r.cloudlets_of(VmId(0)).next().unwrap();
        assert_eq!(cl.state, CloudletState::Abandoned);
        assert!((cl.remaining - 10_000.0).abs() < 1e-6);
    }

    #[test]
    fn hibernated_work_resumes_where_it_stopped() {
        // Spot runs 0..10 (warning from 8), hibernates with 10000 MI left,
        // resumes when the blocking on-demand VM is destroyed.
        let p = SpotParams { warning_time: 2.0, ..Default::default() };
        let mut c = cloud(one_host(2), None);
        c.submit_vm(spot(0, p), job(0, 20_000.0)).unwrap();
        let mut od = DynamicVm::on_demand(VmId(1), spec2());
        od.submission_delay = 8.0;
        c.submit_vm(od, job(1, 5_000.0)).unwrap();
        let r = c.run().unwrap();
        // On-demand runs 10..15, destroyed at 16, spot resumes at 16 and needs 10 s.
        let vm = r.vm(VmId(0)).unwrap();
        let recs = vm.history.records();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].stop, Some(SimTime(10.0)));
        assert_eq!(recs[1].start, SimTime(16.0));
        let cl = r.cloudlets_of(VmId(0)).next().unwrap();
        assert_eq!(cl.finished_at, Some(SimTime(26.0)));
        assert!((cl.executed - 20_000.0).abs() < 1e-6);
        assert!(r.log.violations.is_empty(), "{:?}", r.log.violations);
    }

    #[test]
    fn hibernation_expiry_terminates() {
        let p = SpotParams { hibernation_time: 5.0, ..Default::default() };
        let mut c = cloud(one_host(2), None);
        c.submit_vm(spot(0, p), job(0, 20_000.0)).unwrap();
        let mut od = DynamicVm::on_demand(VmId(1), spec2());
        od.submission_delay = 4.0;
        c.submit_vm(od, job(1, 50_000.0)).unwrap();
        let r = c.run().unwrap();
        let seq = r.state_sequence(VmId(0));
        assert_eq!(
            seq,
            vec![VmState::Waiting, VmState::Running, VmState::Warned, VmState::Hibernated, VmState::Terminated]
        );
        let t = r.log.transitions.iter().find(|t| t.vm == VmId(0) && t.to == VmState::Terminated).unwrap();
        assert_eq!(t.time, SimTime(11.0));
    }

    #[test]
    fn hibernation_expiry_survives_rounding() {
        // 2.1 + 0.3 - 2.1 is just below 0.3.
        let p = SpotParams { hibernation_time: 0.3, ..Default::default() };
        let mut c = cloud(one_host(2), None);
        c.submit_vm(spot(0, p), job(0, 20_000.0)).unwrap();
        let mut od = DynamicVm::on_demand(VmId(1), spec2());
        od.submission_delay = 0.1;
        c.submit_vm(od, job(1, 50_000.0)).unwrap();
        let r = c.run().unwrap();
        let t = r.log.transitions.iter().find(|t| t.vm == VmId(0) && t.to == VmState::Terminated).unwrap();
        assert_eq!(t.time, SimTime(2.1 + 0.3));
    }

    #[test]
    fn oldest_hibernated_vm_resumes_first() {
        // Two 1-PE spot VMs on a 2-PE host; a 2-PE on-demand evicts both;
        // afterwards a second 1-PE on-demand holds one PE, so only one spot fits.
        let one = VmSpec::new(1000.0, 1, 256, 100, 1000);
        let mut c = cloud(one_host(2), None);
        for id in 0..2 {
            c.submit_vm(DynamicVm::spot(VmId(id), one, SpotParams::default()), job(id, 100_000.0)).unwrap();
        }
        let mut od = DynamicVm::on_demand(VmId(2), spec2());
        od.submission_delay = 5.0;
        c.submit_vm(od, job(2, 1_000.0)).unwrap();
        let mut blocker = DynamicVm::on_demand(VmId(3), one);
        blocker.submission_delay = 6.0;
        c.submit_vm(blocker, job(3, 50_000.0)).unwrap();
        let r = c.run().unwrap();
        let first_resume = |id: u32| r.vm(VmId(id)).unwrap().history.records().get(1).map(|x| x.start);
        let a = first_resume(0).unwrap();
        let b = first_resume(1).unwrap();
        assert!(a < b, "oldest hibernated VM resumes first ({a} vs {b})");
        assert!(r.log.violations.is_empty(), "{:?}", r.log.violations);
    }

    #[test]
    fn guarded_spot_is_not_evicted() {
        let p = SpotParams { minimum_running_time: 100.0, ..Default::default() };
        let mut c = cloud(one_host(2), Some(50.0));
        c.submit_vm(spot(0, p), job(0, 20_000.0)).unwrap();
        let mut od = DynamicVm::on_demand(VmId(1), spec2());
        od.submission_delay = 5.0;
        c.submit_vm(od, job(1, 1_000.0)).unwrap();
        let r = c.run().unwrap();
        assert!(r.log.interruptions.is_empty());
        // Spot finishes at 20, destroyed at 21; on-demand starts then.
        assert_eq!(r.vm(VmId(1)).unwrap().created_at, Some(SimTime(21.0)));
    }

    #[test]
    fn hlem_policy_spreads_over_hosts() {
        let hosts = (0..3).map(|i| Host::new(HostId(i), HostSpec::new(8, 16384, 10000, 1_000_000))).collect();
        let mut c = CloudSim::new(engine(None), hosts, Box::new(Hlem::new(HlemParams::default())), BrokerConfig::default())
            .unwrap();
        c.record_scorecards();
        for id in 0..3 {
            c.submit_vm(DynamicVm::on_demand(VmId(id), spec2()), job(id, 1000.0)).unwrap();
        }
        let r = c.run().unwrap();
        let hosts: Vec<HostId> = (0..3).map(|i| r.vm(VmId(i)).unwrap().history.records()[0].host).collect();
        assert_eq!(hosts, vec![HostId(0), HostId(1), HostId(2)]);
        assert_eq!(r.log.scorecards.len(), 3);
    }
}
