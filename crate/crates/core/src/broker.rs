//! VM lifecycle state, spot parameters, execution history and the broker's
//! VM lists.
//!
//! The event-driven operations (submission, creation results, interruption,
//! resubmission) run inside [`crate::cloud::CloudSim`], which owns the kernel
//! and the datacenter; this module holds the state they act on.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::infrastructure::{CloudletId, CloudletScheduler, HostId, VmId, VmSpec};
use crate::kernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VmState {
    Waiting,
    Running,
    Warned,
    Hibernated,
    Terminated,
    Finished,
    Failed,
}

impl VmState {
    /// Legal lifecycle edges.
    ///
    /// `Warned -> Finished` covers a spot VM whose work completes inside its
    /// warning window; the pending deallocation then has nothing to interrupt.
    pub fn can_become(self, to: VmState) -> bool {
        use VmState::*;
        matches!(
            (self, to),
            (Waiting, Running)
                | (Waiting, Failed)
                | (Running, Warned)
                | (Warned, Hibernated)
                | (Warned, Terminated)
                | (Warned, Finished)
                | (Hibernated, Running)
                | (Hibernated, Terminated)
                | (Running, Finished)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, VmState::Terminated | VmState::Finished | VmState::Failed)
    }

    /// Placed on a host and executing.
    pub fn is_active(self) -> bool {
        matches!(self, VmState::Running | VmState::Warned)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InterruptionBehavior {
    Terminate,
    Hibernate,
}

/// Timing knobs of a spot instance, all in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpotParams {
    pub interruption_behavior: InterruptionBehavior,
    pub minimum_running_time: f64,
    pub warning_time: f64,
    pub hibernation_time: f64,
}

impl Default for SpotParams {
    fn default() -> Self {
        Self {
            interruption_behavior: InterruptionBehavior::Hibernate,
            minimum_running_time: 0.0,
            warning_time: 2.0,
            hibernation_time: 3600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VmKind {
    OnDemand,
    Spot(SpotParams),
}

impl VmKind {
    pub fn is_spot(&self) -> bool {
        matches!(self, VmKind::Spot(_))
    }

    pub fn spot(&self) -> Option<&SpotParams> {
        match self {
            VmKind::Spot(p) => Some(p),
            VmKind::OnDemand => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            VmKind::OnDemand => "ON_DEMAND",
            VmKind::Spot(_) => "SPOT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub host: HostId,
    pub start: SimTime,
    pub stop: Option<SimTime>,
}

/// Execution periods of one VM, in time order, at most one still open.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionHistory {
    records: Vec<ExecutionRecord>,
}

impl ExecutionHistory {
    pub fn from_records(records: Vec<ExecutionRecord>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[ExecutionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn current(&self) -> Option<&ExecutionRecord> {
        self.records.last().filter(|r| r.stop.is_none())
    }

    pub fn open(&mut self, host: HostId, at: SimTime) {
        debug_assert!(self.current().is_none());
        debug_assert!(self.records.last().map_or(true, |r| r.stop.is_some_and(|s| s <= at)));
        self.records.push(ExecutionRecord { host, start: at, stop: None });
    }

    pub fn close(&mut self, at: SimTime) {
        if let Some(r) = self.records.last_mut().filter(|r| r.stop.is_none()) {
            debug_assert!(r.start <= at);
            r.stop = Some(at);
        }
    }

    /// Idle gaps between consecutive execution periods.
    pub fn gaps(&self) -> Vec<f64> {
        self.records
            .windows(2)
            .filter_map(|w| w[0].stop.map(|stop| w[1].start - stop))
            .collect()
    }

    /// Mean of the gaps; `None` with fewer than two records.
    pub fn average_interruption_time(&self) -> Option<f64> {
        let gaps = self.gaps();
        if gaps.is_empty() {
            None
        } else {
            Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
        }
    }

    pub fn hosts(&self) -> Vec<HostId> {
        self.records.iter().map(|r| r.host).collect()
    }

    /// Non-overlapping, time-ordered, only the last record may be open.
    pub fn is_well_formed(&self) -> bool {
        let n = self.records.len();
        self.records.iter().enumerate().all(|(i, r)| match r.stop {
            Some(stop) => stop >= r.start && (i + 1 == n || self.records[i + 1].start >= stop),
            None => i + 1 == n,
        })
    }
}

/// A VM request with its lifecycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicVm {
    pub id: VmId,
    pub label: String,
    pub spec: VmSpec,
    pub kind: VmKind,
    pub state: VmState,
    pub persistent: bool,
    /// How long a persistent request may wait for its first placement.
    pub waiting_time: Option<f64>,
    pub submission_delay: f64,
    /// Try this host first (trace VMs are bound to their machine).
    pub preferred_host: Option<HostId>,
    pub cloudlets: Vec<CloudletId>,
    pub requested_at: Option<SimTime>,
    pub created_at: Option<SimTime>,
    pub destroyed_at: Option<SimTime>,
    pub host: Option<HostId>,
    pub history: ExecutionHistory,
    pub interruption_count: u32,
    pub(crate) scheduler: CloudletScheduler,
    pub(crate) scheduled_finish: Option<SimTime>,
    pub(crate) work_done: bool,
    pub(crate) awaiting_clearance: bool,
    pub(crate) hibernated_since: Option<SimTime>,
    pub(crate) started_once: bool,
    pub(crate) waiting_expiry_scheduled: bool,
}

impl DynamicVm {
    pub fn new(id: VmId, spec: VmSpec, kind: VmKind) -> Self {
        Self {
            id,
            label: String::new(),
            spec,
            kind,
            state: VmState::Waiting,
            persistent: true,
            waiting_time: None,
            submission_delay: 0.0,
            preferred_host: None,
            cloudlets: Vec::new(),
            requested_at: None,
            created_at: None,
            destroyed_at: None,
            host: None,
            history: ExecutionHistory::default(),
            interruption_count: 0,
            scheduler: CloudletScheduler::default(),
            scheduled_finish: None,
            work_done: false,
            awaiting_clearance: false,
            hibernated_since: None,
            started_once: false,
            waiting_expiry_scheduled: false,
        }
    }

    pub fn on_demand(id: VmId, spec: VmSpec) -> Self {
        Self::new(id, spec, VmKind::OnDemand)
    }

    pub fn spot(id: VmId, spec: VmSpec, params: SpotParams) -> Self {
        Self::new(id, spec, VmKind::Spot(params))
    }

    pub fn is_spot(&self) -> bool {
        self.kind.is_spot()
    }

    pub fn transition(&mut self, to: VmState) -> Result<VmState, SimError> {
        let from = self.state;
        if !from.can_become(to) {
            return Err(SimError::IllegalTransition { vm: self.id, from, to });
        }
        self.state = to;
        Ok(from)
    }

    /// Seconds the VM has been running in its current execution period.
    pub fn current_runtime(&self, now: SimTime) -> Option<f64> {
        self.history.current().map(|r| now - r.start)
    }

    /// Whether a capacity interruption may be signalled now.
    pub fn past_minimum_running_time(&self, now: SimTime) -> bool {
        match (&self.kind, self.current_runtime(now)) {
            (VmKind::Spot(p), Some(run)) => run >= p.minimum_running_time,
            _ => false,
        }
    }

    /// Spot VM that a clearance may interrupt right now.
    pub fn is_clearable(&self, now: SimTime) -> bool {
        self.state == VmState::Running && !self.work_done && self.past_minimum_running_time(now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrokerList {
    Waiting,
    Exec,
    Resubmitting,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    #[serde(default)]
    pub shutdown_when_idle: bool,
    #[serde(default = "default_destruction_delay")]
    pub vm_destruction_delay: f64,
}

fn default_destruction_delay() -> f64 {
    1.0
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self { shutdown_when_idle: false, vm_destruction_delay: 1.0 }
    }
}

/// The broker's four VM lists. Every submitted VM sits in exactly one.
#[derive(Debug, Clone, Default)]
pub struct DynamicBroker {
    pub config: BrokerConfig,
    waiting: Vec<VmId>,
    exec: Vec<VmId>,
    resubmitting: Vec<VmId>,
    finished: Vec<VmId>,
}

impl DynamicBroker {
    pub fn new(config: BrokerConfig) -> Self {
        Self { config, ..Default::default() }
    }

    fn list_mut(&mut self, l: BrokerList) -> &mut Vec<VmId> {
        match l {
            BrokerList::Waiting => &mut self.waiting,
            BrokerList::Exec => &mut self.exec,
            BrokerList::Resubmitting => &mut self.resubmitting,
            BrokerList::Finished => &mut self.finished,
        }
    }

    pub fn list(&self, l: BrokerList) -> &[VmId] {
        match l {
            BrokerList::Waiting => &self.waiting,
            BrokerList::Exec => &self.exec,
            BrokerList::Resubmitting => &self.resubmitting,
            BrokerList::Finished => &self.finished,
        }
    }

    pub fn find(&self, vm: VmId) -> Option<BrokerList> {
        [BrokerList::Waiting, BrokerList::Exec, BrokerList::Resubmitting, BrokerList::Finished]
            .into_iter()
            .find(|l| self.list(*l).contains(&vm))
    }

    pub fn insert(&mut self, vm: VmId, l: BrokerList) {
        debug_assert!(self.find(vm).is_none());
        self.list_mut(l).push(vm);
    }

    /// Moves `vm` to the end of `to`, wherever it currently is.
    pub fn move_to(&mut self, vm: VmId, to: BrokerList) {
        if let Some(from) = self.find(vm) {
            if from == to {
                return;
            }
            self.list_mut(from).retain(|v| *v != vm);
        }
        self.list_mut(to).push(vm);
    }

    pub fn total(&self) -> usize {
        self.waiting.len() + self.exec.len() + self.resubmitting.len() + self.finished.len()
    }

    /// Something is still pending or running.
    pub fn has_work(&self) -> bool {
        !(self.waiting.is_empty() && self.exec.is_empty() && self.resubmitting.is_empty())
    }

    /// Each id appears in exactly one list.
    pub fn is_partition(&self) -> bool {
        let mut all: Vec<VmId> =
            self.waiting.iter().chain(&self.exec).chain(&self.resubmitting).chain(&self.finished).copied().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        all.len() == n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(h: u32, start: f64, stop: Option<f64>) -> ExecutionRecord {
        ExecutionRecord { host: HostId(h), start: SimTime(start), stop: stop.map(SimTime) }
    }

    #[test]
    fn single_gap_average() {
        let h = ExecutionHistory::from_records(vec![rec(1, 0.0, Some(10.0)), rec(2, 30.0, Some(50.0))]);
        assert_eq!(h.average_interruption_time(), Some(20.0));
    }

    #[test]
    fn mean_of_two_gaps() {
        let h = ExecutionHistory::from_records(vec![
            rec(0, 0.0, Some(10.0)),
            rec(0, 20.0, Some(30.0)),
            rec(0, 50.0, Some(60.0)),
        ]);
        // oracle: gaps 10 and 20
        assert_eq!(h.gaps(), vec![10.0, 20.0]);
        assert_eq!(h.average_interruption_time(), Some(15.0));
    }

    #[test]
    fn single_record_has_no_average() {
        let h = ExecutionHistory::from_records(vec![rec(0, 0.0, Some(10.0))]);
        assert_eq!(h.average_interruption_time(), None);
    }

    #[test]
    fn open_last_record_still_counts_its_start() {
        let h = ExecutionHistory::from_records(vec![rec(0, 0.0, Some(10.0)), rec(1, 25.0, None)]);
        assert_eq!(h.average_interruption_time(), Some(15.0));
        assert!(h.is_well_formed());
    }

    #[test]
    fn history_open_close() {
        let mut h = ExecutionHistory::default();
        h.open(HostId(3), SimTime(1.0));
        assert!(h.current().is_some());
        h.close(SimTime(4.0));
        assert!(h.current().is_none());
        assert_eq!(h.records()[0].stop, Some(SimTime(4.0)));
        assert!(h.is_well_formed());
    }

    #[test]
    fn lifecycle_edges() {
        use VmState::*;
        let legal = [
            (Waiting, Running),
            (Waiting, Failed),
            (Running, Warned),
            (Warned, Hibernated),
            (Warned, Terminated),
            (Hibernated, Running),
            (Hibernated, Terminated),
            (Running, Finished),
        ];
        for (a, b) in legal {
            assert!(a.can_become(b), "{a:?}->{b:?}");
        }
        assert!(!Running.can_become(Hibernated));
        assert!(!Terminated.can_become(Running));
        assert!(!Waiting.can_become(Warned));
        assert!(!Finished.can_become(Running));
    }

    #[test]
    fn illegal_transition_is_an_error() {
        let mut vm = DynamicVm::on_demand(VmId(0), VmSpec::new(1000.0, 1, 1, 1, 1));
        assert!(vm.transition(VmState::Hibernated).is_err());
        assert_eq!(vm.state, VmState::Waiting);
    }

    #[test]
    fn minimum_running_time_guard() {
        let params = SpotParams { minimum_running_time: 10.0, ..Default::default() };
        let mut vm = DynamicVm::spot(VmId(0), VmSpec::new(1000.0, 1, 1, 1, 1), params);
        vm.transition(VmState::Running).unwrap();
        vm.history.open(HostId(0), SimTime(0.0));
        assert!(!vm.past_minimum_running_time(SimTime(5.0)));
        assert!(vm.past_minimum_running_time(SimTime(10.0)));
        assert!(vm.is_clearable(SimTime(15.0)));
    }

    #[test]
    fn broker_lists_partition() {
        let mut b = DynamicBroker::default();
        b.insert(VmId(0), BrokerList::Waiting);
        b.insert(VmId(1), BrokerList::Waiting);
        b.move_to(VmId(0), BrokerList::Exec);
        b.move_to(VmId(1), BrokerList::Resubmitting);
        b.move_to(VmId(0), BrokerList::Finished);
        assert_eq!(b.find(VmId(0)), Some(BrokerList::Finished));
        assert!(b.is_partition());
        assert_eq!(b.total(), 2);
        assert!(b.has_work());
    }
}
