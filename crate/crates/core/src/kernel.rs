//! Deterministic discrete-event engine.
//!
//! The kernel owns the simulation clock, the future event queue and the
//! entity registry. Events are delivered strictly in `(time, sequence)`
//! order, so two events scheduled for the same instant are delivered in
//! the order they were scheduled.
//!
//! Domain state lives outside the kernel: [`Simulation::run`] hands every
//! due event to an [`EventHandler`], which may schedule further events
//! through the `&mut Simulation` it receives.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::infrastructure::{CloudletId, VmId};

/// Simulation time in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn max(self, other: SimTime) -> SimTime {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn min(self, other: SimTime) -> SimTime {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: f64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = f64;
    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}s", self.0)
    }
}

/// Dense identifier handed out by [`Simulation::register_entity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

impl EntityId {
    /// Source and destination of kernel-generated events (ticks, end of run).
    pub const KERNEL: EntityId = EntityId(u32::MAX);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventTag {
    VmCreate,
    VmCreateRetry,
    VmDestroy,
    CloudletSubmit,
    CloudletFinish,
    SpotInterruptWarning,
    SpotDeallocate,
    HibernationExpire,
    WaitingExpire,
    SchedulingTick,
    EndOfSimulation,
}

impl EventTag {
    fn code(self) -> u8 {
        self as u8
    }
}

/// Domain object an event refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    None,
    Vm(VmId),
    Cloudlet(CloudletId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time: SimTime,
    pub tag: EventTag,
    pub source: EntityId,
    pub destination: EntityId,
    pub payload: Payload,
}

impl SimEvent {
    pub fn new(time: SimTime, tag: EventTag, source: EntityId, destination: EntityId, payload: Payload) -> Self {
        Self { time, tag, source, destination, payload }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub min_time_between_events: f64,
    #[serde(default)]
    pub terminate_at: Option<f64>,
    pub scheduling_interval: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { min_time_between_events: 0.1, terminate_at: None, scheduling_interval: 1.0 }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.min_time_between_events > 0.0 && self.min_time_between_events.is_finite()) {
            return Err(SimError::InvalidConfig("min_time_between_events must be > 0".into()));
        }
        if !(self.scheduling_interval > 0.0 && self.scheduling_interval.is_finite()) {
            return Err(SimError::InvalidConfig("scheduling_interval must be > 0".into()));
        }
        if let Some(t) = self.terminate_at {
            if !(t >= 0.0) {
                return Err(SimError::InvalidConfig("terminate_at must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Tick period rounded up to a whole multiple of the minimum event spacing.
    pub fn tick_period(&self) -> f64 {
        let q = self.min_time_between_events;
        (self.scheduling_interval / q).ceil().max(1.0) * q
    }
}

/// One delivered event, as seen by the determinism log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub time: SimTime,
    pub tag: EventTag,
    pub source: EntityId,
    pub destination: EntityId,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Continues a 64-bit FNV-1a hash from `state` over `bytes`.
pub fn fnv1a_extend(mut state: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        state ^= u64::from(*b);
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// 64-bit FNV-1a hash of `bytes`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

#[derive(Debug, Clone, Default)]
pub struct DeliveryLog {
    fingerprint: u64,
    count: u64,
    records: Option<Vec<Delivery>>,
}

impl DeliveryLog {
    fn new(keep_records: bool) -> Self {
        Self { fingerprint: FNV_OFFSET, count: 0, records: keep_records.then(Vec::new) }
    }

    fn push(&mut self, d: Delivery) {
        let mut bytes = [0u8; 17];
        bytes[..8].copy_from_slice(&d.time.0.to_bits().to_le_bytes());
        bytes[8] = d.tag.code();
        bytes[9..13].copy_from_slice(&d.source.0.to_le_bytes());
        bytes[13..17].copy_from_slice(&d.destination.0.to_le_bytes());
        self.fingerprint = fnv1a_extend(self.fingerprint, &bytes);
        self.count += 1;
        if let Some(records) = self.records.as_mut() {
            records.push(d);
        }
    }

    /// FNV-1a hash over every `(time, tag, source, destination)` delivered.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn records(&self) -> Option<&[Delivery]> {
        self.records.as_deref()
    }
}

struct Queued {
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed: BinaryHeap is a max-heap and we want the earliest (time, seq).
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.event.time.cmp(&self.event.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Future event queue with FIFO tie-breaking.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: SimEvent) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued { seq, event });
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|q| q.event)
    }

    pub fn peek(&self) -> Option<&SimEvent> {
        self.heap.peek().map(|q| &q.event)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Receives every event the run loop delivers.
pub trait EventHandler {
    fn handle(&mut self, event: &SimEvent, sim: &mut Simulation) -> Result<(), SimError>;

    /// Whether periodic ticks are still needed while no other event is pending
    /// in the near future.
    fn is_busy(&self) -> bool {
        false
    }
}

/// A participant that only sees events addressed to its own id.
pub trait SimEntity {
    fn process_event(&mut self, event: &SimEvent, sim: &mut Simulation) -> Result<(), SimError>;
}

struct EntityRouter<'a> {
    entities: &'a mut [Box<dyn SimEntity>],
}

impl EventHandler for EntityRouter<'_> {
    fn handle(&mut self, event: &SimEvent, sim: &mut Simulation) -> Result<(), SimError> {
        if event.destination == EntityId::KERNEL {
            for e in self.entities.iter_mut() {
                e.process_event(event, sim)?;
            }
            return Ok(());
        }
        match self.entities.get_mut(event.destination.0 as usize) {
            Some(e) => e.process_event(event, sim),
            None => Err(SimError::UnknownEntity(event.destination)),
        }
    }
}

pub struct Simulation {
    config: EngineConfig,
    clock: SimTime,
    queue: EventQueue,
    entities: Vec<String>,
    started: bool,
    stop_requested: bool,
    log: DeliveryLog,
    pending_non_tick: usize,
}

impl Simulation {
    pub fn new(config: EngineConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self {
            config,
            clock: SimTime::ZERO,
            queue: EventQueue::new(),
            entities: Vec::new(),
            started: false,
            stop_requested: false,
            log: DeliveryLog::new(false),
            pending_non_tick: 0,
        })
    }

    /// Keep every delivered `(time, tag, src, dst)` in memory, not just the hash.
    pub fn keep_delivery_records(&mut self) {
        if self.log.records.is_none() {
            self.log.records = Some(Vec::new());
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn delivery_log(&self) -> &DeliveryLog {
        &self.log
    }

    pub fn entity_name(&self, id: EntityId) -> Option<&str> {
        self.entities.get(id.0 as usize).map(String::as_str)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn register_entity(&mut self, name: &str) -> Result<EntityId, SimError> {
        if self.started {
            return Err(SimError::RegistrationAfterStart(name.to_string()));
        }
        if self.entities.iter().any(|n| n == name) {
            return Err(SimError::DuplicateEntity(name.to_string()));
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(name.to_string());
        Ok(id)
    }

    pub fn schedule(&mut self, event: SimEvent) -> Result<(), SimError> {
        if event.time < self.clock || !event.time.0.is_finite() {
            return Err(SimError::EventInPast { now: self.clock, at: event.time, tag: event.tag });
        }
        if event.tag != EventTag::SchedulingTick {
            self.pending_non_tick += 1;
        }
        self.queue.push(event);
        Ok(())
    }

    /// Schedules an event `delay` seconds from now.
    pub fn send(
        &mut self,
        source: EntityId,
        destination: EntityId,
        delay: f64,
        tag: EventTag,
        payload: Payload,
    ) -> Result<(), SimError> {
        if !(delay >= 0.0) {
            return Err(SimError::EventInPast { now: self.clock, at: self.clock + delay, tag });
        }
        self.schedule(SimEvent::new(self.clock + delay, tag, source, destination, payload))
    }

    /// Ends the run after the event currently being handled.
    pub fn request_stop(&mut self) {
        self.stop_requested = true;
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn next_tick_after(&self, now: SimTime) -> SimTime {
        let period = self.config.tick_period();
        let k = (now.0 / period).floor() + 1.0;
        SimTime(k * period)
    }

    fn within_horizon(&self, t: SimTime) -> bool {
        self.config.terminate_at.map_or(true, |end| t.0 <= end)
    }

    fn schedule_tick(&mut self, busy: bool) {
        let mut at = self.next_tick_after(self.clock);
        if !busy {
            // Idle: skip ahead to the first tick at or after the next real event.
            match self.queue.peek() {
                Some(next) if self.pending_non_tick > 0 => {
                    let period = self.config.tick_period();
                    let k = (next.time.0 / period).ceil();
                    at = at.max(SimTime(k * period));
                }
                _ => return,
            }
        }
        if self.within_horizon(at) {
            self.queue.push(SimEvent::new(at, EventTag::SchedulingTick, EntityId::KERNEL, EntityId::KERNEL, Payload::None));
        }
    }

    fn deliver(&mut self, event: &SimEvent, handler: &mut dyn EventHandler) -> Result<(), SimError> {
        self.log.push(Delivery { time: event.time, tag: event.tag, source: event.source, destination: event.destination });
        handler.handle(event, self)
    }

    /// Runs until the queue drains, a stop is requested, or `terminate_at` is passed.
    /// Returns the final clock.
    pub fn run(&mut self, handler: &mut dyn EventHandler) -> Result<SimTime, SimError> {
        self.started = true;
        if !self.entities.is_empty() {
            self.schedule_tick(handler.is_busy());
        }
        while !self.stop_requested {
            let Some(event) = self.queue.pop() else { break };
            if !self.within_horizon(event.time) {
                break;
            }
            let is_tick = event.tag == EventTag::SchedulingTick;
            if !is_tick {
                self.pending_non_tick -= 1;
            }
            debug_assert!(event.time >= self.clock);
            self.clock = event.time;
            self.deliver(&event, handler)?;
            if is_tick {
                self.schedule_tick(handler.is_busy());
            }
        }
        if let Some(end) = self.config.terminate_at {
            if !self.stop_requested {
                self.clock = self.clock.max(SimTime(end));
            }
        }
        let end = SimEvent::new(self.clock, EventTag::EndOfSimulation, EntityId::KERNEL, EntityId::KERNEL, Payload::None);
        self.deliver(&end, handler)?;
        Ok(self.clock)
    }

    /// Runs with one boxed entity per registered id; events are routed by
    /// destination and kernel events are broadcast.
    pub fn run_entities(&mut self, entities: &mut [Box<dyn SimEntity>]) -> Result<SimTime, SimError> {
        let mut router = EntityRouter { entities };
        self.run(&mut router)
    }
}
